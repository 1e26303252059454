//! Body and object geometry, rotations and the optimization state layout.

pub mod body;
pub mod mesh;
pub mod object;
pub mod params;
pub mod rotation;
pub mod scene;
pub mod sdf;

pub use body::{lbs_forward, BodyModel, JOINT_COUNT};
pub use mesh::Mesh;
pub use object::{object_forward, world_sdf, ObjectPoseVar, ObjectTemplate, PosedSdf, TemplateRegistry};
pub use params::{ParamLayout, ParamVector, SceneParams, BETA_DIM};
pub use rotation::{rot6d_to_matrix, Mat3};
pub use sdf::{SdfGrid, SdfShape};
pub use scene::{pose_scene, pose_scene_var, PosedScene, PosedSceneVar, SceneModels};
