//! Posing a full scene (body plus object) from a flat parameter vector.

use super::body::{rows3, BodyModel};
use super::object::{ObjectPoseVar, ObjectTemplate};
use super::params::{ParamLayout, ParamVector};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// The immutable models a parameter vector is interpreted against.
#[derive(Clone, Copy, Debug)]
pub struct SceneModels<'a> {
    pub body: &'a BodyModel,
    pub object: &'a ObjectTemplate,
}

impl<'a> SceneModels<'a> {
    pub fn new(body: &'a BodyModel, object: &'a ObjectTemplate) -> Self {
        Self { body, object }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.body.joint_count())
    }
}

/// Scene geometry on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PosedSceneVar<'t> {
    pub human: Var<'t>,
    pub joints: Var<'t>,
    pub object: Var<'t>,
    pub pose: ObjectPoseVar<'t>,
}

/// Scene geometry as plain arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedScene {
    pub human: Vec<[f64; 3]>,
    pub joints: Vec<[f64; 3]>,
    pub object: Vec<[f64; 3]>,
}

pub fn pose_scene_var<'t>(x: Var<'t>, models: SceneModels<'_>) -> Result<PosedSceneVar<'t>> {
    let layout = models.layout();
    if x.shape() != [layout.dim()] {
        return Err(Error::Shape {
            op: "pose_scene",
            lhs: x.shape(),
            rhs: vec![layout.dim()],
        });
    }
    let k = layout.joints;
    let theta = x.narrow(0, 0, 6 * k)?.reshape(&[k, 6])?;
    let beta = x.narrow(0, layout.beta().start, layout.beta().len())?;
    let rot = x.narrow(0, layout.rot_o().start, 6)?;
    let trans = x.narrow(0, layout.trans_o().start, 3)?;
    let (human, joints) = models.body.forward_var(theta, beta)?;
    let pose = ObjectPoseVar::from_params(rot, trans)?;
    let object = pose.vertices(models.object)?;
    Ok(PosedSceneVar {
        human,
        joints,
        object,
        pose,
    })
}

pub fn pose_scene(x: &ParamVector, models: SceneModels<'_>) -> Result<PosedScene> {
    if x.layout() != models.layout() {
        return Err(Error::invalid(
            "pose_scene",
            format!("parameter layout has {} joints, body has {}", x.layout().joints, models.body.joint_count()),
        ));
    }
    let tape = Tape::inference();
    let v = pose_scene_var(tape.constant(Tensor::vector(x.as_slice().to_vec())), models)?;
    Ok(PosedScene {
        human: rows3(&v.human.value()),
        joints: rows3(&v.joints.value()),
        object: rows3(&v.object.value()),
    })
}
