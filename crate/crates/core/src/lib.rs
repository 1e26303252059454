pub mod autodiff;
pub mod cdir;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod physics;
pub mod scenegen;

pub use error::{Error, Result};
