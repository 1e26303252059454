//! Noise-prediction models `ε(x_t, t, c)`.

mod analytic;
pub mod neural;
mod training;
mod weights;

pub use analytic::AnalyticGaussianDenoiser;
pub use neural::{Adam, NeuralConfig, NeuralContext, NeuralDenoiser, TrainBatch, TrainExample};
pub use training::{epoch_batches, step_rng, TrainConfig};
pub use weights::{load_optimizer, load_weights, load_weights_for, save_optimizer, save_weights, WeightBundle};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Raw per-scene conditioning inputs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Conditions {
    /// Observation vector standing in for image evidence.
    pub observation: Vec<f64>,
    /// Canonical coarse object points.
    pub points: Vec<[f64; 3]>,
}

pub trait Denoiser: Send + Sync {
    /// Per-scene state derived once from the conditions.
    type Context: Send + Sync;

    fn dim(&self) -> usize;

    fn context(&self, cond: &Conditions) -> Result<Self::Context>;

    /// Noise prediction on a tape; differentiable with respect to `x_t`.
    fn eval_var<'t>(&self, x_t: Var<'t>, t: usize, ctx: &Self::Context) -> Result<Var<'t>>;

    fn eval(&self, x_t: &[f64], t: usize, ctx: &Self::Context) -> Result<Vec<f64>> {
        let tape = Tape::inference();
        let out = self.eval_var(tape.constant(Tensor::vector(x_t.to_vec())), t, ctx)?;
        Ok(out.value().data().to_vec())
    }
}

pub(crate) fn check_dim(op: &'static str, expected: usize, found: &[usize]) -> Result<()> {
    if found != [expected] {
        return Err(Error::invalid(op, format!("expected input of shape [{expected}], got {found:?}")));
    }
    Ok(())
}

/// Either denoiser behind one type, for callers that pick at run time.
#[derive(Clone, Debug)]
pub enum AnyDenoiser {
    Analytic(AnalyticGaussianDenoiser),
    Neural(Box<NeuralDenoiser>),
}

pub enum AnyContext {
    Analytic,
    Neural(NeuralContext),
}

impl Denoiser for AnyDenoiser {
    type Context = AnyContext;

    fn dim(&self) -> usize {
        match self {
            AnyDenoiser::Analytic(d) => d.dim(),
            AnyDenoiser::Neural(d) => d.dim(),
        }
    }

    fn context(&self, cond: &Conditions) -> Result<AnyContext> {
        Ok(match self {
            AnyDenoiser::Analytic(_) => AnyContext::Analytic,
            AnyDenoiser::Neural(d) => AnyContext::Neural(d.context(cond)?),
        })
    }

    fn eval_var<'t>(&self, x_t: Var<'t>, t: usize, ctx: &AnyContext) -> Result<Var<'t>> {
        match (self, ctx) {
            (AnyDenoiser::Analytic(d), _) => d.eval_var(x_t, t, &()),
            (AnyDenoiser::Neural(d), AnyContext::Neural(c)) => d.eval_var(x_t, t, c),
            (AnyDenoiser::Neural(_), AnyContext::Analytic) => {
                Err(Error::invalid("denoiser", "neural denoiser needs a neural context"))
            }
        }
    }
}
