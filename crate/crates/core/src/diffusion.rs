//! Noise schedule, deterministic DDIM inversion and guided DDIM sampling.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::physics::{loss_total, ContactMasks, GuidanceWeights, MinMode};
use crate::model::scene::SceneModels;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_ZETA_START: f64 = 1e-4;
pub const DEFAULT_ZETA_END: f64 = 2e-2;

/// Gradient norms above this abort the step.
pub const GRADIENT_LIMIT: f64 = 1e6;

/// Per-step variances `ζ_t` and cumulative products `ᾱ_t = Π (1 - ζ_s)`,
/// with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    zeta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_ZETA_START, DEFAULT_ZETA_END).expect("default schedule")
    }
}

impl NoiseSchedule {
    /// `ζ` linear in `t` from `start` (t = 1) to `end` (t = T).
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("noise schedule", "need at least one step"));
        }
        let zeta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    start
                } else {
                    start + (end - start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_zeta(zeta)
    }

    pub fn from_zeta(zeta: Vec<f64>) -> Result<Self> {
        if zeta.is_empty() || zeta.iter().any(|z| !(*z > 0.0 && *z < 1.0)) {
            return Err(Error::invalid("noise schedule", "every ζ must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(zeta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for z in &zeta {
            acc *= 1.0 - z;
            alpha_bar.push(acc);
        }
        Ok(Self { zeta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.zeta.len()
    }

    pub fn zeta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(self.range_error(t));
        }
        Ok(self.zeta[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| self.range_error(t))
    }

    fn range_error(&self, t: usize) -> Error {
        Error::invalid("noise schedule", format!("timestep {t} outside 0..={}", self.steps()))
    }
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(op, format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

/// `x_t = √ᾱ_t x0 + √(1-ᾱ_t) ε`.
pub fn forward_diffuse(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len("forward_diffuse", x0.len(), eps.len())?;
    let a = sched.alpha_bar(t)?;
    let (sa, s1) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| sa * x + s1 * e).collect())
}

/// One-step denoised estimate `(x_t - √(1-ᾱ_t) ε) / √ᾱ_t`.
pub fn predict_x0(x_t: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_len("predict_x0", x_t.len(), eps.len())?;
    let a = sched.alpha_bar(t)?;
    let (sa, s1) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x_t.iter().zip(eps).map(|(x, e)| (x - s1 * e) / sa).collect())
}

/// [`predict_x0`] on a tape.
pub fn predict_x0_var<'t>(x_t: Var<'t>, t: usize, eps: Var<'t>, sched: &NoiseSchedule) -> Result<Var<'t>> {
    let a = sched.alpha_bar(t)?;
    x_t.sub(eps.scale((1.0 - a).sqrt())?)?.scale(1.0 / a.sqrt())
}

/// Deterministic DDIM step from `x̂0` and `ε` to noise level `t`.
fn ddim_compose(x0: &[f64], eps: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    forward_diffuse(x0, t, eps, sched)
}

fn check_grid(tau: usize, delta_t: usize, sched: &NoiseSchedule) -> Result<()> {
    if delta_t == 0 || tau > sched.steps() || tau % delta_t != 0 {
        return Err(Error::invalid(
            "ddim grid",
            format!("need Δt > 0 dividing τ ≤ T; got τ = {tau}, Δt = {delta_t}, T = {}", sched.steps()),
        ));
    }
    Ok(())
}

fn ensure_finite(x: &[f64], t: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLatent { t })
    }
}

/// Runs the deterministic sampler backwards in time, from `x0` at `t = 0`
/// to noise level `tau` on the grid `{0, Δt, …, τ}`.
pub fn ddim_invert<D: Denoiser>(
    x0: &[f64],
    tau: usize,
    delta_t: usize,
    denoiser: &D,
    ctx: &D::Context,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_grid(tau, delta_t, sched)?;
    check_len("ddim_invert", x0.len(), denoiser.dim())?;
    let mut x = x0.to_vec();
    for t in (0..tau).step_by(delta_t) {
        let eps = denoiser.eval(&x, t, ctx)?;
        let x0_hat = predict_x0(&x, t, &eps, sched)?;
        x = ddim_compose(&x0_hat, &eps, t + delta_t, sched)?;
        ensure_finite(&x, t + delta_t)?;
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradMode {
    /// Differentiate through the denoiser as well as the `x̂0` map.
    #[default]
    FullBackprop,
    /// Treat `ε` as constant; the gradient only passes the affine `x̂0` map.
    FrozenEpsilon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedStepConfig {
    pub tau: usize,
    pub delta_t: usize,
    pub rho: f64,
    pub grad_mode: GradMode,
    /// Optional max-norm clip of `∇_{x_t} L`.
    pub grad_clip: Option<f64>,
}

impl Default for GuidedStepConfig {
    fn default() -> Self {
        Self {
            tau: 50,
            delta_t: 2,
            rho: 10.0,
            grad_mode: GradMode::FullBackprop,
            grad_clip: None,
        }
    }
}

impl GuidedStepConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::invalid("step config", "τ must be positive"));
        }
        check_grid(self.tau, self.delta_t, sched)?;
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(Error::invalid("step config", format!("ρ must be finite and ≥ 0, got {}", self.rho)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("step config", "gradient clip must be positive"));
            }
        }
        Ok(())
    }
}

/// A differentiable objective on `x̂0` steering the sampler.
pub trait GuidanceObjective {
    /// Returns the scalar loss on the tape plus reported components.
    fn loss<'t>(&self, x0_hat: Var<'t>) -> Result<(Var<'t>, LossValues)>;

    /// Whether the objective can contribute a gradient at all.
    fn is_active(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub ho: f64,
    pub of: f64,
    pub pt: f64,
}

/// Physical guidance with fixed contact masks.
pub struct PhysicalGuidance<'a> {
    pub masks: &'a ContactMasks,
    pub weights: GuidanceWeights,
    pub models: SceneModels<'a>,
    pub mode: MinMode,
}

impl GuidanceObjective for PhysicalGuidance<'_> {
    fn loss<'t>(&self, x0_hat: Var<'t>) -> Result<(Var<'t>, LossValues)> {
        let terms = loss_total(x0_hat, self.masks, &self.weights, self.models, self.mode)?;
        let values = LossValues {
            total: terms.total.item()?,
            ho: terms.ho,
            of: terms.of,
            pt: terms.pt,
        };
        Ok((terms.total, values))
    }

    fn is_active(&self) -> bool {
        let w = &self.weights;
        !(w.lambda_ho == 0.0 && w.lambda_of == 0.0 && w.lambda_pt == 0.0)
    }
}

/// `L = (λ / 2) ‖x̂0 - y‖²`.
pub struct QuadraticGuidance {
    pub lambda: f64,
    pub target: Vec<f64>,
}

impl GuidanceObjective for QuadraticGuidance {
    fn loss<'t>(&self, x0_hat: Var<'t>) -> Result<(Var<'t>, LossValues)> {
        let tape = x0_hat.tape();
        let l = x0_hat
            .sub(tape.constant(Tensor::vector(self.target.clone())))?
            .square()?
            .sum()?
            .scale(0.5 * self.lambda)?;
        let total = l.item()?;
        Ok((
            l,
            LossValues {
                total,
                ..Default::default()
            },
        ))
    }

    fn is_active(&self) -> bool {
        self.lambda != 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub x_prev: Vec<f64>,
    pub x0_hat: Vec<f64>,
    pub loss: Option<LossValues>,
    pub grad_norm: f64,
}

/// One guided DDIM step from `t` to `t - Δt`.
#[allow(clippy::too_many_arguments)]
pub fn guided_ddim_step<D: Denoiser, G: GuidanceObjective + ?Sized>(
    x_t: &[f64],
    t: usize,
    delta_t: usize,
    denoiser: &D,
    ctx: &D::Context,
    guidance: Option<&G>,
    cfg: &GuidedStepConfig,
    sched: &NoiseSchedule,
) -> Result<StepOutput> {
    if t < delta_t || delta_t == 0 {
        return Err(Error::invalid("guided_ddim_step", format!("need t ≥ Δt > 0, got t = {t}, Δt = {delta_t}")));
    }
    check_len("guided_ddim_step", x_t.len(), denoiser.dim())?;
    let a = sched.alpha_bar(t)?;
    let s1 = (1.0 - a).sqrt();
    let active = guidance.filter(|g| cfg.rho != 0.0 && g.is_active());

    let (eps, grad, loss) = match active {
        None => (denoiser.eval(x_t, t, ctx)?, None, None),
        Some(g) => {
            let tape = Tape::new();
            let xv = tape.leaf(Tensor::vector(x_t.to_vec()));
            let (eps, x0_var) = match cfg.grad_mode {
                GradMode::FullBackprop => {
                    let e = denoiser.eval_var(xv, t, ctx)?;
                    (e.value().data().to_vec(), predict_x0_var(xv, t, e, sched)?)
                }
                GradMode::FrozenEpsilon => {
                    let e = denoiser.eval(x_t, t, ctx)?;
                    let ev = tape.constant(Tensor::vector(e.clone()));
                    (e, predict_x0_var(xv, t, ev, sched)?)
                }
            };
            let (l, values) = g.loss(x0_var)?;
            let grads = tape.backward(l)?;
            (eps, Some(grads.get(xv).into_data()), Some(values))
        }
    };

    let mut grad_norm = 0.0;
    let eps_mod = match grad {
        None => eps,
        Some(mut g) => {
            grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !grad_norm.is_finite() || grad_norm > GRADIENT_LIMIT {
                return Err(Error::GradientOverflow {
                    norm: grad_norm,
                    limit: GRADIENT_LIMIT,
                    t,
                });
            }
            if let Some(clip) = cfg.grad_clip {
                if grad_norm > clip {
                    let s = clip / grad_norm;
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
            eps.iter().zip(&g).map(|(e, gi)| e + cfg.rho * s1 * gi).collect()
        }
    };
    let x0_hat = predict_x0(x_t, t, &eps_mod, sched)?;
    let x_prev = ddim_compose(&x0_hat, &eps_mod, t - delta_t, sched)?;
    ensure_finite(&x_prev, t - delta_t)?;
    Ok(StepOutput {
        x_prev,
        x0_hat,
        loss,
        grad_norm,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub x0: Vec<f64>,
    /// Per-step (timestep, loss, gradient norm), in sampling order.
    pub steps: Vec<(usize, Option<LossValues>, f64)>,
}

/// Applies guided steps from `τ` down to `Δt` and returns the last `x̂0'`,
/// with `clamp` entries (the shape block) projected onto `[-1, 1]`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample_loop<D: Denoiser, G: GuidanceObjective + ?Sized>(
    x_tau: &[f64],
    denoiser: &D,
    ctx: &D::Context,
    guidance: Option<&G>,
    cfg: &GuidedStepConfig,
    sched: &NoiseSchedule,
    clamp: Option<Range<usize>>,
) -> Result<SampleOutput> {
    cfg.validate(sched)?;
    let mut x = x_tau.to_vec();
    let mut x0 = x.clone();
    let mut steps = Vec::with_capacity(cfg.tau / cfg.delta_t);
    let mut t = cfg.tau;
    while t >= cfg.delta_t {
        let out = guided_ddim_step(&x, t, cfg.delta_t, denoiser, ctx, guidance, cfg, sched)?;
        steps.push((t, out.loss, out.grad_norm));
        x = out.x_prev;
        x0 = out.x0_hat;
        t -= cfg.delta_t;
    }
    if let Some(r) = clamp {
        for v in &mut x0[r] {
            *v = v.clamp(-1.0, 1.0);
        }
    }
    Ok(SampleOutput { x0, steps })
}
