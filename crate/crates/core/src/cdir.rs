//! Contact-driven iterative refinement: re-estimate contact masks from the
//! current estimate, then invert and resample under physical guidance.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor};
use crate::denoiser::Denoiser;
use crate::diffusion::{ddim_invert, ddim_sample_loop, GuidedStepConfig, LossValues, NoiseSchedule, PhysicalGuidance};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_scene, EvalOptions, EvalReport};
use crate::model::object::PosedSdf;
use crate::model::{pose_scene, ParamVector, SceneModels};
use crate::physics::{
    loss_total, predict_contact_masks, ContactMasks, GuidanceWeights, MaskSizes, MinMode, DEFAULT_CONTACT_THRESHOLD,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub tolerance: f64,
    pub patience: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            patience: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdirConfig {
    pub n_iters: usize,
    /// Sampler settings. Its `rho` is the guidance scale actually used.
    pub step: GuidedStepConfig,
    pub weights: GuidanceWeights,
    pub contact_threshold: f64,
    pub min_mode: MinMode,
    pub early_stop: Option<EarlyStop>,
}

impl Default for CdirConfig {
    fn default() -> Self {
        let step = GuidedStepConfig::default();
        Self {
            n_iters: 10,
            weights: GuidanceWeights {
                rho: step.rho,
                ..GuidanceWeights::default()
            },
            step,
            contact_threshold: DEFAULT_CONTACT_THRESHOLD,
            min_mode: MinMode::default(),
            early_stop: None,
        }
    }
}

impl CdirConfig {
    /// Two outer iterations instead of ten.
    pub fn faster() -> Self {
        Self {
            n_iters: 2,
            ..Self::default()
        }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.step.rho = rho;
        self.weights.rho = rho;
        self
    }

    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::invalid("cdir config", "need at least one iteration"));
        }
        self.step.validate(sched)?;
        self.weights.validate()?;
        if !(self.contact_threshold.is_finite() && self.contact_threshold > 0.0) {
            return Err(Error::invalid("cdir config", "contact threshold must be positive"));
        }
        if let MinMode::Soft { temperature } = self.min_mode {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(Error::invalid("cdir config", "soft-min temperature must be positive"));
            }
        }
        if let Some(es) = self.early_stop {
            if !(es.tolerance >= 0.0) || es.patience == 0 {
                return Err(Error::invalid("cdir config", "early stop needs tolerance ≥ 0 and patience ≥ 1"));
            }
        }
        Ok(())
    }
}

/// State after `iteration` refinement passes (0 is the initial estimate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub x0: Vec<f64>,
    /// Physical losses of `x0` under the masks estimated from `x0`.
    pub loss: LossValues,
    pub masks: MaskSizes,
    pub mask_digest: String,
    /// Digest of the masks that guided the pass producing `x0`.
    pub used_mask_digest: Option<String>,
    /// `‖x0 − previous x0‖`.
    pub step_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CdirTrace {
    pub records: Vec<IterationRecord>,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    iteration: usize,
    total: f64,
    ho: f64,
    of: f64,
    pt: f64,
    mask_human: usize,
    mask_object: usize,
    mask_floor: usize,
    step_norm: f64,
    mask_digest: &'a str,
}

impl CdirTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON record per iteration.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            let line = TraceLine {
                iteration: r.iteration,
                total: r.loss.total,
                ho: r.loss.ho,
                of: r.loss.of,
                pt: r.loss.pt,
                mask_human: r.masks.human,
                mask_object: r.masks.object,
                mask_floor: r.masks.floor,
                step_norm: r.step_norm,
                mask_digest: &r.mask_digest,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdirOutput {
    pub x0: ParamVector,
    pub trace: CdirTrace,
}

fn mask_digest(m: &ContactMasks) -> String {
    let mut h = Sha256::new();
    for mask in [&m.m_h, &m.m_o, &m.m_f] {
        h.update((mask.len() as u64).to_le_bytes());
        for v in mask {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Contact masks of a parameter vector.
pub fn estimate_masks(x: &ParamVector, models: SceneModels<'_>, threshold: f64) -> Result<ContactMasks> {
    let posed = pose_scene(x, models)?;
    let sdf = PosedSdf::new(models.object, x.rot_o(), x.trans_o())?;
    predict_contact_masks(&posed.human, &posed.object, &sdf, threshold)
}

/// Physical losses of `x` under `masks`, without gradients.
pub fn evaluate_losses(
    x: &ParamVector,
    masks: &ContactMasks,
    weights: &GuidanceWeights,
    models: SceneModels<'_>,
    mode: MinMode,
) -> Result<LossValues> {
    let tape = Tape::inference();
    let xv = tape.constant(Tensor::vector(x.as_slice().to_vec()));
    let t = loss_total(xv, masks, weights, models, mode)?;
    Ok(LossValues {
        total: t.total.item()?,
        ho: t.ho,
        of: t.of,
        pt: t.pt,
    })
}

fn record(
    iteration: usize,
    x: &ParamVector,
    prev: Option<&ParamVector>,
    used: Option<String>,
    cfg: &CdirConfig,
    models: SceneModels<'_>,
) -> Result<(IterationRecord, ContactMasks)> {
    let masks = estimate_masks(x, models, cfg.contact_threshold)?;
    let loss = evaluate_losses(x, &masks, &cfg.weights, models, cfg.min_mode)?;
    Ok((
        IterationRecord {
            iteration,
            x0: x.as_slice().to_vec(),
            loss,
            masks: masks.sizes(),
            mask_digest: mask_digest(&masks),
            used_mask_digest: used,
            step_norm: prev.map_or(0.0, |p| x.distance(p)),
        },
        masks,
    ))
}

/// Runs the refinement loop from `init`.
pub fn cdir_run<D: Denoiser>(
    init: &ParamVector,
    models: SceneModels<'_>,
    denoiser: &D,
    ctx: &D::Context,
    cfg: &CdirConfig,
    sched: &NoiseSchedule,
) -> Result<CdirOutput> {
    cfg.validate(sched)?;
    if !init.is_finite() {
        return Err(Error::NonFinite {
            op: "cdir initial estimate".into(),
        });
    }
    if init.len() != denoiser.dim() {
        return Err(Error::invalid(
            "cdir_run",
            format!("estimate has {} values, denoiser expects {}", init.len(), denoiser.dim()),
        ));
    }
    let layout = init.layout();
    let (first, mut masks) = record(0, init, None, None, cfg, models)?;
    let mut trace = CdirTrace { records: vec![first] };
    let mut x = init.clone();
    let mut quiet = 0;
    for n in 0..cfg.n_iters {
        let wrap = |e: Error| Error::Iteration {
            iteration: n,
            source: Box::new(e),
        };
        let guidance = PhysicalGuidance {
            masks: &masks,
            weights: cfg.weights,
            models,
            mode: cfg.min_mode,
        };
        let x_tau = ddim_invert(x.as_slice(), cfg.step.tau, cfg.step.delta_t, denoiser, ctx, sched).map_err(wrap)?;
        let out = ddim_sample_loop(&x_tau, denoiser, ctx, Some(&guidance), &cfg.step, sched, Some(layout.beta()))
            .map_err(wrap)?;
        let next = ParamVector::new(layout, out.x0).map_err(wrap)?;
        let used = mask_digest(&masks);
        let (rec, next_masks) = record(n + 1, &next, Some(&x), Some(used), cfg, models).map_err(wrap)?;
        let small = rec.step_norm;
        trace.records.push(rec);
        x = next;
        masks = next_masks;
        if let Some(es) = cfg.early_stop {
            quiet = if small < es.tolerance { quiet + 1 } else { 0 };
            if quiet >= es.patience {
                break;
            }
        }
    }
    Ok(CdirOutput { x0: x, trace })
}

/// One scene for batch refinement and evaluation.
pub struct SweepScene<'a, C> {
    pub id: String,
    pub init: ParamVector,
    pub gt: ParamVector,
    pub models: SceneModels<'a>,
    pub ctx: C,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub name: String,
    pub scenes: usize,
    pub failures: usize,
    pub mean: EvalReport,
    pub median: EvalReport,
    pub seconds: f64,
}

/// Refines every scene under each configuration and aggregates metrics.
/// With `skip_failures`, failing scenes are counted and left out;
/// otherwise the first failure aborts.
pub fn sweep<D: Denoiser>(
    configs: &[(String, CdirConfig)],
    scenes: &[SweepScene<'_, D::Context>],
    denoiser: &D,
    sched: &NoiseSchedule,
    eval: &EvalOptions,
    skip_failures: bool,
) -> Result<Vec<SweepRow>> {
    if scenes.is_empty() {
        return Err(Error::invalid("sweep", "need at least one scene"));
    }
    if configs.is_empty() {
        return Err(Error::invalid("sweep", "need at least one configuration"));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for (name, cfg) in configs {
        cfg.validate(sched)?;
        let start = Instant::now();
        let mut reports = Vec::new();
        let mut failures = 0;
        for s in scenes {
            let result = cdir_run(&s.init, s.models, denoiser, &s.ctx, cfg, sched)
                .and_then(|out| evaluate_scene(&out.x0, &s.gt, s.models, eval));
            match result {
                Ok(r) => reports.push(r),
                Err(_) if skip_failures => failures += 1,
                Err(e) => return Err(e),
            }
        }
        let agg = aggregate(&reports);
        rows.push(SweepRow {
            name: name.clone(),
            scenes: reports.len(),
            failures,
            mean: agg.mean,
            median: agg.median,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}
