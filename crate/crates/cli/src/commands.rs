use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hoi_refine::cdir::{cdir_run, sweep, CdirConfig, SweepRow, SweepScene};
use hoi_refine::denoiser::{
    epoch_batches, load_optimizer, load_weights, save_optimizer, save_weights, step_rng, Adam, AnalyticGaussianDenoiser,
    AnyDenoiser, Denoiser, NeuralDenoiser, TrainExample,
};
use hoi_refine::metrics::{aggregate, evaluate_scene, format_report, AggregateReport, EvalOptions, EvalReport, SceneReport};
use hoi_refine::model::{BodyModel, ObjectTemplate, ParamLayout, ParamVector, SceneModels, TemplateRegistry};
use hoi_refine::scenegen::{export_obj, make_dataset, Manifest, Scene};
use hoi_refine::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;

pub const PREDICTION_FORMAT_VERSION: u32 = 1;
const PRIOR_VAR_FLOOR: f64 = 1e-4;

type Result<T> = std::result::Result<T, CliError>;

/// Line-delimited JSON log.
pub struct JsonLog {
    file: fs::File,
    path: PathBuf,
}

impl JsonLog {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn record(&mut self, value: serde_json::Value) -> Result<()> {
        writeln!(self.file, "{value}").map_err(|e| CliError::io(&self.path, e))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn start(cfg: &RunConfig, dir: &Path) -> Result<()> {
    cfg.validate()?;
    cfg.write_snapshot(dir)
}

/// Scenes of one split with their ids, in manifest order.
pub fn load_split_ids(data_root: &Path, split: &str, limit: usize) -> Result<Vec<(String, Scene)>> {
    let manifest = Manifest::load(&data_root.join("manifest.json"))?;
    let files = &manifest.split(split)?.files;
    let take = if limit == 0 { files.len() } else { limit.min(files.len()) };
    files[..take]
        .iter()
        .map(|f| {
            let id = Path::new(f).file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok((id, Scene::load(&data_root.join(f))?))
        })
        .collect()
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Manifest> {
    start(cfg, &cfg.data_root)?;
    let manifest = make_dataset(&cfg.data_root, &cfg.dataset(), &BodyModel::mini(), &TemplateRegistry::builtin())?;
    Ok(manifest)
}

fn examples(scenes: &[(String, Scene)], reg: &TemplateRegistry) -> Result<Vec<TrainExample>> {
    scenes
        .iter()
        .map(|(_, s)| {
            let tmpl = reg.get(&s.template_id)?;
            Ok(TrainExample {
                x0: s.gt.as_slice().to_vec(),
                cond: s.conditions(&tmpl),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainState {
    epochs_done: usize,
    step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs_done: usize,
    pub steps: usize,
    pub val_loss: f64,
    pub weights: PathBuf,
}

pub fn weights_path(cfg: &RunConfig) -> PathBuf {
    if cfg.weights.is_empty() {
        cfg.out.join("weights.shoi")
    } else {
        PathBuf::from(&cfg.weights)
    }
}

/// Trains the neural denoiser. After every epoch the weights, optimizer
/// state and progress are checkpointed in the run directory, so a failed
/// run keeps its last good checkpoint and `resume` continues from it.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    start(cfg, &cfg.out)?;
    let reg = TemplateRegistry::builtin();
    let train = examples(&load_split_ids(&cfg.data_root, "train", 0)?, &reg)?;
    let val = examples(&load_split_ids(&cfg.data_root, "val", 0)?, &reg)?;
    let tc = cfg.training();
    let nc = cfg.neural();
    let sched = cfg.schedule();
    let t_max = tc.t_max.unwrap_or(sched.steps());

    let ckpt = cfg.out.join("checkpoint.shoi");
    let opt_path = cfg.out.join("optimizer.shoi");
    let state_path = cfg.out.join("train_state.json");
    let resuming = cfg.resume && state_path.exists();
    let (mut den, mut adam, mut state) = if resuming {
        let text = fs::read_to_string(&state_path).map_err(|e| CliError::io(&state_path, e))?;
        let state: TrainState = serde_json::from_str(&text).map_err(Error::from)?;
        let bundle = hoi_refine::denoiser::load_weights_for(&ckpt, &nc)?;
        let mut adam = load_optimizer(&opt_path, &nc)?;
        adam.lr = tc.lr;
        (NeuralDenoiser::from_bundle(bundle)?, adam, state)
    } else {
        (
            NeuralDenoiser::new(nc.clone(), sched.clone())?,
            Adam::new(tc.lr),
            TrainState { epochs_done: 0, step: 0 },
        )
    };
    let mut log = JsonLog::open(&cfg.out.join("loss.jsonl"), resuming)?;
    let val_loss = |den: &NeuralDenoiser| den.eval_loss(&val, t_max, &mut step_rng(tc.seed.wrapping_add(1), 0));
    let mut last_val = f64::NAN;

    for epoch in state.epochs_done..tc.epochs {
        let started = Instant::now();
        let mut sum = 0.0;
        let batches = epoch_batches(train.len(), tc.batch_size, tc.seed, epoch);
        for b in &batches {
            let batch: Vec<TrainExample> = b.iter().map(|&i| train[i].clone()).collect();
            let mut rng = step_rng(tc.seed, adam.step);
            let loss = den.train_step_capped(&batch, &mut adam, &mut rng, t_max)?;
            log.record(json!({ "epoch": epoch, "step": adam.step, "loss": loss }))?;
            sum += loss;
        }
        last_val = val_loss(&den)?;
        if !last_val.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: last_val,
                step: adam.step,
                diagnostics: "validation".into(),
            }
            .into());
        }
        state = TrainState {
            epochs_done: epoch + 1,
            step: adam.step,
        };
        save_weights(&den.to_bundle(), ckpt.with_extension("shoi.tmp"))?;
        fs::rename(ckpt.with_extension("shoi.tmp"), &ckpt).map_err(|e| CliError::io(&ckpt, e))?;
        save_optimizer(&adam, &nc, opt_path.with_extension("shoi.tmp"))?;
        fs::rename(opt_path.with_extension("shoi.tmp"), &opt_path).map_err(|e| CliError::io(&opt_path, e))?;
        write_atomic(&state_path, serde_json::to_string(&state).map_err(Error::from)?.as_bytes())?;
        log.record(json!({
            "epoch": epoch,
            "train_loss": sum / batches.len() as f64,
            "val_loss": last_val,
            "seconds": started.elapsed().as_secs_f64(),
        }))?;
    }
    if last_val.is_nan() {
        last_val = val_loss(&den)?;
    }
    let weights = weights_path(cfg);
    save_weights(&den.to_bundle(), &weights)?;
    Ok(TrainSummary {
        epochs_done: state.epochs_done,
        steps: state.step,
        val_loss: last_val,
        weights,
    })
}

/// Diagonal Gaussian fitted to the ground truth of the training split.
pub fn fit_gaussian_prior(scenes: &[(String, Scene)], cfg: &RunConfig) -> Result<AnalyticGaussianDenoiser> {
    let first = scenes
        .first()
        .ok_or_else(|| CliError::Config("cannot fit a prior to an empty split".into()))?;
    let dim = first.1.gt.len();
    let n = scenes.len() as f64;
    let mut mu = vec![0.0; dim];
    for (_, s) in scenes {
        for (m, v) in mu.iter_mut().zip(s.gt.as_slice()) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for (_, s) in scenes {
        for ((acc, v), m) in var.iter_mut().zip(s.gt.as_slice()).zip(&mu) {
            *acc += (v - m).powi(2) / n;
        }
    }
    for v in &mut var {
        *v = v.max(PRIOR_VAR_FLOOR);
    }
    Ok(AnalyticGaussianDenoiser::new(mu, var, cfg.schedule())?)
}

pub fn load_denoiser(cfg: &RunConfig) -> Result<AnyDenoiser> {
    if cfg.analytic {
        let train = load_split_ids(&cfg.data_root, "train", 0)?;
        return Ok(AnyDenoiser::Analytic(fit_gaussian_prior(&train, cfg)?));
    }
    if cfg.weights.is_empty() {
        return Err(CliError::Config("neural optimization needs `weights` (or use `analytic`)".into()));
    }
    let den = NeuralDenoiser::from_bundle(load_weights(&cfg.weights)?)?;
    Ok(AnyDenoiser::Neural(Box::new(den)))
}

/// A refined estimate for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub format_version: u32,
    pub scene: String,
    pub template_id: String,
    pub joints: usize,
    pub params: Vec<f64>,
}

impl Prediction {
    pub fn new(scene: &str, template_id: &str, x: &ParamVector) -> Self {
        Self {
            format_version: PREDICTION_FORMAT_VERSION,
            scene: scene.to_string(),
            template_id: template_id.to_string(),
            joints: x.layout().joints,
            params: x.as_slice().to_vec(),
        }
    }

    pub fn params(&self) -> Result<ParamVector> {
        Ok(ParamVector::new(ParamLayout::new(self.joints), self.params.clone())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let p: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        if p.format_version != PREDICTION_FORMAT_VERSION {
            return Err(Error::Parse {
                path: path.display().to_string(),
                msg: format!("unsupported prediction format version {}", p.format_version),
            }
            .into());
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(Error::from)? + "\n";
        write_atomic(path, text.as_bytes())
    }
}

struct SceneOutcome {
    id: String,
    result: std::result::Result<(ParamVector, Vec<u8>), Error>,
}

fn refine_one(
    id: &str,
    scene: &Scene,
    tmpl: &ObjectTemplate,
    body: &BodyModel,
    den: &AnyDenoiser,
    cdir: &CdirConfig,
    cfg: &RunConfig,
) -> SceneOutcome {
    let run = || -> std::result::Result<(ParamVector, Vec<u8>), Error> {
        let ctx = den.context(&scene.conditions(tmpl))?;
        let out = cdir_run(&scene.init, SceneModels::new(body, tmpl), den, &ctx, cdir, &cfg.schedule())?;
        let mut trace = Vec::new();
        out.trace.write_jsonl(&mut trace)?;
        Ok((out.x0, trace))
    };
    SceneOutcome {
        id: id.to_string(),
        result: run(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeSummary {
    pub refined: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub pred_dir: PathBuf,
}

/// Refines every scene of the configured split. Per-scene failures are
/// logged and reported through [`CliError::SceneFailures`] after all
/// other scenes have been written.
pub fn cmd_optimize(cfg: &RunConfig) -> Result<OptimizeSummary> {
    start(cfg, &cfg.out)?;
    let scenes = load_split_ids(&cfg.data_root, &cfg.split, cfg.limit)?;
    let summary = optimize_scenes(cfg, &scenes)?;
    if !summary.failed.is_empty() {
        return Err(CliError::SceneFailures {
            failed: summary.failed.len(),
            total: scenes.len(),
        });
    }
    Ok(summary)
}

pub fn optimize_scenes(cfg: &RunConfig, scenes: &[(String, Scene)]) -> Result<OptimizeSummary> {
    let den = load_denoiser(cfg)?;
    let cdir = cfg.cdir()?;
    let body = BodyModel::mini();
    let reg = TemplateRegistry::builtin();
    let templates = scenes
        .iter()
        .map(|(_, s)| reg.get(&s.template_id))
        .collect::<hoi_refine::Result<Vec<_>>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<SceneOutcome> = pool.install(|| {
        scenes
            .par_iter()
            .zip(&templates)
            .map(|((id, s), t)| refine_one(id, s, t, &body, &den, &cdir, cfg))
            .collect()
    });

    let pred_dir = cfg.out.join("pred");
    fs::create_dir_all(&pred_dir).map_err(|e| CliError::io(&pred_dir, e))?;
    let mut log = JsonLog::open(&cfg.out.join("log.jsonl"), false)?;
    let mut summary = OptimizeSummary {
        refined: vec![],
        failed: vec![],
        pred_dir: pred_dir.clone(),
    };
    for ((outcome, (_, scene)), tmpl) in outcomes.into_iter().zip(scenes).zip(&templates) {
        match outcome.result {
            Ok((x, trace)) => {
                Prediction::new(&outcome.id, &scene.template_id, &x).save(&pred_dir.join(format!("{}.json", outcome.id)))?;
                write_atomic(&cfg.out.join("traces").join(format!("{}.jsonl", outcome.id)), &trace)?;
                if cfg.obj {
                    let dir = cfg.out.join("obj");
                    export_obj(&scene.init, &body, tmpl, &dir.join(format!("{}_init.obj", outcome.id)))?;
                    export_obj(&x, &body, tmpl, &dir.join(format!("{}_refined.obj", outcome.id)))?;
                }
                log.record(json!({ "scene": outcome.id, "status": "ok" }))?;
                summary.refined.push(outcome.id);
            }
            Err(e) => {
                log.record(json!({ "scene": outcome.id, "status": "failed", "error": e.to_string() }))?;
                summary.failed.push((outcome.id, e.to_string()));
            }
        }
    }
    log.record(json!({ "summary": { "ok": summary.refined.len(), "failed": summary.failed.len() } }))?;
    Ok(summary)
}

/// Scores every prediction in `pred_dir` against the scene file of the
/// same name in `gt_dir`. Writes `report.jsonl` to the run directory.
pub fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, gt_dir: &Path) -> Result<AggregateReport> {
    start(cfg, &cfg.out)?;
    let reports = eval_dirs(pred_dir, gt_dir, &EvalOptions::default())?;
    let text = format_report(&reports)?;
    write_atomic(&cfg.out.join("report.jsonl"), text.as_bytes())?;
    let plain: Vec<EvalReport> = reports.iter().map(|r| r.report).collect();
    Ok(aggregate(&plain))
}

pub fn eval_dirs(pred_dir: &Path, gt_dir: &Path, opts: &EvalOptions) -> Result<Vec<SceneReport>> {
    let mut files: Vec<PathBuf> = fs::read_dir(pred_dir)
        .map_err(|e| CliError::io(pred_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Config(format!("no predictions in {}", pred_dir.display())));
    }
    let body = BodyModel::mini();
    let reg = TemplateRegistry::builtin();
    files
        .iter()
        .map(|f| {
            let pred = Prediction::load(f)?;
            let gt = Scene::load(&gt_dir.join(format!("{}.json", pred.scene)))?;
            if gt.template_id != pred.template_id {
                return Err(CliError::Core(Error::Parse {
                    path: f.display().to_string(),
                    msg: format!("template {} does not match ground truth {}", pred.template_id, gt.template_id),
                }));
            }
            let tmpl = reg.get(&gt.template_id)?;
            let report = evaluate_scene(&pred.params()?, &gt.gt, SceneModels::new(&body, &tmpl), opts)?;
            Ok(SceneReport {
                scene: pred.scene,
                report,
            })
        })
        .collect()
}

/// One grid point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n_iters: usize,
    pub tau: usize,
    pub delta_t: usize,
    pub rho: f64,
    pub terms: String,
}

impl GridPoint {
    pub fn name(&self) -> String {
        format!(
            "n={} tau={} dt={} rho={} terms={}",
            self.n_iters, self.tau, self.delta_t, self.rho, self.terms
        )
    }
}

/// Cartesian product of the configured sweep axes. Axes left empty stay
/// at the base value; a grid with no axes at all is rejected.
pub fn sweep_grid(cfg: &RunConfig) -> Result<Vec<GridPoint>> {
    if cfg.sweep_n.is_empty()
        && cfg.sweep_tau.is_empty()
        && cfg.sweep_delta_t.is_empty()
        && cfg.sweep_rho.is_empty()
        && cfg.sweep_terms.is_empty()
    {
        return Err(CliError::Config("sweep grid is empty; set at least one sweep_* key".into()));
    }
    let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let rhos = if cfg.sweep_rho.is_empty() { vec![cfg.rho] } else { cfg.sweep_rho.clone() };
    let terms = if cfg.sweep_terms.is_empty() { vec!["full".to_string()] } else { cfg.sweep_terms.clone() };
    let mut grid = Vec::new();
    for &n_iters in &or(&cfg.sweep_n, cfg.n_iters) {
        for &tau in &or(&cfg.sweep_tau, cfg.tau) {
            for &delta_t in &or(&cfg.sweep_delta_t, cfg.delta_t) {
                for &rho in &rhos {
                    for t in &terms {
                        grid.push(GridPoint {
                            n_iters,
                            tau,
                            delta_t,
                            rho,
                            terms: t.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(grid)
}

pub fn grid_config(cfg: &RunConfig, p: &GridPoint) -> Result<CdirConfig> {
    let mut c = RunConfig {
        n_iters: p.n_iters,
        tau: p.tau,
        delta_t: p.delta_t,
        rho: p.rho,
        ..cfg.clone()
    };
    match p.terms.as_str() {
        "full" => {}
        "no_ho" => c.lambda_ho = 0.0,
        "no_of" => c.lambda_of = 0.0,
        "no_pt" => c.lambda_pt = 0.0,
        other => return Err(CliError::Config(format!("unknown sweep term `{other}`"))),
    }
    let cdir = c.cdir()?;
    cdir.validate(&c.schedule())?;
    Ok(cdir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub init: AggregateReport,
    pub rows: Vec<(GridPoint, SweepRow)>,
}

/// Refines the configured split under every grid point. Writes
/// `sweep.jsonl` (an `init` line, then one line per grid point) without
/// timings so that the table is reproducible; timings go to `log.jsonl`.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepTable> {
    start(cfg, &cfg.out)?;
    let grid = sweep_grid(cfg)?;
    let configs = grid
        .iter()
        .map(|p| Ok((p.name(), grid_config(cfg, p)?)))
        .collect::<Result<Vec<_>>>()?;
    let den = load_denoiser(cfg)?;
    let scenes = load_split_ids(&cfg.data_root, &cfg.split, cfg.limit)?;
    let body = BodyModel::mini();
    let reg = TemplateRegistry::builtin();
    let templates = scenes
        .iter()
        .map(|(_, s)| reg.get(&s.template_id))
        .collect::<hoi_refine::Result<Vec<_>>>()?;
    let sweep_scenes = scenes
        .iter()
        .zip(&templates)
        .map(|((id, s), t)| {
            Ok(SweepScene {
                id: id.clone(),
                init: s.init.clone(),
                gt: s.gt.clone(),
                models: SceneModels::new(&body, t),
                ctx: den.context(&s.conditions(t))?,
            })
        })
        .collect::<hoi_refine::Result<Vec<_>>>()?;
    let opts = EvalOptions::default();
    let init_reports = sweep_scenes
        .iter()
        .map(|s| evaluate_scene(&s.init, &s.gt, s.models, &opts))
        .collect::<hoi_refine::Result<Vec<_>>>()?;
    let init = aggregate(&init_reports);

    let mut table = JsonLog::open(&cfg.out.join("sweep.jsonl"), false)?;
    let mut log = JsonLog::open(&cfg.out.join("log.jsonl"), false)?;
    table.record(json!({ "name": "init", "scenes": init.count, "median": init.median, "mean": init.mean }))?;
    let mut rows = Vec::new();
    for (point, config) in grid.into_iter().zip(configs) {
        let row = sweep(&[config], &sweep_scenes, &den, &cfg.schedule(), &opts, true)?.remove(0);
        table.record(json!({
            "name": row.name,
            "grid": point,
            "scenes": row.scenes,
            "failures": row.failures,
            "median": row.median,
            "mean": row.mean,
        }))?;
        log.record(json!({ "name": row.name, "seconds": row.seconds }))?;
        rows.push((point, row));
    }
    Ok(SweepTable { init, rows })
}
