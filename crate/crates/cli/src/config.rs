//! Run configuration: defaults, `key = value` files and overrides.
//!
//! A config file holds one `key = value` pair per line. Blank lines and
//! lines starting with `#` are ignored. Values use JSON syntax where the
//! key's type needs it (numbers, `true`/`false`); strings may be bare and
//! list values may omit the brackets (`sweep_n = 2, 5, 10`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hoi_refine::cdir::CdirConfig;
use hoi_refine::denoiser::{NeuralConfig, TrainConfig};
use hoi_refine::diffusion::{GradMode, NoiseSchedule};
use hoi_refine::physics::{MinMode, DEFAULT_CONTACT_THRESHOLD};
use hoi_refine::scenegen::{DatasetConfig, GeneratorConfig, PerturbationModel, SPLITS};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

/// Env var holding the default data root.
pub const DATA_ENV: &str = "HOIREFINE_DATA";
pub const SNAPSHOT_FILE: &str = "effective_config.conf";

/// Guidance scale used when none is given.
pub const DEFAULT_RHO: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub out: PathBuf,
    pub seed: u64,

    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub perturb_scale: f64,
    pub observation_sigma: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Largest training timestep; 0 trains on the whole schedule.
    pub t_max: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub conditional: bool,
    pub resume: bool,

    /// Weights file; empty means `<out>/weights.shoi` for training and is
    /// required for neural optimization.
    pub weights: String,
    pub analytic: bool,
    pub split: String,
    /// Use only the first `limit` scenes; 0 uses all.
    pub limit: usize,
    pub jobs: usize,
    pub obj: bool,

    pub n_iters: usize,
    pub tau: usize,
    pub delta_t: usize,
    pub rho: f64,
    pub lambda_ho: f64,
    pub lambda_of: f64,
    pub lambda_pt: f64,
    pub contact_threshold: f64,
    /// `soft` or `hard`.
    pub min_mode: String,
    pub temperature: f64,
    /// `full` or `frozen`.
    pub grad_mode: String,
    /// Max gradient norm; 0 disables clipping.
    pub grad_clip: f64,

    pub sweep_n: Vec<usize>,
    pub sweep_tau: Vec<usize>,
    pub sweep_delta_t: Vec<usize>,
    pub sweep_rho: Vec<f64>,
    /// Subset of `full`, `no_ho`, `no_of`, `no_pt`.
    pub sweep_terms: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let ds = DatasetConfig::default();
        let nc = NeuralConfig::default();
        let cd = CdirConfig::default();
        Self {
            data_root: PathBuf::from("data"),
            out: PathBuf::from("runs/latest"),
            seed: 0,
            n_train: ds.counts[0],
            n_val: ds.counts[1],
            n_test: ds.counts[2],
            perturb_scale: 1.0,
            observation_sigma: ds.generator.observation_sigma,
            epochs: TrainConfig::default().epochs,
            batch_size: 64,
            lr: 1e-3,
            t_max: 100,
            width: nc.width,
            heads: nc.heads,
            layers: nc.layers,
            conditional: true,
            resume: false,
            weights: String::new(),
            analytic: false,
            split: "test".into(),
            limit: 0,
            jobs: 1,
            obj: false,
            n_iters: cd.n_iters,
            tau: cd.step.tau,
            delta_t: cd.step.delta_t,
            rho: DEFAULT_RHO,
            lambda_ho: cd.weights.lambda_ho,
            lambda_of: cd.weights.lambda_of,
            lambda_pt: cd.weights.lambda_pt,
            contact_threshold: DEFAULT_CONTACT_THRESHOLD,
            min_mode: "soft".into(),
            temperature: match cd.min_mode {
                MinMode::Soft { temperature } => temperature,
                MinMode::Hard => 0.01,
            },
            grad_mode: "full".into(),
            grad_clip: 0.0,
            sweep_n: vec![],
            sweep_tau: vec![],
            sweep_delta_t: vec![],
            sweep_rho: vec![],
            sweep_terms: vec![],
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    fn to_map(&self) -> Map<String, Value> {
        match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        }
    }

    /// Applies `key = value` overrides in order.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<(), CliError> {
        let mut map = self.to_map();
        for (key, raw) in pairs {
            let key = key.trim().replace('-', "_");
            let raw = raw.trim();
            let current = map
                .get(&key)
                .ok_or_else(|| config_err(format!("unknown config key `{key}`")))?;
            let value = match current {
                Value::String(_) => Value::String(raw.trim_matches('"').to_string()),
                Value::Array(_) if !raw.starts_with('[') => {
                    let items: Vec<&str> = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                    let quoted = matches!(key.as_str(), "sweep_terms");
                    let body: Vec<String> = items
                        .iter()
                        .map(|s| if quoted { format!("\"{}\"", s.trim_matches('"')) } else { s.to_string() })
                        .collect();
                    serde_json::from_str(&format!("[{}]", body.join(",")))
                        .map_err(|e| config_err(format!("bad value for `{key}`: {e}")))?
                }
                _ => serde_json::from_str(raw).map_err(|e| config_err(format!("bad value for `{key}`: {e}")))?,
            };
            map.insert(key, value);
        }
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), CliError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("{source}:{}: expected `key = value`", i + 1)))?;
            pairs.push((k, v));
        }
        self.apply(pairs)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Canonical `key = value` rendering; applying it to the defaults
    /// gives back `self` exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            let _ = match v {
                Value::String(s) => writeln!(out, "{k} = {s}"),
                other => writeln!(out, "{k} = {other}"),
            };
        }
        out
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.to_text()).map_err(|e| CliError::io(&path, e))
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::default()
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            counts: [self.n_train, self.n_val, self.n_test],
            seed: self.seed,
            generator: GeneratorConfig {
                perturbation: PerturbationModel::default().scaled(self.perturb_scale),
                observation_sigma: self.observation_sigma,
                ..GeneratorConfig::default()
            },
            ..DatasetConfig::default()
        }
    }

    pub fn neural(&self) -> NeuralConfig {
        NeuralConfig {
            width: self.width,
            heads: self.heads,
            layers: self.layers,
            conditional: self.conditional,
            seed: self.seed,
            ..NeuralConfig::default()
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            t_max: (self.t_max > 0).then_some(self.t_max),
        }
    }

    pub fn cdir(&self) -> Result<CdirConfig, CliError> {
        let mut c = CdirConfig::default().with_rho(self.rho);
        c.n_iters = self.n_iters;
        c.step.tau = self.tau;
        c.step.delta_t = self.delta_t;
        c.step.grad_mode = match self.grad_mode.as_str() {
            "full" => GradMode::FullBackprop,
            "frozen" => GradMode::FrozenEpsilon,
            other => return Err(config_err(format!("grad_mode must be `full` or `frozen`, got `{other}`"))),
        };
        c.step.grad_clip = (self.grad_clip > 0.0).then_some(self.grad_clip);
        c.weights.lambda_ho = self.lambda_ho;
        c.weights.lambda_of = self.lambda_of;
        c.weights.lambda_pt = self.lambda_pt;
        c.contact_threshold = self.contact_threshold;
        c.min_mode = match self.min_mode.as_str() {
            "soft" => MinMode::Soft {
                temperature: self.temperature,
            },
            "hard" => MinMode::Hard,
            other => return Err(config_err(format!("min_mode must be `soft` or `hard`, got `{other}`"))),
        };
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: hoi_refine::Error| config_err(e.to_string());
        self.dataset().validate().map_err(wrap)?;
        self.training().validate().map_err(wrap)?;
        if self.t_max > self.schedule().steps() {
            return Err(config_err(format!("t_max must be at most {}", self.schedule().steps())));
        }
        if !(self.perturb_scale.is_finite() && self.perturb_scale >= 0.0) {
            return Err(config_err("perturb_scale must be finite and ≥ 0"));
        }
        if !(self.observation_sigma.is_finite() && self.observation_sigma >= 0.0) {
            return Err(config_err("observation_sigma must be finite and ≥ 0"));
        }
        if self.width == 0 || self.heads == 0 || self.layers == 0 || self.width % self.heads != 0 {
            return Err(config_err("width, heads and layers must be positive with heads dividing width"));
        }
        if self.jobs == 0 {
            return Err(config_err("jobs must be at least 1"));
        }
        if !SPLITS.contains(&self.split.as_str()) {
            return Err(config_err(format!("split must be one of {SPLITS:?}")));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(config_err("grad_clip must be finite and ≥ 0"));
        }
        self.cdir()?.validate(&self.schedule()).map_err(wrap)?;
        for t in &self.sweep_terms {
            if !["full", "no_ho", "no_of", "no_pt"].contains(&t.as_str()) {
                return Err(config_err(format!("unknown sweep term `{t}`")));
            }
        }
        Ok(())
    }

    /// The `--faster` preset.
    pub fn make_faster(&mut self) {
        self.n_iters = 2;
    }
}
