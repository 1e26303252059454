use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hoirefine_cli::config::DATA_ENV;
use hoirefine_cli::{cmd_eval, cmd_gen_data, cmd_optimize, cmd_sweep, cmd_train, CliError, RunConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "hoirefine", version, about = "Diffusion-based human-object interaction refinement")]
struct Cli {
    /// Key-value config file applied on top of the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dataset root.
    #[arg(long, global = true, env = DATA_ENV)]
    data: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct RefineArgs {
    #[arg(long)]
    weights: Option<String>,
    /// Use a Gaussian prior fitted to the training split instead of weights.
    #[arg(long)]
    analytic: bool,
    #[arg(long)]
    rho: Option<f64>,
    /// Two refinement iterations instead of ten.
    #[arg(long)]
    faster: bool,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/val/test dataset.
    GenData {
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Train the neural denoiser.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        resume: bool,
    },
    /// Refine scenes.
    Optimize {
        #[command(flatten)]
        refine: RefineArgs,
        #[arg(long)]
        jobs: Option<usize>,
        /// Also export init and refined OBJ meshes.
        #[arg(long)]
        obj: bool,
    },
    /// Score predictions against ground-truth scenes.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run a hyperparameter grid (set the `sweep_*` keys).
    Sweep {
        #[command(flatten)]
        refine: RefineArgs,
    },
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| pairs.push((k.to_string(), v));
    if let Some(d) = &cli.data {
        put("data_root", d.display().to_string());
    }
    if let Some(o) = &cli.out {
        put("out", o.display().to_string());
    }
    if let Some(s) = cli.seed {
        put("seed", s.to_string());
    }
    let refine = |r: &RefineArgs, put: &mut dyn FnMut(&str, String)| {
        if let Some(w) = &r.weights {
            put("weights", w.clone());
        }
        if r.analytic {
            put("analytic", "true".into());
        }
        if let Some(rho) = r.rho {
            put("rho", rho.to_string());
        }
        if r.faster {
            put("n_iters", "2".into());
        }
        if let Some(s) = &r.split {
            put("split", s.clone());
        }
        if let Some(l) = r.limit {
            put("limit", l.to_string());
        }
    };
    match &cli.command {
        Command::GenData { scale } => {
            if let Some(s) = scale {
                put("perturb_scale", s.to_string());
            }
        }
        Command::Train { epochs, resume } => {
            if let Some(e) = epochs {
                put("epochs", e.to_string());
            }
            if *resume {
                put("resume", "true".into());
            }
        }
        Command::Optimize { refine: r, jobs, obj } => {
            refine(r, &mut put);
            if let Some(j) = jobs {
                put("jobs", j.to_string());
            }
            if *obj {
                put("obj", "true".into());
            }
        }
        Command::Sweep { refine: r } => refine(r, &mut put),
        Command::Eval { .. } => {}
    }
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        put(k, v.to_string());
    }
    cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let cfg = build_config(cli)?;
    Ok(match &cli.command {
        Command::GenData { .. } => {
            let m = cmd_gen_data(&cfg)?;
            let counts: Vec<_> = m.splits.iter().map(|s| json!({ "split": s.name, "count": s.count })).collect();
            json!({ "command": "gen-data", "root": cfg.data_root, "splits": counts })
        }
        Command::Train { .. } => {
            let s = cmd_train(&cfg)?;
            json!({ "command": "train", "epochs": s.epochs_done, "steps": s.steps, "val_loss": s.val_loss, "weights": s.weights })
        }
        Command::Optimize { .. } => {
            let s = cmd_optimize(&cfg)?;
            json!({ "command": "optimize", "refined": s.refined.len(), "pred_dir": s.pred_dir })
        }
        Command::Eval { pred, gt } => {
            let agg = cmd_eval(&cfg, pred, gt)?;
            json!({ "command": "eval", "aggregate": agg })
        }
        Command::Sweep { .. } => {
            let t = cmd_sweep(&cfg)?;
            let rows: Vec<_> = t
                .rows
                .iter()
                .map(|(_, r)| json!({ "name": r.name, "median": r.median, "failures": r.failures, "seconds": r.seconds }))
                .collect();
            json!({ "command": "sweep", "init": t.init.median, "rows": rows })
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string(), "exit_code": e.exit_code() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
