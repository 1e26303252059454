use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use hoi_refine::denoiser::{AnyDenoiser, Denoiser};
use hoi_refine::diffusion::{ddim_invert, ddim_sample_loop, GuidedStepConfig, QuadraticGuidance};
use hoi_refine::metrics::{evaluate_scene, EvalOptions};
use hoi_refine::model::{BodyModel, SceneModels, TemplateRegistry};
use hoirefine_cli::commands::{
    eval_dirs, fit_gaussian_prior, load_denoiser, load_split_ids, sweep_grid, Prediction,
};
use hoirefine_cli::config::{RunConfig, SNAPSHOT_FILE};
use hoirefine_cli::error::{EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_SCENE_FAILURES};
use hoirefine_cli::{cmd_eval, cmd_gen_data, cmd_optimize, cmd_sweep, cmd_train, CliError};

fn small_data(dir: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply([("n_train", "20"), ("n_val", "5"), ("n_test", "8")]).unwrap();
    cfg.seed = seed;
    cfg.data_root = dir.join("data");
    cfg.out = dir.join("run");
    cmd_gen_data(&cfg).unwrap();
    cfg
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hoirefine"));
    c.env_remove(hoirefine_cli::config::DATA_ENV);
    c
}

fn read_dir_sorted(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = fs::read(&p).unwrap();
            (PathBuf::from(p.file_name().unwrap()), bytes)
        })
        .collect();
    out.sort();
    out
}

#[test]
fn default_dataset_split_sizes() {
    assert_eq!(RunConfig::default().dataset().counts, [1000, 100, 100]);
}

#[test]
fn gen_data_is_reproducible_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = small_data(a.path(), 7);
    let mb = small_data(b.path(), 7);
    for split in ["train", "val", "test"] {
        assert_eq!(
            read_dir_sorted(&ma.data_root.join(split)),
            read_dir_sorted(&mb.data_root.join(split))
        );
    }
    assert_eq!(
        fs::read(ma.data_root.join("manifest.json")).unwrap(),
        fs::read(mb.data_root.join("manifest.json")).unwrap()
    );
    assert!(ma.data_root.join(SNAPSHOT_FILE).exists());
}

#[test]
fn gen_data_creates_dirs_and_reports_unwritable_roots() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("a/b/c");
    let status = bin()
        .args(["gen-data", "--set", "n_train=3", "--set", "n_val=1", "--set", "n_test=1", "--data"])
        .arg(&root)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(root.join("manifest.json").exists());

    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    let out = bin()
        .args(["gen-data", "--set", "n_train=3", "--set", "n_val=1", "--set", "n_test=1", "--data"])
        .arg(file.join("sub"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_DATA));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["exit_code"], EXIT_DATA);
}

#[test]
fn data_root_comes_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("from_env");
    let out = bin()
        .env(hoirefine_cli::config::DATA_ENV, &root)
        .args(["gen-data", "--set", "n_train=2", "--set", "n_val=1", "--set", "n_test=1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("manifest.json").exists());
}

#[test]
fn config_errors_have_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["gen-data", "--set", "bogus=1", "--data"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let out = bin().args(["optimize", "--set", "delta_t=3", "--data"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    let out = bin().args(["optimize", "--analytic", "--data"]).arg(dir.path().join("none")).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_DATA));
}

#[test]
fn frozen_example_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.conf");
    let mut cfg = RunConfig::default();
    cfg.apply_file(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.epochs, 40);
    assert_eq!(cfg.jobs, 4);
    assert_eq!(cfg.sweep_n, vec![2, 5, 10, 20]);
    assert_eq!(cfg.sweep_terms, vec!["full", "no_ho", "no_pt"]);
    assert_eq!(sweep_grid(&cfg).unwrap().len(), 12);
}

#[test]
fn training_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_data(dir.path(), 1);
    cfg.apply([("width", "16"), ("heads", "2"), ("layers", "1"), ("batch_size", "8"), ("epochs", "2")])
        .unwrap();

    cfg.out = dir.path().join("straight");
    let straight = cmd_train(&cfg).unwrap();
    assert_eq!(straight.epochs_done, 2);

    cfg.out = dir.path().join("split");
    cfg.epochs = 1;
    cmd_train(&cfg).unwrap();
    cfg.epochs = 2;
    cfg.resume = true;
    let resumed = cmd_train(&cfg).unwrap();
    assert_eq!(resumed.steps, straight.steps);
    assert_eq!(resumed.val_loss, straight.val_loss);
    assert_eq!(
        fs::read(dir.path().join("straight/weights.shoi")).unwrap(),
        fs::read(dir.path().join("split/weights.shoi")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(dir.path().join("straight/loss.jsonl"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("\"step\""))
            .collect::<Vec<_>>(),
        fs::read_to_string(dir.path().join("split/loss.jsonl"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("\"step\""))
            .collect::<Vec<_>>()
    );
}

#[test]
fn one_epoch_on_ten_scenes_is_quick() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_data(dir.path(), 2);
    cfg.n_train = 10;
    cfg.data_root = dir.path().join("ten");
    cmd_gen_data(&cfg).unwrap();
    cfg.epochs = 1;
    let started = std::time::Instant::now();
    let s = cmd_train(&cfg).unwrap();
    assert!(started.elapsed().as_secs() < 60);
    assert!(s.val_loss.is_finite());
    let log = fs::read_to_string(cfg.out.join("loss.jsonl")).unwrap();
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}

#[test]
fn nan_loss_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_data(dir.path(), 3);
    cfg.apply([("width", "16"), ("heads", "2"), ("layers", "1"), ("batch_size", "32"), ("epochs", "1")])
        .unwrap();
    cmd_train(&cfg).unwrap();
    let good = fs::read(cfg.out.join("checkpoint.shoi")).unwrap();

    // A wildly large step size overflows the weights within a step or two.
    cfg.lr = 1e200;
    cfg.epochs = 2;
    cfg.resume = true;
    let err = cmd_train(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), EXIT_NUMERICAL, "{err}");
    assert_eq!(fs::read(cfg.out.join("checkpoint.shoi")).unwrap(), good);
}

#[test]
fn unguided_optimize_is_a_plain_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_data(dir.path(), 4);
    cfg.apply([("analytic", "true"), ("rho", "0"), ("n_iters", "1"), ("limit", "3")]).unwrap();
    let summary = cmd_optimize(&cfg).unwrap();
    assert_eq!(summary.refined.len(), 3);

    let den = match load_denoiser(&cfg).unwrap() {
        AnyDenoiser::Analytic(d) => d,
        AnyDenoiser::Neural(_) => unreachable!(),
    };
    let prior = fit_gaussian_prior(&load_split_ids(&cfg.data_root, "train", 0).unwrap(), &cfg).unwrap();
    assert_eq!(den.mu(), prior.mu());
    let step = GuidedStepConfig {
        rho: 0.0,
        ..GuidedStepConfig::default()
    };
    for (id, scene) in load_split_ids(&cfg.data_root, "test", 3).unwrap() {
        let latent = ddim_invert(scene.init.as_slice(), step.tau, step.delta_t, &den, &(), &cfg.schedule()).unwrap();
        let plain = ddim_sample_loop(
            &latent,
            &den,
            &(),
            None::<&QuadraticGuidance>,
            &step,
            &cfg.schedule(),
            Some(scene.init.layout().beta()),
        )
        .unwrap();
        let pred = Prediction::load(&summary.pred_dir.join(format!("{id}.json"))).unwrap();
        let gap = pred.params.iter().zip(&plain.x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9, "{id}: {gap}");
        assert_eq!(den.dim(), pred.params.len());
    }
}

#[test]
fn parallel_optimize_matches_serial_and_exports_meshes() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_data(dir.path(), 5);
    cfg.apply([("analytic", "true"), ("n_iters", "2"), ("obj", "true")]).unwrap();
    cfg.out = dir.path().join("serial");
    cmd_optimize(&cfg).unwrap();
    cfg.out = dir.path().join("parallel");
    cfg.jobs = 4;
    cmd_optimize(&cfg).unwrap();
    for sub in ["pred", "traces", "obj"] {
        let a = read_dir_sorted(&dir.path().join("serial").join(sub));
        let b = read_dir_sorted(&dir.path().join("parallel").join(sub));
        assert_eq!(a, b, "{sub}");
    }
    let objs = read_dir_sorted(&dir.path().join("serial/obj"));
    assert_eq!(objs.len(), 2 * cfg.n_test);
    let log = fs::read_to_string(dir.path().join("serial/log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), cfg.n_test + 1);
}

#[test]
fn rerunning_from_snapshot_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_data(dir.path(), 6);
    cfg.apply([("analytic", "true"), ("n_iters", "2"), ("limit", "4"), ("rho", "0.5")]).unwrap();
    cmd_optimize(&cfg).unwrap();
    let snapshot = cfg.out.join(SNAPSHOT_FILE);
    let again = dir.path().join("again");
    let out = bin()
        .arg("optimize")
        .arg("--config")
        .arg(&snapshot)
        .arg("--out")
        .arg(&again)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_dir_sorted(&cfg.out.join("pred")), read_dir_sorted(&again.join("pred")));
    assert_eq!(read_dir_sorted(&cfg.out.join("traces")), read_dir_sorted(&again.join("traces")));
}

#[test]
fn failing_scenes_give_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_data(dir.path(), 8);
    let out = bin()
        .args(["optimize", "--analytic", "--rho", "1e300", "--limit", "2", "--data"])
        .arg(&cfg.data_root)
        .arg("--out")
        .arg(dir.path().join("bad"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_SCENE_FAILURES), "{}", String::from_utf8_lossy(&out.stderr));
    let log = fs::read_to_string(dir.path().join("bad/log.jsonl")).unwrap();
    assert!(log.lines().next().unwrap().contains("\"failed\""));
    assert!(matches!(
        cmd_optimize(&RunConfig {
            out: dir.path().join("bad2"),
            analytic: true,
            rho: 1e300,
            limit: 1,
            ..cfg.clone()
        }),
        Err(CliError::SceneFailures { failed: 1, total: 1 })
    ));
}

fn write_gt_predictions(cfg: &RunConfig, dir: &Path) {
    for (id, s) in load_split_ids(&cfg.data_root, "test", 0).unwrap() {
        Prediction::new(&id, &s.template_id, &s.gt).save(&dir.join(format!("{id}.json"))).unwrap();
    }
}

#[test]
fn evaluating_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_data(dir.path(), 9);
    let pred = dir.path().join("pred");
    write_gt_predictions(&cfg, &pred);
    let agg = cmd_eval(&cfg, &pred, &cfg.data_root.join("test")).unwrap();
    assert_eq!(agg.count, cfg.n_test);
    assert!(agg.mean.cd_human < 1e-9 && agg.mean.cd_object < 1e-9);
    assert_eq!(agg.mean.contact_f, 1.0);
}

#[test]
fn eval_report_matches_golden_and_resums() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_data(dir.path(), 0);
    let mut opt = cfg.clone();
    opt.apply([("analytic", "true"), ("n_iters", "1"), ("limit", "3")]).unwrap();
    let summary = cmd_optimize(&opt).unwrap();
    cmd_eval(&cfg, &summary.pred_dir, &cfg.data_root.join("test")).unwrap();
    let text = fs::read_to_string(cfg.out.join("report.jsonl")).unwrap();

    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_report.jsonl");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, fs::read_to_string(&golden).unwrap());

    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let (scenes, agg) = lines.split_at(lines.len() - 1);
    for key in ["cd_human", "cd_object", "contact_p", "contact_r", "contact_f"] {
        let mean = scenes.iter().map(|l| l[key].as_f64().unwrap()).sum::<f64>() / scenes.len() as f64;
        let reported = agg[0]["aggregate"]["mean"][key].as_f64().unwrap();
        assert!((mean - reported).abs() < 1e-12, "{key}");
    }

    // Same numbers as scoring directly through the metrics module.
    let body = BodyModel::mini();
    let reg = TemplateRegistry::builtin();
    let direct = eval_dirs(&summary.pred_dir, &cfg.data_root.join("test"), &EvalOptions::default()).unwrap();
    for r in direct {
        let scene = hoi_refine::scenegen::Scene::load(&cfg.data_root.join(format!("test/{}.json", r.scene))).unwrap();
        let pred = Prediction::load(&summary.pred_dir.join(format!("{}.json", r.scene))).unwrap();
        let tmpl = reg.get(&scene.template_id).unwrap();
        let want =
            evaluate_scene(&pred.params().unwrap(), &scene.gt, SceneModels::new(&body, &tmpl), &EvalOptions::default())
                .unwrap();
        assert_eq!(r.report, want);
    }
}

#[test]
fn sweep_grid_rules_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_data(dir.path(), 11);
    assert!(matches!(sweep_grid(&cfg), Err(CliError::Config(_))));
    let out = bin()
        .args(["sweep", "--analytic", "--data"])
        .arg(&cfg.data_root)
        .arg("--out")
        .arg(dir.path().join("empty"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));

    cfg.apply([("sweep_n", "2,5,10,20")]).unwrap();
    let grid = sweep_grid(&cfg).unwrap();
    assert_eq!(grid.iter().map(|p| p.n_iters).collect::<Vec<_>>(), vec![2, 5, 10, 20]);

    cfg.apply([("analytic", "true"), ("limit", "2"), ("sweep_n", "1,2"), ("sweep_terms", "full,no_pt")])
        .unwrap();
    cfg.out = dir.path().join("a");
    let a = cmd_sweep(&cfg).unwrap();
    assert_eq!(a.rows.len(), 4);
    cfg.out = dir.path().join("b");
    cmd_sweep(&cfg).unwrap();
    assert_eq!(
        fs::read(dir.path().join("a/sweep.jsonl")).unwrap(),
        fs::read(dir.path().join("b/sweep.jsonl")).unwrap()
    );
}
