use std::collections::BTreeMap;

use hoi_refine::autodiff::{finite_diff_grad, max_relative_error, Tape, Tensor};
use hoi_refine::denoiser::{
    load_optimizer, load_weights, load_weights_for, save_optimizer, save_weights, step_rng, Adam,
    AnalyticGaussianDenoiser, Conditions, Denoiser, NeuralConfig, NeuralDenoiser, TrainExample,
};
use hoi_refine::diffusion::{forward_diffuse, NoiseSchedule};
use hoi_refine::model::{BodyModel, TemplateRegistry};
use hoi_refine::scenegen::{sample_scene, GeneratorConfig, ScenarioKind, ScenarioSpec};
use hoi_refine::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn small() -> NeuralConfig {
    NeuralConfig {
        width: 16,
        heads: 2,
        layers: 1,
        time_dim: 16,
        ..NeuralConfig::default()
    }
}

/// Fresh model with every output head randomized so predictions are nonzero.
fn random_heads(config: NeuralConfig, seed: u64) -> NeuralDenoiser {
    let mut bundle = NeuralDenoiser::new(config, NoiseSchedule::default()).unwrap().to_bundle();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in bundle.tensors.iter_mut() {
        if name.starts_with("head.") {
            for v in t.data_mut() {
                *v = 0.2 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    NeuralDenoiser::from_bundle(bundle).unwrap()
}

fn examples(n: usize, seed: u64) -> Vec<TrainExample> {
    let body = BodyModel::mini();
    let reg = TemplateRegistry::builtin();
    (0..n as u64)
        .map(|i| {
            let kind = ScenarioKind::ALL[i as usize % 5];
            let s = sample_scene(&ScenarioSpec::new(kind), &GeneratorConfig::default(), seed + i, &body, &reg).unwrap();
            let tmpl = reg.get(&s.template_id).unwrap();
            TrainExample {
                x0: s.gt.as_slice().to_vec(),
                cond: s.conditions(&tmpl),
            }
        })
        .collect()
}

fn random_x(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

#[test]
fn zeroed_heads_predict_zero() {
    let mut den = random_heads(small(), 1);
    let ex = examples(1, 10);
    let ctx = den.context(&ex[0].cond).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_x(den.dim(), &mut rng);
    assert!(den.eval(&x, 40, &ctx).unwrap().iter().any(|v| *v != 0.0));
    den.zero_output_heads();
    assert!(den.eval(&x, 40, &ctx).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn geometry_condition_ignores_point_order() {
    let den = random_heads(small(), 3);
    let ex = examples(1, 20);
    let mut shuffled = ex[0].cond.clone();
    shuffled.points.reverse();
    shuffled.points.rotate_left(17);
    let a = den.context(&ex[0].cond).unwrap();
    let b = den.context(&shuffled).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_x(den.dim(), &mut rng);
    let ea = den.eval(&x, 70, &a).unwrap();
    let eb = den.eval(&x, 70, &b).unwrap();
    assert_eq!(ea, eb);
}

#[test]
fn squared_output_gradient_matches_finite_differences() {
    let den = random_heads(small(), 5);
    let ex = examples(1, 30);
    let ctx = den.context(&ex[0].cond).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::vector(random_x(den.dim(), &mut rng));
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = den.eval_var(xv, 25, &ctx).unwrap().square().unwrap().sum().unwrap();
    let analytic = tape.backward(out).unwrap().get(xv);
    let numeric = finite_diff_grad(
        |p| Ok(den.eval(p.data(), 25, &ctx)?.iter().map(|v| v * v).sum()),
        &x,
        1e-6,
    )
    .unwrap();
    let err = max_relative_error(&analytic, &numeric, 1e-8);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn evaluation_is_pure_and_batched_matches_single() {
    let den = random_heads(small(), 7);
    let ex = examples(3, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| random_x(den.dim(), &mut rng)).collect();
    let ts = [3, 50, 900];
    let conds: Vec<&Conditions> = ex.iter().map(|e| &e.cond).collect();
    let batched = den.eval_batch(&xs, &ts, &conds).unwrap();
    for i in 0..3 {
        let ctx = den.context(conds[i]).unwrap();
        let single = den.eval(&xs[i], ts[i], &ctx).unwrap();
        let again = den.eval(&xs[i], ts[i], &ctx).unwrap();
        assert_eq!(single, again);
        let gap = single.iter().zip(&batched[i]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-12);
    }
    assert!(den.eval(&xs[0][1..], 3, &den.context(conds[0]).unwrap()).is_err());
}

#[test]
fn training_is_deterministic() {
    let ex = examples(8, 50);
    let run = || {
        let mut den = NeuralDenoiser::new(small(), NoiseSchedule::default()).unwrap();
        let mut adam = Adam::new(1e-3);
        let losses: Vec<f64> = (0..5)
            .map(|s| den.train_step(&ex, &mut adam, &mut step_rng(9, s)).unwrap())
            .collect();
        (losses, den.to_bundle())
    };
    let (la, ba) = run();
    let (lb, bb) = run();
    assert_eq!(la, lb);
    assert_eq!(ba, bb);
}

#[test]
fn repeated_batch_is_overfit() {
    let ex = examples(4, 60);
    let mut den = NeuralDenoiser::new(small(), NoiseSchedule::default()).unwrap();
    let mut adam = Adam::new(1e-3);
    let losses: Vec<f64> = (0..200)
        .map(|_| den.train_step(&ex, &mut adam, &mut step_rng(1, 0)).unwrap())
        .collect();
    for i in 0..150 {
        assert!(losses[i + 50] < losses[i], "step {i}: {} -> {}", losses[i], losses[i + 50]);
    }
    assert!(losses[199] < 0.5 * losses[0]);
}

#[test]
fn learns_gaussian_toy_prior() {
    let sched = NoiseSchedule::default();
    let config = NeuralConfig {
        width: 32,
        heads: 2,
        layers: 2,
        time_dim: 32,
        conditional: false,
        ..NeuralConfig::default()
    };
    let dim = config.layout().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mu: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let var: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.02..0.1)).collect();
    let oracle = AnalyticGaussianDenoiser::new(mu.clone(), var.clone(), sched.clone()).unwrap();
    let cond = examples(1, 70).remove(0).cond;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..dim).map(|i| mu[i] + var[i].sqrt() * rng.sample::<f64, _>(StandardNormal)).collect()
    };

    let mut den = NeuralDenoiser::new(config, sched.clone()).unwrap();
    let mut adam = Adam::new(3e-3);
    for step in 0..2000 {
        if step == 1400 {
            adam.lr = 5e-4;
        }
        let batch: Vec<TrainExample> = (0..32)
            .map(|_| TrainExample {
                x0: draw(&mut rng),
                cond: cond.clone(),
            })
            .collect();
        den.train_step_capped(&batch, &mut adam, &mut step_rng(12, step), 100).unwrap();
    }

    let ctx = den.context(&cond).unwrap();
    let mut err2 = 0.0;
    let mut ref2 = 0.0;
    for _ in 0..200 {
        let t = rng.gen_range(20..=100);
        let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let x_t = forward_diffuse(&draw(&mut rng), t, &eps, &sched).unwrap();
        let want = oracle.eval(&x_t, t, &()).unwrap();
        let got = den.eval(&x_t, t, &ctx).unwrap();
        err2 += want.iter().zip(&got).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        ref2 += want.iter().map(|a| a * a).sum::<f64>();
    }
    let rel = (err2 / ref2).sqrt();
    assert!(rel < 0.1, "relative RMS error {rel}");
}

#[test]
fn weights_round_trip_bitwise() {
    let den = random_heads(small(), 13);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.shoi");
    save_weights(&den.to_bundle(), &path).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(back, den.to_bundle());
    let restored = NeuralDenoiser::from_bundle(back).unwrap();
    for ((na, ta), (nb, tb)) in den.tensors().zip(restored.tensors()) {
        assert_eq!(na, nb);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(ta), bits(tb));
    }
    assert!(load_weights_for(&path, &small()).is_ok());
}

#[test]
fn damaged_weight_files_are_rejected() {
    let den = random_heads(small(), 14);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.shoi");
    save_weights(&den.to_bundle(), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    for cut in [3, 40, bytes.len() / 2, bytes.len() - 1] {
        let p = dir.path().join(format!("cut{cut}.shoi"));
        std::fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(load_weights(&p), Err(Error::WeightsFormat(_))), "cut at {cut}");
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    let p = dir.path().join("magic.shoi");
    std::fs::write(&p, &magic).unwrap();
    assert!(load_weights(&p).is_err());
    let mut version = bytes.clone();
    version[4] = 9;
    std::fs::write(&p, &version).unwrap();
    assert!(load_weights(&p).is_err());
    let mut extra = bytes;
    extra.push(0);
    std::fs::write(&p, &extra).unwrap();
    assert!(load_weights(&p).is_err());
}

#[test]
fn mismatched_architecture_names_the_tensor() {
    let den = random_heads(small(), 15);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.shoi");
    save_weights(&den.to_bundle(), &path).unwrap();
    let wider = NeuralConfig { width: 24, ..small() };
    match load_weights_for(&path, &wider) {
        Err(Error::ArchitectureMismatch { name, expected, found }) => {
            assert!(!name.is_empty());
            assert_ne!(expected, found);
        }
        other => panic!("expected mismatch, got {other:?}"),
    }
    let mut bundle = den.to_bundle();
    bundle.tensors.insert("stray".into(), Tensor::vector(vec![1.0]));
    assert!(NeuralDenoiser::from_bundle(bundle.clone()).is_err());
    bundle.tensors.remove("stray");
    let first = bundle.tensors.keys().next().unwrap().clone();
    bundle.tensors.insert(first, Tensor::vector(vec![0.0; 3]));
    assert!(matches!(NeuralDenoiser::from_bundle(bundle), Err(Error::ArchitectureMismatch { .. })));
}

#[test]
fn optimizer_state_round_trips() {
    let ex = examples(4, 80);
    let mut den = NeuralDenoiser::new(small(), NoiseSchedule::default()).unwrap();
    let mut adam = Adam::new(1e-3);
    for s in 0..3 {
        den.train_step(&ex, &mut adam, &mut step_rng(2, s)).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("opt.shoi");
    save_optimizer(&adam, den.config(), &path).unwrap();
    let back = load_optimizer(&path, den.config()).unwrap();
    assert_eq!(back.step, adam.step);
    assert_eq!(back.m, adam.m);
    assert_eq!(back.v, adam.v);
    assert!(load_optimizer(&path, &NeuralConfig { width: 24, ..small() }).is_err());

    // Resuming from saved state continues exactly like an uninterrupted run.
    let mut a = den.clone();
    let mut b = NeuralDenoiser::from_bundle(den.to_bundle()).unwrap();
    let mut adam_b = back;
    let la = a.train_step(&ex, &mut adam, &mut step_rng(2, 3)).unwrap();
    let lb = b.train_step(&ex, &mut adam_b, &mut step_rng(2, 3)).unwrap();
    assert_eq!(la, lb);
    let ta: BTreeMap<_, _> = a.tensors().map(|(n, t)| (n.to_string(), t.clone())).collect();
    let tb: BTreeMap<_, _> = b.tensors().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert_eq!(ta, tb);
}

#[test]
fn conditioning_width_is_checked() {
    let den = NeuralDenoiser::new(small(), NoiseSchedule::default()).unwrap();
    let mut cond = examples(1, 90).remove(0).cond;
    cond.observation.pop();
    assert!(den.context(&cond).is_err());
}
