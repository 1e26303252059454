use hoi_refine::autodiff::Var;
use hoi_refine::denoiser::{AnalyticGaussianDenoiser, Conditions, Denoiser};
use hoi_refine::diffusion::{
    ddim_invert, ddim_sample_loop, forward_diffuse, guided_ddim_step, predict_x0, GradMode, GuidedStepConfig,
    NoiseSchedule, QuadraticGuidance,
};
use hoi_refine::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn prior(dim: usize, seed: u64) -> AnalyticGaussianDenoiser {
    prior_with(dim, seed, 0.02..0.1)
}

fn prior_with(dim: usize, seed: u64, var: std::ops::Range<f64>) -> AnalyticGaussianDenoiser {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mu = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let sigma = (0..dim).map(|_| rng.gen_range(var.clone())).collect();
    AnalyticGaussianDenoiser::new(mu, sigma, NoiseSchedule::default()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

struct Zero(usize);

impl Denoiser for Zero {
    type Context = ();
    fn dim(&self) -> usize {
        self.0
    }
    fn context(&self, _: &Conditions) -> Result<()> {
        Ok(())
    }
    fn eval_var<'t>(&self, x: Var<'t>, _t: usize, _: &()) -> Result<Var<'t>> {
        x.scale(0.0)
    }
}

#[test]
fn forward_diffusion_moments_match_closed_form() {
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x0 = [0.8];
    let t = 300;
    let n = 40_000;
    let samples: Vec<f64> = (0..n)
        .map(|_| forward_diffuse(&x0, t, &[rng.sample(StandardNormal)], &s).unwrap()[0])
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let a = s.alpha_bar(t).unwrap();
    assert!((mean - a.sqrt() * 0.8).abs() < 0.02, "mean {mean}");
    assert!((var / (1.0 - a) - 1.0).abs() < 0.03, "var {var}");
}

#[test]
fn alpha_bar_is_running_product() {
    let s = NoiseSchedule::default();
    let mut acc = 1.0;
    for t in 1..=1000 {
        let z = 1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / 999.0;
        assert!((s.zeta(t).unwrap() - z).abs() < 1e-15);
        acc *= 1.0 - z;
        assert!((s.alpha_bar(t).unwrap() - acc).abs() < 1e-14);
    }
}

#[test]
fn score_identity_holds_exactly() {
    let d = prior(6, 1);
    let s = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in [1, 50, 500, 999] {
        let x: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let eps = d.eval(&x, t, &()).unwrap();
        let score = d.score(&x, t).unwrap();
        let k = (1.0 - s.alpha_bar(t).unwrap()).sqrt();
        for (e, sc) in eps.iter().zip(&score) {
            assert!((e + k * sc).abs() < 1e-12);
        }
    }
}

#[test]
fn score_matches_finite_difference_of_log_density() {
    let d = prior(3, 4);
    let x = [0.2, -0.4, 0.9];
    for t in [10, 400] {
        let score = d.score(&x, t).unwrap();
        for i in 0..3 {
            let h = 1e-5;
            let (mut p, mut m) = (x, x);
            p[i] += h;
            m[i] -= h;
            let fd = (d.log_density(&p, t).unwrap() - d.log_density(&m, t).unwrap()) / (2.0 * h);
            assert!((fd - score[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn zero_noise_inversion_rescales() {
    let s = NoiseSchedule::default();
    let x0 = [0.3, -1.2];
    let x = ddim_invert(&x0, 50, 5, &Zero(2), &(), &s).unwrap();
    let k = s.alpha_bar(50).unwrap().sqrt();
    assert!(max_abs_diff(&x, &[k * 0.3, k * -1.2]) < 1e-14);
}

fn round_trip_error(delta_t: usize) -> f64 {
    let s = NoiseSchedule::default();
    let d = prior_with(8, 3, 0.5..1.5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0: Vec<f64> = d
        .mu()
        .iter()
        .zip(d.sigma_diag())
        .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let cfg = GuidedStepConfig {
        tau: 50,
        delta_t,
        rho: 0.0,
        ..Default::default()
    };
    let x_tau = ddim_invert(&x0, 50, delta_t, &d, &(), &s).unwrap();
    let out = ddim_sample_loop::<_, QuadraticGuidance>(&x_tau, &d, &(), None, &cfg, &s, None).unwrap();
    max_abs_diff(&out.x0, &x0)
}

#[test]
fn round_trip_converges_with_step_size() {
    let errs: Vec<f64> = [25, 10, 5, 2, 1].iter().map(|&dt| round_trip_error(dt)).collect();
    for w in errs.windows(2) {
        assert!(w[1] <= w[0], "{errs:?}");
    }
    assert!(errs[4] < 1e-3, "{errs:?}");
}

#[test]
fn guided_sampling_reaches_conjugate_posterior() {
    let s = NoiseSchedule::default();
    let d = prior(5, 9);
    let target = vec![0.4, -0.3, 0.0, 0.7, -0.6];
    let (rho, lambda) = (2.0, 0.5);
    let g = QuadraticGuidance {
        lambda,
        target: target.clone(),
    };
    let cfg = GuidedStepConfig {
        tau: 1000,
        delta_t: 1,
        rho,
        ..Default::default()
    };
    let k = s.alpha_bar(1000).unwrap().sqrt();
    let start: Vec<f64> = d.mu().iter().map(|m| k * m).collect();
    let out = ddim_sample_loop(&start, &d, &(), Some(&g), &cfg, &s, None).unwrap();
    let post: Vec<f64> = (0..5)
        .map(|i| {
            let (m, v) = (d.mu()[i], d.sigma_diag()[i]);
            (m / v + rho * lambda * target[i]) / (1.0 / v + rho * lambda)
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = out.x0.iter().zip(&post).map(|(a, b)| a - b).collect();
    let rel = norm(&diff) / norm(&post);
    assert!(rel < 0.05, "relative error {rel}");
}

#[test]
fn frozen_epsilon_equals_full_for_constant_denoiser() {
    let s = NoiseSchedule::default();
    let g = QuadraticGuidance {
        lambda: 1.0,
        target: vec![1.0, 1.0],
    };
    let x = [0.1, -0.2];
    let mut cfg = GuidedStepConfig {
        rho: 1.0,
        ..Default::default()
    };
    let full = guided_ddim_step(&x, 20, 2, &Zero(2), &(), Some(&g), &cfg, &s).unwrap();
    cfg.grad_mode = GradMode::FrozenEpsilon;
    let frozen = guided_ddim_step(&x, 20, 2, &Zero(2), &(), Some(&g), &cfg, &s).unwrap();
    assert!(max_abs_diff(&full.x_prev, &frozen.x_prev) < 1e-15);
    assert!(full.grad_norm > 0.0);
}

#[test]
fn inactive_guidance_is_plain_ddim() {
    let s = NoiseSchedule::default();
    let d = prior(4, 11);
    let g = QuadraticGuidance {
        lambda: 3.0,
        target: vec![1.0; 4],
    };
    let x = [0.5, 0.1, -0.3, 0.2];
    let cfg = GuidedStepConfig {
        rho: 0.0,
        ..Default::default()
    };
    let a = guided_ddim_step(&x, 30, 2, &d, &(), Some(&g), &cfg, &s).unwrap();
    let b = guided_ddim_step::<_, QuadraticGuidance>(&x, 30, 2, &d, &(), None, &cfg, &s).unwrap();
    assert_eq!(a.x_prev, b.x_prev);
    assert!(a.loss.is_none());
}

#[test]
fn huge_gradient_aborts_step() {
    let s = NoiseSchedule::default();
    let g = QuadraticGuidance {
        lambda: 1e9,
        target: vec![5.0],
    };
    let cfg = GuidedStepConfig {
        rho: 1.0,
        ..Default::default()
    };
    let err = guided_ddim_step(&[0.0], 20, 2, &Zero(1), &(), Some(&g), &cfg, &s).unwrap_err();
    assert!(matches!(err, hoi_refine::Error::GradientOverflow { .. }), "{err}");
}

#[test]
fn sample_loop_clamps_shape_block() {
    let s = NoiseSchedule::default();
    let d = AnalyticGaussianDenoiser::isotropic(vec![3.0; 3], 0.01, s.clone()).unwrap();
    let cfg = GuidedStepConfig {
        tau: 10,
        delta_t: 2,
        rho: 0.0,
        ..Default::default()
    };
    let x = ddim_invert(&[3.0; 3], 10, 2, &d, &(), &s).unwrap();
    let out = ddim_sample_loop::<_, QuadraticGuidance>(&x, &d, &(), None, &cfg, &s, Some(1..3)).unwrap();
    assert!((out.x0[0] - 3.0).abs() < 1e-6);
    assert_eq!(&out.x0[1..], &[1.0, 1.0]);
    assert_eq!(out.steps.len(), 5);
}

proptest! {
    #[test]
    fn predict_x0_inverts_forward(x in prop::collection::vec(-3.0f64..3.0, 1..6), t in 0usize..1000, seed in any::<u64>()) {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = x.iter().map(|_| rng.sample(StandardNormal)).collect();
        let xt = forward_diffuse(&x, t, &eps, &s).unwrap();
        let back = predict_x0(&xt, t, &eps, &s).unwrap();
        prop_assert!(max_abs_diff(&back, &x) < 1e-9);
    }

    #[test]
    fn inversion_is_deterministic(x in prop::collection::vec(-1.0f64..1.0, 3), dt in prop::sample::select(vec![1usize, 2, 5, 10])) {
        let s = NoiseSchedule::default();
        let d = prior(3, 0);
        let a = ddim_invert(&x, 50, dt, &d, &(), &s).unwrap();
        let b = ddim_invert(&x, 50, dt, &d, &(), &s).unwrap();
        prop_assert_eq!(a, b);
    }
}
