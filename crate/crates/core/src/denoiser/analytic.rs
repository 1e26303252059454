use crate::autodiff::{Tensor, Var};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

use super::{check_dim, Conditions, Denoiser};

/// Exact noise prediction for a diagonal Gaussian prior `N(mu, diag(sigma))`.
///
/// The noised marginal is `N(√ᾱ mu, ᾱ sigma + (1 - ᾱ) I)`, so the optimal
/// prediction is `√(1-ᾱ) (x - √ᾱ mu) / (ᾱ sigma + 1 - ᾱ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticGaussianDenoiser {
    mu: Vec<f64>,
    sigma_diag: Vec<f64>,
    schedule: NoiseSchedule,
}

impl AnalyticGaussianDenoiser {
    pub fn new(mu: Vec<f64>, sigma_diag: Vec<f64>, schedule: NoiseSchedule) -> Result<Self> {
        if mu.len() != sigma_diag.len() || mu.is_empty() {
            return Err(Error::invalid("analytic denoiser", "mu and sigma must have the same nonzero length"));
        }
        if sigma_diag.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("analytic denoiser", "sigma must be positive and all values finite"));
        }
        Ok(Self {
            mu,
            sigma_diag,
            schedule,
        })
    }

    /// Isotropic prior with variance `sigma` around `mu`.
    pub fn isotropic(mu: Vec<f64>, sigma: f64, schedule: NoiseSchedule) -> Result<Self> {
        let n = mu.len();
        Self::new(mu, vec![sigma; n], schedule)
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma_diag(&self) -> &[f64] {
        &self.sigma_diag
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn coefficients(&self, t: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let a = self.schedule.alpha_bar(t)?;
        let sa = a.sqrt();
        let s1 = (1.0 - a).sqrt();
        let center = self.mu.iter().map(|m| sa * m).collect();
        let gain = self.sigma_diag.iter().map(|s| s1 / (a * s + 1.0 - a)).collect();
        Ok((center, gain))
    }

    /// Closed-form score `∇ log p_t(x)` of the noised marginal.
    pub fn score(&self, x_t: &[f64], t: usize) -> Result<Vec<f64>> {
        let a = self.schedule.alpha_bar(t)?;
        Ok(x_t
            .iter()
            .zip(&self.mu)
            .zip(&self.sigma_diag)
            .map(|((x, m), s)| -(x - a.sqrt() * m) / (a * s + 1.0 - a))
            .collect())
    }

    /// Log density of the noised marginal.
    pub fn log_density(&self, x_t: &[f64], t: usize) -> Result<f64> {
        let a = self.schedule.alpha_bar(t)?;
        Ok(x_t
            .iter()
            .zip(&self.mu)
            .zip(&self.sigma_diag)
            .map(|((x, m), s)| {
                let v = a * s + 1.0 - a;
                let d = x - a.sqrt() * m;
                -0.5 * (d * d / v + (2.0 * std::f64::consts::PI * v).ln())
            })
            .sum())
    }
}

impl Denoiser for AnalyticGaussianDenoiser {
    type Context = ();

    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn context(&self, _cond: &Conditions) -> Result<()> {
        Ok(())
    }

    fn eval_var<'t>(&self, x_t: Var<'t>, t: usize, _ctx: &()) -> Result<Var<'t>> {
        check_dim("analytic denoiser", self.dim(), &x_t.shape())?;
        let (center, gain) = self.coefficients(t)?;
        let tape = x_t.tape();
        x_t.sub(tape.constant(Tensor::vector(center)))?
            .mul(tape.constant(Tensor::vector(gain)))
    }

    fn eval(&self, x_t: &[f64], t: usize, _ctx: &()) -> Result<Vec<f64>> {
        if x_t.len() != self.dim() {
            return Err(Error::invalid("analytic denoiser", format!("expected {} values, got {}", self.dim(), x_t.len())));
        }
        let (center, gain) = self.coefficients(t)?;
        Ok(x_t
            .iter()
            .zip(center)
            .zip(gain)
            .map(|((x, c), g)| (x - c) * g)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_fixed_point() {
        let sched = NoiseSchedule::default();
        let d = AnalyticGaussianDenoiser::isotropic(vec![0.0; 3], 1.0, sched.clone()).unwrap();
        let x = [0.3, -1.2, 2.0];
        for t in [1, 10, 500, 1000] {
            let s1 = (1.0 - sched.alpha_bar(t).unwrap()).sqrt();
            let eps = d.eval(&x, t, &()).unwrap();
            for (e, xi) in eps.iter().zip(x) {
                assert!((e - s1 * xi).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mode_gives_zero_noise() {
        let sched = NoiseSchedule::default();
        let mu = vec![0.5, -0.25, 1.5];
        let d = AnalyticGaussianDenoiser::new(mu.clone(), vec![0.2, 0.7, 3.0], sched.clone()).unwrap();
        let sa = sched.alpha_bar(40).unwrap().sqrt();
        let x: Vec<f64> = mu.iter().map(|m| sa * m).collect();
        assert!(d.eval(&x, 40, &()).unwrap().iter().all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn invalid_prior_is_rejected() {
        let sched = NoiseSchedule::default();
        assert!(AnalyticGaussianDenoiser::new(vec![0.0], vec![0.0], sched.clone()).is_err());
        assert!(AnalyticGaussianDenoiser::new(vec![0.0, 1.0], vec![1.0], sched).is_err());
    }
}
