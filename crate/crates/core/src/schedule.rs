//! Noise schedule tables and the closed-form diffusion arithmetic.
//!
//! Steps are 1-based: `t ∈ 1..=T`. `alpha_bar(0)` is defined as one so the
//! ancestral update is well formed at `t = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The parameters a schedule is rebuilt from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<S> {
    spec: ScheduleSpec,
    beta: Vec<S>,
    alpha: Vec<S>,
    alpha_bar: Vec<S>,
}

impl<S: Scalar> NoiseSchedule<S> {
    /// Linear `beta` from `beta_start` to `beta_end`, both endpoints included.
    pub fn build_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("step count must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<S> = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                S::lit(beta_start + (beta_end - beta_start) * frac)
            })
            .collect();
        let alpha: Vec<S> = beta.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(S::one());
        for &a in &alpha {
            let prev = *alpha_bar.last().expect("seeded with one");
            alpha_bar.push(prev * a);
        }
        Ok(Self { spec: ScheduleSpec { steps, beta_start, beta_end }, beta, alpha, alpha_bar })
    }

    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        Self::build_linear(spec.steps, spec.beta_start, spec.beta_end)
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.spec.steps
    }

    pub fn beta(&self, t: usize) -> S {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> S {
        self.alpha[t - 1]
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> S {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.spec.steps {
            return Err(Error::StepOutOfRange { t, max: self.spec.steps });
        }
        Ok(())
    }

    /// One forward noising step: `√α_t x_{t-1} + √(1-α_t) ε`.
    pub fn diffuse_step(&self, x_prev: &Tensor<S>, t: usize, noise: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_step(t)?;
        let a = self.alpha(t);
        x_prev.lincomb(a.sqrt(), noise, (S::one() - a).sqrt())
    }

    /// Closed-form marginal: `√ᾱ_t x_0 + √(1-ᾱ_t) ε`.
    pub fn q_sample(&self, x0: &Tensor<S>, t: usize, eps: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        x0.lincomb(ab.sqrt(), eps, (S::one() - ab).sqrt())
    }

    /// Clean-image estimate from a noise prediction.
    pub fn predict_x0(&self, xt: &Tensor<S>, t: usize, eps_hat: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_step(t)?;
        let ab = self.alpha_bar(t);
        let root = ab.sqrt();
        let noise_coef = (S::one() - ab).sqrt();
        xt.zip_map(eps_hat, |x, e| (x - noise_coef * e) / root)
    }

    /// Coefficients of `(x_t, x̂_0, ε')` in the ancestral posterior update.
    pub fn ddpm_coefficients(&self, t: usize) -> Result<(S, S, S)> {
        self.check_step(t)?;
        let a = self.alpha(t);
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let one = S::one();
        let denom = one - ab;
        let c_xt = (one - ab_prev) / denom * a.sqrt();
        let c_x0 = (one - a) / denom * ab_prev.sqrt();
        let sigma = ((one - ab_prev) * (one - a) / denom).sqrt();
        Ok((c_xt, c_x0, sigma))
    }

    /// Ancestral step `x_t -> x_{t-1}` given `x̂_0` and externally drawn noise.
    pub fn ddpm_step(
        &self,
        xt: &Tensor<S>,
        t: usize,
        x0_hat: &Tensor<S>,
        noise: &Tensor<S>,
    ) -> Result<Tensor<S>> {
        let (c_xt, c_x0, sigma) = self.ddpm_coefficients(t)?;
        xt.expect_same_shape(x0_hat)?;
        xt.expect_same_shape(noise)?;
        let data = xt
            .data()
            .iter()
            .zip(x0_hat.data())
            .zip(noise.data())
            .map(|((&x, &x0), &n)| c_xt * x + c_x0 * x0 + sigma * n)
            .collect();
        Tensor::new(xt.shape().to_vec(), data)
    }

    /// Deterministic (η = 0) implicit step from `t` to `t_prev < t`.
    pub fn ddim_step(&self, xt: &Tensor<S>, t: usize, t_prev: usize, eps_hat: &Tensor<S>) -> Result<Tensor<S>> {
        if t_prev >= t {
            return Err(Error::StepOrderViolation { t, t_prev });
        }
        let x0 = self.predict_x0(xt, t, eps_hat)?;
        let ab = self.alpha_bar(t_prev);
        x0.lincomb(ab.sqrt(), eps_hat, (S::one() - ab).sqrt())
    }

    /// Evenly spaced descending visit order `t_k = ⌈k·T/steps⌉` for
    /// `k = steps..1`, always starting at `T`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.spec.steps;
        if steps > total {
            return Err(Error::StepsExceedT { steps, max: total });
        }
        if steps == 0 {
            return Err(Error::Config("at least one sampling step is required".into()));
        }
        Ok((1..=steps).rev().map(|k| (k * total).div_ceil(steps)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule<f64> {
        NoiseSchedule::build_linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::<f64>::build_linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0, 0.5]);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(matches!(NoiseSchedule::<f64>::build_linear(10, 0.02, 1e-4), Err(Error::InvalidRange(_))));
        assert!(matches!(NoiseSchedule::<f64>::build_linear(0, 1e-4, 0.02), Err(Error::InvalidRange(_))));
        assert!(matches!(NoiseSchedule::<f64>::build_linear(10, 0.0, 0.02), Err(Error::InvalidRange(_))));
        assert!(matches!(NoiseSchedule::<f64>::build_linear(10, 0.1, 1.0), Err(Error::InvalidRange(_))));
    }

    #[test]
    fn alpha_bar_table_invariants() {
        let s = sched();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            let rel = (s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() / s.alpha_bar(t);
            assert!(rel <= 1e-15);
        }
        assert!(s.alpha_bar(1000) > 0.0 && s.alpha_bar(1000) < 1.0);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
    }

    #[test]
    fn tables_reproducible_bitwise() {
        assert_eq!(sched(), sched());
    }

    #[test]
    fn step_bounds() {
        let s = sched();
        let x = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(s.q_sample(&x, 0, &x), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(s.q_sample(&x, 1001, &x), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(s.diffuse_step(&x, 0, &x), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(s.ddim_step(&x, 5, 5, &x), Err(Error::StepOrderViolation { .. })));
    }

    #[test]
    fn zero_noise_reductions() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[4, 4, 3], &mut rng);
        let z = Tensor::zeros(&[4, 4, 3]);
        let t = 417;
        assert!(s.diffuse_step(&x, t, &z).unwrap().bits_eq(&x.scale(s.alpha(t).sqrt())));
        assert!(s.q_sample(&x, t, &z).unwrap().bits_eq(&x.scale(s.alpha_bar(t).sqrt())));
        let ones = Tensor::ones(&[4, 4, 3]);
        let d = s.diffuse_step(&z, t, &ones).unwrap();
        assert!(d.data().iter().all(|&v| v == (1.0 - s.alpha(t)).sqrt()));
        let p = s.predict_x0(&x, t, &z).unwrap();
        assert!(p.max_abs_diff(&x.scale(1.0 / s.alpha_bar(t).sqrt())) < 1e-15);
    }

    #[test]
    fn ddpm_step_at_one_returns_prediction() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = Tensor::<f64>::randn(&[8], &mut rng);
        let x0 = Tensor::<f64>::randn(&[8], &mut rng);
        let n = Tensor::<f64>::randn(&[8], &mut rng);
        let (c1, c2, c3) = s.ddpm_coefficients(1).unwrap();
        assert_eq!((c1, c2, c3), (0.0, 1.0, 0.0));
        assert!(s.ddpm_step(&xt, 1, &x0, &n).unwrap().bits_eq(&x0));
        let z = Tensor::zeros(&[8]);
        assert!(s.ddpm_step(&z, 500, &z, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ddim_algebra() {
        let s = sched();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::<f64>::randn(&[16], &mut rng);
        let eps = Tensor::<f64>::randn(&[16], &mut rng);
        let xt = s.q_sample(&x0, 700, &eps).unwrap();
        let prev = s.ddim_step(&xt, 700, 350, &eps).unwrap();
        assert!(prev.max_abs_diff(&s.q_sample(&x0, 350, &eps).unwrap()) < 1e-12);
        let last = s.ddim_step(&xt, 700, 0, &eps).unwrap();
        assert!(last.bits_eq(&s.predict_x0(&xt, 700, &eps).unwrap()));
    }

    #[test]
    fn ddim_visit_order() {
        let s = sched();
        let ts = s.ddim_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.ddim_timesteps(1000).unwrap(), (1..=1000).rev().collect::<Vec<_>>());
        assert!(matches!(s.ddim_timesteps(1001), Err(Error::StepsExceedT { .. })));
    }
}
