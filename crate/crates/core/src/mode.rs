//! Mixture of denoising experts: every expert owns one consecutive block of
//! timesteps and all experts share a single text encoder.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, ParamStore};
use crate::conditioning::{init_text_encoder, TextEncoderConfig};
use crate::denoiser::{init_denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TEXT_PREFIX: &str = "text/";

pub fn expert_prefix(i: usize) -> String {
    format!("e{i}/")
}

/// Inclusive `(start, end)` step blocks; block `i` (0-based) holds the steps
/// with `⌈t·n/T⌉ = i + 1`.
pub fn partition_timesteps(steps: usize, n: usize) -> Result<Vec<(usize, usize)>> {
    if n == 0 || n > steps {
        return Err(Error::InvalidExpertCount { n, steps });
    }
    let mut blocks = Vec::with_capacity(n);
    let mut start = 1;
    for t in 1..=steps {
        let block = (t * n).div_ceil(steps);
        let next = if t == steps { usize::MAX } else { ((t + 1) * n).div_ceil(steps) };
        if next != block {
            blocks.push((start, t));
            start = t + 1;
        }
    }
    Ok(blocks)
}

/// 0-based index of the expert owning step `t`.
pub fn route_step(steps: usize, n: usize, t: usize) -> Result<usize> {
    if n == 0 || n > steps {
        return Err(Error::InvalidExpertCount { n, steps });
    }
    if t == 0 || t > steps {
        return Err(Error::StepOutOfRange { t, max: steps });
    }
    Ok((t * n).div_ceil(steps) - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub text: TextEncoderConfig,
    pub denoiser: DenoiserConfig,
    pub experts: usize,
}

impl BankConfig {
    pub fn steps(&self) -> usize {
        self.denoiser.steps
    }
}

/// All trainable state of a model: one text encoder under [`TEXT_PREFIX`] and
/// `n` denoisers under `e0/ … e{n-1}/`.
///
/// Parameter reads through [`Bindings`] and routed evaluations are counted
/// per expert so tests can observe which experts a computation touched.
#[derive(Debug)]
pub struct ExpertBank<S: Scalar> {
    config: BankConfig,
    params: ParamStore<S>,
    reads: Vec<AtomicUsize>,
    activations: Vec<AtomicUsize>,
}

impl<S: Scalar> Clone for ExpertBank<S> {
    fn clone(&self) -> Self {
        Self::from_parts(self.config.clone(), self.params.clone()).expect("validated on construction")
    }
}

impl<S: Scalar> ExpertBank<S> {
    pub fn from_parts(config: BankConfig, params: ParamStore<S>) -> Result<Self> {
        config.denoiser.validate()?;
        partition_timesteps(config.steps(), config.experts)?;
        if config.text.width != config.denoiser.d_text {
            return Err(Error::Config(format!(
                "text width {} differs from denoiser text width {}",
                config.text.width, config.denoiser.d_text
            )));
        }
        let counters = || (0..config.experts).map(|_| AtomicUsize::new(0)).collect();
        Ok(Self { reads: counters(), activations: counters(), config, params })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn experts(&self) -> usize {
        self.config.experts
    }

    pub fn partition(&self) -> Vec<(usize, usize)> {
        partition_timesteps(self.config.steps(), self.config.experts).expect("validated on construction")
    }

    pub fn route(&self, t: usize) -> Result<usize> {
        route_step(self.config.steps(), self.config.experts, t)
    }

    /// Denoiser parameters of expert `i` without the expert prefix.
    pub fn expert_params(&self, i: usize) -> ParamStore<S> {
        self.params.strip_prefix(&expert_prefix(i))
    }

    pub fn text_params(&self) -> ParamStore<S> {
        self.params.strip_prefix(TEXT_PREFIX)
    }

    /// A bank with `n` experts, each a copy of expert 0 of this bank, sharing
    /// this bank's text encoder.
    pub fn expand(&self, n: usize) -> Result<Self> {
        let mut params = self.params.strip_prefix(TEXT_PREFIX).prefixed(TEXT_PREFIX);
        let warm = self.expert_params(0);
        for i in 0..n {
            params.extend(warm.prefixed(&expert_prefix(i)));
        }
        Self::from_parts(BankConfig { experts: n, ..self.config.clone() }, params)
    }

    pub fn note_activation(&self, expert: usize) {
        self.activations[expert].fetch_add(1, Ordering::Relaxed);
    }

    pub fn activation_counts(&self) -> Vec<usize> {
        self.activations.iter().map(|a| a.load(Ordering::Relaxed)).collect()
    }

    pub fn read_counts(&self) -> Vec<usize> {
        self.reads.iter().map(|a| a.load(Ordering::Relaxed)).collect()
    }

    pub fn reset_counters(&self) {
        for c in self.reads.iter().chain(&self.activations) {
            c.store(0, Ordering::Relaxed);
        }
    }
}

impl<S: Scalar> Bindings<S> for ExpertBank<S> {
    fn lookup(&self, name: &str) -> Option<&Tensor<S>> {
        let value = self.params.get(name)?;
        if let Some(rest) = name.strip_prefix('e') {
            if let Some(i) = rest.split('/').next().and_then(|s| s.parse::<usize>().ok()) {
                if let Some(c) = self.reads.get(i) {
                    c.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        Some(value)
    }
}

/// A fresh bank. With `warm_start` (unprefixed denoiser parameters) every
/// expert is a copy of it; otherwise experts are drawn independently. The
/// text encoder is always drawn first, once.
pub fn init_bank<S: Scalar, R: Rng + ?Sized>(
    config: BankConfig,
    warm_start: Option<&ParamStore<S>>,
    rng: &mut R,
) -> Result<ExpertBank<S>> {
    let mut params = init_text_encoder(&config.text, TEXT_PREFIX, rng);
    for i in 0..config.experts {
        let expert = match warm_start {
            Some(w) => w.prefixed(&expert_prefix(i)),
            None => init_denoiser(&config.denoiser, &expert_prefix(i), rng),
        };
        params.extend(expert);
    }
    ExpertBank::from_parts(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousand_steps_ten_experts() {
        let blocks = partition_timesteps(1000, 10).unwrap();
        assert_eq!(blocks.len(), 10);
        for (i, &(s, e)) in blocks.iter().enumerate() {
            assert_eq!((s, e), (100 * i + 1, 100 * (i + 1)));
        }
        assert_eq!(route_step(1000, 10, 100).unwrap(), 0);
        assert_eq!(route_step(1000, 10, 101).unwrap(), 1);
        assert_eq!(route_step(1000, 10, 1000).unwrap(), 9);
    }

    #[test]
    fn uneven_and_degenerate_partitions() {
        assert_eq!(partition_timesteps(7, 3).unwrap(), vec![(1, 2), (3, 4), (5, 7)]);
        assert_eq!(partition_timesteps(1000, 1).unwrap(), vec![(1, 1000)]);
        assert!(matches!(partition_timesteps(5, 6), Err(Error::InvalidExpertCount { .. })));
        assert!(matches!(partition_timesteps(5, 0), Err(Error::InvalidExpertCount { .. })));
        assert!(matches!(route_step(10, 2, 11), Err(Error::StepOutOfRange { .. })));
    }
}
