//! Ancestral and deterministic samplers with classifier-free guidance, plus
//! attention-map extraction and the image and map file writers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::conditioning::{encode_text, ConditioningInput, TextEncoderConfig};
use crate::denoiser::{predict_noise, AttentionCapture, DenoiserConfig};
use crate::error::{Error, Result};
use crate::mode::{expert_prefix, ExpertBank, TEXT_PREFIX};
use crate::rng::{purpose, stream};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// `s·ε_c + (1 − s)·ε_u`, which equals `ε_u + s(ε_c − ε_u)`. The two
/// endpoints return the corresponding input unchanged.
pub fn cfg_combine<S: Scalar>(eps_cond: &Tensor<S>, eps_uncond: &Tensor<S>, s: S) -> Result<Tensor<S>> {
    eps_cond.expect_same_shape(eps_uncond)?;
    if s == S::one() {
        return Ok(eps_cond.clone());
    }
    if s == S::zero() {
        return Ok(eps_uncond.clone());
    }
    eps_cond.lincomb(s, eps_uncond, S::one() - s)
}

/// Anything that predicts noise for the samplers.
pub trait NoisePredictor<S: Scalar> {
    fn image_shape(&self) -> [usize; 3];

    /// Encodes the caption once per trajectory; `None` for empty text.
    fn encode(&self, cond: &ConditioningInput) -> Result<Option<Tensor<S>>>;

    fn predict(
        &self,
        xt: &Tensor<S>,
        t: usize,
        text: Option<&Tensor<S>>,
        capture: bool,
    ) -> Result<(Tensor<S>, Option<AttentionCapture<S>>)>;
}

impl<S: Scalar> NoisePredictor<S> for ExpertBank<S> {
    fn image_shape(&self) -> [usize; 3] {
        self.config().denoiser.image_shape()
    }

    fn encode(&self, cond: &ConditioningInput) -> Result<Option<Tensor<S>>> {
        encode_text(self, &self.config().text, TEXT_PREFIX, cond)
    }

    fn predict(
        &self,
        xt: &Tensor<S>,
        t: usize,
        text: Option<&Tensor<S>>,
        capture: bool,
    ) -> Result<(Tensor<S>, Option<AttentionCapture<S>>)> {
        let e = self.route(t)?;
        self.note_activation(e);
        predict_noise(self, &self.config().denoiser, &expert_prefix(e), xt, t, text, None, capture)
    }
}

/// A single network without routing; the baseline model.
#[derive(Debug, Clone)]
pub struct SingleModel<S: Scalar> {
    pub text: TextEncoderConfig,
    pub denoiser: DenoiserConfig,
    /// Encoder parameters under `text/`, denoiser parameters unprefixed.
    pub params: ParamStore<S>,
}

impl<S: Scalar> NoisePredictor<S> for SingleModel<S> {
    fn image_shape(&self) -> [usize; 3] {
        self.denoiser.image_shape()
    }

    fn encode(&self, cond: &ConditioningInput) -> Result<Option<Tensor<S>>> {
        encode_text(&self.params, &self.text, TEXT_PREFIX, cond)
    }

    fn predict(
        &self,
        xt: &Tensor<S>,
        t: usize,
        text: Option<&Tensor<S>>,
        capture: bool,
    ) -> Result<(Tensor<S>, Option<AttentionCapture<S>>)> {
        predict_noise(&self.params, &self.denoiser, "", xt, t, text, None, capture)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SampleOptions {
    pub capture: bool,
    /// Keep every `x_t` and `x̂_0` along the way.
    pub keep_states: bool,
}

#[derive(Debug, Clone)]
pub struct SampleTrajectory<S> {
    pub seed: u64,
    pub guidance: f64,
    /// Visited steps in order, ending with 0.
    pub steps: Vec<usize>,
    /// `x_t` before each step, when kept.
    pub states: Vec<Tensor<S>>,
    /// `x̂_0` predicted at each step, when kept.
    pub x0_preds: Vec<Tensor<S>>,
    /// Conditional-branch attention at each step, when captured.
    pub captures: Vec<AttentionCapture<S>>,
    pub capture_enabled: bool,
    pub image: Tensor<S>,
}

fn guided_eps<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    xt: &Tensor<S>,
    t: usize,
    text: Option<&Tensor<S>>,
    s: S,
    capture: bool,
) -> Result<(Tensor<S>, Option<AttentionCapture<S>>)> {
    let (eps_c, maps) = model.predict(xt, t, text, capture)?;
    if text.is_none() {
        return Ok((eps_c, maps));
    }
    let (eps_u, _) = model.predict(xt, t, None, false)?;
    Ok((cfg_combine(&eps_c, &eps_u, s)?, maps))
}

fn start<S: Scalar>(shape: [usize; 3], seed: u64) -> (Tensor<S>, rand_chacha::ChaCha8Rng) {
    let mut rng = stream(&[seed, purpose::SAMPLE]);
    let x = Tensor::randn(&shape, &mut rng);
    (x, rng)
}

/// Ancestral sampling over every step `T … 1`. Fresh noise is injected at
/// every step except the last.
pub fn sample_ddpm<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<S>,
    cond: &ConditioningInput,
    guidance: f64,
    seed: u64,
    opts: SampleOptions,
) -> Result<SampleTrajectory<S>> {
    let shape = model.image_shape();
    let text = model.encode(cond)?;
    let s = S::lit(guidance);
    let (mut x, mut rng) = start::<S>(shape, seed);
    let mut traj = SampleTrajectory {
        seed,
        guidance,
        steps: Vec::with_capacity(schedule.steps() + 1),
        states: vec![],
        x0_preds: vec![],
        captures: vec![],
        capture_enabled: opts.capture,
        image: x.clone(),
    };
    for t in (1..=schedule.steps()).rev() {
        let (eps, maps) = guided_eps(model, &x, t, text.as_ref(), s, opts.capture)?;
        let x0 = schedule.predict_x0(&x, t, &eps)?;
        let noise = if t > 1 { Tensor::randn(&shape, &mut rng) } else { Tensor::zeros(&shape) };
        let next = schedule.ddpm_step(&x, t, &x0, &noise)?;
        traj.steps.push(t);
        if opts.keep_states {
            traj.states.push(x);
            traj.x0_preds.push(x0);
        }
        if let Some(m) = maps {
            traj.captures.push(m);
        }
        x = next;
    }
    traj.steps.push(0);
    traj.image = x;
    Ok(traj)
}

/// Deterministic sampling over `steps` evenly spaced steps; randomness enters
/// only through `x_T`.
pub fn sample_ddim<S: Scalar, M: NoisePredictor<S> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule<S>,
    cond: &ConditioningInput,
    guidance: f64,
    steps: usize,
    seed: u64,
    opts: SampleOptions,
) -> Result<SampleTrajectory<S>> {
    let visit = schedule.ddim_timesteps(steps)?;
    let shape = model.image_shape();
    let text = model.encode(cond)?;
    let s = S::lit(guidance);
    let (mut x, _) = start::<S>(shape, seed);
    let mut traj = SampleTrajectory {
        seed,
        guidance,
        steps: Vec::with_capacity(visit.len() + 1),
        states: vec![],
        x0_preds: vec![],
        captures: vec![],
        capture_enabled: opts.capture,
        image: x.clone(),
    };
    for (k, &t) in visit.iter().enumerate() {
        let t_prev = visit.get(k + 1).copied().unwrap_or(0);
        let (eps, maps) = guided_eps(model, &x, t, text.as_ref(), s, opts.capture)?;
        let next = schedule.ddim_step(&x, t, t_prev, &eps)?;
        traj.steps.push(t);
        if opts.keep_states {
            traj.x0_preds.push(schedule.predict_x0(&x, t, &eps)?);
            traj.states.push(x);
        }
        if let Some(m) = maps {
            traj.captures.push(m);
        }
        x = next;
    }
    traj.steps.push(0);
    traj.image = x;
    Ok(traj)
}

/// One step's text-attention map over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<S> {
    pub t: usize,
    /// `grid_h × grid_w` mean attention from each image token to the text.
    pub grid: Tensor<S>,
}

/// Per step, the attention mass each image token sends to the text tokens,
/// averaged over text tokens and blocks, laid out on the patch grid.
pub fn capture_attention<S: Scalar>(traj: &SampleTrajectory<S>, grid: (usize, usize)) -> Result<Vec<AttentionMap<S>>> {
    if !traj.capture_enabled {
        return Err(Error::CaptureDisabled);
    }
    traj.captures
        .iter()
        .zip(&traj.steps)
        .map(|(c, &t)| {
            let mass = c
                .text_mass()
                .ok_or_else(|| Error::Data("attention maps need at least one text token".into()))?;
            Ok(AttentionMap { t, grid: Tensor::new(vec![grid.0, grid.1], mass)? })
        })
        .collect()
}

/// Shannon entropy (nats) of a map normalized to unit mass.
pub fn spatial_entropy<S: Scalar>(map: &Tensor<S>) -> f64 {
    let total: f64 = map.data().iter().map(|v| v.as_f64()).sum();
    if total <= 0.0 {
        return 0.0;
    }
    map.data()
        .iter()
        .map(|v| v.as_f64() / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary PPM (P6) bytes of an `h × w × 3` image in `[-1, 1]`.
pub fn encode_ppm<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::ShapeMismatch(format!("PPM needs h×w×3, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| to_byte(v.as_f64())));
    Ok(out)
}

/// Binary PGM (P5) of a map, scaled so its maximum is white and each cell
/// drawn as a `zoom × zoom` block.
pub fn encode_pgm<S: Scalar>(map: &Tensor<S>, zoom: usize) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    let max = map.data().iter().fold(0.0f64, |m, v| m.max(v.as_f64()));
    let z = zoom.max(1);
    let mut out = format!("P5\n{} {}\n255\n", w * z, h * z).into_bytes();
    for r in 0..h * z {
        for c in 0..w * z {
            let v = map.at2(r / z, c / z).as_f64();
            out.push(if max > 0.0 { (255.0 * (v / max).clamp(0.0, 1.0)).round() as u8 } else { 0 });
        }
    }
    Ok(out)
}

/// Comma-separated rows of a map.
pub fn encode_csv<S: Scalar>(map: &Tensor<S>) -> Result<String> {
    let (h, w) = map.dims2()?;
    let mut s = String::new();
    for r in 0..h {
        let row: Vec<String> = (0..w).map(|c| format!("{:e}", map.at2(r, c).as_f64())).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    Ok(s)
}

/// Metadata written beside every sampled image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub seed: u64,
    pub guidance: f64,
    pub steps: Vec<usize>,
    pub sampler: String,
    pub prompt: String,
    pub checkpoint_sha256: String,
}

pub fn write_ppm<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guidance_endpoints_are_exact() {
        let c = Tensor::<f64>::new(vec![3], vec![-0.0, 1.5, -2.25]).unwrap();
        let u = Tensor::new(vec![3], vec![0.3, -0.7, 9.0]).unwrap();
        assert!(cfg_combine(&c, &u, 1.0).unwrap().bits_eq(&c));
        assert!(cfg_combine(&c, &u, 0.0).unwrap().bits_eq(&u));
        let m = cfg_combine(&c, &u, 2.1).unwrap();
        for i in 0..3 {
            let want = u.data()[i] + 2.1 * (c.data()[i] - u.data()[i]);
            assert!((m.data()[i] - want).abs() < 1e-12);
        }
        assert!(cfg_combine(&c, &Tensor::zeros(&[2]), 2.0).is_err());
    }

    #[test]
    fn ppm_maps_range_affinely() {
        let img = Tensor::<f64>::new(vec![1, 2, 3], vec![-1.0, 0.0, 1.0, -5.0, 5.0, 0.5]).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 128, 255, 0, 255, 191]);
    }

    #[test]
    fn entropy_of_uniform_and_point_maps() {
        let u = Tensor::<f64>::full(&[2, 2], 0.25);
        assert!((spatial_entropy(&u) - 4f64.ln()).abs() < 1e-12);
        let p = Tensor::<f64>::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(spatial_entropy(&p), 0.0);
    }
}
