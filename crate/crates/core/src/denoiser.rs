//! Patch-token noise predictor with knowledge-scaled joint attention.
//!
//! An image `h × w × c` is cut into `n_x` patch tokens. Each block attends
//! from the image tokens to the concatenation of image and text tokens, so a
//! single softmax covers both self- and cross-attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, ParamStore};
use crate::conditioning::AttentionScale;
use crate::error::{Error, Result};
use crate::nn;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    /// Logits multiplied elementwise by `W_a`.
    #[default]
    Multiplicative,
    /// `W_a - 1` added to the logits instead.
    Additive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub d: usize,
    pub d_text: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    /// Schedule length, for step validation.
    pub steps: usize,
    pub attn_mode: AttnMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            patch: 4,
            d: 128,
            d_text: 64,
            layers: 4,
            ffn_mult: 2,
            steps: 1000,
            attn_mode: AttnMode::Multiplicative,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::IndivisibleShape { h: self.height, w: self.width, patch: self.patch });
        }
        if self.d == 0 || self.d_text == 0 || self.channels == 0 || self.steps == 0 {
            return Err(Error::Config("denoiser dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn n_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

/// Row-major patch tokens; each token lists its pixels row by row with the
/// channels innermost.
pub fn patchify<S: Scalar>(x: &Tensor<S>, patch: usize) -> Result<Tensor<S>> {
    let &[h, w, c] = x.shape() else {
        return Err(Error::ShapeMismatch(format!("expected h×w×c image, got {:?}", x.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::IndivisibleShape { h, w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..patch {
                let row = pr * patch + dy;
                let start = (row * w + pc * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

pub fn unpatchify<S: Scalar>(tokens: &Tensor<S>, h: usize, w: usize, c: usize, patch: usize) -> Result<Tensor<S>> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::IndivisibleShape { h, w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    if tokens.shape() != [gh * gw, patch * patch * c] {
        return Err(Error::ShapeMismatch(format!(
            "{:?} tokens for a {h}x{w}x{c} image with patch {patch}",
            tokens.shape()
        )));
    }
    let src = tokens.data();
    let mut out = vec![S::zero(); h * w * c];
    let mut k = 0;
    for pr in 0..gh {
        for pc in 0..gw {
            for dy in 0..patch {
                let row = pr * patch + dy;
                let start = (row * w + pc * patch) * c;
                out[start..start + patch * c].copy_from_slice(&src[k..k + patch * c]);
                k += patch * c;
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

pub fn init_denoiser<S: Scalar, R: Rng + ?Sized>(cfg: &DenoiserConfig, prefix: &str, rng: &mut R) -> ParamStore<S> {
    let d = cfg.d;
    let mut p = ParamStore::new();
    nn::init_linear(&mut p, &format!("{prefix}patch"), cfg.token_dim(), d, rng);
    p.insert(format!("{prefix}pos"), Tensor::randn(&[cfg.n_tokens(), d], rng).scale(S::lit(0.1)));
    nn::init_linear(&mut p, &format!("{prefix}time1"), d, d, rng);
    nn::init_linear(&mut p, &format!("{prefix}time2"), d, d, rng);
    let std = S::lit(1.0 / (d as f64).sqrt());
    let std_y = S::lit(1.0 / (cfg.d_text as f64).sqrt());
    for l in 0..cfg.layers {
        let b = format!("{prefix}blk{l}");
        nn::init_layer_norm(&mut p, &format!("{b}.ln1"), d);
        p.insert(format!("{b}.q"), Tensor::zeros(&[d, d]));
        p.insert(format!("{b}.kx"), Tensor::randn(&[d, d], rng).scale(std));
        p.insert(format!("{b}.vx"), Tensor::randn(&[d, d], rng).scale(std));
        p.insert(format!("{b}.ky"), Tensor::randn(&[cfg.d_text, d], rng).scale(std_y));
        p.insert(format!("{b}.vy"), Tensor::randn(&[cfg.d_text, d], rng).scale(std_y));
        nn::init_linear(&mut p, &format!("{b}.o"), d, d, rng);
        nn::init_layer_norm(&mut p, &format!("{b}.ln2"), d);
        nn::init_feed_forward(&mut p, &format!("{b}.ffn"), d, d * cfg.ffn_mult, rng);
    }
    nn::init_layer_norm(&mut p, &format!("{prefix}ln"), d);
    nn::init_linear(&mut p, &format!("{prefix}head"), d, cfg.token_dim(), rng);
    p
}

/// Nodes of one recorded denoiser pass.
#[derive(Debug, Clone)]
pub struct DenoiserNodes {
    /// Predicted noise as `n_x × token_dim` tokens.
    pub eps_tokens: NodeId,
    /// Post-softmax attention of every block, `n_x × (n_x + n_y)`.
    pub attention: Vec<NodeId>,
}

/// Records one denoiser pass.
///
/// `tokens` is the patchified noisy image, `text` the encoded caption (absent
/// for the unconditional branch) and `scale` the optional `W_a`, which must be
/// `n_x × (n_x + n_y)`.
pub fn build_denoiser<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &DenoiserConfig,
    prefix: &str,
    tokens: NodeId,
    t: usize,
    text: Option<NodeId>,
    scale: Option<&AttentionScale<S>>,
) -> Result<DenoiserNodes> {
    if t == 0 || t > cfg.steps {
        return Err(Error::StepOutOfRange { t, max: cfg.steps });
    }
    let d = cfg.d;
    let n_x = cfg.n_tokens();
    let scale_node = match scale {
        Some(s) => {
            if s.matrix.shape()[0] != n_x {
                return Err(Error::ShapeMismatch(format!(
                    "attention scale {:?} for {n_x} image tokens",
                    s.matrix.shape()
                )));
            }
            let m = match cfg.attn_mode {
                AttnMode::Multiplicative => s.matrix.clone(),
                AttnMode::Additive => s.matrix.map(|v| v - S::one()),
            };
            Some(g.constant(m))
        }
        None => None,
    };

    let x = nn::linear(g, &format!("{prefix}patch"), tokens);
    let pos = g.param(&format!("{prefix}pos"));
    let x = g.add(x, pos);
    let temb = g.constant(nn::timestep_embedding::<S>(t, d).reshape(&[1, d])?);
    let temb = nn::linear(g, &format!("{prefix}time1"), temb);
    let temb = g.silu(temb);
    let temb = nn::linear(g, &format!("{prefix}time2"), temb);
    let mut x = g.add(x, temb);

    let inv_sqrt_d = S::lit(1.0 / (d as f64).sqrt());
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let b = format!("{prefix}blk{l}");
        let h = nn::layer_norm(g, &format!("{b}.ln1"), x);
        let q = nn::project(g, &format!("{b}.q"), h);
        let kx = nn::project(g, &format!("{b}.kx"), h);
        let vx = nn::project(g, &format!("{b}.vx"), h);
        let (k, v) = match text {
            Some(y) => {
                let ky = nn::project(g, &format!("{b}.ky"), y);
                let vy = nn::project(g, &format!("{b}.vy"), y);
                (g.concat(&[kx, ky]), g.concat(&[vx, vy]))
            }
            None => (kx, vx),
        };
        let kt = g.transpose(k);
        let mut logits = g.matmul(q, kt);
        if let Some(s) = scale_node {
            logits = match cfg.attn_mode {
                AttnMode::Multiplicative => g.mul(logits, s),
                AttnMode::Additive => g.add(logits, s),
            };
        }
        let logits = g.scale(logits, inv_sqrt_d);
        let probs = g.softmax(logits);
        attention.push(probs);
        let a = g.matmul(probs, v);
        let a = nn::linear(g, &format!("{b}.o"), a);
        x = g.add(x, a);
        let h = nn::layer_norm(g, &format!("{b}.ln2"), x);
        let f = nn::feed_forward(g, &format!("{b}.ffn"), h);
        x = g.add(x, f);
    }
    let x = nn::layer_norm(g, &format!("{prefix}ln"), x);
    let eps_tokens = nn::linear(g, &format!("{prefix}head"), x);
    Ok(DenoiserNodes { eps_tokens, attention })
}

/// Post-softmax attention of each block for one network evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture<S> {
    pub n_x: usize,
    /// One `n_x × (n_x + n_y)` matrix per block; columns past `n_x` are text.
    pub blocks: Vec<Tensor<S>>,
}

impl<S: Scalar> AttentionCapture<S> {
    pub fn n_text(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.shape()[1] - self.n_x)
    }

    /// Mean over blocks and text columns of each image token's attention to
    /// the text, one value per image token. `None` without text tokens.
    pub fn text_mass(&self) -> Option<Vec<S>> {
        let n_y = self.n_text();
        if n_y == 0 || self.blocks.is_empty() {
            return None;
        }
        let cols = self.n_x + n_y;
        let norm = S::lit((n_y * self.blocks.len()) as f64);
        let mut out = vec![S::zero(); self.n_x];
        for b in &self.blocks {
            for (i, row) in b.data().chunks(cols).enumerate() {
                out[i] += row[self.n_x..].iter().fold(S::zero(), |s, &v| s + v);
            }
        }
        Some(out.into_iter().map(|v| v / norm).collect())
    }
}

/// Evaluates `ε_θ(x_t, t)` for one image. `text` is the encoded caption.
pub fn predict_noise<S: Scalar>(
    params: &dyn Bindings<S>,
    cfg: &DenoiserConfig,
    prefix: &str,
    xt: &Tensor<S>,
    t: usize,
    text: Option<&Tensor<S>>,
    scale: Option<&AttentionScale<S>>,
    capture: bool,
) -> Result<(Tensor<S>, Option<AttentionCapture<S>>)> {
    if xt.shape() != cfg.image_shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?}, model expects {:?}",
            xt.shape(),
            cfg.image_shape()
        )));
    }
    let mut g = Graph::new();
    let tokens = g.constant(patchify(xt, cfg.patch)?);
    let y = text.map(|y| g.constant(y.clone()));
    let nodes = build_denoiser(&mut g, cfg, prefix, tokens, t, y, scale)?;
    g.forward(params)?;
    let eps = g.value(nodes.eps_tokens).expect("evaluated");
    let eps = unpatchify(eps, cfg.height, cfg.width, cfg.channels, cfg.patch)?;
    let maps = capture.then(|| AttentionCapture {
        n_x: cfg.n_tokens(),
        blocks: nodes.attention.iter().map(|&a| g.value(a).expect("evaluated").clone()).collect(),
    });
    Ok((eps, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patch_roundtrip_small() {
        let x = Tensor::<f64>::from_fn(&[4, 4, 1], |i| i as f64);
        let p = patchify(&x, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert!(unpatchify(&p, 4, 4, 1, 2).unwrap().bits_eq(&x));
        let one = patchify(&x, 4).unwrap();
        assert_eq!(one.shape(), &[1, 16]);
        assert!(matches!(patchify(&x, 3), Err(Error::IndivisibleShape { .. })));
    }

    #[test]
    fn untrained_attention_is_uniform() {
        let cfg = DenoiserConfig { height: 8, width: 8, patch: 4, d: 8, d_text: 4, layers: 2, steps: 10, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = init_denoiser::<f64, _>(&cfg, "", &mut rng);
        let x = Tensor::randn(&[8, 8, 3], &mut rng);
        let y = Tensor::randn(&[3, 4], &mut rng);
        let (eps, maps) = predict_noise(&p, &cfg, "", &x, 5, Some(&y), None, true).unwrap();
        assert_eq!(eps.shape(), &[8, 8, 3]);
        for b in &maps.unwrap().blocks {
            assert!(b.data().iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
        }
    }
}
