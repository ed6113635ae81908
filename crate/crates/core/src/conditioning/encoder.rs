use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::nn;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::ConditioningInput;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub width: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { vocab_size: 38, max_len: 48, width: 64, layers: 1, ffn_mult: 2 }
    }
}

/// Token and position tables, pre-norm self-attention blocks and a final
/// normalization, all stored under `prefix`.
pub fn init_text_encoder<S: Scalar, R: Rng + ?Sized>(
    cfg: &TextEncoderConfig,
    prefix: &str,
    rng: &mut R,
) -> ParamStore<S> {
    let d = cfg.width;
    let mut p = ParamStore::new();
    p.insert(format!("{prefix}tok"), Tensor::randn(&[cfg.vocab_size, d], rng));
    p.insert(format!("{prefix}pos"), Tensor::randn(&[cfg.max_len, d], rng).scale(S::lit(0.1)));
    let std = S::lit(1.0 / (d as f64).sqrt());
    for l in 0..cfg.layers {
        let b = format!("{prefix}blk{l}");
        nn::init_layer_norm(&mut p, &format!("{b}.ln1"), d);
        for m in ["q", "k", "v"] {
            p.insert(format!("{b}.{m}"), Tensor::randn(&[d, d], rng).scale(std));
        }
        nn::init_linear(&mut p, &format!("{b}.o"), d, d, rng);
        nn::init_layer_norm(&mut p, &format!("{b}.ln2"), d);
        nn::init_feed_forward(&mut p, &format!("{b}.ffn"), d, d * cfg.ffn_mult, rng);
    }
    nn::init_layer_norm(&mut p, &format!("{prefix}ln"), d);
    p
}

/// Records the encoder over `tokens`. Returns `None` for empty text.
pub fn build_text_encoder<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &TextEncoderConfig,
    prefix: &str,
    tokens: &[usize],
) -> Result<Option<NodeId>> {
    if tokens.is_empty() {
        return Ok(None);
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::VocabularyOverflow { id, size: cfg.vocab_size });
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens exceed the encoder length {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    let d = cfg.width;
    let tok = g.param(&format!("{prefix}tok"));
    let pos = g.param(&format!("{prefix}pos"));
    let e = g.gather(tok, tokens);
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let p = g.gather(pos, &positions);
    let mut x = g.add(e, p);
    for l in 0..cfg.layers {
        let b = format!("{prefix}blk{l}");
        let h = nn::layer_norm(g, &format!("{b}.ln1"), x);
        let q = nn::project(g, &format!("{b}.q"), h);
        let k = nn::project(g, &format!("{b}.k"), h);
        let v = nn::project(g, &format!("{b}.v"), h);
        let (a, _) = nn::attention(g, q, k, v, d);
        let a = nn::linear(g, &format!("{b}.o"), a);
        x = g.add(x, a);
        let h = nn::layer_norm(g, &format!("{b}.ln2"), x);
        let f = nn::feed_forward(g, &format!("{b}.ffn"), h);
        x = g.add(x, f);
    }
    Ok(Some(nn::layer_norm(g, &format!("{prefix}ln"), x)))
}

/// Encodes one caption to an `n_y × width` tensor, or `None` for empty text.
pub fn encode_text<S: Scalar>(
    params: &dyn Bindings<S>,
    cfg: &TextEncoderConfig,
    prefix: &str,
    input: &ConditioningInput,
) -> Result<Option<Tensor<S>>> {
    let mut g = Graph::new();
    match build_text_encoder(&mut g, cfg, prefix, &input.tokens)? {
        Some(out) => Ok(Some(g.eval(out, params)?)),
        None => Ok(None),
    }
}
