//! Small layer helpers shared by the text encoder and the denoiser.
//!
//! Parameters live in a [`ParamStore`] under `prefix + name`; the builder
//! functions here only record graph nodes that refer to those names.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn init_linear<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) {
    let std = S::lit(1.0 / (fan_in as f64).sqrt());
    store.insert(format!("{name}.w"), Tensor::randn(&[fan_in, fan_out], rng).scale(std));
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn init_layer_norm<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) {
    store.insert(format!("{name}.g"), Tensor::ones(&[width]));
    store.insert(format!("{name}.b"), Tensor::zeros(&[width]));
}

pub(crate) fn linear<S: Scalar>(g: &mut Graph<S>, name: &str, x: NodeId) -> NodeId {
    let w = g.param(&format!("{name}.w"));
    let b = g.param(&format!("{name}.b"));
    g.affine(x, w, b)
}

/// Bias-free projection `x W`.
pub(crate) fn project<S: Scalar>(g: &mut Graph<S>, name: &str, x: NodeId) -> NodeId {
    let w = g.param(name);
    g.matmul(x, w)
}

pub(crate) fn layer_norm<S: Scalar>(g: &mut Graph<S>, name: &str, x: NodeId) -> NodeId {
    let n = g.layer_norm(x);
    let gain = g.param(&format!("{name}.g"));
    let bias = g.param(&format!("{name}.b"));
    let scaled = g.mul(n, gain);
    g.add(scaled, bias)
}

pub(crate) fn feed_forward<S: Scalar>(g: &mut Graph<S>, name: &str, x: NodeId) -> NodeId {
    let h = linear(g, &format!("{name}.up"), x);
    let h = g.silu(h);
    linear(g, &format!("{name}.down"), h)
}

pub(crate) fn init_feed_forward<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    name: &str,
    width: usize,
    hidden: usize,
    rng: &mut R,
) {
    init_linear(store, &format!("{name}.up"), width, hidden, rng);
    init_linear(store, &format!("{name}.down"), hidden, width, rng);
}

/// Single-head scaled dot-product attention `softmax(Q Kᵀ / √d) V`.
/// Returns the output and the probability node.
pub(crate) fn attention<S: Scalar>(
    g: &mut Graph<S>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    width: usize,
) -> (NodeId, NodeId) {
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let scaled = g.scale(logits, S::lit(1.0 / (width as f64).sqrt()));
    let probs = g.softmax(scaled);
    (g.matmul(probs, v), probs)
}

/// Sinusoidal embedding of a diffusion step, half sines then half cosines.
pub fn timestep_embedding<S: Scalar>(t: usize, width: usize) -> Tensor<S> {
    let half = width / 2;
    let mut data = vec![S::zero(); width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        data[i] = S::lit(arg.sin());
        data[half + i] = S::lit(arg.cos());
    }
    Tensor::new(vec![width], data).expect("width > 0")
}
