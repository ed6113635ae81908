use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Graph, NodeId, ParamStore};

/// Settings for comparing reverse-mode gradients with five-point central
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Stencil spacing `h`; the stencil samples `x ± h` and `x ± 2h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator. Gradients smaller than
    /// this are compared in absolute terms, where the stencil carries
    /// round-off noise of order `eps * |f| / step`.
    pub floor: f64,
    /// Check at most this many evenly strided coordinates per leaf.
    pub max_coords_per_leaf: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, tolerance: 1e-5, floor: 1e-6, max_coords_per_leaf: None }
    }
}

#[derive(Debug, Clone)]
pub struct LeafReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn worst(&self) -> Option<&LeafReport> {
        self.leaves.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares `graph.backward(root)` against central finite differences of the
/// root value for every trainable leaf bound in `params`.
pub fn finite_difference_check<S: Scalar>(
    graph: &mut Graph<S>,
    root: NodeId,
    params: &ParamStore<S>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(cfg.step > 0.0 && cfg.step.is_finite()) {
        return Err(Error::InvalidStep(cfg.step));
    }
    graph.forward(params)?;
    let analytic = graph.backward(root)?;
    let h = S::lit(cfg.step);

    let mut work = params.clone();
    let mut leaves = Vec::new();
    for name in graph.param_names() {
        let len = match work.get(&name) {
            Some(t) => t.len(),
            None => return Err(Error::UnboundLeaf(name)),
        };
        let stride = match cfg.max_coords_per_leaf {
            Some(k) if k > 0 && k < len => len.div_ceil(k),
            _ => 1,
        };
        let grad = analytic.get(&name);
        let mut report = LeafReport {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            coords_checked: 0,
        };
        for i in (0..len).step_by(stride) {
            let orig = work.get(&name).expect("bound").data()[i];
            let mut at = |k: f64| -> Result<f64> {
                work.get_mut(&name).expect("bound").data_mut()[i] = orig + S::lit(k) * h;
                Ok(graph.eval(root, &work)?.item().as_f64())
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            work.get_mut(&name).expect("bound").data_mut()[i] = orig;

            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * cfg.step);
            let a = grad.map_or(0.0, |g| g.data()[i].as_f64());
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            let err = (a - numeric).abs() / denom;
            if err > report.max_rel_error || report.coords_checked == 0 {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst_index = i;
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
            report.coords_checked += 1;
        }
        leaves.push(report);
    }
    // leave the graph holding activations for the unperturbed parameters
    graph.forward(params)?;
    let max_rel_error = leaves.iter().fold(0.0f64, |m, l| m.max(l.max_rel_error));
    Ok(GradCheckReport { leaves, max_rel_error, tolerance: cfg.tolerance })
}
