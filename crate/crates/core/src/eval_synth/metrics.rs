use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::shapes::{Color, SceneSpec, BACKGROUND};

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim`, symmetric.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance, accumulated in row order and
    /// symmetrized.
    pub fn estimate(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::Data("covariance needs at least two samples".into()));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch(d, rows.iter().map(Vec::len).find(|&l| l != d).unwrap_or(d)));
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for i in 0..d {
                let di = r[i] - mean[i];
                for j in 0..d {
                    cov[i * d + j] += di * (r[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
        for i in 0..d {
            for j in i + 1..d {
                let s = 0.5 * (cov[i * d + j] + cov[j * d + i]);
                cov[i * d + j] = s;
                cov[j * d + i] = s;
            }
        }
        Ok(Self { mean, cov })
    }
}

/// Eigenvalues and column eigenvectors of a symmetric matrix by cyclic
/// Jacobi rotations.
pub fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j].powi(2)).sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

/// Square root of a symmetric positive semidefinite matrix. Negative
/// eigenvalues are clamped to zero, with a warning when one is below
/// `−1e-6 · trace`.
pub fn sqrt_psd(a: &[f64], n: usize) -> Vec<f64> {
    let (vals, vecs) = symmetric_eigen(a, n);
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum();
    let most_negative = vals.iter().cloned().fold(0.0f64, f64::min);
    if most_negative < -1e-6 * trace.abs() {
        log::warn!("clamping eigenvalue {most_negative:e} of a covariance root to zero");
    }
    let roots: Vec<f64> = vals.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = (0..n).map(|k| vecs[i * n + k] * roots[k] * vecs[j * n + k]).sum();
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `|μ_a − μ_b|² + tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`.
///
/// The cross term is evaluated as `tr((√Σ_a Σ_b √Σ_a)^{1/2})`, which has the
/// same eigenvalues and keeps every root symmetric.
pub fn frechet_gaussian_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let n = a.dim();
    if b.dim() != n {
        return Err(Error::DimensionMismatch(n, b.dim()));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let trace = |m: &[f64]| (0..n).map(|i| m[i * n + i]).sum::<f64>();
    let ra = sqrt_psd(&a.cov, n);
    let mut inner = matmul(&matmul(&ra, &b.cov, n), &ra, n);
    for i in 0..n {
        for j in i + 1..n {
            let s = 0.5 * (inner[i * n + j] + inner[j * n + i]);
            inner[i * n + j] = s;
            inner[j * n + i] = s;
        }
    }
    let (vals, _) = symmetric_eigen(&inner, n);
    let cross: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok((mean_term + trace(&a.cov) + trace(&b.cov) - 2.0 * cross).max(0.0))
}

/// Fixed Gaussian random projection of flattened images.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    pub input: usize,
    pub output: usize,
    matrix: Tensor<f64>,
}

impl RandomProjection {
    pub fn new(input: usize, output: usize, seed: u64) -> Self {
        let mut rng = stream(&[seed, purpose::PROJECTION, input as u64, output as u64]);
        let matrix = Tensor::randn(&[input, output], &mut rng).scale(1.0 / (input as f64).sqrt());
        Self { input, output, matrix }
    }

    pub fn features<S: Scalar>(&self, image: &Tensor<S>) -> Result<Vec<f64>> {
        if image.len() != self.input {
            return Err(Error::DimensionMismatch(self.input, image.len()));
        }
        let x: Vec<f64> = image.data().iter().map(|v| v.as_f64()).collect();
        let m = self.matrix.data();
        let mut out = vec![0.0; self.output];
        for (i, &xi) in x.iter().enumerate() {
            let row = &m[i * self.output..(i + 1) * self.output];
            for (o, &r) in out.iter_mut().zip(row) {
                *o += xi * r;
            }
        }
        Ok(out)
    }

    pub fn stats<S: Scalar>(&self, images: &[Tensor<S>]) -> Result<GaussianStats> {
        let rows = images.iter().map(|im| self.features(im)).collect::<Result<Vec<_>>>()?;
        GaussianStats::estimate(&rows)
    }
}

/// Fréchet distance between projected statistics of two image sets.
pub fn toy_fid<S: Scalar>(generated: &[Tensor<S>], reference: &[Tensor<S>], proj: &RandomProjection) -> Result<f64> {
    frechet_gaussian_distance(&proj.stats(generated)?, &proj.stats(reference)?)
}

/// Palette entry closest to a pixel: `None` for background.
pub fn nearest_palette(px: &[f64]) -> Option<Color> {
    let d = |c: [f64; 3]| (0..3).map(|i| (px[i] - c[i]).powi(2)).sum::<f64>();
    let mut best = (d(BACKGROUND), None);
    for c in Color::ALL {
        let dc = d(c.rgb());
        if dc < best.0 {
            best = (dc, Some(c));
        }
    }
    best.1
}

/// Whether every requested object of `spec` shows up in its cell: the
/// requested color must be the strictly most frequent non-background color
/// there, and the covered fraction must lie within `tolerance` of the shape's
/// own fraction.
pub fn binds<S: Scalar>(image: &Tensor<S>, spec: &SceneSpec, tolerance: f64) -> Result<bool> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::ShapeMismatch(format!("expected h×w×3, got {:?}", image.shape())));
    };
    let (ch, cw) = (h / 2, w / 2);
    for o in &spec.objects {
        let (oy, ox) = ((o.cell / 2) * ch, (o.cell % 2) * cw);
        let mut counts = [0usize; 4];
        for y in oy..oy + ch {
            for x in ox..ox + cw {
                let k = 3 * (y * w + x);
                let px: Vec<f64> = image.data()[k..k + 3].iter().map(|v| v.as_f64()).collect();
                if let Some(c) = nearest_palette(&px) {
                    counts[c as usize] += 1;
                }
            }
        }
        let filled: usize = counts.iter().sum();
        let own = counts[o.color as usize];
        let dominant = own > 0 && counts.iter().enumerate().all(|(k, &c)| k == o.color as usize || c < own);
        let frac = filled as f64 / (ch * cw) as f64;
        if !dominant || (frac - o.shape.fill_fraction(ch, cw)).abs() > tolerance {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Mean of [`binds`] over aligned images and specs.
pub fn binding_accuracy<S: Scalar>(images: &[Tensor<S>], specs: &[SceneSpec], tolerance: f64) -> Result<f64> {
    if images.len() != specs.len() || images.is_empty() {
        return Err(Error::AlignmentMismatch { images: images.len(), specs: specs.len() });
    }
    let mut hits = 0usize;
    for (im, sp) in images.iter().zip(specs) {
        hits += binds(im, sp, tolerance)? as usize;
    }
    Ok(hits as f64 / images.len() as f64)
}
