use rand::Rng;
use rand_distr::StandardNormal;

use crate::conditioning::AnnotatedCaption;
use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::TrainItem;

/// A two-component Gaussian mixture in the plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm2 {
    pub weights: [f64; 2],
    pub means: [[f64; 2]; 2],
    /// Row-major 2×2 covariances.
    pub covs: [[f64; 4]; 2],
}

impl Default for Gmm2 {
    fn default() -> Self {
        Self {
            weights: [0.5, 0.5],
            means: [[-1.0, -0.5], [1.0, 0.5]],
            covs: [[0.10, 0.03, 0.03, 0.05], [0.06, -0.02, -0.02, 0.08]],
        }
    }
}

fn cholesky(c: &[f64; 4]) -> [f64; 3] {
    let l11 = c[0].sqrt();
    let l21 = c[2] / l11;
    let l22 = (c[3] - l21 * l21).sqrt();
    [l11, l21, l22]
}

impl Gmm2 {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let k = usize::from(rng.gen::<f64>() >= self.weights[0]);
        let [l11, l21, l22] = cholesky(&self.covs[k]);
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        [self.means[k][0] + l11 * z0, self.means[k][1] + l21 * z0 + l22 * z1]
    }

    /// `count` unconditional training items of shape `1 × 1 × 2`.
    pub fn train_items<S: Scalar>(&self, count: usize, seed: u64) -> Vec<TrainItem<S>> {
        (0..count)
            .map(|i| {
                let p = self.sample(&mut stream(&[seed, purpose::DATA, i as u64]));
                TrainItem {
                    image: Tensor::new(vec![1, 1, 2], vec![S::lit(p[0]), S::lit(p[1])]).expect("2 values"),
                    caption: AnnotatedCaption {
                        words: vec![],
                        tags: vec![],
                        synthetic_words: vec![],
                        synthetic_tags: vec![],
                        labels: vec![],
                        region_masks: vec![],
                    },
                }
            })
            .collect()
    }
}

/// Mean and covariance of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFit {
    pub count: usize,
    pub mean: [f64; 2],
    pub cov: [f64; 4],
}

/// Assigns every point to the nearest of `means` and fits each cluster.
pub fn fit_by_nearest_mean(points: &[[f64; 2]], means: &[[f64; 2]]) -> Result<Vec<ClusterFit>> {
    let mut groups: Vec<Vec<[f64; 2]>> = vec![Vec::new(); means.len()];
    for p in points {
        let d = |m: &[f64; 2]| (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2);
        let k = (0..means.len()).min_by(|&a, &b| d(&means[a]).total_cmp(&d(&means[b]))).expect("at least one mean");
        groups[k].push(*p);
    }
    groups
        .into_iter()
        .map(|g| {
            if g.len() < 2 {
                return Err(Error::Data("a cluster received fewer than two points".into()));
            }
            let n = g.len() as f64;
            let mean = [g.iter().map(|p| p[0]).sum::<f64>() / n, g.iter().map(|p| p[1]).sum::<f64>() / n];
            let mut cov = [0.0; 4];
            for p in &g {
                let d = [p[0] - mean[0], p[1] - mean[1]];
                cov[0] += d[0] * d[0];
                cov[1] += d[0] * d[1];
                cov[3] += d[1] * d[1];
            }
            cov.iter_mut().for_each(|c| *c /= n - 1.0);
            cov[2] = cov[1];
            Ok(ClusterFit { count: g.len(), mean, cov })
        })
        .collect()
}
