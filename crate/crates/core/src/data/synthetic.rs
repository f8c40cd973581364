use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::dataset::{Dataset, SampleId};
use crate::nn::DenseMatrix;
use crate::{Error, Result};

/// Smallest distance between two class means, in units of the noise
/// standard deviation.
pub const CLASS_SEPARATION: f64 = 4.0;

/// Per-column decay of class-mean offsets. Earlier columns carry more signal,
/// so feature importances have a clear order.
pub const SIGNAL_DECAY: f64 = 0.75;

/// Gaussian class clusters with unit isotropic noise. Class means are drawn
/// per column with scale `SIGNAL_DECAY^j` and rescaled so every pair of means
/// is at least `CLASS_SEPARATION` apart. Classes are balanced, the result is
/// z-scored, and sample ids are `0..n`.
pub fn generate_synthetic(n: usize, d: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 || classes == 0 {
        return Err(Error::Validation(format!(
            "synthetic data needs n, d, classes >= 1 (got {n}, {d}, {classes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..d)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    SIGNAL_DECAY.powi(j as i32) * z
                })
                .collect()
        })
        .collect();
    let mut min_dist = f64::INFINITY;
    for a in 0..classes {
        for b in a + 1..classes {
            let dist = means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            min_dist = min_dist.min(dist);
        }
    }
    if min_dist.is_finite() && min_dist < CLASS_SEPARATION {
        let factor = CLASS_SEPARATION / min_dist.max(1e-12);
        means.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        for mean in &means[y] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(mean + noise);
        }
    }
    let features = DenseMatrix::new(n, d, data)?;
    let mut ds = Dataset::with_classes(
        (0..n as u64).map(SampleId).collect(),
        features,
        Some(labels),
        classes,
        (0..d).map(|j| format!("x{j}")).collect(),
    )?;
    ds.standardize();
    Ok(ds)
}
