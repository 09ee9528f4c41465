//! Seeded synthetic datasets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{LabeledDataset, Normalization};
use crate::error::Result;
use crate::tensor::Tensor;

/// Isotropic Gaussian blobs, `per_class` samples around each center, min-max
/// normalized to `[0, 1]` per feature. Samples are interleaved by class.
pub fn gaussian_blobs(
    centers: &[Vec<f64>],
    std_dev: f64,
    per_class: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let dim = centers.first().map_or(0, Vec::len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std_dev).expect("finite std");
    let mut raw = Vec::with_capacity(per_class * centers.len() * dim);
    let mut labels = Vec::with_capacity(per_class * centers.len());
    for _ in 0..per_class {
        for (c, center) in centers.iter().enumerate() {
            for &m in center {
                raw.push(m + normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    let n = labels.len();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for row in raw.chunks(dim) {
        for j in 0..dim {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    let scale: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| if h > l { h - l } else { 1.0 })
        .collect();
    let norm = Normalization { scale, offset: lo };
    let data: Vec<f64> = raw.chunks(dim).flat_map(|r| norm.normalize(r)).collect();
    let names = (0..dim).map(|j| format!("x{j}")).collect();
    LabeledDataset::new(
        Tensor::new(vec![n, dim], data)?,
        labels,
        centers.len(),
        Some(names),
        norm,
    )
}

/// The two-class, two-feature task used throughout the tests and the demo
/// configuration.
pub fn two_blobs(per_class: usize, seed: u64) -> LabeledDataset {
    gaussian_blobs(&[vec![-2.0, -2.0], vec![2.0, 2.0]], 1.0, per_class, seed)
        .expect("valid blob parameters")
}
