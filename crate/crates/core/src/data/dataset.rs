use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-feature affine map: `normalized = (raw - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

impl Normalization {
    pub fn identity(width: usize) -> Self {
        Self {
            scale: vec![1.0; width],
            offset: vec![0.0; width],
        }
    }

    pub fn uniform(width: usize, scale: f64, offset: f64) -> Self {
        Self {
            scale: vec![scale; width],
            offset: vec![offset; width],
        }
    }

    pub fn is_invertible(&self) -> bool {
        self.scale.len() == self.offset.len()
            && self.scale.iter().all(|s| *s != 0.0 && s.is_finite())
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.scale.iter().zip(&self.offset))
            .map(|(v, (s, o))| (v - o) / s)
            .collect()
    }

    pub fn denormalize(&self, norm: &[f64]) -> Vec<f64> {
        norm.iter()
            .zip(self.scale.iter().zip(&self.offset))
            .map(|(v, (s, o))| v * s + o)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `N × d` or `N × C × H × W`, normalized.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub feature_names: Option<Vec<String>>,
    pub normalization: Normalization,
}

impl LabeledDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        feature_names: Option<Vec<String>>,
        normalization: Normalization,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if !normalization.is_invertible() || normalization.scale.len() != features.row_len() {
            return Err(Error::InvalidArgument(
                "normalization record must be invertible and match feature width".into(),
            ));
        }
        if let Some(names) = &feature_names {
            if names.len() != features.row_len() {
                return Err(Error::InvalidArgument(format!(
                    "{} feature names for width {}",
                    names.len(),
                    features.row_len()
                )));
            }
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            feature_names,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape (without the batch dimension).
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.row_len()
    }

    pub fn sample(&self, i: usize) -> Tensor {
        self.features.sample(i)
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            feature_names: self.feature_names.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Seeded shuffle then split; the first part holds `train_fraction`.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let cut = cut.min(self.len());
        let (a, b) = idx.split_at(cut);
        (self.subset(a), self.subset(b))
    }

    /// Mean of every feature over all samples.
    pub fn feature_means(&self) -> Vec<f64> {
        let w = self.feature_dim();
        let mut mean = vec![0.0; w];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.features.row(i)) {
                *m += v;
            }
        }
        let n = self.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Mean over every feature of every sample.
    pub fn global_mean(&self) -> f64 {
        self.features.sum() / self.features.len().max(1) as f64
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LabeledDataset {
        LabeledDataset::new(
            Tensor::new(vec![4, 2], vec![0., 1., 2., 3., 4., 5., 6., 7.]).unwrap(),
            vec![0, 1, 0, 1],
            2,
            None,
            Normalization::identity(2),
        )
        .unwrap()
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let r = LabeledDataset::new(
            Tensor::zeros(&[2, 1]),
            vec![0, 3],
            2,
            None,
            Normalization::identity(1),
        );
        assert!(r.is_err());
    }

    #[test]
    fn rejects_singular_normalization() {
        let r = LabeledDataset::new(
            Tensor::zeros(&[1, 2]),
            vec![0],
            1,
            None,
            Normalization {
                scale: vec![1.0, 0.0],
                offset: vec![0.0, 0.0],
            },
        );
        assert!(r.is_err());
    }

    #[test]
    fn split_is_seeded_partition() {
        let d = toy();
        let (a, b) = d.split(0.5, 9);
        let (a2, _) = d.split(0.5, 9);
        assert_eq!(a, a2);
        assert_eq!(a.len() + b.len(), 4);
        assert_eq!(d.feature_means(), vec![3.0, 4.0]);
    }

    #[test]
    fn normalization_round_trip() {
        let n = Normalization {
            scale: vec![20.0, 0.5, 3.0],
            offset: vec![10.0, -1.0, 0.25],
        };
        let raw = vec![17.3, 0.1, -4.0];
        let back = n.denormalize(&n.normalize(&raw));
        for (a, b) in raw.iter().zip(back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
