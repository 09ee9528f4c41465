//! Input interventions: substitute a baseline on a chosen index set.
//!
//! `x'_i = b_i` for `i ∈ I`, `x'_i = x_i` otherwise.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::TappedModel;
use crate::tensor::Tensor;

/// Substitution value: one scalar for every feature, or one per feature.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Scalar(f64),
    PerFeature(Arc<Vec<f64>>),
}

impl Baseline {
    pub fn value(&self, i: usize) -> f64 {
        match self {
            Baseline::Scalar(v) => *v,
            Baseline::PerFeature(v) => v[i],
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            Baseline::Scalar(v) if !v.is_finite() => Err(Error::InvalidArgument(
                "baseline must be finite".into(),
            )),
            Baseline::PerFeature(v) if v.len() != d => Err(Error::Shape(format!(
                "per-feature baseline has {} entries for {d} features",
                v.len()
            ))),
            Baseline::PerFeature(v) if v.iter().any(|b| !b.is_finite()) => Err(
                Error::InvalidArgument("baseline must be finite".into()),
            ),
            _ => Ok(()),
        }
    }

    /// The baseline expanded to a full input-shaped tensor.
    pub fn as_tensor(&self, shape: &[usize]) -> Tensor {
        let d: usize = shape.iter().product();
        let data = (0..d).map(|i| self.value(i)).collect();
        Tensor::new(shape.to_vec(), data).expect("baseline shape")
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselinePolicy {
    Zero,
    /// Mean over all features and training samples.
    DatasetMean,
    /// Training mean of each feature.
    #[default]
    PerFeatureMean,
}

impl BaselinePolicy {
    /// Resolves the policy against the training split.
    pub fn resolve(self, train: &LabeledDataset) -> Baseline {
        match self {
            BaselinePolicy::Zero => Baseline::Scalar(0.0),
            BaselinePolicy::DatasetMean => Baseline::Scalar(train.global_mean()),
            BaselinePolicy::PerFeatureMean => Baseline::PerFeature(Arc::new(train.feature_means())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    SingleFeature,
    /// Square patches over the last two axes, covering every channel.
    PatchOcclusion { patch: usize, stride: usize },
    /// `count` random coalitions with sizes uniform in `[min_size, max_size]`.
    CoalitionSampling {
        count: usize,
        min_size: usize,
        max_size: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub strategy: Strategy,
    pub baseline: BaselinePolicy,
}

impl InterventionPlan {
    pub fn single_feature(baseline: BaselinePolicy) -> Self {
        Self {
            strategy: Strategy::SingleFeature,
            baseline,
        }
    }

    pub fn patches(patch: usize, baseline: BaselinePolicy) -> Self {
        Self {
            strategy: Strategy::PatchOcclusion {
                patch,
                stride: patch,
            },
            baseline,
        }
    }

    /// The index sets this plan produces for inputs of `shape`. Sets are
    /// unique and together cover every feature.
    pub fn index_sets(&self, shape: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
        let d: usize = shape.iter().product();
        if d == 0 {
            return Err(Error::InvalidArgument("empty input".into()));
        }
        match &self.strategy {
            Strategy::SingleFeature => Ok((0..d).map(|i| vec![i]).collect()),
            Strategy::PatchOcclusion { patch, stride } => patch_sets(shape, *patch, *stride),
            Strategy::CoalitionSampling {
                count,
                min_size,
                max_size,
            } => coalition_sets(d, *count, *min_size, *max_size, seed),
        }
    }
}

fn axis_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..=len - patch).step_by(stride).collect();
    if *starts.last().expect("non-empty") != len - patch {
        starts.push(len - patch);
    }
    starts
}

fn patch_sets(shape: &[usize], patch: usize, stride: usize) -> Result<Vec<Vec<usize>>> {
    if shape.len() < 2 {
        return Err(Error::InvalidArgument(
            "patch occlusion needs at least two spatial axes".into(),
        ));
    }
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch and stride must be positive".into()));
    }
    let w = shape[shape.len() - 1];
    let h = shape[shape.len() - 2];
    let channels: usize = shape[..shape.len() - 2].iter().product();
    if patch > h || patch > w {
        return Err(Error::InvalidArgument(format!(
            "patch {patch} larger than image {h}×{w}"
        )));
    }
    let mut sets = Vec::new();
    for &y0 in &axis_starts(h, patch, stride) {
        for &x0 in &axis_starts(w, patch, stride) {
            let mut set = Vec::with_capacity(channels * patch * patch);
            for c in 0..channels {
                for y in y0..y0 + patch {
                    for x in x0..x0 + patch {
                        set.push((c * h + y) * w + x);
                    }
                }
            }
            sets.push(set);
        }
    }
    Ok(sets)
}

fn coalition_sets(
    d: usize,
    count: usize,
    min_size: usize,
    max_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if min_size == 0 || min_size > max_size || max_size > d {
        return Err(Error::InvalidArgument(format!(
            "coalition sizes must satisfy 1 <= {min_size} <= {max_size} <= {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut sets = Vec::with_capacity(count);
    let mut attempts = 0;
    while sets.len() < count && attempts < count * 20 {
        attempts += 1;
        let size = rng.gen_range(min_size..=max_size);
        let mut set: Vec<usize> = rand::seq::index::sample(&mut rng, d, size).into_vec();
        set.sort_unstable();
        if seen.insert(set.clone()) {
            sets.push(set);
        }
    }
    let mut covered = vec![false; d];
    for s in &sets {
        for &i in s {
            covered[i] = true;
        }
    }
    for (i, c) in covered.iter().enumerate() {
        if !c && seen.insert(vec![i]) {
            sets.push(vec![i]);
        }
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    /// Sorted, deduplicated feature indices.
    pub indices: Vec<usize>,
    pub baseline: Baseline,
    pub sample: Tensor,
}

impl Intervention {
    pub fn is_null(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Substitutes `baseline` on `indices` (flat, row-major) of a single sample.
pub fn apply(x: &Tensor, indices: &[usize], baseline: &Baseline) -> Result<Intervention> {
    let d = x.len();
    baseline.validate(d)?;
    let mut idx = indices.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
        return Err(Error::IndexOutOfRange { index: bad, len: d });
    }
    let mut sample = x.clone();
    for &i in &idx {
        sample.data_mut()[i] = baseline.value(i);
    }
    Ok(Intervention {
        indices: idx,
        baseline: baseline.clone(),
        sample,
    })
}

/// All interventions of `plan` for sample `x`, deterministic under `seed`.
pub fn generate(
    x: &Tensor,
    plan: &InterventionPlan,
    baseline: &Baseline,
    seed: u64,
) -> Result<Vec<Intervention>> {
    plan.index_sets(x.shape(), seed)?
        .iter()
        .map(|set| apply(x, set, baseline))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationReport {
    /// `x'` differs from `x` only inside the index set.
    pub localized: bool,
    /// Re-applying the same substitution yields identical outputs and taps.
    pub pure: bool,
    /// The null intervention leaves every tap unchanged.
    pub null_identical: bool,
    /// Number of output entries that changed under the intervention.
    pub changed_outputs: usize,
}

impl IsolationReport {
    pub fn passed(&self) -> bool {
        self.localized && self.pure && self.null_identical
    }
}

pub fn check_isolation(
    model: &TappedModel,
    x: &Tensor,
    intervention: &Intervention,
) -> Result<IsolationReport> {
    let localized = x
        .data()
        .iter()
        .zip(intervention.sample.data())
        .enumerate()
        .all(|(i, (a, b))| {
            intervention.indices.binary_search(&i).is_ok() || a.to_bits() == b.to_bits()
        });

    let batch = |t: &Tensor| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        t.clone().reshape(shape)
    };
    let original = model.forward(&batch(x)?)?;
    let first = model.forward(&batch(&intervention.sample)?)?;
    let again = apply(x, &intervention.indices, &intervention.baseline)?;
    let second = model.forward(&batch(&again.sample)?)?;
    let pure = again.sample == intervention.sample
        && first.output == second.output
        && first.taps == second.taps;

    let null = apply(x, &[], &intervention.baseline)?;
    let null_pass = model.forward(&batch(&null.sample)?)?;
    let null_identical = null_pass.taps == original.taps && null_pass.output == original.output;

    let changed_outputs = original
        .output
        .data()
        .iter()
        .zip(first.output.data())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    Ok(IsolationReport {
        localized,
        pure,
        null_identical,
        changed_outputs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Tensor {
        Tensor::from_vec(xs.to_vec())
    }

    #[test]
    fn null_intervention_is_identity() {
        let iv = apply(&v(&[1., 2., 3.]), &[], &Baseline::Scalar(0.0)).unwrap();
        assert!(iv.is_null());
        assert_eq!(iv.sample.data(), &[1., 2., 3.]);
    }

    #[test]
    fn direct_substitution() {
        let iv = apply(&v(&[1., 2., 3.]), &[2, 0], &Baseline::Scalar(0.0)).unwrap();
        assert_eq!(iv.sample.data(), &[0., 2., 0.]);
        assert_eq!(iv.indices, vec![0, 2]);
    }

    #[test]
    fn out_of_range_index() {
        assert!(matches!(
            apply(&v(&[1., 2.]), &[2], &Baseline::Scalar(0.0)),
            Err(Error::IndexOutOfRange { index: 2, len: 2 })
        ));
    }

    #[test]
    fn non_finite_baseline_rejected() {
        assert!(apply(&v(&[1.]), &[0], &Baseline::Scalar(f64::NAN)).is_err());
    }

    #[test]
    fn patch_at_origin_changes_four_pixels() {
        let x = Tensor::new(vec![1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let mean = x.sum() / 16.0;
        let plan = InterventionPlan::patches(2, BaselinePolicy::Zero);
        let sets = plan.index_sets(x.shape(), 0).unwrap();
        let iv = apply(&x, &sets[0], &Baseline::Scalar(mean)).unwrap();
        let diff = x
            .data()
            .iter()
            .zip(iv.sample.data())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(diff, 4);
        assert_eq!(iv.indices, vec![0, 1, 4, 5]);
    }

    #[test]
    fn single_feature_yields_d_interventions() {
        let plan = InterventionPlan::single_feature(BaselinePolicy::Zero);
        let ivs = generate(&v(&[1., 2., 3.]), &plan, &Baseline::Scalar(0.0), 0).unwrap();
        assert_eq!(ivs.len(), 3);
        assert!(ivs.iter().all(|iv| iv.indices.len() == 1));
    }

    #[test]
    fn mnist_grid_has_49_patches() {
        let plan = InterventionPlan::patches(4, BaselinePolicy::Zero);
        assert_eq!(plan.index_sets(&[1, 28, 28], 0).unwrap().len(), 49);
    }

    #[test]
    fn patch_larger_than_image() {
        let plan = InterventionPlan::patches(5, BaselinePolicy::Zero);
        assert!(plan.index_sets(&[1, 4, 4], 0).is_err());
    }

    #[test]
    fn coalitions_are_seeded_unique_and_covering() {
        let plan = InterventionPlan {
            strategy: Strategy::CoalitionSampling {
                count: 100,
                min_size: 1,
                max_size: 4,
            },
            baseline: BaselinePolicy::Zero,
        };
        let a = plan.index_sets(&[30], 5).unwrap();
        let b = plan.index_sets(&[30], 5).unwrap();
        assert_eq!(a, b);
        let unique: BTreeSet<_> = a.iter().cloned().collect();
        assert_eq!(unique.len(), a.len());
        let covered: BTreeSet<usize> = a.iter().flatten().copied().collect();
        assert_eq!(covered.len(), 30);
    }
}
