//! Reliability of explanation masks: perturb a proportion of each mask's
//! significant region and count prediction flips.

use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::Baseline;
use crate::nn::TappedModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    #[default]
    BaselineSubstitute,
    GaussianNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Fraction of the mask's selected features to perturb, in `(0, 1]`.
    pub proportion: f64,
    pub mode: PerturbMode,
    /// Standard deviation for [`PerturbMode::GaussianNoise`].
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            proportion: 0.5,
            mode: PerturbMode::BaselineSubstitute,
            noise_scale: 0.5,
            seed: 0,
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return Err(Error::Config {
                field: "proportion".into(),
                message: format!("must lie in (0, 1], got {}", self.proportion),
            });
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config {
                field: "noise_scale".into(),
                message: format!("must be non-negative, got {}", self.noise_scale),
            });
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn selected(mask: &Tensor) -> Vec<usize> {
    mask.data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect()
}

/// Perturbs `⌈p·|M|⌉` features drawn uniformly from the mask's selected
/// entries; every other feature is left untouched.
pub fn perturb(
    x: &Tensor,
    mask: &Tensor,
    baseline: &Baseline,
    spec: &PerturbationSpec,
    stream: u64,
) -> Result<Tensor> {
    spec.validate()?;
    if mask.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "mask {:?} vs sample {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    let region = selected(mask);
    if region.is_empty() {
        return Err(Error::EmptyMask);
    }
    let count = ((spec.proportion * region.len() as f64).ceil() as usize).min(region.len());
    let mut rng = stream_rng(spec.seed, stream);
    let mut picks: Vec<usize> = index::sample(&mut rng, region.len(), count)
        .into_iter()
        .map(|k| region[k])
        .collect();
    picks.sort_unstable();
    let mut out = x.clone();
    match spec.mode {
        PerturbMode::BaselineSubstitute => {
            for i in picks {
                out.data_mut()[i] = baseline.value(i);
            }
        }
        PerturbMode::GaussianNoise => {
            let normal = Normal::new(0.0, spec.noise_scale.max(f64::MIN_POSITIVE))
                .expect("validated scale");
            for i in picks {
                out.data_mut()[i] += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityResult {
    /// `S` per trial.
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across trials; absent for a single trial.
    pub std_dev: Option<f64>,
    pub trials: usize,
    /// `flips[trial][sample]`.
    pub flips: Vec<Vec<bool>>,
}

fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() >= 2).then(|| {
        (xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    (mean, std)
}

/// Flip fraction `S = |X|⁻¹ Σ 1{f(x) ≠ f(x')}` for each trial. A sample
/// whose mask is empty is left unperturbed and never flips.
pub fn reliability(
    model: &TappedModel,
    samples: &Tensor,
    masks: &[Tensor],
    baseline: &Baseline,
    spec: &PerturbationSpec,
    trials: usize,
) -> Result<ReliabilityResult> {
    reliability_with(model, samples, baseline, spec, trials, |_, i| Ok(masks[i].clone()), masks.len())
}

fn reliability_with(
    model: &TappedModel,
    samples: &Tensor,
    baseline: &Baseline,
    spec: &PerturbationSpec,
    trials: usize,
    mask_for: impl Fn(usize, usize) -> Result<Tensor>,
    mask_count: usize,
) -> Result<ReliabilityResult> {
    spec.validate()?;
    let n = samples.rows();
    if n == 0 {
        return Err(Error::Precondition("reliability over an empty dataset".into()));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    if mask_count != n {
        return Err(Error::Shape(format!("{mask_count} masks for {n} samples")));
    }
    let original = model.classify(samples)?;
    let mut scores = Vec::with_capacity(trials);
    let mut flips = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut perturbed = Vec::with_capacity(n);
        for i in 0..n {
            let x = samples.sample(i);
            let mask = mask_for(t, i)?;
            let stream = (t * n + i) as u64;
            perturbed.push(match perturb(&x, &mask, baseline, spec, stream) {
                Err(Error::EmptyMask) => x,
                other => other?,
            });
        }
        let preds = model.classify(&Tensor::stack(&perturbed)?)?;
        let flags: Vec<bool> = preds.iter().zip(&original).map(|(a, b)| a != b).collect();
        scores.push(flags.iter().filter(|&&f| f).count() as f64 / n as f64);
        flips.push(flags);
    }
    let (mean, std_dev) = mean_std(&scores);
    Ok(ReliabilityResult {
        scores,
        mean,
        std_dev,
        trials,
        flips,
    })
}

/// Binary mask of the `k` largest `|attribution|` entries (ties by index).
pub fn top_k_mask(attribution: &Tensor, k: usize) -> Tensor {
    let mut idx: Vec<usize> = (0..attribution.len()).collect();
    let a = attribution.data();
    idx.sort_by(|&i, &j| a[j].abs().total_cmp(&a[i].abs()).then(i.cmp(&j)));
    let mut m = Tensor::zeros(attribution.shape());
    for &i in idx.iter().take(k) {
        m.data_mut()[i] = 1.0;
    }
    m
}

/// A mask with `count` uniformly chosen features, deterministic per stream.
pub fn random_mask(shape: &[usize], count: usize, seed: u64, stream: u64) -> Tensor {
    let d: usize = shape.iter().product();
    let mut rng = stream_rng(seed, stream);
    let mut m = Tensor::zeros(shape);
    for i in index::sample(&mut rng, d, count.min(d)) {
        m.data_mut()[i] = 1.0;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: String,
    pub mean: f64,
    pub std_dev: Option<f64>,
    pub trials: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub proportion: f64,
    pub mode: PerturbMode,
    pub methods: Vec<MethodScore>,
}

impl Comparison {
    pub fn get(&self, method: &str) -> Option<&MethodScore> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,mean,std_dev,trials\n");
        for m in &self.methods {
            let std = m.std_dev.map_or(String::new(), |v| format!("{v:.6}"));
            let _ = writeln!(s, "{},{:.6},{std},{}", m.method, m.mean, m.trials);
        }
        s
    }
}

/// Name of the built-in baseline method in [`compare`].
pub const RANDOM_METHOD: &str = "random";

/// Scores every named mask set, plus a `random` method whose masks match the
/// first set's per-sample cardinality and are redrawn every trial.
pub fn compare(
    model: &TappedModel,
    samples: &Tensor,
    sets: &[(String, Vec<Tensor>)],
    baseline: &Baseline,
    spec: &PerturbationSpec,
    trials: usize,
) -> Result<Comparison> {
    if samples.rows() == 0 {
        return Err(Error::Precondition("comparison over an empty dataset".into()));
    }
    let Some((_, reference)) = sets.first() else {
        return Err(Error::Precondition("at least one mask set required".into()));
    };
    let mut methods = Vec::new();
    for (name, masks) in sets {
        let r = reliability(model, samples, masks, baseline, spec, trials)?;
        methods.push(MethodScore {
            method: name.clone(),
            mean: r.mean,
            std_dev: r.std_dev,
            trials,
            scores: r.scores,
        });
    }
    if !sets.iter().any(|(n, _)| n == RANDOM_METHOD) {
        let n = samples.rows();
        let sizes: Vec<usize> = reference.iter().map(|m| selected(m).len()).collect();
        let shape = samples.sample(0).shape().to_vec();
        // a separate key keeps random masks independent of the perturbation draws
        let mask_seed = spec.seed ^ 0x9e37_79b9_7f4a_7c15;
        let r = reliability_with(
            model,
            samples,
            baseline,
            spec,
            trials,
            |t, i| Ok(random_mask(&shape, sizes[i], mask_seed, (t * n + i) as u64)),
            reference.len(),
        )?;
        methods.push(MethodScore {
            method: RANDOM_METHOD.into(),
            mean: r.mean,
            std_dev: r.std_dev,
            trials,
            scores: r.scores,
        });
    }
    Ok(Comparison {
        proportion: spec.proportion,
        mode: spec.mode,
        methods,
    })
}
