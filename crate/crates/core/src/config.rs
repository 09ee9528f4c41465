//! Run configuration: a sectioned TOML document with every tunable explicit.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::counterfactual::{CfConfig, Metric};
use crate::data::sha256_hex;
use crate::error::{Error, Result};
use crate::evaluation::{PerturbMode, PerturbationSpec};
use crate::explain::ExplainConfig;
use crate::intervention::{BaselinePolicy, InterventionPlan, Strategy};
use crate::nn::TrainConfig;
use crate::similarity::Kernel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Blobs,
    Idx,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    /// Samples per class for `blobs`.
    pub per_class: usize,
    pub blob_seed: u64,
    /// IDX image and label files for `idx`.
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// CSV file for `csv`.
    pub path: Option<PathBuf>,
    pub label_column: String,
    pub categorical: Vec<String>,
    pub train_fraction: f64,
    pub split_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Pre-trained model to use instead of training.
    pub path: Option<PathBuf>,
    pub architecture: Architecture,
    /// Hidden dense widths.
    pub hidden: Vec<usize>,
    /// Output channels of the single conv block (`conv` only).
    pub conv_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanKind {
    SingleFeature,
    Patch,
    Coalition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainSection {
    /// Number of held-out samples explained.
    pub samples: usize,
    pub plan: PlanKind,
    pub patch: usize,
    pub stride: usize,
    pub coalitions: usize,
    pub coalition_min: usize,
    pub coalition_max: usize,
    pub baseline: BaselinePolicy,
    /// Maximum dissimilarity for grouping two layers.
    pub epsilon: f64,
    pub kernel: KernelKind,
    pub top_features: usize,
    pub mask: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualSection {
    pub lambda: f64,
    pub metric: Metric,
    pub sigma: f64,
    pub rho: f64,
    pub latent: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Held-out samples given counterfactuals.
    pub samples: usize,
    /// Diverse counterfactuals per sample.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReliabilitySection {
    pub proportion: f64,
    pub mode: PerturbMode,
    pub noise_scale: f64,
    pub trials: usize,
    /// Fraction of features forming the significant region of an attribution.
    pub significant_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressSection {
    pub target_coverage: f64,
    pub epochs: usize,
    pub benchmark_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core, 1 is fully sequential.
    pub workers: usize,
    pub output: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelSection,
    pub explain: ExplainSection,
    pub counterfactual: CounterfactualSection,
    pub reliability: ReliabilitySection,
    pub compress: CompressSection,
}

/// The `init` template; parsing it yields [`RunConfig::default`].
pub const TEMPLATE: &str = r#"# Run configuration. Every constant the analysis depends on is listed here.
seed = 0
# worker threads: 0 = all cores, 1 = sequential
workers = 0
# output directory; --out and TRACER_OUT take precedence
# output = "tracer-out"

[data]
# blobs | idx | csv
kind = "blobs"
per_class = 200
blob_seed = 1
# images = "data/digits8x8/images.idx3-ubyte"
# labels = "data/digits8x8/labels.idx1-ubyte"
# path = "table.csv"
label_column = "label"
categorical = []
train_fraction = 0.8
split_seed = 7

[model]
# path = "pretrained.tracer"
# mlp | conv
architecture = "mlp"
hidden = [16, 16, 16]
conv_channels = 8
epochs = 30
batch_size = 16
learning_rate = 0.001

[explain]
samples = 20
# single-feature | patch | coalition
plan = "single-feature"
patch = 2
stride = 2
coalitions = 64
coalition_min = 1
coalition_max = 4
# zero | dataset-mean | per-feature-mean
baseline = "per-feature-mean"
# two layers group when CKA >= 1 - epsilon
epsilon = 0.05
# linear | gaussian
kernel = "linear"
top_features = 3
mask = true

[counterfactual]
lambda = 0.5
# l1 | l2
metric = "l2"
sigma = 0.1
rho = 0.1
latent = 8
hidden = 32
steps = 2000
batch_size = 32
learning_rate = 0.001
samples = 10
count = 3

[reliability]
proportion = 0.5
# baseline-substitute | gaussian-noise
mode = "baseline-substitute"
noise_scale = 0.5
trials = 10
significant_fraction = 0.15

[compress]
target_coverage = 0.85
epochs = 30
benchmark_passes = 1000
"#;

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str(TEMPLATE).expect("built-in template parses")
    }
}

fn field(name: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: name.into(),
        message: message.into(),
    }
}

fn check(ok: bool, name: &str, message: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(field(name, message))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let name = e
                .span()
                .map(|s| text[..s.start].lines().count().to_string())
                .map_or_else(|| "config".to_string(), |l| format!("line {l}"));
            field(&name, e.message().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths resolve against the config's directory
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.images,
            &mut cfg.data.labels,
            &mut cfg.data.path,
            &mut cfg.model.path,
            &mut cfg.output,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Checks every field; the error names the first offending one.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match d.kind {
            DataKind::Blobs => check(d.per_class >= 2, "data.per_class", "must be at least 2")?,
            DataKind::Idx => {
                check(d.images.is_some(), "data.images", "required for kind = \"idx\"")?;
                check(d.labels.is_some(), "data.labels", "required for kind = \"idx\"")?;
            }
            DataKind::Csv => {
                check(d.path.is_some(), "data.path", "required for kind = \"csv\"")?;
                check(!d.label_column.is_empty(), "data.label_column", "must not be empty")?;
            }
        }
        check(
            d.train_fraction > 0.0 && d.train_fraction < 1.0,
            "data.train_fraction",
            format!("must lie in (0, 1), got {}", d.train_fraction),
        )?;

        let m = &self.model;
        check(m.hidden.iter().all(|&h| h > 0), "model.hidden", "widths must be positive")?;
        check(
            m.architecture == Architecture::Mlp || m.conv_channels > 0,
            "model.conv_channels",
            "must be positive",
        )?;
        check(m.epochs > 0, "model.epochs", "must be at least 1")?;
        check(m.batch_size > 0, "model.batch_size", "must be at least 1")?;
        check(
            m.learning_rate > 0.0 && m.learning_rate.is_finite(),
            "model.learning_rate",
            "must be positive",
        )?;

        let e = &self.explain;
        check(e.samples > 0, "explain.samples", "must be at least 1")?;
        check(
            e.epsilon > 0.0 && e.epsilon < 1.0,
            "explain.epsilon",
            format!("must lie in (0, 1), got {}", e.epsilon),
        )?;
        check(e.patch > 0, "explain.patch", "must be positive")?;
        check(e.stride > 0, "explain.stride", "must be positive")?;
        check(e.coalitions > 0, "explain.coalitions", "must be positive")?;
        check(
            e.coalition_min >= 1 && e.coalition_min <= e.coalition_max,
            "explain.coalition_min",
            "must satisfy 1 <= coalition_min <= coalition_max",
        )?;

        let c = &self.counterfactual;
        check(
            (0.0..=1.0).contains(&c.lambda),
            "counterfactual.lambda",
            format!("must lie in [0, 1], got {}", c.lambda),
        )?;
        check(c.sigma >= 0.0, "counterfactual.sigma", "must be non-negative")?;
        check(
            c.rho > 0.0 && c.rho <= 1.0,
            "counterfactual.rho",
            format!("must lie in (0, 1], got {}", c.rho),
        )?;
        check(c.latent > 0, "counterfactual.latent", "must be positive")?;
        check(c.hidden > 0, "counterfactual.hidden", "must be positive")?;
        check(c.steps > 0, "counterfactual.steps", "must be positive")?;
        check(c.batch_size > 0, "counterfactual.batch_size", "must be positive")?;
        check(c.learning_rate > 0.0, "counterfactual.learning_rate", "must be positive")?;
        check(c.samples > 0, "counterfactual.samples", "must be positive")?;
        check(c.count > 0, "counterfactual.count", "must be positive")?;

        let r = &self.reliability;
        check(
            r.proportion > 0.0 && r.proportion <= 1.0,
            "reliability.proportion",
            format!("must lie in (0, 1], got {}", r.proportion),
        )?;
        check(r.noise_scale >= 0.0, "reliability.noise_scale", "must be non-negative")?;
        check(r.trials > 0, "reliability.trials", "must be at least 1")?;
        check(
            r.significant_fraction > 0.0 && r.significant_fraction <= 1.0,
            "reliability.significant_fraction",
            "must lie in (0, 1]",
        )?;

        let k = &self.compress;
        check(
            k.target_coverage > 0.0 && k.target_coverage <= 1.0,
            "compress.target_coverage",
            format!("must lie in (0, 1], got {}", k.target_coverage),
        )?;
        check(k.epochs > 0, "compress.epochs", "must be at least 1")?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form. The output location and worker
    /// count do not influence results and are left out.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        c.workers = 0;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.model.epochs,
            batch_size: self.model.batch_size,
            learning_rate: self.model.learning_rate,
            seed: self.seed,
        }
    }

    pub fn plan(&self) -> InterventionPlan {
        let e = &self.explain;
        let strategy = match e.plan {
            PlanKind::SingleFeature => Strategy::SingleFeature,
            PlanKind::Patch => Strategy::PatchOcclusion {
                patch: e.patch,
                stride: e.stride,
            },
            PlanKind::Coalition => Strategy::CoalitionSampling {
                count: e.coalitions,
                min_size: e.coalition_min,
                max_size: e.coalition_max,
            },
        };
        InterventionPlan {
            strategy,
            baseline: e.baseline,
        }
    }

    pub fn explain_config(&self) -> ExplainConfig {
        ExplainConfig {
            plan: self.plan(),
            epsilon: self.explain.epsilon,
            kernel: match self.explain.kernel {
                KernelKind::Linear => Kernel::Linear,
                KernelKind::Gaussian => Kernel::Gaussian { bandwidth: None },
            },
            top_features: self.explain.top_features,
            find_mask: self.explain.mask,
        }
    }

    pub fn cf_config(&self) -> CfConfig {
        let c = &self.counterfactual;
        CfConfig {
            lambda: c.lambda,
            metric: c.metric,
            sigma: c.sigma,
            rho: c.rho,
            latent: c.latent,
            hidden: c.hidden,
            steps: c.steps,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            seed: self.seed,
        }
    }

    pub fn perturbation(&self) -> PerturbationSpec {
        let r = &self.reliability;
        PerturbationSpec {
            proportion: r.proportion,
            mode: r.mode,
            noise_scale: r.noise_scale,
            seed: self.seed,
        }
    }
}
