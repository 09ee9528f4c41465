//! Counterfactual generation with an encoder/decoder generator trained
//! against a class-conditional discriminator plus a nearest-neighbour
//! proximity term: `L = (1-λ)·L_gan + λ·d(x*, x_nn)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::report::tensor_b64;
use crate::data::{load_document, save_document, LabeledDataset};
use crate::error::{Error, Result};
use crate::explain::{explain_sample, ExplainConfig};
use crate::graph::CausalGraph;
use crate::intervention::Baseline;
use crate::nn::container::{decode, encode};
use crate::nn::{Adam, ModelBuilder, Tape, TappedModel, Var};
use crate::tensor::Tensor;

pub const CFGAN_VERSION: &str = "tracer-cfgan/1";
pub const CONTRASTIVE_VERSION: &str = "tracer-contrastive/1";

/// Parameter keys of the discriminator on the generator's tape, kept clear of
/// the generator's own keys.
const DISC_KEY_OFFSET: usize = 1 << 20;

/// Kronecker-delta encoding of `label` over `k` classes.
pub fn one_hot(label: usize, k: usize) -> Result<Vec<f64>> {
    if label >= k {
        return Err(Error::IndexOutOfRange { index: label, len: k });
    }
    Ok((0..k).map(|i| if i == label { 1.0 } else { 0.0 }).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    #[default]
    L2,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }

    /// Mean row distance recorded on the tape.
    fn record(self, tape: &mut Tape, a: Var, b: Var) -> Var {
        let diff = tape.sub(a, b);
        match self {
            Metric::L1 => {
                let abs = tape.abs(diff);
                let rows = tape.row_sum(abs);
                tape.mean(rows)
            }
            Metric::L2 => {
                let sq = tape.mul(diff, diff);
                let rows = tape.row_sum(sq);
                // keeps the gradient finite at zero distance
                let n = tape.value(rows).len();
                let eps = tape.constant(Tensor::full(&[n], 1e-12));
                let shifted = tape.add(rows, eps);
                let norms = tape.sqrt(shifted);
                tape.mean(norms)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfConfig {
    pub lambda: f64,
    pub metric: Metric,
    /// Latent perturbation scale for diverse generation.
    pub sigma: f64,
    /// Fraction of the training set stored for neighbour lookup.
    pub rho: f64,
    pub latent: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            metric: Metric::L2,
            sigma: 0.1,
            rho: 0.1,
            latent: 8,
            hidden: 32,
            steps: 2000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: field.into(),
                message,
            })
        };
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", format!("must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.sigma >= 0.0) {
            return bad("sigma", format!("must be non-negative, got {}", self.sigma));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad("rho", format!("must lie in (0, 1], got {}", self.rho));
        }
        if self.latent == 0 || self.hidden == 0 || self.steps == 0 || self.batch_size == 0 {
            return bad(
                "latent/hidden/steps/batch_size",
                "must all be positive".into(),
            );
        }
        Ok(())
    }
}

/// Random subset of the training set, queried by class with a linear scan.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    rows: Vec<Vec<f64>>,
    labels: Vec<usize>,
    metric: Metric,
}

impl NeighborIndex {
    /// Stores `⌈rho·n⌉` random rows, plus one row of any class the draw missed.
    pub fn build(data: &LabeledDataset, rho: f64, metric: Metric, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Precondition("neighbour index over empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = data.len();
        let take = ((rho * n as f64).ceil() as usize).clamp(1, n);
        let mut picked = rand::seq::index::sample(&mut rng, n, take).into_vec();
        picked.sort_unstable();
        for c in 0..data.num_classes {
            if !picked.iter().any(|&i| data.labels[i] == c) {
                if let Some(&i) = data.indices_of_class(c).first() {
                    picked.push(i);
                }
            }
        }
        let flat = data.features.flatten_rows();
        Ok(Self {
            rows: picked.iter().map(|&i| flat.row(i).to_vec()).collect(),
            labels: picked.iter().map(|&i| data.labels[i]).collect(),
            metric,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<usize>, metric: Metric) -> Self {
        Self {
            rows,
            labels,
            metric,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// For each row of `queries` (`[n, d]`), the nearest stored row of the
    /// matching target class, stacked.
    pub fn targets_for(&self, queries: &Tensor, classes: &[usize]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(queries.len());
        for (i, &t) in classes.iter().enumerate() {
            let nn = self.nearest(t, queries.row(i)).ok_or_else(|| {
                Error::Precondition(format!("neighbour index has no row of class {t}"))
            })?;
            out.extend_from_slice(nn);
        }
        Tensor::new(vec![classes.len(), queries.row_len()], out)
    }

    /// Stored row of `class` closest to `query` (first on ties).
    pub fn nearest(&self, class: usize, query: &[f64]) -> Option<&[f64]> {
        self.rows
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == class)
            .map(|(r, _)| (self.metric.distance(r, query), r))
            .fold(None, |best: Option<(f64, &Vec<f64>)>, (d, r)| match best {
                Some((bd, _)) if bd <= d => best,
                _ => Some((d, r)),
            })
            .map(|(_, r)| r.as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfGenerator {
    pub encoder: TappedModel,
    pub decoder: TappedModel,
    pub discriminator: TappedModel,
    pub latent: usize,
    pub classes: usize,
    pub trained: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    latent: usize,
    classes: usize,
    trained: bool,
}

fn dense_stack(input: &[usize], hidden: usize, out: usize, seed: u64) -> ModelBuilder {
    let mut b = ModelBuilder::new(input, seed);
    if input.len() > 1 {
        b = b.flatten();
    }
    b.dense(hidden).relu().dense(hidden).relu().dense(out)
}

impl CfGenerator {
    /// Freshly initialised (untrained) networks.
    pub fn new(sample_shape: &[usize], classes: usize, latent: usize, hidden: usize, seed: u64) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        Ok(Self {
            encoder: dense_stack(sample_shape, hidden, latent, seed).build()?,
            decoder: dense_stack(&[latent + classes], hidden, d, seed.wrapping_add(1))
                .sigmoid()
                .build()?,
            discriminator: dense_stack(&[d + classes], hidden, 1, seed.wrapping_add(2)).build()?,
            latent,
            classes,
            trained: false,
        })
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.encoder.input_shape()
    }

    fn generator_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    /// `D([z; o(y*)])` for a batch of latents.
    fn decode_latent(&self, z: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let n = z.rows();
        let mut aug = Vec::with_capacity(n * (self.latent + self.classes));
        for (i, &t) in targets.iter().enumerate() {
            aug.extend_from_slice(z.row(i));
            aug.extend(one_hot(t, self.classes)?);
        }
        let aug = Tensor::new(vec![n, self.latent + self.classes], aug)?;
        let out = self.decoder.predict(&aug)?;
        let mut shape = vec![n];
        shape.extend_from_slice(self.sample_shape());
        out.reshape(shape)
    }

    /// Canonical counterfactuals (no latent perturbation) for a batch.
    pub fn counterfactuals(&self, xs: &Tensor, targets: &[usize]) -> Result<Tensor> {
        if !self.trained {
            return Err(Error::Precondition("generator is untrained".into()));
        }
        if xs.rows() != targets.len() {
            return Err(Error::Shape("one target per input required".into()));
        }
        let z = self.encoder.predict(xs)?;
        self.decode_latent(&z, targets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::to_value(CheckpointMeta {
            latent: self.latent,
            classes: self.classes,
            trained: self.trained,
        })?;
        let bytes = encode(
            CFGAN_VERSION,
            &[
                ("encoder", &self.encoder),
                ("decoder", &self.decoder),
                ("discriminator", &self.discriminator),
            ],
            meta,
        );
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (nets, meta) = decode(CFGAN_VERSION, &bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(meta)?;
        let mut it = nets.into_iter().map(|(_, m)| m);
        match (it.next(), it.next(), it.next(), it.next()) {
            (Some(encoder), Some(decoder), Some(discriminator), None) => Ok(Self {
                encoder,
                decoder,
                discriminator,
                latent: meta.latent,
                classes: meta.classes,
                trained: meta.trained,
            }),
            _ => Err(Error::format(
                "counterfactual checkpoint",
                "expected encoder, decoder and discriminator",
            )),
        }
    }
}

/// `[flatten(x) ; o(y)]` rows, the discriminator's input.
fn with_codes(xs: &Tensor, labels: &[usize], k: usize) -> Result<Tensor> {
    let flat = xs.flatten_rows();
    let mut rows = Vec::with_capacity(flat.rows());
    for (i, &y) in labels.iter().enumerate() {
        let mut r = flat.row(i).to_vec();
        r.extend(one_hot(y, k)?);
        rows.push(r);
    }
    Ok(Tensor::from_rows(&rows))
}

/// Per-step training curves.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CfHistory {
    pub proximity: Vec<f64>,
    pub adversarial: Vec<f64>,
    pub discriminator: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CfTraining {
    pub generator: CfGenerator,
    pub history: CfHistory,
}

/// Loss terms of one generator evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorLoss {
    pub total: f64,
    pub adversarial: f64,
    pub proximity: f64,
}

/// Records the generator objective for `(x, targets)` on `tape`, with the
/// generator's parameters under keys `0..` and the discriminator's far above.
/// `x_nn` is the stored target-class row nearest to the source `x`.
fn record_generator_loss(
    tape: &mut Tape,
    gen: &CfGenerator,
    index: &NeighborIndex,
    xs: &Tensor,
    targets: &[usize],
    config: &CfConfig,
) -> Result<(Var, GeneratorLoss)> {
    let x = tape.constant(xs.clone());
    let enc_end = gen.encoder.layers().len();
    let (z, enc_params) = gen.encoder.record(tape, x, enc_end, 0);
    let codes: Vec<Vec<f64>> = targets
        .iter()
        .map(|&t| one_hot(t, gen.classes))
        .collect::<Result<_>>()?;
    let codes = Tensor::from_rows(&codes);
    let code_var = tape.constant(codes.clone());
    let aug = tape.concat_cols(z, code_var);
    let dec_end = gen.decoder.layers().len();
    let (x_star, _) = gen.decoder.record(tape, aug, dec_end, enc_params.len());

    let x_nn = tape.constant(index.targets_for(&xs.flatten_rows(), targets)?);
    let prox = config.metric.record(tape, x_star, x_nn);
    let proximity = tape.value(prox).data()[0];

    let lambda = config.lambda;
    let (loss, adversarial) = if lambda >= 1.0 {
        (tape.scale(prox, 1.0), 0.0)
    } else {
        let code_var = tape.constant(codes);
        let fake = tape.concat_cols(x_star, code_var);
        let disc_end = gen.discriminator.layers().len();
        let (logit, _) = gen.discriminator.record(tape, fake, disc_end, DISC_KEY_OFFSET);
        // non-saturating: the generator wants D(x*) = 1
        let adv = tape.sigmoid_bce(logit, 1.0);
        let adversarial = tape.value(adv).data()[0];
        let a = tape.scale(adv, 1.0 - lambda);
        if lambda <= 0.0 {
            (a, adversarial)
        } else {
            let p = tape.scale(prox, lambda);
            (tape.add(a, p), adversarial)
        }
    };
    let total = tape.value(loss).data()[0];
    Ok((
        loss,
        GeneratorLoss {
            total,
            adversarial,
            proximity,
        },
    ))
}

/// Evaluates the generator objective without updating anything.
pub fn generator_loss(
    gen: &CfGenerator,
    index: &NeighborIndex,
    xs: &Tensor,
    targets: &[usize],
    config: &CfConfig,
) -> Result<GeneratorLoss> {
    let mut tape = Tape::new();
    record_generator_loss(&mut tape, gen, index, xs, targets, config).map(|(_, l)| l)
}

/// Alternating discriminator/generator Adam updates; targets are drawn
/// uniformly from the classes other than each source label.
pub fn train_cf_gan(
    data: &LabeledDataset,
    classifier: &TappedModel,
    config: &CfConfig,
) -> Result<CfTraining> {
    config.validate()?;
    if data.num_classes < 2 {
        return Err(Error::Precondition(
            "counterfactuals need at least two classes".into(),
        ));
    }
    if classifier.input_shape() != data.sample_shape() {
        return Err(Error::Shape(format!(
            "classifier input {:?} vs dataset samples {:?}",
            classifier.input_shape(),
            data.sample_shape()
        )));
    }
    let k = data.num_classes;
    let index = NeighborIndex::build(data, config.rho, config.metric, config.seed)?;
    let mut gen = CfGenerator::new(
        data.sample_shape(),
        k,
        config.latent,
        config.hidden,
        config.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut g_opt = Adam::new(config.learning_rate);
    let mut d_opt = Adam::new(config.learning_rate);
    let mut history = CfHistory::default();
    let bs = config.batch_size.min(data.len());

    for step in 0..config.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..data.len())).collect();
        let xs = data.features.select_rows(&idx);
        let targets: Vec<usize> = idx
            .iter()
            .map(|&i| {
                let t = rng.gen_range(0..k - 1);
                if t >= data.labels[i] {
                    t + 1
                } else {
                    t
                }
            })
            .collect();

        if config.lambda < 1.0 {
            gen.trained = true;
            let fake = gen.counterfactuals(&xs, &targets)?;
            gen.trained = false;
            let real_idx: Vec<usize> = (0..bs).map(|_| rng.gen_range(0..data.len())).collect();
            let real_labels: Vec<usize> = real_idx.iter().map(|&i| data.labels[i]).collect();
            let real = with_codes(&data.features.select_rows(&real_idx), &real_labels, k)?;
            let fake = with_codes(&fake, &targets, k)?;
            let mut tape = Tape::new();
            let end = gen.discriminator.layers().len();
            let rv = tape.constant(real);
            let (real_logit, _) = gen.discriminator.record(&mut tape, rv, end, 0);
            let fv = tape.constant(fake);
            let (fake_logit, _) = gen.discriminator.record(&mut tape, fv, end, 0);
            let lr = tape.sigmoid_bce(real_logit, 1.0);
            let lf = tape.sigmoid_bce(fake_logit, 0.0);
            let loss = tape.add(lr, lf);
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch: 0,
                    step,
                    loss: value,
                });
            }
            history.discriminator.push(value);
            let grads = tape.backward(loss)?;
            d_opt.step(&mut gen.discriminator.params_mut(), &grads);
        }

        let mut tape = Tape::new();
        let (loss, parts) = record_generator_loss(&mut tape, &gen, &index, &xs, &targets, config)?;
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                step,
                loss: parts.total,
            });
        }
        history.proximity.push(parts.proximity);
        history.adversarial.push(parts.adversarial);
        let grads = tape.backward(loss)?;
        g_opt.step(&mut gen.generator_params_mut(), &grads);
        if step % 500 == 0 {
            log::debug!(
                "cf step {step}: total {:.5} adversarial {:.5} proximity {:.5}",
                parts.total,
                parts.adversarial,
                parts.proximity
            );
        }
    }
    gen.trained = true;
    Ok(CfTraining {
        generator: gen,
        history,
    })
}

/// `count` counterfactuals for `x` (no batch axis) decoded from
/// `z_x + δ`, `δ ~ N(0, σ²)`.
pub fn generate(
    gen: &CfGenerator,
    x: &Tensor,
    target: usize,
    count: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<Tensor>> {
    if !gen.trained {
        return Err(Error::Precondition("generator is untrained".into()));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    one_hot(target, gen.classes)?;
    let xs = Tensor::stack(std::slice::from_ref(x))?;
    let z = gen.encoder.predict(&xs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut latents = Vec::with_capacity(count * gen.latent);
    for _ in 0..count {
        for &v in z.row(0) {
            let delta = if sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            latents.push(v + delta);
        }
    }
    let z = Tensor::new(vec![count, gen.latent], latents)?;
    let out = gen.decode_latent(&z, &vec![target; count])?;
    Ok((0..count).map(|i| out.sample(i)).collect())
}

/// Side-by-side causal analysis of a misclassified input and its
/// counterfactual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveReport {
    pub desired: usize,
    pub original_prediction: usize,
    pub counterfactual_prediction: usize,
    /// The counterfactual reaches the desired label.
    pub effective: bool,
    #[serde(with = "tensor_b64")]
    pub original: Tensor,
    #[serde(with = "tensor_b64")]
    pub counterfactual: Tensor,
    /// `x* - x`.
    #[serde(with = "tensor_b64")]
    pub difference: Tensor,
    #[serde(with = "tensor_b64")]
    pub original_attribution: Tensor,
    #[serde(with = "tensor_b64")]
    pub counterfactual_attribution: Tensor,
    pub original_graph: CausalGraph,
    pub counterfactual_graph: CausalGraph,
    /// Both graphs share group boundaries and links.
    pub graphs_consistent: bool,
}

impl ContrastiveReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_document(CONTRASTIVE_VERSION, self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_document(CONTRASTIVE_VERSION, path)
    }
}

pub fn contrastive_report(
    classifier: &TappedModel,
    x: &Tensor,
    x_star: &Tensor,
    desired: usize,
    baseline: &Baseline,
    config: &ExplainConfig,
    seed: u64,
) -> Result<ContrastiveReport> {
    if x.shape() != x_star.shape() {
        return Err(Error::Shape(format!(
            "input {:?} vs counterfactual {:?}",
            x.shape(),
            x_star.shape()
        )));
    }
    let cfg = ExplainConfig {
        find_mask: false,
        ..config.clone()
    };
    let a = explain_sample(classifier, x, baseline, &cfg, seed)?;
    if a.predicted == desired {
        return Err(Error::Precondition(format!(
            "input is already classified as {desired}"
        )));
    }
    let b = explain_sample(classifier, x_star, baseline, &cfg, seed)?;
    Ok(ContrastiveReport {
        desired,
        original_prediction: a.predicted,
        counterfactual_prediction: b.predicted,
        effective: b.predicted == desired,
        original: x.clone(),
        counterfactual: x_star.clone(),
        difference: x_star.zip_map(x, |p, q| p - q),
        original_attribution: a.attribution.aggregate_tensor(),
        counterfactual_attribution: b.attribution.aggregate_tensor(),
        graphs_consistent: a.graph.topology() == b.graph.topology(),
        original_graph: a.graph,
        counterfactual_graph: b.graph,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(2, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot(0, 1).unwrap(), vec![1.0]);
        assert!(one_hot(5, 4).is_err());
    }

    #[test]
    fn neighbour_index_matches_linear_scan() {
        let idx = NeighborIndex::from_rows(
            vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.2, 0.1], vec![0.9, 0.8]],
            vec![0, 1, 0, 1],
            Metric::L2,
        );
        assert_eq!(idx.nearest(0, &[0.3, 0.3]).unwrap(), &[0.2, 0.1]);
        assert_eq!(idx.nearest(1, &[0.3, 0.3]).unwrap(), &[0.9, 0.8]);
        assert!(idx.nearest(2, &[0.0, 0.0]).is_none());
    }

    #[test]
    fn untrained_generator_refuses() {
        let g = CfGenerator::new(&[2], 2, 2, 4, 0).unwrap();
        assert!(generate(&g, &Tensor::from_vec(vec![0.1, 0.2]), 1, 1, 0.0, 0).is_err());
    }

    #[test]
    fn config_rejects_out_of_range_lambda() {
        let c = CfConfig {
            lambda: 1.5,
            ..CfConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { .. })));
    }
}
