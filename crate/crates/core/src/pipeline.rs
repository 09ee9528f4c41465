//! File-based orchestration of every analysis stage. Each stage reads its
//! prerequisites from the run directory and writes only beneath it; timing
//! measurements are confined to `timing/`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::compress::{aggregate, benchmark, derive_compressed, CoverageTable};
use crate::config::{Architecture, DataKind, RunConfig};
use crate::counterfactual::{contrastive_report, generate, train_cf_gan, CfGenerator};
use crate::data::pgm::{image_dims, signed_channels, write_pgm};
use crate::data::synthetic::two_blobs;
use crate::data::{
    fit_csv, load_idx, load_report, save_report, CsvSchema, ExplanationReport, GraphRef,
    LabeledDataset, NodeEffect,
};
use crate::error::{Error, Result};
use crate::evaluation::{compare, top_k_mask};
use crate::explain::explain_sample;
use crate::graph::{composite_check, CausalGraph};
use crate::intervention::Baseline;
use crate::nn::{accuracy, load_model, save_model, train_classifier, ModelBuilder, TappedModel};
use crate::tensor::Tensor;

/// Pipeline stages in execution order.
pub const STAGES: [&str; 9] = [
    "train",
    "explain",
    "graph",
    "cf-train",
    "cf-generate",
    "reliability",
    "aggregate",
    "compress",
    "benchmark",
];

pub struct Pipeline {
    config: RunConfig,
    out: PathBuf,
    digest: String,
    pool: rayon::ThreadPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    test_index: usize,
    dir: String,
    predicted: usize,
    label: usize,
    topology: String,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write(path, bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn write_signed(dir: &Path, stem: &str, shape: &[usize], values: &[f64]) -> Result<()> {
    let (w, h) = image_dims(shape);
    let (pos, neg) = signed_channels(values);
    write_pgm(&dir.join(format!("{stem}-pos.pgm")), w, h, &pos)?;
    write_pgm(&dir.join(format!("{stem}-neg.pgm")), w, h, &neg)
}

fn write_image(path: &Path, shape: &[usize], values: &[f64]) -> Result<()> {
    let (w, h) = image_dims(shape);
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_pgm(path, w, h, values)
}

impl Pipeline {
    /// Validates `config` and prepares the worker pool.
    pub fn new(config: RunConfig, out: PathBuf) -> Result<Self> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Precondition(format!("worker pool: {e}")))?;
        Ok(Self {
            digest: config.digest(),
            config,
            out,
            pool,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn run(&self, stage: &str) -> Result<()> {
        log::info!("stage {stage}");
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        match stage {
            "train" => self.train(),
            "explain" => self.explain(),
            "graph" => self.graph(),
            "cf-train" => self.cf_train(),
            "cf-generate" => self.cf_generate(),
            "reliability" => self.reliability(),
            "aggregate" => self.aggregate(),
            "compress" => self.compress(),
            "benchmark" => self.benchmark(),
            other => Err(Error::InvalidArgument(format!("unknown stage `{other}`"))),
        }
    }

    pub fn run_all(&self) -> Result<()> {
        STAGES.iter().try_for_each(|s| self.run(s))
    }

    /// Train and held-out splits as configured.
    pub fn data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let d = &self.config.data;
        let full = match d.kind {
            DataKind::Blobs => two_blobs(d.per_class, d.blob_seed),
            DataKind::Idx => {
                let images = d.images.as_deref().expect("validated");
                let labels = d.labels.as_deref().expect("validated");
                require(images)?;
                require(labels)?;
                load_idx(images, labels)?
            }
            DataKind::Csv => {
                let path = d.path.as_deref().expect("validated");
                require(path)?;
                let schema = CsvSchema {
                    categorical: d.categorical.clone(),
                };
                fit_csv(path, &d.label_column, &schema)?.0
            }
        };
        Ok(full.split(d.train_fraction, d.split_seed))
    }

    fn baseline(&self, train: &LabeledDataset) -> Baseline {
        self.config.explain.baseline.resolve(train)
    }

    fn build_model(&self, data: &LabeledDataset) -> Result<TappedModel> {
        let m = &self.config.model;
        let shape = data.sample_shape();
        let mut b = ModelBuilder::new(shape, self.config.seed);
        match m.architecture {
            Architecture::Mlp => {
                if shape.len() > 1 {
                    b = b.flatten();
                }
            }
            Architecture::Conv => {
                if shape.len() != 3 {
                    return Err(Error::Config {
                        field: "model.architecture".into(),
                        message: format!("conv needs [C, H, W] samples, got {shape:?}"),
                    });
                }
                b = b.conv(m.conv_channels, 3, 1, 1).relu().maxpool(2).flatten();
            }
        }
        for &h in &m.hidden {
            b = b.dense(h).relu();
        }
        b.dense(data.num_classes).softmax().build()
    }

    fn model_path(&self) -> PathBuf {
        self.out.join("model.tracer")
    }

    fn compressed_path(&self) -> PathBuf {
        self.out.join("compressed.tracer")
    }

    fn cfgan_path(&self) -> PathBuf {
        self.out.join("cfgan.tracer")
    }

    fn load_classifier(&self) -> Result<TappedModel> {
        let p = self.model_path();
        require(&p)?;
        load_model(&p)
    }

    pub fn train(&self) -> Result<()> {
        let (train, test) = self.data()?;
        let (model, history) = match &self.config.model.path {
            Some(p) => {
                require(p)?;
                (load_model(p)?, Vec::new())
            }
            None => {
                let init = self.build_model(&train)?;
                let t = train_classifier(&init, &train, &self.config.train_config())?;
                (t.model, t.history)
            }
        };
        save_model(&model, &self.model_path())?;
        write_json(
            &self.out.join("train/metrics.json"),
            &json!({
                "config_digest": self.digest,
                "params": model.param_count(),
                "flops": model.flops(),
                "taps": model.taps(),
                "train_accuracy": accuracy(&model, &train)?,
                "test_accuracy": accuracy(&model, &test)?,
                "history": history,
            }),
        )
    }

    fn explained_indices(&self, test: &LabeledDataset) -> Vec<usize> {
        (0..self.config.explain.samples.min(test.len())).collect()
    }

    pub fn explain(&self) -> Result<()> {
        let model = self.load_classifier()?;
        let (train, test) = self.data()?;
        let baseline = self.baseline(&train);
        let cfg = self.config.explain_config();
        let seed = self.config.seed;
        let indices = self.explained_indices(&test);
        let explanations = self.pool.install(|| {
            indices
                .par_iter()
                .map(|&i| explain_sample(&model, &test.features.sample(i), &baseline, &cfg, seed))
                .collect::<Result<Vec<_>>>()
        })?;

        let root = self.out.join("explain");
        let mut index = Vec::with_capacity(indices.len());
        for (&i, e) in indices.iter().zip(&explanations) {
            let id = format!("test-{i:04}");
            let dir = root.join(&id);
            let x = test.features.sample(i);
            let raw = test.normalization.denormalize(x.data());
            let shape = x.shape().to_vec();
            let (mask, certified) = match &e.mask {
                Some(m) => (m.mask.clone(), m.sufficient && m.is_one_minimal()),
                None => (Tensor::full(&shape, 1.0), false),
            };
            let report = ExplanationReport {
                sample_id: id.clone(),
                predicted_label: e.predicted,
                true_label: Some(test.labels[i]),
                input: Tensor::new(shape.clone(), raw)?,
                feature_names: test.feature_names.clone(),
                attribution: e.attribution.aggregate_tensor(),
                mask: mask.clone(),
                mask_certified: certified,
                node_effects: e
                    .graph
                    .groups
                    .iter()
                    .map(|g| NodeEffect {
                        node: g.id,
                        members: g.members.iter().map(|&m| e.graph.taps[m]).collect(),
                        ace: e.attribution.node_ace[g.id],
                        signed_effect: e.attribution.node_signed[g.id],
                    })
                    .collect(),
                graph: GraphRef {
                    file: "graph.json".into(),
                    topology: e.graph.topology(),
                },
                config_digest: self.digest.clone(),
            };
            std::fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
            save_report(&report, &dir.join("report.json"))?;
            e.graph.save(&dir.join("graph.json"))?;
            write(
                &dir.join("graph.dot"),
                format!("// config {}\n{}", self.digest, e.graph.to_dot()),
            )?;
            write(&dir.join("cka.csv"), e.cka.to_csv())?;
            write_pgm(&dir.join("cka.pgm"), e.cka.len(), e.cka.len(), &e.cka.heatmap())?;
            write_signed(&dir, "attribution", &shape, &e.attribution.aggregate)?;
            write_image(&dir.join("mask.pgm"), &shape, mask.data())?;
            index.push(IndexEntry {
                id: id.clone(),
                test_index: i,
                dir: id,
                predicted: e.predicted,
                label: test.labels[i],
                topology: e.graph.topology(),
            });
        }
        write_json(
            &root.join("index.json"),
            &json!({ "config_digest": self.digest, "samples": index }),
        )
    }

    fn read_index(&self) -> Result<Vec<IndexEntry>> {
        #[derive(Deserialize)]
        struct Index {
            samples: Vec<IndexEntry>,
        }
        let idx: Index = read_json(&self.out.join("explain/index.json"))?;
        Ok(idx.samples)
    }

    fn read_graphs(&self) -> Result<Vec<CausalGraph>> {
        self.read_index()?
            .iter()
            .map(|e| {
                let p = self.out.join("explain").join(&e.dir).join("graph.json");
                require(&p)?;
                CausalGraph::load(&p)
            })
            .collect()
    }

    /// Composite-layer check for every distinct graph structure.
    pub fn graph(&self) -> Result<()> {
        let model = self.load_classifier()?;
        let (_, test) = self.data()?;
        let graphs = self.read_graphs()?;
        let n = test.len().min(100);
        let calib = test.features.select_rows(&(0..n).collect::<Vec<_>>());
        let mut seen = std::collections::BTreeMap::new();
        for g in &graphs {
            if !seen.contains_key(&g.topology()) {
                seen.insert(g.topology(), composite_check(&model, g, &calib)?);
            }
        }
        write_json(
            &self.out.join("graph/composite.json"),
            &json!({ "config_digest": self.digest, "samples": n, "topologies": seen }),
        )
    }

    pub fn cf_train(&self) -> Result<()> {
        let model = self.load_classifier()?;
        let (train, _) = self.data()?;
        let t = train_cf_gan(&train, &model, &self.config.cf_config())?;
        t.generator.save(&self.cfgan_path())?;
        write_json(
            &self.out.join("counterfactual/training.json"),
            &json!({ "config_digest": self.digest, "history": t.history }),
        )
    }

    pub fn cf_generate(&self) -> Result<()> {
        let model = self.load_classifier()?;
        require(&self.cfgan_path())?;
        let gen = CfGenerator::load(&self.cfgan_path())?;
        let (train, test) = self.data()?;
        let baseline = self.baseline(&train);
        let cfg = self.config.explain_config();
        let c = &self.config.counterfactual;
        let k = test.num_classes;
        let n = c.samples.min(test.len());
        let xs = test.features.select_rows(&(0..n).collect::<Vec<_>>());
        let preds = model.classify(&xs)?;
        // misclassified samples aim at their label, the rest at the next class
        let desired: Vec<usize> = (0..n)
            .map(|i| if preds[i] != test.labels[i] { test.labels[i] } else { (preds[i] + 1) % k })
            .collect();
        let canonical = gen.counterfactuals(&xs, &desired)?;
        let seed = self.config.seed;
        let reports = self.pool.install(|| {
            (0..n)
                .into_par_iter()
                .map(|i| {
                    contrastive_report(
                        &model,
                        &xs.sample(i),
                        &canonical.sample(i),
                        desired[i],
                        &baseline,
                        &cfg,
                        seed,
                    )
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let root = self.out.join("counterfactual");
        let mut effective = 0;
        let mut consistent = 0;
        for (i, r) in reports.iter().enumerate() {
            let dir = root.join(format!("test-{i:04}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            r.save(&dir.join("contrastive.json"))?;
            let shape = r.original.shape();
            write_image(&dir.join("original.pgm"), shape, r.original.data())?;
            write_image(&dir.join("counterfactual.pgm"), shape, r.counterfactual.data())?;
            write_signed(&dir, "difference", shape, r.difference.data())?;
            let diverse = generate(&gen, &xs.sample(i), desired[i], c.count, c.sigma, seed + i as u64)?;
            for (j, x) in diverse.iter().enumerate() {
                write_image(&dir.join(format!("diverse-{j}.pgm")), shape, x.data())?;
            }
            effective += usize::from(r.effective);
            consistent += usize::from(r.graphs_consistent);
        }
        write_json(
            &root.join("summary.json"),
            &json!({
                "config_digest": self.digest,
                "samples": n,
                "effective": effective,
                "efficacy": effective as f64 / n as f64,
                "graphs_consistent": consistent,
            }),
        )
    }

    pub fn reliability(&self) -> Result<()> {
        let model = self.load_classifier()?;
        let (train, test) = self.data()?;
        let baseline = self.baseline(&train);
        let entries = self.read_index()?;
        let mut xs = Vec::new();
        let mut top = Vec::new();
        let mut minimal = Vec::new();
        for e in &entries {
            let report = load_report(&self.out.join("explain").join(&e.dir).join("report.json"))?;
            let d = report.attribution.len();
            let k = ((self.config.reliability.significant_fraction * d as f64).ceil() as usize).clamp(1, d);
            xs.push(test.features.sample(e.test_index));
            top.push(top_k_mask(&report.attribution, k));
            minimal.push(report.mask);
        }
        if xs.is_empty() {
            return Err(Error::Precondition("no explained samples".into()));
        }
        let samples = Tensor::stack(&xs)?;
        let mut sets = vec![("tracer".to_string(), top)];
        if self.config.explain.mask {
            sets.push(("tracer-minimal".to_string(), minimal));
        }
        let table = compare(
            &model,
            &samples,
            &sets,
            &baseline,
            &self.config.perturbation(),
            self.config.reliability.trials,
        )?;
        let root = self.out.join("reliability");
        write(&root.join("comparison.csv"), table.to_csv())?;
        write_json(
            &root.join("comparison.json"),
            &json!({ "config_digest": self.digest, "comparison": table }),
        )
    }

    pub fn aggregate(&self) -> Result<()> {
        let table = aggregate(&self.read_graphs()?)?;
        let root = self.out.join("aggregate");
        write(&root.join("topologies.csv"), table.topologies_csv())?;
        write(&root.join("node_counts.csv"), table.node_counts_csv())?;
        write_json(
            &root.join("coverage.json"),
            &json!({ "config_digest": self.digest, "coverage": table }),
        )
    }

    pub fn compress(&self) -> Result<()> {
        #[derive(Deserialize)]
        struct Doc {
            coverage: CoverageTable,
        }
        let model = self.load_classifier()?;
        let doc: Doc = read_json(&self.out.join("aggregate/coverage.json"))?;
        let (train, test) = self.data()?;
        let c = derive_compressed(
            &model,
            &doc.coverage,
            self.config.compress.target_coverage,
            &train.features,
        )?;
        let cfg = crate::nn::TrainConfig {
            epochs: self.config.compress.epochs,
            ..self.config.train_config()
        };
        let retrained = train_classifier(&c.model, &train, &cfg)?.model;
        save_model(&retrained, &self.compressed_path())?;
        write_json(
            &self.out.join("compress/plan.json"),
            &json!({
                "config_digest": self.digest,
                "plan": c.plan,
                "original_params": model.param_count(),
                "compressed_params": retrained.param_count(),
                "original_accuracy": accuracy(&model, &test)?,
                "compressed_accuracy": accuracy(&retrained, &test)?,
            }),
        )
    }

    pub fn benchmark(&self) -> Result<()> {
        let model = self.load_classifier()?;
        require(&self.compressed_path())?;
        let compressed = load_model(&self.compressed_path())?;
        let (_, test) = self.data()?;
        let report = benchmark(
            &[("original", &model), ("compressed", &compressed)],
            &test,
            self.config.compress.benchmark_passes,
        )?;
        let stable = report.without_timing();
        let root = self.out.join("benchmark");
        write(&root.join("table.csv"), stable.to_csv())?;
        write_json(
            &root.join("table.json"),
            &json!({ "config_digest": self.digest, "report": stable }),
        )?;
        let timing = self.out.join("timing");
        write(&timing.join("benchmark.csv"), report.to_csv())?;
        write(&timing.join("benchmark.md"), report.to_markdown())?;
        write_json(
            &timing.join("benchmark.json"),
            &json!({ "config_digest": self.digest, "report": report }),
        )
    }
}
