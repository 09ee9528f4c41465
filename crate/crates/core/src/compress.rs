//! Global view over per-sample causal graphs: topology coverage, compressed
//! architectures derived from layer-group redundancy, and benchmarking.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{lstsq_bridge, CausalGraph};
use crate::nn::container::serialized_size;
use crate::nn::{accuracy, Layer, TappedModel};
use crate::tensor::Tensor;

/// Coverage of one distinct graph structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyRow {
    pub topology: String,
    pub node_count: usize,
    /// Tap-index members of each group.
    pub groups: Vec<Vec<usize>>,
    pub count: usize,
    pub coverage: f64,
    /// Coverage of this row and all rows above it.
    pub cumulative: f64,
}

/// Coverage of all graphs with a given number of intermediate nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCountRow {
    pub node_count: usize,
    pub count: usize,
    pub coverage: f64,
    /// Fraction of graphs with at most `node_count` nodes.
    pub cumulative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub total: usize,
    /// Layer index of each tap point shared by all graphs.
    pub taps: Vec<usize>,
    /// Ordered by node count, then descending coverage, then topology key.
    pub topologies: Vec<TopologyRow>,
    pub node_counts: Vec<NodeCountRow>,
}

impl CoverageTable {
    pub fn topologies_csv(&self) -> String {
        let mut s = String::from("topology,node_count,count,coverage,cumulative\n");
        for r in &self.topologies {
            let _ = writeln!(
                s,
                "\"{}\",{},{},{:.6},{:.6}",
                r.topology, r.node_count, r.count, r.coverage, r.cumulative
            );
        }
        s
    }

    pub fn node_counts_csv(&self) -> String {
        let mut s = String::from("nodes,count,coverage,cumulative\n");
        for r in &self.node_counts {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6}",
                r.node_count, r.count, r.coverage, r.cumulative
            );
        }
        s
    }

    /// Cumulative coverage per node count.
    pub fn achievable(&self) -> Vec<f64> {
        self.node_counts.iter().map(|r| r.cumulative).collect()
    }
}

/// Groups graphs by structure (boundaries plus links) and tabulates coverage.
pub fn aggregate(graphs: &[CausalGraph]) -> Result<CoverageTable> {
    let Some(first) = graphs.first() else {
        return Err(Error::Precondition("no graphs to aggregate".into()));
    };
    if let Some(g) = graphs.iter().find(|g| g.taps != first.taps) {
        return Err(Error::Precondition(format!(
            "mixed tap configurations: {:?} vs {:?}",
            first.taps, g.taps
        )));
    }
    let total = graphs.len();
    let mut by_key: BTreeMap<String, (usize, &CausalGraph)> = BTreeMap::new();
    for g in graphs {
        by_key.entry(g.topology()).or_insert((0, g)).0 += 1;
    }
    let mut rows: Vec<(String, usize, &CausalGraph)> =
        by_key.into_iter().map(|(k, (c, g))| (k, c, g)).collect();
    rows.sort_by(|a, b| {
        a.2.node_count()
            .cmp(&b.2.node_count())
            .then(b.1.cmp(&a.1))
            .then(a.0.cmp(&b.0))
    });
    let mut running = 0;
    let topologies = rows
        .into_iter()
        .map(|(topology, count, g)| {
            running += count;
            TopologyRow {
                topology,
                node_count: g.node_count(),
                groups: g.groups.iter().map(|x| x.members.clone()).collect(),
                count,
                coverage: count as f64 / total as f64,
                cumulative: running as f64 / total as f64,
            }
        })
        .collect::<Vec<_>>();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &topologies {
        *counts.entry(r.node_count).or_default() += r.count;
    }
    let mut running = 0;
    let node_counts = counts
        .into_iter()
        .map(|(node_count, count)| {
            running += count;
            NodeCountRow {
                node_count,
                count,
                coverage: count as f64 / total as f64,
                cumulative: running as f64 / total as f64,
            }
        })
        .collect();
    Ok(CoverageTable {
        total,
        taps: first.taps.clone(),
        topologies,
        node_counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub node_count: usize,
    pub topology: String,
    /// Cumulative coverage at the chosen node count.
    pub coverage: f64,
    /// Original layer indices removed from the architecture.
    pub removed_layers: Vec<usize>,
    /// Groups (tap-index members) replaced by a dense bridge.
    pub bridged_groups: Vec<Vec<usize>>,
    /// Groups kept intact because no bridge layer can express their shape.
    pub skipped_groups: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct CompressedModel {
    pub model: TappedModel,
    pub plan: CompressionPlan,
}

/// Keeps the first layer of each group of the dominant topology at the
/// smallest node count reaching `target` coverage. When the representative
/// output shape differs from the group's output, a dense bridge fitted by
/// least squares on `calibration` is inserted.
pub fn derive_compressed(
    model: &TappedModel,
    table: &CoverageTable,
    target: f64,
    calibration: &Tensor,
) -> Result<CompressedModel> {
    if table.taps != model.taps() {
        return Err(Error::Precondition(
            "coverage table was built for different tap points".into(),
        ));
    }
    let reached = table
        .node_counts
        .iter()
        .find(|r| target > 0.0 && r.cumulative >= target - 1e-12);
    let Some(level) = reached.filter(|_| target <= 1.0) else {
        return Err(Error::CoverageUnreachable {
            target,
            achievable: table.achievable(),
        });
    };
    let row = table
        .topologies
        .iter()
        .filter(|r| r.node_count == level.node_count)
        .max_by(|a, b| a.count.cmp(&b.count).then(b.topology.cmp(&a.topology)))
        .expect("node count row implies a topology");

    let shapes = model.layer_shapes()?;
    let taps = model.taps();
    let mut plan = CompressionPlan {
        node_count: row.node_count,
        topology: row.topology.clone(),
        coverage: level.cumulative,
        removed_layers: Vec::new(),
        bridged_groups: Vec::new(),
        skipped_groups: Vec::new(),
    };
    // layer index -> replacement layers inserted after it
    let mut inserts: BTreeMap<usize, Vec<Layer>> = BTreeMap::new();
    for members in row.groups.iter().filter(|m| m.len() > 1) {
        let from = taps[members[0]];
        let to = taps[*members.last().expect("non-empty group")];
        let dropped = from + 1..=to;
        if shapes[from] == shapes[to] {
            plan.removed_layers.extend(dropped);
        } else if shapes[to].len() == 1 {
            let h_from = model.forward_range(calibration, 0, from + 1).flatten_rows();
            let h_to = model.forward_range(calibration, 0, to + 1).flatten_rows();
            let mut bridge = Vec::new();
            if shapes[from].len() > 1 {
                bridge.push(Layer::Flatten);
            }
            bridge.push(lstsq_bridge(&h_from, &h_to)?);
            inserts.insert(from, bridge);
            plan.removed_layers.extend(dropped);
            plan.bridged_groups.push(members.clone());
        } else {
            plan.skipped_groups.push(members.clone());
        }
    }
    let mut layers = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        if !plan.removed_layers.contains(&i) {
            layers.push(layer.clone());
        }
        if let Some(extra) = inserts.remove(&i) {
            layers.extend(extra);
        }
    }
    let compressed = TappedModel::new(model.input_shape().to_vec(), layers, model.seed())?;
    Ok(CompressedModel {
        model: compressed,
        plan,
    })
}

/// One model's row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub model: String,
    pub params: usize,
    pub size_bytes: usize,
    pub flops: u64,
    /// Per-sample inference time; absent when timing was skipped.
    pub speed_ms_mean: Option<f64>,
    pub speed_ms_std: Option<f64>,
    /// Held-out accuracy in `[0, 1]`.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub rows: Vec<BenchmarkRow>,
}

/// Column headers of the rendered comparison table.
pub const REPORT_COLUMNS: [&str; 6] = [
    "Model",
    "θ (M)",
    "Size (MB)",
    "FLOPs (M)",
    "Speed (ms)",
    "Accuracy (%)",
];

impl CompressionReport {
    fn cells(r: &BenchmarkRow) -> [String; 6] {
        let speed = match (r.speed_ms_mean, r.speed_ms_std) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            (Some(m), None) => format!("{m:.4}"),
            _ => "n/a".into(),
        };
        [
            r.model.clone(),
            format!("{:.6}", r.params as f64 / 1e6),
            format!("{:.6}", r.size_bytes as f64 / 1e6),
            format!("{:.6}", r.flops as f64 / 1e6),
            speed,
            format!("{:.2}", r.accuracy * 100.0),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&Self::cells(r).join(","));
            s.push('\n');
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} |\n", REPORT_COLUMNS.join(" | "));
        s.push_str(&format!("|{}\n", "---|".repeat(REPORT_COLUMNS.len())));
        for r in &self.rows {
            let _ = writeln!(s, "| {} |", Self::cells(r).join(" | "));
        }
        s
    }

    /// The same report with timing removed, for reproducible artifacts.
    pub fn without_timing(&self) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| BenchmarkRow {
                    speed_ms_mean: None,
                    speed_ms_std: None,
                    ..r.clone()
                })
                .collect(),
        }
    }
}

/// Analytic size/FLOPs, held-out accuracy and, when `passes > 0`, per-sample
/// latency over `passes` single-sample forward passes.
pub fn benchmark(
    models: &[(&str, &TappedModel)],
    test: &LabeledDataset,
    passes: usize,
) -> Result<CompressionReport> {
    if test.is_empty() {
        return Err(Error::Precondition("benchmark needs a non-empty test set".into()));
    }
    let mut rows = Vec::with_capacity(models.len());
    for (name, model) in models {
        let (mean, std) = if passes > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut times = Vec::with_capacity(passes);
            for _ in 0..passes {
                let i = rand::Rng::gen_range(&mut rng, 0..test.len());
                let x = test.features.select_rows(&[i]);
                let t = Instant::now();
                let y = model.predict(&x)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
                std::hint::black_box(y);
            }
            let m = times.iter().sum::<f64>() / passes as f64;
            let v = if passes > 1 {
                times.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / (passes - 1) as f64
            } else {
                0.0
            };
            (Some(m), Some(v.sqrt()))
        } else {
            (None, None)
        };
        rows.push(BenchmarkRow {
            model: name.to_string(),
            params: model.param_count(),
            size_bytes: serialized_size(model),
            flops: model.flops(),
            speed_ms_mean: mean,
            speed_ms_std: std,
            accuracy: accuracy(model, test)?,
        });
    }
    Ok(CompressionReport { rows })
}
