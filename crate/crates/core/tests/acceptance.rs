//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracer_core::attribution::ace;
use tracer_core::compress::{aggregate, benchmark, derive_compressed};
use tracer_core::config::RunConfig;
use tracer_core::counterfactual::{train_cf_gan, CfConfig, Metric};
use tracer_core::data::synthetic::gaussian_blobs;
use tracer_core::evaluation::{compare, top_k_mask, PerturbationSpec, RANDOM_METHOD};
use tracer_core::explain::{explain_sample, ExplainConfig};
use tracer_core::graph::{group_layers, CausalGraph};
use tracer_core::intervention::{apply, Baseline, BaselinePolicy, InterventionPlan};
use tracer_core::nn::{accuracy, train_classifier, Layer, ModelBuilder, TappedModel, TrainConfig};
use tracer_core::pipeline::Pipeline;
use tracer_core::similarity::{cka, hsic, kernel_matrix, Kernel};
use tracer_core::Tensor;

type Outcome = Result<String, String>;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn lin(x: &Tensor) -> Tensor {
    kernel_matrix(x, Kernel::Linear).unwrap()
}

fn orthogonal(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
    m.qr().q()
}

fn rotate(x: &Tensor, q: &DMatrix<f64>) -> Tensor {
    let (n, p) = (x.rows(), x.row_len());
    let xm = DMatrix::from_row_slice(n, p, x.data());
    let r = xm * q;
    let data = (0..n).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| r[(i, j)]).collect();
    Tensor::new(vec![n, p], data).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(4..=32);
        let (p, r) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let x = random_matrix(n, p, &mut rng);
        let y = random_matrix(n, r, &mut rng);
        let (kx, ky) = (lin(&x), lin(&y));
        let base = cka(&kx, &ky).map_err(|e| e.to_string())?;
        let a = rng.gen_range(0.1..10.0);
        let q = orthogonal(p, &mut rng);
        let errs = [
            (cka(&kx, &kx).unwrap() - 1.0).abs(),
            (cka(&ky, &kx).unwrap() - base).abs(),
            (cka(&lin(&x.map(|v| a * v)), &ky).unwrap() - base).abs(),
            (cka(&lin(&rotate(&x, &q)), &ky).unwrap() - base).abs(),
        ];
        worst = errs.iter().fold(worst, |w, &e| w.max(e));
    }
    let took = start.elapsed();
    let detail = format!("max deviation {worst:.2e} over 100 draws in {took:.2?}");
    if worst <= 1e-9 && took < Duration::from_secs(10) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Expanded double sums: tr(KL) - 2/n * 1'KL1 + 1/n^2 * (1'K1)(1'L1).
fn hsic_brute(k: &Tensor, l: &Tensor) -> f64 {
    let n = k.rows();
    let at = |t: &Tensor, i: usize, j: usize| t.data()[i * n + j];
    let (mut tr, mut cross, mut sk, mut sl) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            tr += at(k, i, j) * at(l, j, i);
            sk += at(k, i, j);
            sl += at(l, i, j);
            for m in 0..n {
                cross += at(k, i, j) * at(l, j, m);
            }
        }
    }
    let nf = n as f64;
    (tr - 2.0 * cross / nf + sk * sl / (nf * nf)) / ((nf - 1.0) * (nf - 1.0))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.gen_range(2..=8);
        let k = lin(&random_matrix(n, rng.gen_range(1..6), &mut rng));
        let l = lin(&random_matrix(n, rng.gen_range(1..6), &mut rng));
        let got = hsic(&k, &l).map_err(|e| e.to_string())?;
        worst = worst.max((got - hsic_brute(&k, &l)).abs());
    }
    let detail = format!("max |trace - brute force| {worst:.2e} over 50 pairs");
    if worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Every split of `0..l` into consecutive runs, as lists of run lengths.
fn compositions(l: usize) -> Vec<Vec<usize>> {
    (0..1usize << (l - 1))
        .map(|cuts| {
            let mut runs = vec![1];
            for i in 0..l - 1 {
                if cuts >> i & 1 == 1 {
                    runs.push(1);
                } else {
                    *runs.last_mut().unwrap() += 1;
                }
            }
            runs
        })
        .collect()
}

/// The unique composition whose runs are internally connected and cannot be
/// merged with a neighbour.
fn maximal_runs(b: &[Vec<bool>]) -> Vec<Vec<usize>> {
    let l = b.len();
    let mut found = Vec::new();
    for runs in compositions(l) {
        let mut groups = Vec::new();
        let mut start = 0;
        for r in runs {
            groups.push((start..start + r).collect::<Vec<_>>());
            start += r;
        }
        let connected = groups.iter().all(|g| g.windows(2).all(|w| b[w[0]][w[1]]));
        let maximal = groups.windows(2).all(|w| !b[*w[0].last().unwrap()][w[1][0]]);
        if connected && maximal {
            found.push(groups);
        }
    }
    assert_eq!(found.len(), 1, "maximal-run partition must be unique");
    found.pop().unwrap()
}

fn criterion_3() -> Outcome {
    let mut checked = 0usize;
    for l in 1..=6 {
        let pairs: Vec<(usize, usize)> =
            (0..l).flat_map(|i| (i + 1..l).map(move |j| (i, j))).collect();
        for bits in 0..1u64 << pairs.len() {
            let mut b = vec![vec![false; l]; l];
            for (i, row) in b.iter_mut().enumerate() {
                row[i] = true;
            }
            for (k, &(i, j)) in pairs.iter().enumerate() {
                let v = bits >> k & 1 == 1;
                b[i][j] = v;
                b[j][i] = v;
            }
            let got: Vec<Vec<usize>> = group_layers(&b).into_iter().map(|g| g.members).collect();
            if got != maximal_runs(&b) {
                return Err(format!("mismatch for L={l}, bits {bits:b}"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} symmetric matrices with L <= 6 match exactly"))
}

fn criterion_4() -> Outcome {
    let mut zero_terms = 0usize;
    for case in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + case);
        let d = 6;
        let mut model = ModelBuilder::new(&[d], case)
            .dense(8)
            .relu()
            .dense(5)
            .relu()
            .dense(3)
            .softmax()
            .build()
            .unwrap();
        let x = Tensor::from_vec((0..d).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let (indices, baseline) = if case % 2 == 0 {
            // features 0 and 1 are disconnected from the first layer
            if let Layer::Dense { weight, .. } = &mut model.layers_mut()[0] {
                for o in 0..8 {
                    weight.data_mut()[o * d] = 0.0;
                    weight.data_mut()[o * d + 1] = 0.0;
                }
            }
            (vec![0, 1], Baseline::Scalar(rng.gen_range(-5.0..5.0)))
        } else {
            // substitution with the feature's own value
            let own = Baseline::PerFeature(Arc::new(x.data().to_vec()));
            (vec![rng.gen_range(0..d)], own)
        };
        let live = apply(&x, &[2], &Baseline::Scalar(9.0)).unwrap();
        let null = apply(&x, &indices, &baseline).unwrap();
        let taps = model.taps().to_vec();
        let names = taps.iter().map(|t| format!("t{t}")).collect();
        let identity: Vec<Vec<bool>> = (0..taps.len())
            .map(|i| (0..taps.len()).map(|j| i == j).collect())
            .collect();
        let graph = CausalGraph::from_binary(taps, names, &identity).unwrap();
        let map = ace(&model, &graph, &x, &[null, live]).map_err(|e| e.to_string())?;
        for node in &map.terms {
            let t = &node[0];
            if t.kl != 0.0 || t.delta_l1 != 0.0 || t.magnitude() != 0.0 || t.signed() != 0.0 {
                return Err(format!("case {case}: non-zero term {t:?}"));
            }
            zero_terms += 1;
        }
    }
    Ok(format!("{zero_terms} node terms exactly zero across 20 cases"))
}

fn criterion_5() -> Outcome {
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..10).map(|i| if i % 3 == c { 1.5 } else { 0.0 }).collect())
        .collect();
    let train = gaussian_blobs(&centers, 1.0, 100, 5).unwrap();
    let test = gaussian_blobs(&centers, 1.0, 100, 6).unwrap();
    let init = ModelBuilder::new(&[10], 0).dense(16).relu().dense(3).softmax().build().unwrap();
    let cfg = TrainConfig { epochs: 30, batch_size: 16, learning_rate: 1e-2, seed: 0 };
    let model = train_classifier(&init, &train, &cfg).unwrap().model;
    let config = ExplainConfig {
        plan: InterventionPlan::single_feature(BaselinePolicy::Zero),
        epsilon: 0.05,
        kernel: Kernel::Linear,
        top_features: 3,
        find_mask: true,
    };
    let (mut sufficient, mut minimal, mut close) = (0, 0, 0);
    let mut gaps = BTreeMap::new();
    for i in 0..200 {
        let x = test.features.sample(i);
        let e = explain_sample(&model, &x, &Baseline::Scalar(0.0), &config, 0).unwrap();
        let y = e.predicted;
        let m = e.mask.unwrap();
        let keep: Vec<bool> = m.mask.data().iter().map(|&v| v != 0.0).collect();

        // independent re-check of C2 and 1-minimality
        let masked = |keep: &[bool]| -> Vec<f64> {
            x.data().iter().zip(keep).map(|(&v, &k)| if k { v } else { 0.0 }).collect()
        };
        let mut rows = vec![masked(&keep)];
        for j in (0..10).filter(|&j| keep[j]) {
            let mut k = keep.clone();
            k[j] = false;
            rows.push(masked(&k));
        }
        let preds = model.classify(&Tensor::from_rows(&rows)).unwrap();
        sufficient += usize::from(preds[0] == y);
        minimal += usize::from(preds[1..].iter().all(|&p| p != y));

        // exhaustive optimum over all 2^10 subsets
        let all: Vec<Vec<f64>> = (0..1u32 << 10)
            .map(|s| masked(&(0..10).map(|j| s >> j & 1 == 1).collect::<Vec<_>>()))
            .collect();
        let preds = model.classify(&Tensor::from_rows(&all)).unwrap();
        let best = (0..1u32 << 10)
            .filter(|&s| preds[s as usize] == y)
            .map(u32::count_ones)
            .min()
            .unwrap() as usize;
        let gap = m.size() - best;
        *gaps.entry(gap).or_insert(0usize) += 1;
        close += usize::from(gap <= 2);
    }
    let detail = format!(
        "sufficient {sufficient}/200, 1-minimal {minimal}/200, within +2 of optimum {close}/200, gap histogram {gaps:?}"
    );
    if sufficient == 200 && minimal == 200 && close >= 180 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Outcome {
    use common::gradcheck::{check_layer, draw, KINDS, TOL};
    let mut worst = 0.0f64;
    for kind in KINDS {
        for d in 0..20 {
            let (layer, x) = draw(kind, d);
            let e = check_layer(&layer, &x, d);
            if e >= TOL {
                return Err(format!("{kind} draw {d}: relative error {e:.2e}"));
            }
            worst = worst.max(e);
        }
    }
    Ok(format!("{} layer kinds x 20 draws, worst relative error {worst:.2e}", KINDS.len()))
}

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let (train, test) = common::blobs_split();
    let classifier = common::trained_blobs_classifier(&train);
    let preds = classifier.classify(&test.features).unwrap();
    let targets: Vec<usize> = preds.iter().map(|&p| 1 - p).collect();
    let mut medians = Vec::new();
    let mut rates = Vec::new();
    for lambda in [0.0, 0.5, 0.9] {
        let cfg = CfConfig { lambda, ..CfConfig::default() };
        let gen = train_cf_gan(&train, &classifier, &cfg).map_err(|e| e.to_string())?.generator;
        let cf = gen.counterfactuals(&test.features, &targets).unwrap();
        let hits = classifier.classify(&cf).unwrap();
        let hit = hits.iter().zip(&targets).filter(|(a, b)| a == b).count();
        rates.push(hit as f64 / targets.len() as f64);
        let mut dist: Vec<f64> = (0..test.len())
            .map(|i| Metric::L2.distance(cf.row(i), test.features.row(i)))
            .collect();
        medians.push(common::median(&mut dist));
    }
    let took = start.elapsed();
    let detail = format!(
        "hit rates {rates:.3?}, median distances {medians:.3?} for lambda 0/0.5/0.9 in {took:.1?}"
    );
    let ok = rates.iter().all(|&r| r >= 0.9)
        && medians.windows(2).all(|w| w[1] < w[0])
        && took < Duration::from_secs(180);
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct DigitsRun {
    train: tracer_core::data::LabeledDataset,
    test: tracer_core::data::LabeledDataset,
    model: TappedModel,
}

fn digits_run() -> DigitsRun {
    let (train, test) = common::digits_split();
    let model = common::trained_digits_mlp(&train);
    DigitsRun { train, test, model }
}

fn criterion_8(run: &DigitsRun) -> Outcome {
    let zero = Baseline::Scalar(0.0);
    let config = ExplainConfig {
        plan: InterventionPlan::single_feature(BaselinePolicy::Zero),
        epsilon: 0.05,
        kernel: Kernel::Linear,
        top_features: 3,
        find_mask: false,
    };
    let n = 200;
    let k = (0.15f64 * 64.0).ceil() as usize;
    let masks = (0..n)
        .map(|i| {
            let e = explain_sample(&run.model, &run.test.features.sample(i), &zero, &config, 0)?;
            Ok(top_k_mask(&e.attribution.aggregate_tensor(), k))
        })
        .collect::<tracer_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let samples = run.test.features.select_rows(&(0..n).collect::<Vec<_>>());
    let spec = PerturbationSpec::default();
    let table = compare(&run.model, &samples, &[("tracer".into(), masks)], &zero, &spec, 10)
        .map_err(|e| e.to_string())?;
    let ours = table.get("tracer").unwrap().mean;
    let random = table.get(RANDOM_METHOD).unwrap().mean;
    let detail = format!(
        "S tracer {ours:.3} vs random {random:.3} (gap {:.3}), {n} samples, k={k}, p={}, 10 trials",
        ours - random,
        spec.proportion
    );
    if ours - random >= 0.1 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

const TABLE_COLUMNS: [&str; 6] = [
    "Model",
    "θ (M)",
    "Size (MB)",
    "FLOPs (M)",
    "Speed (ms)",
    "Accuracy (%)",
];

fn criterion_9(run: &DigitsRun) -> Outcome {
    let baseline = BaselinePolicy::PerFeatureMean.resolve(&run.train);
    let config = ExplainConfig {
        plan: InterventionPlan::single_feature(BaselinePolicy::PerFeatureMean),
        epsilon: 0.1,
        kernel: Kernel::Linear,
        top_features: 3,
        find_mask: false,
    };
    let graphs = (0..200)
        .map(|i| {
            explain_sample(&run.model, &run.test.features.sample(i), &baseline, &config, 0)
                .map(|e| e.graph)
        })
        .collect::<tracer_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let table = aggregate(&graphs).map_err(|e| e.to_string())?;
    let c = derive_compressed(&run.model, &table, 0.85, &run.train.features)
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig { epochs: 30, batch_size: 16, learning_rate: 1e-3, seed: 0 };
    let compressed = train_classifier(&c.model, &run.train, &cfg).unwrap().model;
    let report = benchmark(&[("original", &run.model), ("compressed", &compressed)], &run.test, 20)
        .map_err(|e| e.to_string())?;
    let header = report.to_csv().lines().next().unwrap_or_default().to_string();
    let (p0, p1) = (run.model.param_count(), compressed.param_count());
    let a0 = accuracy(&run.model, &run.test).unwrap();
    let a1 = accuracy(&compressed, &run.test).unwrap();
    let detail = format!(
        "params {p0} -> {p1}, accuracy {:.2}% -> {:.2}%, removed layers {:?}, columns [{header}]",
        100.0 * a0,
        100.0 * a1,
        c.plan.removed_layers
    );
    if p1 < p0 && (a0 - a1).abs() * 100.0 <= 1.0 && header == TABLE_COLUMNS.join(",") {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            files(root, &p, out);
        } else {
            out.push(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut listings = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        Pipeline::new(RunConfig::default(), out.clone())
            .and_then(|p| p.run_all())
            .map_err(|e| e.to_string())?;
        let mut list = Vec::new();
        files(&out, &out, &mut list);
        list.sort();
        listings.push((out, list));
    }
    let (a, la) = &listings[0];
    let (b, lb) = &listings[1];
    if la != lb {
        return Err("the two runs produced different file sets".into());
    }
    let stable: Vec<&PathBuf> = la.iter().filter(|p| !p.starts_with("timing")).collect();
    for p in &stable {
        if std::fs::read(a.join(p)).unwrap() != std::fs::read(b.join(p)).unwrap() {
            return Err(format!("{} differs between runs", p.display()));
        }
    }
    Ok(format!(
        "{} non-timing files byte-identical ({} timing files excluded)",
        stable.len(),
        la.len() - stable.len()
    ))
}

fn criterion_11() -> Outcome {
    let taps: Vec<usize> = (1..=6).collect();
    let names: Vec<String> = taps.iter().map(|t| format!("t{t}")).collect();
    // boundaries between consecutive taps that are *not* similar
    let graph = |cuts: &[usize]| {
        let mut b = vec![vec![true; 6]; 6];
        for &c in cuts {
            for i in 0..=c {
                for j in c + 1..6 {
                    b[i][j] = false;
                    b[j][i] = false;
                }
            }
        }
        CausalGraph::from_binary(taps.clone(), names.clone(), &b).unwrap()
    };
    let mut graphs = Vec::new();
    for (cuts, count) in [(&[2][..], 846), (&[1, 3][..], 100), (&[0, 4][..], 42), (&[0, 2, 4][..], 12)] {
        graphs.extend(std::iter::repeat(graph(cuts)).take(count));
    }
    let table = aggregate(&graphs).map_err(|e| e.to_string())?;
    let expected = "nodes,count,coverage,cumulative\n\
                    2,846,0.846000,0.846000\n\
                    3,142,0.142000,0.988000\n\
                    4,12,0.012000,1.000000\n";
    let rows: Vec<(usize, usize, f64, f64)> = table
        .node_counts
        .iter()
        .map(|r| (r.node_count, r.count, r.coverage, r.cumulative))
        .collect();
    let exact = rows
        == vec![
            (2, 846, 0.846, 0.846),
            (3, 142, 0.142, 0.988),
            (4, 12, 0.012, 1.0),
        ];
    let topo_cum: Vec<f64> = table.topologies.iter().map(|r| r.cumulative).collect();
    let detail = format!("node rows {rows:?}, topology cumulative {topo_cum:?}");
    if exact && table.node_counts_csv() == expected && topo_cum == [0.846, 0.946, 0.988, 1.0] {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let digits = std::sync::OnceLock::new();
    let get = || digits.get_or_init(digits_run);
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("CKA identity suite", Box::new(criterion_1)),
        ("HSIC oracle equivalence", Box::new(criterion_2)),
        ("grouping equivalence", Box::new(criterion_3)),
        ("zero-effect interventions", Box::new(criterion_4)),
        ("explanation mask contract", Box::new(criterion_5)),
        ("gradient checks", Box::new(criterion_6)),
        ("counterfactual efficacy", Box::new(criterion_7)),
        ("reliability superiority", Box::new(move || criterion_8(get()))),
        ("compression workflow", Box::new(move || criterion_9(get()))),
        ("reproducibility", Box::new(criterion_10)),
        ("coverage table format", Box::new(criterion_11)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        match outcome {
            Ok(d) => println!("criterion {:>2} PASS {name}: {d} [{took:.1?}]", i + 1),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {d} [{took:.1?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
