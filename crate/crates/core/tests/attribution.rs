mod common;

use tracer_core::attribution::{ace, find_minimal_mask, kl, node_distribution};
use tracer_core::explain::{explain_sample, ExplainConfig};
use tracer_core::graph::CausalGraph;
use tracer_core::intervention::{apply, generate, Baseline, BaselinePolicy, InterventionPlan};
use tracer_core::nn::{Layer, ModelBuilder, TappedModel};
use tracer_core::similarity::Kernel;
use tracer_core::{Error, Tensor};

fn singleton_graph(model: &TappedModel) -> CausalGraph {
    let taps = model.taps().to_vec();
    let l = taps.len();
    let b: Vec<Vec<bool>> = (0..l).map(|i| (0..l).map(|j| i == j).collect()).collect();
    let names = taps.iter().map(|t| format!("t{t}")).collect();
    CausalGraph::from_binary(taps, names, &b).unwrap()
}

/// Straight-line softmax, smoothing and KL.
fn oracle_term(before: &[f64], after: &[f64]) -> (f64, f64) {
    let dist = |v: &[f64]| {
        let m = v.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = v.iter().map(|a| (a - m).exp()).sum();
        let s: Vec<f64> = v.iter().map(|a| (a - m).exp() / z + 1e-12).collect();
        let t: f64 = s.iter().sum();
        s.into_iter().map(|a| a / t).collect::<Vec<_>>()
    };
    let (q, p) = (dist(before), dist(after));
    let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    let l1: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
    (kl, l1)
}

#[test]
fn kl_matches_hand_values() {
    let p = [0.5, 0.5];
    let q = [0.25, 0.75];
    let expect = 0.5 * (2.0f64).ln() + 0.5 * (0.5f64 / 0.75).ln();
    assert!((kl(&p, &q).unwrap() - expect).abs() < 1e-15);
    assert_eq!(kl(&p, &p).unwrap(), 0.0);
    assert!(kl(&p, &[1.0]).is_err());
    let d = node_distribution(&[0.0, 0.0, 0.0, 0.0]);
    assert!(d.iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn effect_terms_match_an_independent_computation() {
    let model = ModelBuilder::new(&[4], 11)
        .dense(5)
        .relu()
        .dense(3)
        .softmax()
        .build()
        .unwrap();
    let x = Tensor::from_vec(vec![0.3, -0.7, 1.2, 0.4]);
    let plan = InterventionPlan::single_feature(BaselinePolicy::Zero);
    let ivs = generate(&x, &plan, &Baseline::Scalar(0.0), 0).unwrap();
    let graph = singleton_graph(&model);
    let map = ace(&model, &graph, &x, &ivs).unwrap();
    let rows: Vec<Tensor> = std::iter::once(x.clone()).chain(ivs.iter().map(|i| i.sample.clone())).collect();
    let pass = model.forward(&Tensor::stack(&rows).unwrap()).unwrap();
    for (g, &tap) in model.taps().iter().enumerate() {
        let out = pass.taps[&tap].flatten_rows();
        for k in 0..ivs.len() {
            let t = map.terms[g][k];
            if out.row(k + 1) == out.row(0) {
                assert_eq!(t.kl, 0.0);
                continue;
            }
            let (kl, l1) = oracle_term(out.row(0), out.row(k + 1));
            assert!((t.kl - kl).abs() < 1e-12, "node {g} iv {k}: {} vs {kl}", t.kl);
            assert!((t.delta_l1 - l1).abs() < 1e-12);
        }
    }
}

/// Lowering the winning logit yields a positive sign; raising it a negative one.
#[test]
fn sign_follows_the_predicted_class_probability() {
    let layer = Layer::Dense {
        weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        bias: Tensor::zeros(&[2]),
    };
    let model = TappedModel::new(vec![2], vec![layer, Layer::Softmax], 0).unwrap();
    let x = Tensor::from_vec(vec![2.0, 1.0]);
    let down = apply(&x, &[0], &Baseline::Scalar(1.5)).unwrap();
    let up = apply(&x, &[0], &Baseline::Scalar(3.0)).unwrap();
    let map = ace(&model, &singleton_graph(&model), &x, &[down, up]).unwrap();
    assert_eq!(map.predicted, 0);
    assert_eq!(map.terms[0][0].sign, 1.0);
    assert_eq!(map.terms[0][1].sign, -1.0);
    assert!(map.terms[0][0].signed() > 0.0 && map.terms[0][1].signed() < 0.0);
}

#[test]
fn graph_for_other_taps_is_refused() {
    let model = ModelBuilder::new(&[3], 0).dense(3).relu().dense(2).softmax().build().unwrap();
    let mut g = singleton_graph(&model);
    g.taps[0] += 1;
    let x = Tensor::from_vec(vec![0.0; 3]);
    assert!(matches!(ace(&model, &g, &x, &[]), Err(Error::Precondition(_))));
}

#[test]
fn mask_keeps_uncovered_features_and_refuses_wrong_labels() {
    let model = ModelBuilder::new(&[6], 2).dense(8).relu().dense(3).softmax().build().unwrap();
    let x = Tensor::from_vec(vec![0.5, -1.0, 0.2, 0.9, -0.3, 0.7]);
    let y = model.classify(&Tensor::stack(&[x.clone()]).unwrap()).unwrap()[0];
    let units = vec![vec![0, 1], vec![2], vec![3]];
    let m = find_minimal_mask(&model, &x, y, &units, &[0.1, 0.2, 0.3]).unwrap();
    assert_eq!(&m.mask.data()[4..], &[1.0, 1.0]);
    assert!(m.sufficient && m.is_one_minimal());
    assert_eq!(m.certificate.len(), m.kept_units.len());
    let wrong = (y + 1) % 3;
    assert!(matches!(
        find_minimal_mask(&model, &x, wrong, &units, &[0.1, 0.2, 0.3]),
        Err(Error::Precondition(_))
    ));
    assert!(find_minimal_mask(&model, &x, y, &units, &[0.1]).is_err());
}

/// Pixels of the digit carry more attribution than the blank corners.
#[test]
fn digit_strokes_outweigh_corners() {
    let (train, test) = common::digits_split();
    let model = common::trained_digits_mlp(&train);
    let baseline = BaselinePolicy::Zero.resolve(&train);
    let config = ExplainConfig {
        plan: InterventionPlan::single_feature(BaselinePolicy::Zero),
        epsilon: 0.05,
        kernel: Kernel::Linear,
        top_features: 3,
        find_mask: false,
    };
    let corners = [0usize, 7, 56, 63];
    let centre = [27usize, 28, 35, 36];
    let (mut c_sum, mut m_sum) = (0.0, 0.0);
    for i in 0..30 {
        let e = explain_sample(&model, &test.features.sample(i), &baseline, &config, 0).unwrap();
        let a = &e.attribution.aggregate;
        c_sum += corners.iter().map(|&j| a[j].abs()).sum::<f64>();
        m_sum += centre.iter().map(|&j| a[j].abs()).sum::<f64>();
    }
    assert!(m_sum > 10.0 * c_sum, "centre {m_sum} vs corners {c_sum}");
}
