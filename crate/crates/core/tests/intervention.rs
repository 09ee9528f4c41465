use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracer_core::intervention::{
    apply, check_isolation, generate, Baseline, BaselinePolicy, InterventionPlan, Strategy,
};
use tracer_core::nn::{Layer, ModelBuilder, TappedModel};
use tracer_core::Tensor;

fn coalitions(count: usize, min_size: usize, max_size: usize) -> InterventionPlan {
    InterventionPlan {
        strategy: Strategy::CoalitionSampling { count, min_size, max_size },
        baseline: BaselinePolicy::Zero,
    }
}

#[test]
fn patches_tile_every_pixel_of_every_channel() {
    let plan = InterventionPlan::patches(3, BaselinePolicy::Zero);
    let sets = plan.index_sets(&[2, 8, 8], 0).unwrap();
    // starts 0, 3 and the clamped 5 on each axis
    assert_eq!(sets.len(), 9);
    let mut hit = [0usize; 128];
    for s in &sets {
        assert_eq!(s.len(), 2 * 9);
        for &i in s {
            hit[i] += 1;
        }
    }
    assert!(hit.iter().all(|&h| h > 0));
    assert!(plan.index_sets(&[2, 2], 0).is_err());
}

#[test]
fn coalitions_are_seeded_unique_and_covering() {
    let plan = coalitions(30, 2, 4);
    let a = plan.index_sets(&[12], 5).unwrap();
    assert_eq!(a, plan.index_sets(&[12], 5).unwrap());
    assert_ne!(a, plan.index_sets(&[12], 6).unwrap());
    let mut sorted = a.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), a.len());
    for i in 0..12 {
        assert!(a.iter().any(|s| s.contains(&i)));
    }
    assert!(coalitions(3, 0, 2).index_sets(&[5], 0).is_err());
    assert!(coalitions(3, 2, 9).index_sets(&[5], 0).is_err());
}

#[test]
fn out_of_range_index_is_rejected() {
    let x = Tensor::from_vec(vec![1.0; 4]);
    assert!(apply(&x, &[4], &Baseline::Scalar(0.0)).is_err());
    let short = Baseline::PerFeature(Arc::new(vec![0.0; 3]));
    assert!(apply(&x, &[0], &short).is_err());
}

/// For an affine model the output shift equals `W (x' - x)` exactly up to rounding.
#[test]
fn affine_model_responds_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w: Vec<f64> = (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let layer = Layer::Dense {
        weight: Tensor::new(vec![3, 5], w.clone()).unwrap(),
        bias: Tensor::from_vec(vec![0.1, -0.2, 0.3]),
    };
    let model = TappedModel::new(vec![5], vec![layer], 0).unwrap();
    let x = Tensor::from_vec((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let plan = InterventionPlan::single_feature(BaselinePolicy::Zero);
    for iv in generate(&x, &plan, &Baseline::Scalar(0.5), 0).unwrap() {
        let i = iv.indices[0];
        let both = Tensor::stack(&[x.clone(), iv.sample.clone()]).unwrap();
        let out = model.predict(&both).unwrap();
        for o in 0..3 {
            let expect = w[o * 5 + i] * (0.5 - x.data()[i]);
            assert!((out.row(1)[o] - out.row(0)[o] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn isolation_holds_on_a_random_network() {
    let model = ModelBuilder::new(&[1, 6, 6], 3)
        .conv(2, 3, 1, 1)
        .relu()
        .flatten()
        .dense(4)
        .softmax()
        .build()
        .unwrap();
    let x = Tensor::new(vec![1, 6, 6], (0..36).map(|i| i as f64 / 36.0).collect()).unwrap();
    let plan = InterventionPlan::patches(2, BaselinePolicy::Zero);
    for iv in generate(&x, &plan, &Baseline::Scalar(0.0), 0).unwrap() {
        assert!(check_isolation(&model, &x, &iv).unwrap().passed());
    }
}

proptest! {
    #[test]
    fn substitution_touches_only_the_index_set(
        values in proptest::collection::vec(-3.0f64..3.0, 1..20),
        picks in proptest::collection::vec(any::<prop::sample::Index>(), 0..6),
        b in -1.0f64..1.0,
    ) {
        let d = values.len();
        let x = Tensor::from_vec(values.clone());
        let idx: Vec<usize> = picks.iter().map(|p| p.index(d)).collect();
        let iv = apply(&x, &idx, &Baseline::Scalar(b)).unwrap();
        for i in 0..d {
            let expect = if idx.contains(&i) { b } else { values[i] };
            prop_assert_eq!(iv.sample.data()[i].to_bits(), expect.to_bits());
        }
        prop_assert!(iv.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(iv.is_null(), idx.is_empty());
    }
}
