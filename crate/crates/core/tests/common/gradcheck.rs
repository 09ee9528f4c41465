//! Central finite-difference oracle for layer gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tracer_core::nn::{Layer, Tape};
use tracer_core::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// loss = mean(layer(x) ⊙ r)
fn loss_value(layer: &Layer, x: &Tensor, r: &Tensor) -> f64 {
    let y = layer.forward(x);
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>() / y.len() as f64
}

/// Worst relative error over the input and every parameter of `layer`.
pub fn check_layer(layer: &Layer, x: &Tensor, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let y0 = layer.forward(x);
    let r = random_tensor(y0.shape(), &mut rng);

    let mut tape = Tape::new();
    let xv = tape.param(0, x.clone());
    let pvars: Vec<_> = layer
        .params()
        .iter()
        .enumerate()
        .map(|(k, p)| tape.param(k + 1, (*p).clone()))
        .collect();
    let y = layer.record(&mut tape, xv, &pvars);
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv);
    let loss = tape.mean(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst = 0.0f64;
    // input
    let gx = grads.get(0).unwrap();
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += STEP;
        let mut xm = x.clone();
        xm.data_mut()[i] -= STEP;
        let fd = (loss_value(layer, &xp, &r) - loss_value(layer, &xm, &r)) / (2.0 * STEP);
        worst = worst.max(rel_err(gx.data()[i], fd));
    }
    // parameters
    for k in 0..layer.params().len() {
        let g = grads.get(k + 1).unwrap();
        assert_eq!(g.shape(), layer.params()[k].shape());
        for i in 0..g.len() {
            let mut lp = layer.clone();
            lp.params_mut()[k].data_mut()[i] += STEP;
            let mut lm = layer.clone();
            lm.params_mut()[k].data_mut()[i] -= STEP;
            let fd = (loss_value(&lp, x, &r) - loss_value(&lm, x, &r)) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[i], fd));
        }
    }
    worst
}

pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (fd.abs() + 1e-8)
}

/// One random draw of a layer of the given kind together with a matching input.
pub fn draw(kind: &str, seed: u64) -> (Layer, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        "dense" => {
            let (i, o) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let layer = Layer::Dense {
                weight: random_tensor(&[o, i], &mut rng),
                bias: random_tensor(&[o], &mut rng),
            };
            (layer, random_tensor(&[3, i], &mut rng))
        }
        "conv2d" => {
            let (ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let k = rng.gen_range(1..4);
            let stride = rng.gen_range(1..3);
            let pad = rng.gen_range(0..2);
            let layer = Layer::Conv2d {
                weight: random_tensor(&[co, ci, k, k], &mut rng),
                bias: random_tensor(&[co], &mut rng),
                stride,
                padding: pad,
            };
            (layer, random_tensor(&[2, ci, 5, 5], &mut rng))
        }
        "relu" => (Layer::Relu, random_tensor(&[3, 7], &mut rng)),
        "sigmoid" => (Layer::Sigmoid, random_tensor(&[3, 7], &mut rng)),
        "maxpool2d" => (
            Layer::MaxPool2d { size: 2 },
            random_tensor(&[2, 2, 4, 4], &mut rng),
        ),
        "flatten" => (Layer::Flatten, random_tensor(&[2, 2, 3, 3], &mut rng)),
        "softmax" => (Layer::Softmax, random_tensor(&[3, 5], &mut rng)),
        other => panic!("unknown layer kind {other}"),
    }
}

pub const KINDS: [&str; 7] = [
    "dense",
    "conv2d",
    "relu",
    "sigmoid",
    "maxpool2d",
    "flatten",
    "softmax",
];
