//! Reverse-mode differentiation over a linear tape of batched tensor ops.
//!
//! Nodes are appended in evaluation order, so replaying the tape backwards is
//! a valid topological order. Parameters enter as leaves tagged with a caller
//! chosen key; [`Tape::backward`] returns one gradient per registered key.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        winners: Vec<usize>,
    },
    Reshape(Var),
    Softmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Sqrt(Var),
    RowSum(Var),
    Mean(Var),
    ConcatCols(Var, Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SigmoidBce {
        logits: Var,
        target: f64,
    },
    Argmax,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Dense { .. } => "dense",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Abs(_) => "abs",
            Op::Sqrt(_) => "sqrt",
            Op::RowSum(_) => "row_sum",
            Op::Mean(_) => "mean",
            Op::ConcatCols(..) => "concat",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SigmoidBce { .. } => "sigmoid_bce",
            Op::Argmax => "argmax",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients keyed by the parameter key passed to [`Tape::param`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_key: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, key: usize) -> Option<&Tensor> {
        self.by_key.get(&key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_key.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a constant input (no gradient is reported for it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records a trainable parameter under `key`.
    pub fn param(&mut self, key: usize, t: Tensor) -> Var {
        self.push(t, Op::Param(key))
    }

    /// `y = x Wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (fan_out, fan_in) = (wv.shape()[0], wv.shape()[1]);
        let n = xv.rows();
        assert_eq!(xv.row_len(), fan_in, "dense: input width");
        let y = kernels::dense_forward(xv.data(), n, fan_in, wv.data(), bv.data(), fan_out);
        let y = Tensor::new(vec![n, fan_out], y).expect("dense output");
        self.push(y, Op::Dense { x, w, b })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let xs = xv.shape();
        let ws = wv.shape();
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let y = kernels::conv2d_forward(xv.data(), wv.data(), bv.data(), geom);
        let y = Tensor::new(vec![geom.n, geom.c_out, ho, wo], y).expect("conv output");
        self.push(y, Op::Conv2d { x, w, b, geom })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(kernels::sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn maxpool2d(&mut self, x: Var, size: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (y, winners) = kernels::maxpool_forward(xv.data(), n, c, h, w, size);
        let y = Tensor::new(vec![n, c, h / size, w / size], y).expect("pool output");
        self.push(y, Op::MaxPool { x, winners })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let y = self.value(x).clone().reshape(shape).expect("reshape");
        self.push(y, Op::Reshape(x))
    }

    /// Softmax over each row's flattened trailing dimensions.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let y = kernels::softmax_rows(xv.data(), xv.row_len());
        let y = Tensor::new(xv.shape().to_vec(), y).expect("softmax");
        self.push(y, Op::Softmax(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q);
        self.push(y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |p, q| p - q);
        self.push(y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q);
        self.push(y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let y = self.value(a).map(|v| v * k);
        self.push(y, Op::Scale(a, k))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::abs);
        self.push(y, Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::sqrt);
        self.push(y, Op::Sqrt(a))
    }

    /// Sums each row: `[N, ...] -> [N]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let y: Vec<f64> = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
        self.push(Tensor::from_vec(y), Op::RowSum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let y = v.sum() / v.len() as f64;
        self.push(Tensor::scalar(y), Op::Mean(a))
    }

    /// Concatenates two `[N, *]` matrices along the feature axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat: row count");
        let (wa, wb) = (av.row_len(), bv.row_len());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..av.rows() {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let y = Tensor::new(vec![av.rows(), wa + wb], data).expect("concat");
        self.push(y, Op::ConcatCols(a, b))
    }

    /// Mean cross-entropy of row-softmaxed logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let width = lv.row_len();
        assert_eq!(lv.rows(), labels.len(), "cross-entropy: label count");
        let probs = kernels::softmax_rows(lv.data(), width);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= labels.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant target.
    pub fn sigmoid_bce(&mut self, logits: Var, target: f64) -> Var {
        let lv = self.value(logits);
        // softplus(z) - t z
        let loss = lv
            .data()
            .iter()
            .map(|&z| z.max(0.0) + (-z.abs()).exp().ln_1p() - target * z)
            .sum::<f64>()
            / lv.len() as f64;
        self.push(Tensor::scalar(loss), Op::SigmoidBce { logits, target })
    }

    /// One-hot of the row maxima; has no gradient.
    pub fn argmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let width = xv.row_len();
        let mut y = Tensor::zeros(&[xv.rows(), width]);
        for (i, j) in xv.argmax_rows().into_iter().enumerate() {
            y.data_mut()[i * width + j] = 1.0;
        }
        self.push(y, Op::Argmax)
    }

    /// Back-propagates from a scalar `loss`. Every registered parameter gets
    /// an entry, zero when it does not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        let mut out = Gradients::default();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            let Some(g) = grads[idx].take() else {
                if let Op::Param(key) = node.op {
                    out.by_key
                        .entry(key)
                        .or_insert_with(|| Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => match out.by_key.get_mut(key) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.by_key.insert(*key, g);
                    }
                },
                Op::Argmax => return Err(Error::NonDifferentiable(node.op.name())),
                op => {
                    for (parent, pg) in self.local_grads(op, &node.value, &g) {
                        accumulate(&mut grads[parent.0], pg);
                    }
                }
            }
        }
        Ok(out)
    }

    fn local_grads(&self, op: &Op, y: &Tensor, g: &Tensor) -> Vec<(Var, Tensor)> {
        match op {
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (fan_out, fan_in) = (wv.shape()[0], wv.shape()[1]);
                let (dx, dw, db) = kernels::dense_backward(
                    g.data(),
                    xv.data(),
                    xv.rows(),
                    fan_in,
                    wv.data(),
                    fan_out,
                );
                vec![
                    (*x, with_shape(xv, dx)),
                    (*w, with_shape(wv, dw)),
                    (*b, with_shape(self.value(*b), db)),
                ]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (dx, dw, db) = kernels::conv2d_backward(g.data(), xv.data(), wv.data(), *geom);
                vec![
                    (*x, with_shape(xv, dx)),
                    (*w, with_shape(wv, dw)),
                    (*b, with_shape(self.value(*b), db)),
                ]
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 });
                vec![(*x, d)]
            }
            Op::Sigmoid(x) => vec![(*x, y.zip_map(g, |s, gv| gv * s * (1.0 - s)))],
            Op::MaxPool { x, winners } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (&src, &gv) in winners.iter().zip(g.data()) {
                    d.data_mut()[src] += gv;
                }
                vec![(*x, d)]
            }
            Op::Reshape(x) => {
                let d = g
                    .clone()
                    .reshape(self.value(*x).shape().to_vec())
                    .expect("reshape grad");
                vec![(*x, d)]
            }
            Op::Softmax(x) => {
                let width = y.row_len();
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let ys = &y.data()[r * width..(r + 1) * width];
                    let gs = &g.data()[r * width..(r + 1) * width];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..width {
                        d.data_mut()[r * width + j] = ys[j] * (gs[j] - dot);
                    }
                }
                vec![(*x, d)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.zip_map(bv, |gv, q| gv * q)),
                    (*b, g.zip_map(av, |gv, p| gv * p)),
                ]
            }
            Op::Scale(a, k) => vec![(*a, g.map(|v| v * k))],
            Op::Abs(a) => {
                let d = self.value(*a).zip_map(g, |v, gv| gv * v.signum());
                vec![(*a, d)]
            }
            Op::Sqrt(a) => vec![(*a, y.zip_map(g, |s, gv| gv * 0.5 / s))],
            Op::RowSum(a) => {
                let av = self.value(*a);
                let w = av.row_len();
                let mut d = Tensor::zeros(av.shape());
                for (r, &gv) in g.data().iter().enumerate() {
                    for v in &mut d.data_mut()[r * w..(r + 1) * w] {
                        *v = gv;
                    }
                }
                vec![(*a, d)]
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let k = g.data()[0] / av.len() as f64;
                vec![(*a, Tensor::full(av.shape(), k))]
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (wa, wb) = (av.row_len(), bv.row_len());
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for r in 0..av.rows() {
                    let gs = g.row(r);
                    da.extend_from_slice(&gs[..wa]);
                    db.extend_from_slice(&gs[wa..wa + wb]);
                }
                vec![(*a, with_shape(av, da)), (*b, with_shape(bv, db))]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let w = lv.row_len();
                let k = g.data()[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (r, &lab) in labels.iter().enumerate() {
                    d[r * w + lab] -= 1.0;
                }
                for v in &mut d {
                    *v *= k;
                }
                vec![(*logits, with_shape(lv, d))]
            }
            Op::SigmoidBce { logits, target } => {
                let lv = self.value(*logits);
                let k = g.data()[0] / lv.len() as f64;
                vec![(*logits, lv.map(|z| k * (kernels::sigmoid(z) - target)))]
            }
            Op::Leaf | Op::Param(_) | Op::Argmax => Vec::new(),
        }
    }
}

fn with_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Evaluates `loss_fn` on a fresh tape with `params` registered under keys
/// `0..params.len()` and returns the loss value with its gradients.
pub fn gradients<F>(params: &[&Tensor], loss_fn: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(k, p)| tape.param(k, (*p).clone()))
        .collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}
