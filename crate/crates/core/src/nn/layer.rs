use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeom};
use crate::nn::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    Sigmoid,
    Maxpool2d,
    Flatten,
    Softmax,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Maxpool2d => "maxpool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Layers that compute a new representation (as opposed to activations).
    pub fn is_transform(self) -> bool {
        matches!(
            self,
            LayerKind::Dense | LayerKind::Conv2d | LayerKind::Maxpool2d
        )
    }

    pub fn is_activation(self) -> bool {
        matches!(
            self,
            LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Softmax
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `weight: [out, in]`, `bias: [out]`.
    Dense { weight: Tensor, bias: Tensor },
    /// `weight: [out_ch, in_ch, k, k]`, `bias: [out_ch]`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    Sigmoid,
    /// Non-overlapping window, stride equals `size`.
    MaxPool2d { size: usize },
    Flatten,
    Softmax,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl Layer {
    /// Dense layer with fan-in scaled uniform weights and zero bias.
    pub fn dense(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Layer::Dense {
            weight: uniform(&[fan_out, fan_in], bound, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn conv2d(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        Layer::Conv2d {
            weight: uniform(&[out_ch, in_ch, kernel, kernel], bound, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense { .. } => LayerKind::Dense,
            Layer::Conv2d { .. } => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::Sigmoid => LayerKind::Sigmoid,
            Layer::MaxPool2d { .. } => LayerKind::Maxpool2d,
            Layer::Flatten => LayerKind::Flatten,
            Layer::Softmax => LayerKind::Softmax,
        }
    }

    /// Per-sample output shape; `index` is only used to label errors.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |expected: String| Error::LayerShape {
            layer: index,
            kind: self.kind().name(),
            expected,
            got: format!("{input:?}"),
        };
        match self {
            Layer::Dense { weight, .. } => {
                let fan_in = weight.shape()[1];
                if input != [fan_in] {
                    return Err(err(format!("[{fan_in}]")));
                }
                Ok(vec![weight.shape()[0]])
            }
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let ws = weight.shape();
                if input.len() != 3 || input[0] != ws[1] {
                    return Err(err(format!("[{}, H, W]", ws[1])));
                }
                let k = ws[2];
                if input[1] + 2 * padding < k || input[2] + 2 * padding < k || *stride == 0 {
                    return Err(err(format!("spatial size >= kernel {k}")));
                }
                Ok(vec![
                    ws[0],
                    (input[1] + 2 * padding - k) / stride + 1,
                    (input[2] + 2 * padding - k) / stride + 1,
                ])
            }
            Layer::MaxPool2d { size } => {
                if input.len() != 3 || *size == 0 || input[1] < *size || input[2] < *size {
                    return Err(err(format!("[C, H, W] with H, W >= {size}")));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Relu | Layer::Sigmoid | Layer::Softmax => Ok(input.to_vec()),
        }
    }

    /// Batched forward pass; `x` has a leading batch dimension.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let n = x.rows();
        match self {
            Layer::Dense { weight, bias } => {
                let (fan_out, fan_in) = (weight.shape()[0], weight.shape()[1]);
                let y = kernels::dense_forward(
                    x.data(),
                    n,
                    fan_in,
                    weight.data(),
                    bias.data(),
                    fan_out,
                );
                Tensor::new(vec![n, fan_out], y).expect("dense")
            }
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let geom = conv_geom(x.shape(), weight.shape(), *stride, *padding);
                let (ho, wo) = geom.out_hw();
                let y = kernels::conv2d_forward(x.data(), weight.data(), bias.data(), geom);
                Tensor::new(vec![n, geom.c_out, ho, wo], y).expect("conv")
            }
            Layer::Relu => x.map(|v| v.max(0.0)),
            Layer::Sigmoid => x.map(kernels::sigmoid),
            Layer::MaxPool2d { size } => {
                let s = x.shape();
                let (y, _) = kernels::maxpool_forward(x.data(), s[0], s[1], s[2], s[3], *size);
                Tensor::new(vec![s[0], s[1], s[2] / size, s[3] / size], y).expect("pool")
            }
            Layer::Flatten => x.flatten_rows(),
            Layer::Softmax => {
                let y = kernels::softmax_rows(x.data(), x.row_len());
                Tensor::new(x.shape().to_vec(), y).expect("softmax")
            }
        }
    }

    /// Records this layer on a tape. `params` are this layer's parameter vars
    /// in [`Layer::params`] order.
    pub fn record(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Var {
        match self {
            Layer::Dense { .. } => tape.dense(x, params[0], params[1]),
            Layer::Conv2d {
                stride, padding, ..
            } => tape.conv2d(x, params[0], params[1], *stride, *padding),
            Layer::Relu => tape.relu(x),
            Layer::Sigmoid => tape.sigmoid(x),
            Layer::MaxPool2d { size } => tape.maxpool2d(x, *size),
            Layer::Flatten => {
                let v = tape.value(x);
                let shape = vec![v.rows(), v.row_len()];
                tape.reshape(x, shape)
            }
            Layer::Softmax => tape.softmax(x),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                vec![weight, bias]
            }
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Analytic FLOP count for one sample. Dense: `in·out + out`; conv:
    /// `k²·Cin·Cout·Hout·Wout + Cout·Hout·Wout`; elementwise layers count one
    /// op per output, pooling `k²` per output, softmax three per output.
    pub fn flops(&self, output: &[usize]) -> u64 {
        let out: u64 = output.iter().product::<usize>() as u64;
        match self {
            Layer::Dense { weight, .. } => {
                let (o, i) = (weight.shape()[0] as u64, weight.shape()[1] as u64);
                i * o + o
            }
            Layer::Conv2d { weight, .. } => {
                let ws = weight.shape();
                let (k, cin) = (ws[2] as u64, ws[1] as u64);
                k * k * cin * out + out
            }
            Layer::Relu | Layer::Sigmoid => out,
            Layer::MaxPool2d { size } => (*size * *size) as u64 * out,
            Layer::Softmax => 3 * out,
            Layer::Flatten => 0,
        }
    }
}

fn conv_geom(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> ConvGeom {
    ConvGeom {
        n: xs[0],
        c_in: xs[1],
        h: xs[2],
        w: xs[3],
        c_out: ws[0],
        k: ws[2],
        stride,
        pad,
    }
}
