use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::kernels;
use crate::nn::layer::{Layer, LayerKind};
use crate::nn::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Output of a tapped forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub output: Tensor,
    /// Layer index → that layer's batched output.
    pub taps: BTreeMap<usize, Tensor>,
}

/// A sequential classifier whose forward pass can record selected layer
/// outputs ("taps") without affecting the result.
#[derive(Debug, Clone, PartialEq)]
pub struct TappedModel {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    taps: Vec<usize>,
    seed: u64,
}

impl TappedModel {
    /// Validates the layer chain and taps every representation-changing
    /// block at its post-activation output.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let taps = Self::default_taps(&layers);
        Self::with_taps(input_shape, layers, taps, seed)
    }

    pub fn with_taps(
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
        taps: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model has no layers".into()));
        }
        if taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "tap points must be strictly increasing: {taps:?}"
            )));
        }
        if let Some(&t) = taps.iter().find(|&&t| t >= layers.len()) {
            return Err(Error::InvalidArgument(format!(
                "tap point {t} out of range for {} layers",
                layers.len()
            )));
        }
        let model = Self {
            input_shape,
            layers,
            taps,
            seed,
        };
        model.layer_shapes()?;
        Ok(model)
    }

    /// Post-activation outputs of dense/conv/pool layers. A layer followed by
    /// an activation is tapped at the activation. A model without such layers
    /// taps its first layer.
    pub fn default_taps(layers: &[Layer]) -> Vec<usize> {
        let mut taps = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            if !layer.kind().is_transform() {
                continue;
            }
            let next_is_act = layers
                .get(i + 1)
                .is_some_and(|l| l.kind().is_activation());
            taps.push(if next_is_act { i + 1 } else { i });
        }
        if taps.is_empty() {
            taps.push(0);
        }
        taps
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(i, &shape)?;
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layer_shapes()
            .expect("validated at construction")
            .pop()
            .unwrap_or_default()
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape().iter().product()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != self.input_shape.len() + 1
            || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(Error::LayerShape {
                layer: 0,
                kind: self.layers[0].kind().name(),
                expected: format!("[N, {:?}]", self.input_shape),
                got: format!("{:?}", batch.shape()),
            });
        }
        Ok(())
    }

    /// Forward pass recording every tap point.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardPass> {
        self.check_batch(batch)?;
        let mut taps = BTreeMap::new();
        let mut next_tap = self.taps.iter().peekable();
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&x);
            if next_tap.peek() == Some(&&i) {
                taps.insert(i, x.clone());
                next_tap.next();
            }
        }
        Ok(ForwardPass { output: x, taps })
    }

    /// Forward pass without observation.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        Ok(self
            .layers
            .iter()
            .fold(batch.clone(), |x, layer| layer.forward(&x)))
    }

    pub fn classify(&self, batch: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict(batch)?.argmax_rows())
    }

    /// Class probabilities; logits are softmaxed unless the model ends in a
    /// softmax layer already.
    pub fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        let out = self.predict(batch)?;
        if matches!(self.layers.last(), Some(Layer::Softmax)) {
            return Ok(out);
        }
        let width = out.row_len();
        Tensor::new(out.shape().to_vec(), kernels::softmax_rows(out.data(), width))
    }

    /// Runs layers `from..to` on an intermediate batch.
    pub fn forward_range(&self, x: &Tensor, from: usize, to: usize) -> Tensor {
        self.layers[from..to]
            .iter()
            .fold(x.clone(), |x, layer| layer.forward(&x))
    }

    /// Number of layers that produce logits (a trailing softmax is excluded).
    pub fn logits_end(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Softmax) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn flops(&self) -> u64 {
        let shapes = self.layer_shapes().expect("validated at construction");
        self.layers
            .iter()
            .zip(&shapes)
            .map(|(l, s)| l.flops(s))
            .sum()
    }

    /// Records layers `0..end` on `tape`, registering parameters under keys
    /// `key_offset..`. Returns the output var and the parameter vars.
    pub fn record(&self, tape: &mut Tape, x: Var, end: usize, key_offset: usize) -> (Var, Vec<Var>) {
        let mut key = key_offset;
        let mut all = Vec::new();
        let mut h = x;
        for layer in &self.layers[..end] {
            let vars: Vec<Var> = layer
                .params()
                .into_iter()
                .map(|p| {
                    let v = tape.param(key, p.clone());
                    key += 1;
                    v
                })
                .collect();
            h = layer.record(tape, h, &vars);
            all.extend(vars);
        }
        (h, all)
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }
}

/// Fluent constructor that tracks shapes and seeds initialisation.
pub struct ModelBuilder {
    input_shape: Vec<usize>,
    current: Vec<usize>,
    layers: Vec<Layer>,
    rng: ChaCha8Rng,
    seed: u64,
}

impl ModelBuilder {
    pub fn new(input_shape: &[usize], seed: u64) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            current: input_shape.to_vec(),
            layers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    fn push(mut self, layer: Layer) -> Self {
        if let Ok(s) = layer.output_shape(self.layers.len(), &self.current) {
            self.current = s;
        }
        self.layers.push(layer);
        self
    }

    pub fn dense(mut self, out: usize) -> Self {
        let fan_in = self.current.iter().product();
        let layer = Layer::dense(fan_in, out, &mut self.rng);
        self.push(layer)
    }

    pub fn conv(mut self, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let in_ch = self.current.first().copied().unwrap_or(1);
        let layer = Layer::conv2d(in_ch, out_ch, kernel, stride, padding, &mut self.rng);
        self.push(layer)
    }

    pub fn relu(self) -> Self {
        self.push(Layer::Relu)
    }

    pub fn sigmoid(self) -> Self {
        self.push(Layer::Sigmoid)
    }

    pub fn maxpool(self, size: usize) -> Self {
        self.push(Layer::MaxPool2d { size })
    }

    pub fn flatten(self) -> Self {
        self.push(Layer::Flatten)
    }

    pub fn softmax(self) -> Self {
        self.push(Layer::Softmax)
    }

    pub fn layer(self, layer: Layer) -> Self {
        self.push(layer)
    }

    pub fn build(self) -> Result<TappedModel> {
        TappedModel::new(self.input_shape, self.layers, self.seed)
    }
}
