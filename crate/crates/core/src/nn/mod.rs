//! A small double-precision convolutional classifier with exact backprop.
//!
//! Tensors are stored channel-first (`C × H × W`) inside the network; the
//! [`Image`] boundary is channel-last and is transposed on the way in and
//! out. Convolutions are stride 1 with "same" zero padding, pooling is
//! non-overlapping 2×2 max.

pub mod gradcheck;
mod loss;
mod model_file;
mod train;

pub use loss::{loss_and_logit_grad, LossKind, LossSpec};
pub use model_file::{load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION};
pub use train::{accuracy, train, EpochStats, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Shape of an activation, channel-first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn flat(len: usize) -> Self {
        Self::new(len, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    MaxPool2,
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => in_channels * out_channels * kernel * kernel,
            LayerSpec::Dense { inputs, outputs } => inputs * outputs,
            _ => 0,
        }
    }

    fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { out_channels, .. } => out_channels,
            LayerSpec::Dense { outputs, .. } => outputs,
            _ => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerSpec::Dense { inputs, .. } => inputs,
            _ => 0,
        }
    }

    /// Output shape for `input`, or an error if the layer cannot accept it.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if input.channels != in_channels {
                    return Err(Error::Dimension(format!(
                        "conv expects {in_channels} channels, got {}",
                        input.channels
                    )));
                }
                if kernel % 2 == 0 || kernel == 0 {
                    return Err(Error::Dimension(format!(
                        "same-padded conv needs an odd kernel, got {kernel}"
                    )));
                }
                Ok(Shape::new(out_channels, input.height, input.width))
            }
            LayerSpec::Relu => Ok(input),
            LayerSpec::MaxPool2 => {
                if input.height < 2 || input.width < 2 {
                    return Err(Error::Dimension(format!(
                        "cannot 2x2-pool a {}x{} map",
                        input.height, input.width
                    )));
                }
                Ok(Shape::new(input.channels, input.height / 2, input.width / 2))
            }
            LayerSpec::Flatten => Ok(Shape::flat(input.len())),
            LayerSpec::Dense { inputs, outputs } => {
                if input.len() != inputs {
                    return Err(Error::Dimension(format!(
                        "dense layer expects {inputs} inputs, got {}",
                        input.len()
                    )));
                }
                Ok(Shape::flat(outputs))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeroed(spec: LayerSpec) -> Self {
        Self {
            spec,
            weights: vec![0.0; spec.weight_len()],
            bias: vec![0.0; spec.bias_len()],
        }
    }

    pub fn has_params(&self) -> bool {
        !self.weights.is_empty()
    }
}

/// Gradients for one layer, laid out like [`Layer::weights`] / [`Layer::bias`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(layer: &Layer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }

    fn add_scaled(&mut self, other: &LayerGrad, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += scale * b;
        }
    }
}

/// Per-layer parameter gradients of a whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrads {
    pub fn zeros_like(model: &ClassifierModel) -> Self {
        Self {
            layers: model.layers.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// ∂loss/∂x for one input image, channel-last like the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientField {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl GradientField {
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
}

/// Everything the backward pass needs: the input to each layer plus the logits.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    /// `inputs[i]` is the input of layer `i`; the final entry is the logits.
    pub activations: Vec<Vec<f64>>,
    pub shapes: Vec<Shape>,
    /// Flat argmax index into the pool input, per pool output cell.
    pool_argmax: Vec<Option<Vec<usize>>>,
}

impl ActivationCache {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("cache always holds logits")
    }
}

/// Result of one backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    /// ∂loss/∂(input of layer i) for every layer, plus ∂loss/∂logits last.
    pub activation_grads: Vec<Vec<f64>>,
    pub params: Option<ParamGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    /// (height, width, channels) of accepted images.
    pub input_shape: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<Layer>,
}

impl ClassifierModel {
    /// Zero-initialised model after validating that `specs` chain from
    /// `input_shape` to `classes` logits.
    pub fn zeros(input_shape: (usize, usize, usize), specs: &[LayerSpec]) -> Result<Self> {
        let (h, w, c) = input_shape;
        let mut shape = Shape::new(c, h, w);
        for spec in specs {
            shape = spec.output_shape(shape)?;
        }
        if shape.height != 1 || shape.width != 1 {
            return Err(Error::Dimension(
                "network must end in a flat logit vector".into(),
            ));
        }
        Ok(Self {
            input_shape,
            classes: shape.channels,
            layers: specs.iter().copied().map(Layer::zeroed).collect(),
        })
    }

    /// He-uniform weights, zero biases.
    pub fn he_uniform(
        input_shape: (usize, usize, usize),
        specs: &[LayerSpec],
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::zeros(input_shape, specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let fan_in = layer.spec.fan_in();
            if fan_in == 0 {
                continue;
            }
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(model)
    }

    /// conv 8@3×3 → relu → pool → conv 16@3×3 → relu → pool → flatten → dense.
    pub fn default_specs(input_shape: (usize, usize, usize), classes: usize) -> Vec<LayerSpec> {
        let (h, w, c) = input_shape;
        vec![
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: 8,
                kernel: 3,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv2d {
                in_channels: 8,
                out_channels: 16,
                kernel: 3,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 16 * (h / 4) * (w / 4),
                outputs: classes,
            },
        ]
    }

    pub fn default_architecture(
        input_shape: (usize, usize, usize),
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::he_uniform(input_shape, &Self::default_specs(input_shape, classes), seed)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "model has {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Shapes of every layer input, plus the logit shape last.
    pub fn shapes(&self) -> Vec<Shape> {
        let (h, w, c) = self.input_shape;
        let mut shape = Shape::new(c, h, w);
        let mut out = vec![shape];
        for layer in &self.layers {
            shape = layer
                .spec
                .output_shape(shape)
                .expect("validated at construction");
            out.push(shape);
        }
        out
    }

    /// Index of the last convolution layer.
    pub fn last_conv_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l.spec, LayerSpec::Conv2d { .. }))
    }

    fn image_to_tensor(&self, x: &Image) -> Result<Vec<f64>> {
        if x.shape() != self.input_shape {
            return Err(Error::Dimension(format!(
                "model expects {:?} images, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let (h, w, c) = self.input_shape;
        let mut t = vec![0.0; h * w * c];
        for (i, v) in x.data().iter().enumerate() {
            let ch = i % c;
            let pix = i / c;
            t[ch * h * w + pix] = *v;
        }
        Ok(t)
    }

    fn tensor_to_field(&self, t: &[f64]) -> GradientField {
        let (h, w, c) = self.input_shape;
        let mut data = vec![0.0; h * w * c];
        for ch in 0..c {
            for pix in 0..h * w {
                data[pix * c + ch] = t[ch * h * w + pix];
            }
        }
        GradientField {
            height: h,
            width: w,
            channels: c,
            data,
        }
    }

    pub fn forward(&self, x: &Image) -> Result<ActivationCache> {
        let input = self.image_to_tensor(x)?;
        Ok(self.forward_from(0, input))
    }

    /// Runs layers `start..` on `input` (the input of layer `start`).
    pub fn forward_from(&self, start: usize, input: Vec<f64>) -> ActivationCache {
        let shapes = self.shapes();
        assert_eq!(input.len(), shapes[start].len(), "forward_from: bad input length");
        let mut activations = Vec::with_capacity(self.layers.len() + 1 - start);
        let mut pool_argmax = Vec::with_capacity(self.layers.len() - start);
        activations.push(input);
        for (i, layer) in self.layers.iter().enumerate().skip(start) {
            let x = activations.last().unwrap();
            let (out, argmax) = layer_forward(layer, shapes[i], x);
            activations.push(out);
            pool_argmax.push(argmax);
        }
        ActivationCache {
            activations,
            shapes: shapes[start..].to_vec(),
            pool_argmax,
        }
    }

    pub fn logits(&self, x: &Image) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits().to_vec())
    }

    /// Argmax of the logits; ties go to the lowest index.
    pub fn predict(&self, x: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Backpropagates `logit_grad` through a full-model cache.
    pub fn backward(&self, cache: &ActivationCache, logit_grad: &[f64], want_params: bool) -> Backward {
        let start = self.layers.len() + 1 - cache.activations.len();
        let mut grads = vec![Vec::new(); cache.activations.len()];
        *grads.last_mut().unwrap() = logit_grad.to_vec();
        let mut params = want_params.then(|| ParamGrads::zeros_like(self));
        for li in (start..self.layers.len()).rev() {
            let local = li - start;
            let layer = &self.layers[li];
            let upstream = std::mem::take(&mut grads[local + 1]);
            let pg = params.as_mut().map(|p| &mut p.layers[li]);
            let down = layer_backward(
                layer,
                cache.shapes[local],
                &cache.activations[local],
                cache.pool_argmax[local].as_deref(),
                &upstream,
                pg,
            );
            grads[local + 1] = upstream;
            grads[local] = down;
        }
        Backward {
            activation_grads: grads,
            params,
        }
    }

    pub fn loss(&self, x: &Image, label: usize, spec: &LossSpec) -> Result<f64> {
        let cache = self.forward(x)?;
        Ok(loss_and_logit_grad(cache.logits(), label, spec)?.0)
    }

    /// Exact ∂loss/∂x.
    pub fn input_gradient(&self, x: &Image, label: usize, spec: &LossSpec) -> Result<GradientField> {
        let cache = self.forward(x)?;
        let (_, dlogits) = loss_and_logit_grad(cache.logits(), label, spec)?;
        let back = self.backward(&cache, &dlogits, false);
        Ok(self.tensor_to_field(&back.activation_grads[0]))
    }

    /// Mean loss and mean parameter gradients over a batch.
    pub fn parameter_gradients(
        &self,
        images: &[Image],
        labels: &[usize],
        spec: &LossSpec,
    ) -> Result<(f64, ParamGrads)> {
        if images.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if images.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let scale = 1.0 / images.len() as f64;
        let mut total = ParamGrads::zeros_like(self);
        let mut loss = 0.0;
        for (x, &y) in images.iter().zip(labels) {
            let cache = self.forward(x)?;
            let (l, dlogits) = loss_and_logit_grad(cache.logits(), y, spec)?;
            loss += l;
            let back = self.backward(&cache, &dlogits, true);
            for (t, g) in total.layers.iter_mut().zip(&back.params.unwrap().layers) {
                t.add_scaled(g, scale);
            }
        }
        Ok((loss * scale, total))
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn layer_forward(layer: &Layer, shape: Shape, x: &[f64]) -> (Vec<f64>, Option<Vec<usize>>) {
    match layer.spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => (
            conv_forward(
                &layer.weights,
                &layer.bias,
                x,
                in_channels,
                out_channels,
                kernel,
                shape.height,
                shape.width,
            ),
            None,
        ),
        LayerSpec::Relu => (x.iter().map(|v| v.max(0.0)).collect(), None),
        LayerSpec::MaxPool2 => {
            let (out, idx) = pool_forward(x, shape);
            (out, Some(idx))
        }
        LayerSpec::Flatten => (x.to_vec(), None),
        LayerSpec::Dense { inputs, outputs } => {
            let out = (0..outputs)
                .map(|j| {
                    let row = &layer.weights[j * inputs..(j + 1) * inputs];
                    layer.bias[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                })
                .collect();
            (out, None)
        }
    }
}

fn layer_backward(
    layer: &Layer,
    shape: Shape,
    x: &[f64],
    pool_argmax: Option<&[usize]>,
    upstream: &[f64],
    params: Option<&mut LayerGrad>,
) -> Vec<f64> {
    match layer.spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => conv_backward(
            &layer.weights,
            x,
            upstream,
            in_channels,
            out_channels,
            kernel,
            shape.height,
            shape.width,
            params,
        ),
        LayerSpec::Relu => x
            .iter()
            .zip(upstream)
            .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
            .collect(),
        LayerSpec::MaxPool2 => {
            let mut down = vec![0.0; x.len()];
            for (g, &i) in upstream.iter().zip(pool_argmax.expect("pool cache")) {
                down[i] += g;
            }
            down
        }
        LayerSpec::Flatten => upstream.to_vec(),
        LayerSpec::Dense { inputs, outputs } => {
            let mut down = vec![0.0; inputs];
            for j in 0..outputs {
                let row = &layer.weights[j * inputs..(j + 1) * inputs];
                for (d, w) in down.iter_mut().zip(row) {
                    *d += w * upstream[j];
                }
            }
            if let Some(p) = params {
                for j in 0..outputs {
                    let row = &mut p.weights[j * inputs..(j + 1) * inputs];
                    for (gw, v) in row.iter_mut().zip(x) {
                        *gw += upstream[j] * v;
                    }
                    p.bias[j] += upstream[j];
                }
            }
            down
        }
    }
}

/// Valid output range along one axis for kernel offset `d` (relative to center).
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    weights: &[f64],
    bias: &[f64],
    x: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut out = vec![0.0; cout * plane];
    for o in 0..cout {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let src = &x[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    let wt = weights[((o * cin + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let drow = &mut dst[y * w + x0..y * w + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wt * s;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    weights: &[f64],
    x: &[f64],
    upstream: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
    mut params: Option<&mut LayerGrad>,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let plane = h * w;
    let mut down = vec![0.0; cin * plane];
    for o in 0..cout {
        let up = &upstream[o * plane..(o + 1) * plane];
        if let Some(p) = params.as_mut() {
            p.bias[o] += up.iter().sum::<f64>();
        }
        for i in 0..cin {
            let src = &x[i * plane..(i + 1) * plane];
            let dsrc = &mut down[i * plane..(i + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = span(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = span(w, dx);
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wt = weights[widx];
                    let mut gw = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let urow = &up[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (u, s) in urow.iter().zip(srow) {
                            gw += u * s;
                        }
                        let drow = &mut dsrc[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (d, u) in drow.iter_mut().zip(urow) {
                            *d += wt * u;
                        }
                    }
                    if let Some(p) = params.as_mut() {
                        p.weights[widx] += gw;
                    }
                }
            }
        }
    }
    down
}

fn pool_forward(x: &[f64], shape: Shape) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = (shape.height, shape.width);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(shape.channels * oh * ow);
    let mut idx = Vec::with_capacity(out.capacity());
    for c in 0..shape.channels {
        let base = c * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

#[cfg(test)]
mod tests;
