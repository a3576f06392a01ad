//! GradCAM++ class-activation maps.
//!
//! For feature maps `A^k` (the rectified output of the chosen conv layer)
//! and `g = ∂S^c/∂A^k` of the pre-softmax class score,
//!
//! ```text
//! α^k_ij = g² / (2g² + Σ_ab A^k_ab · g³)      (0/0 → 0)
//! w_k    = Σ_ij α^k_ij · relu(g^k_ij)
//! map    = relu(Σ_k w_k A^k)
//! ```
//!
//! The map is bilinearly resized to the image and min-max normalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{BinaryMask, MaskSource};
use crate::nn::{ClassifierModel, LayerSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major scores in `[0, 1]`.
    pub values: Vec<f64>,
    /// Index of the conv layer the map was taken from.
    pub layer: usize,
    pub class: usize,
}

/// Intermediate GradCAM++ quantities on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCamTerms {
    pub layer: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major feature maps `A^k`.
    pub activations: Vec<f64>,
    /// `∂S^c/∂A^k`, same layout.
    pub gradients: Vec<f64>,
    pub alpha: Vec<f64>,
    pub weights: Vec<f64>,
    /// `relu(Σ_k w_k A^k)` at feature resolution.
    pub raw: Vec<f64>,
}

/// Index into the activation cache holding the rectified output of conv `layer`.
fn feature_slot(model: &ClassifierModel, layer: usize) -> usize {
    match model.layers.get(layer + 1).map(|l| &l.spec) {
        Some(LayerSpec::Relu) => layer + 2,
        _ => layer + 1,
    }
}

/// GradCAM++ terms for `class` at conv layer `layer` (the last conv layer when `None`).
pub fn gradcampp_terms(model: &ClassifierModel, x: &Image, class: usize, layer: Option<usize>) -> Result<GradCamTerms> {
    let last = model
        .last_conv_index()
        .ok_or_else(|| Error::UnsupportedModel("GradCAM++ needs a convolutional layer".into()))?;
    let layer = layer.unwrap_or(last);
    if !matches!(model.layers.get(layer).map(|l| &l.spec), Some(LayerSpec::Conv2d { .. })) {
        return Err(Error::UnsupportedModel(format!("layer {layer} is not a conv layer")));
    }
    if class >= model.classes {
        return Err(Error::InvalidLabel {
            label: class,
            classes: model.classes,
        });
    }
    let cache = model.forward(x)?;
    let mut seed = vec![0.0; model.classes];
    seed[class] = 1.0;
    let back = model.backward(&cache, &seed, false);
    let slot = feature_slot(model, layer);
    let shape = cache.shapes[slot];
    let a = cache.activations[slot].clone();
    let g = back.activation_grads[slot].clone();
    let plane = shape.height * shape.width;

    let mut alpha = vec![0.0; a.len()];
    let mut weights = vec![0.0; shape.channels];
    for k in 0..shape.channels {
        let range = k * plane..(k + 1) * plane;
        let sum_a: f64 = a[range.clone()].iter().sum();
        for i in range {
            let g2 = g[i] * g[i];
            let denom = 2.0 * g2 + sum_a * g2 * g[i];
            alpha[i] = if denom != 0.0 { g2 / denom } else { 0.0 };
            weights[k] += alpha[i] * g[i].max(0.0);
        }
    }
    let mut raw = vec![0.0; plane];
    for (k, w) in weights.iter().enumerate() {
        for (r, v) in raw.iter_mut().zip(&a[k * plane..(k + 1) * plane]) {
            *r += w * v;
        }
    }
    for r in &mut raw {
        *r = r.max(0.0);
    }
    Ok(GradCamTerms {
        layer,
        channels: shape.channels,
        height: shape.height,
        width: shape.width,
        activations: a,
        gradients: g,
        alpha,
        weights,
        raw,
    })
}

/// Bilinear resize with half-pixel centers (edge samples clamp).
pub fn bilinear_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let coord = |d: usize, s: usize, n: usize| {
        let v = ((d as f64 + 0.5) * s as f64 / n as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let i0 = v.floor() as usize;
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, v - i0 as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for r in 0..dh {
        let (r0, r1, fr) = coord(r, sh, dh);
        for c in 0..dw {
            let (c0, c1, fc) = coord(c, sw, dw);
            let top = src[r0 * sw + c0] * (1.0 - fc) + src[r0 * sw + c1] * fc;
            let bottom = src[r1 * sw + c0] * (1.0 - fc) + src[r1 * sw + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Rescales to `[0, 1]`; a constant map becomes all ones (positive) or all zeros.
pub fn min_max_normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    if hi > lo {
        for v in values.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        let fill = if hi > 0.0 { 1.0 } else { 0.0 };
        values.iter_mut().for_each(|v| *v = fill);
    }
}

pub fn gradcampp_map(model: &ClassifierModel, x: &Image, class: usize) -> Result<SaliencyMap> {
    gradcampp_map_at(model, x, class, None)
}

pub fn gradcampp_map_at(model: &ClassifierModel, x: &Image, class: usize, layer: Option<usize>) -> Result<SaliencyMap> {
    let terms = gradcampp_terms(model, x, class, layer)?;
    let mut values = bilinear_resize(&terms.raw, terms.height, terms.width, x.height(), x.width());
    min_max_normalize(&mut values);
    Ok(SaliencyMap {
        height: x.height(),
        width: x.width(),
        values,
        layer: terms.layer,
        class,
    })
}

/// `map > τ`, cell by cell.
pub fn threshold_mask(map: &SaliencyMap, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("saliency threshold must lie in [0, 1], got {tau}")));
    }
    let data = map.values.iter().map(|v| *v > tau).collect();
    BinaryMask::new(map.height, map.width, data, tau, MaskSource::Saliency)
}
