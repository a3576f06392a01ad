//! Central finite-difference checks of the backprop gradients.
//!
//! Only `forward` is used to build the numerical estimate. ReLU, max-pool
//! and the CW runner-up selection make the loss piecewise smooth; a probe
//! whose `±h` evaluations land in a different piece than the base point is
//! retried with a smaller step.

use serde::{Deserialize, Serialize};

use super::{loss_and_logit_grad, ActivationCache, ClassifierModel, LayerSpec, LossSpec};
use crate::error::Result;
use crate::image::Image;

/// Relative errors are `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;
const STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 1e-8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, f64, f64)>,
    /// Probes where every step size crossed a kink (left unchecked).
    pub skipped: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
            skipped: 0,
        }
    }

    fn record(&mut self, idx: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some((idx, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        if other.max_rel_error >= self.max_rel_error && other.worst.is_some() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self::new()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Which piece of the piecewise-smooth loss a forward pass landed in.
fn pattern(model: &ClassifierModel, cache: &ActivationCache, label: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        match layer.spec {
            LayerSpec::Relu => out.extend(cache.activations[i].iter().map(|v| (*v > 0.0) as usize)),
            LayerSpec::MaxPool2 => out.extend(cache.pool_argmax[i].iter().flatten().copied()),
            _ => {}
        }
    }
    let logits = cache.logits();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    out.extend(order);
    out.push(label);
    out
}

fn eval(model: &ClassifierModel, x: &Image, label: usize, spec: &LossSpec) -> Result<(f64, Vec<usize>)> {
    let cache = model.forward(x)?;
    let loss = loss_and_logit_grad(cache.logits(), label, spec)?.0;
    Ok((loss, pattern(model, &cache, label)))
}

/// Compares `input_gradient` with central differences on `coords`
/// (all pixels when `None`).
pub fn check_input_gradient(
    model: &ClassifierModel,
    x: &Image,
    label: usize,
    spec: &LossSpec,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport> {
    let analytic = model.input_gradient(x, label, spec)?;
    let base = eval(model, x, label, spec)?.1;
    let all: Vec<usize> = (0..x.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut report = GradCheckReport::new();
    for &i in coords {
        let mut done = false;
        for h in STEPS {
            let mut plus = x.data().to_vec();
            plus[i] += h;
            let mut minus = x.data().to_vec();
            minus[i] -= h;
            let (lp, pp) = eval(model, &x.with_data(plus), label, spec)?;
            let (lm, pm) = eval(model, &x.with_data(minus), label, spec)?;
            if pp == base && pm == base {
                report.record(i, analytic.data[i], (lp - lm) / (2.0 * h));
                done = true;
                break;
            }
        }
        if !done {
            report.skipped += 1;
        }
    }
    Ok(report)
}

/// Compares batch-of-one parameter gradients with central differences on
/// the flat parameter indices `params`.
pub fn check_param_gradients(
    model: &ClassifierModel,
    x: &Image,
    label: usize,
    spec: &LossSpec,
    params: &[usize],
) -> Result<GradCheckReport> {
    let (_, grads) = model.parameter_gradients(std::slice::from_ref(x), &[label], spec)?;
    let analytic = grads.flat();
    let base = eval(model, x, label, spec)?.1;
    let flat = model.params_flat();
    let mut probe = model.clone();
    let mut report = GradCheckReport::new();
    for &i in params {
        let mut done = false;
        for h in STEPS {
            let mut p = flat.clone();
            p[i] += h;
            probe.set_params_flat(&p)?;
            let (lp, pp) = eval(&probe, x, label, spec)?;
            p[i] -= 2.0 * h;
            probe.set_params_flat(&p)?;
            let (lm, pm) = eval(&probe, x, label, spec)?;
            if pp == base && pm == base {
                report.record(i, analytic[i], (lp - lm) / (2.0 * h));
                done = true;
                break;
            }
        }
        if !done {
            report.skipped += 1;
        }
    }
    Ok(report)
}
