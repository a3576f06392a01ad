//! Norm-bounded steps and projections.

use super::constraints::Step;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::GradientField;

fn check(x: &Image, g: &GradientField) -> Result<()> {
    if x.shape() != g.shape() {
        return Err(Error::Dimension(format!(
            "gradient {:?} does not match image {:?}",
            g.shape(),
            x.shape()
        )));
    }
    Ok(())
}

/// `sign(v)` with `sign(0) = 0`.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clip(x + ε · sign(g))`.
pub fn fgsm(x: &Image, g: &GradientField, eps: f64) -> Result<Image> {
    check(x, g)?;
    let data = x
        .data()
        .iter()
        .zip(&g.data)
        .map(|(v, gi)| (v + eps * sign(*gi)).clamp(0.0, 1.0))
        .collect();
    Ok(x.with_data(data))
}

/// `clip(x + ε · g / ‖g‖)`; a zero gradient returns `x` flagged degenerate.
pub fn fgm(x: &Image, g: &GradientField, eps: f64) -> Result<Step> {
    check(x, g)?;
    let norm = g.norm();
    if norm == 0.0 {
        return Ok(Step {
            image: x.clone(),
            degenerate: true,
            duals: None,
        });
    }
    let data = x
        .data()
        .iter()
        .zip(&g.data)
        .map(|(v, gi)| (v + eps * gi / norm).clamp(0.0, 1.0))
        .collect();
    Ok(Step {
        image: x.with_data(data),
        degenerate: false,
        duals: None,
    })
}

/// Projects `y` onto `{‖y − x0‖∞ ≤ ε}` in place.
pub fn project_linf(x0: &[f64], y: &mut [f64], eps: f64) {
    for (v, o) in y.iter_mut().zip(x0) {
        *v = v.clamp(o - eps, o + eps);
    }
}

/// Projects `y` onto `{‖y − x0‖₂ ≤ ε}` in place.
pub fn project_l2(x0: &[f64], y: &mut [f64], eps: f64) {
    let dist = y.iter().zip(x0).map(|(v, o)| (v - o) * (v - o)).sum::<f64>().sqrt();
    if dist > eps {
        let s = eps / dist;
        for (v, o) in y.iter_mut().zip(x0) {
            *v = o + (*v - o) * s;
        }
    }
}
