//! Feasible set of the SSIM-constrained step and its exact maximizers.
//!
//! Writing `y = 1·m + z` with `z` zero-sum, the two SSIM factor bounds
//! `S1(x, y) ≥ 1 − ε1²` and `S2(x, y) ≥ 1 − ε2²` become
//!
//! ```text
//! (m − k12)²       ≤ k11      k12 = η1 μx,  k11 = μx²(η1² − 1) + c1 ε1² η1
//! ‖z − k22‖²       ≤ k21      k22 = η2 (x − 1μx),
//!                             k21 = ‖x − 1μx‖²(η2² − 1) + N c2 ε2² η2
//! ```
//!
//! with `η = 1 / (1 − ε²)`. The `N c2` term is the NMSE constant of the
//! centered images (see [`crate::quality`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::GradientField;
use crate::quality::SsimConstants;

/// Which radius formula to use for `k11` and `k21`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusForm {
    /// Radii obtained by expanding `NMSE ≤ ε²`; boundary points sit exactly
    /// on `S = 1 − ε²`.
    #[default]
    Derived,
    /// `‖x − 1μx‖² η2² + c2 ε2² η2` (and likewise for `k11`). Kept for
    /// comparison only: at `ε = 0` it still admits a ball of radius `‖x − 1μx‖`.
    Printed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintParams {
    pub eps1: f64,
    pub eps2: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub k11: f64,
    pub k12: f64,
    pub k21: f64,
    /// Sphere center for the centered part of the adversarial image.
    pub k22: Vec<f64>,
    pub n: usize,
    pub mu_x: f64,
    pub form: RadiusForm,
}

impl ConstraintParams {
    /// Admissible range for the mean of the adversarial image.
    pub fn mean_window(&self) -> (f64, f64) {
        let r = self.k11.max(0.0).sqrt();
        (self.k12 - r, self.k12 + r)
    }

    /// Admissible range for `1ᵀ x_adv`.
    pub fn sum_window(&self) -> (f64, f64) {
        let (lo, hi) = self.mean_window();
        (lo * self.n as f64, hi * self.n as f64)
    }

    pub fn radius(&self) -> f64 {
        self.k21.max(0.0).sqrt()
    }
}

fn eta(eps: f64, name: &str) -> Result<f64> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Domain(format!("{name} must lie in [0, 1), got {eps}")));
    }
    Ok(1.0 / (1.0 - eps * eps))
}

pub fn constraint_params(x: &Image, eps1: f64, eps2: f64, consts: &SsimConstants) -> Result<ConstraintParams> {
    constraint_params_with(x, eps1, eps2, consts, RadiusForm::Derived)
}

pub fn constraint_params_with(
    x: &Image,
    eps1: f64,
    eps2: f64,
    consts: &SsimConstants,
    form: RadiusForm,
) -> Result<ConstraintParams> {
    let eta1 = eta(eps1, "eps1")?;
    let eta2 = eta(eps2, "eps2")?;
    let n = x.len();
    let mu = x.mean();
    let centered: Vec<f64> = x.data().iter().map(|v| v - mu).collect();
    let energy: f64 = centered.iter().map(|v| v * v).sum();
    let (k11, k21) = match form {
        RadiusForm::Derived => (
            mu * mu * (eta1 * eta1 - 1.0) + consts.c1() * eps1 * eps1 * eta1,
            energy * (eta2 * eta2 - 1.0) + n as f64 * consts.c2() * eps2 * eps2 * eta2,
        ),
        RadiusForm::Printed => (
            mu * mu * eta1 * eta1 + consts.c1() * eps1 * eps1 * eta1,
            energy * eta2 * eta2 + consts.c2() * eps2 * eps2 * eta2,
        ),
    };
    Ok(ConstraintParams {
        eps1,
        eps2,
        eta1,
        eta2,
        k11,
        k12: eta1 * mu,
        k21,
        k22: centered.iter().map(|v| eta2 * v).collect(),
        n,
        mu_x: mu,
        form,
    })
}

/// KKT multipliers of the step problem in the form
/// `(m − k12)² ≤ k11`, `‖z − k22‖² ≤ k21`.
///
/// A multiplier is `None` when its constraint has collapsed to an equality
/// (zero radius) and the quadratic form has no finite multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Duals {
    pub sphere: Option<f64>,
    pub mean: Option<f64>,
}

/// One constrained step. `image` is not clipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub image: Image,
    /// The gradient carried no usable direction; `image` is the feasible-set center.
    pub degenerate: bool,
    pub duals: Option<Duals>,
}

fn check_inputs(g: &GradientField, x: &Image, params: &ConstraintParams) -> Result<()> {
    if g.shape() != x.shape() || params.n != x.len() {
        return Err(Error::Dimension(format!(
            "gradient {:?}, image {:?} and constraints for {} pixels disagree",
            g.shape(),
            x.shape(),
            params.n
        )));
    }
    if !g.is_finite() {
        return Err(Error::Domain("non-finite gradient".into()));
    }
    Ok(())
}

/// Exact maximizer of `gᵀy` over the PGAP feasible set.
pub fn solve_pgap_step(g: &GradientField, x: &Image, params: &ConstraintParams) -> Result<Step> {
    check_inputs(g, x, params)?;
    let n = params.n as f64;
    let g_mean = g.mean();
    let g_tilde: Vec<f64> = g.data.iter().map(|v| v - g_mean).collect();
    let tilde_norm = g_tilde.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (lo, hi) = params.mean_window();
    let m = if g_mean > 0.0 { hi } else { lo };
    let degenerate = tilde_norm <= 1e-14 * g.norm() || tilde_norm == 0.0;
    let radius = params.radius();

    let data: Vec<f64> = if degenerate || radius == 0.0 {
        params.k22.iter().map(|k| m + k).collect()
    } else {
        params
            .k22
            .iter()
            .zip(&g_tilde)
            .map(|(k, gt)| m + k + radius * gt / tilde_norm)
            .collect()
    };
    let duals = Duals {
        sphere: (radius > 0.0 && !degenerate).then(|| tilde_norm / (2.0 * radius)),
        mean: (params.k11 > 0.0).then(|| n * g_mean.abs() / (2.0 * params.k11.sqrt())),
    };
    Ok(Step {
        image: Image::new_unbounded(x.height(), x.width(), x.channels(), data)?,
        degenerate,
        duals: Some(duals),
    })
}

/// Closed-form approximate step `1μx + k22 + √k21 · g / ‖g‖`.
pub fn fpgap_step(g: &GradientField, x: &Image, params: &ConstraintParams) -> Result<Step> {
    check_inputs(g, x, params)?;
    let norm = g.norm();
    let degenerate = norm == 0.0;
    let radius = params.radius();
    let data: Vec<f64> = params
        .k22
        .iter()
        .zip(&g.data)
        .map(|(k, gi)| {
            let dir = if degenerate { 0.0 } else { gi / norm };
            params.mu_x + k + radius * dir
        })
        .collect();
    Ok(Step {
        image: Image::new_unbounded(x.height(), x.width(), x.channels(), data)?,
        degenerate,
        duals: None,
    })
}
