//! SSIM (global two-factor form and windowed maps), NMSE-based metrics and PSNR.
//!
//! The global index uses whole-image statistics with the biased (divide by
//! `N`) estimator and `c3 = c2 / 2`, so `SSIM = S1 · S2` where `S1` compares
//! means and `S2` compares the centered signals. With sample statistics,
//!
//! ```text
//! S2 = (2 s_xy + c2) / (s_x² + s_y² + c2) = 1 − NMSE(x − μx, y − μy, N·c2)
//! ```
//!
//! i.e. the NMSE constant picks up a factor `N` once the sums are written
//! without the `1/N`. [`s2`] evaluates the NMSE form, [`s2_covariance`] the
//! statistics form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Stabilising constants `c1 = (k1 L)²`, `c2 = (k2 L)²`, `c3 = c2 / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConstants {
    pub fn with_dynamic_range(dynamic_range: f64) -> Self {
        Self {
            dynamic_range,
            ..Self::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }
}

/// `‖x − y‖² / (‖x‖² + ‖y‖² + c)`.
///
/// For `c = 0` and `x = y = 0` the ratio is 0/0; identical inputs give 0.
pub fn nmse(x: &[f64], y: &[f64], c: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!(
            "nmse operands have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Empty("nmse operands"));
    }
    if !(c >= 0.0) {
        return Err(Error::Domain(format!("nmse constant must be >= 0, got {c}")));
    }
    let (mut diff, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        diff += (a - b) * (a - b);
        nx += a * a;
        ny += b * b;
    }
    let denom = nx + ny + c;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(diff / denom)
}

fn centered(img: &Image) -> Vec<f64> {
    let mu = img.mean();
    img.data().iter().map(|v| v - mu).collect()
}

/// Luminance factor `(2 μx μy + c1) / (μx² + μy² + c1)`.
pub fn s1(x: &Image, y: &Image, consts: &SsimConstants) -> Result<f64> {
    x.check_same_shape(y)?;
    Ok(1.0 - nmse(&[x.mean()], &[y.mean()], consts.c1())?)
}

/// Contrast-structure factor, evaluated as `1 − NMSE` of the centered images.
pub fn s2(x: &Image, y: &Image, consts: &SsimConstants) -> Result<f64> {
    x.check_same_shape(y)?;
    let n = x.len() as f64;
    Ok(1.0 - nmse(&centered(x), &centered(y), n * consts.c2())?)
}

/// Contrast-structure factor from sample (co)variances.
pub fn s2_covariance(x: &Image, y: &Image, consts: &SsimConstants) -> Result<f64> {
    x.check_same_shape(y)?;
    let n = x.len() as f64;
    let (mx, my) = (x.mean(), y.mean());
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.data().iter().zip(y.data()) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    let (sxx, syy, sxy) = (sxx / n, syy / n, sxy / n);
    let c2 = consts.c2();
    Ok((2.0 * sxy + c2) / (sxx + syy + c2))
}

/// Global SSIM, `S1 · S2`.
pub fn ssim_index(x: &Image, y: &Image, consts: &SsimConstants) -> Result<f64> {
    Ok(s1(x, y, consts)? * s2(x, y, consts)?)
}

/// The normalized metric pair `d1 = √(1 − S1)`, `d2 = √(1 − S2)` and its
/// Euclidean norm `√(2 − S1 − S2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DVector {
    pub d1: f64,
    pub d2: f64,
    pub norm: f64,
}

impl DVector {
    /// `√(1 − SSIM)` rebuilt from the pair: `√(d1² + d2² − d1² d2²)`.
    pub fn root_one_minus_ssim(&self) -> f64 {
        let (a, b) = (self.d1 * self.d1, self.d2 * self.d2);
        guarded_sqrt(a + b - a * b)
    }
}

fn guarded_sqrt(v: f64) -> f64 {
    if v < 0.0 && v > -1e-12 {
        0.0
    } else {
        v.sqrt()
    }
}

pub fn d_vector(x: &Image, y: &Image, consts: &SsimConstants) -> Result<DVector> {
    let d1 = guarded_sqrt(1.0 - s1(x, y, consts)?);
    let d2 = guarded_sqrt(1.0 - s2(x, y, consts)?);
    Ok(DVector {
        d1,
        d2,
        norm: (d1 * d1 + d2 * d2).sqrt(),
    })
}

/// Local window used by [`ssim_map`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Window {
    Gaussian { size: usize, sigma: f64 },
    Uniform { size: usize },
}

impl Default for Window {
    fn default() -> Self {
        Window::gaussian()
    }
}

impl Window {
    /// 11×11, σ = 1.5.
    pub fn gaussian() -> Self {
        Window::Gaussian {
            size: 11,
            sigma: 1.5,
        }
    }

    /// 8×8 box.
    pub fn uniform() -> Self {
        Window::Uniform { size: 8 }
    }

    pub fn size(&self) -> usize {
        match *self {
            Window::Gaussian { size, .. } | Window::Uniform { size } => size,
        }
    }

    /// Row-major `size × size` weights summing to one.
    pub fn weights(&self) -> Vec<f64> {
        match *self {
            Window::Uniform { size } => vec![1.0 / (size * size) as f64; size * size],
            Window::Gaussian { size, sigma } => {
                let center = (size as f64 - 1.0) / 2.0;
                let mut w: Vec<f64> = (0..size * size)
                    .map(|i| {
                        let dy = (i / size) as f64 - center;
                        let dx = (i % size) as f64 - center;
                        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
                    })
                    .collect();
                let total: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= total);
                w
            }
        }
    }
}

/// Per-channel local SSIM over the valid-window region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimMap {
    pub height: usize,
    pub width: usize,
    pub window: Window,
    /// One row-major `height × width` grid per channel.
    pub channels: Vec<Vec<f64>>,
}

impl SsimMap {
    /// Mean over every entry of every channel (the pooled SSIM).
    pub fn mean(&self) -> f64 {
        let count = (self.height * self.width * self.channels.len()) as f64;
        self.channels.iter().flatten().sum::<f64>() / count
    }

    /// Per-pixel minimum across channels.
    pub fn min_over_channels(&self) -> Vec<f64> {
        (0..self.height * self.width)
            .map(|i| {
                self.channels
                    .iter()
                    .map(|c| c[i])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }
}

pub fn ssim_map(x: &Image, y: &Image, window: Window, consts: &SsimConstants) -> Result<SsimMap> {
    x.check_same_shape(y)?;
    let size = window.size();
    if size == 0 {
        return Err(Error::Domain("window size must be positive".into()));
    }
    if x.height() < size || x.width() < size {
        return Err(Error::ImageTooSmall {
            height: x.height(),
            width: x.width(),
            window: size,
        });
    }
    let weights = window.weights();
    let (h, w) = (x.height() - size + 1, x.width() - size + 1);
    let (c1, c2) = (consts.c1(), consts.c2());
    let channels = (0..x.channels())
        .map(|ch| {
            let (px, py) = (x.channel_plane(ch), y.channel_plane(ch));
            let stride = x.width();
            let mut out = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    out.push(local_ssim(&px, &py, stride, r, c, size, &weights, c1, c2));
                }
            }
            out
        })
        .collect();
    Ok(SsimMap {
        height: h,
        width: w,
        window,
        channels,
    })
}

#[allow(clippy::too_many_arguments)]
fn local_ssim(
    px: &[f64],
    py: &[f64],
    stride: usize,
    r0: usize,
    c0: usize,
    size: usize,
    weights: &[f64],
    c1: f64,
    c2: f64,
) -> f64 {
    let (mut mx, mut my) = (0.0, 0.0);
    for i in 0..size {
        let row = (r0 + i) * stride + c0;
        for j in 0..size {
            let wt = weights[i * size + j];
            mx += wt * px[row + j];
            my += wt * py[row + j];
        }
    }
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in 0..size {
        let row = (r0 + i) * stride + c0;
        for j in 0..size {
            let wt = weights[i * size + j];
            let (a, b) = (px[row + j] - mx, py[row + j] - my);
            sxx += wt * a * a;
            syy += wt * b * b;
            sxy += wt * a * b;
        }
    }
    ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
}

/// Mean of the SSIM map for `window`.
pub fn pooled_ssim(x: &Image, y: &Image, window: Window, consts: &SsimConstants) -> Result<f64> {
    Ok(ssim_map(x, y, window, consts)?.mean())
}

/// `10 log10(L² / MSE)` in dB; `+∞` for identical images.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    x.check_same_shape(y)?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let l = x.dynamic_range();
    Ok(10.0 * (l * l / mse).log10())
}
