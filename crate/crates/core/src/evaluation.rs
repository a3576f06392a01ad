//! Noise masks, confusion counts against saliency masks, IOU-family
//! metrics, fooling rate and quality/fooling-rate sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{BinaryMask, MaskSource};
use crate::quality::{pooled_ssim, psnr, ssim_index, ssim_map, SsimConstants, Window};

/// Per-pixel distortion `1 − SSIM`, worst channel, padded to the image size
/// by repeating the edge of the valid-window region.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionField {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DistortionField {
    pub fn compute(x: &Image, x_adv: &Image, window: Window, consts: &SsimConstants) -> Result<Self> {
        let map = ssim_map(x, x_adv, window, consts)?;
        let worst = map.min_over_channels();
        let (h, w) = (x.height(), x.width());
        let size = window.size();
        let before = (size - 1) / 2;
        let mut values = Vec::with_capacity(h * w);
        for r in 0..h {
            let mr = r.saturating_sub(before).min(map.height - 1);
            for c in 0..w {
                let mc = c.saturating_sub(before).min(map.width - 1);
                values.push(1.0 - worst[mr * map.width + mc]);
            }
        }
        Ok(Self {
            height: h,
            width: w,
            values,
        })
    }

    pub fn mask(&self, threshold: f64) -> Result<BinaryMask> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Domain(format!("noise threshold must lie in [0, 1], got {threshold}")));
        }
        let data = self.values.iter().map(|d| *d > threshold).collect();
        BinaryMask::new(self.height, self.width, data, threshold, MaskSource::Noise)
    }
}

/// Pixels where `1 − local SSIM` exceeds `threshold`.
pub fn noise_mask(x: &Image, x_adv: &Image, threshold: f64, window: Window, consts: &SsimConstants) -> Result<BinaryMask> {
    DistortionField::compute(x, x_adv, window, consts)?.mask(threshold)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Counts of `N ∧ G`, `N ∧ ¬G`, `¬N ∧ G`, `¬N ∧ ¬G`.
pub fn confusion_counts(noise: &BinaryMask, saliency: &BinaryMask) -> Result<Confusion> {
    if (noise.height, noise.width) != (saliency.height, saliency.width) {
        return Err(Error::Dimension(format!(
            "noise mask {}x{} vs saliency mask {}x{}",
            noise.height, noise.width, saliency.height, saliency.width
        )));
    }
    let mut c = Confusion::default();
    for (n, g) in noise.data.iter().zip(&saliency.data) {
        match (n, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// The five ratios for one image (or for pooled counts).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub iou_outside: f64,
    pub pixels_perturbed: f64,
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

impl Ratios {
    /// Empty denominators: precision 0, recall 1, IOU 0, IOU-outside 0.
    pub fn from_counts(c: &Confusion) -> Self {
        Self {
            precision: ratio(c.tp, c.tp + c.fp, 0.0),
            recall: ratio(c.tp, c.tp + c.fn_, 1.0),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_, 0.0),
            iou_outside: ratio(c.fp, c.tp + c.fp + c.tn, 0.0),
            pixels_perturbed: ratio(c.tp + c.fp, c.total(), 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub counts: Confusion,
    pub ratios: Ratios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub n_images: usize,
    pub noise_threshold: f64,
    pub gradcam_threshold: f64,
    /// Means of the per-image ratios.
    pub mean: Ratios,
    /// Ratios of the counts summed over images.
    pub pooled: Ratios,
    pub per_image: Vec<ImageMetrics>,
}

pub fn metrics_suite(counts: &[Confusion], noise_threshold: f64, gradcam_threshold: f64) -> Result<MetricsRecord> {
    if counts.is_empty() {
        return Err(Error::Empty("metrics need at least one image"));
    }
    let per_image: Vec<ImageMetrics> = counts
        .iter()
        .map(|c| ImageMetrics {
            counts: *c,
            ratios: Ratios::from_counts(c),
        })
        .collect();
    let n = counts.len() as f64;
    let avg = |f: fn(&Ratios) -> f64| per_image.iter().map(|m| f(&m.ratios)).sum::<f64>() / n;
    let mut total = Confusion::default();
    counts.iter().for_each(|c| total.add(c));
    Ok(MetricsRecord {
        n_images: counts.len(),
        noise_threshold,
        gradcam_threshold,
        mean: Ratios {
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            iou: avg(|r| r.iou),
            iou_outside: avg(|r| r.iou_outside),
            pixels_perturbed: avg(|r| r.pixels_perturbed),
        },
        pooled: Ratios::from_counts(&total),
        per_image,
    })
}

/// Fraction of positions whose label changed.
pub fn fooling_rate(pre: &[usize], post: &[usize]) -> Result<f64> {
    if pre.len() != post.len() {
        return Err(Error::Dimension(format!(
            "{} pre-attack labels vs {} post-attack labels",
            pre.len(),
            post.len()
        )));
    }
    if pre.is_empty() {
        return Err(Error::Empty("label vectors"));
    }
    let changed = pre.iter().zip(post).filter(|(a, b)| a != b).count();
    Ok(changed as f64 / pre.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub method: String,
    pub eps: f64,
    pub fooling_rate: f64,
    /// Mean map-pooled SSIM.
    pub avg_ssim: f64,
    pub avg_ssim_global: f64,
    #[serde(with = "crate::serde_f64")]
    pub avg_psnr: f64,
    pub n_images: usize,
}

/// What an attack produced for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Image,
    pub post_label: usize,
}

/// Averages FR and quality over a set of attack results.
pub fn summarize(
    method: &str,
    eps: f64,
    originals: &[Image],
    pre_labels: &[usize],
    results: &[AttackResult],
    window: Window,
    consts: &SsimConstants,
) -> Result<SweepRecord> {
    if originals.len() != results.len() {
        return Err(Error::Dimension(format!(
            "{} originals vs {} attack results",
            originals.len(),
            results.len()
        )));
    }
    let post: Vec<usize> = results.iter().map(|r| r.post_label).collect();
    let fr = fooling_rate(pre_labels, &post)?;
    let n = originals.len() as f64;
    let (mut sm, mut sg, mut p) = (0.0, 0.0, 0.0);
    for (x, r) in originals.iter().zip(results) {
        sm += pooled_ssim(x, &r.adversarial, window, consts)?;
        sg += ssim_index(x, &r.adversarial, consts)?;
        p += psnr(x, &r.adversarial)?;
    }
    Ok(SweepRecord {
        method: method.to_string(),
        eps,
        fooling_rate: fr,
        avg_ssim: sm / n,
        avg_ssim_global: sg / n,
        avg_psnr: p / n,
        n_images: originals.len(),
    })
}

/// Runs `attack(image, pre_label, eps)` over the dataset for every `eps`.
pub fn quality_fr_sweep<F>(
    method: &str,
    grid: &[f64],
    images: &[Image],
    pre_labels: &[usize],
    window: Window,
    consts: &SsimConstants,
    mut attack: F,
) -> Result<Vec<SweepRecord>>
where
    F: FnMut(&[Image], &[usize], f64) -> Result<Vec<AttackResult>>,
{
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    if images.is_empty() {
        return Err(Error::Empty("sweep dataset"));
    }
    grid.iter()
        .map(|&eps| {
            let results = attack(images, pre_labels, eps)?;
            summarize(method, eps, images, pre_labels, &results, window, consts)
        })
        .collect()
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// 25 thresholds from 0.01 to 0.5.
pub fn default_threshold_grid() -> Vec<f64> {
    linspace(0.01, 0.5, 25)
}

/// One attacked image ready for mask-based evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub distortion: DistortionField,
    pub saliency: BinaryMask,
}

/// `metrics_suite` at each noise threshold.
pub fn threshold_sweep(cases: &[EvalCase], grid: &[f64]) -> Result<Vec<MetricsRecord>> {
    grid.iter()
        .map(|&t| {
            let counts = cases
                .iter()
                .map(|c| confusion_counts(&c.distortion.mask(t)?, &c.saliency))
                .collect::<Result<Vec<_>>>()?;
            let tau = cases.first().map_or(f64::NAN, |c| c.saliency.threshold);
            metrics_suite(&counts, t, tau)
        })
        .collect()
}

/// Result of matching an attack strength to a target average SSIM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedEps {
    pub eps: f64,
    pub avg_ssim: f64,
    pub evaluations: usize,
    /// Whether `avg_ssim` landed inside the requested band.
    pub matched: bool,
}

/// Bisects (geometrically) for an `eps` in `[lo, hi]` whose average SSIM
/// lies in `band`, assuming SSIM falls as `eps` grows. Returns the closest
/// evaluation when the band is not reached within `max_evals`.
pub fn tune_eps<F>(lo: f64, hi: f64, band: (f64, f64), max_evals: usize, mut avg_ssim: F) -> Result<TunedEps>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Domain(format!("eps bracket must satisfy 0 < lo < hi, got [{lo}, {hi}]")));
    }
    let target = 0.5 * (band.0 + band.1);
    let (mut a, mut b) = (lo, hi);
    let mut best: Option<TunedEps> = None;
    for k in 1..=max_evals {
        let eps = (a * b).sqrt();
        let s = avg_ssim(eps)?;
        let matched = s >= band.0 && s <= band.1;
        let better = best
            .as_ref()
            .map_or(true, |t| (s - target).abs() < (t.avg_ssim - target).abs());
        if better || matched {
            best = Some(TunedEps {
                eps,
                avg_ssim: s,
                evaluations: k,
                matched,
            });
        }
        if matched {
            break;
        }
        if s > target {
            a = eps;
        } else {
            b = eps;
        }
    }
    let mut t = best.ok_or(Error::Empty("tuning budget"))?;
    t.evaluations = t.evaluations.max(1);
    Ok(t)
}
