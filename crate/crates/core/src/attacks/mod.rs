//! SSIM-constrained attacks (PGAP, FPGAP) and norm-bounded baselines.
//!
//! Every driver takes the label it should move away from (normally the
//! model's prediction on the clean image) and stops as soon as the
//! prediction changes.

mod baselines;
mod constraints;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use baselines::{fgm, fgsm, project_l2, project_linf, sign};
pub use constraints::{
    constraint_params, constraint_params_with, fpgap_step, solve_pgap_step, ConstraintParams, Duals,
    RadiusForm, Step,
};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{ClassifierModel, GradientField, LossSpec};
use crate::quality::{pooled_ssim, psnr, ssim_index, SsimConstants, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pgap,
    Fpgap,
    Fgsm,
    FgmL2,
    PgdLinf,
    PgdL2,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Pgap,
        Method::Fpgap,
        Method::Fgsm,
        Method::FgmL2,
        Method::PgdLinf,
        Method::PgdL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pgap => "pgap",
            Method::Fpgap => "fpgap",
            Method::Fgsm => "fgsm",
            Method::FgmL2 => "fgm_l2",
            Method::PgdLinf => "pgd_linf",
            Method::PgdL2 => "pgd_l2",
        }
    }

    pub fn is_ssim_constrained(self) -> bool {
        matches!(self, Method::Pgap | Method::Fpgap)
    }

    /// CW (κ = 50) for the SSIM attacks, cross-entropy for the baselines.
    pub fn default_loss(self) -> LossSpec {
        if self.is_ssim_constrained() {
            LossSpec::cw(50.0)
        } else {
            LossSpec::cross_entropy()
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key || (key == "fgm" && *m == Method::FgmL2))
            .ok_or_else(|| Error::Config(format!("unknown attack method {s:?}")))
    }
}

/// When intermediate and returned images are clipped to `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    None,
    /// Iterate unclipped; clip the returned image (and the candidate checked
    /// for a label change).
    #[default]
    Final,
    PerIter,
}

/// Which image the SSIM constraints are built around at each iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintAnchor {
    #[default]
    CurrentIterate,
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: Method,
    /// `ε2` for PGAP/FPGAP, the ball radius for the baselines.
    pub eps: f64,
    /// Luminance tolerance, PGAP only.
    pub eps1: f64,
    pub iterations: usize,
    /// PGD step; `None` means `2.5 ε / iterations`.
    pub step_size: Option<f64>,
    pub loss: LossSpec,
    pub clip_mode: ClipMode,
    pub anchor: ConstraintAnchor,
    pub radius_form: RadiusForm,
    /// Window for the map-pooled SSIM reported in outcomes.
    pub window: Window,
    pub consts: SsimConstants,
    pub record_trace: bool,
}

impl AttackConfig {
    pub fn new(method: Method, eps: f64) -> Self {
        Self {
            method,
            eps,
            eps1: 0.0,
            iterations: 50,
            step_size: None,
            loss: method.default_loss(),
            clip_mode: ClipMode::default(),
            anchor: ConstraintAnchor::default(),
            radius_form: RadiusForm::default(),
            window: Window::default(),
            consts: SsimConstants::default(),
            record_trace: false,
        }
    }

    pub fn pgd_step(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.eps / self.iterations.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.method.is_ssim_constrained() && self.eps >= 1.0 {
            return Err(Error::Config(format!("eps2 must be < 1, got {}", self.eps)));
        }
        if !(0.0..1.0).contains(&self.eps1) {
            return Err(Error::Config(format!("eps1 must lie in [0, 1), got {}", self.eps1)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if let Some(a) = self.step_size {
            if !(a > 0.0) {
                return Err(Error::Config(format!("step size must be > 0, got {a}")));
            }
        }
        Ok(())
    }
}

/// Similarity of an adversarial image to its original.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    /// Global `S1 · S2`.
    pub ssim: f64,
    /// Mean of the windowed SSIM map.
    pub ssim_map: f64,
    #[serde(with = "crate::serde_f64")]
    pub psnr: f64,
}

impl Quality {
    pub fn measure(original: &Image, adversarial: &Image, window: Window, consts: &SsimConstants) -> Result<Self> {
        Ok(Self {
            ssim: ssim_index(original, adversarial, consts)?,
            ssim_map: pooled_ssim(original, adversarial, window, consts)?,
            psnr: psnr(original, adversarial)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub loss: f64,
    pub predicted: usize,
    /// Global SSIM of the (clip-policy) candidate against the original.
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub method: Method,
    pub adversarial: Image,
    pub success: bool,
    pub iterations: usize,
    pub original_label: usize,
    pub final_label: usize,
    /// Stopped early on a gradient without a usable direction.
    pub degenerate: bool,
    /// Quality of the returned image.
    pub quality: Quality,
    /// Quality of the last iterate before the final clip (equal to
    /// `quality` when nothing was clipped at the end).
    pub quality_pre_clip: Quality,
    pub duals: Option<Duals>,
    pub trace: Option<Vec<TraceStep>>,
}

/// Runs the configured attack on `x`, moving the prediction away from `label`.
pub fn run_attack(model: &ClassifierModel, x: &Image, label: usize, cfg: &AttackConfig) -> Result<AttackOutcome> {
    cfg.validate()?;
    if label >= model.classes {
        return Err(Error::InvalidLabel {
            label,
            classes: model.classes,
        });
    }
    match cfg.method {
        Method::Pgap | Method::Fpgap => ssim_attack(model, x, label, cfg),
        Method::Fgsm | Method::FgmL2 => single_step(model, x, label, cfg),
        Method::PgdLinf | Method::PgdL2 => pgd(model, x, label, cfg),
    }
}

pub fn pgap_attack(model: &ClassifierModel, x: &Image, label: usize, cfg: &AttackConfig) -> Result<AttackOutcome> {
    run_attack(model, x, label, &AttackConfig { method: Method::Pgap, ..cfg.clone() })
}

pub fn fpgap_attack(model: &ClassifierModel, x: &Image, label: usize, cfg: &AttackConfig) -> Result<AttackOutcome> {
    run_attack(model, x, label, &AttackConfig { method: Method::Fpgap, ..cfg.clone() })
}

struct Tracker<'a> {
    model: &'a ClassifierModel,
    original: &'a Image,
    cfg: &'a AttackConfig,
    label: usize,
    trace: Option<Vec<TraceStep>>,
}

impl Tracker<'_> {
    fn gradient(&self, at: &Image) -> Result<GradientField> {
        let g = self.model.input_gradient(at, self.label, &self.cfg.loss)?;
        if !g.is_finite() {
            return Err(Error::Domain("non-finite input gradient".into()));
        }
        Ok(g)
    }

    /// Prediction on `candidate`, recording a trace step when asked.
    fn observe(&mut self, iteration: usize, candidate: &Image) -> Result<usize> {
        let cache = self.model.forward(candidate)?;
        let predicted = crate::nn::argmax(cache.logits());
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceStep {
                iteration,
                loss: crate::nn::loss_and_logit_grad(cache.logits(), self.label, &self.cfg.loss)?.0,
                predicted,
                ssim: ssim_index(self.original, candidate, &self.cfg.consts)?,
            });
        }
        Ok(predicted)
    }

    fn finish(
        self,
        last: Image,
        iterations: usize,
        degenerate: bool,
        duals: Option<Duals>,
    ) -> Result<AttackOutcome> {
        let cfg = self.cfg;
        let quality_pre_clip = Quality::measure(self.original, &last, cfg.window, &cfg.consts)?;
        let adversarial = match cfg.clip_mode {
            ClipMode::None => last,
            _ => last.clipped(),
        };
        let quality = Quality::measure(self.original, &adversarial, cfg.window, &cfg.consts)?;
        let final_label = self.model.predict(&adversarial)?;
        Ok(AttackOutcome {
            method: cfg.method,
            success: final_label != self.label,
            adversarial,
            iterations,
            original_label: self.label,
            final_label,
            degenerate,
            quality,
            quality_pre_clip,
            duals,
            trace: self.trace,
        })
    }
}

fn tracker<'a>(model: &'a ClassifierModel, x: &'a Image, label: usize, cfg: &'a AttackConfig) -> Tracker<'a> {
    Tracker {
        model,
        original: x,
        cfg,
        label,
        trace: cfg.record_trace.then(Vec::new),
    }
}

fn ssim_attack(model: &ClassifierModel, x: &Image, label: usize, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let mut t = tracker(model, x, label, cfg);
    let mut current = x.clone();
    let mut duals = None;
    let mut used = 0;
    for it in 1..=cfg.iterations {
        let g = t.gradient(&current)?;
        let anchor = match cfg.anchor {
            ConstraintAnchor::CurrentIterate => &current,
            ConstraintAnchor::Original => x,
        };
        let params = constraint_params_with(anchor, cfg.eps1, cfg.eps, &cfg.consts, cfg.radius_form)?;
        let step = match cfg.method {
            Method::Pgap => solve_pgap_step(&g, anchor, &params)?,
            _ => fpgap_step(&g, anchor, &params)?,
        };
        if step.degenerate {
            return t.finish(current, used, true, duals);
        }
        duals = step.duals;
        current = match cfg.clip_mode {
            ClipMode::PerIter => step.image.clipped(),
            _ => step.image,
        };
        used = it;
        let candidate = match cfg.clip_mode {
            ClipMode::Final => current.clipped(),
            _ => current.clone(),
        };
        if t.observe(it, &candidate)? != label {
            break;
        }
    }
    t.finish(current, used, false, duals)
}

fn single_step(model: &ClassifierModel, x: &Image, label: usize, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let mut t = tracker(model, x, label, cfg);
    let g = t.gradient(x)?;
    let (image, degenerate) = match cfg.method {
        Method::Fgsm => (fgsm(x, &g, cfg.eps)?, g.norm() == 0.0),
        _ => {
            let s = fgm(x, &g, cfg.eps)?;
            (s.image, s.degenerate)
        }
    };
    if degenerate {
        return t.finish(x.clone(), 0, true, None);
    }
    t.observe(1, &image)?;
    t.finish(image, 1, false, None)
}

fn pgd(model: &ClassifierModel, x: &Image, label: usize, cfg: &AttackConfig) -> Result<AttackOutcome> {
    let mut t = tracker(model, x, label, cfg);
    let alpha = cfg.pgd_step();
    let mut current = x.clone();
    let mut used = 0;
    for it in 1..=cfg.iterations {
        let g = t.gradient(&current)?;
        let norm = g.norm();
        if norm == 0.0 {
            return t.finish(current, used, true, None);
        }
        let mut next: Vec<f64> = match cfg.method {
            Method::PgdLinf => current
                .data()
                .iter()
                .zip(&g.data)
                .map(|(v, gi)| v + alpha * sign(*gi))
                .collect(),
            _ => current
                .data()
                .iter()
                .zip(&g.data)
                .map(|(v, gi)| v + alpha * gi / norm)
                .collect(),
        };
        match cfg.method {
            Method::PgdLinf => project_linf(x.data(), &mut next, cfg.eps),
            _ => project_l2(x.data(), &mut next, cfg.eps),
        }
        for v in &mut next {
            *v = v.clamp(0.0, 1.0);
        }
        current = x.with_data(next);
        used = it;
        if t.observe(it, &current)? != label {
            break;
        }
    }
    t.finish(current, used, false, None)
}
