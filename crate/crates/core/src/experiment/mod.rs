//! End-to-end runs: dataset + model + attacks → outcomes, metrics, sweeps
//! and maps on disk.
//!
//! Files written to the output directory:
//!
//! * `outcomes.json`: the [`RunRecord`] (config snapshot, per-image outcomes, metrics)
//! * `metrics.csv`: one row per attack at the configured noise threshold
//! * `threshold_sweep.csv`: one row per (attack, noise threshold)
//! * `sweep.csv`: one row per (attack, ε)
//! * `timings.json`: wall-clock seconds (the only file that varies between identical runs)
//! * `maps/<attack>/<index>_*.pgm` when `evaluation.maps > 0`
//!
//! Every file carries the config hash and seed.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{default_eps, default_output_dir, AttackSpec, ExperimentConfig, OUT_DIR_ENV};

use crate::attacks::{run_attack, AttackConfig, AttackOutcome, Duals, Quality};
use crate::dataset::{load_idx, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{
    confusion_counts, fooling_rate, metrics_suite, summarize, AttackResult, Confusion, DistortionField, MetricsRecord,
    Ratios, SweepRecord,
};
use crate::image::Image;
use crate::mask::BinaryMask;
use crate::nn::gradcheck::{check_input_gradient, check_param_gradients, GradCheckReport};
use crate::nn::{load_model, save_model, train, ClassifierModel, LossSpec, TrainReport};
use crate::pgm::{save_map_pgm, Grid};
use crate::quality::ssim_map;
use crate::saliency::{gradcampp_map, threshold_mask, SaliencyMap};
use crate::serde_f64;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fixed-size worker pool; `map` keeps input order.
pub struct Workers {
    pool: rayon::ThreadPool,
}

impl Workers {
    pub fn new(threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Config(format!("cannot start {threads} workers: {e}")))?;
        Ok(Self { pool })
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        self.pool
            .install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
    }
}

/// The evaluation images with their dataset positions.
#[derive(Debug, Clone)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

/// Loads `cfg.dataset` and applies `limit`/`shuffle`.
pub fn load_selection(cfg: &ExperimentConfig) -> Result<Selection> {
    let data = load_idx(&cfg.dataset.images, &cfg.dataset.labels)?;
    Ok(select(&data, cfg.dataset.limit, cfg.dataset.shuffle, cfg.seed))
}

pub fn select(data: &Dataset, limit: Option<usize>, shuffle: bool, seed: u64) -> Selection {
    let mut indices: Vec<usize> = (0..data.len()).collect();
    if shuffle {
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    indices.truncate(limit.unwrap_or(usize::MAX));
    Selection {
        images: indices.iter().map(|&i| data.images[i].clone()).collect(),
        labels: indices.iter().map(|&i| data.labels[i]).collect(),
        indices,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_images: usize,
    pub label_counts: Vec<usize>,
    /// Fraction of images the model labels correctly.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    /// Position in the source dataset.
    pub index: usize,
    pub true_label: usize,
    pub pre_label: usize,
    pub final_label: usize,
    pub success: bool,
    pub iterations: usize,
    pub degenerate: bool,
    pub quality: Option<Quality>,
    pub quality_pre_clip: Option<Quality>,
    pub duals: Option<Duals>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub noise_threshold: f64,
    pub mean: Ratios,
    pub pooled: Ratios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub name: String,
    pub config: AttackConfig,
    pub fooling_rate: f64,
    pub avg_ssim: f64,
    pub avg_ssim_global: f64,
    #[serde(with = "serde_f64")]
    pub avg_psnr: f64,
    pub outcomes: Vec<OutcomeSummary>,
    /// `None` when every image failed.
    pub metrics: Option<MetricsRecord>,
    pub threshold_sweep: Vec<ThresholdPoint>,
    pub sweep: Vec<SweepRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub attacks: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub dataset: DatasetStats,
    pub attacks: Vec<AttackRecord>,
    /// Image-level errors across all attacks.
    pub partial_failures: usize,
    #[serde(skip)]
    pub timings: Timings,
}

struct Prepared {
    pre_labels: Vec<usize>,
    saliency: Vec<Result<(SaliencyMap, BinaryMask)>>,
}

fn prepare(model: &ClassifierModel, sel: &Selection, tau: f64, workers: &Workers, need_saliency: bool) -> Result<Prepared> {
    let pre_labels = workers
        .map(&sel.images, |_, x| model.predict(x))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let saliency = if need_saliency {
        workers.map(&sel.images, |i, x| {
            let map = gradcampp_map(model, x, pre_labels[i])?;
            let mask = threshold_mask(&map, tau)?;
            Ok((map, mask))
        })
    } else {
        Vec::new()
    };
    Ok(Prepared { pre_labels, saliency })
}

/// Attack every selected image; errors stay per image.
fn attack_all(
    model: &ClassifierModel,
    sel: &Selection,
    pre_labels: &[usize],
    cfg: &AttackConfig,
    workers: &Workers,
) -> Vec<Result<AttackOutcome>> {
    workers.map(&sel.images, |i, x| run_attack(model, x, pre_labels[i], cfg))
}

fn as_results(sel: &Selection, pre_labels: &[usize], outcomes: &[Result<AttackOutcome>]) -> Vec<AttackResult> {
    outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| match o {
            Ok(o) => AttackResult {
                adversarial: o.adversarial.clone(),
                post_label: o.final_label,
            },
            Err(_) => AttackResult {
                adversarial: sel.images[i].clone(),
                post_label: pre_labels[i],
            },
        })
        .collect()
}

fn summary(index: usize, true_label: usize, pre_label: usize, o: &Result<AttackOutcome>) -> OutcomeSummary {
    match o {
        Ok(o) => OutcomeSummary {
            index,
            true_label,
            pre_label,
            final_label: o.final_label,
            success: o.success,
            iterations: o.iterations,
            degenerate: o.degenerate,
            quality: Some(o.quality),
            quality_pre_clip: Some(o.quality_pre_clip),
            duals: o.duals,
            error: None,
        },
        Err(e) => OutcomeSummary {
            index,
            true_label,
            pre_label,
            final_label: pre_label,
            success: false,
            iterations: 0,
            degenerate: false,
            quality: None,
            quality_pre_clip: None,
            duals: None,
            error: Some(e.to_string()),
        },
    }
}

fn artifact_comment(hash: &str, seed: u64, what: &str) -> String {
    format!("{what}\nconfig_hash {hash}\nseed {seed}")
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// `{}` for finite values, `inf`/`-inf`/`nan` otherwise.
fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        serde_f64::label(v).to_string()
    }
}

#[allow(clippy::too_many_arguments)]
fn write_maps(
    dir: &Path,
    spec: &AttackSpec,
    sel: &Selection,
    outcomes: &[Result<AttackOutcome>],
    saliency: &[Result<(SaliencyMap, BinaryMask)>],
    cfg: &ExperimentConfig,
    hash: &str,
    count: usize,
) -> Result<()> {
    let dir = dir.join("maps").join(&spec.name);
    create_dir(&dir)?;
    let window = cfg.evaluation.window;
    let consts = spec.config.consts;
    for i in 0..count.min(sel.images.len()) {
        let Ok(o) = &outcomes[i] else { continue };
        let x = &sel.images[i];
        let idx = sel.indices[i];
        let stem = |what: &str| dir.join(format!("{idx:05}_{what}.pgm"));
        let note = |what: &str| artifact_comment(hash, cfg.seed, &format!("{} {what} image {idx}", spec.name));
        save_map_pgm(x, stem("original"), Some(&note("original")))?;
        save_map_pgm(&o.adversarial, stem("adversarial"), Some(&note("adversarial")))?;
        let diff: Vec<f64> = o
            .adversarial
            .channel_plane(0)
            .iter()
            .zip(x.channel_plane(0))
            .map(|(a, b)| 0.5 + 0.5 * (a - b))
            .collect();
        let grid = Grid {
            height: x.height(),
            width: x.width(),
            values: &diff,
        };
        save_map_pgm(&grid, stem("difference"), Some(&note("difference (0.5 = unchanged)")))?;
        let map = ssim_map(x, &o.adversarial, window, &consts)?;
        let plane = map.min_over_channels();
        let ssim_values: Vec<f64> = plane.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let grid = Grid {
            height: map.height,
            width: map.width,
            values: &ssim_values,
        };
        save_map_pgm(&grid, stem("ssim"), Some(&note("ssim map")))?;
        let field = DistortionField::compute(x, &o.adversarial, window, &consts)?;
        let noise = field.mask(cfg.evaluation.noise_threshold)?;
        save_map_pgm(&noise, stem("noise"), Some(&note("noise mask")))?;
        if let Some(Ok((smap, smask))) = saliency.get(i) {
            save_map_pgm(smap, stem("saliency"), Some(&note("gradcam++ map")))?;
            save_map_pgm(smask, stem("important"), Some(&note("gradcam++ mask")))?;
        }
    }
    Ok(())
}

fn evaluate_attack(
    model: &ClassifierModel,
    sel: &Selection,
    prep: &Prepared,
    spec: &AttackSpec,
    cfg: &ExperimentConfig,
    workers: &Workers,
) -> Result<(AttackRecord, Vec<Result<AttackOutcome>>)> {
    let outcomes = attack_all(model, sel, &prep.pre_labels, &spec.config, workers);
    let ev = &cfg.evaluation;
    let window = ev.window;
    let consts = spec.config.consts;

    let fields: Vec<Option<Result<(DistortionField, BinaryMask)>>> = workers.map(&outcomes, |i, o| {
        let o = o.as_ref().ok()?;
        let mask = match prep.saliency.get(i)? {
            Ok((_, m)) => m.clone(),
            Err(_) => return None,
        };
        Some(DistortionField::compute(&sel.images[i], &o.adversarial, window, &consts).map(|f| (f, mask)))
    });
    let mut usable = Vec::new();
    for f in fields.into_iter().flatten() {
        usable.push(f?);
    }

    let counts_at = |t: f64| -> Result<Vec<Confusion>> {
        usable
            .iter()
            .map(|(field, sal)| confusion_counts(&field.mask(t)?, sal))
            .collect()
    };
    let metrics = if usable.is_empty() {
        None
    } else {
        Some(metrics_suite(&counts_at(ev.noise_threshold)?, ev.noise_threshold, ev.gradcam_threshold)?)
    };
    let mut threshold_sweep = Vec::new();
    if !usable.is_empty() {
        for &t in &ev.thresholds {
            let rec = metrics_suite(&counts_at(t)?, t, ev.gradcam_threshold)?;
            threshold_sweep.push(ThresholdPoint {
                noise_threshold: t,
                mean: rec.mean,
                pooled: rec.pooled,
            });
        }
    }

    let main_results = as_results(sel, &prep.pre_labels, &outcomes);
    let main = summarize(
        &spec.name,
        spec.config.eps,
        &sel.images,
        &prep.pre_labels,
        &main_results,
        window,
        &consts,
    )?;
    let mut sweep = Vec::new();
    for eps in spec.sweep_grid() {
        if eps == spec.config.eps {
            sweep.push(main.clone());
            continue;
        }
        let acfg = AttackConfig {
            eps,
            ..spec.config.clone()
        };
        let out = attack_all(model, sel, &prep.pre_labels, &acfg, workers);
        let results = as_results(sel, &prep.pre_labels, &out);
        sweep.push(summarize(&spec.name, eps, &sel.images, &prep.pre_labels, &results, window, &consts)?);
    }

    let summaries = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| summary(sel.indices[i], sel.labels[i], prep.pre_labels[i], o))
        .collect();
    let post: Vec<usize> = main_results.iter().map(|r| r.post_label).collect();
    Ok((
        AttackRecord {
            name: spec.name.clone(),
            config: spec.config.clone(),
            fooling_rate: fooling_rate(&prep.pre_labels, &post)?,
            avg_ssim: main.avg_ssim,
            avg_ssim_global: main.avg_ssim_global,
            avg_psnr: main.avg_psnr,
            outcomes: summaries,
            metrics,
            threshold_sweep,
            sweep,
        },
        outcomes,
    ))
}

/// Runs the configured attacks on an already loaded model and selection.
pub fn run_with(cfg: &ExperimentConfig, model: &ClassifierModel, sel: &Selection) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let workers = Workers::new(cfg.workers)?;
    let hash = cfg.hash();
    let prep = prepare(
        model,
        sel,
        cfg.evaluation.gradcam_threshold,
        &workers,
        !cfg.attacks.is_empty(),
    )?;
    let mut label_counts = vec![0; model.classes];
    for &l in &sel.labels {
        if l < label_counts.len() {
            label_counts[l] += 1;
        }
    }
    let correct = prep.pre_labels.iter().zip(&sel.labels).filter(|(a, b)| a == b).count();
    let dataset = DatasetStats {
        n_images: sel.images.len(),
        label_counts,
        accuracy: if sel.images.is_empty() {
            0.0
        } else {
            correct as f64 / sel.images.len() as f64
        },
    };

    let out = &cfg.output_dir;
    create_dir(out)?;
    let mut attacks = Vec::new();
    let mut timings = Timings::default();
    let mut partial_failures = 0;
    for spec in &cfg.attacks {
        let t = Instant::now();
        let (record, outcomes) = evaluate_attack(model, sel, &prep, spec, cfg, &workers)?;
        partial_failures += record.outcomes.iter().filter(|o| o.error.is_some()).count();
        if cfg.evaluation.maps > 0 {
            write_maps(out, spec, sel, &outcomes, &prep.saliency, cfg, &hash, cfg.evaluation.maps)?;
        }
        timings.attacks.push((spec.name.clone(), t.elapsed().as_secs_f64()));
        attacks.push(record);
    }
    timings.total_seconds = started.elapsed().as_secs_f64();

    let record = RunRecord {
        version: VERSION.to_string(),
        config_hash: hash,
        seed: cfg.seed,
        config: cfg.clone(),
        dataset,
        attacks,
        partial_failures,
        timings,
    };
    write_run_artifacts(&record, out)?;
    Ok(record)
}

/// Loads dataset and model from the config, then [`run_with`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let model = load_model(&cfg.model)?;
    let sel = load_selection(cfg)?;
    run_with(cfg, &model, &sel)
}

pub fn metrics_csv(record: &RunRecord) -> String {
    let mut s = String::from(
        "attack,method,eps,noise_threshold,gradcam_threshold,n_images,fooling_rate,precision,recall,iou,iou_outside,pixels_perturbed,pooled_precision,pooled_recall,pooled_iou,pooled_iou_outside,pooled_pixels_perturbed,seed,config_hash\n",
    );
    for a in &record.attacks {
        let Some(m) = &a.metrics else { continue };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            a.name,
            a.config.method,
            num(a.config.eps),
            num(m.noise_threshold),
            num(m.gradcam_threshold),
            m.n_images,
            num(a.fooling_rate),
            num(m.mean.precision),
            num(m.mean.recall),
            num(m.mean.iou),
            num(m.mean.iou_outside),
            num(m.mean.pixels_perturbed),
            num(m.pooled.precision),
            num(m.pooled.recall),
            num(m.pooled.iou),
            num(m.pooled.iou_outside),
            num(m.pooled.pixels_perturbed),
            record.seed,
            record.config_hash
        );
    }
    s
}

pub fn threshold_csv(record: &RunRecord) -> String {
    let mut s = String::from(
        "attack,noise_threshold,precision,recall,iou,iou_outside,pixels_perturbed,seed,config_hash\n",
    );
    for a in &record.attacks {
        for p in &a.threshold_sweep {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                a.name,
                num(p.noise_threshold),
                num(p.mean.precision),
                num(p.mean.recall),
                num(p.mean.iou),
                num(p.mean.iou_outside),
                num(p.mean.pixels_perturbed),
                record.seed,
                record.config_hash
            );
        }
    }
    s
}

/// `method,eps,fooling_rate,avg_ssim,avg_psnr,n_images,seed,config_hash`.
pub fn sweep_csv(rows: &[SweepRecord], seed: u64, hash: &str) -> String {
    let mut s = String::from("method,eps,fooling_rate,avg_ssim,avg_psnr,n_images,seed,config_hash\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.method,
            num(r.eps),
            num(r.fooling_rate),
            num(r.avg_ssim),
            num(r.avg_psnr),
            r.n_images,
            seed,
            hash
        );
    }
    s
}

pub fn write_run_artifacts(record: &RunRecord, out: &Path) -> Result<()> {
    create_dir(out)?;
    let json = serde_json::to_string_pretty(record).map_err(|e| Error::Config(format!("serializing run record: {e}")))?;
    write_file(&out.join("outcomes.json"), json + "\n")?;
    write_file(&out.join("metrics.csv"), metrics_csv(record))?;
    write_file(&out.join("threshold_sweep.csv"), threshold_csv(record))?;
    let rows: Vec<SweepRecord> = record.attacks.iter().flat_map(|a| a.sweep.clone()).collect();
    write_file(&out.join("sweep.csv"), sweep_csv(&rows, record.seed, &record.config_hash))?;
    let timings = serde_json::json!({
        "config_hash": record.config_hash,
        "seed": record.seed,
        "total_seconds": record.timings.total_seconds,
        "attacks": record.timings.attacks,
    });
    write_file(&out.join("timings.json"), format!("{timings:#}\n"))
}

/// Quality/fooling-rate sweep only; writes `sweep.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, model: &ClassifierModel, sel: &Selection) -> Result<Vec<SweepRecord>> {
    cfg.validate()?;
    let workers = Workers::new(cfg.workers)?;
    let prep = prepare(model, sel, cfg.evaluation.gradcam_threshold, &workers, false)?;
    let mut rows = Vec::new();
    for spec in &cfg.attacks {
        for eps in spec.sweep_grid() {
            let acfg = AttackConfig {
                eps,
                ..spec.config.clone()
            };
            let out = attack_all(model, sel, &prep.pre_labels, &acfg, &workers);
            let results = as_results(sel, &prep.pre_labels, &out);
            rows.push(summarize(
                &spec.name,
                eps,
                &sel.images,
                &prep.pre_labels,
                &results,
                cfg.evaluation.window,
                &acfg.consts,
            )?);
        }
    }
    create_dir(&cfg.output_dir)?;
    write_file(
        &cfg.output_dir.join("sweep.csv"),
        sweep_csv(&rows, cfg.seed, &cfg.hash()),
    )?;
    Ok(rows)
}

/// Writes maps for the first `count` selected images of every attack.
pub fn emit_maps(cfg: &ExperimentConfig, model: &ClassifierModel, sel: &Selection, count: usize) -> Result<PathBuf> {
    cfg.validate()?;
    let workers = Workers::new(cfg.workers)?;
    let n = count.min(sel.images.len());
    let head = Selection {
        indices: sel.indices[..n].to_vec(),
        images: sel.images[..n].to_vec(),
        labels: sel.labels[..n].to_vec(),
    };
    let prep = prepare(model, &head, cfg.evaluation.gradcam_threshold, &workers, true)?;
    let hash = cfg.hash();
    for spec in &cfg.attacks {
        let outcomes = attack_all(model, &head, &prep.pre_labels, &spec.config, &workers);
        write_maps(&cfg.output_dir, spec, &head, &outcomes, &prep.saliency, cfg, &hash, n)?;
    }
    Ok(cfg.output_dir.join("maps"))
}

/// Outcome of attacking one dataset image, as written by [`attack_single`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleAttack {
    pub config_hash: String,
    pub seed: u64,
    pub attack: String,
    pub summary: OutcomeSummary,
    pub trace: Option<Vec<crate::attacks::TraceStep>>,
}

/// Attacks image `index` of the dataset and writes `<name>_<index>.json`
/// plus the adversarial image as PGM.
pub fn attack_single(cfg: &ExperimentConfig, model: &ClassifierModel, index: usize) -> Result<SingleAttack> {
    cfg.validate()?;
    let data = load_idx(&cfg.dataset.images, &cfg.dataset.labels)?;
    let x = data
        .images
        .get(index)
        .ok_or_else(|| Error::Config(format!("image index {index} out of range ({} images)", data.len())))?;
    let spec = cfg
        .attacks
        .first()
        .ok_or_else(|| Error::Config("no attack configured".into()))?;
    let pre = model.predict(x)?;
    let outcome = run_attack(model, x, pre, &spec.config);
    let hash = cfg.hash();
    let result = SingleAttack {
        config_hash: hash.clone(),
        seed: cfg.seed,
        attack: spec.name.clone(),
        summary: summary(index, data.labels[index], pre, &outcome),
        trace: outcome.as_ref().ok().and_then(|o| o.trace.clone()),
    };
    let out = &cfg.output_dir;
    create_dir(out)?;
    if let Ok(o) = &outcome {
        let note = artifact_comment(&hash, cfg.seed, &format!("{} adversarial image {index}", spec.name));
        save_map_pgm(&o.adversarial, out.join(format!("{}_{index:05}.pgm", spec.name)), Some(&note))?;
    }
    let json = serde_json::to_string_pretty(&result).map_err(|e| Error::Config(format!("serializing outcome: {e}")))?;
    write_file(&out.join(format!("{}_{index:05}.json", spec.name)), json + "\n")?;
    outcome?;
    Ok(result)
}

/// Trains the default architecture on `cfg.train` and saves it to `cfg.model`.
pub fn train_model(cfg: &ExperimentConfig) -> Result<(ClassifierModel, TrainReport)> {
    let t = &cfg.train;
    let data = load_idx(&t.images, &t.labels)?;
    let held = match (&t.held_out_images, &t.held_out_labels) {
        (Some(i), Some(l)) => Some(load_idx(i, l)?),
        _ => None,
    };
    let first = data.images.first().ok_or(Error::Empty("training set"))?;
    let classes = data.labels.iter().max().map_or(0, |m| m + 1).max(2);
    let mut model = ClassifierModel::default_architecture(first.shape(), classes, cfg.seed)?;
    let mut tc = t.config.clone();
    tc.seed = cfg.seed;
    let report = train(
        &mut model,
        &data.images,
        &data.labels,
        held.as_ref().map(|h| (h.images.as_slice(), h.labels.as_slice())),
        &LossSpec::cross_entropy(),
        &tc,
    )?;
    if let Some(dir) = cfg.model.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_model(&model, &cfg.model)?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEval {
    pub config_hash: String,
    pub seed: u64,
    pub images: usize,
    pub input: GradCheckReport,
    pub params: GradCheckReport,
}

/// Finite-difference check of input and parameter gradients on `count`
/// selected images, `coords` random pixels and parameters per image.
pub fn gradient_eval(
    cfg: &ExperimentConfig,
    model: &ClassifierModel,
    sel: &Selection,
    count: usize,
    coords: usize,
    loss: &LossSpec,
) -> Result<GradEval> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input = GradCheckReport::default();
    let mut params = GradCheckReport::default();
    let n = count.min(sel.images.len());
    for (x, &label) in sel.images.iter().zip(&sel.labels).take(n) {
        let px: Vec<usize> = (0..coords).map(|_| rng.gen_range(0..x.len())).collect();
        let pp: Vec<usize> = (0..coords).map(|_| rng.gen_range(0..model.param_count())).collect();
        input.merge(&check_input_gradient(model, x, label, loss, Some(&px))?);
        params.merge(&check_param_gradients(model, x, label, loss, &pp)?);
    }
    Ok(GradEval {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        images: n,
        input,
        params,
    })
}
