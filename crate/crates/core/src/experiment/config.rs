//! Flat `key = value` experiment files with `[section]` headers.
//!
//! ```text
//! seed = 7
//! workers = 2
//! output = runs/demo
//!
//! [dataset]
//! images = data/mnist/test-images-idx3-ubyte.gz
//! labels = data/mnist/test-labels-idx1-ubyte.gz
//! limit = 100
//!
//! [model]
//! path = model.bin
//!
//! [evaluation]
//! noise_threshold = 0.11
//! thresholds = 0.01:0.5:25
//!
//! [attack fpgap]
//! eps = 0.11
//! grid = 0.02, 0.05, 0.11
//! ```
//!
//! Relative paths are resolved against the directory holding the file.
//! `#` and `;` start comments.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, ClipMode, ConstraintAnchor, Method, RadiusForm};
use crate::error::{Error, Result};
use crate::evaluation::{default_threshold_grid, linspace};
use crate::nn::{LossKind, TrainConfig};
use crate::quality::Window;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "PGAP_OUT_DIR";
const FALLBACK_OUT_DIR: &str = "pgap-out";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    /// Empty for the entries before the first header.
    pub name: String,
    /// Second word of the header, as in `[attack fpgap]`.
    pub label: Option<String>,
    pub entries: Vec<Entry>,
}

/// Parses the raw section/entry structure.
pub fn parse_kv(text: &str) -> Result<Vec<Section>> {
    let mut sections = vec![Section {
        name: String::new(),
        label: None,
        entries: Vec::new(),
    }];
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find(['#', ';']) {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {line_no}: unterminated section header")))?;
            let mut words = inner.split_whitespace();
            let name = words
                .next()
                .ok_or_else(|| Error::Config(format!("line {line_no}: empty section header")))?;
            let label = words.next().map(str::to_string);
            if words.next().is_some() {
                return Err(Error::Config(format!("line {line_no}: section header has too many words")));
            }
            sections.push(Section {
                name: name.to_ascii_lowercase(),
                label,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected key = value, got {line:?}")))?;
        let key = key.trim().to_ascii_lowercase();
        if key.is_empty() {
            return Err(Error::Config(format!("line {line_no}: missing key")));
        }
        let section = sections.last_mut().unwrap();
        if section.entries.iter().any(|e| e.key == key) {
            return Err(Error::Config(format!("line {line_no}: duplicate key {key:?}")));
        }
        section.entries.push(Entry {
            key,
            value: value.trim().to_string(),
            line: line_no,
        });
    }
    Ok(sections)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Use at most this many images.
    pub limit: Option<usize>,
    /// Draw the `limit` images with a seeded shuffle instead of taking the first ones.
    pub shuffle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub held_out_images: Option<PathBuf>,
    pub held_out_labels: Option<PathBuf>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub noise_threshold: f64,
    pub gradcam_threshold: f64,
    pub window: Window,
    pub thresholds: Vec<f64>,
    /// How many leading images get PGM maps written.
    pub maps: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            noise_threshold: 0.11,
            gradcam_threshold: 0.75,
            window: Window::gaussian(),
            thresholds: default_threshold_grid(),
            maps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub name: String,
    pub config: AttackConfig,
    /// Strengths for the quality/fooling-rate sweep; empty means just `config.eps`.
    pub grid: Vec<f64>,
}

impl AttackSpec {
    pub fn new(method: Method) -> Self {
        Self {
            name: method.name().to_string(),
            config: AttackConfig::new(method, default_eps(method)),
            grid: Vec::new(),
        }
    }

    pub fn sweep_grid(&self) -> Vec<f64> {
        if self.grid.is_empty() {
            vec![self.config.eps]
        } else {
            self.grid.clone()
        }
    }
}

pub fn default_eps(method: Method) -> f64 {
    match method {
        Method::Pgap | Method::Fpgap => 0.11,
        Method::Fgsm | Method::PgdLinf => 0.05,
        Method::FgmL2 => 1.5,
        Method::PgdL2 => 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub model: PathBuf,
    pub train: TrainSection,
    pub evaluation: EvaluationConfig,
    pub attacks: Vec<AttackSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mnist = PathBuf::from("data/mnist");
        Self {
            seed: 1,
            workers: 1,
            output_dir: default_output_dir(),
            dataset: DatasetConfig {
                images: mnist.join("test-images-idx3-ubyte.gz"),
                labels: mnist.join("test-labels-idx1-ubyte.gz"),
                limit: None,
                shuffle: false,
            },
            model: PathBuf::from("model.bin"),
            train: TrainSection {
                images: mnist.join("train-images-idx3-ubyte.gz"),
                labels: mnist.join("train-labels-idx1-ubyte.gz"),
                held_out_images: Some(mnist.join("test-images-idx3-ubyte.gz")),
                held_out_labels: Some(mnist.join("test-labels-idx1-ubyte.gz")),
                config: TrainConfig::default(),
            },
            evaluation: EvaluationConfig::default(),
            attacks: Vec::new(),
        }
    }
}

/// `$PGAP_OUT_DIR`, or `pgap-out` when unset.
pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
}

/// Where an entry came from, for error messages.
fn at(e: &Entry) -> String {
    if e.line == 0 {
        format!("override {}", e.key)
    } else {
        format!("line {}", e.line)
    }
}

fn parse_num<T: std::str::FromStr>(e: &Entry) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| Error::Config(format!("{}: {} = {:?} is not a valid number", at(e), e.key, e.value)))
}

fn parse_bool(e: &Entry) -> Result<bool> {
    match e.value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{}: {} expects a boolean", at(e), e.key))),
    }
}

/// `a, b, c` or `lo:hi:n` (inclusive, `n` points).
pub fn parse_grid(text: &str) -> std::result::Result<Vec<f64>, String> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    if let [lo, hi, n] = text.split(':').collect::<Vec<_>>()[..] {
        let lo: f64 = lo.trim().parse().map_err(|_| format!("bad range start {lo:?}"))?;
        let hi: f64 = hi.trim().parse().map_err(|_| format!("bad range end {hi:?}"))?;
        let n: usize = n.trim().parse().map_err(|_| format!("bad point count {n:?}"))?;
        return Ok(linspace(lo, hi, n));
    }
    text.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad grid value {t:?}")))
        .collect()
}

fn grid_entry(e: &Entry) -> Result<Vec<f64>> {
    parse_grid(&e.value).map_err(|m| Error::Config(format!("{}: {}: {m}", at(e), e.key)))
}

fn unknown(section: &str, e: &Entry) -> Error {
    let place = if section.is_empty() {
        "top level".to_string()
    } else {
        format!("[{section}]")
    };
    Error::Config(format!("{}: unknown key {:?} in {place}", at(e), e.key))
}

fn parse_window(e: &Entry) -> Result<Window> {
    match e.value.to_ascii_lowercase().as_str() {
        "gaussian" => Ok(Window::gaussian()),
        "uniform" => Ok(Window::uniform()),
        _ => Err(Error::Config(format!("{}: window must be gaussian or uniform", at(e)))),
    }
}

fn parse_attack(label: &str, entries: &[Entry]) -> Result<AttackSpec> {
    let method = match entries.iter().find(|e| e.key == "method") {
        Some(e) => e.value.parse::<Method>()?,
        None => label.parse::<Method>()?,
    };
    let mut spec = AttackSpec::new(method);
    spec.name = label.to_string();
    for e in entries {
        attack_entry(&mut spec, e)?;
    }
    Ok(spec)
}

fn attack_entry(spec: &mut AttackSpec, e: &Entry) -> Result<()> {
    let cfg = &mut spec.config;
    match e.key.as_str() {
        "method" => cfg.method = e.value.parse()?,
        "eps" => cfg.eps = parse_num(e)?,
        "eps1" => cfg.eps1 = parse_num(e)?,
        "iterations" | "iters" => cfg.iterations = parse_num(e)?,
        "step" => cfg.step_size = Some(parse_num(e)?),
        "grid" => spec.grid = grid_entry(e)?,
        "loss" => {
            cfg.loss.kind = match e.value.to_ascii_lowercase().as_str() {
                "cw" => LossKind::Cw,
                "cross_entropy" | "ce" => LossKind::CrossEntropy,
                _ => return Err(Error::Config(format!("{}: loss must be cw or cross_entropy", at(e)))),
            }
        }
        "confidence" => cfg.loss.cw_confidence = parse_num(e)?,
        "clip" => {
            cfg.clip_mode = match e.value.as_str() {
                "none" => ClipMode::None,
                "final" => ClipMode::Final,
                "per_iter" => ClipMode::PerIter,
                _ => return Err(Error::Config(format!("{}: clip must be none, final or per_iter", at(e)))),
            }
        }
        "anchor" => {
            cfg.anchor = match e.value.as_str() {
                "current_iterate" => ConstraintAnchor::CurrentIterate,
                "original" => ConstraintAnchor::Original,
                _ => {
                    return Err(Error::Config(format!(
                        "{}: anchor must be current_iterate or original",
                        at(e)
                    )))
                }
            }
        }
        "radius_form" => {
            cfg.radius_form = match e.value.as_str() {
                "derived" => RadiusForm::Derived,
                "printed" => RadiusForm::Printed,
                _ => return Err(Error::Config(format!("{}: radius_form must be derived or printed", at(e)))),
            }
        }
        "trace" => cfg.record_trace = parse_bool(e)?,
        _ => return Err(unknown(&format!("attack {}", spec.name), e)),
    }
    Ok(())
}

fn resolve(base: &Path, v: &str) -> PathBuf {
    let p = PathBuf::from(v);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Reads a config file; a missing file is an error naming its path.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&text, &base).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }

    /// Parses config text, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut output_set = false;
        let mut names = Vec::new();
        for section in parse_kv(text)? {
            let name = section.name.as_str();
            if name == "attack" {
                let label = section
                    .label
                    .clone()
                    .ok_or_else(|| Error::Config("[attack] sections need a name, as in [attack fpgap]".into()))?;
                if names.contains(&label) {
                    return Err(Error::Config(format!("attack {label:?} defined twice")));
                }
                names.push(label.clone());
                cfg.attacks.push(parse_attack(&label, &section.entries)?);
                continue;
            }
            if section.label.is_some() {
                return Err(Error::Config(format!("section [{name}] takes no name")));
            }
            for e in &section.entries {
                if name.is_empty() && e.key == "output" {
                    output_set = true;
                }
                cfg.apply(name, e, base)?;
            }
            if section.entries.is_empty() && !matches!(name, "" | "dataset" | "model" | "train" | "evaluation") {
                return Err(Error::Config(format!("unknown section [{name}]")));
            }
        }
        if !output_set {
            cfg.output_dir = default_output_dir();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, name: &str, e: &Entry, base: &Path) -> Result<()> {
        let path = || resolve(base, &e.value);
        match (name, e.key.as_str()) {
            ("", "seed") => {
                self.seed = parse_num(e)?;
                self.train.config.seed = self.seed;
            }
            ("", "workers") => self.workers = parse_num(e)?,
            ("", "output") => self.output_dir = path(),
            ("dataset", "images") => self.dataset.images = path(),
            ("dataset", "labels") => self.dataset.labels = path(),
            ("dataset", "limit") => self.dataset.limit = Some(parse_num(e)?),
            ("dataset", "shuffle") => self.dataset.shuffle = parse_bool(e)?,
            ("model", "path") => self.model = path(),
            ("train", "images") => self.train.images = path(),
            ("train", "labels") => self.train.labels = path(),
            ("train", "held_out_images") => self.train.held_out_images = Some(path()),
            ("train", "held_out_labels") => self.train.held_out_labels = Some(path()),
            ("train", "epochs") => self.train.config.epochs = parse_num(e)?,
            ("train", "batch_size") => self.train.config.batch_size = parse_num(e)?,
            ("train", "learning_rate") => self.train.config.learning_rate = parse_num(e)?,
            ("train", "momentum") => self.train.config.momentum = parse_num(e)?,
            ("train", "lr_decay") => self.train.config.lr_decay = parse_num(e)?,
            ("train", "decay_every") => self.train.config.decay_every = parse_num(e)?,
            ("train", "augment_shift") => self.train.config.augment_shift = parse_num(e)?,
            ("evaluation", "noise_threshold") => self.evaluation.noise_threshold = parse_num(e)?,
            ("evaluation", "gradcam_threshold") => self.evaluation.gradcam_threshold = parse_num(e)?,
            ("evaluation", "window") => self.evaluation.window = parse_window(e)?,
            ("evaluation", "thresholds") => self.evaluation.thresholds = grid_entry(e)?,
            ("evaluation", "maps") => self.evaluation.maps = parse_num(e)?,
            ("dataset" | "model" | "train" | "evaluation" | "", _) => return Err(unknown(name, e)),
            _ => return Err(Error::Config(format!("{}: unknown section [{name}]", at(e)))),
        }
        Ok(())
    }

    /// Overrides one key, addressed as `key`, `section.key` or
    /// `attack.NAME.key`. A new attack name adds an attack whose method is
    /// taken from the name. Relative paths resolve against the working
    /// directory.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let (section, key) = match path.rsplit_once('.') {
            Some((s, k)) => (s, k),
            None => ("", path),
        };
        let e = Entry {
            key: key.trim().to_ascii_lowercase(),
            value: value.trim().to_string(),
            line: 0,
        };
        if let Some(label) = section.strip_prefix("attack.") {
            let idx = match self.attacks.iter().position(|a| a.name == label) {
                Some(i) => i,
                None => {
                    let method = if e.key == "method" { &e.value } else { label };
                    let mut spec = AttackSpec::new(method.parse()?);
                    spec.name = label.to_string();
                    self.attacks.push(spec);
                    self.attacks.len() - 1
                }
            };
            attack_entry(&mut self.attacks[idx], &e)?;
        } else {
            self.apply(section, &e, Path::new(""))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        let e = &self.evaluation;
        for (name, v) in [("noise_threshold", e.noise_threshold), ("gradcam_threshold", e.gradcam_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if let Some(t) = e.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Config(format!("noise threshold grid value {t} outside [0, 1]")));
        }
        for a in &self.attacks {
            a.config
                .validate()
                .map_err(|err| Error::Config(format!("attack {}: {err}", a.name)))?;
            if let Some(bad) = a.grid.iter().find(|v| !(**v > 0.0)) {
                return Err(Error::Config(format!("attack {}: grid value {bad} must be > 0", a.name)));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring where outputs go
    /// and how many workers run.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        canon.workers = 1;
        let json = serde_json::to_vec(&canon).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
