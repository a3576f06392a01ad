use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pgap::attacks::Method;
use pgap::experiment::{self, AttackSpec, ExperimentConfig};
use pgap::nn::{load_model, LossSpec};

/// SSIM-constrained adversarial attacks and perturbation-placement metrics.
#[derive(Parser, Debug)]
#[command(name = "pgap", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags override the matching config keys.
#[derive(Args, Debug)]
struct Common {
    /// Experiment config (key = value with [section] headers).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Restrict to one attack: a configured attack name or a method
    /// (pgap, fpgap, fgsm, fgm_l2, pgd_linf, pgd_l2).
    #[arg(long, global = true, value_name = "NAME")]
    method: Option<String>,
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    iters: Option<u32>,
    #[arg(long = "noise-threshold", global = true, value_name = "T")]
    noise_threshold: Option<f64>,
    /// Output directory (default: $PGAP_OUT_DIR or ./pgap-out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    workers: Option<u32>,
    /// Any config key, as `key`, `section.key` or `attack.NAME.key`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the default classifier and save it to the model path.
    Train,
    /// Attack one dataset image; writes an adversarial PGM and a JSON outcome.
    Attack {
        /// Dataset position of the image.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Full run: outcomes, metrics, threshold and quality sweeps.
    Evaluate,
    /// Quality/fooling-rate sweep over each attack's ε grid.
    Sweep {
        /// ε values for every selected attack, as `a, b` or `lo:hi:n`.
        #[arg(long)]
        grid: Option<String>,
    },
    /// Write original, adversarial, difference, SSIM, noise and saliency maps.
    Maps {
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Compare analytic gradients with central finite differences.
    Gradeval {
        #[arg(long, default_value_t = 20)]
        images: usize,
        /// Probed coordinates per image, for inputs and for parameters.
        #[arg(long, default_value_t = 10)]
        coords: usize,
        /// Exit nonzero when the max relative error exceeds this.
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

fn load_config(c: &Common, fallback_method: Option<Method>) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k, v).with_context(|| format!("--set {kv}"))?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.train.config.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.workers = w as usize;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(t) = c.noise_threshold {
        cfg.evaluation.noise_threshold = t;
    }
    match &c.method {
        Some(name) => {
            let spec = match cfg.attacks.iter().find(|a| &a.name == name) {
                Some(a) => a.clone(),
                None => {
                    let m: Method = name.parse()?;
                    match cfg.attacks.iter().find(|a| a.config.method == m) {
                        Some(a) => a.clone(),
                        None => AttackSpec::new(m),
                    }
                }
            };
            cfg.attacks = vec![spec];
        }
        None => {
            if cfg.attacks.is_empty() {
                if let Some(m) = fallback_method {
                    cfg.attacks.push(AttackSpec::new(m));
                }
            }
        }
    }
    for a in &mut cfg.attacks {
        if let Some(e) = c.eps {
            a.config.eps = e;
        }
        if let Some(i) = c.iters {
            a.config.iterations = i as usize;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Train => {
            let cfg = load_config(c, None)?;
            let (_, report) = experiment::train_model(&cfg)?;
            for e in &report.history {
                match e.held_out_accuracy {
                    Some(a) => println!("epoch {:>2}  loss {:.4}  held-out {:.4}", e.epoch + 1, e.mean_loss, a),
                    None => println!("epoch {:>2}  loss {:.4}", e.epoch + 1, e.mean_loss),
                }
            }
            println!("model written to {}", cfg.model.display());
        }
        Command::Attack { index } => {
            let cfg = load_config(c, Some(Method::Fpgap))?;
            let model = load_model(&cfg.model)?;
            let r = experiment::attack_single(&cfg, &model, index)?;
            let s = &r.summary;
            println!(
                "{} image {}: label {} -> {} ({}) after {} iterations",
                r.attack,
                index,
                s.pre_label,
                s.final_label,
                if s.success { "fooled" } else { "not fooled" },
                s.iterations
            );
            if let Some(q) = &s.quality {
                println!("ssim {:.4}  psnr {:.2} dB", q.ssim, q.psnr);
            }
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::Evaluate => {
            let cfg = load_config(c, None)?;
            let rec = experiment::run_experiment(&cfg)?;
            println!(
                "{} images, model accuracy {:.4}, config {}",
                rec.dataset.n_images,
                rec.dataset.accuracy,
                &rec.config_hash[..12]
            );
            for a in &rec.attacks {
                print!("{:<10} fr {:.4}  ssim {:.4}", a.name, a.fooling_rate, a.avg_ssim);
                if let Some(m) = &a.metrics {
                    print!(
                        "  precision {:.4}  recall {:.4}  iou {:.4}  iou_outside {:.4}",
                        m.mean.precision, m.mean.recall, m.mean.iou, m.mean.iou_outside
                    );
                }
                println!();
            }
            if rec.partial_failures > 0 {
                eprintln!("warning: {} image-level failures recorded in outcomes.json", rec.partial_failures);
            }
            println!("outputs in {}", cfg.output_dir.display());
        }
        Command::Sweep { grid } => {
            let mut cfg = load_config(c, None)?;
            if let Some(g) = grid {
                let g = pgap::experiment::config::parse_grid(&g).map_err(|m| anyhow::anyhow!("--grid: {m}"))?;
                cfg.attacks.iter_mut().for_each(|a| a.grid = g.clone());
            } else if let Some(e) = c.eps {
                cfg.attacks.iter_mut().for_each(|a| a.grid = vec![e]);
            }
            cfg.validate()?;
            if cfg.attacks.is_empty() {
                bail!("no attacks to sweep; add [attack NAME] sections or pass --method");
            }
            let model = load_model(&cfg.model)?;
            let sel = experiment::load_selection(&cfg)?;
            for r in experiment::run_sweep(&cfg, &model, &sel)? {
                println!(
                    "{:<10} eps {:<8} fr {:.4}  ssim {:.4}  psnr {:.2}",
                    r.method, r.eps, r.fooling_rate, r.avg_ssim, r.avg_psnr
                );
            }
            println!("wrote {}", cfg.output_dir.join("sweep.csv").display());
        }
        Command::Maps { count } => {
            let cfg = load_config(c, Some(Method::Fpgap))?;
            let model = load_model(&cfg.model)?;
            let sel = experiment::load_selection(&cfg)?;
            let dir = experiment::emit_maps(&cfg, &model, &sel, count)?;
            println!("maps in {}", dir.display());
        }
        Command::Gradeval { images, coords, tolerance } => {
            let cfg = load_config(c, None)?;
            let model = load_model(&cfg.model)?;
            let sel = experiment::load_selection(&cfg)?;
            let loss = cfg.attacks.first().map_or(LossSpec::cross_entropy(), |a| a.config.loss);
            let g = experiment::gradient_eval(&cfg, &model, &sel, images, coords, &loss)?;
            std::fs::create_dir_all(&cfg.output_dir)
                .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
            let path = cfg.output_dir.join("gradeval.json");
            std::fs::write(&path, serde_json::to_string_pretty(&g)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            println!(
                "input: {} checked ({} skipped at kinks), max rel error {:.3e}",
                g.input.checked, g.input.skipped, g.input.max_rel_error
            );
            println!(
                "params: {} checked ({} skipped at kinks), max rel error {:.3e}",
                g.params.checked, g.params.skipped, g.params.max_rel_error
            );
            let worst = g.input.max_rel_error.max(g.params.max_rel_error);
            if let Some(t) = tolerance {
                if worst > t {
                    bail!("max relative error {worst:.3e} exceeds tolerance {t:e}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut last = e.to_string();
            for cause in e.chain().skip(1).map(|c| c.to_string()) {
                if !last.contains(&cause) {
                    eprintln!("  caused by: {cause}");
                }
                last = cause;
            }
            ExitCode::FAILURE
        }
    }
}
