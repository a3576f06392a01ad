use std::fs;
use std::path::{Path, PathBuf};

use pgap::attacks::Method;
use pgap::dataset::{load_idx, save_idx, Dataset};
use pgap::evaluation::{confusion_counts, noise_mask};
use pgap::experiment::{run_with, select, AttackSpec, ExperimentConfig, Selection};
use pgap::nn::ClassifierModel;
use pgap::pgm::{load_pgm, save_map_pgm, Grid};
use pgap::quality::SsimConstants;

fn mnist() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn test_set() -> Dataset {
    let m = mnist();
    load_idx(m.join("test-images-idx3-ubyte.gz"), m.join("test-labels-idx1-ubyte.gz")).unwrap()
}

fn setup(n: usize) -> (ClassifierModel, Selection) {
    let model = ClassifierModel::default_architecture((28, 28, 1), 10, 17).unwrap();
    (model, select(&test_set(), Some(n), true, 3))
}

fn config(out: &Path, methods: &[(Method, f64)]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 3,
        output_dir: out.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.evaluation.thresholds = vec![0.05, 0.1, 0.2];
    cfg.evaluation.maps = 1;
    for &(m, eps) in methods {
        let mut spec = AttackSpec::new(m);
        spec.config.eps = eps;
        spec.config.iterations = 8;
        spec.grid = vec![eps / 2.0, eps];
        cfg.attacks.push(spec);
    }
    cfg
}

#[test]
fn test_set_images_are_28_by_28() {
    let d = test_set();
    assert!(!d.is_empty());
    assert_eq!(d.images.len(), d.labels.len());
    assert!(d.images.iter().all(|x| x.shape() == (28, 28, 1) && x.in_range()));
    assert!(d.labels.iter().all(|l| *l < 10));
}

#[test]
fn idx_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let d = test_set().truncated(50);
    let (ip, lp) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
    save_idx(&d, &ip, &lp).unwrap();
    let back = load_idx(&ip, &lp).unwrap();
    assert_eq!(back, d);
    save_idx(&back, &ip, &lp).unwrap();
    assert_eq!(load_idx(&ip, &lp).unwrap(), d);
}

#[test]
fn pgm_files_round_trip_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let x = &test_set().images[7];
    let path = dir.path().join("x.pgm");
    save_map_pgm(x, &path, Some("seed 3")).unwrap();
    let back = load_pgm(&path).unwrap();
    assert_eq!((back.height, back.width), (28, 28));
    assert_eq!(back.comments, vec!["seed 3".to_string()]);
    for (a, b) in back.values.iter().zip(x.data()) {
        assert!((a - b).abs() <= 1.0 / 255.0 + 1e-12);
    }

    // A noise mask written as {0, 255}.
    let y = x.with_data(x.data().iter().map(|v| (v + 0.2).min(1.0)).collect());
    let m = noise_mask(x, &y, 0.1, Default::default(), &SsimConstants::default()).unwrap();
    let values = m.to_values();
    save_map_pgm(&Grid { height: 28, width: 28, values: &values }, &path, None).unwrap();
    let raw = fs::read(&path).unwrap();
    assert!(raw.starts_with(b"P5"));
    assert!(raw[raw.len() - 784..].iter().all(|b| *b == 0 || *b == 255));
    assert_eq!(load_pgm(&path).unwrap().values, values);
}

#[test]
fn empty_attack_list_records_dataset_stats_only() {
    let dir = tempfile::tempdir().unwrap();
    let (model, sel) = setup(12);
    let cfg = config(dir.path(), &[]);
    let rec = run_with(&cfg, &model, &sel).unwrap();
    assert!(rec.attacks.is_empty());
    assert_eq!(rec.dataset.n_images, 12);
    assert_eq!(rec.dataset.label_counts.iter().sum::<usize>(), 12);
    let correct = sel
        .images
        .iter()
        .zip(&sel.labels)
        .filter(|(x, l)| model.predict(x).unwrap() == **l)
        .count();
    assert_eq!(rec.dataset.accuracy, correct as f64 / 12.0);
    assert_eq!(rec.partial_failures, 0);
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
}

#[test]
fn two_attacks_on_ten_images() {
    let dir = tempfile::tempdir().unwrap();
    let (model, sel) = setup(10);
    let cfg = config(dir.path(), &[(Method::Fpgap, 0.11), (Method::PgdLinf, 0.1)]);
    let rec = run_with(&cfg, &model, &sel).unwrap();
    assert_eq!(rec.attacks.len(), 2);
    let rows: usize = rec.attacks.iter().map(|a| a.outcomes.len()).sum();
    assert_eq!(rows, 20);
    for a in &rec.attacks {
        let m = a.metrics.as_ref().unwrap();
        assert_eq!(m.n_images, 10);
        assert_eq!(a.threshold_sweep.len(), 3);
        assert_eq!(a.sweep.len(), 2);
        let idx: Vec<usize> = a.outcomes.iter().map(|o| o.index).collect();
        assert_eq!(idx, sel.indices);
        let fooled = a.outcomes.iter().filter(|o| o.success).count();
        assert_eq!(a.fooling_rate, fooled as f64 / 10.0);
    }
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let sweep = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 5);
}

#[test]
fn per_image_counts_match_the_written_masks() {
    let dir = tempfile::tempdir().unwrap();
    let (model, sel) = setup(3);
    let cfg = config(dir.path(), &[(Method::Fpgap, 0.2)]);
    let rec = run_with(&cfg, &model, &sel).unwrap();
    let counts = &rec.attacks[0].metrics.as_ref().unwrap().per_image[0].counts;
    let maps = dir.path().join("maps/fpgap");
    let stem = format!("{:05}", sel.indices[0]);
    let noise = load_pgm(maps.join(format!("{stem}_noise.pgm"))).unwrap();
    let important = load_pgm(maps.join(format!("{stem}_important.pgm"))).unwrap();
    let as_mask = |p: &pgap::pgm::Pgm, source| {
        pgap::mask::BinaryMask::new(28, 28, p.values.iter().map(|v| *v > 0.5).collect(), 0.5, source).unwrap()
    };
    let c = confusion_counts(
        &as_mask(&noise, pgap::mask::MaskSource::Noise),
        &as_mask(&important, pgap::mask::MaskSource::Saliency),
    )
    .unwrap();
    assert_eq!(&c, counts);
}

#[test]
fn every_artifact_carries_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (model, sel) = setup(4);
    let cfg = config(dir.path(), &[(Method::Fpgap, 0.11), (Method::Fgsm, 0.1)]);
    let rec = run_with(&cfg, &model, &sel).unwrap();
    let hash = cfg.hash();
    assert_eq!(rec.config_hash, hash);
    assert_eq!(rec.seed, 3);
    let mut seen = 0;
    for entry in walk(dir.path()) {
        let bytes = fs::read(&entry).unwrap();
        let name = entry.file_name().unwrap().to_string_lossy().into_owned();
        if name.ends_with(".pgm") {
            let p = load_pgm(&entry).unwrap();
            assert!(p.comments.contains(&format!("config_hash {hash}")), "{name}");
            assert!(p.comments.contains(&"seed 3".to_string()), "{name}");
        } else if name.ends_with(".csv") {
            let text = String::from_utf8(bytes).unwrap();
            let mut lines = text.lines();
            assert!(lines.next().unwrap().ends_with("seed,config_hash"), "{name}");
            for l in lines {
                assert!(l.ends_with(&format!(",3,{hash}")), "{name}: {l}");
            }
        } else {
            let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            assert_eq!(v["config_hash"], hash.as_str(), "{name}");
            assert_eq!(v["seed"], 3, "{name}");
        }
        seen += 1;
    }
    // outcomes, metrics, thresholds, sweep, timings and 7 maps per attack.
    assert_eq!(seen, 5 + 2 * 7);
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn worker_count_does_not_change_results() {
    let (model, sel) = setup(6);
    let (d1, d3) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let one = config(d1.path(), &[(Method::Pgap, 0.11), (Method::PgdL2, 1.0)]);
    let three = ExperimentConfig {
        workers: 3,
        output_dir: d3.path().to_path_buf(),
        ..one.clone()
    };
    assert_eq!(one.hash(), three.hash());
    let a = run_with(&one, &model, &sel).unwrap();
    let b = run_with(&three, &model, &sel).unwrap();
    assert_eq!(a.attacks, b.attacks);
    assert_eq!(a.dataset, b.dataset);
    for name in ["metrics.csv", "sweep.csv", "threshold_sweep.csv"] {
        assert_eq!(fs::read(d1.path().join(name)).unwrap(), fs::read(d3.path().join(name)).unwrap());
    }
}

#[test]
fn overrides_change_the_hash() {
    let base = config(Path::new("x"), &[(Method::Fpgap, 0.11)]);
    let mut cfg = base.clone();
    cfg.set("evaluation.noise_threshold", "0.3").unwrap();
    assert_eq!(cfg.evaluation.noise_threshold, 0.3);
    assert_ne!(cfg.hash(), base.hash());
    cfg.set("attack.fpgap.eps", "0.2").unwrap();
    assert_eq!(cfg.attacks[0].config.eps, 0.2);
    cfg.set("attack.pgd_l2.eps", "1.5").unwrap();
    assert_eq!(cfg.attacks.len(), 2);
    assert_eq!(cfg.attacks[1].config.method, Method::PgdL2);
    cfg.set("seed", "9").unwrap();
    assert_eq!(cfg.seed, 9);
    assert!(cfg.set("evaluation.noise_threshold", "2").is_err());
    assert!(cfg.set("nothing.here", "1").is_err());
    let mut moved = base.clone();
    moved.output_dir = PathBuf::from("elsewhere");
    assert_eq!(moved.hash(), base.hash());
}
