use pgap::evaluation::{
    confusion_counts, default_threshold_grid, fooling_rate, linspace, metrics_suite, noise_mask, quality_fr_sweep,
    threshold_sweep, tune_eps, AttackResult, Confusion, DistortionField, EvalCase, Ratios,
};
use pgap::mask::{BinaryMask, MaskSource};
use pgap::quality::{SsimConstants, Window};
use pgap::Image;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn consts() -> SsimConstants {
    SsimConstants::default()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, 1, (0..h * w).map(|_| rng.gen()).collect()).unwrap()
}

fn mask(h: usize, w: usize, data: Vec<bool>, source: MaskSource) -> BinaryMask {
    BinaryMask::new(h, w, data, 0.5, source).unwrap()
}

/// Pixel counts through the 0/1 encodings: |A∧B| = Σ a·b.
fn overlap(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() as usize
}

fn masks_strategy() -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<bool>)> {
    (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            proptest::collection::vec(any::<bool>(), h * w),
            proptest::collection::vec(any::<bool>(), h * w),
        )
    })
}

proptest! {
    #[test]
    fn confusion_identities((h, w, n, g) in masks_strategy()) {
        let nm = mask(h, w, n, MaskSource::Noise);
        let gm = mask(h, w, g, MaskSource::Saliency);
        let c = confusion_counts(&nm, &gm).unwrap();
        prop_assert_eq!(c.total(), h * w);
        prop_assert_eq!(c.tp + c.fp, nm.count());
        prop_assert_eq!(c.tp + c.fn_, gm.count());

        let (nv, gv) = (nm.to_values(), gm.to_values());
        let not = |v: &[f64]| v.iter().map(|x| 1.0 - x).collect::<Vec<_>>();
        prop_assert_eq!(c.tp, overlap(&nv, &gv));
        prop_assert_eq!(c.fp, overlap(&nv, &not(&gv)));
        prop_assert_eq!(c.fn_, overlap(&not(&nv), &gv));
        prop_assert_eq!(c.tn, overlap(&not(&nv), &not(&gv)));

        let r = Ratios::from_counts(&c);
        for v in [r.precision, r.recall, r.iou, r.iou_outside, r.pixels_perturbed] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((r.pixels_perturbed - nm.count() as f64 / (h * w) as f64).abs() < 1e-15);
        // IOU never exceeds precision or recall.
        prop_assert!(r.iou <= r.precision + 1e-15 || nm.count() == 0);
        prop_assert!(r.iou <= r.recall + 1e-15);
    }

    #[test]
    fn fooling_rate_ignores_order(pairs in proptest::collection::vec((0usize..10, 0usize..10), 1..60), seed in any::<u64>()) {
        let (pre, post): (Vec<usize>, Vec<usize>) = pairs.iter().cloned().unzip();
        let fr = fooling_rate(&pre, &post).unwrap();
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        prop_assert_eq!(fooling_rate(&a, &b).unwrap(), fr);
        let changed = pairs.iter().filter(|(p, q)| p != q).count();
        prop_assert_eq!(fr, changed as f64 / pairs.len() as f64);
    }
}

#[test]
fn mismatched_inputs_are_rejected() {
    let a = mask(2, 3, vec![false; 6], MaskSource::Noise);
    let b = mask(3, 2, vec![false; 6], MaskSource::Saliency);
    assert!(confusion_counts(&a, &b).is_err());
    assert!(fooling_rate(&[1, 2], &[1]).is_err());
    assert!(fooling_rate(&[], &[]).is_err());
    assert!(metrics_suite(&[], 0.1, 0.5).is_err());
    assert!(BinaryMask::new(2, 2, vec![true; 3], 0.5, MaskSource::Noise).is_err());
}

#[test]
fn empty_denominator_conventions() {
    let none = Ratios::from_counts(&Confusion { tp: 0, fp: 0, fn_: 0, tn: 9 });
    assert_eq!(
        (none.precision, none.recall, none.iou, none.iou_outside, none.pixels_perturbed),
        (0.0, 1.0, 0.0, 0.0, 0.0)
    );
    let all = Ratios::from_counts(&Confusion { tp: 4, fp: 0, fn_: 0, tn: 0 });
    assert_eq!((all.precision, all.recall, all.iou, all.pixels_perturbed), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn identical_images_have_no_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let x = random_image(&mut rng, 28, 28);
        for window in [Window::gaussian(), Window::uniform()] {
            let field = DistortionField::compute(&x, &x, window, &consts()).unwrap();
            assert!(field.values.iter().all(|v| *v == 0.0));
            for t in [0.0, 0.01, 0.5, 1.0] {
                assert_eq!(noise_mask(&x, &x, t, window, &consts()).unwrap().count(), 0);
            }
        }
    }
}

#[test]
fn noise_threshold_outside_unit_interval_is_rejected() {
    let x = Image::filled(12, 12, 1, 0.3);
    for t in [-0.1, 1.5, f64::NAN] {
        assert!(noise_mask(&x, &x, t, Window::gaussian(), &consts()).is_err());
    }
}

/// A 4×4 corruption only marks pixels whose edge-padded window overlaps it.
#[test]
fn corruption_stays_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (32, 32);
    for (br, bc) in [(0, 0), (14, 9), (28, 28)] {
        let x = random_image(&mut rng, h, w);
        let mut data = x.data().to_vec();
        for r in br..br + 4 {
            for c in bc..bc + 4 {
                data[r * w + c] = 1.0 - data[r * w + c];
            }
        }
        let y = x.with_data(data);
        for window in [Window::gaussian(), Window::uniform()] {
            let size = window.size();
            let (mh, mw) = (h - size + 1, w - size + 1);
            let before = (size - 1) / 2;
            let m = noise_mask(&x, &y, 0.0, window, &consts()).unwrap();
            for r in 0..h {
                for c in 0..w {
                    let wr = (r as i64 - before as i64).clamp(0, mh as i64 - 1) as usize;
                    let wc = (c as i64 - before as i64).clamp(0, mw as i64 - 1) as usize;
                    let hits = wr <= br + 3 && wr + size > br && wc <= bc + 3 && wc + size > bc;
                    assert_eq!(m.get(r, c), hits, "block ({br},{bc}) pixel ({r},{c}) window {size}");
                }
            }
        }
    }
}

fn random_cases(rng: &mut ChaCha8Rng, n: usize) -> Vec<EvalCase> {
    (0..n)
        .map(|_| {
            let x = random_image(rng, 20, 20);
            let amp = rng.gen_range(0.02..0.3);
            let y = x.with_data(x.data().iter().map(|v| v + amp * (rng.gen::<f64>() - 0.5)).collect()).clipped();
            let distortion = DistortionField::compute(&x, &y, Window::gaussian(), &consts()).unwrap();
            let saliency = BinaryMask::new(20, 20, (0..400).map(|_| rng.gen_bool(0.3)).collect(), 0.5, MaskSource::Saliency)
                .unwrap();
            EvalCase { distortion, saliency }
        })
        .collect()
}

#[test]
fn raising_the_noise_threshold_shrinks_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = random_cases(&mut rng, 6);
    let grid = default_threshold_grid();
    assert_eq!(grid.len(), 25);
    assert_eq!((grid[0], grid[24]), (0.01, 0.5));
    let records = threshold_sweep(&cases, &grid).unwrap();
    for pair in records.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        assert!(b.noise_threshold > a.noise_threshold);
        assert!(b.mean.pixels_perturbed <= a.mean.pixels_perturbed);
        assert!(b.mean.recall <= a.mean.recall);
        assert!(b.pooled.pixels_perturbed <= a.pooled.pixels_perturbed);
        for (pa, pb) in a.per_image.iter().zip(&b.per_image) {
            assert!(pb.counts.tp + pb.counts.fp <= pa.counts.tp + pa.counts.fp);
            assert!(pb.counts.tp <= pa.counts.tp);
        }
    }
    for case in &cases {
        for pair in grid.windows(2) {
            assert!(case.distortion.mask(pair[1]).unwrap().is_subset_of(&case.distortion.mask(pair[0]).unwrap()));
        }
    }
}

#[test]
fn threshold_above_every_distortion_perturbs_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cases = random_cases(&mut rng, 4);
    let top = cases
        .iter()
        .flat_map(|c| c.distortion.values.iter().cloned())
        .fold(0.0, f64::max);
    assert!(top < 1.0);
    let rec = &threshold_sweep(&cases, &[top]).unwrap()[0];
    assert_eq!(rec.mean.pixels_perturbed, 0.0);
    assert_eq!(rec.mean.precision, 0.0);
    assert_eq!(rec.pooled.precision, 0.0);
    assert_eq!(rec.mean.iou, 0.0);
    assert_eq!(rec.mean.iou_outside, 0.0);
    assert_eq!(rec.gradcam_threshold, 0.5);
}

#[test]
fn mean_and_pooled_ratios_follow_their_definitions() {
    let counts = [
        Confusion { tp: 1, fp: 0, fn_: 9, tn: 90 },
        Confusion { tp: 30, fp: 30, fn_: 10, tn: 30 },
        Confusion { tp: 0, fp: 5, fn_: 0, tn: 95 },
    ];
    let rec = metrics_suite(&counts, 0.1, 0.5).unwrap();
    assert_eq!(rec.n_images, 3);
    assert_eq!(rec.per_image.len(), 3);

    let precision = [1.0, 0.5, 0.0];
    let recall = [0.1, 0.75, 1.0];
    let iou = [0.1, 30.0 / 70.0, 0.0];
    let outside = [0.0, 30.0 / 90.0, 5.0 / 100.0];
    let pixels = [0.01, 0.6, 0.05];
    let mean = |v: [f64; 3]| v.iter().sum::<f64>() / 3.0;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
    assert!(close(rec.mean.precision, mean(precision)));
    assert!(close(rec.mean.recall, mean(recall)));
    assert!(close(rec.mean.iou, mean(iou)));
    assert!(close(rec.mean.iou_outside, mean(outside)));
    assert!(close(rec.mean.pixels_perturbed, mean(pixels)));

    // Pooled: tp 31, fp 35, fn 19, tn 215.
    assert!(close(rec.pooled.precision, 31.0 / 66.0));
    assert!(close(rec.pooled.recall, 31.0 / 50.0));
    assert!(close(rec.pooled.iou, 31.0 / 85.0));
    assert!(close(rec.pooled.iou_outside, 35.0 / 281.0));
    assert!(close(rec.pooled.pixels_perturbed, 66.0 / 300.0));
}

#[test]
fn identity_attack_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images: Vec<Image> = (0..7).map(|_| random_image(&mut rng, 16, 16)).collect();
    let labels: Vec<usize> = (0..7).map(|i| i % 10).collect();
    let grid = linspace(0.01, 0.3, 4);
    let rows = quality_fr_sweep("identity", &grid, &images, &labels, Window::gaussian(), &consts(), |imgs, pre, _| {
        Ok(imgs
            .iter()
            .zip(pre)
            .map(|(x, l)| AttackResult { adversarial: x.clone(), post_label: *l })
            .collect())
    })
    .unwrap();
    assert_eq!(rows.len(), 4);
    for (row, eps) in rows.iter().zip(&grid) {
        assert_eq!(row.eps, *eps);
        assert_eq!(row.fooling_rate, 0.0);
        assert_eq!(row.avg_ssim, 1.0);
        assert_eq!(row.avg_ssim_global, 1.0);
        assert_eq!(row.avg_psnr, f64::INFINITY);
        assert_eq!(row.n_images, 7);
    }
    assert!(quality_fr_sweep("x", &[], &images, &labels, Window::gaussian(), &consts(), |_, _, _| Ok(vec![])).is_err());
}

#[test]
fn tuning_lands_in_the_band() {
    let t = tune_eps(0.01, 2.0, (0.83, 0.87), 30, |e| Ok(1.0 / (1.0 + e * e))).unwrap();
    assert!(t.matched);
    assert!((0.83..=0.87).contains(&t.avg_ssim));
    assert!((1.0 / (1.0 + t.eps * t.eps) - t.avg_ssim).abs() < 1e-15);
    // A band the curve never reaches returns the closest try, unmatched.
    let t = tune_eps(0.01, 0.1, (0.5, 0.6), 12, |e| Ok(1.0 - e)).unwrap();
    assert!(!t.matched);
    assert!(t.eps > 0.09);
    assert!(tune_eps(0.0, 1.0, (0.5, 0.6), 5, |_| Ok(0.5)).is_err());
}
