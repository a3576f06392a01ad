use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_input_gradient, check_param_gradients};
use super::*;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
    Image::new(h, w, c, (0..h * w * c).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn randomize_biases(model: &mut ClassifierModel, rng: &mut ChaCha8Rng) {
    for layer in &mut model.layers {
        for b in &mut layer.bias {
            *b = rng.gen_range(-0.1..0.1);
        }
    }
}

/// Straight per-element forward pass over an HWC image.
fn naive_forward(model: &ClassifierModel, x: &Image) -> Vec<f64> {
    let (h, w, c) = x.shape();
    // act[ch][r][col]
    let mut act: Vec<Vec<Vec<f64>>> = (0..c)
        .map(|ch| (0..h).map(|r| (0..w).map(|col| x.get(r, col, ch)).collect()).collect())
        .collect();
    let mut flat: Option<Vec<f64>> = None;
    for layer in &model.layers {
        match layer.spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let (hh, ww) = (act[0].len(), act[0][0].len());
                let p = (kernel / 2) as i64;
                let mut out = vec![vec![vec![0.0; ww]; hh]; out_channels];
                for o in 0..out_channels {
                    for r in 0..hh {
                        for col in 0..ww {
                            let mut s = layer.bias[o];
                            for i in 0..in_channels {
                                for ky in 0..kernel {
                                    for kx in 0..kernel {
                                        let sr = r as i64 + ky as i64 - p;
                                        let sc = col as i64 + kx as i64 - p;
                                        if sr < 0 || sc < 0 || sr >= hh as i64 || sc >= ww as i64 {
                                            continue;
                                        }
                                        let wt = layer.weights
                                            [o * in_channels * kernel * kernel
                                                + i * kernel * kernel
                                                + ky * kernel
                                                + kx];
                                        s += wt * act[i][sr as usize][sc as usize];
                                    }
                                }
                            }
                            out[o][r][col] = s;
                        }
                    }
                }
                act = out;
            }
            LayerSpec::Relu => match flat.as_mut() {
                Some(f) => f.iter_mut().for_each(|v| *v = v.max(0.0)),
                None => act
                    .iter_mut()
                    .flatten()
                    .flatten()
                    .for_each(|v| *v = v.max(0.0)),
            },
            LayerSpec::MaxPool2 => {
                act = act
                    .iter()
                    .map(|plane| {
                        (0..plane.len() / 2)
                            .map(|r| {
                                (0..plane[0].len() / 2)
                                    .map(|col| {
                                        plane[2 * r][2 * col]
                                            .max(plane[2 * r][2 * col + 1])
                                            .max(plane[2 * r + 1][2 * col])
                                            .max(plane[2 * r + 1][2 * col + 1])
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect();
            }
            LayerSpec::Flatten => {
                flat = Some(act.iter().flatten().flatten().copied().collect());
            }
            LayerSpec::Dense { inputs, outputs } => {
                let input = flat.take().unwrap_or_else(|| act.iter().flatten().flatten().copied().collect());
                let out = (0..outputs)
                    .map(|j| {
                        layer.bias[j]
                            + (0..inputs)
                                .map(|i| layer.weights[j * inputs + i] * input[i])
                                .sum::<f64>()
                    })
                    .collect();
                flat = Some(out);
            }
        }
    }
    flat.unwrap()
}

#[test]
fn zero_model_gives_zero_logits() {
    let specs = ClassifierModel::default_specs((8, 8, 1), 4);
    let model = ClassifierModel::zeros((8, 8, 1), &specs).unwrap();
    let x = Image::filled(8, 8, 1, 0.7);
    assert_eq!(model.logits(&x).unwrap(), vec![0.0; 4]);
}

#[test]
fn dense_identity_passes_inputs_through() {
    let specs = [LayerSpec::Flatten, LayerSpec::Dense { inputs: 2, outputs: 2 }];
    let mut model = ClassifierModel::zeros((1, 2, 1), &specs).unwrap();
    model.layers[1].weights = vec![1.0, 0.0, 0.0, 1.0];
    let x = Image::new(1, 2, 1, vec![0.25, 0.75]).unwrap();
    assert_eq!(model.logits(&x).unwrap(), vec![0.25, 0.75]);
}

#[test]
fn forward_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (shape, seed) in [((12, 12, 1), 1u64), ((8, 10, 3), 2), ((28, 28, 1), 3)] {
        let mut model = ClassifierModel::default_architecture(shape, 5, seed).unwrap();
        randomize_biases(&mut model, &mut rng);
        let x = random_image(&mut rng, shape.0, shape.1, shape.2);
        let fast = model.logits(&x).unwrap();
        let slow = naive_forward(&model, &x);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn shape_mismatch_rejected() {
    let model = ClassifierModel::default_architecture((8, 8, 1), 3, 1).unwrap();
    assert!(matches!(model.forward(&Image::zeros(8, 9, 1)), Err(Error::Dimension(_))));
}

#[test]
fn inconsistent_specs_rejected() {
    let specs = [LayerSpec::Flatten, LayerSpec::Dense { inputs: 5, outputs: 2 }];
    assert!(ClassifierModel::zeros((2, 2, 1), &specs).is_err());
}

#[test]
fn argmax_tie_break() {
    assert_eq!(argmax(&[0.0, 3.0, 1.0]), 1);
    assert_eq!(argmax(&[2.0, 2.0, 0.0]), 0);
}

#[test]
fn predict_is_argmax_of_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = ClassifierModel::default_architecture((28, 28, 1), 10, 4).unwrap();
    for _ in 0..5 {
        let x = random_image(&mut rng, 28, 28, 1);
        assert_eq!(model.predict(&x).unwrap(), argmax(&model.logits(&x).unwrap()));
    }
}

#[test]
fn linear_model_input_gradient_is_w_transpose_residual() {
    // 3x3 single-channel image, dense 9 -> 3, cross-entropy.
    let specs = [LayerSpec::Flatten, LayerSpec::Dense { inputs: 9, outputs: 3 }];
    let mut model = ClassifierModel::zeros((3, 3, 1), &specs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for w in &mut model.layers[1].weights {
        *w = rng.gen_range(-1.0..1.0);
    }
    model.layers[1].bias = vec![0.1, -0.2, 0.05];
    let x = random_image(&mut rng, 3, 3, 1);
    let y = 2;
    let z = model.logits(&x).unwrap();
    let total: f64 = z.iter().map(|v| v.exp()).sum();
    let residual: Vec<f64> = (0..3)
        .map(|j| z[j].exp() / total - if j == y { 1.0 } else { 0.0 })
        .collect();
    let g = model.input_gradient(&x, y, &LossSpec::cross_entropy()).unwrap();
    for i in 0..9 {
        let want: f64 = (0..3).map(|j| model.layers[1].weights[j * 9 + i] * residual[j]).sum();
        assert!((g.data[i] - want).abs() < 1e-12);
    }
}

#[test]
fn saturated_cw_gives_zero_field() {
    let specs = [LayerSpec::Flatten, LayerSpec::Dense { inputs: 2, outputs: 2 }];
    let mut model = ClassifierModel::zeros((1, 2, 1), &specs).unwrap();
    model.layers[1].weights = vec![1.0, 0.0, 0.0, 1.0];
    model.layers[1].bias = vec![0.0, 20.0];
    let x = Image::new(1, 2, 1, vec![0.5, 0.5]).unwrap();
    let g = model.input_gradient(&x, 0, &LossSpec::cw(5.0)).unwrap();
    assert!(g.data.iter().all(|v| *v == 0.0));
}

#[test]
fn input_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for seed in 0..3 {
        let mut model = ClassifierModel::default_architecture((12, 12, 1), 4, seed).unwrap();
        randomize_biases(&mut model, &mut rng);
        assert!(model.param_count() < 1000 + 1000);
        let x = random_image(&mut rng, 12, 12, 1);
        for spec in [LossSpec::cross_entropy(), LossSpec::cw(50.0)] {
            let r = check_input_gradient(&model, &x, 1, &spec, None).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
            assert!(r.skipped <= 2, "{r:?}");
        }
    }
}

#[test]
fn param_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut model = ClassifierModel::default_architecture((8, 8, 2), 3, 7).unwrap();
    randomize_biases(&mut model, &mut rng);
    let x = random_image(&mut rng, 8, 8, 2);
    let all: Vec<usize> = (0..model.param_count()).collect();
    let r = check_param_gradients(&model, &x, 0, &LossSpec::cross_entropy(), &all).unwrap();
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn duplicate_batch_gives_same_mean_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let model = ClassifierModel::default_architecture((8, 8, 1), 3, 3).unwrap();
    let x = random_image(&mut rng, 8, 8, 1);
    let spec = LossSpec::cross_entropy();
    let (l1, g1) = model.parameter_gradients(&[x.clone()], &[1], &spec).unwrap();
    let (l2, g2) = model.parameter_gradients(&[x.clone(), x], &[1, 1], &spec).unwrap();
    assert!((l1 - l2).abs() < 1e-14);
    for (a, b) in g1.flat().iter().zip(g2.flat()) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn gradients_vanish_at_a_confident_minimum() {
    let specs = [LayerSpec::Flatten, LayerSpec::Dense { inputs: 2, outputs: 2 }];
    let mut model = ClassifierModel::zeros((1, 2, 1), &specs).unwrap();
    model.layers[1].bias = vec![60.0, 0.0];
    let x = Image::new(1, 2, 1, vec![0.3, 0.6]).unwrap();
    let (_, g) = model
        .parameter_gradients(&[x], &[0], &LossSpec::cross_entropy())
        .unwrap();
    assert!(g.max_abs() < 1e-20);
}

#[test]
fn empty_batch_is_an_error() {
    let model = ClassifierModel::default_architecture((8, 8, 1), 3, 3).unwrap();
    assert!(matches!(
        model.parameter_gradients(&[], &[], &LossSpec::cross_entropy()),
        Err(Error::Empty(_))
    ));
}

fn toy_dataset(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Image>, Vec<usize>) {
    let images: Vec<Image> = (0..n).map(|_| random_image(rng, 8, 8, 1)).collect();
    let labels = (0..n).map(|i| i % 3).collect();
    (images, labels)
}

#[test]
fn overfits_ten_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (images, labels) = toy_dataset(&mut rng, 10);
    let mut model = ClassifierModel::default_architecture((8, 8, 1), 3, 5).unwrap();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 10,
        learning_rate: 0.05,
        lr_decay: 1.0,
        augment_shift: 0,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &images, &labels, None, &LossSpec::cross_entropy(), &cfg).unwrap();
    let first_perfect = report
        .history
        .iter()
        .position(|e| e.train_accuracy == 1.0)
        .expect("never reached 100% train accuracy");
    assert!(first_perfect < 200);
    assert_eq!(accuracy(&model, &images, &labels).unwrap(), 1.0);
}

#[test]
fn training_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (images, labels) = toy_dataset(&mut rng, 24);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 5,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = ClassifierModel::default_architecture((8, 8, 1), 3, 6).unwrap();
        train(&mut m, &images, &labels, None, &LossSpec::cross_entropy(), &cfg).unwrap();
        m
    };
    let (a, b) = (run(), run());
    let bits = |m: &ClassifierModel| m.params_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn divergence_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let (images, labels) = toy_dataset(&mut rng, 8);
    let mut model = ClassifierModel::default_architecture((8, 8, 1), 3, 6).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 4,
        learning_rate: 1e300,
        ..TrainConfig::default()
    };
    let err = train(&mut model, &images, &labels, None, &LossSpec::cross_entropy(), &cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
}

#[test]
fn saved_model_predicts_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut model = ClassifierModel::default_architecture((8, 8, 1), 3, 8).unwrap();
    randomize_biases(&mut model, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    save_model(&model, &path).unwrap();
    let back = load_model(&path).unwrap();
    for _ in 0..10 {
        let x = random_image(&mut rng, 8, 8, 1);
        assert_eq!(model.logits(&x).unwrap(), back.logits(&x).unwrap());
    }
}
