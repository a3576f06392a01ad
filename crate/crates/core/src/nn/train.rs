use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassifierModel, LossSpec, ParamGrads};
use crate::error::{Error, Result};
use crate::image::Image;

/// Mini-batch SGD with momentum and step learning-rate decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Multiply the learning rate by this factor every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Max random translation (pixels, zero fill) applied to training images.
    pub augment_shift: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 32,
            learning_rate: 0.03,
            momentum: 0.9,
            lr_decay: 0.5,
            decay_every: 6,
            augment_shift: 2,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub held_out_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
}

impl TrainReport {
    pub fn final_held_out_accuracy(&self) -> Option<f64> {
        self.history.last().and_then(|e| e.held_out_accuracy)
    }
}

/// Fraction of `images` the model labels correctly.
pub fn accuracy(model: &ClassifierModel, images: &[Image], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut hits = 0usize;
    for (x, &y) in images.iter().zip(labels) {
        if model.predict(x)? == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

fn shifted(img: &Image, dy: isize, dx: isize) -> Image {
    let (h, w, c) = img.shape();
    let mut data = vec![0.0; img.len()];
    for r in 0..h as isize {
        let sr = r - dy;
        if sr < 0 || sr >= h as isize {
            continue;
        }
        for col in 0..w as isize {
            let sc = col - dx;
            if sc < 0 || sc >= w as isize {
                continue;
            }
            for ch in 0..c {
                data[(r as usize * w + col as usize) * c + ch] =
                    img.data()[(sr as usize * w + sc as usize) * c + ch];
            }
        }
    }
    img.with_data(data)
}

/// Trains `model` in place. Deterministic for a fixed config.
pub fn train(
    model: &mut ClassifierModel,
    images: &[Image],
    labels: &[usize],
    held_out: Option<(&[Image], &[usize])>,
    loss: &LossSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if images.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} images but {} labels",
            images.len(),
            labels.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Domain("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = ParamGrads::zeros_like(model);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut history = Vec::with_capacity(cfg.epochs);
    let shift = cfg.augment_shift as isize;

    for epoch in 0..cfg.epochs {
        if epoch > 0 && cfg.decay_every > 0 && epoch % cfg.decay_every == 0 {
            lr *= cfg.lr_decay;
        }
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Image> = chunk
                .iter()
                .map(|&i| {
                    if shift > 0 {
                        let dy = rng.gen_range(-shift..=shift);
                        let dx = rng.gen_range(-shift..=shift);
                        shifted(&images[i], dy, dx)
                    } else {
                        images[i].clone()
                    }
                })
                .collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (batch_loss, grads) = model.parameter_gradients(&batch, &batch_labels, loss)?;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            for ((layer, v), g) in model
                .layers
                .iter_mut()
                .zip(&mut velocity.layers)
                .zip(&grads.layers)
            {
                for ((w, vw), gw) in layer.weights.iter_mut().zip(&mut v.weights).zip(&g.weights) {
                    *vw = cfg.momentum * *vw - lr * gw;
                    *w += *vw;
                }
                for ((b, vb), gb) in layer.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                    *vb = cfg.momentum * *vb - lr * gb;
                    *b += *vb;
                }
            }
            if !model.params_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            loss_sum += batch_loss;
            batches += 1;
        }
        let train_accuracy = accuracy(model, images, labels)?;
        let held_out_accuracy = match held_out {
            Some((xs, ys)) => Some(accuracy(model, xs, ys)?),
            None => None,
        };
        history.push(EpochStats {
            epoch,
            learning_rate: lr,
            mean_loss: loss_sum / batches as f64,
            train_accuracy,
            held_out_accuracy,
        });
    }
    Ok(TrainReport { history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_moves_content_with_zero_fill() {
        let img = Image::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(shifted(&img, 0, 1).data(), &[0.0, 0.1, 0.0, 0.3]);
        assert_eq!(shifted(&img, -1, 0).data(), &[0.3, 0.4, 0.0, 0.0]);
    }
}
