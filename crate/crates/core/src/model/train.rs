//! Supervised training of the desk classifier with Adam.

use ndarray::{s, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adapter::{argmax, cross_entropy};
use super::network::Network;
use crate::defense::{gaussian_blur, BlurConfig};
use crate::error::{Error, Result};
use crate::image::{Image, Preprocessing};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Random horizontal flips.
    pub flip: bool,
    /// Probability of blurring a few random rectangles of a training image.
    pub blur_augment: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 16,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            flip: true,
            blur_augment: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(net: &Network) -> Self {
        let zeros: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &Network, lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in net
            .params_mut()
            .into_iter()
            .zip(grads.params())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i] + weight_decay * p[i];
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * gi;
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Per-sample augmentation drawn up front so training stays deterministic.
#[derive(Debug, Clone, Default)]
struct Augment {
    flip: bool,
    /// `(top, left, height, width)` regions replaced by their blurred pixels.
    blurred: Vec<(usize, usize, usize, usize)>,
}

impl Augment {
    fn draw(rng: &mut ChaCha8Rng, cfg: &TrainConfig, size: usize) -> Self {
        let flip = cfg.flip && rng.gen_bool(0.5);
        let mut blurred = Vec::new();
        if cfg.blur_augment > 0.0 && rng.gen_bool(cfg.blur_augment.min(1.0)) {
            for _ in 0..rng.gen_range(1..=3) {
                let h = rng.gen_range(size * 3 / 20..=size * 7 / 20).max(1);
                let w = rng.gen_range(size * 3 / 20..=size * 7 / 20).max(1);
                blurred.push((rng.gen_range(0..=size - h), rng.gen_range(0..=size - w), h, w));
            }
        }
        Augment { flip, blurred }
    }

    fn apply(&self, image: &Image) -> Image {
        if self.blurred.is_empty() {
            return image.clone();
        }
        let blur = BlurConfig::for_image_size(image.height());
        let soft = gaussian_blur(image.pixels(), &blur);
        let mut px = image.pixels().to_owned();
        for &(t, l, h, w) in &self.blurred {
            px.slice_mut(s![.., t..t + h, l..l + w])
                .assign(&soft.slice(s![.., t..t + h, l..l + w]));
        }
        image.with_pixels(px).expect("blurred pixels stay valid")
    }
}

fn normalized(image: &Image, prep: &Preprocessing, flip: bool) -> Array3<f64> {
    let px = image.pixels();
    let (c, h, w) = px.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| {
        let sx = if flip { w - 1 - x } else { x };
        (px[[ch, y, sx]] - prep.mean[ch]) / prep.std[ch]
    })
}

/// Trains `network` in place on labelled images and returns per-epoch statistics.
pub fn train(
    network: &mut Network,
    images: &[Image],
    prep: &Preprocessing,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if images.is_empty() {
        return Err(Error::Input("no training images".into()));
    }
    if let Some(bad) = images.iter().find(|i| i.label() >= network.num_classes) {
        return Err(Error::Input(format!(
            "image {} has label {} but the network has {} outputs",
            bad.id(),
            bad.label(),
            network.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(network);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let augments: Vec<Augment> = order
            .iter()
            .map(|&i| Augment::draw(&mut rng, cfg, images[i].height()))
            .collect();
        let lr = cfg.learning_rate * cosine_factor(epoch, cfg.epochs);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch, batch_augments) in order
            .chunks(cfg.batch_size.max(1))
            .zip(augments.chunks(cfg.batch_size.max(1)))
        {
            let net: &Network = network;
            let per_sample: Vec<(Network, f64, bool)> = batch
                .par_iter()
                .zip(batch_augments.par_iter())
                .map(|(&i, aug)| {
                    let img = &images[i];
                    let x = normalized(&aug.apply(img), prep, aug.flip);
                    let (logits, caches) = net.forward_cached(x);
                    let (loss, grad_logits) = cross_entropy(&logits, img.label());
                    let mut acc = net.zeros_like();
                    net.backward(caches, &grad_logits, Some(&mut acc));
                    (acc, loss, argmax(&logits) == img.label())
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut total = net.zeros_like();
            for (g, loss, ok) in &per_sample {
                for (t, s) in total.params_mut().into_iter().zip(g.params()) {
                    for (a, b) in t.iter_mut().zip(s) {
                        *a += b * scale;
                    }
                }
                loss_sum += loss;
                correct += usize::from(*ok);
            }
            adam.step(network, &total, lr, cfg.weight_decay);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / images.len() as f64,
            train_accuracy: correct as f64 / images.len() as f64,
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, train accuracy {:.3}",
            stats.mean_loss,
            stats.train_accuracy
        );
        history.push(stats);
    }
    Ok(history)
}

fn cosine_factor(epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return 1.0;
    }
    0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}
