//! Sequential networks organised into named stages so they can be split into
//! a feature extractor `h` and a head `g` at any stage boundary.

use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{backward_seq, run, run_cached, Cache, Conv2d, Layer, Linear};
use crate::error::{Error, Result};
use crate::store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Stage {
    /// Output is non-negative: the stage ends in a ReLU, optionally followed by max-pooling.
    pub fn rectified(&self) -> bool {
        self.layers
            .iter()
            .rev()
            .find(|l| !matches!(l, Layer::MaxPool { .. }))
            .is_some_and(Layer::rectifies)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub architecture: String,
    pub input_size: usize,
    pub num_classes: usize,
    pub stages: Vec<Stage>,
}

pub type StageCaches = Vec<Vec<Cache>>;

impl Network {
    pub fn stage_index(&self, name: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.name == name)
    }

    pub fn stage_names(&self) -> Vec<String> {
        self.stages.iter().map(|s| s.name.clone()).collect()
    }

    /// Stage names whose output may serve as the split point.
    pub fn split_candidates(&self) -> Vec<String> {
        self.stages
            .iter()
            .take(self.stages.len().saturating_sub(1))
            .filter(|s| s.rectified())
            .map(|s| s.name.clone())
            .collect()
    }

    pub fn forward(&self, x: Array3<f64>) -> Array1<f64> {
        flatten(self.forward_stages(x, 0, self.stages.len()))
    }

    /// Runs stages `from..to`.
    pub fn forward_stages(&self, x: Array3<f64>, from: usize, to: usize) -> Array3<f64> {
        self.stages[from..to]
            .iter()
            .fold(x, |x, stage| run(&stage.layers, x))
    }

    pub fn forward_cached(&self, mut x: Array3<f64>) -> (Array1<f64>, StageCaches) {
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let (out, cache) = run_cached(&stage.layers, x);
            caches.push(cache);
            x = out;
        }
        (flatten(x), caches)
    }

    /// Gradient of `grad_logits · logits` with respect to the network input.
    /// Parameter gradients accumulate into `acc` when given.
    pub fn backward(
        &self,
        caches: StageCaches,
        grad_logits: &Array1<f64>,
        mut acc: Option<&mut Network>,
    ) -> Array3<f64> {
        let n = grad_logits.len();
        let mut grad = grad_logits
            .clone()
            .into_shape_with_order((n, 1, 1))
            .expect("shape");
        for (i, (stage, cache)) in self.stages.iter().zip(caches).enumerate().rev() {
            let slot = acc.as_deref_mut().map(|a| &mut a.stages[i].layers);
            grad = backward_seq(&stage.layers, cache, grad, slot);
        }
        grad
    }

    pub fn zeros_like(&self) -> Network {
        let mut out = self.clone();
        for p in out.params_mut() {
            p.fill(0.0);
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.stages
            .iter()
            .flat_map(|s| s.layers.iter())
            .flat_map(Layer::params)
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.layers.iter_mut())
            .flat_map(Layer::params_mut)
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Keep only the listed output logits, in the given order.
    pub fn restrict_outputs(&mut self, indices: &[usize]) -> Result<()> {
        let Some(Layer::Linear(head)) = self
            .stages
            .last_mut()
            .and_then(|s| s.layers.iter_mut().rev().find(|l| matches!(l, Layer::Linear(_))))
        else {
            return Err(Error::Config("network has no linear head".into()));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= head.weight.nrows()) {
            return Err(Error::Config(format!(
                "output index {bad} out of range for {} logits",
                head.weight.nrows()
            )));
        }
        let weight = Array2::from_shape_fn((indices.len(), head.weight.ncols()), |(r, c)| {
            head.weight[[indices[r], c]]
        });
        let bias = Array1::from_iter(indices.iter().map(|&i| head.bias[i]));
        *head = Linear { weight, bias };
        self.num_classes = indices.len();
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Network> {
        store::read_json(path)
    }

    /// Small five-block CNN used in desk mode: three conv/ReLU/max-pool blocks
    /// followed by two conv/ReLU blocks, global average pooling and a linear head.
    pub fn desk_cnn(num_classes: usize, widths: [usize; 5], input_size: usize, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &w) in widths.iter().enumerate() {
            let mut layers = vec![Layer::Conv(he_conv(&mut rng, in_ch, w, 3, 1, 1)), Layer::Relu];
            if i < 3 {
                layers.push(Layer::MaxPool {
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                });
            }
            stages.push(Stage {
                name: format!("block{}", i + 1),
                layers,
            });
            in_ch = w;
        }
        stages.push(Stage {
            name: "head".into(),
            layers: vec![Layer::GlobalAvgPool, Layer::Linear(he_linear(&mut rng, in_ch, num_classes))],
        });
        Network {
            architecture: "desk-cnn".into(),
            input_size,
            num_classes,
            stages,
        }
    }
}

fn flatten(x: Array3<f64>) -> Array1<f64> {
    Array1::from_iter(x)
}

pub(crate) fn he_conv(
    rng: &mut ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Conv2d {
    let fan_in = in_ch * kernel * kernel;
    let bound = (6.0 / fan_in as f64).sqrt();
    Conv2d {
        weight: Array2::from_shape_fn((out_ch, fan_in), |_| rng.gen_range(-bound..bound)),
        bias: Array1::zeros(out_ch),
        in_channels: in_ch,
        kernel,
        stride,
        padding,
    }
}

pub(crate) fn he_linear(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Linear {
    let bound = (1.0 / inputs as f64).sqrt();
    Linear {
        weight: Array2::from_shape_fn((outputs, inputs), |_| rng.gen_range(-bound..bound)),
        bias: Array1::zeros(outputs),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_cnn_shapes_and_split_candidates() {
        let net = Network::desk_cnn(5, [8, 16, 32, 64, 64], 64, 0);
        let x = Array3::from_elem((3, 64, 64), 0.1);
        let feats = net.forward_stages(x.clone(), 0, 5);
        assert_eq!(feats.dim(), (64, 8, 8));
        assert_eq!(net.forward(x).len(), 5);
        assert_eq!(
            net.split_candidates(),
            vec!["block1", "block2", "block3", "block4", "block5"]
        );
    }

    #[test]
    fn split_forward_equals_full_forward() {
        let net = Network::desk_cnn(3, [4, 4, 8, 8, 8], 64, 3);
        let x = Array3::from_shape_fn((3, 64, 64), |(c, y, x)| ((c + y * 3 + x * 7) % 11) as f64 / 11.0);
        let full = net.forward(x.clone());
        for split in 1..net.stages.len() {
            let h = net.forward_stages(x.clone(), 0, split);
            let g = flatten(net.forward_stages(h, split, net.stages.len()));
            assert_eq!(g, full);
        }
    }

    #[test]
    fn restrict_outputs_selects_rows() {
        let mut net = Network::desk_cnn(6, [4, 4, 4, 4, 4], 64, 1);
        let x = Array3::from_elem((3, 64, 64), 0.3);
        let full = net.forward(x.clone());
        net.restrict_outputs(&[4, 1]).unwrap();
        let sub = net.forward(x);
        assert_eq!(sub.to_vec(), vec![full[4], full[1]]);
        assert!(net.restrict_outputs(&[9]).is_err());
    }
}
