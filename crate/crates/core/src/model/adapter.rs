//! Split classifier `f = g ∘ h` over `[0, 1]` images.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::network::Network;
use super::resnet;
use crate::error::{Error, Result};
use crate::image::{Image, Preprocessing};
use crate::store::{ArrayFile, StoredTensor};

/// How to obtain a classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `desk-cnn` or `resnet` (JSON weights in the native network format) or
    /// `resnet50` (safetensors, torchvision parameter names).
    pub backbone: String,
    pub weights: PathBuf,
    pub split_layer: String,
    /// For ImageNet backbones: logit indices kept, one per dataset class, in class order.
    #[serde(default)]
    pub output_indices: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub label: usize,
    pub logits: Array1<f64>,
}

/// Spatial activations `h(x)`, stored `(C, H_a, W_a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub values: Array3<f64>,
    pub layer: String,
    pub image_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ActivationMeta {
    layer: String,
    image_id: String,
}

impl ActivationTensor {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    /// Spatial mean, one value per channel.
    pub fn pooled(&self) -> Array1<f64> {
        self.values
            .mean_axis(Axis(2))
            .and_then(|m| m.mean_axis(Axis(1)))
            .expect("non-empty activation")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = ArrayFile::new(ActivationMeta {
            layer: self.layer.clone(),
            image_id: self.image_id.clone(),
        });
        f.tensors
            .insert(self.layer.clone(), StoredTensor::from_view(self.values.view()));
        f.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: ArrayFile<ActivationMeta> = ArrayFile::load(path)?;
        let values = f.get(&f.metadata.layer)?;
        Ok(ActivationTensor {
            values,
            layer: f.metadata.layer,
            image_id: f.metadata.image_id,
        })
    }
}

/// Cross-entropy objective for input gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    /// Cross-entropy against the label the attacker wants to move away from.
    Untargeted { label: usize },
    /// Cross-entropy against the class the attacker wants to reach.
    Targeted { target: usize },
}

impl LossSpec {
    pub fn class(&self) -> usize {
        match *self {
            LossSpec::Untargeted { label } => label,
            LossSpec::Targeted { target } => target,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierAdapter {
    network: Network,
    split: usize,
    split_layer: String,
    preprocessing: Preprocessing,
    classes: Vec<String>,
    activation_shape: (usize, usize, usize),
}

impl ClassifierAdapter {
    pub fn new(
        network: Network,
        split_layer: &str,
        preprocessing: Preprocessing,
        classes: Vec<String>,
    ) -> Result<Self> {
        let candidates = network.split_candidates();
        if !candidates.iter().any(|c| c == split_layer) {
            return Err(Error::Config(format!(
                "unknown or unrectified split layer {split_layer:?}; valid layers: {}",
                candidates.join(", ")
            )));
        }
        if network.num_classes != classes.len() {
            return Err(Error::Config(format!(
                "network has {} outputs but {} classes were given",
                network.num_classes,
                classes.len()
            )));
        }
        if network.input_size != preprocessing.image_size {
            return Err(Error::Config(format!(
                "network expects {}px inputs, preprocessing produces {}px",
                network.input_size, preprocessing.image_size
            )));
        }
        let split = network.stage_index(split_layer).expect("candidate exists") + 1;
        let s = network.input_size;
        let activation_shape = network
            .forward_stages(Array3::zeros((3, s, s)), 0, split)
            .dim();
        Ok(ClassifierAdapter {
            network,
            split,
            split_layer: split_layer.to_string(),
            preprocessing,
            classes,
            activation_shape,
        })
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn split_layer(&self) -> &str {
        &self.split_layer
    }

    pub fn backbone(&self) -> &str {
        &self.network.architecture
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn input_size(&self) -> usize {
        self.preprocessing.image_size
    }

    pub fn preprocessing(&self) -> &Preprocessing {
        &self.preprocessing
    }

    /// Pixel value that normalizes to zero in each channel.
    pub fn neutral_fill(&self) -> [f64; 3] {
        self.preprocessing.mean
    }

    fn check_shape(&self, pixels: ArrayView3<'_, f64>) -> Result<()> {
        let (c, h, w) = pixels.dim();
        let s = self.input_size();
        if c != 3 || h != s || w != s {
            return Err(Error::Input(format!(
                "image is {c}x{h}x{w}, classifier expects 3x{s}x{s}"
            )));
        }
        Ok(())
    }

    fn normalize(&self, pixels: ArrayView3<'_, f64>) -> Array3<f64> {
        let mut x = pixels.to_owned();
        for (c, mut plane) in x.outer_iter_mut().enumerate() {
            let (m, s) = (self.preprocessing.mean[c], self.preprocessing.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        x
    }

    pub fn logits_of(&self, pixels: ArrayView3<'_, f64>) -> Result<Array1<f64>> {
        self.check_shape(pixels)?;
        Ok(self.network.forward(self.normalize(pixels)))
    }

    pub fn predict(&self, image: &Image) -> Result<Prediction> {
        let logits = self.logits_of(image.pixels())?;
        Ok(Prediction {
            label: argmax(&logits),
            logits,
        })
    }

    pub fn label_of(&self, pixels: ArrayView3<'_, f64>) -> Result<usize> {
        Ok(argmax(&self.logits_of(pixels)?))
    }

    /// `h(x)`: output of the split stage.
    pub fn activations(&self, image: &Image) -> Result<ActivationTensor> {
        Ok(ActivationTensor {
            values: self.activations_of(image.pixels())?,
            layer: self.split_layer.clone(),
            image_id: image.id().to_string(),
        })
    }

    pub fn activations_of(&self, pixels: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        self.check_shape(pixels)?;
        Ok(self
            .network
            .forward_stages(self.normalize(pixels), 0, self.split))
    }

    /// `h(x)` and `f(x)` from a single forward pass.
    pub fn activations_and_logits(&self, image: &Image) -> Result<(Array3<f64>, Array1<f64>)> {
        self.check_shape(image.pixels())?;
        let act = self
            .network
            .forward_stages(self.normalize(image.pixels()), 0, self.split);
        let logits = self.head(act.clone());
        Ok((act, logits))
    }

    /// `g(a)`: logits from a split-layer activation tensor.
    pub fn head(&self, activation: Array3<f64>) -> Array1<f64> {
        let out = self
            .network
            .forward_stages(activation, self.split, self.network.stages.len());
        Array1::from_iter(out)
    }

    /// Activation shape `(C, H_a, W_a)` produced at the split.
    pub fn activation_shape(&self) -> (usize, usize, usize) {
        self.activation_shape
    }

    /// Gradient of the cross-entropy loss with respect to the `[0, 1]` pixels,
    /// together with the loss value and logits.
    pub fn input_gradient(
        &self,
        pixels: ArrayView3<'_, f64>,
        loss: LossSpec,
    ) -> Result<(Array3<f64>, f64, Array1<f64>)> {
        self.check_shape(pixels)?;
        let class = loss.class();
        if class >= self.num_classes() {
            return Err(Error::Input(format!(
                "loss class {class} out of range for {} classes",
                self.num_classes()
            )));
        }
        let (logits, caches) = self.network.forward_cached(self.normalize(pixels));
        let (value, grad_logits) = cross_entropy(&logits, class);
        let mut grad = self.network.backward(caches, &grad_logits, None);
        for (c, mut plane) in grad.outer_iter_mut().enumerate() {
            plane /= self.preprocessing.std[c];
        }
        Ok((grad, value, logits))
    }
}

pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

/// Loss value and gradient with respect to the logits.
pub fn cross_entropy(logits: &Array1<f64>, class: usize) -> (f64, Array1<f64>) {
    let p = softmax(logits);
    let value = -p[class].max(f64::MIN_POSITIVE).ln();
    let mut grad = p;
    grad[class] -= 1.0;
    (value, grad)
}

/// Loads a classifier and verifies that the split reproduces the undivided forward pass.
pub fn load_classifier(
    spec: &ModelSpec,
    preprocessing: Preprocessing,
    classes: Vec<String>,
) -> Result<ClassifierAdapter> {
    let mut network = match spec.backbone.as_str() {
        "desk-cnn" | "resnet" => Network::load(&spec.weights)?,
        "resnet50" => resnet::load_torchvision_resnet50(&spec.weights, preprocessing.image_size)?,
        other => {
            return Err(Error::Config(format!(
                "unknown backbone {other:?}; expected desk-cnn, resnet or resnet50"
            )))
        }
    };
    if let Some(indices) = &spec.output_indices {
        network.restrict_outputs(indices)?;
    }
    let adapter = ClassifierAdapter::new(network, &spec.split_layer, preprocessing, classes)?;
    let probe = Array3::from_shape_fn(
        (3, adapter.input_size(), adapter.input_size()),
        |(c, y, x)| ((c * 31 + y * 7 + x * 3) % 17) as f64 / 16.0,
    );
    let err = split_discrepancy(&adapter, probe.view())?;
    if err > SPLIT_TOLERANCE {
        return Err(Error::Config(format!(
            "split at {} is inconsistent with the full forward pass (error {err:e})",
            spec.split_layer
        )));
    }
    Ok(adapter)
}

/// Relative tolerance on `|g(h(x)) - f(x)|∞ / (1 + |f(x)|∞)`.
pub const SPLIT_TOLERANCE: f64 = 1e-5;

pub fn split_discrepancy(adapter: &ClassifierAdapter, pixels: ArrayView3<'_, f64>) -> Result<f64> {
    let full = adapter.logits_of(pixels)?;
    let split = adapter.head(adapter.activations_of(pixels)?);
    let diff = (&full - &split).fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = 1.0 + full.fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(diff / scale)
}

/// Ground-truth accuracy on a sanity batch; logs a warning below `floor`.
pub fn sanity_accuracy(adapter: &ClassifierAdapter, images: &[Image], floor: f64) -> Result<f64> {
    if images.is_empty() {
        return Ok(1.0);
    }
    let mut correct = 0usize;
    for img in images {
        if adapter.predict(img)?.label == img.label() {
            correct += 1;
        }
    }
    let acc = correct as f64 / images.len() as f64;
    if acc < floor {
        log::warn!(
            "classifier accuracy {acc:.3} on {} sanity images is below the floor {floor:.3}",
            images.len()
        );
    }
    Ok(acc)
}
