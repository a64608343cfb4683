//! Bottleneck residual backbones (ResNet-50 layout) built either from random
//! initialisation or from a torchvision state dict exported as safetensors.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::layers::{Affine, Conv2d, Layer, Linear};
use super::network::{he_conv, he_linear, Network, Stage};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const EXPANSION: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResnetConfig {
    /// Bottleneck blocks per stage.
    pub blocks: [usize; 4],
    /// Bottleneck width of the first stage; doubles every stage.
    pub base_width: usize,
    pub stem_width: usize,
}

impl ResnetConfig {
    pub fn resnet50() -> Self {
        ResnetConfig {
            blocks: [3, 4, 6, 3],
            base_width: 64,
            stem_width: 64,
        }
    }
}

trait ParamSource {
    fn conv(&mut self, name: &str, shape: ConvShape) -> Result<Conv2d>;
    fn batch_norm(&mut self, name: &str, channels: usize) -> Result<Affine>;
    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<Linear>;
}

#[derive(Clone, Copy)]
struct ConvShape {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

fn shape(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> ConvShape {
    ConvShape {
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
    }
}

struct RandomInit(ChaCha8Rng);

impl ParamSource for RandomInit {
    fn conv(&mut self, _name: &str, s: ConvShape) -> Result<Conv2d> {
        Ok(he_conv(&mut self.0, s.in_ch, s.out_ch, s.kernel, s.stride, s.padding))
    }

    fn batch_norm(&mut self, _name: &str, channels: usize) -> Result<Affine> {
        Ok(Affine {
            scale: Array1::ones(channels),
            shift: Array1::zeros(channels),
        })
    }

    fn linear(&mut self, _name: &str, inputs: usize, outputs: usize) -> Result<Linear> {
        Ok(he_linear(&mut self.0, inputs, outputs))
    }
}

struct StateDict<'a> {
    tensors: SafeTensors<'a>,
}

impl StateDict<'_> {
    fn read(&self, name: &str, expected: &[usize]) -> Result<Vec<f64>> {
        let view = self
            .tensors
            .tensor(name)
            .map_err(|e| Error::Weights(format!("{name}: {e}")))?;
        if view.shape() != expected {
            return Err(Error::Weights(format!(
                "{name}: shape {:?}, expected {expected:?}",
                view.shape()
            )));
        }
        let data = view.data();
        match view.dtype() {
            Dtype::F32 => Ok(data
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect()),
            Dtype::F64 => Ok(data
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect()),
            other => Err(Error::Weights(format!("{name}: unsupported dtype {other:?}"))),
        }
    }
}

impl ParamSource for StateDict<'_> {
    fn conv(&mut self, name: &str, s: ConvShape) -> Result<Conv2d> {
        let w = self.read(
            &format!("{name}.weight"),
            &[s.out_ch, s.in_ch, s.kernel, s.kernel],
        )?;
        Ok(Conv2d {
            weight: Array2::from_shape_vec((s.out_ch, s.in_ch * s.kernel * s.kernel), w)
                .expect("shape checked"),
            bias: Array1::zeros(s.out_ch),
            in_channels: s.in_ch,
            kernel: s.kernel,
            stride: s.stride,
            padding: s.padding,
        })
    }

    fn batch_norm(&mut self, name: &str, channels: usize) -> Result<Affine> {
        let gamma = self.read(&format!("{name}.weight"), &[channels])?;
        let beta = self.read(&format!("{name}.bias"), &[channels])?;
        let mean = self.read(&format!("{name}.running_mean"), &[channels])?;
        let var = self.read(&format!("{name}.running_var"), &[channels])?;
        let scale: Array1<f64> = gamma
            .iter()
            .zip(&var)
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let shift = beta
            .iter()
            .zip(&mean)
            .zip(scale.iter())
            .map(|((b, m), s)| b - m * s)
            .collect();
        Ok(Affine { scale, shift })
    }

    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<Linear> {
        let w = self.read(&format!("{name}.weight"), &[outputs, inputs])?;
        let b = self.read(&format!("{name}.bias"), &[outputs])?;
        Ok(Linear {
            weight: Array2::from_shape_vec((outputs, inputs), w).expect("shape checked"),
            bias: Array1::from_vec(b),
        })
    }
}

fn build(
    cfg: &ResnetConfig,
    num_classes: usize,
    input_size: usize,
    architecture: &str,
    src: &mut dyn ParamSource,
) -> Result<Network> {
    let mut stages = vec![Stage {
        name: "stem".into(),
        layers: vec![
            Layer::Conv(src.conv("conv1", shape(3, cfg.stem_width, 7, 2, 3))?),
            Layer::Affine(src.batch_norm("bn1", cfg.stem_width)?),
            Layer::Relu,
            Layer::MaxPool {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        ],
    }];
    let mut in_ch = cfg.stem_width;
    for (si, &n_blocks) in cfg.blocks.iter().enumerate() {
        let width = cfg.base_width << si;
        let out_ch = width * EXPANSION;
        let mut layers = Vec::new();
        for b in 0..n_blocks {
            let stride = if b == 0 && si > 0 { 2 } else { 1 };
            let p = format!("layer{}.{b}", si + 1);
            let main = vec![
                Layer::Conv(src.conv(&format!("{p}.conv1"), shape(in_ch, width, 1, 1, 0))?),
                Layer::Affine(src.batch_norm(&format!("{p}.bn1"), width)?),
                Layer::Relu,
                Layer::Conv(src.conv(&format!("{p}.conv2"), shape(width, width, 3, stride, 1))?),
                Layer::Affine(src.batch_norm(&format!("{p}.bn2"), width)?),
                Layer::Relu,
                Layer::Conv(src.conv(&format!("{p}.conv3"), shape(width, out_ch, 1, 1, 0))?),
                Layer::Affine(src.batch_norm(&format!("{p}.bn3"), out_ch)?),
            ];
            let shortcut = if stride != 1 || in_ch != out_ch {
                vec![
                    Layer::Conv(src.conv(
                        &format!("{p}.downsample.0"),
                        shape(in_ch, out_ch, 1, stride, 0),
                    )?),
                    Layer::Affine(src.batch_norm(&format!("{p}.downsample.1"), out_ch)?),
                ]
            } else {
                Vec::new()
            };
            layers.push(Layer::Residual { main, shortcut });
            layers.push(Layer::Relu);
            in_ch = out_ch;
        }
        stages.push(Stage {
            name: format!("layer{}", si + 1),
            layers,
        });
    }
    stages.push(Stage {
        name: "head".into(),
        layers: vec![
            Layer::GlobalAvgPool,
            Layer::Linear(src.linear("fc", in_ch, num_classes)?),
        ],
    });
    Ok(Network {
        architecture: architecture.into(),
        input_size,
        num_classes,
        stages,
    })
}

/// Randomly initialised residual backbone with the given layout.
pub fn resnet(cfg: &ResnetConfig, num_classes: usize, input_size: usize, seed: u64) -> Network {
    let mut src = RandomInit(ChaCha8Rng::seed_from_u64(seed));
    build(cfg, num_classes, input_size, "resnet", &mut src).expect("random init is infallible")
}

/// Reads a torchvision `resnet50` state dict saved with `safetensors.torch.save_file`.
/// Batch norms are folded into per-channel affine layers.
pub fn load_torchvision_resnet50(path: &Path, input_size: usize) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Weights(format!("{}: {e}", path.display())))?;
    let num_classes = tensors
        .tensor("fc.bias")
        .map_err(|e| Error::Weights(format!("fc.bias: {e}")))?
        .shape()[0];
    let mut src = StateDict { tensors };
    build(&ResnetConfig::resnet50(), num_classes, input_size, "resnet50", &mut src)
}
