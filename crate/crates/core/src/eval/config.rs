//! Single configuration document covering every stage of the protocol.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{LocationPolicy, PatchSpec, TargetPolicy};
use crate::baseline::MaskCount;
use crate::concepts::{CropPolicy, ExtractionConfig};
use crate::data::synth::SynthConfig;
use crate::data::{IngestConfig, SplitRatios, DEFAULT_MIN_SET_SIZE};
use crate::defense::{BlurConfig, DefenseConfig, Selection, Upsampling};
use crate::error::{Error, Result};
use crate::image::Preprocessing;
use crate::importance::ScoringConfig;
use crate::model::{ModelSpec, TrainConfig};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Small synthetic corpus and a CNN trained by the harness.
    #[default]
    Desk,
    /// Real corpus and pretrained residual backbone.
    Repro,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Desk => "desk",
            Mode::Repro => "repro",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus root; when absent a synthetic corpus is generated under the output directory.
    pub root: Option<PathBuf>,
    pub image_size: usize,
    pub splits: SplitRatios,
    pub classes: Vec<String>,
    pub max_skip_fraction: f64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            image_size: 64,
            splits: SplitRatios::default(),
            classes: Vec::new(),
            max_skip_fraction: 0.01,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: String,
    /// Pretrained weights; when absent the desk CNN is trained on the concept-build split.
    pub weights: Option<PathBuf>,
    pub split_layer: String,
    pub widths: [usize; 5],
    pub output_indices: Option<Vec<usize>>,
    /// Warn when clean-eval accuracy falls below this.
    pub sanity_floor: f64,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: "desk-cnn".into(),
            weights: None,
            split_layer: "block5".into(),
            widths: [8, 16, 32, 64, 64],
            output_indices: None,
            sanity_floor: 0.9,
            train: TrainConfig {
                epochs: 25,
                learning_rate: 3e-3,
                blur_augment: 0.5,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptsConfig {
    pub k: usize,
    pub recursion_depth: u32,
    pub max_iters: usize,
    pub tol: f64,
    /// Crop side and stride; half the image side and half the crop when absent.
    pub crop_size: Option<usize>,
    pub crop_stride: Option<usize>,
    pub min_set_size: usize,
    /// Cap on reference images per class; the whole concept-build split when absent.
    pub max_images_per_class: Option<usize>,
}

impl Default for ConceptsConfig {
    fn default() -> Self {
        ConceptsConfig {
            k: 10,
            recursion_depth: 1,
            max_iters: 200,
            tol: 1e-5,
            crop_size: None,
            crop_stride: None,
            min_set_size: DEFAULT_MIN_SET_SIZE,
            max_images_per_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImportanceConfig {
    pub designs: usize,
    pub images: usize,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        ImportanceConfig {
            designs: 2048,
            images: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub areas: Vec<f64>,
    pub steps: usize,
    pub step_size: f64,
    /// Optional early stop; absent means the full step budget is spent.
    pub stop_probability: Option<f64>,
    pub location: LocationPolicy,
    pub target: TargetPolicy,
    /// Cap on attack-eval images; the whole split when absent.
    pub max_images: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            areas: vec![0.01, 0.02, 0.03],
            steps: 250,
            step_size: 0.05,
            stop_probability: None,
            location: LocationPolicy::Random,
            target: TargetPolicy::Untargeted,
            max_images: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    pub m: usize,
    pub n_percent: f64,
    /// Kernel side and σ; scaled from 15 px / σ 7 at 224 px when absent.
    pub blur_side: Option<usize>,
    pub blur_sigma: Option<f64>,
    pub upsampling: Upsampling,
    pub selection: Selection,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            m: 2,
            n_percent: 5.0,
            blur_side: None,
            blur_sigma: None,
            upsampling: Upsampling::Bilinear,
            selection: Selection::PerConcept,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub masks: usize,
    pub count: MaskCount,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            masks: 3,
            count: MaskCount::PerAxis,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n_grid: Vec<f64>,
    /// `m` held fixed while `n` varies.
    pub n_sweep_m: usize,
    pub m_grid: Vec<usize>,
    /// `n` held fixed while `m` varies.
    pub m_sweep_n: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n_grid: (1..=10).map(f64::from).collect(),
            n_sweep_m: 2,
            m_grid: (1..=5).collect(),
            m_sweep_n: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiguresConfig {
    pub examples: usize,
}

impl Default for FiguresConfig {
    fn default() -> Self {
        FiguresConfig { examples: 3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub mode: Mode,
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub concepts: ConceptsConfig,
    pub importance: ImportanceConfig,
    pub attack: AttackConfig,
    pub defense: DefenseSection,
    pub baseline: BaselineConfig,
    pub sweep: SweepConfig,
    pub figures: FiguresConfig,
}

/// Seed streams derived from the top-level seed.
mod stream {
    pub const MODEL_INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const NMF: u64 = 3;
    pub const SOBOL: u64 = 4;
    pub const ATTACK: u64 = 5;
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attack.areas.is_empty() {
            return Err(Error::Config("at least one patch area is required".into()));
        }
        for spec in self.attack.areas.iter().map(|&a| self.patch_spec(a)) {
            spec.validate()?;
        }
        self.defense_config().validate()?;
        if self.mode == Mode::Repro && self.model.weights.is_none() {
            return Err(Error::Config("repro mode needs model.weights".into()));
        }
        Ok(())
    }

    pub fn preprocessing(&self) -> Preprocessing {
        match self.mode {
            Mode::Desk => Preprocessing {
                image_size: self.data.image_size,
                ..Preprocessing::desk()
            },
            Mode::Repro => Preprocessing::imagenet(self.data.image_size),
        }
    }

    pub fn ingest_config(&self) -> IngestConfig {
        IngestConfig {
            preprocessing: self.preprocessing(),
            seed: self.seed,
            splits: self.data.splits.clone(),
            classes: self.data.classes.clone(),
            max_skip_fraction: self.data.max_skip_fraction,
        }
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, stream::MODEL_INIT, 0)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, stream::TRAIN, 0),
            ..self.model.train.clone()
        }
    }

    pub fn model_spec(&self, weights: PathBuf) -> ModelSpec {
        ModelSpec {
            backbone: self.model.backbone.clone(),
            weights,
            split_layer: self.model.split_layer.clone(),
            output_indices: self.model.output_indices.clone(),
        }
    }

    pub fn extraction_config(&self) -> ExtractionConfig {
        let size = self.data.image_size;
        let default_policy = CropPolicy::for_image_size(size);
        let crop = self.concepts.crop_size.unwrap_or(default_policy.size);
        ExtractionConfig {
            k: self.concepts.k,
            crop_policy: CropPolicy {
                size: crop,
                stride: self.concepts.crop_stride.unwrap_or((crop / 2).max(1)),
            },
            max_iters: self.concepts.max_iters,
            tol: self.concepts.tol,
            seed: derive_seed(self.seed, stream::NMF, 0),
            recursion_depth: self.concepts.recursion_depth,
        }
    }

    pub fn scoring_config(&self) -> ScoringConfig {
        ScoringConfig {
            designs: self.importance.designs,
            seed: derive_seed(self.seed, stream::SOBOL, 0),
            images: self.importance.images,
        }
    }

    pub fn patch_spec(&self, area: f64) -> PatchSpec {
        PatchSpec {
            area_fraction: area,
            location: self.attack.location,
            target: self.attack.target,
            steps: self.attack.steps,
            step_size: self.attack.step_size,
            stop_probability: self.attack.stop_probability,
            seed: derive_seed(self.seed, stream::ATTACK, 0),
        }
    }

    pub fn blur_config(&self) -> BlurConfig {
        let scaled = BlurConfig::for_image_size(self.data.image_size);
        BlurConfig {
            side: self.defense.blur_side.unwrap_or(scaled.side),
            sigma: self.defense.blur_sigma.unwrap_or(scaled.sigma),
        }
    }

    pub fn defense_config(&self) -> DefenseConfig {
        self.defense_with(self.defense.m, self.defense.n_percent)
    }

    pub fn defense_with(&self, m: usize, n_percent: f64) -> DefenseConfig {
        DefenseConfig {
            m,
            n_percent,
            blur: self.blur_config(),
            upsampling: self.defense.upsampling,
            selection: self.defense.selection,
        }
    }
}
