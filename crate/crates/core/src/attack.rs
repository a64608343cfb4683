//! Per-image square adversarial patches optimised by signed-gradient steps.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array3, ArrayView3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{argmax, softmax, ClassifierAdapter, LossSpec};
use crate::store::ArrayFile;
use crate::util::{derive_seed, hash_str};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum LocationPolicy {
    Fixed { row: usize, col: usize },
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy")]
pub enum TargetPolicy {
    Untargeted,
    Targeted { class: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub area_fraction: f64,
    pub location: LocationPolicy,
    pub target: TargetPolicy,
    pub steps: usize,
    pub step_size: f64,
    /// When set, stop once the attack has succeeded and (untargeted) the clean
    /// class probability is below this. Otherwise every step is taken.
    #[serde(default)]
    pub stop_probability: Option<f64>,
    pub seed: u64,
}

impl PatchSpec {
    pub fn new(area_fraction: f64, seed: u64) -> Self {
        PatchSpec {
            area_fraction,
            location: LocationPolicy::Random,
            target: TargetPolicy::Untargeted,
            steps: 250,
            step_size: 0.05,
            stop_probability: None,
            seed,
        }
    }

    /// Square side `round(√(area·H·W))`.
    pub fn side(&self, height: usize, width: usize) -> usize {
        (self.area_fraction * (height * width) as f64).sqrt().round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.area_fraction) {
            return Err(Error::Config(format!(
                "patch area fraction {} must lie in [0, 1)",
                self.area_fraction
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config("attack step size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchResult {
    pub image_id: String,
    pub true_label: usize,
    pub clean_label: usize,
    pub patched_label: usize,
    /// `(3, side, side)` pixels in `[0, 1]`.
    pub patch: Array3<f64>,
    /// Top-left `(row, col)`.
    pub location: (usize, usize),
    pub steps_taken: usize,
    pub success: bool,
}

impl PatchResult {
    pub fn side(&self) -> usize {
        self.patch.dim().1
    }

    pub fn patched_image(&self, clean: &Image) -> Result<Image> {
        apply_patch(clean, self.patch.view(), self.location)
    }
}

/// Replaces the patch rectangle verbatim.
pub fn apply_patch(image: &Image, patch: ArrayView3<'_, f64>, loc: (usize, usize)) -> Result<Image> {
    let (pc, ph, pw) = patch.dim();
    let (row, col) = loc;
    if pc != 3 {
        return Err(Error::Input(format!("patch has {pc} channels")));
    }
    if row + ph > image.height() || col + pw > image.width() {
        return Err(Error::Input(format!(
            "{ph}x{pw} patch at ({row}, {col}) leaves the {}x{} image",
            image.height(),
            image.width()
        )));
    }
    if patch.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("patch pixels must lie in [0, 1]".into()));
    }
    let mut pixels = image.pixels().to_owned();
    pixels
        .slice_mut(s![.., row..row + ph, col..col + pw])
        .assign(&patch);
    image.with_pixels(pixels)
}

fn image_rng(spec: &PatchSpec, image: &Image) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, hash_str(image.id()), 0))
}

pub fn optimize_patch(adapter: &ClassifierAdapter, image: &Image, spec: &PatchSpec) -> Result<PatchResult> {
    spec.validate()?;
    let clean_label = adapter.predict(image)?.label;
    let (h, w) = (image.height(), image.width());
    let side = spec.side(h, w);
    let mut rng = image_rng(spec, image);
    let (row, col) = match spec.location {
        LocationPolicy::Fixed { row, col } => (row, col),
        LocationPolicy::Random => (rng.gen_range(0..=h - side), rng.gen_range(0..=w - side)),
    };
    if row + side > h || col + side > w {
        return Err(Error::Config(format!("patch of side {side} at ({row}, {col}) does not fit")));
    }
    let (loss, sign) = match spec.target {
        TargetPolicy::Untargeted => (LossSpec::Untargeted { label: clean_label }, 1.0),
        TargetPolicy::Targeted { class } => (LossSpec::Targeted { target: class }, -1.0),
    };
    let window = s![.., row..row + side, col..col + side];
    let mut pixels = image.pixels().to_owned();
    pixels.slice_mut(window).mapv_inplace(|_| rng.gen::<f64>());

    let done = |logits: &ndarray::Array1<f64>| match (spec.stop_probability, spec.target) {
        (None, _) => false,
        (Some(p), TargetPolicy::Untargeted) => argmax(logits) != clean_label && softmax(logits)[clean_label] < p,
        (Some(_), TargetPolicy::Targeted { class }) => argmax(logits) == class,
    };
    let mut steps_taken = 0;
    if side > 0 {
        for _ in 0..spec.steps {
            let (grad, _, logits) = adapter.input_gradient(pixels.view(), loss)?;
            if done(&logits) {
                break;
            }
            Zip::from(pixels.slice_mut(window))
                .and(grad.slice(window))
                .for_each(|p, &g| *p = (*p + sign * spec.step_size * g.signum()).clamp(0.0, 1.0));
            steps_taken += 1;
        }
    }
    let patched_label = adapter.label_of(pixels.view())?;
    Ok(PatchResult {
        image_id: image.id().to_string(),
        true_label: image.label(),
        clean_label,
        patched_label,
        patch: pixels.slice(window).to_owned(),
        location: (row, col),
        steps_taken,
        success: patched_label != clean_label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub id: String,
    pub loc: (usize, usize),
    pub side: usize,
    pub success: bool,
    pub true_label: usize,
    pub clean_label: usize,
    pub patched_label: usize,
    pub steps_taken: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMetadata {
    pub spec: PatchSpec,
    /// Images offered to the attack.
    pub offered: usize,
    /// Offered images the classifier got right; only these are attacked.
    pub attempted: usize,
    /// One record per attempted image, successful or not.
    pub records: Vec<AttackRecord>,
}

/// Successful attacks on correctly classified images.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackedSet {
    pub metadata: AttackMetadata,
    pub results: Vec<PatchResult>,
}

impl AttackedSet {
    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        self.results.len() as f64 / self.metadata.attempted.max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = ArrayFile::new(self.metadata.clone());
        for r in &self.results {
            f.insert(r.image_id.clone(), r.patch.view());
        }
        f.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: ArrayFile<AttackMetadata> = ArrayFile::load(path)?;
        let results = f
            .metadata
            .records
            .iter()
            .filter(|r| r.success)
            .map(|r| {
                Ok(PatchResult {
                    image_id: r.id.clone(),
                    true_label: r.true_label,
                    clean_label: r.clean_label,
                    patched_label: r.patched_label,
                    patch: f.get(&r.id)?,
                    location: r.loc,
                    steps_taken: r.steps_taken,
                    success: true,
                })
            })
            .collect::<Result<_>>()?;
        Ok(AttackedSet {
            metadata: f.metadata,
            results,
        })
    }

    /// Patched images in result order; `clean` must contain every attacked id.
    pub fn patched_images(&self, clean: &[Image]) -> Result<Vec<Image>> {
        let by_id: BTreeMap<&str, &Image> = clean.iter().map(|i| (i.id(), i)).collect();
        self.results
            .iter()
            .map(|r| {
                let img = by_id
                    .get(r.image_id.as_str())
                    .ok_or_else(|| Error::Input(format!("attacked image {} is not in the split", r.image_id)))?;
                r.patched_image(img)
            })
            .collect()
    }
}

/// Attacks every correctly classified image and keeps the successes.
pub fn build_attacked_set(adapter: &ClassifierAdapter, images: &[Image], spec: &PatchSpec) -> Result<AttackedSet> {
    spec.validate()?;
    if images.is_empty() {
        return Err(Error::Input("attack-eval split is empty".into()));
    }
    let outcomes: Vec<Option<PatchResult>> = images
        .par_iter()
        .map(|img| {
            if adapter.predict(img)?.label != img.label() {
                return Ok(None);
            }
            optimize_patch(adapter, img, spec).map(Some)
        })
        .collect::<Result<_>>()?;
    let attempted: Vec<PatchResult> = outcomes.into_iter().flatten().collect();
    let records = attempted
        .iter()
        .map(|r| AttackRecord {
            id: r.image_id.clone(),
            loc: r.location,
            side: r.side(),
            success: r.success,
            true_label: r.true_label,
            clean_label: r.clean_label,
            patched_label: r.patched_label,
            steps_taken: r.steps_taken,
        })
        .collect();
    let metadata = AttackMetadata {
        spec: *spec,
        offered: images.len(),
        attempted: attempted.len(),
        records,
    };
    let results: Vec<PatchResult> = attempted.into_iter().filter(|r| r.success).collect();
    if results.is_empty() {
        return Err(Error::Degenerate(format!(
            "no successful attacks at area {}; increase steps, step size or area",
            spec.area_fraction
        )));
    }
    log::info!(
        "area {}: {}/{} attacks succeeded",
        spec.area_fraction,
        results.len(),
        metadata.attempted
    );
    Ok(AttackedSet { metadata, results })
}
