//! Per-class concept importance from masked concept coefficients.

use std::path::Path;

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use super::sobol::sobol_total_indices;
use crate::concepts::ConceptBank;
use crate::data::ClassConditionedSet;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ClassifierAdapter;
use crate::store::{read_json, write_json};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringConfig {
    /// Rows per Sobol design, a power of two.
    pub designs: usize,
    pub seed: u64,
    /// Leading images of the class set used for scoring.
    pub images: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            designs: 2048,
            seed: 0,
            images: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub class_id: usize,
    pub raw_scores: Vec<f64>,
    pub clipped_scores: Vec<f64>,
    /// Concept indices by descending clipped score, ties by ascending index.
    pub ranking: Vec<usize>,
    #[serde(rename = "N")]
    pub designs: usize,
    pub seed: u64,
    pub images_used: Vec<String>,
    pub images_skipped: Vec<String>,
}

impl ImportanceScores {
    pub fn from_raw(class_id: usize, raw_scores: Vec<f64>, designs: usize, seed: u64) -> Self {
        let clipped_scores: Vec<f64> = raw_scores.iter().map(|v| v.max(0.0)).collect();
        let ranking = rank_descending(&clipped_scores);
        ImportanceScores {
            class_id,
            raw_scores,
            clipped_scores,
            ranking,
            designs,
            seed,
            images_used: Vec::new(),
            images_skipped: Vec::new(),
        }
    }

    pub fn top(&self, m: usize) -> &[usize] {
        &self.ranking[..m.min(self.ranking.len())]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn file_name(class_id: usize) -> String {
        format!("scores_{class_id:03}.json")
    }
}

pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx
}

/// Non-negative `u` minimising `‖a − uᵀW‖` for the pooled activation `a`.
pub fn concept_coefficients(adapter: &ClassifierAdapter, image: &Image, bank: &ConceptBank) -> Result<Array1<f64>> {
    let a = adapter.activations(image)?.pooled();
    if a.len() != bank.channels() {
        return Err(Error::Input(format!(
            "bank has {} channels but the split layer has {}",
            bank.channels(),
            a.len()
        )));
    }
    Ok(bank.solver().solve(a.view()))
}

/// Class logit of `g` applied to `(u ⊙ mask)ᵀW` broadcast over the activation grid.
pub fn masked_class_logit(
    adapter: &ClassifierAdapter,
    bank: &ConceptBank,
    coefficients: &Array1<f64>,
    mask: &[f64],
    class: usize,
) -> f64 {
    let (c, h, w) = adapter.activation_shape();
    let weighted = coefficients * &Array1::from_iter(mask.iter().copied());
    let pooled = weighted.dot(&bank.w);
    let spatial = Array3::from_shape_fn((c, h, w), |(ch, _, _)| pooled[ch]);
    adapter.head(spatial)[class]
}

pub fn score_concepts(
    adapter: &ClassifierAdapter,
    bank: &ConceptBank,
    set: &ClassConditionedSet,
    cfg: &ScoringConfig,
) -> Result<ImportanceScores> {
    let class = set.class_id;
    if bank.class_id() != class {
        return Err(Error::Input(format!(
            "bank for class {} scored against the set of class {class}",
            bank.class_id()
        )));
    }
    let k = bank.k();
    let mut sums = vec![0.0; k];
    let mut used = Vec::new();
    let mut skipped = Vec::new();
    for (i, image) in set.images.iter().take(cfg.images).enumerate() {
        let u = concept_coefficients(adapter, image, bank)?;
        let seed = derive_seed(cfg.seed, class as u64, i as u64) as u32;
        let est = sobol_total_indices(|m| masked_class_logit(adapter, bank, &u, m, class), cfg.designs, k, seed)?;
        if est.degenerate {
            log::warn!("class {class}: image {} gives a constant masked logit, skipped", image.id());
            skipped.push(image.id().to_string());
            continue;
        }
        for (s, t) in sums.iter_mut().zip(&est.totals) {
            *s += t;
        }
        used.push(image.id().to_string());
    }
    if used.is_empty() {
        return Err(Error::Degenerate(format!(
            "class {class}: the masked class logit has zero variance on every image; \
             try a larger k or a different split layer"
        )));
    }
    let raw = sums.iter().map(|s| s / used.len() as f64).collect();
    let mut scores = ImportanceScores::from_raw(class, raw, cfg.designs, cfg.seed);
    scores.images_used = used;
    scores.images_skipped = skipped;
    Ok(scores)
}
