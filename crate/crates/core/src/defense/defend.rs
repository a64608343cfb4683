//! Blur the pixels where the predicted class's most important concepts are strongest.

use ndarray::{s, Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use super::blur::{gaussian_blur, BlurConfig};
use super::heatmap::{coefficient_maps, upsample, Upsampling};
use super::library::ConceptLibrary;
use super::mask::{top_n_mask, PixelMask};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ClassifierAdapter;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Top-n% of each concept map, then the union.
    #[default]
    PerConcept,
    /// Top-n% of the summed concept maps.
    Fused,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub m: usize,
    pub n_percent: f64,
    pub blur: BlurConfig,
    #[serde(default)]
    pub upsampling: Upsampling,
    #[serde(default)]
    pub selection: Selection,
}

impl DefenseConfig {
    pub fn new(m: usize, n_percent: f64, image_size: usize) -> Self {
        DefenseConfig {
            m,
            n_percent,
            blur: BlurConfig::for_image_size(image_size),
            upsampling: Upsampling::Bilinear,
            selection: Selection::PerConcept,
        }
    }

    /// `m = 0` and `n = 0` are accepted and select nothing.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.n_percent) {
            return Err(Error::Config(format!(
                "n_percent {} must lie in [0, 100]",
                self.n_percent
            )));
        }
        self.blur.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefenseOutcome {
    pub defended: Image,
    pub label: usize,
    /// `f(x)` of the input, which selects the concepts.
    pub predicted: usize,
    pub mask: PixelMask,
}

/// Everything about an input the defense needs that does not depend on `(m, n)`.
#[derive(Debug, Clone)]
pub struct DefensePlan {
    pub image: Image,
    pub predicted: usize,
    /// Concept indices by importance for the predicted class.
    pub ranking: Vec<usize>,
    /// `(k, H_a, W_a)` coefficient maps.
    pub coefficients: Array3<f64>,
    pub blurred: Array3<f64>,
    pub blur: BlurConfig,
}

impl DefensePlan {
    pub fn new(adapter: &ClassifierAdapter, image: &Image, library: &ConceptLibrary, blur: BlurConfig) -> Result<Self> {
        blur.validate()?;
        let (act, logits) = adapter.activations_and_logits(image)?;
        let predicted = crate::model::argmax(&logits);
        let concepts = library.get(predicted)?;
        Ok(DefensePlan {
            image: image.clone(),
            predicted,
            ranking: concepts.scores.ranking.clone(),
            coefficients: coefficient_maps(&act, &concepts.solver),
            blurred: gaussian_blur(image.pixels(), &blur),
            blur,
        })
    }

    pub fn heatmap(&self, concept: usize, mode: Upsampling) -> Array2<f64> {
        let plane = self.coefficients.slice(s![concept, .., ..]).to_owned();
        upsample(&plane, self.image.height(), self.image.width(), mode)
    }

    pub fn mask(&self, cfg: &DefenseConfig) -> Result<PixelMask> {
        cfg.validate()?;
        if cfg.m > self.ranking.len() {
            return Err(Error::Config(format!(
                "m = {} exceeds the {} concepts of class {}",
                cfg.m,
                self.ranking.len(),
                self.predicted
            )));
        }
        let (h, w) = (self.image.height(), self.image.width());
        let top = &self.ranking[..cfg.m];
        let mut mask = PixelMask::empty(h, w);
        if top.is_empty() {
            return Ok(mask);
        }
        match cfg.selection {
            Selection::PerConcept => {
                for &j in top {
                    mask.union_with(&top_n_mask(&self.heatmap(j, cfg.upsampling), cfg.n_percent));
                }
            }
            Selection::Fused => {
                let mut fused = Array2::zeros((h, w));
                for &j in top {
                    fused += &self.heatmap(j, cfg.upsampling);
                }
                mask = top_n_mask(&fused, cfg.n_percent);
            }
        }
        Ok(mask)
    }

    /// Masked pixels take the blurred value; all others are copied.
    pub fn defended_pixels(&self, mask: &PixelMask) -> Array3<f64> {
        let mut out = self.image.pixels().to_owned();
        for ch in 0..out.dim().0 {
            Zip::from(out.slice_mut(s![ch, .., ..]))
                .and(self.blurred.slice(s![ch, .., ..]))
                .and(&mask.mask)
                .for_each(|o, &b, &m| {
                    if m {
                        *o = b;
                    }
                });
        }
        out
    }

    pub fn apply(&self, adapter: &ClassifierAdapter, cfg: &DefenseConfig) -> Result<DefenseOutcome> {
        if cfg.blur != self.blur {
            return Err(Error::Config("defense config blur differs from the plan's".into()));
        }
        let mask = self.mask(cfg)?;
        let defended = self.image.with_pixels(self.defended_pixels(&mask))?;
        let label = if mask.selected() == 0 {
            self.predicted
        } else {
            adapter.predict(&defended)?.label
        };
        Ok(DefenseOutcome {
            defended,
            label,
            predicted: self.predicted,
            mask,
        })
    }
}

pub fn defend(
    adapter: &ClassifierAdapter,
    image: &Image,
    library: &ConceptLibrary,
    cfg: &DefenseConfig,
) -> Result<DefenseOutcome> {
    cfg.validate()?;
    DefensePlan::new(adapter, image, library, cfg.blur)?.apply(adapter, cfg)
}
