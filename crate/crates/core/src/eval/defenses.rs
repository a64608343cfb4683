//! The three compared rows behind the common [`Defense`] interface.

use std::collections::HashMap;

use rayon::prelude::*;

use super::metrics::Defense;
use crate::baseline::{double_masked_predict, MaskSet};
use crate::defense::{ConceptLibrary, DefenseConfig, DefensePlan};
use crate::error::Result;
use crate::image::Image;
use crate::model::ClassifierAdapter;

pub struct Undefended<'a> {
    pub adapter: &'a ClassifierAdapter,
}

impl Defense for Undefended<'_> {
    fn defended_label(&self, image: &Image) -> Result<usize> {
        Ok(self.adapter.predict(image)?.label)
    }
}

pub struct PatchCleanser<'a> {
    pub adapter: &'a ClassifierAdapter,
    pub masks: MaskSet,
}

impl Defense for PatchCleanser<'_> {
    fn defended_label(&self, image: &Image) -> Result<usize> {
        double_masked_predict(self.adapter, image, &self.masks)
    }
}

/// Per-image defense plans for one group of images, keyed by image id.
pub struct PlanCache {
    plans: HashMap<String, DefensePlan>,
}

impl PlanCache {
    pub fn build(adapter: &ClassifierAdapter, images: &[Image], library: &ConceptLibrary, cfg: &DefenseConfig) -> Result<Self> {
        let plans: Vec<DefensePlan> = images
            .par_iter()
            .map(|img| DefensePlan::new(adapter, img, library, cfg.blur))
            .collect::<Result<_>>()?;
        Ok(PlanCache {
            plans: plans.into_iter().map(|p| (p.image.id().to_string(), p)).collect(),
        })
    }

    pub fn get(&self, image: &Image) -> Option<&DefensePlan> {
        self.plans.get(image.id()).filter(|p| p.image == *image)
    }
}

/// The concept-guided defense, reusing cached plans when the image matches.
pub struct ConceptDefense<'a> {
    pub adapter: &'a ClassifierAdapter,
    pub library: &'a ConceptLibrary,
    pub config: DefenseConfig,
    pub cache: Option<&'a PlanCache>,
}

impl Defense for ConceptDefense<'_> {
    fn defended_label(&self, image: &Image) -> Result<usize> {
        let cached = self.cache.and_then(|c| c.get(image)).filter(|p| p.blur == self.config.blur);
        match cached {
            Some(plan) => Ok(plan.apply(self.adapter, &self.config)?.label),
            None => Ok(DefensePlan::new(self.adapter, image, self.library, self.config.blur)?
                .apply(self.adapter, &self.config)?
                .label),
        }
    }
}
