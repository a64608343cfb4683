use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ClassifierAdapter;

/// Reference images of one class that the classifier also predicts as that class.
#[derive(Debug, Clone)]
pub struct ClassConditionedSet {
    pub class_id: usize,
    pub images: Vec<Image>,
}

impl ClassConditionedSet {
    pub fn size(&self) -> usize {
        self.images.len()
    }
}

pub const DEFAULT_MIN_SET_SIZE: usize = 32;

/// Groups `images` by class, keeping only those with `f(x) = label`.
/// `max_per_class` caps each set, keeping manifest order.
pub fn build_class_conditioned_sets(
    images: &[Image],
    adapter: &ClassifierAdapter,
    min_size: usize,
    max_per_class: Option<usize>,
) -> Result<Vec<ClassConditionedSet>> {
    use rayon::prelude::*;
    let predictions: Vec<usize> = images
        .par_iter()
        .map(|img| adapter.predict(img).map(|p| p.label))
        .collect::<Result<_>>()?;
    let mut sets: Vec<ClassConditionedSet> = (0..adapter.num_classes())
        .map(|class_id| ClassConditionedSet {
            class_id,
            images: Vec::new(),
        })
        .collect();
    for (img, &pred) in images.iter().zip(&predictions) {
        if pred != img.label() || img.label() >= sets.len() {
            continue;
        }
        let set = &mut sets[pred];
        if max_per_class.is_none_or(|cap| set.images.len() < cap) {
            set.images.push(img.clone());
        }
    }
    let short: Vec<String> = sets
        .iter()
        .filter(|s| s.size() < min_size)
        .map(|s| format!("{} ({} members)", adapter.classes()[s.class_id], s.size()))
        .collect();
    if !short.is_empty() {
        return Err(Error::Input(format!(
            "class-conditioned sets below the minimum of {min_size}: {}",
            short.join(", ")
        )));
    }
    Ok(sets)
}
