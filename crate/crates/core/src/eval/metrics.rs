//! Clean-recovery and robust accuracy of a defense.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Anything that maps an input image to a (possibly defended) label.
pub trait Defense: Sync {
    fn defended_label(&self, image: &Image) -> Result<usize>;
}

/// An accuracy together with its numerator and denominator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

impl Cell {
    pub fn new(correct: usize, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::Input("accuracy over an empty set".into()));
        }
        Ok(Cell {
            accuracy: correct as f64 / total as f64,
            correct,
            total,
        })
    }

    pub fn from_matches<I: IntoIterator<Item = bool>>(matches: I) -> Result<Self> {
        let (mut correct, mut total) = (0, 0);
        for m in matches {
            total += 1;
            correct += usize::from(m);
        }
        Self::new(correct, total)
    }
}

fn labels(defense: &dyn Defense, images: &[Image]) -> Result<Vec<usize>> {
    images.par_iter().map(|img| defense.defended_label(img)).collect()
}

/// Fraction of clean images whose defended label equals the undefended
/// prediction `reference[i]`.
pub fn metric_clean(defense: &dyn Defense, images: &[Image], reference: &[usize]) -> Result<Cell> {
    if images.len() != reference.len() {
        return Err(Error::Input("one reference prediction per image is required".into()));
    }
    let got = labels(defense, images)?;
    Cell::from_matches(got.iter().zip(reference).map(|(a, b)| a == b))
}

/// Fraction of successfully attacked images whose defended label is the true label.
pub fn metric_robust(defense: &dyn Defense, patched: &[Image]) -> Result<Cell> {
    let got = labels(defense, patched)?;
    Cell::from_matches(got.iter().zip(patched).map(|(l, img)| *l == img.label()))
}
