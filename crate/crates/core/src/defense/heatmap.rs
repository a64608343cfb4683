//! Per-pixel concept presence maps from joint non-negative coefficient recovery.

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptBank;
use crate::error::{Error, Result};
use crate::image::{bilinear_resize, Image};
use crate::importance::NnlsSolver;
use crate::model::ClassifierAdapter;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Upsampling {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptHeatmap {
    /// `(H, W)`, non-negative.
    pub values: Array2<f64>,
    pub concept: usize,
    pub class_id: usize,
}

/// Coefficients `(k, H_a, W_a)` of every concept at every activation cell.
pub fn coefficient_maps(activation: &Array3<f64>, solver: &NnlsSolver) -> Array3<f64> {
    let (_, h, w) = activation.dim();
    let mut out = Array3::zeros((solver.rank(), h, w));
    for y in 0..h {
        for x in 0..w {
            let u = solver.solve(activation.slice(s![.., y, x]));
            out.slice_mut(s![.., y, x]).assign(&u);
        }
    }
    out
}

pub fn upsample(map: &Array2<f64>, height: usize, width: usize, mode: Upsampling) -> Array2<f64> {
    match mode {
        Upsampling::Bilinear => bilinear_resize(map.view(), height, width),
        Upsampling::Nearest => {
            let (in_h, in_w) = map.dim();
            Array2::from_shape_fn((height, width), |(y, x)| {
                map[[y * in_h / height, x * in_w / width]]
            })
        }
    }
}

pub fn concept_heatmap(
    adapter: &ClassifierAdapter,
    image: &Image,
    bank: &ConceptBank,
    concept: usize,
    mode: Upsampling,
) -> Result<ConceptHeatmap> {
    if concept >= bank.k() {
        return Err(Error::Input(format!(
            "concept index {concept} out of range for a bank of {}",
            bank.k()
        )));
    }
    let act = adapter.activations_of(image.pixels())?;
    let maps = coefficient_maps(&act, &bank.solver());
    let plane = maps.slice(s![concept, .., ..]).to_owned();
    Ok(ConceptHeatmap {
        values: upsample(&plane, image.height(), image.width(), mode),
        concept,
        class_id: bank.class_id(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn planted_concept_lights_up_alone() {
        let w = array![[0.6, 0.8, 0.0], [0.0, 0.0, 1.0]];
        let solver = NnlsSolver::new(w.view());
        let act = Array3::from_shape_fn((3, 4, 4), |(c, _, _)| 2.0 * w[[0, c]]);
        let maps = coefficient_maps(&act, &solver);
        assert!(maps.slice(s![0, .., ..]).iter().all(|v| (v - 2.0).abs() < 1e-9));
        assert!(maps.slice(s![1, .., ..]).iter().all(|v| v.abs() < 1e-9));
        let zero = coefficient_maps(&Array3::zeros((3, 4, 4)), &solver);
        assert!(zero.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nearest_upsampling_repeats_cells() {
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        let up = upsample(&m, 4, 4, Upsampling::Nearest);
        assert_eq!(up.row(0).to_vec(), vec![1.0, 1.0, 2.0, 2.0]);
        assert_eq!(up.row(3).to_vec(), vec![3.0, 3.0, 4.0, 4.0]);
    }
}
