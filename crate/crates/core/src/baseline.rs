//! Double-masking baseline: occlude with a covering grid of rectangles and
//! accept a label only when the masked predictions agree.

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::ClassifierAdapter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskRect {
    pub fn contains(&self, top: usize, left: usize, side: usize) -> bool {
        top >= self.top
            && left >= self.left
            && top + side <= self.top + self.height
            && left + side <= self.left + self.width
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskCount {
    /// `R` masks along each axis, `R²` in total.
    #[default]
    PerAxis,
    /// `R` masks in total, arranged as the most square `rows × cols` factorisation.
    Total,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub masks: Vec<MaskRect>,
    pub rows: usize,
    pub cols: usize,
    pub est_patch_side: usize,
    pub fill: [f64; 3],
}

/// Positions along one axis such that any `est`-long segment fits inside a mask.
fn axis_layout(len: usize, r: usize, est: usize) -> (usize, Vec<usize>) {
    let stride = (len - est).div_ceil(r);
    let side = (est + stride).min(len);
    let positions = (0..r).map(|i| (i * stride).min(len - side)).collect();
    (side, positions)
}

pub fn build_mask_set(
    height: usize,
    width: usize,
    r: usize,
    count: MaskCount,
    est_patch_side: usize,
    fill: [f64; 3],
) -> Result<MaskSet> {
    if r == 0 {
        return Err(Error::Config("at least one mask is required".into()));
    }
    if est_patch_side >= height.min(width) {
        return Err(Error::Config(format!(
            "estimated patch side {est_patch_side} leaves no room to mask a {height}x{width} image"
        )));
    }
    let (rows, cols) = match count {
        MaskCount::PerAxis => (r, r),
        MaskCount::Total => {
            let rows = (1..=r).filter(|d| r.is_multiple_of(*d) && d * d <= r).max().unwrap_or(1);
            (rows, r / rows)
        }
    };
    let (mh, tops) = axis_layout(height, rows, est_patch_side);
    let (mw, lefts) = axis_layout(width, cols, est_patch_side);
    let mut masks = Vec::with_capacity(rows * cols);
    for &top in &tops {
        for &left in &lefts {
            masks.push(MaskRect {
                top,
                left,
                height: mh,
                width: mw,
            });
        }
    }
    Ok(MaskSet {
        masks,
        rows,
        cols,
        est_patch_side,
        fill,
    })
}

/// Label with the most votes, ties to the lowest id.
pub fn majority(labels: &[usize]) -> usize {
    let top = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; top + 1];
    for &l in labels {
        counts[l] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    counts.iter().position(|c| *c == best).unwrap_or(0)
}

/// Two-round decision over first-round labels and a lazily evaluated
/// second-round table `second(i, j)` for masks `i` and `j` applied together.
pub fn double_masking_rule<F>(first: &[usize], mut second: F) -> Result<usize>
where
    F: FnMut(usize, usize) -> Result<usize>,
{
    let majority_label = majority(first);
    if first.iter().all(|&l| l == majority_label) {
        return Ok(majority_label);
    }
    for (i, &label) in first.iter().enumerate() {
        if label == majority_label {
            continue;
        }
        let mut unanimous = true;
        for j in 0..first.len() {
            let l = if i == j { label } else { second(i, j)? };
            if l != label {
                unanimous = false;
                break;
            }
        }
        if unanimous {
            return Ok(label);
        }
    }
    Ok(majority_label)
}

pub fn masked_pixels(image: &Image, rects: &[MaskRect], fill: [f64; 3]) -> ndarray::Array3<f64> {
    let mut px = image.pixels().to_owned();
    for r in rects {
        for (c, f) in fill.iter().enumerate() {
            px.slice_mut(s![c, r.top..r.top + r.height, r.left..r.left + r.width])
                .fill(*f);
        }
    }
    px
}

pub fn double_masked_predict(adapter: &ClassifierAdapter, image: &Image, ms: &MaskSet) -> Result<usize> {
    let first = ms
        .masks
        .iter()
        .map(|m| adapter.label_of(masked_pixels(image, &[*m], ms.fill).view()))
        .collect::<Result<Vec<_>>>()?;
    double_masking_rule(&first, |i, j| {
        adapter.label_of(masked_pixels(image, &[ms.masks[i], ms.masks[j]], ms.fill).view())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_mask_covers_everything() {
        let ms = build_mask_set(64, 64, 1, MaskCount::PerAxis, 11, [0.5; 3]).unwrap();
        assert_eq!(ms.masks, vec![MaskRect { top: 0, left: 0, height: 64, width: 64 }]);
    }

    #[test]
    fn three_per_axis_layout() {
        let ms = build_mask_set(64, 64, 3, MaskCount::PerAxis, 13, [0.5; 3]).unwrap();
        assert_eq!(ms.masks.len(), 9);
        assert_eq!(ms.masks[0].height, 30);
        let tops: Vec<usize> = ms.masks.iter().step_by(3).map(|m| m.top).collect();
        assert_eq!(tops, vec![0, 17, 34]);
    }

    #[test]
    fn total_count_factorises() {
        let ms = build_mask_set(64, 64, 6, MaskCount::Total, 9, [0.5; 3]).unwrap();
        assert_eq!((ms.rows, ms.cols, ms.masks.len()), (2, 3, 6));
        let ms = build_mask_set(64, 64, 3, MaskCount::Total, 9, [0.5; 3]).unwrap();
        assert_eq!((ms.rows, ms.cols), (1, 3));
    }

    #[test]
    fn infeasible_estimates() {
        assert!(build_mask_set(64, 64, 3, MaskCount::PerAxis, 64, [0.5; 3]).is_err());
        assert!(build_mask_set(64, 64, 0, MaskCount::PerAxis, 8, [0.5; 3]).is_err());
    }

    #[test]
    fn majority_ties_go_low() {
        assert_eq!(majority(&[3, 1, 3, 1, 2]), 1);
        assert_eq!(majority(&[4, 4, 0]), 4);
    }

    #[test]
    fn unanimous_first_round_skips_second() {
        let got = double_masking_rule(&[2, 2, 2], |_, _| panic!("second round evaluated")).unwrap();
        assert_eq!(got, 2);
    }
}
