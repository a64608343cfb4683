//! Top-n% pixel selection.

use ndarray::{Array2, Zip};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub mask: Array2<bool>,
}

impl PixelMask {
    pub fn empty(height: usize, width: usize) -> Self {
        PixelMask {
            mask: Array2::from_elem((height, width), false),
        }
    }

    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|v| **v).count()
    }

    pub fn union_with(&mut self, other: &PixelMask) {
        Zip::from(&mut self.mask).and(&other.mask).for_each(|a, &b| *a |= b);
    }
}

/// `⌈n/100 · pixels⌉`, with a small allowance so exact products do not round up.
pub fn top_n_count(n_percent: f64, pixels: usize) -> usize {
    let raw = n_percent / 100.0 * pixels as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(pixels)
}

/// The `top_n_count` largest values; ties go to the lower row-major index.
pub fn top_n_mask(values: &Array2<f64>, n_percent: f64) -> PixelMask {
    let (h, w) = values.dim();
    let count = top_n_count(n_percent, h * w);
    let flat: Vec<f64> = values.iter().copied().collect();
    let mut order: Vec<usize> = (0..flat.len()).collect();
    if count < flat.len() {
        order.select_nth_unstable_by(count.saturating_sub(1).min(flat.len() - 1), |&a, &b| {
            flat[b].total_cmp(&flat[a]).then(a.cmp(&b))
        });
    }
    let mut mask = PixelMask::empty(h, w);
    for &i in &order[..count] {
        mask.mask[[i / w, i % w]] = true;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn counts() {
        assert_eq!(top_n_count(100.0, 4096), 4096);
        assert_eq!(top_n_count(25.0, 16), 4);
        assert_eq!(top_n_count(5.0, 4096), 205);
        assert_eq!(top_n_count(0.0, 4096), 0);
        assert_eq!(top_n_count(1e-6, 4096), 1);
    }

    #[test]
    fn constant_map_takes_leading_pixels() {
        let m = top_n_mask(&Array2::from_elem((4, 4), 1.0), 25.0);
        assert_eq!(m.mask.iter().take(4).filter(|v| **v).count(), 4);
        assert_eq!(m.selected(), 4);
    }

    #[test]
    fn picks_largest_values() {
        let v = array![[0.0, 5.0], [3.0, 1.0]];
        let m = top_n_mask(&v, 50.0);
        assert_eq!(m.mask, array![[false, true], [true, false]]);
        assert_eq!(top_n_mask(&v, 100.0).selected(), 4);
    }
}
