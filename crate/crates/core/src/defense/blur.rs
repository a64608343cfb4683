//! Separable Gaussian blur with mirrored borders.

use ndarray::{Array1, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurConfig {
    /// Odd kernel side in pixels.
    pub side: usize,
    pub sigma: f64,
}

impl BlurConfig {
    /// 15 px with σ = 7 at 224 px, scaled linearly with the image side.
    pub fn for_image_size(size: usize) -> Self {
        let scale = size as f64 / 224.0;
        let mut side = ((15.0 * scale).round() as usize).max(1);
        if side.is_multiple_of(2) {
            side += 1;
        }
        BlurConfig {
            side,
            sigma: 7.0 * scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side.is_multiple_of(2) {
            return Err(Error::Config(format!("blur kernel side {} must be odd", self.side)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("blur sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Array1<f64> {
        let r = (self.side / 2) as f64;
        let k = Array1::from_shape_fn(self.side, |i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * self.sigma * self.sigma)).exp()
        });
        let total = k.sum();
        k / total
    }
}

/// Mirrored index with the edge sample repeated: `-1 → 0`, `-2 → 1`, `n → n-1`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

pub fn gaussian_blur(pixels: ArrayView3<'_, f64>, cfg: &BlurConfig) -> Array3<f64> {
    let kernel = cfg.kernel();
    let r = (cfg.side / 2) as isize;
    let (c, h, w) = pixels.dim();
    let mut rows = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    acc += kv * pixels[[ch, y, reflect(x as isize + t as isize - r, w)]];
                }
                rows[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in kernel.iter().enumerate() {
                    acc += kv * rows[[ch, reflect(y as isize + t as isize - r, h), x]];
                }
                out[[ch, y, x]] = acc.clamp(0.0, 1.0);
            }
        }
    }
    out
}
