//! Procedural desk corpus: one coloured shape per image over a textured
//! background, one shape family per class.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::save_png;
use crate::util::derive_seed;

/// Foreground hue centre per class; shape and colour both carry the label.
const CLASS_HUES: [f64; 6] = [0.0, 0.33, 0.6, 0.15, 0.8, 0.47];
const HUE_JITTER: f64 = 0.08;
/// Probability that the foreground takes its class hue rather than a random one.
const CLASS_HUE_PROB: f64 = 0.7;

pub const SHAPES: [&str; 6] = ["disc", "ring", "cross", "stripes", "checker", "triangle"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Number of classes, at most `SHAPES.len()`.
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 5,
            images_per_class: 240,
            image_size: 64,
            seed: 7,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Signed coverage of the class shape at offset `(dy, dx)` from its centre.
fn inside(shape: usize, dy: f64, dx: f64, r: f64, angle: f64) -> bool {
    let (s, c) = angle.sin_cos();
    let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
    match SHAPES[shape] {
        "disc" => u * u + v * v <= r * r,
        "ring" => {
            let d = (u * u + v * v).sqrt();
            d <= r && d >= r * 0.55
        }
        "cross" => {
            (u.abs() <= r * 0.3 && v.abs() <= r) || (v.abs() <= r * 0.3 && u.abs() <= r)
        }
        "stripes" => u.abs() <= r * 0.85 && v.abs() <= r * 0.85 && ((v + r) / (r * 0.34)) as i64 % 2 == 0,
        "checker" => {
            let cell = r * 0.45;
            u.abs() <= r * 0.85
                && v.abs() <= r * 0.85
                && (((u + r) / cell) as i64 + ((v + r) / cell) as i64) % 2 == 0
        }
        "triangle" => {
            let h = r * 1.5;
            v <= r * 0.75 && v >= r * 0.75 - h && u.abs() <= (v - (r * 0.75 - h)) / h * r
        }
        _ => false,
    }
}

/// Renders image `index` of class `class` deterministically.
pub fn render(cfg: &SynthConfig, class: usize, index: usize) -> Array3<f64> {
    let size = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, class as u64, index as u64));
    let bg_a = hsv(rng.gen(), rng.gen_range(0.1..0.4), rng.gen_range(0.3..0.8));
    let bg_b = hsv(rng.gen(), rng.gen_range(0.1..0.4), rng.gen_range(0.3..0.8));
    let grad_angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let hue = if rng.gen_bool(CLASS_HUE_PROB) {
        CLASS_HUES[class] + rng.gen_range(-HUE_JITTER..HUE_JITTER)
    } else {
        rng.gen()
    };
    let fg = hsv(hue, rng.gen_range(0.55..1.0), rng.gen_range(0.55..1.0));
    let s = size as f64;
    let r = rng.gen_range(0.15 * s..0.26 * s);
    let margin = r + 1.0;
    let cy = rng.gen_range(margin..s - margin);
    let cx = rng.gen_range(margin..s - margin);
    let angle = rng.gen_range(-0.35..0.35);
    // A few small distractor specks in random colours.
    let specks: Vec<(f64, f64, f64, [f64; 3])> = (0..rng.gen_range(2..6))
        .map(|_| {
            (
                rng.gen_range(0.0..s),
                rng.gen_range(0.0..s),
                rng.gen_range(1.5..3.5),
                hsv(rng.gen(), rng.gen_range(0.2..0.9), rng.gen_range(0.3..1.0)),
            )
        })
        .collect();
    let noise: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-0.04..0.04)).collect();
    let (ga, gb) = grad_angle.sin_cos();
    let mut px = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let t = (((fy / s - 0.5) * ga + (fx / s - 0.5) * gb) + 0.75) / 1.5;
            let mut color = [0.0; 3];
            for c in 0..3 {
                color[c] = bg_a[c] * (1.0 - t) + bg_b[c] * t;
            }
            for &(sy, sx, sr, sc) in &specks {
                if (fy - sy).powi(2) + (fx - sx).powi(2) <= sr * sr {
                    color = sc;
                }
            }
            if inside(class, fy - cy, fx - cx, r, angle) {
                color = fg;
            }
            for c in 0..3 {
                px[[c, y, x]] = (color[c] + noise[y * size + x]).clamp(0.0, 1.0);
            }
        }
    }
    px
}

/// Writes `<root>/<class_name>/<index>.png` for every class and image.
pub fn write_corpus(root: &Path, cfg: &SynthConfig) -> Result<()> {
    assert!(cfg.classes <= SHAPES.len(), "at most {} classes", SHAPES.len());
    for (class, shape) in SHAPES.iter().enumerate().take(cfg.classes) {
        for i in 0..cfg.images_per_class {
            let path = root
                .join(format!("{class}_{shape}"))
                .join(format!("{i:05}.png"));
            save_png(render(cfg, class, i).view(), &path)?;
        }
    }
    Ok(())
}
