//! RGB images in `[0, 1]`, stored channel-major as `(3, H, W)`.

use std::path::Path;

use image::imageops::FilterType;
use image::{Rgb, Rgb32FImage, RgbImage};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    id: String,
    label: usize,
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(id: impl Into<String>, label: usize, pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::Input(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Input(format!(
                "image is {h}x{w}, both sides must be at least {MIN_SIDE}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            id: id.into(),
            label,
            pixels: pixels.as_standard_layout().into_owned(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// Ground-truth class id.
    pub fn label(&self) -> usize {
        self.label
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn pixels(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    /// Same id and label with different pixels. Values are clamped to `[0, 1]`.
    pub fn with_pixels(&self, mut pixels: Array3<f64>) -> Result<Image> {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Image::new(self.id.clone(), self.label, pixels)
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn to_rgb8(&self) -> RgbImage {
        to_rgb8(self.pixels.view())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png(self.pixels.view(), path)
    }
}

/// How raw files are turned into square model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Output side after resizing the shorter side and center-cropping.
    pub image_size: usize,
    /// Per-channel normalization applied inside the classifier.
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocessing {
    pub fn desk() -> Self {
        Preprocessing {
            image_size: 64,
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
        }
    }

    pub fn imagenet(image_size: usize) -> Self {
        Preprocessing {
            image_size,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Decode a file and apply resize-shorter-side + center-crop.
pub fn load_image(path: &Path, id: &str, label: usize, image_size: usize) -> Result<Image> {
    let decoded = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = decoded.to_rgb32f();
    let pixels = resize_and_center_crop(&rgb, image_size);
    Image::new(id, label, pixels)
}

fn resize_and_center_crop(rgb: &Rgb32FImage, size: usize) -> Array3<f64> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let resized;
    let src = if w.min(h) == size {
        rgb
    } else {
        let scale = size as f64 / w.min(h) as f64;
        let nw = ((w as f64 * scale).round() as usize).max(size);
        let nh = ((h as f64 * scale).round() as usize).max(size);
        resized = image::imageops::resize(rgb, nw as u32, nh as u32, FilterType::Triangle);
        &resized
    };
    let (w, h) = (src.width() as usize, src.height() as usize);
    let top = (h - size) / 2;
    let left = (w - size) / 2;
    let mut out = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let p = src.get_pixel((left + x) as u32, (top + y) as u32);
            for c in 0..3 {
                out[[c, y, x]] = f64::from(p[c]).clamp(0.0, 1.0);
            }
        }
    }
    out
}

pub fn to_rgb8(pixels: ArrayView3<'_, f64>) -> RgbImage {
    let (_, h, w) = pixels.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (pixels[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn save_png(pixels: ArrayView3<'_, f64>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    to_rgb8(pixels).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Bilinear resampling of a single plane with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    let (ys, xs) = (axis_weights(in_h, out_h), axis_weights(in_w, out_w));
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Source coordinate of output index `i` under half-pixel alignment.
pub fn bilinear_source_coord(i: usize, in_len: usize, out_len: usize) -> f64 {
    let scale = in_len as f64 / out_len as f64;
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64)
}

fn axis_weights(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let src = bilinear_source_coord(i, in_len, out_len);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of every channel.
pub fn resize_channels(src: ArrayView3<'_, f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let c = src.dim().0;
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        let plane = bilinear_resize(src.slice(s![ch, .., ..]), out_h, out_w);
        out.slice_mut(s![ch, .., ..]).assign(&plane);
    }
    out
}
