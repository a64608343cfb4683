//! Square crop grids and the pooled crop-activation matrix fed to NMF.

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClassConditionedSet;
use crate::error::{Error, Result};
use crate::image::{resize_channels, Image};
use crate::model::ClassifierAdapter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPolicy {
    /// Crop side in pixels.
    pub size: usize,
    pub stride: usize,
}

impl CropPolicy {
    /// Half-side crops at half-crop stride: a 3×3 grid per image.
    pub fn for_image_size(side: usize) -> Self {
        let size = side / 2;
        CropPolicy {
            size,
            stride: (size / 2).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

#[derive(Debug, Clone)]
pub struct Crop {
    pub image_id: String,
    pub crop_box: CropBox,
    pub image: Image,
}

/// Crop-activation matrix `A` (`N_crops × C`) with provenance per row.
#[derive(Debug, Clone)]
pub struct CropActivationMatrix {
    pub values: Array2<f64>,
    pub provenance: Vec<(String, CropBox)>,
}

pub fn crop_boxes(height: usize, width: usize, policy: CropPolicy) -> Result<Vec<CropBox>> {
    if policy.size == 0 || policy.stride == 0 {
        return Err(Error::Config("crop size and stride must be positive".into()));
    }
    if policy.size > height || policy.size > width {
        return Err(Error::Config(format!(
            "crop size {} exceeds image size {height}x{width}",
            policy.size
        )));
    }
    let mut out = Vec::new();
    for top in (0..=height - policy.size).step_by(policy.stride) {
        for left in (0..=width - policy.size).step_by(policy.stride) {
            out.push(CropBox {
                top,
                left,
                size: policy.size,
            });
        }
    }
    Ok(out)
}

fn crop_image(image: &Image, b: CropBox, out_size: usize) -> Result<Image> {
    let view = image
        .pixels()
        .slice_move(s![.., b.top..b.top + b.size, b.left..b.left + b.size]);
    let resized = resize_channels(view, out_size, out_size);
    image.with_pixels(resized)
}

/// Deterministic crop grid over every image of the set, resized to `out_size`.
pub fn make_crops(set: &ClassConditionedSet, policy: CropPolicy, out_size: usize) -> Result<Vec<Crop>> {
    let mut crops = Vec::new();
    for img in &set.images {
        for b in crop_boxes(img.height(), img.width(), policy)? {
            crops.push(Crop {
                image_id: img.id().to_string(),
                crop_box: b,
                image: crop_image(img, b, out_size)?,
            });
        }
    }
    Ok(crops)
}

/// Spatially pooled split-layer activation of every crop, one row per crop.
pub fn crop_activation_matrix(
    set: &ClassConditionedSet,
    adapter: &ClassifierAdapter,
    policy: CropPolicy,
) -> Result<CropActivationMatrix> {
    let per_image: Vec<Vec<(String, CropBox, Array1<f64>)>> = set
        .images
        .par_iter()
        .map(|img| {
            crop_boxes(img.height(), img.width(), policy)?
                .into_iter()
                .map(|b| {
                    let crop = crop_image(img, b, adapter.input_size())?;
                    let pooled = adapter.activations(&crop)?.pooled();
                    Ok((img.id().to_string(), b, pooled))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let rows: Vec<(String, CropBox, Array1<f64>)> = per_image.into_iter().flatten().collect();
    let channels = rows.first().map_or(0, |r| r.2.len());
    let mut values = Array2::zeros((rows.len(), channels));
    let mut provenance = Vec::with_capacity(rows.len());
    for (i, (id, b, pooled)) in rows.into_iter().enumerate() {
        values.row_mut(i).assign(&pooled);
        provenance.push((id, b));
    }
    Ok(CropActivationMatrix { values, provenance })
}
