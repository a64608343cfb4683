//! Grid figures of defended images: one row per example, one column per patch area.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::image::Image;

const GAP: u32 = 2;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const BLANK: Rgb<u8> = Rgb([128, 128, 128]);

/// Lays out `cells[row][col]`; missing cells are drawn as gray blanks.
pub fn render_grid(cells: &[Vec<Option<Image>>]) -> Result<RgbImage> {
    if cells.is_empty() || cells.iter().all(|r| r.is_empty()) {
        return Err(Error::Input("a figure needs at least one example".into()));
    }
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let first = cells
        .iter()
        .flatten()
        .flatten()
        .next()
        .ok_or_else(|| Error::Input("every figure cell is missing".into()))?;
    let (ch, cw) = (first.height() as u32, first.width() as u32);
    let rows = cells.len() as u32;
    let mut canvas = RgbImage::from_pixel(
        cols * cw + (cols + 1) * GAP,
        rows * ch + (rows + 1) * GAP,
        BACKGROUND,
    );
    for (r, row) in cells.iter().enumerate() {
        for c in 0..cols as usize {
            let y0 = GAP + r as u32 * (ch + GAP);
            let x0 = GAP + c as u32 * (cw + GAP);
            match row.get(c).and_then(Option::as_ref) {
                Some(img) => {
                    let tile = img.to_rgb8();
                    if tile.dimensions() != (cw, ch) {
                        return Err(Error::Input("figure cells differ in size".into()));
                    }
                    image::imageops::replace(&mut canvas, &tile, i64::from(x0), i64::from(y0));
                }
                None => {
                    log::warn!("figure cell ({r}, {c}) is missing; drawing a blank");
                    for y in y0..y0 + ch {
                        for x in x0..x0 + cw {
                            canvas.put_pixel(x, y, BLANK);
                        }
                    }
                }
            }
        }
    }
    Ok(canvas)
}

pub fn emit_figure(cells: &[Vec<Option<Image>>], path: &Path) -> Result<()> {
    let canvas = render_grid(cells)?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    canvas.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Top-left pixel of cell `(row, col)` in a grid of `side`-pixel tiles.
pub fn cell_origin(row: usize, col: usize, side: usize) -> (usize, usize) {
    let g = GAP as usize;
    (g + row * (side + g), g + col * (side + g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn img(v: f64) -> Image {
        Image::new("x", 0, Array3::from_elem((3, 64, 64), v)).unwrap()
    }

    #[test]
    fn grid_dimensions_and_blanks() {
        let cells = vec![vec![Some(img(0.0)), None, Some(img(1.0))]; 3];
        let g = render_grid(&cells).unwrap();
        assert_eq!(g.dimensions(), (3 * 64 + 4 * GAP, 3 * 64 + 4 * GAP));
        let (y, x) = cell_origin(1, 1, 64);
        assert_eq!(*g.get_pixel(x as u32, y as u32), BLANK);
        let (y, x) = cell_origin(2, 2, 64);
        assert_eq!(*g.get_pixel(x as u32 + 5, y as u32 + 5), Rgb([255, 255, 255]));
    }

    #[test]
    fn zero_examples_is_an_error() {
        assert!(render_grid(&[]).is_err());
        assert!(render_grid(&[vec![None]]).is_err());
    }
}
