//! Image grids written as 8-bit grayscale PNG.

use std::path::Path;

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::formats::atomic_write;

/// Gray level of the separator between cells.
const SEPARATOR: u8 = 128;

/// Grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Tiles `cells` (each `height × width` levels) row by row into `rows × cols`,
/// with a one-pixel separator, every pixel magnified `zoom` times.
pub fn tile(cells: &[&[u8]], cols: usize, height: usize, width: usize, levels: u32, zoom: usize) -> Result<Raster> {
    if cols == 0 || cells.is_empty() || zoom == 0 || levels < 2 {
        return Err(Error::invalid("tile", "need at least one cell, one column, zoom >= 1 and levels >= 2"));
    }
    if let Some(c) = cells.iter().find(|c| c.len() != height * width) {
        return Err(Error::shape("tile", "cell size", height * width, c.len()));
    }
    let rows = cells.len().div_ceil(cols);
    let (cw, ch) = (width * zoom + 1, height * zoom + 1);
    let (w, h) = (cols * cw + 1, rows * ch + 1);
    let mut pixels = vec![SEPARATOR; w * h];
    let max = levels - 1;
    for (k, cell) in cells.iter().enumerate() {
        let (x0, y0) = ((k % cols) * cw + 1, (k / cols) * ch + 1);
        for y in 0..height * zoom {
            for x in 0..width * zoom {
                let v = cell[(y / zoom) * width + x / zoom] as u32;
                pixels[(y0 + y) * w + x0 + x] = (v.min(max) * 255 / max) as u8;
            }
        }
    }
    Ok(Raster { width: w, height: h, pixels })
}

/// Grid of the images of `set` at `indices`.
pub fn dataset_grid(set: &ImageSet, indices: &[usize], cols: usize, zoom: usize) -> Result<Raster> {
    let cells: Vec<&[u8]> = indices.iter().map(|&i| set.image(i)).collect();
    tile(&cells, cols, set.height, set.width, set.levels, zoom)
}

pub fn encode_png(r: &Raster) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, r.width as u32, r.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        w.write_image_data(&r.pixels).map_err(|e| Error::Png(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, r: &Raster) -> Result<()> {
    atomic_write(path, &encode_png(r)?)
}
