//! Image datasets: IDX ingestion, binarization, quantization and batching.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::{Real, Tensor};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Grayscale images with values in `[0, 1]`, stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImages {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub labels: Option<Vec<u8>>,
}

impl GrayImages {
    pub fn len(&self) -> usize {
        self.values.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.height * self.width;
        &self.values[i * d..(i + 1) * d]
    }

    pub fn take(&self, n: usize) -> GrayImages {
        let n = n.min(self.len());
        GrayImages {
            height: self.height,
            width: self.width,
            values: self.values[..n * self.height * self.width].to_vec(),
            labels: self.labels.as_ref().map(|l| l[..n].to_vec()),
        }
    }

    /// 2×2 average pooling; odd trailing rows/columns are dropped.
    pub fn downsample2(&self) -> Result<GrayImages> {
        let (h, w) = (self.height / 2, self.width / 2);
        if h == 0 || w == 0 {
            return Err(Error::invalid("downsample2", "image smaller than 2x2"));
        }
        let mut values = Vec::with_capacity(self.len() * h * w);
        for n in 0..self.len() {
            let img = self.image(n);
            for i in 0..h {
                for j in 0..w {
                    let at = |y: usize, x: usize| img[y * self.width + x];
                    values.push(
                        (at(2 * i, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j) + at(2 * i + 1, 2 * j + 1))
                            / 4.0,
                    );
                }
            }
        }
        Ok(GrayImages {
            height: h,
            width: w,
            values,
            labels: self.labels.clone(),
        })
    }
}

/// Discrete-valued images: each pixel is a level in `0..levels`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub height: usize,
    pub width: usize,
    pub levels: u32,
    pub pixels: Vec<u8>,
    pub labels: Option<Vec<u8>>,
}

impl ImageSet {
    pub fn new(height: usize, width: usize, levels: u32, pixels: Vec<u8>, labels: Option<Vec<u8>>) -> Result<Self> {
        let d = height * width;
        if d == 0 || !pixels.len().is_multiple_of(d) {
            return Err(Error::shape("image_set", "pixel count", format!("multiple of {d}"), pixels.len()));
        }
        if !(2..=256).contains(&levels) {
            return Err(Error::invalid("image_set", format!("levels {levels} outside 2..=256")));
        }
        if let Some(bad) = pixels.iter().find(|&&p| p as u32 >= levels) {
            return Err(Error::invalid("image_set", format!("pixel level {bad} >= {levels}")));
        }
        if let Some(l) = &labels {
            if l.len() != pixels.len() / d {
                return Err(Error::shape("image_set", "label count", pixels.len() / d, l.len()));
            }
        }
        Ok(ImageSet {
            height,
            width,
            levels,
            pixels,
            labels,
        })
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / self.pixels_per_image()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let d = self.pixels_per_image();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> Option<u8> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageSet {
            height: self.height,
            width: self.width,
            levels: self.levels,
            pixels,
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// `[n, 1, H, W]` tensor of pixel levels.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> Tensor<T> {
        let d = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&p| T::from_u8(p).unwrap()));
        }
        Tensor::new(vec![indices.len(), 1, self.height, self.width], data).expect("batch shape")
    }

    /// Deterministic shuffled split into `(first, second)` with `round(len * frac)` in the first part.
    pub fn split(&self, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut stream_rng(seed, 0));
        let cut = ((self.len() as f64) * frac).round() as usize;
        let second = idx.split_off(cut.min(idx.len()));
        (idx, second)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            what: what.to_string(),
            offset: bytes.len() as u64,
            msg: format!("file truncated in header (needed bytes {}..{})", offset, offset + 4),
        })
}

/// Parses an IDX3 image file body into `[0, 1]` grayscale values.
pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<GrayImages> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format {
            what: what.into(),
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {IDX_IMAGES:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let h = be_u32(bytes, 8, what)? as usize;
    let w = be_u32(bytes, 12, what)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(Error::Format {
            what: what.into(),
            offset: bytes.len() as u64,
            msg: format!("file truncated: header promises {n}x{h}x{w} pixels ending at byte {need}"),
        });
    }
    Ok(GrayImages {
        height: h,
        width: w,
        values: bytes[16..need].iter().map(|&b| b as f32 / 255.0).collect(),
        labels: None,
    })
}

pub fn parse_idx_labels(bytes: &[u8], what: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_LABELS {
        return Err(Error::Format {
            what: what.into(),
            offset: 0,
            msg: format!("bad magic {magic:#010x}, expected {IDX_LABELS:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Format {
            what: what.into(),
            offset: bytes.len() as u64,
            msg: format!("file truncated: header promises {n} labels ending at byte {}", 8 + n),
        });
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Reads an IDX image file (optionally gzip-compressed) and, if given, its label file.
pub fn ingest_idx(images: &Path, labels: Option<&Path>) -> Result<GrayImages> {
    let mut set = parse_idx_images(&read_maybe_gz(images)?, &images.display().to_string())?;
    if let Some(lp) = labels {
        let l = parse_idx_labels(&read_maybe_gz(lp)?, &lp.display().to_string())?;
        if l.len() != set.len() {
            return Err(Error::shape("ingest_idx", "label count vs image count", set.len(), l.len()));
        }
        set.labels = Some(l);
    }
    Ok(set)
}

fn check_unit_range(op: &'static str, values: &[f32]) -> Result<()> {
    if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(op, format!("value {v} at index {i} outside [0, 1]")));
    }
    Ok(())
}

/// Each pixel becomes 1 with probability equal to its grayscale value.
///
/// Image `n` draws from stream `n` of `seed`, so a sample's binarization does
/// not depend on which other samples are present.
pub fn binarize(images: &GrayImages, seed: u64) -> Result<ImageSet> {
    check_unit_range("binarize", &images.values)?;
    let d = images.height * images.width;
    let mut pixels = Vec::with_capacity(images.values.len());
    for n in 0..images.len() {
        let mut rng = stream_rng(seed, n as u64);
        for &v in &images.values[n * d..(n + 1) * d] {
            let u: f32 = rng.random();
            pixels.push(u8::from(u < v));
        }
    }
    ImageSet::new(images.height, images.width, 2, pixels, images.labels.clone())
}

/// `floor(v * (2^bits - 1) + 0.5)` integer levels.
pub fn quantize(images: &GrayImages, bits: u32) -> Result<ImageSet> {
    if !(1..=8).contains(&bits) {
        return Err(Error::invalid("quantize", format!("bits {bits} outside 1..=8")));
    }
    check_unit_range("quantize", &images.values)?;
    let top = ((1u32 << bits) - 1) as f32;
    let pixels = images.values.iter().map(|&v| (v * top + 0.5).floor() as u8).collect();
    ImageSet::new(images.height, images.width, 1 << bits, pixels, images.labels.clone())
}

/// Levels of an [`ImageSet`] mapped back to `[0, 1]`.
pub fn dequantize(set: &ImageSet) -> GrayImages {
    let top = (set.levels - 1) as f32;
    GrayImages {
        height: set.height,
        width: set.width,
        values: set.pixels.iter().map(|&p| p as f32 / top).collect(),
        labels: set.labels.clone(),
    }
}
