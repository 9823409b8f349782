//! Attribute vectors: class-mean differences in embedding space, added to embeddings before decoding.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::classifier::{train_classifier, Classifier, ClassifierConfig, ClassifierTrainConfig};
use crate::data::ImageSet;
use crate::decoder::{train_decoder, Decoder, DecoderConfig, DecoderTrainConfig};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::projection::{Embedding, EmbeddingSource};
use crate::rng::stream_rng;
use crate::tensor::Real;

/// Extrapolation factor used when none is given.
pub const DEFAULT_SCALE: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeVector {
    pub name: String,
    pub delta: Vec<f32>,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn class_mean<'a>(rows: impl Iterator<Item = &'a [f32]>, dim: usize) -> (Vec<f64>, usize) {
    let mut sum = vec![0.0f64; dim];
    let mut n = 0;
    for r in rows {
        sum.iter_mut().zip(r).for_each(|(s, &v)| *s += v as f64);
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n.max(1) as f64);
    (sum, n)
}

/// `mean(embeddings with the attribute) − mean(embeddings without it)`.
pub fn attribute_vector(embeddings: &[Embedding], has_attribute: &[bool], name: &str) -> Result<AttributeVector> {
    if embeddings.len() != has_attribute.len() {
        return Err(Error::shape("attribute_vector", "labels", embeddings.len(), has_attribute.len()));
    }
    let dim = embeddings.first().map_or(0, |e| e.values.len());
    if let Some(e) = embeddings.iter().find(|e| e.values.len() != dim) {
        return Err(Error::shape("attribute_vector", "embedding length", dim, e.values.len()));
    }
    let pick = |want: bool| {
        embeddings
            .iter()
            .zip(has_attribute)
            .filter(move |(_, &l)| l == want)
            .map(|(e, _)| e.values.as_slice())
    };
    let (pos, n_pos) = class_mean(pick(true), dim);
    let (neg, n_neg) = class_mean(pick(false), dim);
    if n_pos == 0 || n_neg == 0 {
        let which = if n_pos == 0 { "with" } else { "without" };
        return Err(Error::invalid("attribute_vector", format!("attribute {name:?}: no embeddings {which} it")));
    }
    Ok(AttributeVector {
        name: name.to_string(),
        delta: pos.iter().zip(&neg).map(|(p, n)| (p - n) as f32).collect(),
        n_pos,
        n_neg,
    })
}

/// `z + scale·δ`; a negative scale removes the attribute.
pub fn apply_attribute(z: &[f32], delta: &[f32], scale: f64) -> Result<Vec<f32>> {
    if z.len() != delta.len() {
        return Err(Error::shape("apply_attribute", "embedding length", delta.len(), z.len()));
    }
    Ok(z.iter().zip(delta).map(|(&a, &d)| (a as f64 + scale * d as f64) as f32).collect())
}

/// Mode image decoded from the shifted embedding.
pub fn manipulate_image<T: Real>(decoder: &Decoder<T>, z: &[f32], delta: &[f32], scale: f64) -> Result<Vec<u8>> {
    let shifted = apply_attribute(z, delta, scale)?;
    decoder.decode_mode(&[&shifted], 1)
}

/// Rows are embeddings, columns are scales; every cell is one mode image.
pub fn manipulation_grid<T: Real>(decoder: &Decoder<T>, zs: &[&[f32]], delta: &[f32], scales: &[f64]) -> Result<Vec<Vec<u8>>> {
    let mut cells = Vec::with_capacity(zs.len() * scales.len());
    let side = decoder.config().height * decoder.config().width;
    for z in zs {
        let shifted: Vec<Vec<f32>> = scales.iter().map(|&s| apply_attribute(z, delta, s)).collect::<Result<_>>()?;
        let refs: Vec<&[f32]> = shifted.iter().map(Vec::as_slice).collect();
        cells.extend(decoder.decode_mode(&refs, scales.len())?.chunks(side).map(<[u8]>::to_vec));
    }
    Ok(cells)
}

/// Fraction of embeddings whose decoded class changes after shifting by `scale·δ`.
pub fn flip_rate<T: Real>(decoder: &Decoder<T>, classifier: &Classifier, zs: &[&[f32]], delta: &[f32], scale: f64) -> Result<f64> {
    if zs.is_empty() {
        return Err(Error::invalid("flip_rate", "no embeddings"));
    }
    let side = decoder.config().height * decoder.config().width;
    let plain = decoder.decode_mode(zs, 256)?;
    let shifted: Vec<Vec<f32>> = zs.iter().map(|z| apply_attribute(z, delta, scale)).collect::<Result<_>>()?;
    let refs: Vec<&[f32]> = shifted.iter().map(Vec::as_slice).collect();
    let moved = decoder.decode_mode(&refs, 256)?;
    let before = classifier.predict(&plain.chunks(side).collect::<Vec<_>>())?;
    let after = classifier.predict(&moved.chunks(side).collect::<Vec<_>>())?;
    Ok(before.iter().zip(&after).filter(|(a, b)| a != b).count() as f64 / zs.len() as f64)
}

/// Angle in degrees between two vectors.
pub fn angle_degrees(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Synthetic images whose embeddings carry a known attribute direction.
///
/// Each sample has Gaussian content factors `u` and a binary attribute `a`.
/// The image thresholds a smooth random field driven by `u`, plus a solid bar
/// along the bottom rows when `a = 1`. The embedding is `R·[u; a]` with
/// small noise, so the planted direction is the last column of `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedAttribute {
    /// Binary images labeled with the attribute (0 or 1).
    pub images: ImageSet,
    pub embeddings: Vec<Embedding>,
    pub has_attribute: Vec<bool>,
    pub direction: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedConfig {
    pub n: usize,
    pub side: usize,
    pub content_dim: usize,
    pub embed_dim: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            n: 2000,
            side: 8,
            content_dim: 4,
            embed_dim: 12,
            noise: 0.05,
            seed: 0,
        }
    }
}

pub fn planted_attribute(cfg: &PlantedConfig) -> Result<PlantedAttribute> {
    let (k, d, side) = (cfg.content_dim, cfg.embed_dim, cfg.side);
    if cfg.n < 2 || side < 4 || k == 0 || d <= k {
        return Err(Error::invalid("planted_attribute", format!("degenerate configuration {cfg:?}")));
    }
    let pixels = side * side;
    let mut rng = stream_rng(cfg.seed, 0);
    // smooth basis: each factor is a random plane wave over the upper rows
    let basis: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let (fy, fx, ph): (f64, f64, f64) = (rng.random_range(0.3..1.2), rng.random_range(0.3..1.2), rng.random_range(0.0..6.3));
            (0..pixels)
                .map(|p| ((p / side) as f64 * fy + (p % side) as f64 * fx + ph).sin())
                .collect()
        })
        .collect();
    let mix: Vec<f64> = (0..d * (k + 1)).map(|_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()).collect();
    let bar_rows = side - 2..side;
    let mut imgs = Vec::with_capacity(cfg.n * pixels);
    let mut embeddings = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let u: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let a = i % 2 == 1;
        for p in 0..pixels {
            let on = if bar_rows.contains(&(p / side)) {
                a
            } else {
                (0..k).map(|j| basis[j][p] * u[j]).sum::<f64>() > 0.0
            };
            imgs.push(on as u8);
        }
        let factors: Vec<f64> = u.iter().copied().chain([a as u8 as f64]).collect();
        let values = (0..d)
            .map(|r| {
                let clean: f64 = (0..=k).map(|c| mix[r * (k + 1) + c] * factors[c]).sum();
                (clean + cfg.noise * rng.sample::<f64, _>(StandardNormal)) as f32
            })
            .collect();
        embeddings.push(Embedding {
            id: i as u64,
            source: EmbeddingSource::Activation,
            values,
        });
        labels.push(a);
    }
    let images = ImageSet::new(side, side, 2, imgs, Some(labels.iter().map(|&a| a as u8).collect()))?;
    Ok(PlantedAttribute {
        images,
        embeddings,
        has_attribute: labels,
        direction: (0..d).map(|r| mix[r * (k + 1) + k]).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedReport {
    pub angle_degrees: f64,
    pub classifier_accuracy: f64,
    pub reconstruction_error: f64,
    /// `(scale, flip rate over attribute-free samples)`.
    pub flip_rates: Vec<(f64, f64)>,
}

/// Trains a decoder and an attribute classifier on a planted dataset, then
/// measures how often adding `scale·δ` to attribute-free embeddings flips the classifier.
pub fn run_planted_benchmark(cfg: &PlantedConfig, scales: &[f64], epochs: usize) -> Result<(PlantedReport, Decoder<f32>, AttributeVector)> {
    let data = planted_attribute(cfg)?;
    let delta = attribute_vector(&data.embeddings, &data.has_attribute, "bar")?;
    let delta64: Vec<f64> = delta.delta.iter().map(|&v| v as f64).collect();
    let angle = angle_degrees(&delta64, &data.direction);

    let dc = DecoderConfig {
        input_dim: cfg.embed_dim,
        dense: 128,
        wide: 32,
        narrow: 16,
        height: cfg.side,
        width: cfg.side,
        levels: 2,
    };
    let decoder = Decoder::init(dc, &mut stream_rng(cfg.seed, 1))?;
    let tc = DecoderTrainConfig {
        batch_size: 32,
        epochs,
        adam: AdamConfig { lr: 2e-3, ..Default::default() },
        seed: cfg.seed,
        validation_fraction: 0.1,
    };
    let (decoder, rep) = train_decoder(decoder, &data.embeddings, &data.images, &tc)?;

    let refs: Vec<&[u8]> = (0..data.images.len()).map(|i| data.images.image(i)).collect();
    let labels: Vec<usize> = data.has_attribute.iter().map(|&a| a as usize).collect();
    let cc = ClassifierConfig {
        conv1: 4,
        conv2: 8,
        hidden: 16,
        ..ClassifierConfig::new(cfg.side, cfg.side, 2, 2)
    };
    let ctc = ClassifierTrainConfig {
        epochs: 4,
        batch_size: 32,
        seed: cfg.seed,
        ..Default::default()
    };
    let (classifier, crep) = train_classifier(cc, &refs, &labels, &ctc)?;

    let negatives: Vec<&[f32]> = data
        .embeddings
        .iter()
        .zip(&data.has_attribute)
        .filter(|(_, &a)| !a)
        .map(|(e, _)| e.values.as_slice())
        .collect();
    let flip_rates = scales
        .iter()
        .map(|&s| Ok((s, flip_rate(&decoder, &classifier, &negatives, &delta.delta, s)?)))
        .collect::<Result<_>>()?;
    let report = PlantedReport {
        angle_degrees: angle,
        classifier_accuracy: crep.test_accuracy,
        reconstruction_error: rep.epoch_validation.last().copied().unwrap_or(f64::NAN),
        flip_rates,
    };
    Ok((report, decoder, delta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(values: &[f32]) -> Embedding {
        Embedding {
            id: 0,
            source: EmbeddingSource::Fisher,
            values: values.to_vec(),
        }
    }

    #[test]
    fn delta_by_hand_and_antisymmetry() {
        let e = [emb(&[1.0, 0.0]), emb(&[3.0, 0.0]), emb(&[0.0, 0.0])];
        let v = attribute_vector(&e, &[true, true, false], "x").unwrap();
        assert_eq!(v.delta, vec![2.0, 0.0]);
        assert_eq!((v.n_pos, v.n_neg), (2, 1));
        let w = attribute_vector(&e, &[false, false, true], "x").unwrap();
        assert_eq!(w.delta, vec![-2.0, -0.0]);
        let err = attribute_vector(&e, &[true; 3], "glasses").unwrap_err().to_string();
        assert!(err.contains("glasses"), "{err}");
    }

    #[test]
    fn apply_identity_inverse_and_linearity_on_exact_values() {
        let z = [1.5f32, -2.0, 0.25];
        let (d1, d2) = ([0.5f32, 1.0, -0.75], [2.0f32, -0.5, 0.125]);
        assert_eq!(apply_attribute(&z, &d1, 0.0).unwrap(), z);
        assert_eq!(apply_attribute(&apply_attribute(&z, &d1, 3.0).unwrap(), &d1, -3.0).unwrap(), z);
        let sum: Vec<f32> = d1.iter().zip(&d2).map(|(a, b)| a + b).collect();
        let chained = apply_attribute(&apply_attribute(&z, &d1, 1.0).unwrap(), &d2, 1.0).unwrap();
        assert_eq!(chained, apply_attribute(&z, &sum, 1.0).unwrap());
        assert!(apply_attribute(&z, &[1.0], 1.0).is_err());
    }

    #[test]
    fn planted_delta_aligns_with_direction() {
        let data = planted_attribute(&PlantedConfig::default()).unwrap();
        let v = attribute_vector(&data.embeddings, &data.has_attribute, "bar").unwrap();
        let d: Vec<f64> = v.delta.iter().map(|&x| x as f64).collect();
        let angle = angle_degrees(&d, &data.direction);
        assert!(angle < 10.0, "{angle}");
        assert_eq!(data.images.len(), 2000);
    }

    #[test]
    fn scale_zero_reproduces_reconstruction() {
        let data = planted_attribute(&PlantedConfig { n: 10, ..Default::default() }).unwrap();
        let dc = DecoderConfig {
            input_dim: 12,
            dense: 8,
            wide: 3,
            narrow: 2,
            height: 8,
            width: 8,
            levels: 2,
        };
        let dec = Decoder::<f32>::init(dc, &mut stream_rng(0, 0)).unwrap();
        let z = &data.embeddings[3].values;
        let delta = vec![1.0f32; 12];
        assert_eq!(manipulate_image(&dec, z, &delta, 0.0).unwrap(), dec.decode_mode(&[z], 1).unwrap());
        let grid = manipulation_grid(&dec, &[z, z], &delta, &[-3.0, 0.0, 3.0]).unwrap();
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[1], dec.decode_mode(&[z], 1).unwrap());
    }
}
