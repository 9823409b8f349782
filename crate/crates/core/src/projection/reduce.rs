use std::fmt;
use std::str::FromStr;

use log::info;
use rayon::prelude::*;

use super::{project_rows, PcaModel, SparseProjection};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::fisher::{fisher_score, score_support, ScoreStandardizer};
use crate::pixel_model::PixelModel;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingSource {
    Fisher,
    Activation,
}

impl EmbeddingSource {
    pub fn tag(self) -> u8 {
        match self {
            EmbeddingSource::Fisher => 0,
            EmbeddingSource::Activation => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(EmbeddingSource::Fisher),
            1 => Some(EmbeddingSource::Activation),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingSource::Fisher => "fisher",
            EmbeddingSource::Activation => "activation",
        }
    }
}

impl fmt::Display for EmbeddingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbeddingSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fisher" => Ok(EmbeddingSource::Fisher),
            "activation" => Ok(EmbeddingSource::Activation),
            _ => Err(Error::invalid("embedding_source", format!("unknown source {s:?} (fisher|activation)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub id: u64,
    pub source: EmbeddingSource,
    pub values: Vec<f32>,
}

/// One projection followed by an optional PCA.
#[derive(Clone, Debug, PartialEq)]
pub struct ReductionChain {
    pub projection: SparseProjection,
    pub pca: Option<PcaModel>,
}

impl ReductionChain {
    pub fn out_dim(&self) -> usize {
        self.pca.as_ref().map_or(self.projection.p_out(), |p| p.out_dim())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ReduceOptions<'a> {
    pub source: EmbeddingSource,
    /// Masked layer read by the activation source.
    pub layer: usize,
    pub batch_size: usize,
    /// Standardize scores before projecting (fisher source only).
    pub standardizer: Option<&'a ScoreStandardizer>,
}

/// Embeds `data[indices]` through every chain; `out[k][i]` is sample `indices[i]` under chain `k`.
///
/// Per-sample vectors are produced in batches and streamed straight into the
/// projections, so at most `batch_size` high-dimensional vectors are alive.
pub fn reduce<T: Real>(
    model: &PixelModel<T>,
    data: &ImageSet,
    indices: &[usize],
    chains: &[ReductionChain],
    opts: &ReduceOptions<'_>,
) -> Result<Vec<Vec<Embedding>>> {
    let cfg = model.config();
    let n_in = match opts.source {
        EmbeddingSource::Fisher => model.n_params(),
        EmbeddingSource::Activation => {
            if opts.layer >= cfg.n_layers {
                return Err(Error::invalid("reduce", format!("layer {} out of range", opts.layer)));
            }
            cfg.filters * cfg.pixels()
        }
    };
    for c in chains {
        if c.projection.n_in() != n_in {
            return Err(Error::shape("reduce", "projection input dim", n_in, c.projection.n_in()));
        }
        if let Some(p) = &c.pca {
            if p.dim() != c.projection.p_out() {
                return Err(Error::shape("reduce", "pca input dim", c.projection.p_out(), p.dim()));
            }
        }
    }
    if let Some(s) = opts.standardizer {
        if opts.source != EmbeddingSource::Fisher || s.dim() != n_in {
            return Err(Error::invalid("reduce", "standardizer requires the fisher source and a matching dimension"));
        }
    }
    let support: Vec<usize> = match opts.source {
        EmbeddingSource::Fisher => score_support(model),
        EmbeddingSource::Activation => (0..n_in).collect(),
    };
    let projections: Vec<&SparseProjection> = chains.iter().map(|c| &c.projection).collect();
    let mut out: Vec<Vec<Embedding>> = chains.iter().map(|_| Vec::with_capacity(indices.len())).collect();
    let (h, w) = (cfg.height, cfg.width);
    let batch_size = opts.batch_size.max(1);
    for (b, chunk) in indices.chunks(batch_size).enumerate() {
        let images = data.batch::<T>(chunk);
        let rows: Vec<Vec<T>> = match opts.source {
            EmbeddingSource::Fisher => (0..chunk.len())
                .into_par_iter()
                .map(|i| {
                    let img = Tensor::new(vec![h, w], images.data()[i * h * w..(i + 1) * h * w].to_vec())?;
                    let score = fisher_score(model, &img)?;
                    Ok(match opts.standardizer {
                        Some(s) => {
                            let z = s.standardize(&score)?;
                            support.iter().map(|&j| T::from_f64(z[j]).unwrap()).collect()
                        }
                        None => support.iter().map(|&j| score[j]).collect(),
                    })
                })
                .collect::<Result<_>>()?,
            EmbeddingSource::Activation => model.activations_batch(&images, opts.layer)?,
        };
        let projected = project_rows(&projections, &support, &rows)?;
        for (k, (chain, zs)) in chains.iter().zip(projected).enumerate() {
            for (&idx, z) in chunk.iter().zip(zs) {
                let values = match &chain.pca {
                    Some(p) => p.apply(&z)?,
                    None => z,
                };
                out[k].push(Embedding {
                    id: idx as u64,
                    source: opts.source,
                    values: values.iter().map(|v| v.to_f32().unwrap()).collect(),
                });
            }
        }
        let done = ((b + 1) * batch_size).min(indices.len());
        if b % 8 == 7 || done == indices.len() {
            info!("reduce ({}): {done}/{} samples", opts.source, indices.len());
        }
    }
    Ok(out)
}
