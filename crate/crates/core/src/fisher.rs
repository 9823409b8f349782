//! Per-sample gradients of the log-likelihood and the standardized-score kernel.

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::pixel_model::{mask_taps, MaskKind, MaskSpec, PixelModel};
use crate::tensor::{Real, Tensor};

/// Gradient of `log p(x)` with respect to every model parameter, in [`crate::params::ParamSet`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherScore<T> {
    pub id: u64,
    pub values: Vec<T>,
}

/// Exact score of one image (`[H, W]` or `[1, 1, H, W]` levels).
pub fn fisher_score<T: Real>(model: &PixelModel<T>, image: &Tensor<T>) -> Result<Vec<T>> {
    let cfg = model.config();
    let batch = image.clone().reshape(&[1, 1, cfg.height, cfg.width])?;
    let mut tape = Tape::new();
    let p = tape.params(model.params());
    let (_, lp) = model.log_prob_on_tape(&mut tape, &p, &batch)?;
    let grads = tape.backward(lp)?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite {
            op: "fisher_score",
            context: Some(format!("parameter block {name}")),
        });
    }
    Ok(grads.flatten())
}

/// Scores of `images[i]` for each `i`, in input order; parallel across samples.
pub fn fisher_scores<T: Real>(
    model: &PixelModel<T>,
    images: &Tensor<T>,
    ids: &[u64],
) -> Result<Vec<FisherScore<T>>> {
    let cfg = model.config();
    let d = cfg.height * cfg.width;
    if images.len() != ids.len() * d {
        return Err(Error::shape("fisher_scores", "image count", ids.len(), images.len() / d));
    }
    ids.par_iter()
        .enumerate()
        .map(|(i, &id)| {
            let img = Tensor::new(vec![cfg.height, cfg.width], images.data()[i * d..(i + 1) * d].to_vec())?;
            Ok(FisherScore {
                id,
                values: fisher_score(model, &img)?,
            })
        })
        .collect()
}

/// Flattened coordinates that can be nonzero in any score: everything except masked taps.
pub fn score_support<T: Real>(model: &PixelModel<T>) -> Vec<usize> {
    let cfg = model.config();
    let mut support = Vec::new();
    let mut offset = 0;
    for (name, t) in model.params().iter() {
        let layer = name
            .strip_prefix("layer")
            .and_then(|r| r.strip_suffix(".weight"))
            .and_then(|l| l.parse::<usize>().ok());
        match layer {
            Some(l) => {
                let kind = if l == 0 { MaskKind::A } else { MaskKind::B };
                let taps = mask_taps(MaskSpec { kind, kernel: cfg.kernel }).expect("validated kernel");
                let kk = taps.len();
                support.extend((0..t.len()).filter(|i| taps[i % kk]).map(|i| offset + i));
            }
            None => support.extend(offset..offset + t.len()),
        }
        offset += t.len();
    }
    support
}

/// Per-dimension mean and floored population standard deviation of a score set.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
    pub count: usize,
}

pub const DEFAULT_STD_FLOOR: f64 = 1e-8;

/// Streaming (Welford) accumulator for [`ScoreStandardizer`].
#[derive(Clone, Debug)]
pub struct StandardizerFit {
    mean: Vec<f64>,
    m2: Vec<f64>,
    count: usize,
}

impl StandardizerFit {
    pub fn new(dim: usize) -> Self {
        StandardizerFit {
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn push<T: Real>(&mut self, score: &[T]) -> Result<()> {
        if score.len() != self.mean.len() {
            return Err(Error::shape("fit_standardizer", "score length", self.mean.len(), score.len()));
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, q), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(score) {
            let v = v.to_f64().unwrap();
            let delta = v - *m;
            *m += delta / n;
            *q += delta * (v - *m);
        }
        Ok(())
    }

    pub fn finish(self, eps: f64) -> Result<ScoreStandardizer> {
        if self.count < 2 {
            return Err(Error::invalid("fit_standardizer", format!("need at least 2 scores, got {}", self.count)));
        }
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::invalid("fit_standardizer", "floor must be positive"));
        }
        let n = self.count as f64;
        Ok(ScoreStandardizer {
            std: self.m2.iter().map(|&q| (q / n).sqrt().max(eps)).collect(),
            mean: self.mean,
            eps,
            count: self.count,
        })
    }
}

pub fn fit_standardizer<'a, T: Real>(scores: impl IntoIterator<Item = &'a [T]>, eps: f64) -> Result<ScoreStandardizer> {
    let mut it = scores.into_iter().peekable();
    let dim = it
        .peek()
        .map(|s| s.len())
        .ok_or_else(|| Error::invalid("fit_standardizer", "empty score set"))?;
    let mut fit = StandardizerFit::new(dim);
    for s in it {
        fit.push(s)?;
    }
    fit.finish(eps)
}

impl ScoreStandardizer {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize<T: Real>(&self, score: &[T]) -> Result<Vec<f64>> {
        if score.len() != self.dim() {
            return Err(Error::shape("standardize", "score length", self.dim(), score.len()));
        }
        Ok(score
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&v, &m), &s)| (v.to_f64().unwrap() - m) / s)
            .collect())
    }
}

/// Dot product of standardized scores.
pub fn fisher_kernel<T: Real>(std: &ScoreStandardizer, a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("fisher_kernel", "score length", a.len(), b.len()));
    }
    let (sa, sb) = (std.standardize(a)?, std.standardize(b)?);
    Ok(sa.iter().zip(&sb).map(|(x, y)| x * y).sum())
}
