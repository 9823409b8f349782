//! Convolutional decoder from embeddings back to per-pixel distributions.
//!
//! Layout, with the spatial plan computed backwards from the target size:
//!
//! ```text
//! z ─ standardize ─ Linear(dense) ─ ReLU ─ reshape [C0, b, b]
//!   ─ ConvT(wide, k5, s2) ─ ReLU ─ ResBlock(wide)
//!   ─ ConvT(narrow, k5, s2) ─ Norm ─ ReLU ─ ConvT(levels, k5, s2) ─ logits
//! ```
//!
//! Each stride-2 stage maps `t` to `2t` (output padding 1) or `2t − 1`
//! (output padding 0) with padding 2.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{BatchStats, NormMode, Tape, Var};
use crate::conv::ConvTransposeParams;
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::projection::Embedding;
use crate::rng::stream_rng;
use crate::tensor::{Real, Tensor};

const KERNEL: usize = 5;
const NORM_EPS: f64 = 1e-5;
const NORM_MOMENTUM: f64 = 0.1;
const NORMS: [&str; 4] = ["res.bn1", "res.bn2", "res.bn3", "bn"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub input_dim: usize,
    pub dense: usize,
    pub wide: usize,
    pub narrow: usize,
    pub height: usize,
    pub width: usize,
    /// Output classes per pixel; 2 for binary images.
    pub levels: usize,
}

impl DecoderConfig {
    pub fn mnist(input_dim: usize, height: usize, width: usize) -> Self {
        DecoderConfig {
            input_dim,
            dense: 1024,
            wide: 128,
            narrow: 32,
            height,
            width,
            levels: 2,
        }
    }

    /// Spatial extents `[s0, s1, s2, s3]` (s3 = target) and output paddings of the three stages.
    pub fn plan(extent: usize) -> ([usize; 4], [usize; 3]) {
        let prev = |t: usize| if t.is_multiple_of(2) { (t / 2, 1) } else { (t.div_ceil(2), 0) };
        let (s2, o3) = prev(extent);
        let (s1, o2) = prev(s2);
        let (s0, o1) = prev(s1);
        ([s0, s1, s2, extent], [o1, o2, o3])
    }

    /// Channels of the reshaped dense output.
    pub fn base_channels(&self) -> usize {
        let (h, _) = Self::plan(self.height);
        let (w, _) = Self::plan(self.width);
        self.dense / (h[0] * w[0])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid("decoder_config", m));
        if [self.input_dim, self.dense, self.wide, self.narrow].contains(&0) {
            return bad("all widths must be positive".into());
        }
        if self.height < 2 || self.width < 2 {
            return bad(format!("target {}x{} too small", self.height, self.width));
        }
        if !(2..=256).contains(&self.levels) {
            return bad(format!("levels {} outside 2..=256", self.levels));
        }
        let (h, ho) = Self::plan(self.height);
        let (w, wo) = Self::plan(self.width);
        if ho != wo {
            return bad(format!("{}x{} needs different upsampling per axis", self.height, self.width));
        }
        if !self.dense.is_multiple_of(h[0] * w[0]) {
            return bad(format!(
                "dense width {} not divisible by base grid {}x{}",
                self.dense, h[0], w[0]
            ));
        }
        Ok(())
    }
}

/// Batch statistics of each normalization layer, by parameter prefix.
pub type LayerStats<T> = Vec<(String, BatchStats<T>)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T: Real> {
    config: DecoderConfig,
    params: ParamSet<T>,
    /// Input standardization and running normalization statistics.
    buffers: ParamSet<T>,
}

fn param_shapes(c: &DecoderConfig) -> Vec<(String, Vec<usize>)> {
    let c0 = c.base_channels();
    let k = KERNEL;
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("lin.weight".into(), vec![c.dense, c.input_dim]),
        ("lin.bias".into(), vec![c.dense]),
        ("up1.weight".into(), vec![c0, c.wide, k, k]),
        ("up1.bias".into(), vec![c.wide]),
    ];
    for (i, ks) in [(1, 1), (2, 3), (3, 1)] {
        v.push((format!("res.conv{i}.weight"), vec![c.wide, c.wide, ks, ks]));
        v.push((format!("res.bn{i}.gamma"), vec![c.wide]));
        v.push((format!("res.bn{i}.beta"), vec![c.wide]));
    }
    v.extend([
        ("up2.weight".into(), vec![c.wide, c.narrow, k, k]),
        ("up2.bias".into(), vec![c.narrow]),
        ("bn.gamma".into(), vec![c.narrow]),
        ("bn.beta".into(), vec![c.narrow]),
        ("up3.weight".into(), vec![c.narrow, c.levels, k, k]),
        ("up3.bias".into(), vec![c.levels]),
    ]);
    v
}

fn buffer_shapes(c: &DecoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<(String, Vec<usize>)> = vec![
        ("z.mean".into(), vec![c.input_dim]),
        ("z.scale".into(), vec![c.input_dim]),
    ];
    for n in NORMS {
        let ch = if n == "bn" { c.narrow } else { c.wide };
        v.push((format!("{n}.mean"), vec![ch]));
        v.push((format!("{n}.var"), vec![ch]));
    }
    v
}

/// Most probable level per pixel; ties resolve to the lower level.
pub fn mode_levels<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let [n, k, h, w] = logits.dims4("mode_levels")?;
    let d = h * w;
    let l = logits.data();
    let mut out = Vec::with_capacity(n * d);
    for s in 0..n {
        for i in 0..d {
            let mut best = 0;
            for c in 1..k {
                if l[(s * k + c) * d + i] > l[(s * k + best) * d + i] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// One draw per pixel from the softmax over levels.
pub fn sample_levels<T: Real>(logits: &Tensor<T>, rng: &mut impl Rng) -> Result<Vec<u8>> {
    let [n, k, h, w] = logits.dims4("sample_levels")?;
    let d = h * w;
    let l = logits.data();
    let mut out = Vec::with_capacity(n * d);
    for s in 0..n {
        for i in 0..d {
            let at = |c: usize| l[(s * k + c) * d + i].to_f64().unwrap();
            let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
            let wts: Vec<f64> = (0..k).map(|c| (at(c) - m).exp()).collect();
            let mut u = rng.random::<f64>() * wts.iter().sum::<f64>();
            let mut pick = k - 1;
            for (c, wc) in wts.iter().enumerate() {
                if u < *wc {
                    pick = c;
                    break;
                }
                u -= wc;
            }
            out.push(pick as u8);
        }
    }
    Ok(out)
}

impl<T: Real> Decoder<T> {
    /// Every parameter zero and identity standardization: all logits are zero.
    pub fn zeroed(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in param_shapes(&config) {
            params.push(name, Tensor::zeros(&shape))?;
        }
        let mut buffers = ParamSet::new();
        for (name, shape) in buffer_shapes(&config) {
            let fill = if name.ends_with(".scale") || name.ends_with(".var") { T::one() } else { T::zero() };
            buffers.push(name, Tensor::full(&shape, fill))?;
        }
        Ok(Decoder { config, params, buffers })
    }

    /// Uniform fan-in initialization; norm scales one, every bias and shift zero.
    pub fn init(config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut d = Self::zeroed(config)?;
        for (name, t) in d.params.iter_mut() {
            if name.ends_with(".gamma") {
                t.data_mut().fill(T::one());
                continue;
            }
            if !name.ends_with(".weight") {
                continue;
            }
            let s = t.shape();
            let fan_in = match s.len() {
                2 => s[1],
                // transposed convs spread each input over k²/stride² outputs per tap
                _ if name.starts_with("up") => s[0] * s[2] * s[3] / 4,
                _ => s[1] * s[2] * s[3],
            } as f64;
            let gain = if name == "up3.weight" { 3.0 } else { 6.0 };
            let bound = (gain / fan_in.max(1.0)).sqrt();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = T::from_f64(rng.random_range(-bound..bound)).unwrap());
        }
        Ok(d)
    }

    pub fn from_parts(config: DecoderConfig, params: ParamSet<T>, buffers: ParamSet<T>) -> Result<Self> {
        let z = Self::zeroed(config)?;
        if !z.params.same_layout(&params) || !z.buffers.same_layout(&buffers) {
            return Err(Error::invalid("decoder", "parameter names or shapes do not match the configuration"));
        }
        Ok(Decoder { config, params, buffers })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamSet<T> {
        &self.buffers
    }

    /// Sets the per-dimension input standardization from training embeddings.
    pub fn fit_input_scaling(&mut self, zs: &[&[f32]]) -> Result<()> {
        let d = self.config.input_dim;
        if zs.is_empty() {
            return Err(Error::invalid("decoder", "no embeddings to fit input scaling"));
        }
        if let Some(z) = zs.iter().find(|z| z.len() != d) {
            return Err(Error::shape("decoder", "embedding length", d, z.len()));
        }
        let n = zs.len() as f64;
        let mut mean = vec![0.0f64; d];
        for z in zs {
            mean.iter_mut().zip(z.iter()).for_each(|(m, &v)| *m += v as f64 / n);
        }
        let mut var = vec![0.0f64; d];
        for z in zs {
            var.iter_mut()
                .zip(z.iter().zip(&mean))
                .for_each(|(s, (&v, m))| *s += (v as f64 - m).powi(2) / n);
        }
        let biggest = var.iter().copied().fold(0.0, f64::max).sqrt();
        let floor = (biggest * 1e-6).max(1e-12);
        let to_t = |v: f64| T::from_f64(v).unwrap();
        let m = self.buffers.get_mut("z.mean").expect("declared");
        m.data_mut().iter_mut().zip(&mean).for_each(|(t, &v)| *t = to_t(v));
        let s = self.buffers.get_mut("z.scale").expect("declared");
        s.data_mut().iter_mut().zip(&var).for_each(|(t, &v)| *t = to_t(v.sqrt().max(floor)));
        Ok(())
    }

    fn standardized_input(&self, zs: &[&[f32]]) -> Result<Tensor<T>> {
        let d = self.config.input_dim;
        if zs.is_empty() {
            return Err(Error::invalid("decode", "empty batch"));
        }
        let mean = self.buffers.get("z.mean").expect("declared").data();
        let scale = self.buffers.get("z.scale").expect("declared").data();
        let mut data = Vec::with_capacity(zs.len() * d);
        for z in zs {
            if z.len() != d {
                return Err(Error::shape("decode", "embedding length", d, z.len()));
            }
            data.extend(z.iter().enumerate().map(|(j, &v)| (T::from_f32(v).unwrap() - mean[j]) / scale[j]));
        }
        Tensor::new(vec![zs.len(), d], data)
    }

    fn norm(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        affine: (Var, Var),
        name: &str,
        mode: Mode,
        stats: &mut Vec<(String, BatchStats<T>)>,
    ) -> Result<Var> {
        let eps = T::from_f64(NORM_EPS).unwrap();
        let (gamma, beta) = affine;
        match mode {
            Mode::Train => {
                let (y, s) = tape.batch_norm(x, gamma, beta, NormMode::Batch { eps })?;
                stats.push((name.to_string(), s.expect("batch mode")));
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.buffers.get(&format!("{name}.mean")).expect("declared").data();
                let var = self.buffers.get(&format!("{name}.var")).expect("declared").data();
                Ok(tape.batch_norm(x, gamma, beta, NormMode::Frozen { mean, var, eps })?.0)
            }
        }
    }

    /// Records the network; returns `[N, levels, H, W]` logits and, in train
    /// mode, the observed normalization statistics.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        zs: &[&[f32]],
        mode: Mode,
    ) -> Result<(Var, LayerStats<T>)> {
        let c = &self.config;
        let n = zs.len();
        let v = |name: &str| p[self.params.index_of(name).expect("declared")];
        let (hp, ho) = DecoderConfig::plan(c.height);
        let (wp, _) = DecoderConfig::plan(c.width);
        let stage = |i: usize| ConvTransposeParams {
            stride: 2,
            padding: 2,
            output_padding: ho[i],
        };
        let mut stats = Vec::new();
        let x = tape.input(self.standardized_input(zs)?);
        let h = tape.linear(x, v("lin.weight"), Some(v("lin.bias")))?;
        let h = tape.relu(h)?;
        let h = tape.reshape(h, &[n, c.base_channels(), hp[0], wp[0]])?;
        let h = tape.conv_transpose2d(h, v("up1.weight"), Some(v("up1.bias")), stage(0))?;
        let skip = tape.relu(h)?;
        let mut r = skip;
        for (i, pad) in [(1, 0), (2, 1), (3, 0)] {
            r = tape.conv2d(r, v(&format!("res.conv{i}.weight")), None, pad)?;
            let name = format!("res.bn{i}");
            let affine = (v(&format!("{name}.gamma")), v(&format!("{name}.beta")));
            r = self.norm(tape, r, affine, &name, mode, &mut stats)?;
            r = tape.relu(r)?;
        }
        let h = tape.add(r, skip)?;
        let h = tape.relu(h)?;
        let h = tape.conv_transpose2d(h, v("up2.weight"), Some(v("up2.bias")), stage(1))?;
        let h = self.norm(tape, h, (v("bn.gamma"), v("bn.beta")), "bn", mode, &mut stats)?;
        let h = tape.relu(h)?;
        let logits = tape.conv_transpose2d(h, v("up3.weight"), Some(v("up3.bias")), stage(2))?;
        debug_assert_eq!(tape.value(logits).shape(), [n, c.levels, hp[3], wp[3]]);
        Ok((logits, stats))
    }

    /// Summed log-likelihood of `targets` (`[N, 1, H, W]` levels) under the decoded distributions.
    pub fn log_likelihood_on_tape(&self, tape: &mut Tape<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let lsm = tape.log_softmax(logits, 1)?;
        let classes: Vec<usize> = targets.data().iter().map(|v| v.to_usize().unwrap()).collect();
        if let Some(bad) = classes.iter().find(|&&c| c >= self.config.levels) {
            return Err(Error::invalid("decoder", format!("target level {bad} >= {}", self.config.levels)));
        }
        tape.pick_sum(lsm, 1, &classes)
    }

    /// Per-pixel logits `[N, levels, H, W]` in evaluation mode.
    pub fn decode_batch(&self, zs: &[&[f32]]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = tape.params(&self.params);
        let (logits, _) = self.forward(&mut tape, &p, zs, Mode::Eval)?;
        Ok(tape.value(logits).clone())
    }

    pub fn decode(&self, z: &[f32]) -> Result<Tensor<T>> {
        self.decode_batch(&[z])
    }

    /// Mode images, `H * W` levels per embedding, decoded in chunks.
    pub fn decode_mode(&self, zs: &[&[f32]], chunk: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(zs.len() * self.config.height * self.config.width);
        for c in zs.chunks(chunk.max(1)) {
            out.extend(mode_levels(&self.decode_batch(c)?)?);
        }
        Ok(out)
    }

    /// Mean per-pixel negative log-likelihood (nats) of `images[ids]` given their embeddings.
    pub fn reconstruction_error(&self, embeddings: &[Embedding], images: &ImageSet) -> Result<f64> {
        if embeddings.is_empty() {
            return Err(Error::invalid("reconstruction_error", "no pairs"));
        }
        let mut total = 0.0;
        for chunk in embeddings.chunks(256) {
            let zs: Vec<&[f32]> = chunk.iter().map(|e| e.values.as_slice()).collect();
            let ids = image_indices(chunk, images)?;
            let targets = images.batch::<T>(&ids);
            let mut tape = Tape::new();
            let p = tape.params(&self.params);
            let (logits, _) = self.forward(&mut tape, &p, &zs, Mode::Eval)?;
            let ll = self.log_likelihood_on_tape(&mut tape, logits, &targets)?;
            total -= tape.value(ll).data()[0].to_f64().unwrap();
        }
        Ok(total / (embeddings.len() * images.pixels_per_image()) as f64)
    }

    fn update_running(&mut self, stats: &[(String, BatchStats<T>)], count: usize) {
        let mom = T::from_f64(NORM_MOMENTUM).unwrap();
        let unbias = if count > 1 {
            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        for (name, s) in stats {
            let m = self.buffers.get_mut(&format!("{name}.mean")).expect("declared");
            m.data_mut().iter_mut().zip(&s.mean).for_each(|(r, &b)| *r = (T::one() - mom) * *r + mom * b);
            let v = self.buffers.get_mut(&format!("{name}.var")).expect("declared");
            v.data_mut()
                .iter_mut()
                .zip(&s.var)
                .for_each(|(r, &b)| *r = (T::one() - mom) * *r + mom * b * unbias);
        }
    }
}

fn image_indices(embeddings: &[Embedding], images: &ImageSet) -> Result<Vec<usize>> {
    embeddings
        .iter()
        .map(|e| {
            let i = e.id as usize;
            if i >= images.len() {
                Err(Error::invalid("decoder", format!("embedding id {i} has no image (dataset has {})", images.len())))
            } else {
                Ok(i)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of pairs held out for validation; 0 disables it.
    pub validation_fraction: f64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        DecoderTrainConfig {
            batch_size: 128,
            epochs: 50,
            adam: AdamConfig::default(),
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecoderReport {
    /// Mean training loss per epoch, nats/pixel.
    pub epoch_train: Vec<f64>,
    /// Validation reconstruction error after each epoch, nats/pixel.
    pub epoch_validation: Vec<f64>,
    pub init_train: f64,
    pub train_ids: Vec<u64>,
    pub validation_ids: Vec<u64>,
}

/// Fits the decoder by Adam on per-pixel negative log-likelihood.
pub fn train_decoder<T: Real>(
    mut decoder: Decoder<T>,
    embeddings: &[Embedding],
    images: &ImageSet,
    cfg: &DecoderTrainConfig,
) -> Result<(Decoder<T>, DecoderReport)> {
    if embeddings.is_empty() {
        return Err(Error::invalid("train_decoder", "no training pairs"));
    }
    let c = decoder.config;
    if (images.height, images.width) != (c.height, c.width) || images.levels as usize != c.levels {
        return Err(Error::invalid("train_decoder", "image shape or levels do not match the decoder"));
    }
    image_indices(embeddings, images)?;
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, 0));
    let n_val = if cfg.validation_fraction > 0.0 && embeddings.len() >= 2 {
        ((embeddings.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, embeddings.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<Embedding> = train_idx.iter().map(|&i| embeddings[i].clone()).collect();
    let val: Vec<Embedding> = val_idx.iter().map(|&i| embeddings[i].clone()).collect();
    let zs: Vec<&[f32]> = train.iter().map(|e| e.values.as_slice()).collect();
    decoder.fit_input_scaling(&zs)?;

    let mut report = DecoderReport {
        train_ids: train.iter().map(|e| e.id).collect(),
        validation_ids: val.iter().map(|e| e.id).collect(),
        ..Default::default()
    };
    let pixels = images.pixels_per_image();
    let mut opt = Adam::new(cfg.adam, &decoder.params);
    let mut perm: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        perm.shuffle(&mut stream_rng(cfg.seed, 1 + epoch as u64));
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in perm.chunks(cfg.batch_size.max(2)) {
            // batch statistics are undefined for a single sample
            if chunk.len() < 2 {
                continue;
            }
            let zs: Vec<&[f32]> = chunk.iter().map(|&i| train[i].values.as_slice()).collect();
            let ids: Vec<usize> = chunk.iter().map(|&i| train[i].id as usize).collect();
            let targets = images.batch::<T>(&ids);
            let mut tape = Tape::new();
            let p = tape.params(&decoder.params);
            let diverged = |loss: f64| move |_| Error::Divergence {
                stage: "train-decoder",
                step,
                loss,
            };
            let (logits, stats) = decoder.forward(&mut tape, &p, &zs, Mode::Train).map_err(diverged(f64::NAN))?;
            let ll = decoder.log_likelihood_on_tape(&mut tape, logits, &targets)?;
            let loss = tape
                .scale(ll, -T::one() / T::from_usize(chunk.len() * pixels).unwrap())
                .map_err(diverged(f64::NAN))?;
            let lv = tape.value(loss).data()[0].to_f64().unwrap();
            let grads = tape.backward(loss).map_err(diverged(lv))?;
            opt.step(&mut decoder.params, &grads)?;
            decoder.update_running(&stats, chunk.len() * c.height * c.width);
            if epoch == 0 && batches == 0 {
                report.init_train = lv;
            }
            sum += lv;
            batches += 1;
            step += 1;
        }
        let train_loss = sum / batches.max(1) as f64;
        report.epoch_train.push(train_loss);
        if !val.is_empty() {
            let v = decoder.reconstruction_error(&val, images)?;
            report.epoch_validation.push(v);
            info!("decoder epoch {epoch}: train {train_loss:.4} val {v:.4} nats/pixel");
        } else {
            info!("decoder epoch {epoch}: train {train_loss:.4} nats/pixel");
        }
    }
    Ok((decoder, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_difference, max_relative_error};
    use crate::projection::EmbeddingSource;

    fn tiny(input_dim: usize, side: usize) -> DecoderConfig {
        DecoderConfig {
            input_dim,
            dense: 8,
            wide: 3,
            narrow: 2,
            height: side,
            width: side,
            levels: 2,
        }
    }

    #[test]
    fn size_plan_hits_target() {
        assert_eq!(DecoderConfig::plan(28), ([4, 7, 14, 28], [0, 1, 1]));
        assert_eq!(DecoderConfig::plan(14), ([2, 4, 7, 14], [1, 0, 1]));
        for t in 2..40 {
            let (s, o) = DecoderConfig::plan(t);
            let p = |i: usize| ConvTransposeParams { stride: 2, padding: 2, output_padding: o[i] };
            assert_eq!(p(0).output_extent(s[0], 5), Some(s[1]));
            assert_eq!(p(1).output_extent(s[1], 5), Some(s[2]));
            assert_eq!(p(2).output_extent(s[2], 5), Some(t));
        }
        assert_eq!(DecoderConfig::mnist(1024, 28, 28).base_channels(), 64);
        assert_eq!(DecoderConfig::mnist(1024, 14, 14).base_channels(), 256);
    }

    #[test]
    fn zero_decoder_gives_zero_logits_and_black_mode() {
        let d = Decoder::<f32>::zeroed(tiny(3, 6)).unwrap();
        let logits = d.decode(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(logits.shape(), [1, 2, 6, 6]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(mode_levels(&logits).unwrap().iter().all(|&v| v == 0));
        assert!(d.decode(&[0.5]).is_err());
    }

    #[test]
    fn output_shape_matches_target_for_odd_and_even_sizes() {
        for side in [5, 6, 7, 14, 28] {
            let cfg = DecoderConfig { dense: 16 * DecoderConfig::plan(side).0[0].pow(2), ..tiny(4, side) };
            let d = Decoder::<f32>::init(cfg, &mut stream_rng(1, 0)).unwrap();
            let z = [0.1f32, 0.2, 0.3, 0.4];
            let logits = d.decode(&z).unwrap();
            assert_eq!(logits.shape(), [1, 2, side, side]);
            assert_eq!(logits, d.decode(&z).unwrap(), "deterministic");
        }
    }

    #[test]
    fn gradients_match_finite_differences_in_train_mode() {
        let mut d = Decoder::<f64>::init(tiny(3, 6), &mut stream_rng(2, 0)).unwrap();
        let mut rng = stream_rng(2, 1);
        for (name, t) in d.params_mut().iter_mut() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
        }
        let zs: Vec<Vec<f32>> = (0..3).map(|i| (0..3).map(|j| ((i * 3 + j) as f32 * 0.37).sin()).collect()).collect();
        let zr: Vec<&[f32]> = zs.iter().map(|z| z.as_slice()).collect();
        let targets = Tensor::from_fn(&[3, 1, 6, 6], |i| ((i * 5) % 7 < 3) as u8 as f64);
        let loss = |dec: &Decoder<f64>, params: &ParamSet<f64>| -> Result<(Tape<f64>, Var)> {
            let mut tape = Tape::new();
            let p = tape.params(params);
            let (logits, _) = dec.forward(&mut tape, &p, &zr, Mode::Train)?;
            let ll = dec.log_likelihood_on_tape(&mut tape, logits, &targets)?;
            Ok((tape, ll))
        };
        let (mut tape, ll) = loss(&d, d.params()).unwrap();
        let analytic = tape.backward(ll).unwrap();
        let numeric = finite_difference(d.params(), 1e-5, |p| {
            let (t, v) = loss(&d, p)?;
            Ok(t.value(v).data()[0])
        })
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-4, "{err}");
    }

    fn toy_pairs(n: usize, side: usize) -> (Vec<Embedding>, ImageSet) {
        let d = side * side;
        let pixels: Vec<u8> = (0..n * d).map(|i| (((i / d) * 7 + (i % d) * 3) % 5 < 2) as u8).collect();
        let images = ImageSet::new(side, side, 2, pixels, None).unwrap();
        let emb = (0..n)
            .map(|i| Embedding {
                id: i as u64,
                source: EmbeddingSource::Fisher,
                values: (0..4).map(|j| ((i * 4 + j) as f32 * 1.3).sin() * 1000.0).collect(),
            })
            .collect();
        (emb, images)
    }

    #[test]
    fn initial_loss_is_log_two_for_uniform_head() {
        let (emb, images) = toy_pairs(6, 6);
        let d = Decoder::<f64>::zeroed(tiny(4, 6)).unwrap();
        let e = d.reconstruction_error(&emb, &images).unwrap();
        assert!((e - std::f64::consts::LN_2).abs() < 1e-6, "{e}");
    }

    #[test]
    fn memorizes_ten_images() {
        let (emb, images) = toy_pairs(10, 6);
        let cfg = DecoderConfig { dense: 32, wide: 16, narrow: 8, ..tiny(4, 6) };
        let d = Decoder::<f32>::init(cfg, &mut stream_rng(3, 0)).unwrap();
        let tc = DecoderTrainConfig {
            batch_size: 10,
            epochs: 300,
            adam: AdamConfig { lr: 5e-3, ..Default::default() },
            seed: 1,
            validation_fraction: 0.0,
        };
        let (d, rep) = train_decoder(d, &emb, &images, &tc).unwrap();
        assert!(rep.epoch_train.last().unwrap() < &rep.init_train);
        let zs: Vec<&[f32]> = emb.iter().map(|e| e.values.as_slice()).collect();
        let modes = d.decode_mode(&zs, 4).unwrap();
        let acc = modes.iter().zip(&images.pixels).filter(|(a, b)| a == b).count() as f64 / modes.len() as f64;
        assert!(acc > 0.99, "{acc}");
        assert!(d.reconstruction_error(&emb, &images).unwrap() < 0.1);
    }

    #[test]
    fn split_is_ninety_ten() {
        let (emb, images) = toy_pairs(20, 6);
        let d = Decoder::<f32>::init(tiny(4, 6), &mut stream_rng(4, 0)).unwrap();
        let tc = DecoderTrainConfig { epochs: 1, batch_size: 8, ..Default::default() };
        let (_, rep) = train_decoder(d, &emb, &images, &tc).unwrap();
        assert_eq!((rep.train_ids.len(), rep.validation_ids.len()), (18, 2));
        assert_eq!(rep.epoch_validation.len(), 1);
    }
}
