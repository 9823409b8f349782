//! Masked-convolution PixelCNN over single-channel discrete images.
//!
//! The stack is `n_layers` masked `kernel × kernel` convolutions with ReLU,
//! the first with a type-A mask and the rest type B, followed by a 1×1 head
//! producing per-pixel logits: one Bernoulli logit for binary images or `K`
//! categorical logits for `K`-level images. Every conditional at raster
//! position `i` depends only on pixels strictly before `i`.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{sigmoid, softplus, Tape, Var};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::rng::stream_rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Center tap excluded: used on the raw-image layer.
    A,
    /// Center tap included: used on feature layers.
    B,
}

/// Spatial mask of one masked convolution. Images are single-channel, so the
/// mask is shared by every (output, input) channel pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub kernel: usize,
}

pub(crate) fn mask_taps(spec: MaskSpec) -> Result<Vec<bool>> {
    let k = spec.kernel;
    if k.is_multiple_of(2) {
        return Err(Error::invalid("build_mask", format!("kernel size {k} is even")));
    }
    let c = k / 2;
    Ok((0..k * k)
        .map(|t| {
            let (i, j) = (t / k, t % k);
            i < c || (i == c && (j < c || (j == c && spec.kind == MaskKind::B)))
        })
        .collect())
}

/// `kernel × kernel` binary mask in raster order.
pub fn build_mask<T: Real>(spec: MaskSpec) -> Result<Tensor<T>> {
    let taps = mask_taps(spec)?;
    Tensor::new(
        vec![spec.kernel, spec.kernel],
        taps.into_iter().map(|m| if m { T::one() } else { T::zero() }).collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputDist {
    Bernoulli,
    Categorical { levels: usize },
}

impl OutputDist {
    pub fn levels(self) -> usize {
        match self {
            OutputDist::Bernoulli => 2,
            OutputDist::Categorical { levels } => levels,
        }
    }

    fn head_channels(self) -> usize {
        match self {
            OutputDist::Bernoulli => 1,
            OutputDist::Categorical { levels } => levels,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelModelConfig {
    pub n_layers: usize,
    pub kernel: usize,
    pub padding: usize,
    pub filters: usize,
    pub height: usize,
    pub width: usize,
    pub output: OutputDist,
}

impl Default for PixelModelConfig {
    fn default() -> Self {
        PixelModelConfig {
            n_layers: 5,
            kernel: 7,
            padding: 3,
            filters: 64,
            height: 28,
            width: 28,
            output: OutputDist::Bernoulli,
        }
    }
}

impl PixelModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("pixel_model_config", msg));
        if self.n_layers == 0 || self.filters == 0 || self.height == 0 || self.width == 0 {
            return bad("layers, filters and image extents must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        if self.padding * 2 + 1 != self.kernel {
            return bad(format!(
                "padding {} does not preserve spatial size for kernel {}",
                self.padding, self.kernel
            ));
        }
        if self.output.levels() < 2 || self.output.levels() > 256 {
            return bad(format!("{} output levels outside 2..=256", self.output.levels()));
        }
        Ok(())
    }

    /// Default layer for activation embeddings: the second-to-last masked layer.
    pub fn default_activation_layer(&self) -> usize {
        self.n_layers.saturating_sub(2)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelModel<T: Real> {
    config: PixelModelConfig,
    params: ParamSet<T>,
}

/// Graph handles produced by [`PixelModel::forward`].
pub struct Forward {
    /// `[N, head_channels, H, W]` conditional logits.
    pub logits: Var,
    /// Post-ReLU output of each masked layer.
    pub activations: Vec<Var>,
}

impl<T: Real> PixelModel<T> {
    fn layer_shapes(config: &PixelModelConfig) -> Vec<(String, Vec<usize>)> {
        let (f, k) = (config.filters, config.kernel);
        let mut shapes = Vec::new();
        for l in 0..config.n_layers {
            let cin = if l == 0 { 1 } else { f };
            shapes.push((format!("layer{l}.weight"), vec![f, cin, k, k]));
            shapes.push((format!("layer{l}.bias"), vec![f]));
        }
        let out = config.output.head_channels();
        shapes.push(("head.weight".into(), vec![out, f, 1, 1]));
        shapes.push(("head.bias".into(), vec![out]));
        shapes
    }

    /// All parameters zero: every conditional is uniform.
    pub fn zeroed(config: PixelModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in Self::layer_shapes(&config) {
            params.push(name, Tensor::zeros(&shape))?;
        }
        Ok(PixelModel { config, params })
    }

    /// Uniform fan-in initialization over unmasked taps; biases zero, masked taps zero.
    pub fn init(config: PixelModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut model = Self::zeroed(config)?;
        let k = config.kernel;
        for l in 0..=config.n_layers {
            let (name, taps, gain) = if l < config.n_layers {
                let kind = if l == 0 { MaskKind::A } else { MaskKind::B };
                (format!("layer{l}.weight"), mask_taps(MaskSpec { kind, kernel: k })?, 6.0)
            } else {
                ("head.weight".to_string(), vec![true], 3.0)
            };
            let w = model.params.get_mut(&name).expect("declared");
            let [_, cin, kh, kw] = w.dims4("init")?;
            let active = taps.iter().filter(|&&m| m).count();
            let fan_in = (cin * active).max(1) as f64;
            let bound = (gain / fan_in).sqrt();
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                if taps[i % (kh * kw)] {
                    *v = T::from_f64(rng.random_range(-bound..bound)).unwrap();
                }
            }
        }
        Ok(model)
    }

    pub fn from_params(config: PixelModelConfig, params: ParamSet<T>) -> Result<Self> {
        let expect = Self::zeroed(config)?;
        if !expect.params.same_layout(&params) {
            return Err(Error::invalid(
                "pixel_model",
                "parameter names or shapes do not match the configuration",
            ));
        }
        Ok(PixelModel { config, params })
    }

    pub fn config(&self) -> &PixelModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.n_params()
    }

    pub fn cast<U: Real>(&self) -> PixelModel<U> {
        PixelModel {
            config: self.config,
            params: self.params.cast(),
        }
    }

    /// Accepts `[H, W]`, `[1, H, W]` or `[N, 1, H, W]` level tensors.
    fn as_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (self.config.height, self.config.width);
        let batch = match images.shape() {
            [a, b] if (*a, *b) == (h, w) => images.clone().reshape(&[1, 1, h, w])?,
            [1, a, b] if (*a, *b) == (h, w) => images.clone().reshape(&[1, 1, h, w])?,
            [_, 1, a, b] if (*a, *b) == (h, w) => images.clone(),
            s => {
                return Err(Error::shape(
                    "pixel_model",
                    "image shape",
                    format!("[N, 1, {h}, {w}]"),
                    format!("{s:?}"),
                ))
            }
        };
        let levels = self.config.output.levels();
        let top = T::from_usize(levels - 1).unwrap();
        if let Some(bad) = batch
            .data()
            .iter()
            .find(|&&v| v < T::zero() || v > top || v.fract() != T::zero())
        {
            return Err(Error::invalid(
                "pixel_model",
                format!("pixel value {bad:?} is not a level in 0..{levels}"),
            ));
        }
        Ok(batch)
    }

    /// Records the network on `tape`. `p` are this model's parameters as
    /// registered by [`Tape::params`], `levels` a validated `[N, 1, H, W]` batch.
    pub fn forward(&self, tape: &mut Tape<T>, p: &[Var], levels: &Tensor<T>) -> Result<Forward> {
        let cfg = &self.config;
        let scale = T::one() / T::from_usize(cfg.output.levels() - 1).unwrap();
        let mut h = tape.input(levels.map(|v| v * scale));
        let mut activations = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let kind = if l == 0 { MaskKind::A } else { MaskKind::B };
            let taps = mask_taps(MaskSpec { kind, kernel: cfg.kernel })?;
            h = tape.conv2d_masked(h, p[2 * l], Some(p[2 * l + 1]), cfg.padding, &taps)?;
            h = tape.relu(h)?;
            activations.push(h);
        }
        let n = 2 * cfg.n_layers;
        let logits = tape.conv2d(h, p[n], Some(p[n + 1]), 0)?;
        Ok(Forward { logits, activations })
    }

    /// Records the summed log-likelihood of a batch; returns `(forward, log_prob)`.
    pub fn log_prob_on_tape(&self, tape: &mut Tape<T>, p: &[Var], levels: &Tensor<T>) -> Result<(Forward, Var)> {
        let fwd = self.forward(tape, p, levels)?;
        let lp = match self.config.output {
            OutputDist::Bernoulli => tape.bernoulli_logprob(fwd.logits, levels)?,
            OutputDist::Categorical { .. } => {
                let lsm = tape.log_softmax(fwd.logits, 1)?;
                let classes: Vec<usize> = levels.data().iter().map(|v| v.to_usize().unwrap()).collect();
                tape.pick_sum(lsm, 1, &classes)?
            }
        };
        Ok((fwd, lp))
    }

    /// Per-pixel conditional logits `[N, head_channels, H, W]`.
    pub fn conditional_logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let batch = self.as_batch(images)?;
        let mut tape = Tape::new();
        let p = tape.params(&self.params);
        let fwd = self.forward(&mut tape, &p, &batch)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Exact `log p(x)` in nats for each image of the batch.
    pub fn log_prob_batch(&self, images: &Tensor<T>) -> Result<Vec<T>> {
        let batch = self.as_batch(images)?;
        let logits = self.conditional_logits(&batch)?;
        let (n, d) = (batch.shape()[0], self.config.pixels());
        let x = batch.data();
        let l = logits.data();
        Ok((0..n)
            .map(|s| match self.config.output {
                OutputDist::Bernoulli => (0..d)
                    .map(|i| {
                        let z = l[s * d + i];
                        if x[s * d + i] == T::one() {
                            -softplus(-z)
                        } else {
                            -softplus(z)
                        }
                    })
                    .sum(),
                OutputDist::Categorical { levels } => (0..d)
                    .map(|i| {
                        let at = |k: usize| l[(s * levels + k) * d + i];
                        let m = (0..levels).map(at).fold(T::neg_infinity(), T::max);
                        let lse = m + (0..levels).map(|k| (at(k) - m).exp()).sum::<T>().ln();
                        at(x[s * d + i].to_usize().unwrap()) - lse
                    })
                    .sum(),
            })
            .collect())
    }

    pub fn log_prob(&self, image: &Tensor<T>) -> Result<T> {
        let lp = self.log_prob_batch(image)?;
        if lp.len() != 1 {
            return Err(Error::shape("log_prob", "batch size", 1, lp.len()));
        }
        Ok(lp[0])
    }

    /// Post-ReLU feature map of masked layer `layer`, flattened to `filters * H * W` per image.
    pub fn activations_batch(&self, images: &Tensor<T>, layer: usize) -> Result<Vec<Vec<T>>> {
        if layer >= self.config.n_layers {
            return Err(Error::invalid(
                "activations",
                format!("layer index {layer} out of range 0..{}", self.config.n_layers),
            ));
        }
        let batch = self.as_batch(images)?;
        let mut tape = Tape::new();
        let p = tape.params(&self.params);
        let fwd = self.forward(&mut tape, &p, &batch)?;
        let act = tape.value(fwd.activations[layer]);
        let per = act.len() / batch.shape()[0];
        Ok(act.data().chunks(per).map(|c| c.to_vec()).collect())
    }

    pub fn activations(&self, image: &Tensor<T>, layer: usize) -> Result<Vec<T>> {
        let mut a = self.activations_batch(image, layer)?;
        if a.len() != 1 {
            return Err(Error::shape("activations", "batch size", 1, a.len()));
        }
        Ok(a.remove(0))
    }

    /// Raster-order ancestral sampling of `n` images, one forward pass per pixel.
    pub fn sample_batch(&self, n: usize, rng: &mut impl Rng) -> Result<Tensor<T>> {
        let (h, w) = (self.config.height, self.config.width);
        let d = h * w;
        let mut x = Tensor::zeros(&[n, 1, h, w]);
        for i in 0..d {
            let logits = self.conditional_logits(&x)?;
            for s in 0..n {
                let v = match self.config.output {
                    OutputDist::Bernoulli => {
                        let prob = sigmoid(logits.data()[s * d + i]).to_f64().unwrap();
                        if rng.random::<f64>() < prob {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }
                    OutputDist::Categorical { levels } => {
                        let at = |k: usize| logits.data()[(s * levels + k) * d + i].to_f64().unwrap();
                        let m = (0..levels).map(at).fold(f64::NEG_INFINITY, f64::max);
                        let weights: Vec<f64> = (0..levels).map(|k| (at(k) - m).exp()).collect();
                        let mut u = rng.random::<f64>() * weights.iter().sum::<f64>();
                        let mut pick = levels - 1;
                        for (k, wk) in weights.iter().enumerate() {
                            if u < *wk {
                                pick = k;
                                break;
                            }
                            u -= wk;
                        }
                        T::from_usize(pick).unwrap()
                    }
                };
                x.data_mut()[s * d + i] = v;
            }
        }
        Ok(x)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Tensor<T>> {
        self.sample_batch(1, rng)?.reshape(&[self.config.height, self.config.width])
    }

    /// Mean NLL in nats per image over the given images.
    pub fn mean_nll(&self, data: &ImageSet, indices: &[usize], chunk: usize) -> Result<f64> {
        let mut total = 0.0;
        for c in indices.chunks(chunk.max(1)) {
            total -= self
                .log_prob_batch(&data.batch(c))?
                .iter()
                .map(|v| v.to_f64().unwrap())
                .sum::<f64>();
        }
        Ok(total / indices.len().max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub shuffle_seed: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Images used for the before/after NLL comparison.
    pub monitor_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            epochs: 50,
            adam: AdamConfig::default(),
            shuffle_seed: 0,
            max_steps: None,
            monitor_size: 512,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training NLL (nats/image) of each epoch, averaged over its minibatches.
    pub epoch_nll: Vec<f64>,
    /// Loss of every optimizer step (nats/image).
    pub step_nll: Vec<f64>,
    pub init_nll: f64,
    pub final_nll: f64,
    pub steps: usize,
}

/// Adam on mean per-image NLL. Aborts with [`Error::Divergence`] on a non-finite loss.
pub fn train_pixel_model<T: Real>(
    mut model: PixelModel<T>,
    data: &ImageSet,
    cfg: &TrainConfig,
) -> Result<(PixelModel<T>, TrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("train_pixel_model", "empty dataset"));
    }
    let mc = model.config;
    if (data.height, data.width) != (mc.height, mc.width) || data.levels as usize != mc.output.levels() {
        return Err(Error::invalid(
            "train_pixel_model",
            format!(
                "dataset {}x{} with {} levels does not match model {}x{} with {} levels",
                data.height,
                data.width,
                data.levels,
                mc.height,
                mc.width,
                mc.output.levels()
            ),
        ));
    }
    let monitor: Vec<usize> = (0..data.len().min(cfg.monitor_size.max(1))).collect();
    let mut report = TrainReport {
        init_nll: model.mean_nll(data, &monitor, 64)?,
        ..Default::default()
    };
    info!("pixel model: {} params, init nll {:.3} nats/image", model.n_params(), report.init_nll);
    let mut opt = Adam::new(cfg.adam, &model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream_rng(cfg.shuffle_seed, epoch as u64));
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                if batches > 0 {
                    report.epoch_nll.push(sum / batches as f64);
                }
                break 'epochs;
            }
            let batch = data.batch::<T>(chunk);
            let mut tape = Tape::new();
            let p = tape.params(&model.params);
            let diverged = |_| Error::Divergence {
                stage: "train-ar",
                step: report.steps,
                loss: f64::NAN,
            };
            let (_, lp) = model.log_prob_on_tape(&mut tape, &p, &batch).map_err(diverged)?;
            let loss = tape
                .scale(lp, -T::one() / T::from_usize(chunk.len()).unwrap())
                .map_err(diverged)?;
            let loss_value = tape.value(loss).data()[0].to_f64().unwrap();
            let grads = tape.backward(loss).map_err(|_| Error::Divergence {
                stage: "train-ar",
                step: report.steps,
                loss: loss_value,
            })?;
            opt.step(&mut model.params, &grads)?;
            report.steps += 1;
            report.step_nll.push(loss_value);
            sum += loss_value;
            batches += 1;
        }
        let mean = sum / batches.max(1) as f64;
        info!("pixel model epoch {epoch}: train nll {mean:.3} nats/image");
        report.epoch_nll.push(mean);
    }
    report.final_nll = model.mean_nll(data, &monitor, 64)?;
    if report.final_nll >= report.init_nll {
        warn!(
            "pixel model did not improve: nll {:.3} -> {:.3}",
            report.init_nll, report.final_nll
        );
    }
    Ok((model, report))
}
