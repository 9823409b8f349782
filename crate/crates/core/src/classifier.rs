//! Small convolutional classifier used as a feature backbone and as an attribute oracle.
//!
//! `conv5(c1) ─ ReLU ─ conv5(c2) ─ ReLU ─ Linear(hidden) ─ ReLU ─ Linear(classes)`;
//! the `hidden` activations are the feature vector.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::rng::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub height: usize,
    pub width: usize,
    /// Pixel levels of the input; inputs are scaled to `[0, 1]`.
    pub levels: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ClassifierConfig {
    pub fn new(height: usize, width: usize, levels: usize, classes: usize) -> Self {
        ClassifierConfig {
            height,
            width,
            levels,
            conv1: 8,
            conv2: 16,
            hidden: 64,
            classes,
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.height, self.width, self.conv1, self.conv2, self.hidden].contains(&0) || self.levels < 2 || self.classes < 2 {
            return Err(Error::invalid("classifier_config", format!("degenerate configuration {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    params: ParamSet<f32>,
}

impl Classifier {
    pub fn init(config: ClassifierConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let flat = c.conv2 * c.height * c.width;
        let mut params = ParamSet::new();
        let mut push = |name: &str, shape: &[usize], fan_in: usize| -> Result<()> {
            let bound = if fan_in == 0 { 0.0 } else { (6.0 / fan_in as f64).sqrt() };
            let t = Tensor::from_fn(shape, |_| if bound > 0.0 { rng.random_range(-bound..bound) as f32 } else { 0.0 });
            params.push(name, t)
        };
        push("conv1.weight", &[c.conv1, 1, 5, 5], 25)?;
        push("conv1.bias", &[c.conv1], 0)?;
        push("conv2.weight", &[c.conv2, c.conv1, 5, 5], 25 * c.conv1)?;
        push("conv2.bias", &[c.conv2], 0)?;
        push("fc1.weight", &[c.hidden, flat], flat)?;
        push("fc1.bias", &[c.hidden], 0)?;
        push("fc2.weight", &[c.classes, c.hidden], c.hidden / 2)?;
        push("fc2.bias", &[c.classes], 0)?;
        Ok(Classifier { config, params })
    }

    pub fn from_params(config: ClassifierConfig, params: ParamSet<f32>) -> Result<Self> {
        let fresh = Self::init(config, &mut stream_rng(0, 0))?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::invalid("classifier", "parameter names or shapes do not match the configuration"));
        }
        Ok(Classifier { config, params })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.config.hidden
    }

    fn input(&self, images: &[&[u8]]) -> Result<Tensor<f32>> {
        let c = &self.config;
        let d = c.height * c.width;
        let scale = 1.0 / (c.levels - 1) as f32;
        let mut data = Vec::with_capacity(images.len() * d);
        for img in images {
            if img.len() != d {
                return Err(Error::shape("classifier", "image length", d, img.len()));
            }
            data.extend(img.iter().map(|&v| v as f32 * scale));
        }
        Tensor::new(vec![images.len(), 1, c.height, c.width], data)
    }

    /// Records the network; returns `(features, logits)`.
    fn forward(&self, tape: &mut Tape<f32>, p: &[Var], images: &[&[u8]]) -> Result<(Var, Var)> {
        let v = |name: &str| p[self.params.index_of(name).expect("declared")];
        let n = images.len();
        let x = tape.input(self.input(images)?);
        let h = tape.conv2d(x, v("conv1.weight"), Some(v("conv1.bias")), 2)?;
        let h = tape.relu(h)?;
        let h = tape.conv2d(h, v("conv2.weight"), Some(v("conv2.bias")), 2)?;
        let h = tape.relu(h)?;
        let h = tape.reshape(h, &[n, self.config.conv2 * self.config.height * self.config.width])?;
        let h = tape.linear(h, v("fc1.weight"), Some(v("fc1.bias")))?;
        let feats = tape.relu(h)?;
        let logits = tape.linear(feats, v("fc2.weight"), Some(v("fc2.bias")))?;
        Ok((feats, logits))
    }

    /// Penultimate activations, one `hidden`-length row per image.
    pub fn features(&self, images: &[&[u8]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let mut tape = Tape::new();
            let p = tape.params(&self.params);
            let (f, _) = self.forward(&mut tape, &p, chunk)?;
            out.extend(tape.value(f).data().chunks(self.config.hidden).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        Ok(out)
    }

    /// Class logits, one `classes`-length row per image.
    pub fn logits(&self, images: &[&[u8]]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let mut tape = Tape::new();
            let p = tape.params(&self.params);
            let (_, l) = self.forward(&mut tape, &p, chunk)?;
            out.extend(tape.value(l).data().chunks(self.config.classes).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    /// Arg-max class per image; ties resolve to the lower class.
    pub fn predict(&self, images: &[&[u8]]) -> Result<Vec<usize>> {
        Ok(self
            .logits(images)?
            .iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, images: &[&[u8]], labels: &[usize]) -> Result<f64> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::shape("accuracy", "labels", images.len(), labels.len()));
        }
        let pred = self.predict(images)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of examples held out to measure test accuracy.
    pub test_fraction: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            batch_size: 64,
            epochs: 8,
            adam: AdamConfig::default(),
            seed: 0,
            test_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierReport {
    pub epoch_loss: Vec<f64>,
    pub test_accuracy: f64,
    pub n_test: usize,
}

/// Fits by Adam on cross-entropy and reports held-out accuracy (training accuracy if nothing is held out).
pub fn train_classifier(
    config: ClassifierConfig,
    images: &[&[u8]],
    labels: &[usize],
    cfg: &ClassifierTrainConfig,
) -> Result<(Classifier, ClassifierReport)> {
    if images.len() != labels.len() || images.len() < 2 {
        return Err(Error::invalid("train_classifier", "need at least two labeled images"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= config.classes) {
        return Err(Error::invalid("train_classifier", format!("label {bad} >= {} classes", config.classes)));
    }
    let mut model = Classifier::init(config, &mut stream_rng(cfg.seed, 0))?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut stream_rng(cfg.seed, 1));
    let n_test = ((images.len() as f64 * cfg.test_fraction).round() as usize).min(images.len() - 1);
    let (test, train) = order.split_at(n_test);
    let mut train = train.to_vec();
    let mut opt = Adam::new(cfg.adam, &model.params);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        train.shuffle(&mut stream_rng(cfg.seed, 2 + epoch as u64));
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in train.chunks(cfg.batch_size.max(1)) {
            let imgs: Vec<&[u8]> = chunk.iter().map(|&i| images[i]).collect();
            let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let p = tape.params(&model.params);
            let (_, logits) = model.forward(&mut tape, &p, &imgs)?;
            let lsm = tape.log_softmax(logits, 1)?;
            let ll = tape.pick_sum(lsm, 1, &ys)?;
            let loss = tape.scale(ll, -1.0 / chunk.len() as f32)?;
            let lv = tape.value(loss).data()[0] as f64;
            let grads = tape.backward(loss).map_err(|_| Error::Divergence {
                stage: "train-classifier",
                step,
                loss: lv,
            })?;
            opt.step(&mut model.params, &grads)?;
            sum += lv;
            batches += 1;
            step += 1;
        }
        epoch_loss.push(sum / batches.max(1) as f64);
        info!("classifier epoch {epoch}: loss {:.4}", epoch_loss[epoch]);
    }
    let eval: &[usize] = if test.is_empty() { &train } else { test };
    let imgs: Vec<&[u8]> = eval.iter().map(|&i| images[i]).collect();
    let ys: Vec<usize> = eval.iter().map(|&i| labels[i]).collect();
    let test_accuracy = model.accuracy(&imgs, &ys)?;
    info!("classifier accuracy {test_accuracy:.4} on {} held-out images", test.len());
    Ok((
        model,
        ClassifierReport {
            epoch_loss,
            test_accuracy,
            n_test: test.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two classes: a bright left half or a bright right half, with pixel noise.
    fn halves(n: usize, side: usize) -> (Vec<Vec<u8>>, Vec<usize>) {
        let mut rng = stream_rng(11, 0);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let img = (0..side * side)
                    .map(|p| {
                        let left = p % side < side / 2;
                        let on = left == (label == 0);
                        (rng.random::<f64>() < if on { 0.8 } else { 0.2 }) as u8
                    })
                    .collect();
                (img, label)
            })
            .unzip()
    }

    #[test]
    fn learns_a_separable_task_and_features_are_deterministic() {
        let (imgs, labels) = halves(200, 6);
        let refs: Vec<&[u8]> = imgs.iter().map(|v| v.as_slice()).collect();
        let cfg = ClassifierConfig {
            conv1: 2,
            conv2: 2,
            hidden: 8,
            ..ClassifierConfig::new(6, 6, 2, 2)
        };
        let tc = ClassifierTrainConfig { epochs: 10, batch_size: 20, ..Default::default() };
        let (m, rep) = train_classifier(cfg, &refs, &labels, &tc).unwrap();
        assert!(rep.test_accuracy >= 0.95, "{rep:?}");
        assert_eq!(rep.n_test, 20);
        let f = m.features(&refs[..3]).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].len(), 8);
        assert_eq!(f, m.features(&refs[..3]).unwrap());
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        let (imgs, mut labels) = halves(4, 6);
        let refs: Vec<&[u8]> = imgs.iter().map(|v| v.as_slice()).collect();
        labels[0] = 5;
        let cfg = ClassifierConfig::new(6, 6, 2, 2);
        assert!(train_classifier(cfg, &refs, &labels, &Default::default()).is_err());
        let m = Classifier::init(cfg, &mut stream_rng(0, 0)).unwrap();
        assert!(m.features(&[&[0u8; 5][..]]).is_err());
    }
}
