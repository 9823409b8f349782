//! Experiment configuration and the per-stage hashes that tie artifacts to it.
//!
//! Every stage hash covers the stage's own settings, its seeds and the hash
//! of the stage it consumes, so editing one section only invalidates the
//! stages downstream of it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, DecoderTrainConfig};
use crate::error::{Error, Result};
use crate::formats::{sha256, Hash};
use crate::interp::DEFAULT_ALPHAS;
use crate::optim::AdamConfig;
use crate::pixel_model::{OutputDist, PixelModelConfig, TrainConfig};
use crate::projection::EmbeddingSource;
use crate::rng::Seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub images: PathBuf,
    pub labels: Option<PathBuf>,
    /// Leading images kept, 0 for all.
    pub limit: usize,
    /// Halve both image sides by 2×2 averaging before binarizing.
    pub downsample: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            images: PathBuf::from("data/mnist10k/images-idx3-ubyte.gz"),
            labels: Some(PathBuf::from("data/mnist10k/labels-idx1-ubyte.gz")),
            limit: 0,
            downsample: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub kernel: usize,
    pub filters: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Stop after this many optimizer steps, 0 for no limit.
    pub max_steps: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            layers: 5,
            kernel: 7,
            filters: 64,
            batch_size: 128,
            epochs: 50,
            lr: 1e-3,
            max_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    /// Layer read by the activation source; defaults to the second-to-last.
    pub layer: Option<usize>,
    /// Nonzero fraction of projection entries; defaults to `1/√n_in`.
    pub density: Option<f64>,
    pub proj_dim: usize,
    /// Scale entries so that squared norms are preserved in expectation.
    pub normalized: bool,
    /// PCA output dimension after projection, 0 to skip.
    pub pca_dim: usize,
    pub batch_size: usize,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            layer: None,
            density: Some(1.0),
            proj_dim: 1024,
            normalized: false,
            pca_dim: 0,
            batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSection {
    pub dense: usize,
    pub wide: usize,
    pub narrow: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub validation_fraction: f64,
}

impl Default for DecoderSection {
    fn default() -> Self {
        DecoderSection {
            dense: 1024,
            wide: 128,
            narrow: 32,
            batch_size: 128,
            epochs: 50,
            lr: 1e-3,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub alphas: Vec<f64>,
    /// Decoded images per mixing coefficient.
    pub n: usize,
    /// `classifier`, `pca` or `raw`.
    pub extractor: String,
    pub classifier_epochs: usize,
    pub pca_features: usize,
    /// Interpolation pairs drawn for the PNG grid.
    pub grid_pairs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            alphas: DEFAULT_ALPHAS.to_vec(),
            n: 5000,
            extractor: "classifier".into(),
            classifier_epochs: 8,
            pca_features: 32,
            grid_pairs: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulateSection {
    /// Digit class treated as the attribute.
    pub digit: u8,
    pub scales: Vec<f64>,
    pub rows: usize,
}

impl Default for ManipulateSection {
    fn default() -> Self {
        ManipulateSection {
            digit: 1,
            scales: vec![-3.0, 0.0, 3.0],
            rows: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct SeedSection {
    pub master: u64,
    pub binarize: Option<u64>,
    pub projection: Option<u64>,
    pub init: Option<u64>,
    pub shuffle: Option<u64>,
    pub eval: Option<u64>,
}


#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Directory receiving every artifact.
    pub output: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub embedding: EmbeddingSection,
    pub decoder: DecoderSection,
    pub eval: EvalSection,
    pub manipulate: ManipulateSection,
    pub seeds: SeedSection,
}

/// Pipeline stages, each producing artifacts stamped with its hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Data,
    Model,
    Embedding(EmbeddingSource),
    Pca(EmbeddingSource),
    Decoder(EmbeddingSource),
    Classifier,
    Eval,
}

fn canonical<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config sections serialize")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.output.as_os_str().is_empty() {
            cfg.output = PathBuf::from("runs/default");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        canonical(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model.layers < 2 || self.model.kernel.is_multiple_of(2) {
            return bad(format!("model needs at least 2 layers and an odd kernel, got {:?}", self.model));
        }
        if let Some(l) = self.embedding.layer {
            if l >= self.model.layers {
                return bad(format!("embedding.layer {l} must be below model.layers {}", self.model.layers));
            }
        }
        if let Some(d) = self.embedding.density {
            if !(d > 0.0 && d <= 1.0) {
                return bad(format!("embedding.density {d} outside (0, 1]"));
            }
        }
        if self.embedding.proj_dim == 0 {
            return bad("embedding.proj_dim must be positive".into());
        }
        if self.embedding.pca_dim > self.embedding.proj_dim {
            return bad("embedding.pca_dim exceeds embedding.proj_dim".into());
        }
        if let Some(a) = self.eval.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("eval.alphas contains {a}, outside [0, 1]"));
        }
        if self.eval.n == 0 {
            return bad("eval.n must be positive".into());
        }
        if !["classifier", "pca", "raw"].contains(&self.eval.extractor.as_str()) {
            return bad(format!("eval.extractor {:?} is not classifier, pca or raw", self.eval.extractor));
        }
        if !(0.0..1.0).contains(&self.decoder.validation_fraction) {
            return bad("decoder.validation_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Master seed fan-out with per-stream overrides applied.
    pub fn seeds(&self) -> Seeds {
        let mut s = Seeds::from_master(self.seeds.master);
        let overrides = [
            ("binarize", self.seeds.binarize),
            ("projection", self.seeds.projection),
            ("init", self.seeds.init),
            ("shuffle", self.seeds.shuffle),
            ("eval", self.seeds.eval),
        ];
        for (name, v) in overrides {
            if let Some(v) = v {
                s.set(name, v);
            }
        }
        s
    }

    /// Image side after optional downsampling.
    pub fn image_side(&self, native: usize) -> usize {
        if self.data.downsample {
            native / 2
        } else {
            native
        }
    }

    pub fn pixel_model_config(&self, height: usize, width: usize) -> PixelModelConfig {
        PixelModelConfig {
            n_layers: self.model.layers,
            kernel: self.model.kernel,
            padding: self.model.kernel / 2,
            filters: self.model.filters,
            height,
            width,
            output: OutputDist::Bernoulli,
        }
    }

    pub fn pixel_train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.model.batch_size,
            epochs: self.model.epochs,
            adam: AdamConfig {
                lr: self.model.lr,
                ..Default::default()
            },
            shuffle_seed: self.seeds().shuffle,
            max_steps: (self.model.max_steps > 0).then_some(self.model.max_steps),
            ..Default::default()
        }
    }

    pub fn activation_layer(&self) -> usize {
        self.embedding.layer.unwrap_or(self.model.layers - 2)
    }

    /// Dimension the decoder consumes.
    pub fn embedding_dim(&self) -> usize {
        if self.embedding.pca_dim > 0 {
            self.embedding.pca_dim
        } else {
            self.embedding.proj_dim
        }
    }

    pub fn decoder_config(&self, height: usize, width: usize) -> DecoderConfig {
        DecoderConfig {
            input_dim: self.embedding_dim(),
            dense: self.decoder.dense,
            wide: self.decoder.wide,
            narrow: self.decoder.narrow,
            height,
            width,
            levels: 2,
        }
    }

    pub fn decoder_train_config(&self) -> DecoderTrainConfig {
        DecoderTrainConfig {
            batch_size: self.decoder.batch_size,
            epochs: self.decoder.epochs,
            adam: AdamConfig {
                lr: self.decoder.lr,
                ..Default::default()
            },
            seed: self.seeds().shuffle,
            validation_fraction: self.decoder.validation_fraction,
        }
    }

    /// Hash identifying the artifacts of `stage` under this configuration.
    pub fn stage_hash(&self, stage: Stage) -> Hash {
        let seeds = self.seeds();
        let mut text = match stage {
            Stage::Data => format!("data\n{}binarize={}\n", canonical(&self.data), seeds.binarize),
            Stage::Model => format!(
                "model\n{}\n{}init={} shuffle={}\n",
                hex_of(self.stage_hash(Stage::Data)),
                canonical(&self.model),
                seeds.init,
                seeds.shuffle
            ),
            Stage::Embedding(source) => {
                let mut e = self.embedding.clone();
                e.pca_dim = 0;
                e.batch_size = 0;
                if source == EmbeddingSource::Fisher {
                    e.layer = None;
                } else {
                    e.layer = Some(self.activation_layer());
                }
                format!(
                    "embedding {source}\n{}\n{}projection={}\n",
                    hex_of(self.stage_hash(Stage::Model)),
                    canonical(&e),
                    seeds.projection
                )
            }
            Stage::Pca(source) => format!(
                "pca {source}\n{}\npca_dim={}\n",
                hex_of(self.stage_hash(Stage::Embedding(source))),
                self.embedding.pca_dim
            ),
            Stage::Decoder(source) => format!(
                "decoder {source}\n{}\n{}init={} shuffle={}\n",
                hex_of(self.stage_hash(Stage::Pca(source))),
                canonical(&self.decoder),
                seeds.init,
                seeds.shuffle
            ),
            Stage::Classifier => format!(
                "classifier\n{}\nepochs={} shuffle={}\n",
                hex_of(self.stage_hash(Stage::Data)),
                self.eval.classifier_epochs,
                seeds.shuffle
            ),
            Stage::Eval => {
                let mut eval = self.eval.clone();
                eval.grid_pairs = 0;
                format!(
                    "eval\n{}\n{}\n{}{}eval={}\n",
                    hex_of(self.stage_hash(Stage::Decoder(EmbeddingSource::Fisher))),
                    hex_of(self.stage_hash(Stage::Decoder(EmbeddingSource::Activation))),
                    hex_of(self.stage_hash(Stage::Classifier)),
                    canonical(&eval),
                    seeds.eval
                )
            }
        };
        text.push_str("v1");
        sha256(text.as_bytes())
    }
}

fn hex_of(h: Hash) -> String {
    crate::formats::hex(&h)
}
