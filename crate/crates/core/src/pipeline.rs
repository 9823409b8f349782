//! Stage-by-stage experiment workflow over an artifact directory.
//!
//! | stage              | writes                                             |
//! |--------------------|----------------------------------------------------|
//! | `train_ar`         | `dataset.fseb`, `model.fseb`, `samples.png`        |
//! | `extract`          | `embeddings-{source}.fsee`                         |
//! | `fit_pca`          | `pca-{source}.fseb`, `reduced-{source}.fsee`       |
//! | `train_decoder`    | `decoder-{source}.fseb`                            |
//! | `interpolate`      | `interp-{source}.png`                              |
//! | `evaluate`         | `classifier.fseb`, `fid.csv`, `fid.stamp`          |
//! | `manipulate`       | `attribute-{source}.fsee`, `manipulate-{source}.png` |
//! | `report`           | `report.md`, `fid.svg`                             |
//!
//! Every artifact records the hash of the stage that produced it; consumers
//! recompute the expected hash from the current configuration and refuse stale inputs.

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::classifier::{train_classifier, Classifier, ClassifierConfig, ClassifierTrainConfig};
use crate::config::{ExperimentConfig, Stage};
use crate::data::{binarize, ingest_idx, ImageSet};
use crate::decoder::{train_decoder, Decoder, DecoderConfig};
use crate::error::{Error, Result};
use crate::fisher::fisher_score;
use crate::formats::{hex, Checkpoint, EmbeddingFile, EmbeddingHeader, EmbeddingKind, Hash};
use crate::grid::{dataset_grid, tile, write_png};
use crate::interp::{decode_pairs, draw_pairs, fid_curve, frechet_distance, gaussian_stats, FeatureExtractor, COVARIANCE_RIDGE};
use crate::params::ParamSet;
use crate::pixel_model::{train_pixel_model, PixelModel, PixelModelConfig};
use crate::projection::{fit_pca, reduce, Embedding, EmbeddingSource, PcaModel, ProjectionSpec, ReduceOptions, ReductionChain, SparseProjection};
use crate::report::{curve_svg, read_fid_csv, summary_table, write_fid_csv, FidRecord};
use crate::rng::stream_rng;
use crate::semantic::{attribute_vector, manipulation_grid};
use crate::tensor::Tensor;

/// Both embedding sources, in the order results are written.
pub const SOURCES: [EmbeddingSource; 2] = [EmbeddingSource::Activation, EmbeddingSource::Fisher];

/// Mixing coefficients of the interpolation grid columns.
const GRID_ALPHAS: [f64; 9] = [0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0];

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

fn short(h: &Hash) -> String {
    hex(h)[..12].to_string()
}

impl Pipeline {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let dir = if config.output.as_os_str().is_empty() { PathBuf::from("runs/default") } else { config.output.clone() };
        std::fs::create_dir_all(&dir)?;
        Ok(Pipeline { config, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str, hint: &'static str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, hint })
        }
    }

    fn check_stamp(&self, path: &Path, found: &Hash, stage: Stage, rerun: &'static str) -> Result<()> {
        let expected = self.config.stage_hash(stage);
        if *found != expected {
            return Err(Error::StaleArtifact {
                path: path.to_path_buf(),
                expected: short(&expected),
                found: short(found),
                rerun,
            });
        }
        Ok(())
    }

    /// Reads, optionally downsamples and binarizes the configured images.
    pub fn prepare_data(&self) -> Result<ImageSet> {
        let d = &self.config.data;
        let mut gray = ingest_idx(&d.images, d.labels.as_deref())?;
        if d.limit > 0 {
            gray = gray.take(d.limit);
        }
        if d.downsample {
            gray = gray.downsample2()?;
        }
        binarize(&gray, self.config.seeds().binarize)
    }

    fn save_dataset(&self, data: &ImageSet) -> Result<()> {
        let mut c = Checkpoint::new(self.config.stage_hash(Stage::Data));
        c.set_meta("levels", data.levels)?;
        c.push("pixels", &Tensor::<f32>::new(vec![data.len(), data.height, data.width], data.pixels.iter().map(|&p| p as f32).collect())?)?;
        if let Some(l) = &data.labels {
            c.push("labels", &Tensor::<f32>::new(vec![l.len()], l.iter().map(|&v| v as f32).collect())?)?;
        }
        c.save(&self.path("dataset.fseb"))?;
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<ImageSet> {
        let p = self.require("dataset.fseb", "train-ar")?;
        let (c, _) = Checkpoint::load(&p)?;
        self.check_stamp(&p, &c.config_hash, Stage::Data, "train-ar")?;
        let levels: u32 = c.meta_parse("levels")?;
        let Some(px) = c.get("pixels") else {
            return Err(Error::invalid("dataset", "no pixels tensor"));
        };
        let px = px.to_real::<f32>()?;
        let &[_, h, w] = px.shape() else {
            return Err(Error::invalid("dataset", "pixels must be [n, h, w]"));
        };
        let labels = c.get("labels").map(|l| l.to_real::<f32>().map(|t| t.data().iter().map(|&v| v as u8).collect())).transpose()?;
        ImageSet::new(h, w, levels, px.data().iter().map(|&v| v as u8).collect(), labels)
    }

    /// Prepares the dataset and trains the autoregressive model.
    pub fn train_ar(&self, f64_check: bool) -> Result<PixelModel<f32>> {
        let data = self.prepare_data()?;
        self.save_dataset(&data)?;
        info!("dataset: {} images of {}x{}", data.len(), data.height, data.width);
        let preview: Vec<usize> = (0..data.len().min(64)).collect();
        write_png(&self.path("data.png"), &dataset_grid(&data, &preview, 8, 3)?)?;
        let mc = self.config.pixel_model_config(data.height, data.width);
        let model = PixelModel::<f32>::init(mc, &mut stream_rng(self.config.seeds().init, 0))?;
        if f64_check {
            check_pixel_model_gradient(&model, &data)?;
        }
        let (model, report) = train_pixel_model(model, &data, &self.config.pixel_train_config())?;
        let mut c = Checkpoint::new(self.config.stage_hash(Stage::Model));
        put_pixel_config(&mut c, &mc)?;
        c.set_meta("init_nll", report.init_nll)?;
        c.set_meta("final_nll", report.final_nll)?;
        c.set_meta("steps", report.steps)?;
        c.push_params("model.", model.params())?;
        c.save(&self.path("model.fseb"))?;
        let samples = model.sample_batch(16, &mut stream_rng(self.config.seeds().eval, 1))?;
        let s = ImageSet::new(mc.height, mc.width, 2, samples.data().iter().map(|&v| v as u8).collect(), None)?;
        write_png(&self.path("samples.png"), &dataset_grid(&s, &(0..16).collect::<Vec<_>>(), 8, 3)?)?;
        Ok(model)
    }

    /// The trained model and the SHA-256 of its checkpoint file.
    pub fn load_model(&self) -> Result<(PixelModel<f32>, Hash)> {
        let p = self.require("model.fseb", "train-ar")?;
        let (c, file_hash) = Checkpoint::load(&p)?;
        self.check_stamp(&p, &c.config_hash, Stage::Model, "train-ar")?;
        let mc = get_pixel_config(&c)?;
        Ok((PixelModel::from_params(mc, c.params("model.")?)?, file_hash))
    }

    pub fn projection_spec(&self, n_in: usize) -> ProjectionSpec {
        let e = &self.config.embedding;
        ProjectionSpec {
            n_in,
            p_out: e.proj_dim,
            density: e.density.unwrap_or_else(|| ProjectionSpec::default_density(n_in)),
            seed: self.config.seeds().projection,
            normalized: e.normalized,
        }
    }

    fn embedding_file(&self, source: EmbeddingSource) -> String {
        format!("embeddings-{source}.fsee")
    }

    /// Projects per-sample Fisher scores or activations of the whole dataset.
    pub fn extract(&self, source: EmbeddingSource) -> Result<Vec<Embedding>> {
        let data = self.load_dataset()?;
        let (model, model_hash) = self.load_model()?;
        let layer = self.config.activation_layer();
        let n_in = match source {
            EmbeddingSource::Fisher => model.n_params(),
            EmbeddingSource::Activation => model.config().filters * model.config().pixels(),
        };
        let spec = self.projection_spec(n_in);
        let chain = ReductionChain {
            projection: SparseProjection::new(spec)?,
            pca: None,
        };
        let opts = ReduceOptions {
            source,
            layer,
            batch_size: self.config.embedding.batch_size,
            standardizer: None,
        };
        let indices: Vec<usize> = (0..data.len()).collect();
        let embeddings = reduce(&model, &data, &indices, &[chain], &opts)?.remove(0);
        let file = EmbeddingFile {
            header: EmbeddingHeader {
                kind: EmbeddingKind::Samples,
                source,
                layer: layer as u32,
                dim: spec.p_out as u32,
                projection: spec,
                pca_dim: 0,
                model_hash,
                config_hash: self.config.stage_hash(Stage::Embedding(source)),
                name: String::new(),
            },
            embeddings,
        };
        file.save(&self.path(&self.embedding_file(source)))?;
        Ok(file.embeddings)
    }

    fn load_embeddings(&self, source: EmbeddingSource) -> Result<EmbeddingFile> {
        let p = self.require(&self.embedding_file(source), "extract-embeddings")?;
        let f = EmbeddingFile::load(&p)?;
        self.check_stamp(&p, &f.header.config_hash, Stage::Embedding(source), "extract-embeddings")?;
        if f.header.source != source {
            return Err(Error::invalid("embeddings", format!("{} holds {} embeddings", p.display(), f.header.source)));
        }
        Ok(f)
    }

    /// Fits PCA on the projected embeddings and writes the reduced set.
    pub fn fit_pca(&self, source: EmbeddingSource) -> Result<Option<PcaModel>> {
        let k = self.config.embedding.pca_dim;
        if k == 0 {
            info!("pca_dim is 0: the decoder consumes the projections directly");
            return Ok(None);
        }
        let f = self.load_embeddings(source)?;
        let rows: Vec<Vec<f64>> = f.embeddings.iter().map(|e| e.values.iter().map(|&v| v as f64).collect()).collect();
        let pca = fit_pca(&rows, k)?;
        let stamp = self.config.stage_hash(Stage::Pca(source));
        let mut c = Checkpoint::new(stamp);
        c.set_meta("total_variance", pca.total_variance())?;
        c.push("mean", &Tensor::new(vec![pca.dim()], pca.mean().to_vec())?)?;
        c.push("components", &Tensor::new(vec![pca.out_dim(), pca.dim()], pca.components().to_vec())?)?;
        c.push("explained_variance", &Tensor::new(vec![pca.out_dim()], pca.explained_variance().to_vec())?)?;
        c.save(&self.path(&format!("pca-{source}.fseb")))?;
        let embeddings = f
            .embeddings
            .iter()
            .zip(&rows)
            .map(|(e, r)| {
                Ok(Embedding {
                    values: pca.apply(r)?.iter().map(|&v| v as f32).collect(),
                    ..e.clone()
                })
            })
            .collect::<Result<_>>()?;
        let header = EmbeddingHeader {
            dim: k as u32,
            pca_dim: k as u32,
            config_hash: stamp,
            ..f.header
        };
        EmbeddingFile { header, embeddings }.save(&self.path(&format!("reduced-{source}.fsee")))?;
        Ok(Some(pca))
    }

    /// The embeddings the decoder consumes: PCA-reduced when configured.
    pub fn decoder_inputs(&self, source: EmbeddingSource) -> Result<Vec<Embedding>> {
        if self.config.embedding.pca_dim == 0 {
            return Ok(self.load_embeddings(source)?.embeddings);
        }
        let p = self.require(&format!("reduced-{source}.fsee"), "fit-pca")?;
        let f = EmbeddingFile::load(&p)?;
        self.check_stamp(&p, &f.header.config_hash, Stage::Pca(source), "fit-pca")?;
        Ok(f.embeddings)
    }

    pub fn train_decoder(&self, source: EmbeddingSource, f64_check: bool) -> Result<Decoder<f32>> {
        let data = self.load_dataset()?;
        let inputs = self.decoder_inputs(source)?;
        let dc = self.config.decoder_config(data.height, data.width);
        let mut rng = stream_rng(self.config.seeds().init, 1 + source.tag() as u64);
        let decoder = Decoder::<f32>::init(dc, &mut rng)?;
        if f64_check {
            check_decoder_gradient(&decoder, &inputs, &data)?;
        }
        let (decoder, report) = train_decoder(decoder, &inputs, &data, &self.config.decoder_train_config())?;
        let mut c = Checkpoint::new(self.config.stage_hash(Stage::Decoder(source)));
        put_decoder_config(&mut c, &dc)?;
        c.set_meta("source", source)?;
        c.set_meta("final_train", report.epoch_train.last().copied().unwrap_or(f64::NAN))?;
        c.set_meta("final_validation", report.epoch_validation.last().copied().unwrap_or(f64::NAN))?;
        c.set_meta(
            "validation_curve",
            report.epoch_validation.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","),
        )?;
        c.push_params("param.", decoder.params())?;
        c.push_params("buffer.", decoder.buffers())?;
        c.save(&self.path(&format!("decoder-{source}.fseb")))?;
        Ok(decoder)
    }

    pub fn load_decoder(&self, source: EmbeddingSource) -> Result<(Decoder<f32>, Checkpoint)> {
        let p = self.require(&format!("decoder-{source}.fseb"), "train-decoder")?;
        let (c, _) = Checkpoint::load(&p)?;
        self.check_stamp(&p, &c.config_hash, Stage::Decoder(source), "train-decoder")?;
        let dc = get_decoder_config(&c)?;
        Ok((Decoder::from_parts(dc, c.params("param.")?, c.params("buffer.")?)?, c))
    }

    /// PNG grid: rows are random pairs, columns sweep α from 0 to 1.
    pub fn interpolate(&self, source: EmbeddingSource) -> Result<PathBuf> {
        let (decoder, _) = self.load_decoder(source)?;
        let inputs = self.decoder_inputs(source)?;
        let pairs = draw_pairs(inputs.len(), self.config.eval.grid_pairs.max(1), self.config.seeds().eval ^ 0x67726964)?;
        let columns: Vec<ImageSet> = GRID_ALPHAS.iter().map(|&a| decode_pairs(&inputs, &decoder, &pairs, a)).collect::<Result<_>>()?;
        let mut cells = Vec::with_capacity(pairs.len() * GRID_ALPHAS.len());
        for row in 0..pairs.len() {
            cells.extend(columns.iter().map(|c| c.image(row)));
        }
        let c = decoder.config();
        let path = self.path(&format!("interp-{source}.png"));
        write_png(&path, &tile(&cells, GRID_ALPHAS.len(), c.height, c.width, 2, 3)?)?;
        Ok(path)
    }

    /// Trains or loads the feature classifier.
    pub fn classifier(&self, data: &ImageSet) -> Result<Classifier> {
        let p = self.path("classifier.fseb");
        let stamp = self.config.stage_hash(Stage::Classifier);
        if p.exists() {
            let (c, _) = Checkpoint::load(&p)?;
            if c.config_hash == stamp {
                let cc = ClassifierConfig {
                    conv1: c.meta_parse("conv1")?,
                    conv2: c.meta_parse("conv2")?,
                    hidden: c.meta_parse("hidden")?,
                    ..ClassifierConfig::new(data.height, data.width, data.levels as usize, c.meta_parse("classes")?)
                };
                return Classifier::from_params(cc, c.params("")?);
            }
            info!("classifier checkpoint is stale, retraining");
        }
        let labels: Vec<usize> = data
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("evaluate", "the classifier extractor needs labels; set data.labels or eval.extractor"))?
            .iter()
            .map(|&l| l as usize)
            .collect();
        let classes = labels.iter().max().map_or(2, |&m| m + 1).max(2);
        let refs: Vec<&[u8]> = (0..data.len()).map(|i| data.image(i)).collect();
        let cc = ClassifierConfig::new(data.height, data.width, data.levels as usize, classes);
        let tc = ClassifierTrainConfig {
            epochs: self.config.eval.classifier_epochs,
            seed: self.config.seeds().shuffle,
            ..Default::default()
        };
        let (clf, report) = train_classifier(cc, &refs, &labels, &tc)?;
        if report.test_accuracy < 0.95 {
            warn!("feature classifier reached only {:.3} held-out accuracy", report.test_accuracy);
        }
        let mut c = Checkpoint::new(stamp);
        for (k, v) in [("conv1", cc.conv1), ("conv2", cc.conv2), ("hidden", cc.hidden), ("classes", cc.classes)] {
            c.set_meta(k, v)?;
        }
        c.set_meta("test_accuracy", report.test_accuracy)?;
        c.push_params("", clf.params())?;
        c.save(&p)?;
        Ok(clf)
    }

    pub fn extractor(&self, data: &ImageSet) -> Result<FeatureExtractor> {
        Ok(match self.config.eval.extractor.as_str() {
            "raw" => FeatureExtractor::Raw,
            "pca" => {
                let scale = 1.0 / (data.levels - 1) as f64;
                let rows: Vec<Vec<f64>> = (0..data.len()).map(|i| data.image(i).iter().map(|&v| v as f64 * scale).collect()).collect();
                FeatureExtractor::Pca(fit_pca(&rows, self.config.eval.pca_features)?)
            }
            _ => FeatureExtractor::Classifier(self.classifier(data)?),
        })
    }

    /// FID curves for the given sources, plus a split-half reference row, written to `fid.csv`.
    pub fn evaluate(&self, sources: &[EmbeddingSource]) -> Result<Vec<FidRecord>> {
        let data = self.load_dataset()?;
        let extractor = self.extractor(&data)?;
        let features = extractor.features(&data)?;
        let reference = gaussian_stats(&features)?;
        let seed = self.config.seeds().eval;
        let mut rows = Vec::new();
        // stored order can follow the labels, so halves come from a seeded permutation
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.shuffle(&mut stream_rng(seed, u64::MAX));
        let (first, second) = order.split_at(order.len() / 2);
        let half = |idx: &[usize]| idx.iter().map(|&i| features[i].clone()).collect::<Vec<_>>();
        let (a, b) = (gaussian_stats(&half(first))?, gaussian_stats(&half(second))?);
        let split = frechet_distance(&a.regularized(COVARIANCE_RIDGE), &b.regularized(COVARIANCE_RIDGE))?;
        info!("split-half reference FID {split:.4}");
        rows.push(FidRecord {
            embedding_source: "reference".into(),
            decoder_id: "split-half".into(),
            alpha: 0.0,
            fid: split,
            n: data.len() / 2,
            seed,
        });
        for &source in sources {
            let (decoder, _) = self.load_decoder(source)?;
            let inputs = self.decoder_inputs(source)?;
            let curve = fid_curve(&inputs, &decoder, &reference, &extractor, &self.config.eval.alphas, self.config.eval.n, seed)?;
            let id = short(&self.config.stage_hash(Stage::Decoder(source)));
            rows.extend(curve.into_iter().map(|p| FidRecord {
                embedding_source: source.to_string(),
                decoder_id: id.clone(),
                alpha: p.alpha,
                fid: p.fid,
                n: p.n,
                seed,
            }));
        }
        write_fid_csv(&self.path("fid.csv"), &rows)?;
        crate::formats::atomic_write(
            &self.path("fid.stamp"),
            format!("config_hash={}\nextractor={}\n", hex(&self.config.stage_hash(Stage::Eval)), extractor.name()).as_bytes(),
        )?;
        Ok(rows)
    }

    /// Attribute vector for `digit` vs the rest, and a grid of decoded manipulations.
    pub fn manipulate(&self, source: EmbeddingSource) -> Result<PathBuf> {
        let data = self.load_dataset()?;
        let labels = data.labels.as_ref().ok_or_else(|| Error::invalid("manipulate", "dataset has no labels"))?;
        let inputs = self.decoder_inputs(source)?;
        let (decoder, _) = self.load_decoder(source)?;
        let m = &self.config.manipulate;
        let has: Vec<bool> = inputs.iter().map(|e| labels[e.id as usize] == m.digit).collect();
        let name = format!("digit-{}", m.digit);
        let attr = attribute_vector(&inputs, &has, &name)?;
        let header = EmbeddingHeader {
            kind: EmbeddingKind::Attribute,
            name: name.clone(),
            dim: attr.delta.len() as u32,
            ..self.load_embeddings(source)?.header
        };
        let file = EmbeddingFile {
            header: EmbeddingHeader {
                pca_dim: self.config.embedding.pca_dim as u32,
                config_hash: self.config.stage_hash(Stage::Decoder(source)),
                ..header
            },
            embeddings: vec![Embedding {
                id: 0,
                source,
                values: attr.delta.clone(),
            }],
        };
        file.save(&self.path(&format!("attribute-{source}.fsee")))?;
        // rows: samples without the attribute, then samples with it
        let mut picks: Vec<&[f32]> = Vec::new();
        for want in [false, true] {
            picks.extend(inputs.iter().zip(&has).filter(|(_, &h)| h == want).take(m.rows.div_ceil(2)).map(|(e, _)| e.values.as_slice()));
        }
        let cells = manipulation_grid(&decoder, &picks, &attr.delta, &m.scales)?;
        let refs: Vec<&[u8]> = cells.iter().map(Vec::as_slice).collect();
        let c = decoder.config();
        let path = self.path(&format!("manipulate-{source}.png"));
        write_png(&path, &tile(&refs, m.scales.len(), c.height, c.width, 2, 3)?)?;
        info!("attribute {name}: {} with, {} without", attr.n_pos, attr.n_neg);
        Ok(path)
    }

    /// Renders `fid.csv` to `report.md` and `fid.svg`.
    pub fn report(&self) -> Result<String> {
        let p = self.require("fid.csv", "evaluate")?;
        let rows = read_fid_csv(&p)?;
        let table = summary_table(&rows);
        let mut md = String::from("# Interpolation FID\n\n");
        md.push_str(&table);
        for source in SOURCES {
            if let Ok((_, c)) = self.load_decoder(source) {
                let err = match c.meta("final_validation").map(str::parse::<f64>) {
                    Ok(Ok(v)) => format!("{v:.4}"),
                    _ => "?".into(),
                };
                md.push_str(&format!("\n{source} decoder: validation reconstruction error {err} nats/pixel\n"));
            }
        }
        crate::formats::atomic_write(&self.path("report.md"), md.as_bytes())?;
        crate::formats::atomic_write(&self.path("fid.svg"), curve_svg(&rows)?.as_bytes())?;
        Ok(md)
    }

    /// Every stage in order for both sources.
    pub fn run_all(&self, f64_check: bool) -> Result<Vec<FidRecord>> {
        self.train_ar(f64_check)?;
        for source in SOURCES {
            self.extract(source)?;
            self.fit_pca(source)?;
            self.train_decoder(source, f64_check)?;
            self.interpolate(source)?;
        }
        let rows = self.evaluate(&SOURCES)?;
        for source in SOURCES {
            self.manipulate(source)?;
        }
        self.report()?;
        Ok(rows)
    }
}

fn put_pixel_config(c: &mut Checkpoint, m: &PixelModelConfig) -> Result<()> {
    for (k, v) in [
        ("layers", m.n_layers),
        ("kernel", m.kernel),
        ("padding", m.padding),
        ("filters", m.filters),
        ("height", m.height),
        ("width", m.width),
        ("levels", m.output.levels()),
    ] {
        c.set_meta(k, v)?;
    }
    Ok(())
}

fn get_pixel_config(c: &Checkpoint) -> Result<PixelModelConfig> {
    let levels: usize = c.meta_parse("levels")?;
    Ok(PixelModelConfig {
        n_layers: c.meta_parse("layers")?,
        kernel: c.meta_parse("kernel")?,
        padding: c.meta_parse("padding")?,
        filters: c.meta_parse("filters")?,
        height: c.meta_parse("height")?,
        width: c.meta_parse("width")?,
        output: if levels == 2 {
            crate::pixel_model::OutputDist::Bernoulli
        } else {
            crate::pixel_model::OutputDist::Categorical { levels }
        },
    })
}

fn put_decoder_config(c: &mut Checkpoint, d: &DecoderConfig) -> Result<()> {
    for (k, v) in [
        ("input_dim", d.input_dim),
        ("dense", d.dense),
        ("wide", d.wide),
        ("narrow", d.narrow),
        ("height", d.height),
        ("width", d.width),
        ("levels", d.levels),
    ] {
        c.set_meta(k, v)?;
    }
    Ok(())
}

fn get_decoder_config(c: &Checkpoint) -> Result<DecoderConfig> {
    Ok(DecoderConfig {
        input_dim: c.meta_parse("input_dim")?,
        dense: c.meta_parse("dense")?,
        wide: c.meta_parse("wide")?,
        narrow: c.meta_parse("narrow")?,
        height: c.meta_parse("height")?,
        width: c.meta_parse("width")?,
        levels: c.meta_parse("levels")?,
    })
}

/// Compares analytic and central-difference derivatives at a few random coordinates, in f64.
fn spot_check(
    what: &'static str,
    params: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    coords: usize,
    seed: u64,
    mut f: impl FnMut(&ParamSet<f64>) -> Result<f64>,
) -> Result<()> {
    let flat = params.flatten();
    let grad = analytic.flatten();
    let mut rng = stream_rng(seed, 0);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = rng.random_range(0..flat.len());
        let mut w = flat.clone();
        w[i] = flat[i] + h;
        let up = f(&params.unflatten(&w)?)?;
        w[i] = flat[i] - h;
        let down = f(&params.unflatten(&w)?)?;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((grad[i] - numeric).abs() / grad[i].abs().max(1.0));
    }
    info!("{what} f64 gradient check: max relative error {worst:.2e} over {coords} coordinates");
    if worst > 1e-4 {
        return Err(Error::invalid("f64-check", format!("{what} gradient relative error {worst:e} exceeds 1e-4")));
    }
    Ok(())
}

fn check_pixel_model_gradient(model: &PixelModel<f32>, data: &ImageSet) -> Result<()> {
    let m64 = model.cast::<f64>();
    let img = data.batch::<f64>(&[0]);
    let cfg = *m64.config();
    let score = fisher_score(&m64, &img)?;
    let analytic = m64.params().unflatten(&score)?;
    spot_check("pixel model", m64.params(), &analytic, 24, 1, |p| {
        PixelModel::from_params(cfg, p.clone())?.log_prob(&img)
    })
}

fn check_decoder_gradient(decoder: &Decoder<f32>, inputs: &[Embedding], data: &ImageSet) -> Result<()> {
    use crate::autodiff::Tape;
    use crate::decoder::Mode;
    let batch: Vec<&Embedding> = inputs.iter().take(4).collect();
    let zs: Vec<&[f32]> = batch.iter().map(|e| e.values.as_slice()).collect();
    let targets = data.batch::<f64>(&batch.iter().map(|e| e.id as usize).collect::<Vec<_>>());
    let base = Decoder::<f64>::from_parts(*decoder.config(), decoder.params().cast(), decoder.buffers().cast())?;
    let mut scaled = base.clone();
    scaled.fit_input_scaling(&inputs.iter().map(|e| e.values.as_slice()).collect::<Vec<_>>())?;
    let buffers = scaled.buffers().clone();
    let loss = |p: &ParamSet<f64>| -> Result<(Tape<f64>, crate::autodiff::Var)> {
        let d = Decoder::from_parts(*decoder.config(), p.clone(), buffers.clone())?;
        let mut tape = Tape::new();
        let v = tape.params(p);
        let (logits, _) = d.forward(&mut tape, &v, &zs, Mode::Train)?;
        let ll = d.log_likelihood_on_tape(&mut tape, logits, &targets)?;
        Ok((tape, ll))
    };
    let (mut tape, ll) = loss(base.params())?;
    let analytic = tape.backward(ll)?;
    spot_check("decoder", base.params(), &analytic, 24, 2, |p| {
        let (t, v) = loss(p)?;
        Ok(t.value(v).data()[0])
    })
}

