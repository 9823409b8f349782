//! Fisher-score embeddings of downsampled digits, projected to 256 dimensions,
//! decoded back to images by a transposed-convolution decoder.

use std::path::PathBuf;

use fisher_interp::data::{binarize, ingest_idx};
use fisher_interp::decoder::{train_decoder, Decoder, DecoderConfig, DecoderTrainConfig};
use fisher_interp::grid::{tile, write_png};
use fisher_interp::pixel_model::{train_pixel_model, PixelModel, PixelModelConfig, TrainConfig};
use fisher_interp::projection::{reduce, EmbeddingSource, ProjectionSpec, ReduceOptions, ReductionChain, SparseProjection};
use fisher_interp::rng::stream_rng;

fn main() -> fisher_interp::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k");
    let gray = ingest_idx(&dir.join("images-idx3-ubyte.gz"), None)?;
    let data = binarize(&gray.take(1500).downsample2()?, 1)?;

    let cfg = PixelModelConfig { n_layers: 3, kernel: 5, padding: 2, filters: 16, height: 14, width: 14, ..Default::default() };
    let model = PixelModel::<f32>::init(cfg, &mut stream_rng(2, 0))?;
    let (model, _) = train_pixel_model(model, &data, &TrainConfig { epochs: 2, batch_size: 32, ..Default::default() })?;

    let spec = ProjectionSpec { n_in: model.n_params(), p_out: 256, density: 1.0, seed: 3, normalized: false };
    let chain = ReductionChain { projection: SparseProjection::new(spec)?, pca: None };
    let opts = ReduceOptions { source: EmbeddingSource::Fisher, layer: 1, batch_size: 128, standardizer: None };
    let idx: Vec<usize> = (0..data.len()).collect();
    let embeddings = reduce(&model, &data, &idx, &[chain], &opts)?.remove(0);

    let dc = DecoderConfig { dense: 512, wide: 64, narrow: 16, ..DecoderConfig::mnist(256, 14, 14) };
    let decoder = Decoder::<f32>::init(dc, &mut stream_rng(4, 0))?;
    let tc = DecoderTrainConfig { epochs: 8, ..Default::default() };
    let (decoder, report) = train_decoder(decoder, &embeddings, &data, &tc)?;
    for (e, (t, v)) in report.epoch_train.iter().zip(&report.epoch_validation).enumerate() {
        println!("epoch {e}: train {t:.4} validation {v:.4} nats/pixel");
    }

    let show: Vec<usize> = report.validation_ids.iter().take(8).map(|&i| i as usize).collect();
    let zs: Vec<&[f32]> = show.iter().map(|&i| embeddings[i].values.as_slice()).collect();
    let decoded = decoder.decode_mode(&zs, 64)?;
    let mut cells: Vec<&[u8]> = show.iter().map(|&i| data.image(i)).collect();
    cells.extend(decoded.chunks(196));
    let out = std::env::temp_dir().join("decoder_reconstruction.png");
    write_png(&out, &tile(&cells, 8, 14, 14, 2, 4)?)?;
    println!("originals above reconstructions: {}", out.display());
    Ok(())
}
