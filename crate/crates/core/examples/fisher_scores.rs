//! Trains a small PixelCNN on downsampled binarized digits, computes per-image
//! Fisher scores and compares the Fisher kernel within and across digit classes.

use std::path::PathBuf;

use fisher_interp::data::{binarize, ingest_idx};
use fisher_interp::fisher::{fisher_kernel, fisher_scores, fit_standardizer, DEFAULT_STD_FLOOR};
use fisher_interp::pixel_model::{train_pixel_model, PixelModel, PixelModelConfig, TrainConfig};
use fisher_interp::rng::stream_rng;

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k")
}

fn main() -> fisher_interp::Result<()> {
    let dir = data_dir();
    let gray = ingest_idx(&dir.join("images-idx3-ubyte.gz"), Some(&dir.join("labels-idx1-ubyte.gz")))?;
    let data = binarize(&gray.take(600).downsample2()?, 1)?;

    let cfg = PixelModelConfig { n_layers: 3, kernel: 5, padding: 2, filters: 16, height: 14, width: 14, ..Default::default() };
    let model = PixelModel::<f32>::init(cfg, &mut stream_rng(2, 0))?;
    let (model, report) = train_pixel_model(model, &data, &TrainConfig { epochs: 3, batch_size: 32, ..Default::default() })?;
    println!("nll {:.2} -> {:.2} nats/image", report.init_nll, report.final_nll);

    let idx: Vec<usize> = (0..200).collect();
    let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
    let scores = fisher_scores(&model.cast::<f64>(), &data.batch(&idx), &ids)?;
    let dim = scores[0].values.len();
    let mean_abs = (0..dim).map(|j| scores.iter().map(|s| s.values[j]).sum::<f64>().abs()).sum::<f64>() / (dim * scores.len()) as f64;
    println!("{dim}-dimensional scores; mean |average score| per coordinate {mean_abs:.4}");

    let std = fit_standardizer(scores.iter().map(|s| s.values.as_slice()), DEFAULT_STD_FLOOR)?;
    let cos = |a: usize, b: usize| -> fisher_interp::Result<f64> {
        let (x, y) = (&scores[a].values, &scores[b].values);
        Ok(fisher_kernel(&std, x, y)? / (fisher_kernel(&std, x, x)? * fisher_kernel(&std, y, y)?).sqrt())
    };
    let (mut same, mut cross) = (Vec::new(), Vec::new());
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let bucket = if data.label(a) == data.label(b) { &mut same } else { &mut cross };
            bucket.push(cos(a, b)?);
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("mean kernel cosine: same digit {:.4}, different digits {:.4}", avg(&same), avg(&cross));
    Ok(())
}
