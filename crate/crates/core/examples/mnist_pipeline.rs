//! Every pipeline stage on a small downsampled digit subset, writing the
//! artifacts, FID table and plots to a directory (first argument).

use std::path::PathBuf;

use fisher_interp::config::ExperimentConfig;
use fisher_interp::pipeline::Pipeline;

fn main() -> fisher_interp::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("mnist_pipeline"), PathBuf::from);
    let mut cfg = ExperimentConfig { output: out, ..Default::default() };
    cfg.data.images = root.join("data/mnist10k/images-idx3-ubyte.gz");
    cfg.data.labels = Some(root.join("data/mnist10k/labels-idx1-ubyte.gz"));
    cfg.data.limit = 1000;
    cfg.data.downsample = true;
    cfg.model.layers = 3;
    cfg.model.filters = 16;
    cfg.model.kernel = 5;
    cfg.model.epochs = 2;
    cfg.embedding.proj_dim = 256;
    cfg.decoder.dense = 512;
    cfg.decoder.wide = 64;
    cfg.decoder.narrow = 16;
    cfg.decoder.epochs = 5;
    cfg.eval.n = 500;
    cfg.eval.classifier_epochs = 4;

    let pipeline = Pipeline::new(cfg)?;
    pipeline.run_all(false)?;
    println!("{}", pipeline.report()?);
    println!("artifacts in {}", pipeline.dir.display());
    Ok(())
}
