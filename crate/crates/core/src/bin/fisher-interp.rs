use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fisher_interp::config::ExperimentConfig;
use fisher_interp::pipeline::{Pipeline, SOURCES};
use fisher_interp::projection::EmbeddingSource;
use fisher_interp::Result;

#[derive(Parser)]
#[command(name = "fisher-interp", version, about = "Fisher-score embeddings of a PixelCNN: train, embed, decode, interpolate, evaluate")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Opts {
    /// TOML experiment configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory, overriding the configuration.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Interpolated images per α.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Comma-separated mixing coefficients.
    #[arg(long, global = true, value_delimiter = ',')]
    alpha_list: Option<Vec<f64>>,
    #[arg(long, global = true)]
    density: Option<f64>,
    #[arg(long, global = true)]
    proj_dim: Option<usize>,
    /// 0 disables PCA.
    #[arg(long, global = true)]
    pca_dim: Option<usize>,
    #[arg(long, global = true)]
    normalized_projection: bool,
    /// Worker threads; 1 gives byte-reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Spot-check gradients in f64 against finite differences before training.
    #[arg(long, global = true)]
    f64_check: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest and binarize the dataset, then train the autoregressive model.
    TrainAr,
    ExtractEmbeddings(SourceArg),
    FitPca(SourceArg),
    TrainDecoder(SourceArg),
    /// Write an interpolation grid PNG.
    Interpolate(SourceArg),
    /// FID at each α for both sources; writes fid.csv.
    Evaluate,
    /// Attribute vector for the configured digit and a manipulation grid.
    Manipulate(SourceArg),
    /// Render fid.csv to report.md and fid.svg.
    Report,
    /// Every stage in order for both sources.
    RunAll,
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Args)]
struct SourceArg {
    #[arg(long, default_value = "fisher")]
    source: EmbeddingSource,
}

fn config(o: &Opts) -> Result<ExperimentConfig> {
    let mut c = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &o.output {
        c.output = d.clone();
    }
    if let Some(s) = o.seed {
        c.seeds.master = s;
    }
    if let Some(n) = o.n {
        c.eval.n = n;
    }
    if let Some(a) = &o.alpha_list {
        c.eval.alphas = a.clone();
    }
    if let Some(d) = o.density {
        c.embedding.density = Some(d);
    }
    if let Some(p) = o.proj_dim {
        c.embedding.proj_dim = p;
    }
    if let Some(k) = o.pca_dim {
        c.embedding.pca_dim = k;
    }
    c.embedding.normalized |= o.normalized_projection;
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.opts.threads {
        // fails only when a pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let cfg = config(&cli.opts)?;
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let p = Pipeline::new(cfg)?;
    let check = cli.opts.f64_check;
    match cli.command {
        Command::TrainAr => {
            p.train_ar(check)?;
        }
        Command::ExtractEmbeddings(s) => {
            let e = p.extract(s.source)?;
            println!("{} {} embeddings of dimension {}", e.len(), s.source, e.first().map_or(0, |e| e.values.len()));
        }
        Command::FitPca(s) => {
            if let Some(pca) = p.fit_pca(s.source)? {
                let kept: f64 = pca.explained_variance().iter().sum();
                println!("kept {:.1}% of the variance", 100.0 * kept / pca.total_variance());
            }
        }
        Command::TrainDecoder(s) => {
            p.train_decoder(s.source, check)?;
        }
        Command::Interpolate(s) => println!("{}", p.interpolate(s.source)?.display()),
        Command::Evaluate => {
            for r in p.evaluate(&SOURCES)? {
                println!("{}\t{:.3}\t{:.4}", r.embedding_source, r.alpha, r.fid);
            }
        }
        Command::Manipulate(s) => println!("{}", p.manipulate(s.source)?.display()),
        Command::Report => print!("{}", p.report()?),
        Command::RunAll => {
            p.run_all(check)?;
            print!("{}", p.report()?);
        }
        Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
