//! Fréchet distances: closed-form Gaussian cases, then the FID of decoded
//! interpolations on the planted-attribute benchmark as α moves toward the midpoint.

use fisher_interp::interp::{fid_curve, frechet_distance, gaussian_stats, FeatureExtractor, GaussianStats, DEFAULT_ALPHAS};
use fisher_interp::semantic::{planted_attribute, run_planted_benchmark, PlantedConfig};

fn main() -> fisher_interp::Result<()> {
    for (m1, s1, m2, s2) in [(0.0, 1.0, 0.0, 1.0), (0.0, 1.0, 3.0, 1.0), (1.0, 2.0, 1.0, 0.5)] {
        let g = |m: f64, s: f64| GaussianStats { mean: vec![m], cov: vec![s * s], count: 2 };
        let fid = frechet_distance(&g(m1, s1), &g(m2, s2))?;
        println!("N({m1}, {s1}²) vs N({m2}, {s2}²): {fid:.6} (closed form {:.6})", (m1 - m2) * (m1 - m2) + (s1 - s2) * (s1 - s2));
    }

    let cfg = PlantedConfig::default();
    let planted = planted_attribute(&cfg)?;
    let (_, decoder, _) = run_planted_benchmark(&cfg, &[], 15)?;
    let extractor = FeatureExtractor::Raw;
    let reference = gaussian_stats(&extractor.features(&planted.images)?)?;
    for p in fid_curve(&planted.embeddings, &decoder, &reference, &extractor, &DEFAULT_ALPHAS, 1000, 9)? {
        println!("α = {:<5} FID {:.4}", p.alpha, p.fid);
    }
    Ok(())
}
