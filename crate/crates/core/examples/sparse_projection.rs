//! Sparse three-point random projections: entry statistics and pairwise
//! distance preservation with the normalized scaling.

use fisher_interp::projection::{ProjectionSpec, SparseProjection};
use fisher_interp::rng::stream_rng;
use rand::Rng;

fn main() -> fisher_interp::Result<()> {
    let n_in = 20_000;
    let density = ProjectionSpec::default_density(n_in);
    let spec = ProjectionSpec { n_in, p_out: 512, density, seed: 11, normalized: true };
    let proj = SparseProjection::new(spec)?;

    let (mut pos, mut neg) = (0usize, 0usize);
    for j in 0..200 {
        proj.for_each_nonzero(j, |_, negative| if negative { neg += 1 } else { pos += 1 });
    }
    let total = (200 * spec.p_out) as f64;
    println!("density {density:.5}: +{:.5} -{:.5} of entries, magnitude {:.5}", pos as f64 / total, neg as f64 / total, proj.magnitude());

    let mut rng = stream_rng(12, 0);
    let points: Vec<Vec<f64>> = (0..30).map(|_| (0..n_in).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let projected: Vec<Vec<f64>> = points.iter().map(|p| proj.project(p)).collect::<Result<_, _>>()?;
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut ratios = Vec::new();
    for a in 0..points.len() {
        for b in a + 1..points.len() {
            ratios.push(dist(&projected[a], &projected[b]) / dist(&points[a], &points[b]));
        }
    }
    ratios.sort_by(f64::total_cmp);
    let within = ratios.iter().filter(|r| (0.8..=1.2).contains(*r)).count();
    println!(
        "distance ratio over {} pairs: min {:.3} median {:.3} max {:.3}; {within} within ±20%",
        ratios.len(),
        ratios[0],
        ratios[ratios.len() / 2],
        ratios[ratios.len() - 1]
    );
    Ok(())
}
