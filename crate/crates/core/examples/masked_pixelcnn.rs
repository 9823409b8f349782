//! Builds a small masked-convolution PixelCNN, checks that its likelihood
//! normalizes over every 3×3 binary image, and draws a few samples.

use fisher_interp::pixel_model::{build_mask, MaskKind, MaskSpec, PixelModel, PixelModelConfig};
use fisher_interp::rng::stream_rng;
use fisher_interp::tensor::Tensor;

fn main() -> fisher_interp::Result<()> {
    for kind in [MaskKind::A, MaskKind::B] {
        let mask = build_mask::<f64>(MaskSpec { kind, kernel: 3 })?;
        let rows: Vec<String> = mask.data().chunks(3).map(|r| r.iter().map(|&v| if v > 0.0 { '1' } else { '0' }).collect()).collect();
        println!("mask {kind:?}: {}", rows.join(" "));
    }

    let cfg = PixelModelConfig { n_layers: 3, kernel: 3, padding: 1, filters: 8, height: 3, width: 3, ..Default::default() };
    let model = PixelModel::<f64>::init(cfg, &mut stream_rng(7, 0))?;
    println!("{} parameters", model.n_params());

    let all: Vec<f64> = (0..512u32).flat_map(|code| (0..9).map(move |b| ((code >> b) & 1) as f64)).collect();
    let lp = model.log_prob_batch(&Tensor::new(vec![512, 1, 3, 3], all)?)?;
    let total: f64 = lp.iter().map(|l| l.exp()).sum();
    println!("sum of p(x) over all 512 images: {total:.12}");

    let samples = model.sample_batch(4, &mut stream_rng(7, 1))?;
    for s in samples.data().chunks(9) {
        let rows: Vec<String> = s.chunks(3).map(|r| r.iter().map(|&v| if v > 0.5 { '#' } else { '.' }).collect()).collect();
        println!("{}", rows.join(" "));
    }
    Ok(())
}
