//! Reverse-mode gradients of the PixelCNN log-likelihood and of the decoder
//! reconstruction loss against central finite differences, in f64.

use fisher_interp::autodiff::{finite_difference, max_relative_error, Tape};
use fisher_interp::decoder::{Decoder, DecoderConfig, Mode};
use fisher_interp::pixel_model::{PixelModel, PixelModelConfig};
use fisher_interp::rng::stream_rng;
use fisher_interp::tensor::Tensor;
use rand::Rng;

fn main() -> fisher_interp::Result<()> {
    let mut rng = stream_rng(5, 0);
    let cfg = PixelModelConfig { n_layers: 2, kernel: 3, padding: 1, filters: 3, height: 4, width: 4, ..Default::default() };
    let mut model = PixelModel::<f64>::init(cfg, &mut rng)?;
    // zero biases put pre-activations exactly on the ReLU kink
    for (_, t) in model.params_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let image = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| rng.random_range(0..2) as f64).collect())?;
    let mut tape = Tape::new();
    let p = tape.params(model.params());
    let (_, lp) = model.log_prob_on_tape(&mut tape, &p, &image)?;
    let analytic = tape.backward(lp)?;
    let numeric = finite_difference(model.params(), 1e-6, |q| PixelModel::from_params(cfg, q.clone())?.log_prob(&image))?;
    println!("pixel model: {} parameters, max relative error {:.2e}", model.n_params(), max_relative_error(&analytic, &numeric));

    let dc = DecoderConfig { input_dim: 3, dense: 6, wide: 4, narrow: 3, height: 6, width: 6, levels: 2 };
    let decoder = Decoder::<f64>::init(dc, &mut rng)?;
    let zs: Vec<Vec<f32>> = (0..3).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let zs: Vec<&[f32]> = zs.iter().map(Vec::as_slice).collect();
    let targets = Tensor::new(vec![3, 1, 6, 6], (0..108).map(|_| rng.random_range(0..2) as f64).collect())?;
    let loss = |params: &fisher_interp::params::ParamSet<f64>| -> fisher_interp::Result<(Tape<f64>, fisher_interp::autodiff::Var)> {
        let d = Decoder::from_parts(dc, params.clone(), decoder.buffers().clone())?;
        let mut tape = Tape::new();
        let v = tape.params(params);
        let (logits, _) = d.forward(&mut tape, &v, &zs, Mode::Train)?;
        let ll = d.log_likelihood_on_tape(&mut tape, logits, &targets)?;
        Ok((tape, ll))
    };
    let (mut tape, ll) = loss(decoder.params())?;
    let analytic = tape.backward(ll)?;
    let numeric = finite_difference(decoder.params(), 1e-6, |q| {
        let (t, v) = loss(q)?;
        Ok(t.value(v).data()[0])
    })?;
    println!(
        "decoder: {} parameters, max relative error {:.2e}",
        decoder.params().n_params(),
        max_relative_error(&analytic, &numeric)
    );
    Ok(())
}
