use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Real;

/// Adam hyperparameters. Defaults: lr 1e-3, betas (0.9, 0.999), eps 1e-8.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam<T: Real> {
    cfg: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        let n = params.n_params();
        Adam {
            cfg,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step on `params` along `grads` (gradients of the loss to minimize).
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>) -> Result<()> {
        if !params.same_layout(grads) {
            return Err(Error::invalid("adam", "gradient layout differs from parameters"));
        }
        self.step += 1;
        let c = |v: f64| T::from_f64(v).unwrap();
        let (b1, b2) = (c(self.cfg.beta1), c(self.cfg.beta2));
        let bc1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let step_size = c(self.cfg.lr * bc2.sqrt() / bc1);
        let eps = c(self.cfg.eps * bc2.sqrt());
        let mut offset = 0;
        for i in 0..params.len() {
            let g = grads.tensor(i).data();
            let p = params.tensor_mut(i).data_mut();
            for (k, (pv, &gv)) in p.iter_mut().zip(g).enumerate() {
                let (m, v) = (&mut self.m[offset + k], &mut self.v[offset + k]);
                *m = b1 * *m + (T::one() - b1) * gv;
                *v = b2 * *v + (T::one() - b2) * gv * gv;
                *pv -= step_size * *m / (v.sqrt() + eps);
            }
            offset += g.len();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap()).unwrap();
        let mut g = ps.zeros_like();
        g.tensor_mut(0).data_mut().copy_from_slice(&[0.3, -5.0]);
        let mut opt = Adam::new(AdamConfig::default(), &ps);
        opt.step(&mut ps, &g).unwrap();
        let w = ps.tensor(0).data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(vec![3], vec![2.0f64, -3.0, 0.5]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.05, ..Default::default() }, &ps);
        for _ in 0..2000 {
            let g = ps.tensor(0).map(|v| 2.0 * v);
            let mut gs = ps.zeros_like();
            *gs.tensor_mut(0) = g;
            opt.step(&mut ps, &gs).unwrap();
        }
        assert!(ps.tensor(0).data().iter().all(|v| v.abs() < 1e-3));
    }
}
