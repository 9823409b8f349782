use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcaSolver {
    /// Covariance when `n_samples >= dim`, Gram otherwise.
    Auto,
    /// Eigendecomposition of the `dim × dim` sample covariance.
    Covariance,
    /// Eigendecomposition of the `n × n` centered Gram matrix.
    Gram,
}

/// Principal components with orthonormal rows, ordered by decreasing variance.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// Row-major `out_dim × dim`.
    components: Vec<f64>,
    explained_variance: Vec<f64>,
    total_variance: f64,
}

impl PcaModel {
    pub fn from_parts(mean: Vec<f64>, components: Vec<f64>, explained_variance: Vec<f64>, total_variance: f64) -> Result<Self> {
        let dim = mean.len();
        if dim == 0 || components.len() != explained_variance.len() * dim {
            return Err(Error::shape(
                "pca",
                "component matrix",
                explained_variance.len() * dim,
                components.len(),
            ));
        }
        Ok(PcaModel {
            mean,
            components,
            explained_variance,
            total_variance,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn component(&self, k: usize) -> &[f64] {
        &self.components[k * self.dim()..(k + 1) * self.dim()]
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Total variance of the fitting data (trace of its covariance).
    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    /// `G (v − mean)`.
    pub fn apply<T: Real>(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.dim() {
            return Err(Error::shape("apply_pca", "input length", self.dim(), v.len()));
        }
        let centered: Vec<f64> = v.iter().zip(&self.mean).map(|(&x, m)| x.to_f64().unwrap() - m).collect();
        Ok((0..self.out_dim())
            .map(|k| {
                let dot: f64 = self.component(k).iter().zip(&centered).map(|(g, x)| g * x).sum();
                T::from_f64(dot).unwrap()
            })
            .collect())
    }

    /// `mean + Gᵀ z`, the closest point of the principal subspace.
    pub fn invert<T: Real>(&self, z: &[T]) -> Result<Vec<f64>> {
        if z.len() != self.out_dim() {
            return Err(Error::shape("invert_pca", "input length", self.out_dim(), z.len()));
        }
        let mut out = self.mean.clone();
        for (k, &c) in z.iter().enumerate() {
            let c = c.to_f64().unwrap();
            for (o, g) in out.iter_mut().zip(self.component(k)) {
                *o += c * g;
            }
        }
        Ok(out)
    }
}

pub fn fit_pca<T: Real>(data: &[Vec<T>], out_dim: usize) -> Result<PcaModel> {
    fit_pca_with(data, out_dim, PcaSolver::Auto)
}

pub fn fit_pca_with<T: Real>(data: &[Vec<T>], out_dim: usize, solver: PcaSolver) -> Result<PcaModel> {
    let n = data.len();
    let dim = data.first().map_or(0, |r| r.len());
    if n < 2 || dim == 0 {
        return Err(Error::invalid("fit_pca", format!("need >= 2 non-empty samples, got {n}")));
    }
    if let Some(r) = data.iter().find(|r| r.len() != dim) {
        return Err(Error::shape("fit_pca", "sample length", dim, r.len()));
    }
    if out_dim == 0 || out_dim > n.min(dim) {
        return Err(Error::invalid(
            "fit_pca",
            format!("out_dim {out_dim} must be in 1..={}", n.min(dim)),
        ));
    }
    let mut mean = vec![0.0; dim];
    for r in data {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v.to_f64().unwrap();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut x = Vec::with_capacity(n * dim);
    for r in data {
        x.extend(r.iter().zip(&mean).map(|(&v, m)| v.to_f64().unwrap() - m));
    }
    let denom = (n - 1) as f64;
    let use_gram = match solver {
        PcaSolver::Auto => n < dim,
        PcaSolver::Covariance => false,
        PcaSolver::Gram => true,
    };
    let side = if use_gram { n } else { dim };
    let mut m = vec![0.0; side * side];
    if use_gram {
        gemm(1.0 / denom, MatRef::new(&x, n, dim), MatRef::new(&x, n, dim).t(), 0.0, &mut m);
    } else {
        gemm(1.0 / denom, MatRef::new(&x, n, dim).t(), MatRef::new(&x, n, dim), 0.0, &mut m);
    }
    let total_variance: f64 = (0..side).map(|i| m[i * side + i]).sum();
    let mut sym = DMatrix::from_row_slice(side, side, &m);
    sym = (&sym + sym.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..side).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * (side as f64) * f64::EPSILON * 16.0;
    let rank = order.iter().take_while(|&&i| eig.eigenvalues[i] > tol).count();
    let keep = out_dim.min(rank);
    if keep < out_dim {
        warn!("fit_pca: data has numerical rank {rank}; returning {keep} of {out_dim} requested components");
    }
    if keep == 0 {
        return Err(Error::invalid("fit_pca", "data has zero variance"));
    }
    let mut components = vec![0.0; keep * dim];
    let mut variance = Vec::with_capacity(keep);
    for (k, &i) in order.iter().take(keep).enumerate() {
        let lambda = eig.eigenvalues[i];
        variance.push(lambda);
        let row = &mut components[k * dim..(k + 1) * dim];
        let u = eig.eigenvectors.column(i);
        if use_gram {
            // g = Xᵀu / ‖Xᵀu‖ with ‖Xᵀu‖² = (n − 1)·λ
            for s in 0..n {
                let us = u[s];
                for (g, &xv) in row.iter_mut().zip(&x[s * dim..(s + 1) * dim]) {
                    *g += us * xv;
                }
            }
        } else {
            row.copy_from_slice(u.as_slice());
        }
    }
    orthonormalize(&mut components, dim);
    // sign convention: largest-magnitude entry positive
    for row in components.chunks_mut(dim) {
        let big = row.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if big < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
    }
    PcaModel::from_parts(mean, components, variance, total_variance)
}

/// Two passes of modified Gram–Schmidt over the rows.
fn orthonormalize(rows: &mut [f64], dim: usize) {
    let k = rows.len() / dim;
    for _ in 0..2 {
        for i in 0..k {
            for j in 0..i {
                let (head, tail) = rows.split_at_mut(i * dim);
                let prev = &head[j * dim..(j + 1) * dim];
                let cur = &mut tail[..dim];
                let d: f64 = prev.iter().zip(cur.iter()).map(|(a, b)| a * b).sum();
                cur.iter_mut().zip(prev).for_each(|(c, p)| *c -= d * p);
            }
            let row = &mut rows[i * dim..(i + 1) * dim];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::stream_rng;

    fn random_data(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream_rng(seed, 0);
        // distinct column scales give a well-separated spectrum
        (0..n)
            .map(|_| (0..dim).map(|j| rng.random_range(-1.0..1.0) * (1.0 + j as f64) + 0.3 * j as f64).collect())
            .collect()
    }

    fn gram_deviation(p: &PcaModel) -> f64 {
        let mut worst = 0.0f64;
        for a in 0..p.out_dim() {
            for b in 0..p.out_dim() {
                let d: f64 = p.component(a).iter().zip(p.component(b)).map(|(x, y)| x * y).sum();
                worst = worst.max((d - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    #[test]
    fn line_in_ten_dims_is_one_component() {
        let dir: Vec<f64> = (0..10).map(|j| (j as f64 - 4.5) / 10.0).collect();
        let data: Vec<Vec<f64>> = (0..30).map(|t| dir.iter().map(|d| d * (t as f64 - 15.0) + 2.0).collect()).collect();
        let p = fit_pca(&data, 1).unwrap();
        assert!(p.explained_variance()[0] / p.total_variance() > 0.999);
    }

    #[test]
    fn reconstruction_error_never_grows_with_dimension() {
        let data = random_data(40, 12, 1);
        let mut prev = f64::INFINITY;
        for k in 1..=12 {
            let p = fit_pca(&data, k).unwrap();
            let err: f64 = data
                .iter()
                .map(|v| {
                    let back = p.invert(&p.apply(v).unwrap()).unwrap();
                    v.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                })
                .sum();
            assert!(err <= prev + 1e-9, "k={k}: {err} > {prev}");
            prev = err;
        }
        assert!(prev < 1e-15 * 40.0 * 12.0 * 100.0);
    }

    /// Cyclic Jacobi eigenvalue iteration on a symmetric matrix (row-major).
    fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut v = vec![0.0; n * n];
        (0..n).for_each(|i| v[i * n + i] = 1.0);
        for _sweep in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[i * n + j].powi(2)).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k * n + p], a[k * n + q]);
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                        v[k * n + p] = c * vkp - s * vkq;
                        v[k * n + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[i * n + i]).collect(), v)
    }

    #[test]
    fn matches_jacobi_covariance_oracle() {
        let (n, dim) = (50, 20);
        let data = random_data(n, dim, 2);
        let mean: Vec<f64> = (0..dim).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let mut cov = vec![0.0; dim * dim];
        for r in &data {
            for i in 0..dim {
                for j in 0..dim {
                    cov[i * dim + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1) as f64;
                }
            }
        }
        let (vals, vecs) = jacobi_eigen(cov, dim);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        let k = 5;
        let p = fit_pca(&data, k).unwrap();
        for c in 0..k {
            let i = order[c];
            let gap = (vals[i] - vals[order[c + 1]]).min(if c == 0 { f64::INFINITY } else { vals[order[c - 1]] - vals[i] });
            assert!(gap > 1e-3 * vals[i], "spectrum not separated at {c}");
            assert!((p.explained_variance()[c] - vals[i]).abs() < 1e-9 * vals[i]);
            let cos: f64 = (0..dim).map(|j| vecs[j * dim + i] * p.component(c)[j]).sum::<f64>().abs();
            let angle = cos.min(1.0).acos();
            assert!(angle < 1e-6, "component {c}: angle {angle}");
        }
        assert!(gram_deviation(&p) < 1e-8);
    }

    #[test]
    fn gram_and_covariance_routes_agree() {
        let data = random_data(15, 40, 3);
        let a = fit_pca_with(&data, 6, PcaSolver::Gram).unwrap();
        let b = fit_pca_with(&data, 6, PcaSolver::Covariance).unwrap();
        assert!(gram_deviation(&a) < 1e-8);
        for k in 0..6 {
            assert!((a.explained_variance()[k] - b.explained_variance()[k]).abs() < 1e-8 * b.explained_variance()[k]);
            let cos: f64 = a.component(k).iter().zip(b.component(k)).map(|(x, y)| x * y).sum();
            assert!((cos - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rank_deficient_input_is_truncated() {
        // 4 samples span at most 3 centered dimensions
        let data = random_data(4, 10, 4);
        let p = fit_pca(&data, 4).unwrap();
        assert_eq!(p.out_dim(), 3);
        assert!(fit_pca(&data, 5).is_err());
        assert!(fit_pca(&data[..1], 1).is_err());
    }

    #[test]
    fn variance_is_descending() {
        let p = fit_pca(&random_data(60, 8, 5), 8).unwrap();
        assert!(p.explained_variance().windows(2).all(|w| w[0] >= w[1]));
    }
}
