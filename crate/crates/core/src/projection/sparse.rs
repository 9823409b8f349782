//! Three-point sparse random projections, generated lazily column by column.
//!
//! Entry `(r, j)` of the `p_out × n_in` matrix is `−v`, `0` or `+v` with
//! probabilities `d/2`, `1 − d`, `d/2`, where `d` is the density and `s = 1/d`.
//! By default `v = s/√p_out`; with `normalized` it is `√s/√p_out`, which makes
//! `E[entry²] = 1/p_out` so squared norms are preserved in expectation.
//!
//! Column `j` is drawn from counter stream `j` of the seed, so any column can
//! be regenerated alone and the matrix is never stored.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::tensor::{gemm, MatRef, Real};

/// Densities below this use geometric gap sampling instead of one draw per entry.
const SKIP_BELOW: f64 = 1.0 / 16.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionSpec {
    pub n_in: usize,
    pub p_out: usize,
    pub density: f64,
    pub seed: u64,
    pub normalized: bool,
}

impl ProjectionSpec {
    pub fn default_density(n_in: usize) -> f64 {
        1.0 / (n_in.max(1) as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Sampler {
    Signs,
    PerEntry,
    Gaps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseProjection {
    spec: ProjectionSpec,
    magnitude: f64,
    sampler: Sampler,
}

impl SparseProjection {
    pub fn new(spec: ProjectionSpec) -> Result<Self> {
        let d = spec.density;
        if !(d > 0.0 && d <= 1.0) {
            return Err(Error::invalid("build_projection", format!("density {d} outside (0, 1]")));
        }
        if spec.p_out == 0 || spec.n_in == 0 {
            return Err(Error::invalid("build_projection", "n_in and p_out must be >= 1"));
        }
        if spec.p_out > u32::MAX as usize {
            return Err(Error::invalid("build_projection", "p_out too large"));
        }
        let s = 1.0 / d;
        let root_p = (spec.p_out as f64).sqrt();
        let magnitude = if spec.normalized { s.sqrt() / root_p } else { s / root_p };
        let sampler = if d == 1.0 {
            Sampler::Signs
        } else if d >= SKIP_BELOW {
            Sampler::PerEntry
        } else {
            Sampler::Gaps
        };
        Ok(SparseProjection {
            spec,
            magnitude,
            sampler,
        })
    }

    pub fn spec(&self) -> &ProjectionSpec {
        &self.spec
    }

    pub fn n_in(&self) -> usize {
        self.spec.n_in
    }

    pub fn p_out(&self) -> usize {
        self.spec.p_out
    }

    pub fn sparsity(&self) -> f64 {
        1.0 / self.spec.density
    }

    /// Absolute value of every nonzero entry.
    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    /// Calls `f(row, negative)` for each nonzero of column `j`, rows ascending.
    pub fn for_each_nonzero(&self, j: usize, mut f: impl FnMut(usize, bool)) {
        let p = self.spec.p_out;
        let mut rng: ChaCha8Rng = stream_rng(self.spec.seed, j as u64);
        match self.sampler {
            Sampler::Signs => {
                let mut r = 0;
                while r < p {
                    let bits = rng.next_u64();
                    for b in 0..64.min(p - r) {
                        f(r + b, (bits >> b) & 1 == 1);
                    }
                    r += 64;
                }
            }
            Sampler::PerEntry => {
                let half = self.spec.density / 2.0;
                for r in 0..p {
                    let u = unit(&mut rng);
                    if u < half {
                        f(r, true);
                    } else if u < self.spec.density {
                        f(r, false);
                    }
                }
            }
            Sampler::Gaps => {
                let log_q = (-self.spec.density).ln_1p();
                let mut r = 0usize;
                loop {
                    // zeros before the next nonzero ~ Geometric(d)
                    let u = 1.0 - unit(&mut rng);
                    let gap = (u.ln() / log_q).floor();
                    if gap >= (p - r) as f64 {
                        break;
                    }
                    r += gap as usize;
                    f(r, rng.next_u32() & 1 == 1);
                    r += 1;
                    if r >= p {
                        break;
                    }
                }
            }
        }
    }

    /// Column `j` as `(row, value)` pairs.
    pub fn column(&self, j: usize) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        let m = self.magnitude;
        self.for_each_nonzero(j, |r, neg| out.push((r, if neg { -m } else { m })));
        out
    }

    /// Writes column `j` densely into `out[..p_out]`.
    pub fn fill_column<T: Real>(&self, j: usize, out: &mut [T]) {
        let pos = T::from_f64(self.magnitude).unwrap();
        let out = &mut out[..self.spec.p_out];
        if let Sampler::Signs = self.sampler {
            // same bit order as for_each_nonzero, without the per-entry callback
            let signs = [pos, -pos];
            let mut rng: ChaCha8Rng = stream_rng(self.spec.seed, j as u64);
            for chunk in out.chunks_mut(64) {
                let bits = rng.next_u64();
                for (b, v) in chunk.iter_mut().enumerate() {
                    *v = signs[((bits >> b) & 1) as usize];
                }
            }
            return;
        }
        out.fill(T::zero());
        self.for_each_nonzero(j, |r, neg| out[r] = if neg { -pos } else { pos });
    }

    /// Row-major `p_out × n_in` matrix. For tests and small instances only.
    pub fn to_dense(&self) -> Vec<f64> {
        let (p, n) = (self.spec.p_out, self.spec.n_in);
        let mut m = vec![0.0; p * n];
        for j in 0..n {
            for (r, v) in self.column(j) {
                m[r * n + j] = v;
            }
        }
        m
    }

    /// Exact `P v`, accumulated in `f64`.
    pub fn project<T: Real>(&self, v: &[T]) -> Result<Vec<T>> {
        let mut s = self.stream();
        s.push(v)?;
        s.finish()
    }

    /// Incremental `P v` for inputs arriving in consecutive chunks.
    pub fn stream(&self) -> ProjectionStream<'_> {
        ProjectionStream {
            proj: self,
            acc: vec![0.0; self.spec.p_out],
            offset: 0,
        }
    }
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub struct ProjectionStream<'a> {
    proj: &'a SparseProjection,
    acc: Vec<f64>,
    offset: usize,
}

impl ProjectionStream<'_> {
    pub fn push<T: Real>(&mut self, chunk: &[T]) -> Result<()> {
        if self.offset + chunk.len() > self.proj.n_in() {
            return Err(Error::shape(
                "project",
                "input length",
                self.proj.n_in(),
                self.offset + chunk.len(),
            ));
        }
        let m = self.proj.magnitude;
        for (k, &x) in chunk.iter().enumerate() {
            if x == T::zero() {
                continue;
            }
            let x = x.to_f64().unwrap() * m;
            let acc = &mut self.acc;
            self.proj
                .for_each_nonzero(self.offset + k, |r, neg| if neg { acc[r] -= x } else { acc[r] += x });
        }
        self.offset += chunk.len();
        Ok(())
    }

    pub fn finish<T: Real>(self) -> Result<Vec<T>> {
        if self.offset != self.proj.n_in() {
            return Err(Error::shape("project", "input length", self.proj.n_in(), self.offset));
        }
        Ok(self.acc.into_iter().map(|v| T::from_f64(v).unwrap()).collect())
    }
}

/// Columns generated per GEMM block in [`project_rows`].
const COLUMN_BLOCK: usize = 2048;

/// Projects many inputs through several projections at once.
///
/// `rows[i]` holds input `i` restricted to the coordinates listed in
/// `support` (ascending, shared by all rows); coordinates outside `support`
/// are taken to be zero. All projections must have the same `n_in`. Returns
/// `out[k][i] = P_k x_i`. Each output depends only on its own input, never on
/// the other rows of the batch.
pub fn project_rows<T: Real>(
    projections: &[&SparseProjection],
    support: &[usize],
    rows: &[Vec<T>],
) -> Result<Vec<Vec<Vec<T>>>> {
    let Some(first) = projections.first() else {
        return Ok(Vec::new());
    };
    let n_in = first.n_in();
    if let Some(p) = projections.iter().find(|p| p.n_in() != n_in) {
        return Err(Error::shape("project_rows", "projection n_in", n_in, p.n_in()));
    }
    if support.windows(2).any(|w| w[0] >= w[1]) || support.last().is_some_and(|&j| j >= n_in) {
        return Err(Error::invalid("project_rows", "support must be ascending and inside n_in"));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != support.len()) {
        return Err(Error::shape("project_rows", "row length (support size)", support.len(), r.len()));
    }
    let n = rows.len();
    let widths: Vec<usize> = projections.iter().map(|p| p.p_out()).collect();
    let total: usize = widths.iter().sum();
    let mut out = vec![T::zero(); n * total];
    let mut xblock = vec![T::zero(); n * COLUMN_BLOCK];
    let mut mblock = vec![T::zero(); COLUMN_BLOCK * total];
    for (b, cols) in support.chunks(COLUMN_BLOCK).enumerate() {
        let c = cols.len();
        let base = b * COLUMN_BLOCK;
        for (i, r) in rows.iter().enumerate() {
            xblock[i * c..(i + 1) * c].copy_from_slice(&r[base..base + c]);
        }
        for (k, &j) in cols.iter().enumerate() {
            let mut at = k * total;
            for p in projections {
                p.fill_column(j, &mut mblock[at..at + p.p_out()]);
                at += p.p_out();
            }
        }
        gemm(
            T::one(),
            MatRef::new(&xblock[..n * c], n, c),
            MatRef::new(&mblock[..c * total], c, total),
            T::one(),
            &mut out,
        );
    }
    let mut result: Vec<Vec<Vec<T>>> = widths.iter().map(|_| Vec::with_capacity(n)).collect();
    for row in out.chunks(total) {
        let mut at = 0;
        for (k, &w) in widths.iter().enumerate() {
            result[k].push(row[at..at + w].to_vec());
            at += w;
        }
    }
    Ok(result)
}
