//! Pairwise instrument weights `kappa(Z_j - Z_l)`.
//!
//! The weight is the characteristic function of a centred Gaussian measure,
//! `exp(-sum_s (u_s / sigma_s)^2 / 2)`. Matrices up to [`DENSE_LIMIT`] rows are
//! materialized; larger ones recompute rows on demand.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;

/// Largest `n` for which [`kernel_matrix`] stores all `n^2` weights.
pub const DENSE_LIMIT: usize = 20_000;

/// Rows handled per parallel task.
const ROW_BLOCK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Measure {
    /// Gaussian measure with per-dimension scales; an empty vector means 1 everywhere.
    GaussianCdf { scales: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub measure: Measure,
    pub standardize_instruments: bool,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self { measure: Measure::GaussianCdf { scales: Vec::new() }, standardize_instruments: true }
    }
}

impl KernelSpec {
    /// Unit scales with the given standardization flag.
    pub fn unit(standardize_instruments: bool) -> Self {
        Self { measure: Measure::GaussianCdf { scales: Vec::new() }, standardize_instruments }
    }

    pub fn gaussian(scales: Vec<f64>, standardize_instruments: bool) -> Self {
        Self { measure: Measure::GaussianCdf { scales }, standardize_instruments }
    }

    fn scale(&self, dim: usize) -> f64 {
        match &self.measure {
            Measure::GaussianCdf { scales } => scales.get(dim).copied().unwrap_or(1.0),
        }
    }

    fn check(&self, q: usize) -> Result<()> {
        let Measure::GaussianCdf { scales } = &self.measure;
        if !scales.is_empty() && scales.len() != q {
            return Err(Error::Config(format!("{} kernel scales given for {q} instruments", scales.len())));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("kernel scales must be finite and positive".into()));
        }
        Ok(())
    }
}

/// Weight for a single difference vector.
pub fn kappa(u: &[f64], spec: &KernelSpec) -> f64 {
    let mut q = 0.0;
    for (s, &us) in u.iter().enumerate() {
        let r = us / spec.scale(s);
        q += r * r;
    }
    (-0.5 * q).exp()
}

#[derive(Debug, Clone)]
enum Storage {
    Dense(Vec<f64>),
    /// Scaled instruments, row-major `n x q`.
    Streamed { z: Vec<f64>, q: usize },
}

/// Symmetric `n x n` weight matrix with unit diagonal.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    n: usize,
    storage: Storage,
    spec: KernelSpec,
}

/// Instruments after optional standardization and division by the measure scales, row-major.
fn scaled_instruments(z: &DMatrix<f64>, spec: &KernelSpec) -> Result<Vec<f64>> {
    let (n, q) = z.shape();
    spec.check(q)?;
    let mut out = vec![0.0; n * q];
    for s in 0..q {
        let col = z.column(s);
        if let Some(i) = col.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("instrument column {s} has a non-finite value at row {i}")));
        }
        let (centre, spread) = if spec.standardize_instruments {
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
            if var <= 0.0 {
                return Err(Error::ZeroVariance(format!("{s}")));
            }
            (m, var.sqrt())
        } else {
            (0.0, 1.0)
        };
        let scale = spread * spec.scale(s);
        for i in 0..n {
            out[i * q + s] = (col[i] - centre) / scale;
        }
    }
    Ok(out)
}

#[inline]
fn row_weight(zs: &[f64], q: usize, j: usize, l: usize) -> f64 {
    let a = &zs[j * q..(j + 1) * q];
    let b = &zs[l * q..(l + 1) * q];
    let mut d = 0.0;
    for s in 0..q {
        let r = a[s] - b[s];
        d += r * r;
    }
    (-0.5 * d).exp()
}

fn fill_row(zs: &[f64], q: usize, j: usize, out: &mut [f64]) {
    for (l, v) in out.iter_mut().enumerate() {
        *v = row_weight(zs, q, j, l);
    }
}

/// Builds the weight matrix, materialized when `n <= DENSE_LIMIT`.
pub fn kernel_matrix(z: &DMatrix<f64>, spec: &KernelSpec) -> Result<KernelMatrix> {
    if z.nrows() <= DENSE_LIMIT {
        KernelMatrix::dense(z, spec)
    } else {
        KernelMatrix::streamed(z, spec)
    }
}

impl KernelMatrix {
    pub fn dense(z: &DMatrix<f64>, spec: &KernelSpec) -> Result<Self> {
        let n = z.nrows();
        let q = z.ncols();
        let zs = scaled_instruments(z, spec)?;
        let mut values = vec![0.0; n * n];
        values.par_chunks_mut(n * ROW_BLOCK).enumerate().for_each(|(b, chunk)| {
            for (r, row) in chunk.chunks_mut(n).enumerate() {
                fill_row(&zs, q, b * ROW_BLOCK + r, row);
            }
        });
        Ok(Self { n, storage: Storage::Dense(values), spec: spec.clone() })
    }

    /// Row-on-demand representation with `O(n q)` memory.
    pub fn streamed(z: &DMatrix<f64>, spec: &KernelSpec) -> Result<Self> {
        let q = z.ncols();
        let zs = scaled_instruments(z, spec)?;
        Ok(Self { n: z.nrows(), storage: Storage::Streamed { z: zs, q }, spec: spec.clone() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.storage, Storage::Dense(_))
    }

    pub fn get(&self, j: usize, l: usize) -> f64 {
        match &self.storage {
            Storage::Dense(v) => v[j * self.n + l],
            Storage::Streamed { z, q } => row_weight(z, *q, j, l),
        }
    }

    /// Calls `f` with row `j`; `buf` (length `n`) is scratch space for streamed storage.
    pub fn with_row<R>(&self, j: usize, buf: &mut [f64], f: impl FnOnce(&[f64]) -> R) -> R {
        match &self.storage {
            Storage::Dense(v) => f(&v[j * self.n..(j + 1) * self.n]),
            Storage::Streamed { z, q } => {
                fill_row(z, *q, j, buf);
                f(buf)
            }
        }
    }

    /// Dense copy of the full matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let mut buf = vec![0.0; self.n];
        let mut m = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            self.with_row(j, &mut buf, |row| {
                for (l, &v) in row.iter().enumerate() {
                    m[(j, l)] = v;
                }
            });
        }
        m
    }
}

/// Off-diagonal weighted row sums `u_l = sum_{m != l} kappa_{l,m} A_m` and
/// `s_l = sum_{m != l} kappa_{l,m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSums {
    /// `n x p`.
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
}

/// Computes [`PairSums`] for the columns of `a`, compensated and in fixed order.
pub fn pair_sums(k: &KernelMatrix, a: &DMatrix<f64>) -> PairSums {
    let n = k.n();
    let p = a.ncols();
    assert_eq!(a.nrows(), n, "pair_sums: row mismatch");
    let cols: Vec<&[f64]> = (0..p).map(|c| &a.as_slice()[c * n..(c + 1) * n]).collect();
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let lo = b * ROW_BLOCK;
            let hi = (lo + ROW_BLOCK).min(n);
            let mut buf = vec![0.0; if k.is_dense() { 0 } else { n }];
            let mut u = vec![0.0; (hi - lo) * p];
            let mut s = vec![0.0; hi - lo];
            for l in lo..hi {
                k.with_row(l, &mut buf, |row| {
                    let mut acc_s = CompensatedSum::new();
                    let mut acc_u = vec![CompensatedSum::new(); p];
                    for (m, &w) in row.iter().enumerate() {
                        if m == l {
                            continue;
                        }
                        acc_s.add(w);
                        for c in 0..p {
                            acc_u[c].add(w * cols[c][m]);
                        }
                    }
                    s[l - lo] = acc_s.value();
                    for c in 0..p {
                        u[(l - lo) * p + c] = acc_u[c].value();
                    }
                });
            }
            (u, s)
        })
        .collect();
    let mut u = DMatrix::zeros(n, p);
    let mut s = DVector::zeros(n);
    for (b, (bu, bs)) in blocks.into_iter().enumerate() {
        let lo = b * ROW_BLOCK;
        for (r, sv) in bs.into_iter().enumerate() {
            s[lo + r] = sv;
            for c in 0..p {
                u[(lo + r, c)] = bu[r * p + c];
            }
        }
    }
    PairSums { u, s }
}
