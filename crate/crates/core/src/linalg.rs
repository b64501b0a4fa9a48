//! Sparse storage and a restarted GMRES for the global systems.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearSolveError {
    #[error("GMRES did not converge: relative residual {residual:e} after {iterations} iterations")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("singular diagonal block at row {0}")]
    SingularBlock(usize),
}

/// Compressed sparse row matrix with a fixed pattern.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Pattern from per-row column lists (duplicates allowed).
    pub fn from_pattern(n: usize, mut rows: Vec<Vec<usize>>) -> Self {
        assert_eq!(rows.len(), n);
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        CsrMatrix { n, row_ptr, col_idx, values: vec![0.0; nnz] }
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    fn position(&self, row: usize, col: usize) -> usize {
        let cols = &self.col_idx[self.row_ptr[row]..self.row_ptr[row + 1]];
        match cols.binary_search(&col) {
            Ok(k) => self.row_ptr[row] + k,
            Err(_) => panic!("entry ({row}, {col}) is outside the sparsity pattern"),
        }
    }

    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        let k = self.position(row, col);
        self.values[k] += value;
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let cols = &self.col_idx[self.row_ptr[row]..self.row_ptr[row + 1]];
        cols.binary_search(&col).map(|k| self.values[self.row_ptr[row] + k]).unwrap_or(0.0)
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for r in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = s;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                d[(r, self.col_idx[k])] += self.values[k];
            }
        }
        d
    }
}

/// Inverse diagonal blocks of size `bs`.
#[derive(Debug, Clone)]
pub struct BlockJacobi {
    bs: usize,
    inv: Vec<DMatrix<f64>>,
}

impl BlockJacobi {
    pub fn new(a: &CsrMatrix, bs: usize) -> Result<Self, LinearSolveError> {
        assert_eq!(a.n % bs, 0);
        let inv = (0..a.n / bs)
            .map(|b| {
                let blk = DMatrix::from_fn(bs, bs, |r, c| a.get(b * bs + r, b * bs + c));
                blk.try_inverse().ok_or(LinearSolveError::SingularBlock(b * bs))
            })
            .collect::<Result<_, _>>()?;
        Ok(BlockJacobi { bs, inv })
    }

    pub fn from_blocks(bs: usize, inv: Vec<DMatrix<f64>>) -> Self {
        BlockJacobi { bs, inv }
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        let bs = self.bs;
        for (b, m) in self.inv.iter().enumerate() {
            for r in 0..bs {
                y[b * bs + r] = (0..bs).map(|c| m[(r, c)] * x[b * bs + c]).sum();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresInfo {
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresSettings {
    pub restart: usize,
    pub rtol: f64,
    pub max_iterations: usize,
}

impl Default for GmresSettings {
    fn default() -> Self {
        GmresSettings { restart: 30, rtol: 1e-8, max_iterations: 500 }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Right-preconditioned restarted GMRES for `A x = b`; `x` holds the initial guess.
pub fn gmres(
    matvec: impl Fn(&[f64], &mut [f64]),
    precond: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    settings: GmresSettings,
) -> Result<GmresInfo, LinearSolveError> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(GmresInfo { iterations: 0, residual: 0.0 });
    }
    let m = settings.restart.max(1);
    let mut total = 0;
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    loop {
        matvec(x, &mut r);
        for i in 0..n {
            r[i] = b[i] - r[i];
        }
        let beta = norm(&r);
        if beta <= settings.rtol * bnorm {
            return Ok(GmresInfo { iterations: total, residual: beta / bnorm });
        }
        if total >= settings.max_iterations {
            return Err(LinearSolveError::NotConverged { iterations: total, residual: beta / bnorm });
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|x| x / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            precond(&v[k], &mut z);
            matvec(&z, &mut w);
            for j in 0..=k {
                let hjk: f64 = w.iter().zip(&v[j]).map(|(a, b)| a * b).sum();
                h[j][k] = hjk;
                for i in 0..n {
                    w[i] -= hjk * v[j][i];
                }
            }
            let hn = norm(&w);
            h[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = h[k][k].hypot(h[k + 1][k]);
            if denom == 0.0 {
                cs[k] = 1.0;
                sn[k] = 0.0;
            } else {
                cs[k] = h[k][k] / denom;
                sn[k] = h[k + 1][k] / denom;
            }
            h[k][k] = cs[k] * h[k][k] + sn[k] * h[k + 1][k];
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            total += 1;
            k_used = k + 1;
            if g[k + 1].abs() <= settings.rtol * bnorm || hn == 0.0 || total >= settings.max_iterations {
                break;
            }
            v.push(w.iter().map(|x| x / hn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = (i + 1..k_used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        let mut update = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                update[i] += yj * v[j][i];
            }
        }
        precond(&update, &mut z);
        for i in 0..n {
            x[i] += z[i];
        }
    }
}
