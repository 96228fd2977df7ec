//! Comparison compressors: uniform random dropout, deterministic
//! top-sigma selection, and Top-S magnitude sparsification.

use serde::{Deserialize, Serialize};

use crate::dropout::{DropoutMask, DropoutPlan};
use crate::error::{Error, Result};
use crate::matrix::IntermediateMatrix;

/// Every column dropped with probability `1 - 1/R`.
pub fn rand_dropout_plan(d_bar: usize, r: f64) -> Result<DropoutPlan> {
    if !(r > 1.0) || d_bar == 0 {
        return Err(Error::InvalidArgument(format!("need R > 1 and D_bar > 0, got R = {r}")));
    }
    let keep = 1.0 / r;
    Ok(DropoutPlan {
        sigma: vec![1.0; d_bar],
        q: vec![keep; d_bar],
        probs: vec![1.0 - keep; d_bar],
        c_bias: 0.0,
        target_d: d_bar as f64 * keep,
    })
}

/// Keeps the `d` columns with the largest sigma; ties favour lower indices.
pub fn deterministic_drop(sigma: &[f64], d: usize) -> Result<DropoutMask> {
    if d > sigma.len() {
        return Err(Error::InvalidArgument(format!("D = {d} exceeds {} columns", sigma.len())));
    }
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let mut delta = vec![false; sigma.len()];
    for &j in &order[..d] {
        delta[j] = true;
    }
    Ok(DropoutMask::from_delta(delta))
}

/// Survivor count for deterministic selection: `D_bar / R` rounded.
pub fn deterministic_count(d_bar: usize, r: f64) -> usize {
    ((d_bar as f64 / r).round() as usize).clamp(1, d_bar)
}

fn stirling_correction(x: f64) -> f64 {
    let x2 = x * x;
    1.0 / (12.0 * x) - 1.0 / (360.0 * x * x2) + 1.0 / (1260.0 * x * x2 * x2)
}

/// `log2 C(n, k)`.
pub fn log2_binomial(n: u64, k: u64) -> Result<f64> {
    if k > n {
        return Err(Error::InvalidArgument(format!("C({n}, {k}) undefined")));
    }
    let k = k.min(n - k);
    if k < 1000 {
        let base = (n - k) as f64;
        let ln: f64 = (1..=k).map(|i| (1.0 + base / i as f64).ln()).sum();
        return Ok(ln / std::f64::consts::LN_2);
    }
    let (nf, kf) = (n as f64, k as f64);
    let rest = nf - kf;
    let main = kf * (nf / kf).ln() - rest * (-kf / nf).ln_1p();
    let half = 0.5 * (nf / (2.0 * std::f64::consts::PI * kf * rest)).ln();
    let corr = stirling_correction(nf) - stirling_correction(kf) - stirling_correction(rest);
    Ok((main + half + corr) / std::f64::consts::LN_2)
}

/// Bits to send `s` of `n` entries: 32-bit values plus the index set.
pub fn top_s_cost(n: u64, s: u64) -> f64 {
    32.0 * s as f64 + log2_binomial(n, s).unwrap_or(f64::INFINITY)
}

/// Largest `S <= n` whose cost fits `budget`.
pub fn top_s_level(n: u64, budget: f64) -> u64 {
    if top_s_cost(n, 0) > budget {
        return 0;
    }
    // The cost rises by at least one bit per step for n < 2^32.
    let (mut lo, mut hi) = (0u64, n);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if top_s_cost(n, mid) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Retained entries of a matrix, column-major flat indices ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub indices: Vec<u64>,
    pub values: Vec<f32>,
    /// Candidate pool the indices were chosen from.
    pub pool: u64,
}

impl SparseMatrix {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Accounting cost: values plus optimally coded index set.
    pub fn nominal_bits(&self) -> f64 {
        top_s_cost(self.pool, self.nnz() as u64)
    }

    /// Physical cost with a 32-bit count and fixed-width indices.
    pub fn packed_bits(&self) -> u64 {
        let width = 64 - (self.pool.max(2) - 1).leading_zeros() as u64;
        32 + self.nnz() as u64 * (32 + width)
    }

    pub fn densify(&self) -> IntermediateMatrix {
        let mut out = IntermediateMatrix::zeros(self.rows, self.cols);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            let (col, row) = ((i as usize) / self.rows, (i as usize) % self.rows);
            out.set(row, col, v as f64);
        }
        out
    }

    /// Flat indices of the retained entries.
    pub fn support(&self) -> &[u64] {
        &self.indices
    }
}

fn keep_largest(m: &IntermediateMatrix, pool: &[u64], s: usize) -> SparseMatrix {
    let flat = m.as_col_major();
    let mut chosen = pool.to_vec();
    if s < chosen.len() {
        chosen.sort_by(|&a, &b| flat[b as usize].abs().total_cmp(&flat[a as usize].abs()).then(a.cmp(&b)));
        chosen.truncate(s);
    }
    chosen.sort_unstable();
    SparseMatrix {
        rows: m.rows(),
        cols: m.cols(),
        values: chosen.iter().map(|&i| flat[i as usize] as f32).collect(),
        indices: chosen,
        pool: pool.len() as u64,
    }
}

/// Top-S sparsification of a `B x D_bar` matrix at `bits_per_entry`.
///
/// Without `support` the whole matrix is the pool (feature direction).
/// With `support` (gradient direction) entries outside it are dropped first
/// and the level is chosen within the support.
pub fn top_s_sparsify(m: &IntermediateMatrix, bits_per_entry: f64, support: Option<&[u64]>) -> Result<SparseMatrix> {
    if !(bits_per_entry > 0.0) {
        return Err(Error::InvalidArgument(format!("bits per entry {bits_per_entry}")));
    }
    let n = (m.rows() * m.cols()) as u64;
    let budget = n as f64 * bits_per_entry;
    let pool: Vec<u64> = match support {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&i| i >= n) {
                return Err(Error::Shape(format!("support index {bad} outside {n} entries")));
            }
            s.to_vec()
        }
        None => (0..n).collect(),
    };
    let s = top_s_level(pool.len() as u64, budget) as usize;
    Ok(keep_largest(m, &pool, s))
}
