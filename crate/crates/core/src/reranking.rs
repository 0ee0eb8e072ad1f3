//! k-reciprocal reranking of a joint query/gallery distance matrix.
//!
//! The steps, for an `M x M` matrix `d` where every item is both a query and
//! a gallery entry:
//!
//! 1. `rank[i]` lists all items by ascending `d[i][.]`, ties by index, so
//!    `rank[i][0]` is normally `i` itself.
//! 2. `R(i, k1)` keeps the items `j` among the first `k1 + 1` of `rank[i]`
//!    whose own first `k1 + 1` contain `i`.
//! 3. For each `j` in `R(i, k1)`, `R(j, h)` with `h = round(k1 / 2)` (ties to
//!    even) is merged into the expanded set when more than two thirds of it
//!    already lies in `R(i, k1)`.
//! 4. `V[i][j] = exp(-d[i][j])` on the expanded set, normalized to sum one.
//! 5. When `k2 > 1`, `V[i]` is replaced by the mean of `V[j]` over the first
//!    `k2` entries of `rank[i]`.
//! 6. `d_J(i, j) = 1 - s / (2 - s)` with `s = sum_l min(V[i][l], V[j][l])`.
//! 7. The result is `(1 - lambda) * d_J + lambda * d`.
//!
//! The input is used as given: no squaring or per-column rescaling.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankParams {
    /// Reciprocal neighborhood size.
    pub k1: usize,
    /// Query expansion size.
    pub k2: usize,
    /// Weight of the original distance.
    pub lambda: f64,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k1: 200,
            k2: 20,
            lambda: 0.3,
        }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 {
            return Err(Error::domain("rerank k1 and k2 must be positive"));
        }
        if self.k2 > self.k1 {
            return Err(Error::domain(format!("rerank k2 = {} exceeds k1 = {}", self.k2, self.k1)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::domain(format!("rerank lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }

    /// Shrink `k1` to `m - 1` and `k2` to `(m - 1) / 2` (at least one).
    pub fn clamped(&self, m: usize) -> Self {
        let k1 = self.k1.min(m.saturating_sub(1)).max(1);
        let k2 = self.k2.min((m.saturating_sub(1) / 2).max(1)).min(k1);
        Self {
            k1,
            k2,
            lambda: self.lambda,
        }
    }
}

const SYMMETRY_TOL: f64 = 1e-9;

fn check_matrix(d: ArrayView2<f64>) -> Result<()> {
    let (m, n) = d.dim();
    if m != n {
        return Err(Error::domain(format!("distance matrix is {m}x{n}, not square")));
    }
    if m < 2 {
        return Err(Error::domain("reranking needs at least two items"));
    }
    for i in 0..m {
        if d[[i, i]].abs() > SYMMETRY_TOL {
            return Err(Error::domain(format!("distance matrix diagonal entry {i} is {}", d[[i, i]])));
        }
        for j in 0..i {
            let (a, b) = (d[[i, j]], d[[j, i]]);
            if !a.is_finite() || !b.is_finite() || a < 0.0 {
                return Err(Error::domain(format!("distance ({i}, {j}) = {a} is not a finite non-negative value")));
            }
            if (a - b).abs() > SYMMETRY_TOL * (1.0 + a.abs()) {
                return Err(Error::domain(format!("distance matrix is asymmetric at ({i}, {j}): {a} vs {b}")));
            }
        }
    }
    Ok(())
}

fn argsort_rows(d: ArrayView2<f64>) -> Vec<Vec<usize>> {
    d.outer_iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
            idx
        })
        .collect()
}

/// Items among the first `k + 1` of `rank[i]` that have `i` among their own
/// first `k + 1`, in rank order.
fn reciprocal(rank: &[Vec<usize>], i: usize, k: usize) -> Vec<usize> {
    rank[i][..=k]
        .iter()
        .copied()
        .filter(|&j| rank[j][..=k].contains(&i))
        .collect()
}

fn weight_vector(d: ArrayView2<f64>, rank: &[Vec<usize>], i: usize, k1: usize) -> Vec<f64> {
    let m = rank.len();
    let base = reciprocal(rank, i, k1);
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;
    let mut member = vec![false; m];
    for &j in &base {
        member[j] = true;
    }
    let mut expanded = member.clone();
    for &j in &base {
        let cand = reciprocal(rank, j, half);
        let overlap = cand.iter().filter(|&&c| member[c]).count();
        if overlap as f64 > 2.0 / 3.0 * cand.len() as f64 {
            for c in cand {
                expanded[c] = true;
            }
        }
    }
    let mut v = vec![0.0; m];
    let mut total = 0.0;
    for j in 0..m {
        if expanded[j] {
            v[j] = (-d[[i, j]]).exp();
            total += v[j];
        }
    }
    for x in &mut v {
        *x /= total;
    }
    v
}

/// Rerank `distances` (symmetric, zero diagonal). Parameters larger than the
/// gallery allows are clamped with a warning.
pub fn k_reciprocal_rerank(distances: &Array2<f64>, params: &RerankParams) -> Result<Array2<f64>> {
    params.validate()?;
    let d = distances.view();
    check_matrix(d)?;
    let m = d.nrows();
    let p = params.clamped(m);
    if (p.k1, p.k2) != (params.k1, params.k2) {
        log::warn!(
            "rerank parameters k1 = {}, k2 = {} clamped to k1 = {}, k2 = {} for {m} items",
            params.k1,
            params.k2,
            p.k1,
            p.k2
        );
    }
    let rank = argsort_rows(d);
    let mut v: Vec<Vec<f64>> = (0..m).into_par_iter().map(|i| weight_vector(d, &rank, i, p.k1)).collect();
    if p.k2 != 1 {
        v = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut acc = vec![0.0; m];
                for &j in &rank[i][..p.k2] {
                    for (a, b) in acc.iter_mut().zip(&v[j]) {
                        *a += b;
                    }
                }
                acc.iter().map(|a| a / p.k2 as f64).collect()
            })
            .collect();
    }
    // Sparse columns: for each gallery coordinate, the items with weight there.
    let mut support: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (i, row) in v.iter().enumerate() {
        for (l, &x) in row.iter().enumerate() {
            if x != 0.0 {
                support[l].push(i);
            }
        }
    }
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut shared = vec![0.0; m];
            for (l, &x) in v[i].iter().enumerate() {
                if x != 0.0 {
                    for &j in &support[l] {
                        shared[j] += x.min(v[j][l]);
                    }
                }
            }
            (0..m)
                .map(|j| {
                    if i == j {
                        return 0.0;
                    }
                    let jac = 1.0 - shared[j] / (2.0 - shared[j]);
                    (1.0 - p.lambda) * jac + p.lambda * d[[i, j]]
                })
                .collect()
        })
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((m, m), flat).expect("square matrix"))
}
