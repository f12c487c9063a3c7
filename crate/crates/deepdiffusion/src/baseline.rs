//! Classical manifold ranking on a full affinity graph.
//!
//! This is the small-N reference method the learned features are compared
//! against: a Gaussian affinity graph over the input features, symmetric
//! degree normalization, and ranking scores that balance a one-hot fitting
//! constraint against graph smoothness. Both the closed-form solve and the
//! iterative recursion are provided; they agree and serve as mutual oracles.

use crate::error::{DdError, Result};
use crate::matrix::{self, DenseMatrix};

/// Full-graph manifold ranking state.
#[derive(Debug, Clone)]
pub struct MRGraph {
    w: DenseMatrix,
    s_norm: DenseMatrix,
    alpha: f64,
}

impl MRGraph {
    pub fn len(&self) -> usize {
        self.w.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.w.rows() == 0
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// The raw affinity matrix (symmetric, zero diagonal).
    pub fn affinity(&self) -> &DenseMatrix {
        &self.w
    }

    /// The symmetrically normalized affinity `D^{-1/2} W D^{-1/2}`.
    pub fn normalized(&self) -> &DenseMatrix {
        &self.s_norm
    }
}

/// Builds the affinity graph: `w_ij = exp(-|x_i - x_j|^2 / (2 sigma^2))`
/// off-diagonal, zero diagonal, followed by symmetric normalization.
pub fn build_graph(features: &DenseMatrix, sigma: f64, alpha: f64) -> Result<MRGraph> {
    let n = features.rows();
    if n < 2 {
        return Err(DdError::InvalidArgument(format!(
            "manifold ranking needs at least 2 samples, got {n}"
        )));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(DdError::InvalidArgument(format!(
            "bandwidth sigma must be positive, got {sigma}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(DdError::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let mut w = DenseMatrix::zeros(n, n);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            let (ri, rj) = (features.row(i), features.row(j));
            for c in 0..features.cols() {
                let d = ri[c] - rj[c];
                d2 += d * d;
            }
            let v = (-d2 * inv).exp();
            w.set(i, j, v);
            w.set(j, i, v);
        }
    }
    let degrees: Vec<f64> = (0..n).map(|i| w.row(i).iter().sum()).collect();
    let mut s_norm = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = degrees[i] * degrees[j];
            if d > 0.0 {
                s_norm.set(i, j, w.get(i, j) / d.sqrt());
            }
        }
    }
    Ok(MRGraph { w, s_norm, alpha })
}

/// Median pairwise Euclidean distance, the default bandwidth.
pub fn median_pairwise_distance(features: &DenseMatrix) -> Result<f64> {
    let n = features.rows();
    if n < 2 {
        return Err(DdError::InvalidArgument(
            "need at least 2 samples for a pairwise median".into(),
        ));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for c in 0..features.cols() {
                let d = features.get(i, c) - features.get(j, c);
                d2 += d * d;
            }
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    Ok(median)
}

fn one_hot(g: &MRGraph, source_id: u64) -> Result<Vec<f64>> {
    let n = g.len();
    if source_id == 0 || source_id as usize > n {
        return Err(DdError::InvalidArgument(format!(
            "source ID {source_id} out of range 1..={n}"
        )));
    }
    let mut y = vec![0.0; n];
    y[source_id as usize - 1] = 1.0;
    Ok(y)
}

/// Closed-form ranking scores `r* = (1 - alpha)(I - alpha S)^{-1} y` for a
/// one-hot source, via partial-pivot Gaussian elimination.
pub fn solve_closed_form(g: &MRGraph, source_id: u64) -> Result<Vec<f64>> {
    let y = one_hot(g, source_id)?;
    let n = g.len();
    let mut a = DenseMatrix::identity(n);
    a.add_scaled(&g.s_norm, -g.alpha)?;
    let mut b: Vec<f64> = y.iter().map(|v| (1.0 - g.alpha) * v).collect();
    gaussian_solve(&mut a, &mut b)?;
    Ok(b)
}

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting;
/// `b` holds the solution on return.
fn gaussian_solve(a: &mut DenseMatrix, b: &mut [f64]) -> Result<()> {
    let n = a.rows();
    for col in 0..n {
        let mut pivot = col;
        let mut best = a.get(col, col).abs();
        for r in (col + 1)..n {
            let v = a.get(r, col).abs();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best < 1e-300 {
            return Err(DdError::Numerical(format!(
                "singular system: no usable pivot in column {col}"
            )));
        }
        if pivot != col {
            for c in 0..n {
                let tmp = a.get(col, c);
                a.set(col, c, a.get(pivot, c));
                a.set(pivot, c, tmp);
            }
            b.swap(col, pivot);
        }
        let diag = a.get(col, col);
        for r in (col + 1)..n {
            let factor = a.get(r, col) / diag;
            if factor == 0.0 {
                continue;
            }
            for c in col..n {
                let v = a.get(r, c) - factor * a.get(col, c);
                a.set(r, c, v);
            }
            b[r] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for c in (col + 1)..n {
            acc -= a.get(col, c) * b[c];
        }
        b[col] = acc / a.get(col, col);
    }
    Ok(())
}

/// Iterative ranking: `r <- alpha S r + (1 - alpha) y` from `r = y` until
/// the max-norm update falls below `tol`.
pub fn solve_iterative(
    g: &MRGraph,
    source_id: u64,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    let y = one_hot(g, source_id)?;
    solve_iterative_from(g, &y, source_id, tol, max_iters)
}

/// Iterative ranking from an explicit starting vector.
pub fn solve_iterative_from(
    g: &MRGraph,
    start: &[f64],
    source_id: u64,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    if tol <= 0.0 {
        return Err(DdError::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let y = one_hot(g, source_id)?;
    if start.len() != g.len() {
        return Err(DdError::ShapeMismatch {
            op: "solve_iterative",
            detail: format!("start length {} vs graph size {}", start.len(), g.len()),
        });
    }
    let n = g.len();
    let mut r = start.to_vec();
    let mut next = vec![0.0; n];
    for _iter in 0..max_iters {
        for i in 0..n {
            let row = g.s_norm.row(i);
            // s_norm is symmetric, so row i doubles as column i.
            let acc = matrix::dot(row, &r);
            next[i] = g.alpha * acc + (1.0 - g.alpha) * y[i];
        }
        let mut delta = 0.0_f64;
        for i in 0..n {
            delta = delta.max((next[i] - r[i]).abs());
        }
        std::mem::swap(&mut r, &mut next);
        if delta < tol {
            return Ok(r);
        }
    }
    let residual = {
        let mut worst = 0.0_f64;
        for i in 0..n {
            worst = worst.max((r[i] - next[i]).abs());
        }
        worst
    };
    Err(DdError::Numerical(format!(
        "manifold ranking did not converge in {max_iters} iterations \
         (last update {residual:.3e}, tol {tol:.3e})"
    )))
}
