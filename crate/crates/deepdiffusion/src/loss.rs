//! The latent manifold ranking loss: forward value and exact gradients with
//! respect to the batch features and the manifold matrix.
//!
//! The loss couples a mini-batch of `B` encoder outputs ("extrinsic"
//! features) to all `N` learnable intrinsic features. Each feature induces a
//! ranking vector, the softmax of its inner products with every intrinsic
//! feature. The fitting term cross-entropies each batch ranking vector
//! against a one-hot at its own sample ID, separating samples; the smoothing
//! term pulls together ranking vectors of cosine neighbors, weighted by
//! their raw inner products, preserving the local manifold structure.
//!
//! Two code paths compute the same quantities. The compositional operations
//! ([`ranking_vector`], [`fitting_term`], [`smoothing_weights`],
//! [`js_divergence`], [`smoothing_term`]) are simple and serve as oracles.
//! [`lmr_loss_and_grads`] is the fused training path: it evaluates value and
//! gradients in one pass, parallelizing only across independent rows so the
//! result is bit-reproducible regardless of thread count.

use crate::error::{DdError, Result};
use crate::fastlog::ln_series;
use crate::manifold::ManifoldState;
use crate::matrix::{self, matmul_par, softmax_in_place, top_k_indices, DenseMatrix};
use rayon::prelude::*;

// Temporary profiling counters (nanoseconds), reported by dump_timing().
pub static T_LOGITS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
pub static T_SOFTMAX: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
pub static T_SUPPORT: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
pub static T_Q: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
pub static T_PHASE_A: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
pub static T_PHASE_B: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
pub static T_GRADMM: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);
macro_rules! phase {
    ($counter:expr, $body:expr) => {{
        let __t = std::time::Instant::now();
        let __r = $body;
        $counter.fetch_add(__t.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
        __r
    }};
}
pub fn dump_timing(label: &str) {
    use std::sync::atomic::Ordering::Relaxed;
    eprintln!(
        "[timing {label}] logits={:.2}s softmax={:.2}s support={:.2}s q={:.2}s phaseA={:.2}s phaseB={:.2}s gradmm={:.2}s",
        T_LOGITS.load(Relaxed) as f64 / 1e9,
        T_SOFTMAX.load(Relaxed) as f64 / 1e9,
        T_SUPPORT.load(Relaxed) as f64 / 1e9,
        T_Q.load(Relaxed) as f64 / 1e9,
        T_PHASE_A.load(Relaxed) as f64 / 1e9,
        T_PHASE_B.load(Relaxed) as f64 / 1e9,
        T_GRADMM.load(Relaxed) as f64 / 1e9,
    );
}

/// Floor applied inside every cross-entropy / divergence logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// An N-dimensional probability vector of ranking scores.
#[derive(Debug, Clone)]
pub struct RankingVector {
    scores: Vec<f64>,
}

impl RankingVector {
    /// Validates a probability vector: nonnegative entries summing to 1
    /// within 1e-9.
    pub fn try_new(scores: Vec<f64>) -> Result<Self> {
        if scores.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(DdError::InvalidArgument(
                "ranking scores must be finite and nonnegative".into(),
            ));
        }
        let sum: f64 = scores.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DdError::InvalidArgument(format!(
                "ranking scores sum to {sum}, expected 1"
            )));
        }
        Ok(RankingVector { scores })
    }

    fn from_logits(mut logits: Vec<f64>) -> Self {
        softmax_in_place(&mut logits);
        RankingVector { scores: logits }
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// One-hot diffusion source: the target distribution of the fitting term.
#[derive(Debug, Clone, Copy)]
pub struct OneHotSource {
    id: u64,
    len: usize,
}

impl OneHotSource {
    pub fn new(id: u64, len: usize) -> Result<Self> {
        if id == 0 || id as usize > len {
            return Err(DdError::InvalidArgument(format!(
                "sample ID {id} out of range 1..={len}"
            )));
        }
        Ok(OneHotSource { id, len })
    }

    /// Zero-based position of the active entry.
    pub fn index(&self) -> usize {
        self.id as usize - 1
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        v[self.index()] = 1.0;
        v
    }
}

/// Per-batch-row sparse neighbor weights of the smoothing term: row `b`
/// holds `(manifold row, f_b . m_n)` over the cosine k-nearest intrinsic
/// features of `f_b`.
#[derive(Debug, Clone)]
pub struct SmoothingWeights {
    rows: Vec<Vec<(usize, f64)>>,
}

impl SmoothingWeights {
    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn row(&self, b: usize) -> &[(usize, f64)] {
        &self.rows[b]
    }
}

/// Additive decomposition of the loss value.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub fit: f64,
    pub smooth: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(fit: f64, smooth: f64, lambda: f64) -> Self {
        LossBreakdown {
            fit,
            smooth,
            lambda,
            total: fit + lambda * smooth,
        }
    }
}

/// Hyper-parameters of the loss.
#[derive(Debug, Clone, Copy)]
pub struct LossParams {
    /// Balance between fitting and smoothing terms.
    pub lambda: f64,
    /// Neighborhood size of the smoothing term.
    pub k: usize,
    /// Zero out negative neighbor weights (ablation switch; default off
    /// keeps the raw signed inner products).
    pub clamp_weights: bool,
    /// Drop the query's own intrinsic row from its neighbor set (default
    /// off: the
    /// own row is eligible).
    pub exclude_self: bool,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            lambda: 1.0,
            k: 20,
            clamp_weights: false,
            exclude_self: false,
        }
    }
}

/// Softmax of `f . M^T` at temperature 1.
pub fn ranking_vector(f: &[f64], state: &ManifoldState) -> Result<RankingVector> {
    if f.len() != state.latent_dim() {
        return Err(DdError::ShapeMismatch {
            op: "ranking_vector",
            detail: format!(
                "feature dim {} vs intrinsic dim {}",
                f.len(),
                state.latent_dim()
            ),
        });
    }
    let logits: Vec<f64> = (0..state.len())
        .map(|n| matrix::dot(f, state.row(n)))
        .collect();
    Ok(RankingVector::from_logits(logits))
}

/// Ranking vector of intrinsic row `n` against the whole manifold
/// (including itself).
pub fn intrinsic_ranking_vector(state: &ManifoldState, n: usize) -> RankingVector {
    let logits: Vec<f64> = (0..state.len())
        .map(|j| matrix::dot(state.row(n), state.row(j)))
        .collect();
    RankingVector::from_logits(logits)
}

/// Cross-entropy of each batch ranking vector against its one-hot source:
/// `sum_b -ln r_b[ID_b]`, natural log, floored at [`LOG_FLOOR`].
pub fn fitting_term(batch: &DenseMatrix, ids: &[u64], state: &ManifoldState) -> Result<f64> {
    if ids.len() != batch.rows() {
        return Err(DdError::ShapeMismatch {
            op: "fitting_term",
            detail: format!("{} ids for {} batch rows", ids.len(), batch.rows()),
        });
    }
    let mut total = 0.0;
    for b in 0..batch.rows() {
        let source = OneHotSource::new(ids[b], state.len())?;
        let r = ranking_vector(batch.row(b), state)?;
        total += -(r.scores[source.index()].max(LOG_FLOOR)).ln();
    }
    Ok(total)
}

/// The sparse neighbor weights of the smoothing term: support by cosine
/// k-nearest intrinsic features, values the raw inner products.
pub fn smoothing_weights(
    batch: &DenseMatrix,
    state: &ManifoldState,
    k: usize,
) -> Result<SmoothingWeights> {
    if batch.cols() != state.latent_dim() {
        return Err(DdError::ShapeMismatch {
            op: "smoothing_weights",
            detail: format!(
                "feature dim {} vs intrinsic dim {}",
                batch.cols(),
                state.latent_dim()
            ),
        });
    }
    let mut rows = Vec::with_capacity(batch.rows());
    for b in 0..batch.rows() {
        let f = batch.row(b);
        let support = state.knn_cosine(f, k)?;
        rows.push(
            support
                .into_iter()
                .map(|n| (n, matrix::dot(f, state.row(n))))
                .collect(),
        );
    }
    Ok(SmoothingWeights { rows })
}

/// Jensen-Shannon divergence between two ranking vectors: natural log,
/// floored at [`LOG_FLOOR`]; values lie in `[0, ln 2]`.
pub fn js_divergence(p: &RankingVector, q: &RankingVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(DdError::ShapeMismatch {
            op: "js_divergence",
            detail: format!("lengths {} vs {}", p.len(), q.len()),
        });
    }
    let mut half_kl_p = 0.0;
    let mut half_kl_q = 0.0;
    for (&pi, &qi) in p.scores.iter().zip(&q.scores) {
        let mi = 0.5 * (pi + qi);
        let ln_m = mi.max(LOG_FLOOR).ln();
        half_kl_p += pi * (pi.max(LOG_FLOOR).ln() - ln_m);
        half_kl_q += qi * (qi.max(LOG_FLOOR).ln() - ln_m);
    }
    Ok(0.5 * half_kl_p + 0.5 * half_kl_q)
}

/// The smoothing term `sum_b sum_n w_bn D(r_b || r_n)`, composed from the
/// public sub-operations; intrinsic ranking vectors are computed only for
/// rows in the batch's neighbor supports.
pub fn smoothing_term(batch: &DenseMatrix, state: &ManifoldState, k: usize) -> Result<f64> {
    let weights = smoothing_weights(batch, state, k)?;
    let mut total = 0.0;
    for b in 0..batch.rows() {
        let r_b = ranking_vector(batch.row(b), state)?;
        for &(n, w) in weights.row(b) {
            let r_n = intrinsic_ranking_vector(state, n);
            total += w * js_divergence(&r_b, &r_n)?;
        }
    }
    Ok(total)
}

/// Full loss value and exact gradients, selecting the neighbor supports
/// from the current iterate. See [`lmr_loss_and_grads_frozen`] for the
/// gradient semantics.
pub fn lmr_loss_and_grads(
    batch: &DenseMatrix,
    ids: &[u64],
    state: &ManifoldState,
    params: &LossParams,
) -> Result<(LossBreakdown, DenseMatrix, DenseMatrix)> {
    let supports = select_supports(batch, state, params)?;
    lmr_loss_and_grads_frozen(batch, ids, state, params, &supports)
}

/// Cosine k-nearest supports for every batch row under the given params.
pub fn select_supports(
    batch: &DenseMatrix,
    state: &ManifoldState,
    params: &LossParams,
) -> Result<Vec<Vec<usize>>> {
    if params.lambda == 0.0 {
        return Ok(vec![Vec::new(); batch.rows()]);
    }
    let n = state.len();
    let k = params.k;
    if k == 0 || k > n {
        return Err(DdError::InvalidArgument(format!(
            "neighborhood size {k} out of range 1..={n}"
        )));
    }
    if params.exclude_self && k > n - 1 {
        return Err(DdError::InvalidArgument(format!(
            "neighborhood size {k} with self-exclusion needs k <= N-1 = {}",
            n - 1
        )));
    }
    if params.exclude_self {
        // Exclusion needs to know which manifold row is "self", which is
        // carried by the sample IDs.
        return Err(DdError::InvalidArgument(
            "self-exclusion requires sample ids; use select_supports_with_ids".into(),
        ));
    }
    let mut supports = Vec::with_capacity(batch.rows());
    for b in 0..batch.rows() {
        let scores = state.cosine_scores(batch.row(b))?;
        supports.push(top_k_indices(&scores, k)?);
    }
    Ok(supports)
}

/// Like [`select_supports`] but able to exclude each row's own intrinsic
/// feature, identified by the row's sample ID.
pub fn select_supports_with_ids(
    batch: &DenseMatrix,
    ids: &[u64],
    state: &ManifoldState,
    params: &LossParams,
) -> Result<Vec<Vec<usize>>> {
    if !params.exclude_self {
        return select_supports(batch, state, params);
    }
    let n = state.len();
    let k = params.k;
    if params.lambda == 0.0 {
        return Ok(vec![Vec::new(); batch.rows()]);
    }
    if k == 0 || k > n - 1 {
        return Err(DdError::InvalidArgument(format!(
            "neighborhood size {k} with self-exclusion needs 1 <= k <= N-1 = {}",
            n - 1
        )));
    }
    let mut supports = Vec::with_capacity(batch.rows());
    for b in 0..batch.rows() {
        let own = OneHotSource::new(ids[b], n)?.index();
        let mut scores = state.cosine_scores(batch.row(b))?;
        scores[own] = f64::NEG_INFINITY;
        supports.push(top_k_indices(&scores, k)?);
    }
    Ok(supports)
}

/// Loss value and exact gradients with the neighbor supports held fixed.
///
/// The support sets are piecewise-constant in the parameters, so they are
/// treated as constants of the current iterate; the weight values
/// `w_bn = f_b . m_n` and both softmax arguments are fully differentiated.
/// The gradient with respect to the manifold is dense: the fitting-term
/// softmax touches every row.
pub fn lmr_loss_and_grads_frozen(
    batch: &DenseMatrix,
    ids: &[u64],
    state: &ManifoldState,
    params: &LossParams,
    supports: &[Vec<usize>],
) -> Result<(LossBreakdown, DenseMatrix, DenseMatrix)> {
    let (b_rows, p_dim) = (batch.rows(), batch.cols());
    let n = state.len();
    if p_dim != state.latent_dim() {
        return Err(DdError::ShapeMismatch {
            op: "lmr_loss",
            detail: format!("feature dim {p_dim} vs intrinsic dim {}", state.latent_dim()),
        });
    }
    if ids.len() != b_rows || supports.len() != b_rows {
        return Err(DdError::ShapeMismatch {
            op: "lmr_loss",
            detail: format!(
                "{} ids / {} supports for {} batch rows",
                ids.len(),
                supports.len(),
                b_rows
            ),
        });
    }
    if params.lambda < 0.0 {
        return Err(DdError::InvalidArgument(format!(
            "lambda must be nonnegative, got {}",
            params.lambda
        )));
    }
    let target: Vec<usize> = ids
        .iter()
        .map(|&id| OneHotSource::new(id, n).map(|s| s.index()))
        .collect::<Result<_>>()?;

    let m_t = state.matrix().transpose();
    // Logits double as the raw neighbor weights.
    let logits = phase!(T_LOGITS, matmul_par(batch, &m_t)?);
    let mut probs = logits.clone();
    let mut ln_probs = DenseMatrix::zeros(b_rows, n);
    phase!(T_SOFTMAX, probs
        .data_mut()
        .par_chunks_mut(n)
        .zip(ln_probs.data_mut().par_chunks_mut(n))
        .for_each(|(p, lp)| {
            softmax_in_place(p);
            for j in 0..p.len() {
                lp[j] = ln_series(p[j].max(LOG_FLOOR));
            }
        }));

    let mut fit = 0.0;
    for b in 0..b_rows {
        fit -= ln_probs.get(b, target[b]);
    }

    // dL/d logits accumulates the fitting term and both smoothing paths
    // that touch the batch-side softmax argument.
    let mut d_logits = probs.clone();
    for b in 0..b_rows {
        let v = d_logits.get(b, target[b]) - 1.0;
        d_logits.set(b, target[b], v);
    }

    let lambda = params.lambda;
    let smoothing_active = lambda > 0.0 && supports.iter().any(|s| !s.is_empty());

    let mut smooth = 0.0;
    let mut grad_m;
    if smoothing_active {
        // Resolved (row, weight) pairs, after optional clamping. Clamped-off
        // pairs contribute nothing to value or gradient and are dropped.
        let __sup_t = std::time::Instant::now();
        let pairs: Vec<Vec<(usize, f64)>> = (0..b_rows)
            .map(|b| {
                supports[b]
                    .iter()
                    .map(|&nn| (nn, logits.get(b, nn)))
                    .filter(|&(_, w)| !(params.clamp_weights && w < 0.0))
                    .collect()
            })
            .collect();

        // Union of all supports, ascending; `slot_of[n]` maps into it.
        let mut member = vec![false; n];
        for row in &pairs {
            for &(nn, _) in row {
                member[nn] = true;
            }
        }
        let union: Vec<usize> = (0..n).filter(|&i| member[i]).collect();
        let mut slot_of = vec![usize::MAX; n];
        for (slot, &nn) in union.iter().enumerate() {
            slot_of[nn] = slot;
        }

        // Intrinsic ranking vectors for every selected row, fresh from the
        // current manifold.
        T_SUPPORT.fetch_add(__sup_t.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
        let m_union = gather_rows(state.matrix(), &union);
        let mut q = phase!(T_Q, matmul_par(&m_union, &m_t)?);
        let mut ln_q = DenseMatrix::zeros(union.len(), n);
        phase!(T_Q, q.data_mut()
            .par_chunks_mut(n)
            .zip(ln_q.data_mut().par_chunks_mut(n))
            .for_each(|(qr, lq)| {
                softmax_in_place(qr);
                for j in 0..qr.len() {
                    lq[j] = ln_series(qr[j].max(LOG_FLOOR));
                }
            }));

        // Phase A: batch-side accumulation. Each batch row owns its slice
        // of d_logits, so rows parallelize freely; within a row, pairs are
        // processed in stored order and sums run left to right.
        let mut smooth_per_row = vec![0.0; b_rows];
        let __pa_t = std::time::Instant::now();
        d_logits
            .data_mut()
            .par_chunks_mut(n)
            .zip(smooth_per_row.par_iter_mut())
            .enumerate()
            .for_each_init(
                || vec![0.0; n],
                |scratch, (b, (da, smooth_b))| {
                    let p_row = probs.row(b);
                    let lnp_row = ln_probs.row(b);
                    for &(nn, w) in &pairs[b] {
                        let slot = slot_of[nn];
                        let q_row = q.row(slot);
                        let lnq_row = ln_q.row(slot);
                        let mut su = 0.0;
                        let mut sv = 0.0;
                        for j in 0..n {
                            let mix = 0.5 * (p_row[j] + q_row[j]);
                            let ln_mix = ln_series(mix.max(LOG_FLOOR));
                            let u = lnp_row[j] - ln_mix;
                            su += p_row[j] * u;
                            sv += q_row[j] * (lnq_row[j] - ln_mix);
                            scratch[j] = u;
                        }
                        let js = 0.5 * (su + sv);
                        *smooth_b += w * js;
                        let coef = 0.5 * lambda * w;
                        for j in 0..n {
                            da[j] += p_row[j] * coef * (scratch[j] - su);
                        }
                        // d(w * js)/dw flows straight into the logit.
                        da[nn] += lambda * js;
                    }
                },
            );
        T_PHASE_A.fetch_add(__pa_t.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
        for s in &smooth_per_row {
            smooth += s;
        }

        // Phase B: manifold-side accumulation. Each selected intrinsic row
        // owns one row of d_q; contributions from the batch rows that chose
        // it are folded in ascending batch order.
        let mut rev: Vec<Vec<(usize, f64)>> = vec![Vec::new(); union.len()];
        for (b, row) in pairs.iter().enumerate() {
            for &(nn, w) in row {
                rev[slot_of[nn]].push((b, w));
            }
        }
        let __pb_t = std::time::Instant::now();
        let mut d_q = DenseMatrix::zeros(union.len(), n);
        d_q.data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each_init(
                || vec![0.0; n],
                |scratch, (slot, dq_row)| {
                    let q_row = q.row(slot);
                    let lnq_row = ln_q.row(slot);
                    for &(b, w) in &rev[slot] {
                        let p_row = probs.row(b);
                        let mut sv = 0.0;
                        for j in 0..n {
                            let mix = 0.5 * (p_row[j] + q_row[j]);
                            let ln_mix = ln_series(mix.max(LOG_FLOOR));
                            let v = lnq_row[j] - ln_mix;
                            sv += q_row[j] * v;
                            scratch[j] = v;
                        }
                        let coef = 0.5 * lambda * w;
                        for j in 0..n {
                            dq_row[j] += q_row[j] * coef * (scratch[j] - sv);
                        }
                    }
                },
            );

        T_PHASE_B.fetch_add(__pb_t.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
        // Chain rule through both occurrences of M in q = softmax(m_u M^T):
        // every column j of d_q feeds row j of M, and row u feeds m_u.
        let __g_t = std::time::Instant::now();
        let d_q_t = d_q.transpose();
        grad_m = matmul_par(&d_logits.transpose(), batch)?;
        let second_factor = matmul_par(&d_q_t, &m_union)?;
        grad_m.add_scaled(&second_factor, 1.0)?;
        let first_factor = matmul_par(&d_q, state.matrix())?;
        for (slot, &nn) in union.iter().enumerate() {
            let src = first_factor.row(slot);
            let dst = grad_m.row_mut(nn);
            for j in 0..p_dim {
                dst[j] += src[j];
            }
        }
        T_GRADMM.fetch_add(__g_t.elapsed().as_nanos() as u64, std::sync::atomic::Ordering::Relaxed);
    } else {
        grad_m = matmul_par(&d_logits.transpose(), batch)?;
    }

    let grad_f = matmul_par(&d_logits, state.matrix())?;
    let breakdown = LossBreakdown::new(fit, smooth, lambda);
    if !breakdown.total.is_finite() {
        return Err(DdError::NonFinite {
            context: "lmr_loss",
            detail: format!(
                "fit = {}, smooth = {}, lambda = {lambda}",
                breakdown.fit, breakdown.smooth
            ),
        });
    }
    if !grad_f.all_finite() || !grad_m.all_finite() {
        return Err(DdError::NonFinite {
            context: "lmr_loss",
            detail: "gradient contains NaN or Inf".into(),
        });
    }
    Ok((breakdown, grad_f, grad_m))
}

fn gather_rows(m: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(n: usize, p: usize, seed: u64) -> ManifoldState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ManifoldState::new(DenseMatrix::from_vec(n, p, data).unwrap())
    }

    fn random_batch(b: usize, p: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..b * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix::from_vec(b, p, data).unwrap()
    }

    #[test]
    fn ranking_vector_identical_rows_is_uniform() {
        let m = DenseMatrix::from_vec(4, 2, vec![0.3, -0.7].repeat(4)).unwrap();
        let state = ManifoldState::new(m);
        let r = ranking_vector(&[1.0, 2.0], &state).unwrap();
        for &v in r.scores() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_vector_orthogonal_query_is_uniform() {
        let m = DenseMatrix::from_vec(3, 2, vec![1.0, 0.0, 2.0, 0.0, -1.0, 0.0]).unwrap();
        let state = ManifoldState::new(m);
        let r = ranking_vector(&[0.0, 5.0], &state).unwrap();
        for &v in r.scores() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_vector_matches_naive_softmax_oracle() {
        let state = random_state(9, 3, 1);
        let f = [0.4, -0.2, 0.9];
        let r = ranking_vector(&f, &state).unwrap();
        // Naive exp/sum oracle without stabilization.
        let logits: Vec<f64> = (0..9).map(|n| matrix::dot(&f, state.row(n))).collect();
        let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (got, e) in r.scores().iter().zip(&exps) {
            assert!((got - e / sum).abs() < 1e-12);
        }
        RankingVector::try_new(r.scores().to_vec()).unwrap();
    }

    #[test]
    fn fitting_term_single_sample_manifold_is_zero() {
        let state = ManifoldState::new(DenseMatrix::from_vec(1, 2, vec![0.3, 0.4]).unwrap());
        let batch = DenseMatrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
        let fit = fitting_term(&batch, &[1], &state).unwrap();
        assert!(fit.abs() < 1e-12);
    }

    #[test]
    fn fitting_term_uniform_rankings_give_b_log_n() {
        let m = DenseMatrix::from_vec(5, 2, vec![0.1, 0.2].repeat(5)).unwrap();
        let state = ManifoldState::new(m);
        let batch = random_batch(3, 2, 2);
        let fit = fitting_term(&batch, &[1, 3, 5], &state).unwrap();
        assert!((fit - 3.0 * 5.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn fitting_term_matches_hand_composed_oracle() {
        let state = random_state(4, 3, 3);
        let batch = random_batch(3, 3, 4);
        let ids = [2u64, 4, 1];
        let got = fitting_term(&batch, &ids, &state).unwrap();
        let mut want = 0.0;
        for b in 0..3 {
            let logits: Vec<f64> = (0..4).map(|n| matrix::dot(batch.row(b), state.row(n))).collect();
            let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
            let sum: f64 = exps.iter().sum();
            want += -(exps[ids[b] as usize - 1] / sum).ln();
        }
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn fitting_term_rejects_bad_id() {
        let state = random_state(4, 2, 5);
        let batch = random_batch(1, 2, 6);
        assert!(fitting_term(&batch, &[0], &state).is_err());
        assert!(fitting_term(&batch, &[5], &state).is_err());
    }

    #[test]
    fn smoothing_weights_dense_when_k_is_n() {
        let state = random_state(5, 2, 7);
        let batch = random_batch(2, 2, 8);
        let w = smoothing_weights(&batch, &state, 5).unwrap();
        for b in 0..2 {
            assert_eq!(w.row(b).len(), 5);
            for &(n, v) in w.row(b) {
                let want = matrix::dot(batch.row(b), state.row(n));
                assert!((v - want).abs() < 1e-12);
            }
            let mut support: Vec<usize> = w.row(b).iter().map(|&(n, _)| n).collect();
            support.sort_unstable();
            assert_eq!(support, (0..5).collect::<Vec<_>>());
        }
    }

    #[test]
    fn smoothing_weights_orthonormal_single_neighbor() {
        let state = ManifoldState::new(DenseMatrix::identity(3));
        let batch = DenseMatrix::from_vec(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let w = smoothing_weights(&batch, &state, 1).unwrap();
        assert_eq!(w.row(0).len(), 1);
        assert_eq!(w.row(0)[0].0, 1);
        assert!((w.row(0)[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothing_weights_match_dense_mask_oracle_and_knn() {
        let state = random_state(12, 3, 9);
        let batch = random_batch(4, 3, 10);
        let k = 4;
        let w = smoothing_weights(&batch, &state, k).unwrap();
        for b in 0..4 {
            let knn = state.knn_cosine(batch.row(b), k).unwrap();
            let support: Vec<usize> = w.row(b).iter().map(|&(n, _)| n).collect();
            assert_eq!(support, knn);
            for &(n, v) in w.row(b) {
                assert!((v - matrix::dot(batch.row(b), state.row(n))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn js_divergence_of_identical_is_zero() {
        let p = RankingVector::try_new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(js_divergence(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn js_divergence_disjoint_one_hots_is_ln2() {
        let p = RankingVector::try_new(vec![1.0, 0.0]).unwrap();
        let q = RankingVector::try_new(vec![0.0, 1.0]).unwrap();
        let d = js_divergence(&p, &q).unwrap();
        assert!((d - 2.0_f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn js_divergence_matches_direct_formula() {
        let p = RankingVector::try_new(vec![0.5, 0.5]).unwrap();
        let q = RankingVector::try_new(vec![1.0, 0.0]).unwrap();
        let d = js_divergence(&p, &q).unwrap();
        // Direct scalar evaluation: m = (0.75, 0.25),
        // JS = 1/2 [0.5 ln(0.5/0.75) + 0.5 ln(0.5/0.25)] + 1/2 [ln(1/0.75)].
        let want = 0.5 * (0.5 * (0.5_f64 / 0.75).ln() + 0.5 * (0.5_f64 / 0.25).ln())
            + 0.5 * (1.0_f64 / 0.75).ln();
        assert!((d - want).abs() < 1e-12);
    }

    #[test]
    fn js_divergence_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let raw_p: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let raw_q: Vec<f64> = (0..6).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sp: f64 = raw_p.iter().sum();
            let sq: f64 = raw_q.iter().sum();
            let p = RankingVector::try_new(raw_p.iter().map(|v| v / sp).collect()).unwrap();
            let q = RankingVector::try_new(raw_q.iter().map(|v| v / sq).collect()).unwrap();
            let a = js_divergence(&p, &q).unwrap();
            let b = js_divergence(&q, &p).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a >= 0.0 && a <= 2.0_f64.ln() + 1e-9);
        }
    }

    #[test]
    fn smoothing_term_zero_for_identical_rows() {
        let m = DenseMatrix::from_vec(4, 2, vec![0.4, 0.1].repeat(4)).unwrap();
        let state = ManifoldState::new(m);
        let batch = DenseMatrix::from_vec(2, 2, vec![0.4, 0.1, 0.4, 0.1]).unwrap();
        let s = smoothing_term(&batch, &state, 2).unwrap();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn smoothing_term_matches_scalar_composition() {
        // B = 1, k = 1, N = 2 hand instance.
        let state =
            ManifoldState::new(DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let batch = DenseMatrix::from_vec(1, 2, vec![0.8, 0.3]).unwrap();
        let got = smoothing_term(&batch, &state, 1).unwrap();
        let r_b = ranking_vector(&[0.8, 0.3], &state).unwrap();
        let r_0 = intrinsic_ranking_vector(&state, 0);
        let want = 0.8 * js_divergence(&r_b, &r_0).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn lmr_lambda_zero_reduces_to_fitting() {
        let state = random_state(6, 3, 12);
        let batch = random_batch(2, 3, 13);
        let ids = [2u64, 5];
        let params = LossParams {
            lambda: 0.0,
            ..LossParams::default()
        };
        let (breakdown, grad_f, grad_m) =
            lmr_loss_and_grads(&batch, &ids, &state, &params).unwrap();
        let fit = fitting_term(&batch, &ids, &state).unwrap();
        assert!((breakdown.total - fit).abs() < 1e-12);
        assert_eq!(breakdown.smooth, 0.0);
        // Fitting-only gradient oracle: dA = softmax - onehot.
        let mut da = DenseMatrix::zeros(2, 6);
        for b in 0..2 {
            let r = ranking_vector(batch.row(b), &state).unwrap();
            for n in 0..6 {
                da.set(b, n, r.scores()[n]);
            }
            let t = ids[b] as usize - 1;
            da.set(b, t, da.get(b, t) - 1.0);
        }
        let want_f = crate::matrix::matmul(&da, state.matrix()).unwrap();
        let want_m = crate::matrix::matmul(&da.transpose(), &batch).unwrap();
        for (a, b) in grad_f.data().iter().zip(want_f.data()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in grad_m.data().iter().zip(want_m.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn lmr_value_matches_composed_operations() {
        for seed in 0..5 {
            let state = random_state(8, 3, 20 + seed);
            let batch = random_batch(3, 3, 30 + seed);
            let ids = [1u64, 4, 7];
            let params = LossParams {
                lambda: 0.7,
                k: 3,
                ..LossParams::default()
            };
            let (breakdown, _, _) = lmr_loss_and_grads(&batch, &ids, &state, &params).unwrap();
            let fit = fitting_term(&batch, &ids, &state).unwrap();
            let smooth = smoothing_term(&batch, &state, 3).unwrap();
            assert!((breakdown.fit - fit).abs() < 1e-12, "fit mismatch");
            assert!((breakdown.smooth - smooth).abs() < 1e-12, "smooth mismatch");
            assert!((breakdown.total - (fit + 0.7 * smooth)).abs() < 1e-12);
            assert_eq!(breakdown.total, breakdown.fit + breakdown.lambda * breakdown.smooth);
        }
    }

    /// Central finite differences of the frozen-support loss value.
    fn fd_check(
        state: &ManifoldState,
        batch: &DenseMatrix,
        ids: &[u64],
        params: &LossParams,
        tol: f64,
    ) {
        let supports = select_supports(batch, state, params).unwrap();
        let (_, grad_f, grad_m) =
            lmr_loss_and_grads_frozen(batch, ids, state, params, &supports).unwrap();
        let h = 1e-5;
        let value = |batch: &DenseMatrix, state: &ManifoldState| -> f64 {
            lmr_loss_and_grads_frozen(batch, ids, state, params, &supports)
                .unwrap()
                .0
                .total
        };
        let mut bp = batch.clone();
        for idx in 0..bp.data().len() {
            let old = bp.data()[idx];
            bp.data_mut()[idx] = old + h;
            let up = value(&bp, state);
            bp.data_mut()[idx] = old - h;
            let down = value(&bp, state);
            bp.data_mut()[idx] = old;
            let fd = (up - down) / (2.0 * h);
            let an = grad_f.data()[idx];
            assert!(
                (fd - an).abs() <= tol * fd.abs().max(an.abs()) + 1e-8,
                "grad_f[{idx}]: fd {fd} vs analytic {an}"
            );
        }
        let mut sp = state.clone();
        for idx in 0..sp.matrix().data().len() {
            let old = sp.matrix().data()[idx];
            sp.matrix_mut().data_mut()[idx] = old + h;
            let up = value(batch, &sp);
            sp.matrix_mut().data_mut()[idx] = old - h;
            let down = value(batch, &sp);
            sp.matrix_mut().data_mut()[idx] = old;
            let fd = (up - down) / (2.0 * h);
            let an = grad_m.data()[idx];
            assert!(
                (fd - an).abs() <= tol * fd.abs().max(an.abs()) + 1e-8,
                "grad_m[{idx}]: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn lmr_gradients_match_finite_differences() {
        for seed in 0..5 {
            let state = random_state(6, 3, 40 + seed);
            let batch = random_batch(2, 3, 50 + seed);
            let ids = [3u64, 6];
            let params = LossParams {
                lambda: 1.0,
                k: 3,
                ..LossParams::default()
            };
            fd_check(&state, &batch, &ids, &params, 1e-4);
        }
    }

    #[test]
    fn lmr_gradients_match_finite_differences_with_clamping() {
        let state = random_state(6, 3, 60);
        let batch = random_batch(2, 3, 61);
        let params = LossParams {
            lambda: 0.5,
            k: 4,
            clamp_weights: true,
            exclude_self: false,
        };
        fd_check(&state, &batch, &[1, 2], &params, 1e-4);
    }

    #[test]
    fn lmr_batch_permutation_permutes_gradients() {
        let state = random_state(7, 3, 70);
        let batch = random_batch(3, 3, 71);
        let ids = [2u64, 5, 7];
        let params = LossParams {
            k: 3,
            ..LossParams::default()
        };
        let (bd, gf, gm) = lmr_loss_and_grads(&batch, &ids, &state, &params).unwrap();
        // Swap batch rows 0 and 2 together with their ids.
        let mut swapped = batch.clone();
        let tmp: Vec<f64> = swapped.row(0).to_vec();
        let r2: Vec<f64> = swapped.row(2).to_vec();
        swapped.row_mut(0).copy_from_slice(&r2);
        swapped.row_mut(2).copy_from_slice(&tmp);
        let (bd2, gf2, gm2) =
            lmr_loss_and_grads(&swapped, &[7, 5, 2], &state, &params).unwrap();
        assert!((bd.total - bd2.total).abs() < 1e-12);
        for j in 0..3 {
            assert!((gf.get(0, j) - gf2.get(2, j)).abs() < 1e-12);
            assert!((gf.get(2, j) - gf2.get(0, j)).abs() < 1e-12);
            assert!((gf.get(1, j) - gf2.get(1, j)).abs() < 1e-12);
        }
        for (a, b) in gm.data().iter().zip(gm2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lmr_nonnegative_terms_on_positive_orthant() {
        // Unit-norm features in the positive orthant keep all retained
        // weights nonnegative, so both terms must be nonnegative.
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for _ in 0..10 {
            let n = 8;
            let mut data = Vec::new();
            for _ in 0..n {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
                let nm = matrix::norm(&raw);
                data.extend(raw.iter().map(|v| v / nm));
            }
            let state = ManifoldState::new(DenseMatrix::from_vec(n, 3, data).unwrap());
            let mut bdata = Vec::new();
            for _ in 0..3 {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
                let nm = matrix::norm(&raw);
                bdata.extend(raw.iter().map(|v| v / nm));
            }
            let batch = DenseMatrix::from_vec(3, 3, bdata).unwrap();
            let (bd, _, _) = lmr_loss_and_grads(
                &batch,
                &[1, 4, 8],
                &state,
                &LossParams {
                    k: 3,
                    ..LossParams::default()
                },
            )
            .unwrap();
            assert!(bd.fit >= 0.0);
            assert!(bd.smooth >= 0.0);
        }
    }

    #[test]
    fn lmr_exclude_self_drops_own_row() {
        let state = random_state(6, 3, 90);
        let batch = gather_rows(state.matrix(), &[0, 3]);
        let params = LossParams {
            k: 2,
            exclude_self: true,
            ..LossParams::default()
        };
        let supports =
            select_supports_with_ids(&batch, &[1, 4], &state, &params).unwrap();
        assert!(!supports[0].contains(&0));
        assert!(!supports[1].contains(&3));
        // Default inclusion: a feature equal to its own intrinsic row picks
        // itself first.
        let inc = select_supports(&batch, &state, &LossParams { k: 2, ..Default::default() })
            .unwrap();
        assert_eq!(inc[0][0], 0);
        assert_eq!(inc[1][0], 3);
    }
}
