//! The learnable intrinsic-feature matrix, neighbor queries against it, and
//! the sparsified similarity graph used for diffusion.

use crate::data::Sample;
use crate::encoder::EncoderModel;
use crate::error::{DdError, Result};
use crate::matrix::{self, top_k_indices, DenseMatrix};
use std::fmt::Write as _;
use std::path::Path;

/// The intrinsic features: one learnable row per training sample.
///
/// Row `n` (0-based) belongs to the sample with ID `n + 1`; the ID
/// assignment is fixed for the whole training run.
#[derive(Debug, Clone)]
pub struct ManifoldState {
    m: DenseMatrix,
    ids: Vec<u64>,
}

impl ManifoldState {
    /// Wraps an N x P matrix, assigning IDs 1..=N in row order.
    pub fn new(m: DenseMatrix) -> Self {
        let ids = (1..=m.rows() as u64).collect();
        ManifoldState { m, ids }
    }

    /// Initializes the intrinsic features by projecting every training
    /// sample through the encoder (with whatever output normalization the
    /// encoder applies).
    pub fn init_from_projection(encoder: &EncoderModel, samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(DdError::InvalidArgument("no training samples".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.id != (i + 1) as u64 {
                return Err(DdError::InvalidArgument(format!(
                    "samples must be ordered by ID 1..=N; position {i} holds ID {}",
                    s.id
                )));
            }
        }
        let batch = crate::data::to_matrix(samples)?;
        if batch.cols() != encoder.input_dim() {
            return Err(DdError::ShapeMismatch {
                op: "init_from_projection",
                detail: format!(
                    "sample dim {} vs encoder input dim {}",
                    batch.cols(),
                    encoder.input_dim()
                ),
            });
        }
        let m = encoder.forward_features(&batch)?;
        Ok(ManifoldState::new(m))
    }

    pub fn len(&self) -> usize {
        self.m.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.m.rows() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.m.cols()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// The intrinsic feature matrix (N x P).
    pub fn matrix(&self) -> &DenseMatrix {
        &self.m
    }

    pub fn matrix_mut(&mut self) -> &mut DenseMatrix {
        &mut self.m
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.m.row(n)
    }

    /// Cosine similarity of `f` against every intrinsic feature. Zero-norm
    /// vectors get similarity 0 to every row.
    pub fn cosine_scores(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_query(f)?;
        let fnorm = matrix::norm(f);
        let mut scores = vec![0.0; self.len()];
        if fnorm == 0.0 {
            return Ok(scores);
        }
        for n in 0..self.len() {
            let row = self.m.row(n);
            let rnorm = matrix::norm(row);
            if rnorm > 0.0 {
                scores[n] = matrix::dot(f, row) / (fnorm * rnorm);
            }
        }
        Ok(scores)
    }

    /// Indices of the `k` intrinsic features most cosine-similar to `f`,
    /// ties to the lower index. The query's own row is eligible.
    pub fn knn_cosine(&self, f: &[f64], k: usize) -> Result<Vec<usize>> {
        let scores = self.cosine_scores(f)?;
        top_k_indices(&scores, k)
    }

    /// Indices of the `k` nearest intrinsic features by Euclidean distance.
    pub fn knn_euclidean(&self, f: &[f64], k: usize) -> Result<Vec<usize>> {
        self.check_query(f)?;
        // Ranked via top-k on negated squared distances so the tie rule
        // matches the cosine path exactly.
        let neg: Vec<f64> = (0..self.len())
            .map(|n| {
                let row = self.m.row(n);
                let mut acc = 0.0;
                for j in 0..row.len() {
                    let d = f[j] - row[j];
                    acc += d * d;
                }
                -acc
            })
            .collect();
        top_k_indices(&neg, k)
    }

    fn check_query(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.latent_dim() {
            return Err(DdError::ShapeMismatch {
                op: "knn",
                detail: format!(
                    "query has dim {} but intrinsic features have dim {}",
                    f.len(),
                    self.latent_dim()
                ),
            });
        }
        Ok(())
    }

    /// Builds the row-sparsified similarity graph: row `i` keeps the `k`
    /// largest entries of row `i` of `M * M^T` (self-similarity included),
    /// every other entry is implicitly zero.
    pub fn build_sparse_similarity(&self, k: usize) -> Result<SparseSimilarity> {
        let n = self.len();
        if k == 0 || k > n {
            return Err(DdError::InvalidArgument(format!(
                "neighborhood size {k} out of range 1..={n}"
            )));
        }
        let mut rows = Vec::with_capacity(n);
        let mut scores = vec![0.0; n];
        for i in 0..n {
            let ri = self.m.row(i);
            for (j, s) in scores.iter_mut().enumerate() {
                *s = matrix::dot(ri, self.m.row(j));
            }
            let keep = top_k_indices(&scores, k)?;
            rows.push(keep.into_iter().map(|j| (j, scores[j])).collect());
        }
        Ok(SparseSimilarity { n, rows })
    }

    /// Writes `DDMANIF v1 <N> <P>` followed by one row per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "DDMANIF v1 {} {}", self.len(), self.latent_dim()).unwrap();
        for i in 0..self.len() {
            for (j, v) in self.m.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                write!(out, "{v}").unwrap();
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path.display().to_string();
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| DdError::Parse {
            path: name.clone(),
            line: 1,
            detail: "empty file".into(),
        })?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.len() != 4 || tokens[0] != "DDMANIF" || tokens[1] != "v1" {
            return Err(DdError::Parse {
                path: name,
                line: 1,
                detail: "expected `DDMANIF v1 <N> <P>` header".into(),
            });
        }
        let n: usize = tokens[2].parse().map_err(|_| DdError::Parse {
            path: name.clone(),
            line: 1,
            detail: "bad N".into(),
        })?;
        let p: usize = tokens[3].parse().map_err(|_| DdError::Parse {
            path: name.clone(),
            line: 1,
            detail: "bad P".into(),
        })?;
        let mut data = Vec::with_capacity(n * p);
        for (i, line) in lines.enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| DdError::Parse {
                        path: name.clone(),
                        line: i + 2,
                        detail: format!("bad value `{t}`"),
                    })
                })
                .collect::<Result<_>>()?;
            if row.len() != p {
                return Err(DdError::Parse {
                    path: name.clone(),
                    line: i + 2,
                    detail: format!("expected {p} values, got {}", row.len()),
                });
            }
            data.extend(row);
        }
        let m = DenseMatrix::from_vec(n, p, data).map_err(|e| DdError::Parse {
            path: name,
            line: 1,
            detail: e.to_string(),
        })?;
        Ok(ManifoldState::new(m))
    }
}

/// Row-sparse similarity graph: exactly `k` stored entries per row, holding
/// that row's largest inner products.
#[derive(Debug, Clone)]
pub struct SparseSimilarity {
    n: usize,
    // Per row: (column, value) pairs in descending value order.
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseSimilarity {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Stored entries of row `i` in descending value order.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Dense reconstruction (tests and small-N oracles).
    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for &(j, v) in &self.rows[i] {
                out.set(i, j, v);
            }
        }
        out
    }

    /// Row-vector times matrix: `out[j] = sum_i g[i] * S[i][j]`, accumulated
    /// in ascending-row order.
    pub fn left_multiply(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.n {
            return Err(DdError::ShapeMismatch {
                op: "left_multiply",
                detail: format!("vector length {} vs graph size {}", g.len(), self.n),
            });
        }
        let mut out = vec![0.0; self.n];
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            for &(j, v) in &self.rows[i] {
                out[j] += gi * v;
            }
        }
        Ok(out)
    }
}
