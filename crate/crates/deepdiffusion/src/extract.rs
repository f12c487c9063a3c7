//! Post-training feature extractors: the embedded feature (encoder output),
//! the diffused feature (similarity propagation over the sparsified
//! manifold graph), and their concatenation.

use crate::encoder::EncoderModel;
use crate::error::{DdError, Result};
use crate::manifold::{ManifoldState, SparseSimilarity};
use crate::matrix::{self, DenseMatrix};

/// How often the diffusion iterate is rescaled to unit length to keep the
/// unnormalized similarity powers from overflowing. Rescaling by a positive
/// factor does not change the final normalized result.
const RENORM_INTERVAL: usize = 5;

/// An N-dimensional diffusion vector; unit Euclidean norm once finalized.
#[derive(Debug, Clone)]
pub struct DiffusionVector {
    values: Vec<f64>,
}

impl DiffusionVector {
    pub fn new(values: Vec<f64>) -> Self {
        DiffusionVector { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The embedded feature: the encoder output for one sample, inference mode.
pub fn extract_embedded(encoder: &EncoderModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != encoder.input_dim() {
        return Err(DdError::ShapeMismatch {
            op: "extract_embedded",
            detail: format!(
                "sample dim {} vs encoder input dim {}",
                x.len(),
                encoder.input_dim()
            ),
        });
    }
    let batch = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
    let out = encoder.forward_features(&batch)?;
    Ok(out.row(0).to_vec())
}

/// Binary diffusion source: 1 exactly at the `k` intrinsic features nearest
/// to `f` in Euclidean distance.
pub fn diffusion_source(f: &[f64], state: &ManifoldState, k: usize) -> Result<DiffusionVector> {
    let nearest = state.knn_euclidean(f, k)?;
    let mut values = vec![0.0; state.len()];
    for n in nearest {
        values[n] = 1.0;
    }
    Ok(DiffusionVector::new(values))
}

/// Applies `g <- g * S` for `r_steps` iterations, then scales the result to
/// unit length. An all-zero iterate (disconnected source) is an error.
pub fn diffuse(
    g0: &DiffusionVector,
    s: &SparseSimilarity,
    r_steps: usize,
) -> Result<DiffusionVector> {
    if g0.len() != s.len() {
        return Err(DdError::ShapeMismatch {
            op: "diffuse",
            detail: format!("source length {} vs graph size {}", g0.len(), s.len()),
        });
    }
    let mut g = g0.values.clone();
    for r in 1..=r_steps {
        g = s.left_multiply(&g)?;
        if r % RENORM_INTERVAL == 0 {
            rescale_unit(&mut g, r)?;
        }
    }
    rescale_unit(&mut g, r_steps)?;
    Ok(DiffusionVector::new(g))
}

fn rescale_unit(g: &mut [f64], step: usize) -> Result<()> {
    let n = matrix::norm(g);
    if !n.is_finite() {
        return Err(DdError::NonFinite {
            context: "diffuse",
            detail: format!("iterate overflowed at step {step}"),
        });
    }
    if n == 0.0 {
        return Err(DdError::Numerical(format!(
            "diffusion became all-zero at step {step}; the source is disconnected \
             from the similarity graph"
        )));
    }
    for v in g.iter_mut() {
        *v /= n;
    }
    Ok(())
}

/// Concatenation of an embedded feature and a finalized diffusion vector.
pub fn fuse(e: &[f64], d: &DiffusionVector) -> Vec<f64> {
    let mut out = Vec::with_capacity(e.len() + d.len());
    out.extend_from_slice(e);
    out.extend_from_slice(d.values());
    out
}

/// Embedded-then-diffused pipeline for one sample.
pub fn extract_diffused(
    encoder: &EncoderModel,
    state: &ManifoldState,
    s: &SparseSimilarity,
    x: &[f64],
    k: usize,
    r_steps: usize,
) -> Result<DiffusionVector> {
    let f = extract_embedded(encoder, x)?;
    let g0 = diffusion_source(&f, state, k)?;
    diffuse(&g0, s, r_steps)
}
