//! Feedforward encoder with manual backpropagation and Adam.
//!
//! The encoder is a plain fully-connected network: rectifier on hidden
//! layers, linear output, optionally followed by row-wise L2 normalization
//! of the output features. Gradients are computed by hand in reverse mode;
//! the forward pass stores exactly the intermediates backprop needs.

use crate::error::{DdError, Result};
use crate::matrix::{self, matmul_par, DenseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

/// Fully-connected encoder parameterized by per-layer weights and biases.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    layer_dims: Vec<usize>,
    weights: Vec<DenseMatrix>, // layer l maps dims[l] -> dims[l+1]
    biases: Vec<DenseMatrix>,  // 1 x dims[l+1]
    normalize_output: bool,
    version: u64, // bumped on every parameter change; guards stale caches
}

/// Per-batch intermediates captured by [`EncoderModel::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    model_version: u64,
    batch_rows: usize,
    inputs: Vec<DenseMatrix>,          // input to each affine layer
    pre_activations: Vec<DenseMatrix>, // affine outputs before nonlinearity
    // Pre-normalization output rows and their norms, when normalization is on.
    pre_norm: Option<(DenseMatrix, Vec<f64>)>,
}

/// Gradients of a scalar loss with respect to every parameter tensor.
#[derive(Debug, Clone)]
pub struct EncoderGradients {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<DenseMatrix>,
}

impl EncoderModel {
    /// Random initialization: zero-mean Gaussian weights with variance
    /// `2 / fan_in` per layer, zero biases. Deterministic per seed.
    ///
    /// Output normalization starts enabled; see
    /// [`set_normalize_output`](Self::set_normalize_output).
    pub fn init_he(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(DdError::InvalidArgument(format!(
                "need at least an input and an output layer, got dims {layer_dims:?}"
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(DdError::InvalidArgument(format!(
                "layer dimensions must be positive, got {layer_dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_dims.len() - 1 {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| DdError::InvalidArgument(e.to_string()))?;
            let data: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            weights.push(DenseMatrix::from_vec(fan_in, fan_out, data)?);
            biases.push(DenseMatrix::zeros(1, fan_out));
        }
        Ok(EncoderModel {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            normalize_output: true,
            version: 0,
        })
    }

    /// Builds a model from explicit parameters (used by the checkpoint
    /// loader and by tests that need handcrafted weights).
    pub fn from_parameters(
        layer_dims: Vec<usize>,
        weights: Vec<DenseMatrix>,
        biases: Vec<DenseMatrix>,
        normalize_output: bool,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || weights.len() != layer_dims.len() - 1 {
            return Err(DdError::InvalidArgument(
                "parameter count does not match layer dims".into(),
            ));
        }
        for l in 0..weights.len() {
            if weights[l].rows() != layer_dims[l]
                || weights[l].cols() != layer_dims[l + 1]
                || biases[l].rows() != 1
                || biases[l].cols() != layer_dims[l + 1]
            {
                return Err(DdError::ShapeMismatch {
                    op: "from_parameters",
                    detail: format!("layer {l} tensors disagree with dims {layer_dims:?}"),
                });
            }
        }
        Ok(EncoderModel {
            layer_dims,
            weights,
            biases,
            normalize_output,
            version: 0,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn normalize_output(&self) -> bool {
        self.normalize_output
    }

    /// Switches row normalization of the output features. Invalidates
    /// outstanding forward caches.
    pub fn set_normalize_output(&mut self, flag: bool) {
        if self.normalize_output != flag {
            self.normalize_output = flag;
            self.version += 1;
        }
    }

    fn num_affine_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Forward pass returning features and the cache backprop needs.
    pub fn forward(&self, batch: &DenseMatrix) -> Result<(DenseMatrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(DdError::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "batch width {} but encoder input dim {}",
                    batch.cols(),
                    self.input_dim()
                ),
            });
        }
        let layers = self.num_affine_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre_activations = Vec::with_capacity(layers);
        let mut h = batch.clone();
        for l in 0..layers {
            let mut z = matmul_par(&h, &self.weights[l])?;
            add_row_bias(&mut z, self.biases[l].row(0));
            inputs.push(h);
            if l + 1 < layers {
                let mut a = z.clone();
                for v in a.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                pre_activations.push(z);
                h = a;
            } else {
                pre_activations.push(z.clone());
                h = z;
            }
        }
        let pre_norm = if self.normalize_output {
            let norms = matrix::row_norms(&h);
            let raw = h.clone();
            for i in 0..h.rows() {
                let n = norms[i];
                if n > 0.0 {
                    for v in h.row_mut(i) {
                        *v /= n;
                    }
                }
            }
            Some((raw, norms))
        } else {
            None
        };
        let cache = ForwardCache {
            model_version: self.version,
            batch_rows: batch.rows(),
            inputs,
            pre_activations,
            pre_norm,
        };
        Ok((h, cache))
    }

    /// Forward pass without building a cache (evaluation / extraction).
    pub fn forward_features(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward(batch).map(|(f, _)| f)
    }

    /// Reverse-mode gradients of the forward map for the cached batch.
    ///
    /// `grad_out` is the loss gradient with respect to the returned features
    /// (after normalization, when enabled).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &DenseMatrix,
    ) -> Result<EncoderGradients> {
        if cache.model_version != self.version {
            return Err(DdError::StaleCache(format!(
                "cache built at model version {} but model is at {}",
                cache.model_version, self.version
            )));
        }
        if grad_out.rows() != cache.batch_rows || grad_out.cols() != self.output_dim() {
            return Err(DdError::ShapeMismatch {
                op: "backward",
                detail: format!(
                    "grad_out is {}x{} but cache expects {}x{}",
                    grad_out.rows(),
                    grad_out.cols(),
                    cache.batch_rows,
                    self.output_dim()
                ),
            });
        }
        let layers = self.num_affine_layers();
        // Row-normalization Jacobian: for f = y/|y|,
        // dL/dy = (g - (g.f) f) / |y|; zero rows pass through unchanged.
        let mut delta = match &cache.pre_norm {
            Some((_, norms)) => {
                let mut d = grad_out.clone();
                for i in 0..d.rows() {
                    let n = norms[i];
                    if n > 0.0 {
                        let raw = cache.pre_norm.as_ref().unwrap().0.row(i);
                        let row = d.row_mut(i);
                        let mut fhat = vec![0.0; row.len()];
                        for j in 0..row.len() {
                            fhat[j] = raw[j] / n;
                        }
                        let gdotf = matrix::dot(row, &fhat);
                        for j in 0..row.len() {
                            row[j] = (row[j] - gdotf * fhat[j]) / n;
                        }
                    }
                }
                d
            }
            None => grad_out.clone(),
        };
        let mut dweights = vec![DenseMatrix::zeros(0, 0); layers];
        let mut dbiases = vec![DenseMatrix::zeros(0, 0); layers];
        for l in (0..layers).rev() {
            if l + 1 < layers {
                // Rectifier derivative on the stored pre-activation.
                let z = &cache.pre_activations[l];
                for (d, zv) in delta.data_mut().iter_mut().zip(z.data()) {
                    if *zv <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let input_t = cache.inputs[l].transpose();
            dweights[l] = matmul_par(&input_t, &delta)?;
            let mut db = DenseMatrix::zeros(1, delta.cols());
            for i in 0..delta.rows() {
                let row = delta.row(i);
                let acc = db.row_mut(0);
                for j in 0..row.len() {
                    acc[j] += row[j];
                }
            }
            dbiases[l] = db;
            if l > 0 {
                let w_t = self.weights[l].transpose();
                delta = matmul_par(&delta, &w_t)?;
            }
        }
        Ok(EncoderGradients {
            weights: dweights,
            biases: dbiases,
        })
    }

    /// One Adam update of all parameters. Rejects non-finite gradients and
    /// invalidates outstanding caches.
    pub fn adam_step(&mut self, state: &mut AdamState, grads: &EncoderGradients) -> Result<()> {
        let mut params: Vec<&mut DenseMatrix> = Vec::new();
        let mut gs: Vec<&DenseMatrix> = Vec::new();
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            params.push(w);
            gs.push(g);
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            params.push(b);
            gs.push(g);
        }
        state.apply(params, &gs)?;
        self.version += 1;
        Ok(())
    }

    /// Trains the encoder to reproduce its 2-D input, stopping once the mean
    /// squared reconstruction error over `points` falls below the threshold
    /// or the epoch budget runs out.
    pub fn pretrain_identity(
        &mut self,
        points: &DenseMatrix,
        opts: &PretrainOptions,
    ) -> Result<PretrainReport> {
        if self.input_dim() != 2 || self.output_dim() != 2 {
            return Err(DdError::InvalidArgument(format!(
                "identity pretraining expects a 2-D encoder, got dims {:?}",
                self.layer_dims
            )));
        }
        if self.normalize_output {
            return Err(DdError::InvalidArgument(
                "identity pretraining requires output normalization off".into(),
            ));
        }
        if points.cols() != 2 || points.rows() == 0 {
            return Err(DdError::InvalidArgument(
                "pretraining points must be a nonempty Nx2 matrix".into(),
            ));
        }
        let n = points.rows();
        let mut mse = self.reconstruction_mse(points)?;
        if mse < opts.mse_threshold {
            return Ok(PretrainReport {
                epochs_run: 0,
                final_mse: mse,
                reached_threshold: true,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut state = AdamState::for_encoder(self, opts.learning_rate);
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 1..=opts.epochs {
            shuffle(&mut order, &mut rng);
            for chunk in order.chunks(opts.batch_size.max(1)) {
                let batch = gather_rows(points, chunk);
                let (out, cache) = self.forward(&batch)?;
                let mut grad = out;
                let scale = 2.0 / chunk.len() as f64;
                for (g, x) in grad.data_mut().iter_mut().zip(batch.data()) {
                    *g = scale * (*g - x);
                }
                let grads = self.backward(&cache, &grad)?;
                self.adam_step(&mut state, &grads)?;
            }
            mse = self.reconstruction_mse(points)?;
            if mse < opts.mse_threshold {
                return Ok(PretrainReport {
                    epochs_run: epoch,
                    final_mse: mse,
                    reached_threshold: true,
                });
            }
        }
        Ok(PretrainReport {
            epochs_run: opts.epochs,
            final_mse: mse,
            reached_threshold: false,
        })
    }

    /// Mean over points of the squared Euclidean reconstruction error.
    pub fn reconstruction_mse(&self, points: &DenseMatrix) -> Result<f64> {
        let out = self.forward_features(points)?;
        let mut total = 0.0;
        for (y, x) in out.data().iter().zip(points.data()) {
            let d = y - x;
            total += d * d;
        }
        Ok(total / points.rows() as f64)
    }

    /// Writes the checkpoint text format:
    /// `DDCKPT v1 <num_layers> <dims...> <normalize_flag>` followed by one
    /// line per parameter tensor. Round-trips byte-identically.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint_string())?;
        Ok(())
    }

    fn checkpoint_string(&self) -> String {
        let mut out = String::new();
        out.push_str("DDCKPT v1");
        write!(out, " {}", self.layer_dims.len()).unwrap();
        for d in &self.layer_dims {
            write!(out, " {d}").unwrap();
        }
        write!(out, " {}", if self.normalize_output { 1 } else { 0 }).unwrap();
        out.push('\n');
        for l in 0..self.num_affine_layers() {
            push_values_line(&mut out, self.weights[l].data());
            push_values_line(&mut out, self.biases[l].data());
        }
        out
    }

    /// Reads a checkpoint written by [`save_checkpoint`](Self::save_checkpoint).
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let name = path.display().to_string();
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(&name, 1, "empty file"))?;
        let tokens: Vec<&str> = header.split_whitespace().collect();
        if tokens.len() < 3 || tokens[0] != "DDCKPT" || tokens[1] != "v1" {
            return Err(parse_err(&name, 1, "expected `DDCKPT v1` header"));
        }
        let num_layers: usize = tokens[2]
            .parse()
            .map_err(|_| parse_err(&name, 1, "bad layer count"))?;
        if tokens.len() != 3 + num_layers + 1 {
            return Err(parse_err(&name, 1, "header field count mismatch"));
        }
        let mut dims = Vec::with_capacity(num_layers);
        for t in &tokens[3..3 + num_layers] {
            dims.push(t.parse::<usize>().map_err(|_| parse_err(&name, 1, "bad dim"))?);
        }
        let normalize = match tokens[3 + num_layers] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(&name, 1, &format!("bad normalize flag `{other}`"))),
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..num_layers.saturating_sub(1) {
            let (rows, cols) = (dims[l], dims[l + 1]);
            let (ln, wline) = lines
                .next()
                .ok_or_else(|| parse_err(&name, 2 + 2 * l, "missing weight line"))?;
            let wdata = parse_values(wline, &name, ln + 1)?;
            weights.push(DenseMatrix::from_vec(rows, cols, wdata).map_err(|e| {
                parse_err(&name, ln + 1, &format!("weight tensor {l}: {e}"))
            })?);
            let (ln, bline) = lines
                .next()
                .ok_or_else(|| parse_err(&name, 3 + 2 * l, "missing bias line"))?;
            let bdata = parse_values(bline, &name, ln + 1)?;
            biases.push(DenseMatrix::from_vec(1, cols, bdata).map_err(|e| {
                parse_err(&name, ln + 1, &format!("bias tensor {l}: {e}"))
            })?);
        }
        EncoderModel::from_parameters(dims, weights, biases, normalize)
    }
}

/// Adam optimizer state over an ordered list of parameter tensors.
///
/// The same state type drives both the encoder parameters and the manifold
/// matrix; the two hold independent moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<DenseMatrix>,
    second_moment: Vec<DenseMatrix>,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Fresh state for tensors of the given shapes, with the usual defaults
    /// beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(shapes: &[(usize, usize)], learning_rate: f64) -> Self {
        AdamState {
            first_moment: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            second_moment: shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
        }
    }

    /// State matching an encoder's parameter list (weights, then biases).
    pub fn for_encoder(model: &EncoderModel, learning_rate: f64) -> Self {
        let mut shapes: Vec<(usize, usize)> = model
            .weights
            .iter()
            .map(|w| (w.rows(), w.cols()))
            .collect();
        shapes.extend(model.biases.iter().map(|b| (b.rows(), b.cols())));
        AdamState::new(&shapes, learning_rate)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One bias-corrected Adam update applied to every tensor in order.
    pub fn apply(&mut self, params: Vec<&mut DenseMatrix>, grads: &[&DenseMatrix]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(DdError::InvalidArgument(format!(
                "optimizer tracks {} tensors but got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (t, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.rows() != g.rows() || p.cols() != g.cols() {
                return Err(DdError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "tensor {t}: parameter {}x{} vs gradient {}x{}",
                        p.rows(),
                        p.cols(),
                        g.rows(),
                        g.cols()
                    ),
                });
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(DdError::NonFinite {
                    context: "adam_step",
                    detail: format!("gradient tensor {t} entry {pos} is {}", g.data()[pos]),
                });
            }
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            let update = |((pv, gv), (mv, vv)): ((&mut f64, &f64), (&mut f64, &mut f64))| {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            };
            let n = p.data().len();
            if n >= 1 << 16 {
                p.data_mut()
                    .par_iter_mut()
                    .zip(g.data().par_iter())
                    .zip(m.data_mut().par_iter_mut().zip(v.data_mut().par_iter_mut()))
                    .for_each(update);
            } else {
                p.data_mut()
                    .iter_mut()
                    .zip(g.data().iter())
                    .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                    .for_each(update);
            }
        }
        Ok(())
    }
}

/// Knobs for identity pretraining.
#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mse_threshold: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 1000,
            learning_rate: 1e-3,
            batch_size: 128,
            mse_threshold: 1e-3,
            seed: 0,
        }
    }
}

/// Outcome of identity pretraining.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub final_mse: f64,
    pub reached_threshold: bool,
}

fn add_row_bias(m: &mut DenseMatrix, bias: &[f64]) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        for j in 0..row.len() {
            row[j] += bias[j];
        }
    }
}

/// Copies the selected rows into a new matrix.
pub(crate) fn gather_rows(m: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(idx.len(), m.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(m.row(i));
    }
    out
}

/// Fisher-Yates shuffle driven by the given stream.
pub(crate) fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

fn push_values_line(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v}").unwrap();
    }
    out.push('\n');
}

fn parse_err(path: &str, line: usize, detail: &str) -> DdError {
    DdError::Parse {
        path: path.to_string(),
        line,
        detail: detail.to_string(),
    }
}

fn parse_values(line: &str, path: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(path, lineno, &format!("bad value `{t}`")))
        })
        .collect()
}
