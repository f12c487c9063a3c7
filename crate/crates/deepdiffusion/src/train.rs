//! The joint training loop: minibatching, augmentation, loss evaluation,
//! simultaneous Adam updates of the encoder and the manifold, periodic
//! retrieval evaluation, checkpointing, and the 2-D spiral study.

use crate::data::{self, AugmentConfig, Sample};
use crate::encoder::{AdamState, EncoderModel, PretrainOptions, PretrainReport};
use crate::error::{DdError, Result};
use crate::eval::{self, LabeledSample};
use crate::loss::{self, LossParams};
use crate::manifold::ManifoldState;
use crate::matrix::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Everything the training loop needs to know.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Balance between fitting and smoothing terms.
    pub lambda: f64,
    /// Neighborhood size for the smoothing term and diffusion sources.
    pub k: usize,
    /// Diffusion iterations for the diffused feature.
    pub r_steps: usize,
    /// Minibatch size.
    pub batch_size: usize,
    /// Latent dimension the encoder must produce.
    pub latent_dim: usize,
    /// Adam learning rate shared by the encoder and the manifold.
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Row-normalize encoder outputs.
    pub normalize_output: bool,
    pub augment_probability: f64,
    pub augment_jitter: f64,
    /// Evaluate retrieval every this many epochs (0 disables periodic
    /// evaluation; the final epoch is always evaluated when possible).
    pub eval_every: usize,
    /// Emit a 2-D latent snapshot every this many epochs (0 disables).
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            k: 20,
            r_steps: 20,
            batch_size: 64,
            latent_dim: 2,
            learning_rate: 1e-4,
            epochs: 100,
            seed: 0,
            normalize_output: true,
            augment_probability: 0.8,
            augment_jitter: 0.01,
            eval_every: 50,
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    /// Basic range checks that do not need the dataset size.
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(DdError::InvalidArgument(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if self.k == 0 {
            return Err(DdError::InvalidArgument("k must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(DdError::InvalidArgument("batch_size must be positive".into()));
        }
        if self.latent_dim == 0 {
            return Err(DdError::InvalidArgument("latent_dim must be positive".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(DdError::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return Err(DdError::InvalidArgument(format!(
                "augment_probability must lie in [0, 1], got {}",
                self.augment_probability
            )));
        }
        if self.augment_jitter < 0.0 {
            return Err(DdError::InvalidArgument(format!(
                "augment_jitter must be nonnegative, got {}",
                self.augment_jitter
            )));
        }
        Ok(())
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            probability: self.augment_probability,
            jitter_std: self.augment_jitter,
        }
    }

    /// Parses the flat `key = value` config format. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are rejected.
    pub fn from_str(text: &str, origin: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| DdError::Parse {
                path: origin.to_string(),
                line: lineno,
                detail: format!("expected `key = value`, got `{raw}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| DdError::Parse {
                path: origin.to_string(),
                line: lineno,
                detail: format!("bad {what} `{value}` for key `{key}`"),
            };
            match key {
                "lambda" => cfg.lambda = value.parse().map_err(|_| bad("number"))?,
                "k" => cfg.k = value.parse().map_err(|_| bad("count"))?,
                "r_steps" => cfg.r_steps = value.parse().map_err(|_| bad("count"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("count"))?,
                "latent_dim" => cfg.latent_dim = value.parse().map_err(|_| bad("count"))?,
                "learning_rate" => {
                    cfg.learning_rate = value.parse().map_err(|_| bad("number"))?
                }
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("count"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "normalize_output" => {
                    cfg.normalize_output = parse_bool(value).ok_or_else(|| bad("flag"))?
                }
                "augment_probability" => {
                    cfg.augment_probability = value.parse().map_err(|_| bad("number"))?
                }
                "augment_jitter" => {
                    cfg.augment_jitter = value.parse().map_err(|_| bad("number"))?
                }
                "eval_every" => cfg.eval_every = value.parse().map_err(|_| bad("count"))?,
                "snapshot_every" => {
                    cfg.snapshot_every = value.parse().map_err(|_| bad("count"))?
                }
                other => {
                    return Err(DdError::Parse {
                        path: origin.to_string(),
                        line: lineno,
                        detail: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        TrainConfig::from_str(&text, &path.display().to_string())
    }

    /// Serializes every field in the flat `key = value` format.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        writeln!(out, "lambda = {}", self.lambda).unwrap();
        writeln!(out, "k = {}", self.k).unwrap();
        writeln!(out, "r_steps = {}", self.r_steps).unwrap();
        writeln!(out, "batch_size = {}", self.batch_size).unwrap();
        writeln!(out, "latent_dim = {}", self.latent_dim).unwrap();
        writeln!(out, "learning_rate = {}", self.learning_rate).unwrap();
        writeln!(out, "epochs = {}", self.epochs).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        writeln!(out, "normalize_output = {}", self.normalize_output).unwrap();
        writeln!(out, "augment_probability = {}", self.augment_probability).unwrap();
        writeln!(out, "augment_jitter = {}", self.augment_jitter).unwrap();
        writeln!(out, "eval_every = {}", self.eval_every).unwrap();
        writeln!(out, "snapshot_every = {}", self.snapshot_every).unwrap();
        out
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Some(true),
        "false" | "0" | "off" | "no" => Some(false),
        _ => None,
    }
}

/// Loss statistics for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub fit: f64,
    pub smooth: f64,
    pub total: f64,
    pub seconds: f64,
}

/// Retrieval accuracy at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub epoch: usize,
    pub map_percent: f64,
}

/// Everything the loop records.
#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub evals: Vec<EvalPoint>,
    pub best_map: Option<EvalPoint>,
}

impl TrainReport {
    pub fn initial_map(&self) -> Option<f64> {
        self.evals.first().map(|e| e.map_percent)
    }

    pub fn final_map(&self) -> Option<f64> {
        self.evals.last().map(|e| e.map_percent)
    }

    /// The numeric content (losses and evaluations), excluding wall-clock.
    pub fn numeric_fingerprint(&self) -> Vec<(usize, f64, f64, f64)> {
        let mut rows: Vec<(usize, f64, f64, f64)> = self
            .epochs
            .iter()
            .map(|e| (e.epoch, e.fit, e.smooth, e.total))
            .collect();
        rows.extend(self.evals.iter().map(|e| (e.epoch, e.map_percent, 0.0, 0.0)));
        rows
    }

    /// Per-epoch losses as CSV.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("epoch,fit,smooth,total,seconds\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{},{},{}", e.epoch, e.fit, e.smooth, e.total, e.seconds)
                .unwrap();
        }
        out
    }

    /// Evaluation trajectory as CSV.
    pub fn evals_csv(&self) -> String {
        let mut out = String::from("epoch,map_percent\n");
        for e in &self.evals {
            writeln!(out, "{},{}", e.epoch, e.map_percent).unwrap();
        }
        out
    }
}

/// Output of [`train`]: the best-evaluation state (the returned model of
/// record), the final-epoch state, and the full report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub encoder: EncoderModel,
    pub manifold: ManifoldState,
    pub final_encoder: EncoderModel,
    pub final_manifold: ManifoldState,
    pub report: TrainReport,
}

/// Where checkpoints and snapshots are written during training.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn none() -> Self {
        TrainOutputs { dir: None }
    }

    pub fn into_dir(dir: impl Into<PathBuf>) -> Self {
        TrainOutputs {
            dir: Some(dir.into()),
        }
    }
}

/// The shuffle/augmentation stream of one epoch, derived from the config
/// seed and the epoch number so that resumed training replays the exact
/// stream of uninterrupted training.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    // SplitMix64 over (seed, epoch) to decorrelate consecutive epochs.
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Runs the full joint optimization.
///
/// Per epoch the sample order is reshuffled (seeded) and split into batches
/// of `batch_size` (the trailing partial batch is kept). Each batch is
/// augmented, embedded, scored by the ranking loss, and both the encoder
/// parameters and the manifold matrix take one Adam step on their separate
/// moment estimates. Evaluation embeds `eval_set` with the current encoder
/// and scores mean average precision; the best evaluation state is what the
/// outcome carries as its model of record.
///
/// A non-finite loss aborts with the path of the last checkpoint written
/// (when an output directory is configured).
pub fn train(
    dataset: &[Sample],
    eval_set: Option<&[LabeledSample]>,
    encoder: EncoderModel,
    config: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome> {
    let mut encoder = encoder;
    encoder.set_normalize_output(config.normalize_output);
    validate_inputs(dataset, &encoder, config)?;
    let manifold = ManifoldState::init_from_projection(&encoder, dataset)?;
    run_loop(dataset, eval_set, encoder, manifold, config, outputs, 1)
}

/// Continues training from a saved encoder/manifold pair, starting at
/// `start_epoch` (1-based). The per-epoch streams match uninterrupted
/// training; optimizer moments start fresh.
pub fn train_continue(
    dataset: &[Sample],
    eval_set: Option<&[LabeledSample]>,
    encoder: EncoderModel,
    manifold: ManifoldState,
    config: &TrainConfig,
    outputs: &TrainOutputs,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    let mut encoder = encoder;
    encoder.set_normalize_output(config.normalize_output);
    validate_inputs(dataset, &encoder, config)?;
    if manifold.len() != dataset.len() || manifold.latent_dim() != config.latent_dim {
        return Err(DdError::ShapeMismatch {
            op: "train_continue",
            detail: format!(
                "manifold is {}x{} but expected {}x{}",
                manifold.len(),
                manifold.latent_dim(),
                dataset.len(),
                config.latent_dim
            ),
        });
    }
    run_loop(
        dataset, eval_set, encoder, manifold, config, outputs, start_epoch,
    )
}

fn validate_inputs(
    dataset: &[Sample],
    encoder: &EncoderModel,
    config: &TrainConfig,
) -> Result<()> {
    config.validate()?;
    let n = dataset.len();
    if n == 0 {
        return Err(DdError::InvalidArgument("empty training set".into()));
    }
    if config.batch_size > n {
        return Err(DdError::InvalidArgument(format!(
            "batch_size {} exceeds training-set size {n}",
            config.batch_size
        )));
    }
    if config.k > n {
        return Err(DdError::InvalidArgument(format!(
            "k = {} exceeds training-set size {n}",
            config.k
        )));
    }
    if encoder.output_dim() != config.latent_dim {
        return Err(DdError::ShapeMismatch {
            op: "train",
            detail: format!(
                "encoder produces {} dims but config.latent_dim is {}",
                encoder.output_dim(),
                config.latent_dim
            ),
        });
    }
    if config.snapshot_every > 0 && config.latent_dim != 2 {
        return Err(DdError::InvalidArgument(
            "latent snapshots need latent_dim = 2".into(),
        ));
    }
    Ok(())
}

fn run_loop(
    dataset: &[Sample],
    eval_set: Option<&[LabeledSample]>,
    mut encoder: EncoderModel,
    mut manifold: ManifoldState,
    config: &TrainConfig,
    outputs: &TrainOutputs,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    let n = dataset.len();
    let data_matrix = data::to_matrix(dataset)?;
    if data_matrix.cols() != encoder.input_dim() {
        return Err(DdError::ShapeMismatch {
            op: "train",
            detail: format!(
                "samples have dim {} but encoder input dim is {}",
                data_matrix.cols(),
                encoder.input_dim()
            ),
        });
    }
    let mut theta_state = AdamState::for_encoder(&encoder, config.learning_rate);
    let mut m_state = AdamState::new(
        &[(manifold.len(), manifold.latent_dim())],
        config.learning_rate,
    );
    let loss_params = LossParams {
        lambda: config.lambda,
        k: config.k,
        ..LossParams::default()
    };
    let augment_cfg = config.augment_config();

    let mut report = TrainReport::default();
    let mut best: Option<(EvalPoint, EncoderModel, ManifoldState)> = None;
    let mut last_checkpoint: Option<PathBuf> = None;

    let mut evaluate_at = |epoch: usize,
                           encoder: &EncoderModel,
                           manifold: &ManifoldState,
                           report: &mut TrainReport,
                           best: &mut Option<(EvalPoint, EncoderModel, ManifoldState)>|
     -> Result<()> {
        if let Some(eval_samples) = eval_set {
            let map = evaluate_embedded(encoder, eval_samples)?;
            let point = EvalPoint {
                epoch,
                map_percent: map,
            };
            report.evals.push(point);
            let improved = best
                .as_ref()
                .map(|(b, _, _)| map > b.map_percent)
                .unwrap_or(true);
            if improved {
                *best = Some((point, encoder.clone(), manifold.clone()));
            }
        }
        Ok(())
    };

    let snapshot_at = |epoch: usize, encoder: &EncoderModel| -> Result<()> {
        if config.snapshot_every == 0 {
            return Ok(());
        }
        if let Some(dir) = &outputs.dir {
            let path = dir.join(format!("snapshot_epoch_{epoch}.csv"));
            snapshot_latent(encoder, dataset, &path)?;
        }
        Ok(())
    };

    if start_epoch == 1 {
        evaluate_at(0, &encoder, &manifold, &mut report, &mut best)?;
        snapshot_at(0, &encoder)?;
    }

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in start_epoch..=config.epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(config.seed, epoch);
        order.sort_unstable();
        crate::encoder::shuffle(&mut order, &mut rng);
        let (mut fit_sum, mut smooth_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            // Augment per sample, consuming the stream in batch order.
            let mut batch = DenseMatrix::zeros(chunk.len(), data_matrix.cols());
            let mut ids = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                let x = data::augment(data_matrix.row(i), &augment_cfg, &mut rng);
                batch.row_mut(r).copy_from_slice(&x);
                ids.push(dataset[i].id);
            }
            let (features, cache) = encoder.forward(&batch)?;
            let step = loss::lmr_loss_and_grads(&features, &ids, &manifold, &loss_params);
            let (breakdown, grad_f, grad_m) = match step {
                Ok(v) => v,
                Err(e) if e.is_numerical() => {
                    return Err(abort_with_checkpoint(e, epoch, &last_checkpoint))
                }
                Err(e) => return Err(e),
            };
            let theta_grads = encoder.backward(&cache, &grad_f)?;
            encoder.adam_step(&mut theta_state, &theta_grads)?;
            m_state.apply(vec![manifold.matrix_mut()], &[&grad_m])?;
            fit_sum += breakdown.fit;
            smooth_sum += breakdown.smooth;
            total_sum += breakdown.total;
        }
        if !total_sum.is_finite() {
            return Err(abort_with_checkpoint(
                DdError::NonFinite {
                    context: "train",
                    detail: format!("epoch {epoch} loss is {total_sum}"),
                },
                epoch,
                &last_checkpoint,
            ));
        }
        report.epochs.push(EpochStats {
            epoch,
            fit: fit_sum,
            smooth: smooth_sum,
            total: total_sum,
            seconds: started.elapsed().as_secs_f64(),
        });

        let eval_due = config.eval_every > 0 && epoch % config.eval_every == 0;
        if eval_due || epoch == config.epochs {
            evaluate_at(epoch, &encoder, &manifold, &mut report, &mut best)?;
            if let Some(dir) = &outputs.dir {
                let enc_path = dir.join("encoder_last.ckpt");
                let man_path = dir.join("manifold_last.ckpt");
                encoder.save_checkpoint(&enc_path)?;
                manifold.save(&man_path)?;
                last_checkpoint = Some(enc_path);
            }
        }
        let snapshot_due = config.snapshot_every > 0 && epoch % config.snapshot_every == 0;
        if snapshot_due || (config.snapshot_every > 0 && epoch == config.epochs) {
            snapshot_at(epoch, &encoder)?;
        }
    }

    if std::env::var("DD_TIMING").is_ok() {
        crate::loss::dump_timing("loss");
    }
    report.best_map = best.as_ref().map(|(p, _, _)| *p);
    let (best_encoder, best_manifold) = match best {
        Some((_, e, m)) => (e, m),
        None => (encoder.clone(), manifold.clone()),
    };
    Ok(TrainOutcome {
        encoder: best_encoder,
        manifold: best_manifold,
        final_encoder: encoder,
        final_manifold: manifold,
        report,
    })
}

fn abort_with_checkpoint(
    cause: DdError,
    epoch: usize,
    last_checkpoint: &Option<PathBuf>,
) -> DdError {
    let suffix = match last_checkpoint {
        Some(p) => format!("last good checkpoint: {}", p.display()),
        None => "no checkpoint was written (no output directory)".to_string(),
    };
    DdError::Numerical(format!(
        "training aborted at epoch {epoch}: {cause}; {suffix}"
    ))
}

/// Embeds the evaluation samples with the current encoder and scores MAP.
fn evaluate_embedded(encoder: &EncoderModel, eval_set: &[LabeledSample]) -> Result<f64> {
    let mut feats = DenseMatrix::zeros(eval_set.len(), encoder.input_dim());
    for (i, s) in eval_set.iter().enumerate() {
        if s.feature.len() != encoder.input_dim() {
            return Err(DdError::ShapeMismatch {
                op: "evaluate",
                detail: format!(
                    "eval sample {} has dim {} but encoder input dim is {}",
                    s.id,
                    s.feature.len(),
                    encoder.input_dim()
                ),
            });
        }
        feats.row_mut(i).copy_from_slice(&s.feature);
    }
    let embedded = encoder.forward_features(&feats)?;
    let labeled: Vec<LabeledSample> = eval_set
        .iter()
        .enumerate()
        .map(|(i, s)| LabeledSample::new(s.id, s.label.clone(), embedded.row(i).to_vec()))
        .collect();
    eval::mean_average_precision(&labeled)
}

/// Converts labeled samples into the evaluator's input type, rejecting
/// samples without labels.
pub fn eval_set_from_samples(samples: &[Sample]) -> Result<Vec<LabeledSample>> {
    samples
        .iter()
        .map(|s| {
            let label = s.label.clone().ok_or_else(|| {
                DdError::InvalidArgument(format!("sample {} has no label", s.id))
            })?;
            Ok(LabeledSample::new(s.id, label, s.x.clone()))
        })
        .collect()
}

/// Writes `id,label,z1,z2` rows of every sample's embedded coordinates.
/// Only 2-D latent spaces can be snapshotted; otherwise use the feature
/// dump CSV, which handles any dimension.
pub fn snapshot_latent(encoder: &EncoderModel, dataset: &[Sample], path: &Path) -> Result<()> {
    if encoder.output_dim() != 2 {
        return Err(DdError::InvalidArgument(format!(
            "latent snapshots need a 2-D latent space, got {} dims; \
             write a feature CSV instead",
            encoder.output_dim()
        )));
    }
    let batch = data::to_matrix(dataset)?;
    let z = encoder.forward_features(&batch)?;
    let mut out = String::from("id,label,z1,z2\n");
    for (i, s) in dataset.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            s.id,
            s.label.as_deref().unwrap_or(""),
            z.get(i, 0),
            z.get(i, 1)
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Maximum pairwise Euclidean distance between embedded features.
pub fn latent_diameter(encoder: &EncoderModel, dataset: &[Sample]) -> Result<f64> {
    let batch = data::to_matrix(dataset)?;
    let z = encoder.forward_features(&batch)?;
    let mut best = 0.0_f64;
    for i in 0..z.rows() {
        for j in (i + 1)..z.rows() {
            let mut d2 = 0.0;
            for c in 0..z.cols() {
                let d = z.get(i, c) - z.get(j, c);
                d2 += d * d;
            }
            best = best.max(d2);
        }
    }
    Ok(best.sqrt())
}

/// Fixed recipe of the 2-D spiral study.
#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Neighborhood sizes to run (one training run per entry).
    pub ks: Vec<usize>,
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_width: usize,
    pub spiral_n: usize,
    pub pretrain_n: usize,
    pub eval_every: usize,
    pub snapshot_every: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 0,
            epochs: 6000,
            ks: vec![5, 20, 200],
            lambda: 1.0,
            batch_size: 50,
            learning_rate: 1e-4,
            hidden_width: 1000,
            spiral_n: 1000,
            pretrain_n: 10_000,
            eval_every: 50,
            snapshot_every: 2000,
        }
    }
}

/// Shared setup of the spiral study: the identity-pretrained encoder and
/// the spiral dataset. Prepared once, reused by every regime.
pub struct ToySetup {
    pub config: ToyConfig,
    pub encoder: EncoderModel,
    pub pretrain: PretrainReport,
    pub spiral: Vec<Sample>,
    pub eval_set: Vec<LabeledSample>,
}

impl ToySetup {
    /// Samples the uniform pretraining set, trains the encoder to the
    /// identity map, and generates the spiral.
    pub fn prepare(config: ToyConfig) -> Result<ToySetup> {
        let dims = vec![2, config.hidden_width, config.hidden_width, 2];
        let mut encoder = EncoderModel::init_he(&dims, config.seed)?;
        encoder.set_normalize_output(false);
        let uniform = data::gen_uniform(config.pretrain_n, config.seed)?;
        let points = data::to_matrix(&uniform)?;
        let pretrain = encoder.pretrain_identity(
            &points,
            &PretrainOptions {
                seed: config.seed,
                ..PretrainOptions::default()
            },
        )?;
        let spiral = data::gen_spiral(config.spiral_n, 3, config.seed)?;
        let eval_set = eval_set_from_samples(&spiral)?;
        Ok(ToySetup {
            config,
            encoder,
            pretrain,
            spiral,
            eval_set,
        })
    }

    /// Trains one regime (a `k`, `lambda` pair) from the shared pretrained
    /// encoder.
    pub fn run_regime(
        &self,
        k: usize,
        lambda: f64,
        outputs: &TrainOutputs,
    ) -> Result<ToyRunOutcome> {
        let cfg = TrainConfig {
            lambda,
            k,
            batch_size: self.config.batch_size,
            latent_dim: 2,
            learning_rate: self.config.learning_rate,
            epochs: self.config.epochs,
            seed: self.config.seed,
            normalize_output: false,
            augment_probability: 0.0,
            augment_jitter: 0.0,
            eval_every: self.config.eval_every,
            snapshot_every: self.config.snapshot_every,
            ..TrainConfig::default()
        };
        let initial_diameter = latent_diameter(&self.encoder, &self.spiral)?;
        let outcome = train(
            &self.spiral,
            Some(&self.eval_set),
            self.encoder.clone(),
            &cfg,
            outputs,
        )?;
        let final_diameter = latent_diameter(&outcome.final_encoder, &self.spiral)?;
        Ok(ToyRunOutcome {
            k,
            lambda,
            initial_diameter,
            final_diameter,
            outcome,
        })
    }
}

/// One spiral-study regime with its collapse diagnostics.
pub struct ToyRunOutcome {
    pub k: usize,
    pub lambda: f64,
    pub initial_diameter: f64,
    pub final_diameter: f64,
    pub outcome: TrainOutcome,
}

impl ToyRunOutcome {
    pub fn initial_map(&self) -> f64 {
        self.outcome.report.initial_map().unwrap_or(f64::NAN)
    }

    pub fn final_map(&self) -> f64 {
        self.outcome.report.final_map().unwrap_or(f64::NAN)
    }
}

/// Runs the full study: identity pretraining, then one training run per
/// neighborhood size, emitting per-run trajectories and snapshots under
/// `out_dir` when given.
pub fn toy_repro(config: ToyConfig, out_dir: Option<&Path>) -> Result<Vec<ToyRunOutcome>> {
    let setup = ToySetup::prepare(config)?;
    let mut runs = Vec::new();
    for &k in &setup.config.ks.clone() {
        let outputs = match out_dir {
            Some(dir) => {
                let run_dir = dir.join(format!("k{k}"));
                std::fs::create_dir_all(&run_dir)?;
                TrainOutputs::into_dir(run_dir)
            }
            None => TrainOutputs::none(),
        };
        let run = setup.run_regime(k, setup.config.lambda, &outputs)?;
        if let Some(dir) = &outputs.dir {
            std::fs::write(dir.join("losses.csv"), run.outcome.report.losses_csv())?;
            std::fs::write(dir.join("map.csv"), run.outcome.report.evals_csv())?;
        }
        runs.push(run);
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize) -> Vec<Sample> {
        data::gen_spiral(n, 3, 42).unwrap()
    }

    fn tiny_encoder(seed: u64) -> EncoderModel {
        let mut e = EncoderModel::init_he(&[2, 16, 2], seed).unwrap();
        e.set_normalize_output(false);
        e
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            lambda: 1.0,
            k: 3,
            batch_size: 6,
            latent_dim: 2,
            learning_rate: 1e-3,
            epochs: 3,
            seed: 1,
            normalize_output: false,
            augment_probability: 0.0,
            augment_jitter: 0.0,
            eval_every: 1,
            snapshot_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_text() {
        let cfg = tiny_config();
        let text = cfg.to_config_string();
        let parsed = TrainConfig::from_str(&text, "inline").unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        let err = TrainConfig::from_str("mystery = 1\n", "inline").unwrap_err();
        assert!(err.to_string().contains("unknown key `mystery`"));
        let err = TrainConfig::from_str("k = banana\n", "inline").unwrap_err();
        assert!(err.to_string().contains("bad count"));
        let err = TrainConfig::from_str("lambda = -2\n", "inline").unwrap_err();
        assert!(err.to_string().contains("nonnegative"));
        assert!(TrainConfig::from_str("# comment\n\nk = 7\n", "inline").is_ok());
    }

    #[test]
    fn zero_epochs_returns_inputs_unchanged() {
        let dataset = tiny_dataset(18);
        let encoder = tiny_encoder(3);
        let weights_before = encoder.layer_dims().to_vec();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let outcome = train(&dataset, None, encoder.clone(), &cfg, &TrainOutputs::none())
            .unwrap();
        assert_eq!(outcome.final_encoder.layer_dims(), &weights_before[..]);
        assert!(outcome.report.epochs.is_empty());
        // No eval set: report carries no evaluations either.
        assert!(outcome.report.evals.is_empty());
        // The manifold equals the random projection of the data.
        let projected =
            ManifoldState::init_from_projection(&outcome.final_encoder, &dataset).unwrap();
        assert_eq!(
            outcome.final_manifold.matrix().data(),
            projected.matrix().data()
        );
    }

    #[test]
    fn loss_decreases_on_tiny_instance_with_fitting_only() {
        // Full-batch fitting-only descent: the total loss over ten epochs
        // must drop.
        let dataset = tiny_dataset(9);
        let encoder = tiny_encoder(5);
        let cfg = TrainConfig {
            lambda: 0.0,
            k: 1,
            batch_size: 9,
            epochs: 10,
            learning_rate: 1e-2,
            eval_every: 0,
            ..tiny_config()
        };
        let outcome = train(&dataset, None, encoder, &cfg, &TrainOutputs::none()).unwrap();
        let first = outcome.report.epochs.first().unwrap().total;
        let last = outcome.report.epochs.last().unwrap().total;
        assert!(
            last < first,
            "loss failed to decrease: {first} -> {last}"
        );
    }

    #[test]
    fn report_totals_decompose() {
        let dataset = tiny_dataset(12);
        let outcome = train(
            &dataset,
            None,
            tiny_encoder(7),
            &tiny_config(),
            &TrainOutputs::none(),
        )
        .unwrap();
        for e in &outcome.report.epochs {
            assert!((e.total - (e.fit + 1.0 * e.smooth)).abs() < 1e-9);
        }
    }

    #[test]
    fn identical_seeds_reproduce_reports_bitwise() {
        let dataset = tiny_dataset(15);
        let eval_set = eval_set_from_samples(&dataset).unwrap();
        let cfg = TrainConfig {
            augment_probability: 0.5,
            augment_jitter: 0.01,
            ..tiny_config()
        };
        let a = train(
            &dataset,
            Some(&eval_set),
            tiny_encoder(11),
            &cfg,
            &TrainOutputs::none(),
        )
        .unwrap();
        let b = train(
            &dataset,
            Some(&eval_set),
            tiny_encoder(11),
            &cfg,
            &TrainOutputs::none(),
        )
        .unwrap();
        assert_eq!(a.report.numeric_fingerprint(), b.report.numeric_fingerprint());
        assert_eq!(
            a.final_manifold.matrix().data(),
            b.final_manifold.matrix().data()
        );
    }

    #[test]
    fn snapshot_matches_embedded_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(9);
        let encoder = tiny_encoder(13);
        let path = dir.path().join("snap.csv");
        snapshot_latent(&encoder, &dataset, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 10);
        assert_eq!(lines[0], "id,label,z1,z2");
        let batch = data::to_matrix(&dataset).unwrap();
        let z = encoder.forward_features(&batch).unwrap();
        for (i, line) in lines[1..].iter().enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields[0], dataset[i].id.to_string());
            assert_eq!(fields[2].parse::<f64>().unwrap(), z.get(i, 0));
            assert_eq!(fields[3].parse::<f64>().unwrap(), z.get(i, 1));
        }
    }

    #[test]
    fn snapshot_rejects_non_2d_latents() {
        let dataset = tiny_dataset(6);
        let mut enc = EncoderModel::init_he(&[2, 8, 3], 1).unwrap();
        enc.set_normalize_output(false);
        let err = snapshot_latent(&enc, &dataset, Path::new("/tmp/never.csv")).unwrap_err();
        assert!(err.to_string().contains("2-D"));
    }

    #[test]
    fn one_hot_targets_are_stable_across_epochs() {
        // IDs never change: train twice with different shuffles (different
        // seeds) and confirm the manifold row count and ID binding hold.
        let dataset = tiny_dataset(9);
        for seed in [1, 2] {
            let cfg = TrainConfig {
                seed,
                ..tiny_config()
            };
            let outcome =
                train(&dataset, None, tiny_encoder(17), &cfg, &TrainOutputs::none()).unwrap();
            assert_eq!(outcome.final_manifold.ids(), &(1..=9).collect::<Vec<u64>>()[..]);
        }
    }

    #[test]
    fn training_writes_checkpoints_when_directed() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(9);
        let eval_set = eval_set_from_samples(&dataset).unwrap();
        let cfg = TrainConfig {
            eval_every: 2,
            epochs: 4,
            ..tiny_config()
        };
        train(
            &dataset,
            Some(&eval_set),
            tiny_encoder(19),
            &cfg,
            &TrainOutputs::into_dir(dir.path()),
        )
        .unwrap();
        assert!(dir.path().join("encoder_last.ckpt").exists());
        assert!(dir.path().join("manifold_last.ckpt").exists());
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_training() {
        // Full-batch config: one optimizer step per epoch, so the loss of
        // the epoch after the checkpoint is exactly the "next-step loss".
        // Train 3 epochs straight through, then 2 epochs + save + reload +
        // continue; epoch 3's loss must agree to fine precision.
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(9);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 9,
            eval_every: 0,
            ..tiny_config()
        };
        let straight = train(
            &dataset,
            None,
            tiny_encoder(23),
            &cfg,
            &TrainOutputs::none(),
        )
        .unwrap();
        let cfg2 = TrainConfig {
            epochs: 2,
            eval_every: 2,
            ..cfg.clone()
        };
        train(
            &dataset,
            None,
            tiny_encoder(23),
            &cfg2,
            &TrainOutputs::into_dir(dir.path()),
        )
        .unwrap();
        let enc = EncoderModel::load_checkpoint(&dir.path().join("encoder_last.ckpt")).unwrap();
        let man = ManifoldState::load(&dir.path().join("manifold_last.ckpt")).unwrap();
        let resumed = train_continue(
            &dataset,
            None,
            enc,
            man,
            &cfg,
            &TrainOutputs::none(),
            3,
        )
        .unwrap();
        let straight_e3 = straight
            .report
            .epochs
            .iter()
            .find(|e| e.epoch == 3)
            .unwrap()
            .total;
        let resumed_e3 = resumed
            .report
            .epochs
            .iter()
            .find(|e| e.epoch == 3)
            .unwrap()
            .total;
        assert!(
            (straight_e3 - resumed_e3).abs() < 1e-9,
            "{straight_e3} vs {resumed_e3}"
        );
    }
}
