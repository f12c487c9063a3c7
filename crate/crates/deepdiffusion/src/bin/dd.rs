//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for validation/input errors, 2 for
//! numerical failures.

use clap::{Args, Parser, Subcommand};
use deepdiffusion::baseline;
use deepdiffusion::data::{self, Sample};
use deepdiffusion::encoder::{EncoderModel, PretrainOptions};
use deepdiffusion::error::{DdError, Result};
use deepdiffusion::eval::{self, LabeledSample};
use deepdiffusion::extract::{self, DiffusionVector};
use deepdiffusion::manifold::ManifoldState;
use deepdiffusion::train::{self, ToyConfig, TrainConfig, TrainOutputs};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dd",
    about = "Unsupervised retrieval-adapted representation learning on a latent feature manifold"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Dataset selection shared by several subcommands: a CSV path or one of
/// the built-in generators (`spiral`, `uniform`).
#[derive(Args)]
struct DataArgs {
    /// Path to a feature CSV, or `spiral` / `uniform` to generate data.
    #[arg(long)]
    data: String,
    /// Number of generated points.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Number of spiral arms.
    #[arg(long, default_value_t = 3)]
    arms: usize,
    /// Generator seed.
    #[arg(long = "data-seed", default_value_t = 0)]
    data_seed: u64,
    /// Spiral jitter standard deviation.
    #[arg(long, default_value_t = data::SPIRAL_JITTER_STD)]
    jitter: f64,
}

impl DataArgs {
    fn load(&self) -> Result<Vec<Sample>> {
        match self.data.as_str() {
            "spiral" => {
                data::gen_spiral_with_jitter(self.n, self.arms, self.data_seed, self.jitter)
            }
            "uniform" => data::gen_uniform(self.n, self.data_seed),
            path => data::load_csv(Path::new(path)),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the encoder and manifold on a dataset.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Training configuration file (flat `key = value` lines).
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints, reports, and snapshots.
        #[arg(long)]
        out: PathBuf,
        /// Optional encoder checkpoint to start from (defaults to random
        /// initialization with the config seed).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Hidden layer widths for random initialization.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1000, 1000])]
        hidden: Vec<usize>,
    },
    /// Pretrain an encoder to the identity map on uniform 2-D points.
    Pretrain {
        /// Layer dimensions, comma separated (first and last must be 2).
        #[arg(long, value_delimiter = ',', default_values_t = vec![2, 1000, 1000, 2])]
        dims: Vec<usize>,
        /// Number of uniform training points.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Stop once the mean squared reconstruction error drops below this.
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the pretrained checkpoint.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract features with a trained encoder (and manifold for diffusion).
    Extract {
        #[command(flatten)]
        data: DataArgs,
        /// Extractor: `e` (embedded), `d` (diffused), or `ed` (fused).
        #[arg(long, default_value = "e")]
        mode: String,
        /// Encoder checkpoint.
        #[arg(long)]
        encoder: PathBuf,
        /// Manifold checkpoint (required for modes `d` and `ed`).
        #[arg(long)]
        manifold: Option<PathBuf>,
        /// Neighborhood size for diffusion sources and graph sparsification.
        #[arg(long, default_value_t = 20)]
        k: usize,
        /// Diffusion iterations.
        #[arg(long, default_value_t = 20)]
        r: usize,
        /// Output feature CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank a feature CSV by Euclidean distance, one list per query.
    Rank {
        /// Feature CSV (id,label,values...).
        #[arg(long)]
        features: PathBuf,
        /// Restrict to a single query ID (default: every sample).
        #[arg(long)]
        query: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score retrieval quality (mean average precision) of a feature CSV.
    Eval {
        #[arg(long)]
        features: PathBuf,
        /// Output report CSV (per-query AP plus the overall MAP).
        #[arg(long)]
        out: PathBuf,
    },
    /// Classical full-graph manifold ranking over a feature CSV.
    Baseline {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 0.99)]
        alpha: f64,
        /// Gaussian bandwidth; defaults to the median pairwise distance.
        #[arg(long)]
        sigma: Option<f64>,
        /// Restrict to a single query ID (default: every sample).
        #[arg(long)]
        query: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full 2-D spiral study (three neighborhood regimes).
    ToyRepro {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6000)]
        epochs: usize,
        /// Neighborhood sizes, one run per value.
        #[arg(long, value_delimiter = ',', default_values_t = vec![5, 20, 200])]
        ks: Vec<usize>,
        /// Smoothing weight (0 trains on the fitting term alone).
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        /// Hidden layer width of the toy encoder.
        #[arg(long, default_value_t = 1000)]
        width: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a latent snapshot CSV as an SVG scatter plot.
    Plot {
        /// Snapshot CSV (`id,label,z1,z2`).
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            data,
            config,
            out,
            init,
            hidden,
        } => cmd_train(data, &config, &out, init.as_deref(), &hidden),
        Command::Pretrain {
            dims,
            n,
            epochs,
            lr,
            threshold,
            seed,
            out,
        } => cmd_pretrain(&dims, n, epochs, lr, threshold, seed, &out),
        Command::Extract {
            data,
            mode,
            encoder,
            manifold,
            k,
            r,
            out,
        } => cmd_extract(data, &mode, &encoder, manifold.as_deref(), k, r, &out),
        Command::Rank {
            features,
            query,
            out,
        } => cmd_rank(&features, query, &out),
        Command::Eval { features, out } => cmd_eval(&features, &out),
        Command::Baseline {
            features,
            alpha,
            sigma,
            query,
            out,
        } => cmd_baseline(&features, alpha, sigma, query, &out),
        Command::ToyRepro {
            seed,
            epochs,
            ks,
            lambda,
            width,
            out,
        } => cmd_toy(seed, epochs, ks, lambda, width, &out),
        Command::Plot { input, out } => cmd_plot(&input, &out),
    }
}

fn cmd_train(
    data_args: DataArgs,
    config_path: &Path,
    out: &Path,
    init: Option<&Path>,
    hidden: &[usize],
) -> Result<()> {
    let config = TrainConfig::from_file(config_path)?;
    let dataset = data_args.load()?;
    std::fs::create_dir_all(out)?;
    let input_dim = dataset
        .first()
        .map(|s| s.x.len())
        .ok_or_else(|| DdError::InvalidArgument("empty dataset".into()))?;
    let encoder = match init {
        Some(path) => EncoderModel::load_checkpoint(path)?,
        None => {
            let mut dims = vec![input_dim];
            dims.extend_from_slice(hidden);
            dims.push(config.latent_dim);
            EncoderModel::init_he(&dims, config.seed)?
        }
    };
    // Labels, when present, drive periodic retrieval evaluation.
    let eval_set = if dataset.iter().all(|s| s.label.is_some()) {
        Some(train::eval_set_from_samples(&dataset)?)
    } else {
        None
    };
    data::write_csv(&out.join("data.csv"), &dataset)?;
    let outcome = train::train(
        &dataset,
        eval_set.as_deref(),
        encoder,
        &config,
        &TrainOutputs::into_dir(out),
    )?;
    outcome
        .encoder
        .save_checkpoint(&out.join("encoder_best.ckpt"))?;
    outcome.manifold.save(&out.join("manifold_best.ckpt"))?;
    outcome
        .final_encoder
        .save_checkpoint(&out.join("encoder_final.ckpt"))?;
    outcome
        .final_manifold
        .save(&out.join("manifold_final.ckpt"))?;
    std::fs::write(out.join("losses.csv"), outcome.report.losses_csv())?;
    std::fs::write(out.join("map.csv"), outcome.report.evals_csv())?;
    if let Some(best) = outcome.report.best_map {
        println!("best MAP {:.2}% at epoch {}", best.map_percent, best.epoch);
    }
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn cmd_pretrain(
    dims: &[usize],
    n: usize,
    epochs: usize,
    lr: f64,
    threshold: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let mut encoder = EncoderModel::init_he(dims, seed)?;
    encoder.set_normalize_output(false);
    let points = data::to_matrix(&data::gen_uniform(n, seed)?)?;
    let report = encoder.pretrain_identity(
        &points,
        &PretrainOptions {
            epochs,
            learning_rate: lr,
            mse_threshold: threshold,
            seed,
            ..PretrainOptions::default()
        },
    )?;
    encoder.save_checkpoint(out)?;
    println!(
        "pretrained {} epochs, final mse {:.3e} (threshold {}): {}",
        report.epochs_run,
        report.final_mse,
        threshold,
        if report.reached_threshold {
            "reached"
        } else {
            "budget exhausted"
        }
    );
    Ok(())
}

fn cmd_extract(
    data_args: DataArgs,
    mode: &str,
    encoder_path: &Path,
    manifold_path: Option<&Path>,
    k: usize,
    r: usize,
    out: &Path,
) -> Result<()> {
    let encoder = EncoderModel::load_checkpoint(encoder_path)?;
    let dataset = data_args.load()?;
    let needs_manifold = mode != "e";
    let manifold = match (needs_manifold, manifold_path) {
        (true, Some(p)) => Some(ManifoldState::load(p)?),
        (true, None) => {
            return Err(DdError::InvalidArgument(format!(
                "mode `{mode}` needs --manifold"
            )))
        }
        (false, _) => None,
    };
    let graph = match &manifold {
        Some(m) => Some(m.build_sparse_similarity(k)?),
        None => None,
    };
    let mut features = Vec::with_capacity(dataset.len());
    for s in &dataset {
        let e = extract::extract_embedded(&encoder, &s.x)?;
        let feature = match mode {
            "e" => e,
            "d" | "ed" => {
                let m = manifold.as_ref().unwrap();
                let g = graph.as_ref().unwrap();
                let g0 = extract::diffusion_source(&e, m, k)?;
                let d: DiffusionVector = extract::diffuse(&g0, g, r)?;
                if mode == "d" {
                    d.values().to_vec()
                } else {
                    extract::fuse(&e, &d)
                }
            }
            other => {
                return Err(DdError::InvalidArgument(format!(
                    "unknown extractor mode `{other}` (expected e, d, or ed)"
                )))
            }
        };
        features.push(Sample::new(s.id, feature, s.label.clone()));
    }
    data::write_csv(out, &features)?;
    println!(
        "wrote {} feature rows ({} mode) to {}",
        features.len(),
        mode,
        out.display()
    );
    Ok(())
}

fn load_labeled(path: &Path) -> Result<Vec<LabeledSample>> {
    let samples = data::load_csv(path)?;
    samples
        .iter()
        .map(|s| {
            let label = s.label.clone().ok_or_else(|| {
                DdError::InvalidArgument(format!(
                    "sample {} has no label; evaluation needs labeled data",
                    s.id
                ))
            })?;
            Ok(LabeledSample::new(s.id, label, s.x.clone()))
        })
        .collect()
}

fn cmd_rank(features: &Path, query: Option<u64>, out: &Path) -> Result<()> {
    let corpus = load_labeled(features)?;
    let queries: Vec<&LabeledSample> = match query {
        Some(id) => vec![corpus
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| DdError::InvalidArgument(format!("query id {id} not found")))?],
        None => corpus.iter().collect(),
    };
    let mut text = String::from("query_id,ranked_ids\n");
    for q in queries {
        let ranked = eval::rank(q, &corpus)?;
        let ids: Vec<String> = ranked.ranked_ids.iter().map(|i| i.to_string()).collect();
        writeln!(text, "{},{}", q.id, ids.join(" ")).unwrap();
    }
    std::fs::write(out, text)?;
    println!("rankings written to {}", out.display());
    Ok(())
}

fn cmd_eval(features: &Path, out: &Path) -> Result<()> {
    let corpus = load_labeled(features)?;
    let report = eval::evaluate(&corpus)?;
    eval::write_map_report(out, &report)?;
    println!(
        "MAP = {:.2}% over {} queries",
        report.map_percent,
        report.per_query.len()
    );
    Ok(())
}

fn cmd_baseline(
    features: &Path,
    alpha: f64,
    sigma: Option<f64>,
    query: Option<u64>,
    out: &Path,
) -> Result<()> {
    let corpus = data::load_csv(features)?;
    let matrix = data::to_matrix(&corpus)?;
    let sigma = match sigma {
        Some(s) => s,
        None => baseline::median_pairwise_distance(&matrix)?,
    };
    let graph = baseline::build_graph(&matrix, sigma, alpha)?;
    let ids: Vec<u64> = corpus.iter().map(|s| s.id).collect();
    let queries: Vec<u64> = match query {
        Some(id) => {
            if !ids.contains(&id) {
                return Err(DdError::InvalidArgument(format!("query id {id} not found")));
            }
            vec![id]
        }
        None => ids.clone(),
    };
    let mut text = String::from("query_id,ranked_ids\n");
    for (row, &qid) in ids.iter().enumerate() {
        if !queries.contains(&qid) {
            continue;
        }
        // Ranking scores index rows 1..=N in file order.
        let scores = baseline::solve_closed_form(&graph, row as u64 + 1)?;
        let mut order: Vec<usize> = (0..ids.len()).filter(|&i| i != row).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
        let ranked: Vec<String> = order.iter().map(|&i| ids[i].to_string()).collect();
        writeln!(text, "{qid},{}", ranked.join(" ")).unwrap();
    }
    std::fs::write(out, text)?;
    println!(
        "manifold-ranking lists (alpha={alpha}, sigma={sigma:.4}) written to {}",
        out.display()
    );
    Ok(())
}

fn cmd_toy(
    seed: u64,
    epochs: usize,
    ks: Vec<usize>,
    lambda: f64,
    width: usize,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let config = ToyConfig {
        seed,
        epochs,
        ks,
        lambda,
        hidden_width: width,
        ..ToyConfig::default()
    };
    let runs = train::toy_repro(config, Some(out))?;
    let mut summary = String::from(
        "k,lambda,initial_map,final_map,best_map,best_epoch,initial_diameter,final_diameter\n",
    );
    for run in &runs {
        let best = run.outcome.report.best_map;
        writeln!(
            summary,
            "{},{},{},{},{},{},{},{}",
            run.k,
            run.lambda,
            run.initial_map(),
            run.final_map(),
            best.map(|b| b.map_percent).unwrap_or(f64::NAN),
            best.map(|b| b.epoch).unwrap_or(0),
            run.initial_diameter,
            run.final_diameter
        )
        .unwrap();
        println!(
            "k={}: MAP {:.2}% -> {:.2}% (best {:.2}%), diameter {:.3} -> {:.3}",
            run.k,
            run.initial_map(),
            run.final_map(),
            best.map(|b| b.map_percent).unwrap_or(f64::NAN),
            run.initial_diameter,
            run.final_diameter
        );
    }
    std::fs::write(out.join("summary.csv"), summary)?;
    println!("study artifacts written to {}", out.display());
    Ok(())
}

const PLOT_COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn cmd_plot(input: &Path, out: &Path) -> Result<()> {
    let samples = data::load_csv(input)?;
    if samples.iter().any(|s| s.x.len() != 2) {
        return Err(DdError::InvalidArgument(
            "plot expects 2-D snapshot rows (id,label,z1,z2)".into(),
        ));
    }
    // Distinct labels in first-appearance order pick their colors.
    let mut labels: Vec<String> = Vec::new();
    for s in &samples {
        let l = s.label.clone().unwrap_or_default();
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for s in &samples {
        min_x = min_x.min(s.x[0]);
        max_x = max_x.max(s.x[0]);
        min_y = min_y.min(s.x[1]);
        max_y = max_y.max(s.x[1]);
    }
    let span_x = (max_x - min_x).max(1e-9);
    let span_y = (max_y - min_y).max(1e-9);
    let size = 640.0;
    let margin = 40.0;
    let scale = (size - 2.0 * margin) / span_x.max(span_y);
    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
    .unwrap();
    for s in &samples {
        let l = s.label.clone().unwrap_or_default();
        let color_idx = labels.iter().position(|x| *x == l).unwrap_or(0);
        let cx = margin + (s.x[0] - min_x) * scale;
        let cy = size - margin - (s.x[1] - min_y) * scale;
        writeln!(
            svg,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"2.5\" fill=\"{}\" fill-opacity=\"0.8\"/>",
            PLOT_COLORS[color_idx % PLOT_COLORS.len()]
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    std::fs::write(out, svg)?;
    println!("plot written to {}", out.display());
    Ok(())
}
