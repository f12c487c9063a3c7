//! Synthetic dataset generators, CSV ingestion, and training-time
//! augmentation.

use crate::error::{DdError, Result};
use crate::matrix::DenseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

/// One data point: a stable ID, coordinates, and an optional category label.
/// Labels exist for evaluation only; the training path never reads them.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub x: Vec<f64>,
    pub label: Option<String>,
}

impl Sample {
    pub fn new(id: u64, x: Vec<f64>, label: Option<String>) -> Self {
        Sample { id, x, label }
    }
}

/// Default jitter applied to the spiral arms.
pub const SPIRAL_JITTER_STD: f64 = 0.01;

// Arm parametrization: radius grows linearly from 0.1 to 0.95 while the
// angle sweeps 0.8 pi, which keeps the arms non-intersecting and separated
// enough that Euclidean retrieval on the raw points lands near the expected
// starting accuracy of the 2-D study.
const SPIRAL_RHO_BASE: f64 = 0.1;
const SPIRAL_RHO_GAIN: f64 = 0.85;
const SPIRAL_SWEEP: f64 = 0.8 * std::f64::consts::PI;

/// Spiral arm coordinates at parameter `t` in `[0, 1)`, before jitter.
pub fn spiral_point(arm: usize, arms: usize, t: f64) -> (f64, f64) {
    let rho = SPIRAL_RHO_BASE + SPIRAL_RHO_GAIN * t;
    let phi = 2.0 * std::f64::consts::PI * arm as f64 / arms as f64 + SPIRAL_SWEEP * t;
    (rho * phi.cos(), rho * phi.sin())
}

/// Multi-arm spiral in `[-1, 1]^2` with Gaussian jitter and the arm index
/// as label. When `n` is not a multiple of `arms`, the leading arms carry
/// one extra point each. IDs are assigned 1..=n in arm-major order and stay
/// fixed thereafter.
pub fn gen_spiral(n: usize, arms: usize, seed: u64) -> Result<Vec<Sample>> {
    gen_spiral_with_jitter(n, arms, seed, SPIRAL_JITTER_STD)
}

/// Spiral generator with an explicit jitter standard deviation.
pub fn gen_spiral_with_jitter(
    n: usize,
    arms: usize,
    seed: u64,
    jitter_std: f64,
) -> Result<Vec<Sample>> {
    if arms == 0 || n < arms {
        return Err(DdError::InvalidArgument(format!(
            "spiral needs at least one point per arm; got n = {n}, arms = {arms}"
        )));
    }
    if jitter_std < 0.0 || !jitter_std.is_finite() {
        return Err(DdError::InvalidArgument(format!(
            "jitter std must be nonnegative, got {jitter_std}"
        )));
    }
    let base = n / arms;
    let remainder = n % arms;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut samples = Vec::with_capacity(n);
    let mut id = 1u64;
    for arm in 0..arms {
        let count = base + usize::from(arm < remainder);
        for i in 0..count {
            let t = i as f64 / count as f64;
            let (mut x, mut y) = spiral_point(arm, arms, t);
            if jitter_std > 0.0 {
                x += jitter_std * normal.sample(&mut rng);
                y += jitter_std * normal.sample(&mut rng);
            }
            samples.push(Sample::new(
                id,
                vec![x.clamp(-1.0, 1.0), y.clamp(-1.0, 1.0)],
                Some(arm.to_string()),
            ));
            id += 1;
        }
    }
    Ok(samples)
}

/// `n` points i.i.d. uniform on `[-1, 1]^2`, unlabeled, IDs 1..=n.
pub fn gen_uniform(n: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(DdError::InvalidArgument("need at least one point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((1..=n as u64)
        .map(|id| {
            let x = rng.gen_range(-1.0..=1.0);
            let y = rng.gen_range(-1.0..=1.0);
            Sample::new(id, vec![x, y], None)
        })
        .collect())
}

/// Augmentation knobs: each sample is jittered with the given probability.
#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub probability: f64,
    pub jitter_std: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            probability: 0.8,
            jitter_std: 0.01,
        }
    }
}

impl AugmentConfig {
    /// Configuration that leaves every sample untouched.
    pub fn disabled() -> Self {
        AugmentConfig {
            probability: 0.0,
            jitter_std: 0.0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.probability > 0.0 && self.jitter_std > 0.0
    }
}

/// With probability `config.probability`, adds isotropic Gaussian jitter;
/// otherwise returns the input unchanged.
pub fn augment<R: Rng>(x: &[f64], config: &AugmentConfig, rng: &mut R) -> Vec<f64> {
    if !config.is_active() {
        return x.to_vec();
    }
    let gate: f64 = rng.gen_range(0.0..1.0);
    if gate >= config.probability {
        return x.to_vec();
    }
    let normal = Normal::new(0.0, config.jitter_std).expect("positive std");
    x.iter().map(|v| v + normal.sample(rng)).collect()
}

/// Stacks sample coordinates into an N x d matrix (row order preserved).
pub fn to_matrix(samples: &[Sample]) -> Result<DenseMatrix> {
    if samples.is_empty() {
        return Err(DdError::InvalidArgument("no samples".into()));
    }
    let d = samples[0].x.len();
    let mut data = Vec::with_capacity(samples.len() * d);
    for (i, s) in samples.iter().enumerate() {
        if s.x.len() != d {
            return Err(DdError::ShapeMismatch {
                op: "to_matrix",
                detail: format!("sample {i} has dim {} but first has {d}", s.x.len()),
            });
        }
        data.extend_from_slice(&s.x);
    }
    DenseMatrix::from_vec(samples.len(), d, data)
}

/// Reads the feature CSV schema `id,label,<d feature columns>`.
///
/// The label field may be empty. Malformed rows, duplicate IDs, and
/// inconsistent widths are rejected with their line number.
pub fn load_csv(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    parse_csv(&text, &name)
}

fn parse_csv(text: &str, name: &str) -> Result<Vec<Sample>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| DdError::Parse {
        path: name.to_string(),
        line: 1,
        detail: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "label" {
        return Err(DdError::Parse {
            path: name.to_string(),
            line: 1,
            detail: "expected header `id,label,<feature columns>`".into(),
        });
    }
    let width = cols.len();
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(DdError::Parse {
                path: name.to_string(),
                line: lineno,
                detail: format!("expected {width} fields, got {}", fields.len()),
            });
        }
        let id: u64 = fields[0].parse().map_err(|_| DdError::Parse {
            path: name.to_string(),
            line: lineno,
            detail: format!("bad id `{}`", fields[0]),
        })?;
        if !seen.insert(id) {
            return Err(DdError::Parse {
                path: name.to_string(),
                line: lineno,
                detail: format!("duplicate id {id}"),
            });
        }
        let label = if fields[1].is_empty() {
            None
        } else {
            Some(fields[1].to_string())
        };
        let x: Vec<f64> = fields[2..]
            .iter()
            .map(|t| {
                t.parse::<f64>().map_err(|_| DdError::Parse {
                    path: name.to_string(),
                    line: lineno,
                    detail: format!("bad value `{t}`"),
                })
            })
            .collect::<Result<_>>()?;
        samples.push(Sample::new(id, x, label));
    }
    if samples.is_empty() {
        return Err(DdError::Parse {
            path: name.to_string(),
            line: 1,
            detail: "no data rows".into(),
        });
    }
    Ok(samples)
}

/// Writes the feature CSV schema; values use the shortest decimal form
/// that parses back to the identical float.
pub fn write_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(DdError::InvalidArgument("no samples to write".into()));
    }
    let d = samples[0].x.len();
    let mut out = String::from("id,label");
    for c in 0..d {
        write!(out, ",v{c}").unwrap();
    }
    out.push('\n');
    for s in samples {
        write!(out, "{},{}", s.id, s.label.as_deref().unwrap_or("")).unwrap();
        for v in &s.x {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_base_points_sit_at_arm_angles() {
        let samples = gen_spiral_with_jitter(3, 3, 0, 0.0).unwrap();
        for (a, s) in samples.iter().enumerate() {
            let phi = 2.0 * std::f64::consts::PI * a as f64 / 3.0;
            assert!((s.x[0] - 0.1 * phi.cos()).abs() < 1e-12);
            assert!((s.x[1] - 0.1 * phi.sin()).abs() < 1e-12);
            assert_eq!(s.label.as_deref(), Some(format!("{a}").as_str()));
        }
    }

    #[test]
    fn spiral_labels_partition_evenly_and_ids_are_stable() {
        let samples = gen_spiral(300, 3, 1).unwrap();
        for arm in 0..3 {
            let count = samples
                .iter()
                .filter(|s| s.label.as_deref() == Some(&arm.to_string()))
                .count();
            assert_eq!(count, 100);
        }
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.id, i as u64 + 1);
            assert!(s.x.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn spiral_arms_do_not_intersect() {
        // Dense sampling of the jitter-free curves; arm pairs must stay
        // separated for all t in (0, 1].
        let steps = 2000;
        let mut min_gap = f64::INFINITY;
        for i in 1..=steps {
            let t = i as f64 / steps as f64;
            let p0 = spiral_point(0, 3, t);
            for arm in 1..3 {
                for j in 1..=steps {
                    let u = j as f64 / steps as f64;
                    let p = spiral_point(arm, 3, u);
                    let d = ((p.0 - p0.0).powi(2) + (p.1 - p0.1).powi(2)).sqrt();
                    min_gap = min_gap.min(d);
                }
            }
        }
        assert!(min_gap > 0.05, "arms approach within {min_gap}");
    }

    #[test]
    fn spiral_distributes_remainders_and_rejects_empty_arms() {
        let samples = gen_spiral(1000, 3, 0).unwrap();
        assert_eq!(samples.len(), 1000);
        let count = |arm: &str| {
            samples
                .iter()
                .filter(|s| s.label.as_deref() == Some(arm))
                .count()
        };
        assert_eq!(count("0"), 334);
        assert_eq!(count("1"), 333);
        assert_eq!(count("2"), 333);
        assert!(gen_spiral(0, 3, 0).is_err());
        assert!(gen_spiral(2, 3, 0).is_err());
    }

    #[test]
    fn spiral_is_deterministic_per_seed() {
        assert_eq!(gen_spiral(30, 3, 7).unwrap(), gen_spiral(30, 3, 7).unwrap());
        assert_ne!(gen_spiral(30, 3, 7).unwrap(), gen_spiral(30, 3, 8).unwrap());
    }

    #[test]
    fn uniform_stays_in_the_square_with_centered_mean() {
        let samples = gen_uniform(10_000, 3).unwrap();
        let mut mean = [0.0, 0.0];
        for s in &samples {
            assert!(s.x.iter().all(|v| (-1.0..=1.0).contains(v)));
            mean[0] += s.x[0];
            mean[1] += s.x[1];
        }
        for m in mean {
            assert!((m / 10_000.0).abs() < 0.05);
        }
        assert_eq!(gen_uniform(100, 5).unwrap(), gen_uniform(100, 5).unwrap());
    }

    #[test]
    fn augment_switch_offs_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = vec![0.25, -0.75];
        let no_prob = AugmentConfig {
            probability: 0.0,
            jitter_std: 0.05,
        };
        assert_eq!(augment(&x, &no_prob, &mut rng), x);
        let no_std = AugmentConfig {
            probability: 1.0,
            jitter_std: 0.0,
        };
        assert_eq!(augment(&x, &no_std, &mut rng), x);
    }

    #[test]
    fn augment_jitter_std_matches_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = AugmentConfig {
            probability: 1.0,
            jitter_std: 0.02,
        };
        let x = vec![0.0, 0.0];
        let mut deltas = Vec::new();
        for _ in 0..10_000 {
            let y = augment(&x, &cfg, &mut rng);
            deltas.push(y[0]);
            deltas.push(y[1]);
        }
        let var: f64 = deltas.iter().map(|v| v * v).sum::<f64>() / deltas.len() as f64;
        let std = var.sqrt();
        assert!((std - 0.02).abs() < 0.002, "empirical std {std}");
    }

    #[test]
    fn csv_round_trip_preserves_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let samples = gen_spiral(30, 3, 9).unwrap();
        write_csv(&path, &samples).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(loaded, samples);
    }

    #[test]
    fn csv_empty_label_becomes_none() {
        let text = "id,label,v0,v1\n1,,0.5,0.25\n2,cat,1.0,2.0\n";
        let samples = parse_csv(text, "test").unwrap();
        assert_eq!(samples[0].label, None);
        assert_eq!(samples[1].label.as_deref(), Some("cat"));
    }

    #[test]
    fn csv_duplicate_id_names_the_line() {
        let text = "id,label,v0\n1,a,0.1\n2,a,0.2\n3,a,0.3\n4,a,0.4\n5,a,0.5\n6,a,0.6\n2,a,0.7\n";
        let err = parse_csv(text, "test").unwrap_err();
        match err {
            DdError::Parse { line, detail, .. } => {
                assert_eq!(line, 8);
                assert!(detail.contains("duplicate id 2"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_inconsistent_width_and_bad_values() {
        let narrow = "id,label,v0,v1\n1,a,0.1\n";
        assert!(matches!(
            parse_csv(narrow, "t"),
            Err(DdError::Parse { line: 2, .. })
        ));
        let bad = "id,label,v0\n1,a,zebra\n";
        assert!(matches!(
            parse_csv(bad, "t"),
            Err(DdError::Parse { line: 2, .. })
        ));
        let bad_header = "idx,label,v0\n1,a,0.5\n";
        assert!(matches!(
            parse_csv(bad_header, "t"),
            Err(DdError::Parse { line: 1, .. })
        ));
    }
}
