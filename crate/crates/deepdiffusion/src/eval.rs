//! Distance-ranked retrieval and mean average precision scoring.

use crate::error::{DdError, Result};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

/// A sample carrying the ground-truth category used for scoring.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: u64,
    pub label: String,
    pub feature: Vec<f64>,
}

impl LabeledSample {
    pub fn new(id: u64, label: impl Into<String>, feature: Vec<f64>) -> Self {
        LabeledSample {
            id,
            label: label.into(),
            feature,
        }
    }
}

/// Retrieval result for one query: the other samples' IDs in ascending
/// Euclidean distance, ties broken toward the lower ID.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub query_id: u64,
    pub ranked_ids: Vec<u64>,
}

/// Ranks the corpus against the query by Euclidean distance. The query
/// itself (matched by ID) is excluded from the list.
pub fn rank(query: &LabeledSample, corpus: &[LabeledSample]) -> Result<RankedList> {
    let d = query.feature.len();
    let mut scored = Vec::with_capacity(corpus.len());
    for s in corpus {
        if s.feature.len() != d {
            return Err(DdError::ShapeMismatch {
                op: "rank",
                detail: format!(
                    "sample {} has dim {} but query has {d}",
                    s.id,
                    s.feature.len()
                ),
            });
        }
        if s.id == query.id {
            continue;
        }
        let mut d2 = 0.0;
        for (a, b) in s.feature.iter().zip(&query.feature) {
            let diff = a - b;
            d2 += diff * diff;
        }
        scored.push((d2, s.id));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(RankedList {
        query_id: query.id,
        ranked_ids: scored.into_iter().map(|(_, id)| id).collect(),
    })
}

/// Average precision of a ranked list: mean of precision-at-rank over the
/// positions of relevant items, normalized by the number of relevant items
/// in the corpus.
pub fn average_precision(ranked: &RankedList, corpus: &[LabeledSample]) -> Result<f64> {
    let query_label = corpus
        .iter()
        .find(|s| s.id == ranked.query_id)
        .map(|s| s.label.clone())
        .ok_or_else(|| {
            DdError::InvalidArgument(format!("query {} not in corpus", ranked.query_id))
        })?;
    let labels: std::collections::HashMap<u64, &str> = corpus
        .iter()
        .map(|s| (s.id, s.label.as_str()))
        .collect();
    let relevant_total = corpus
        .iter()
        .filter(|s| s.id != ranked.query_id && s.label == query_label)
        .count();
    if relevant_total == 0 {
        return Err(DdError::InvalidArgument(format!(
            "query {} has no relevant items (label `{query_label}` is unique)",
            ranked.query_id
        )));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, id) in ranked.ranked_ids.iter().enumerate() {
        if labels.get(id).copied() == Some(query_label.as_str()) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(sum / relevant_total as f64)
}

/// Mean average precision over all queries (each sample once as query),
/// reported as a percentage.
pub fn mean_average_precision(samples: &[LabeledSample]) -> Result<f64> {
    Ok(evaluate(samples)?.map_percent)
}

/// Per-query APs plus the aggregate MAP.
#[derive(Debug, Clone)]
pub struct MapReport {
    pub per_query: Vec<(u64, f64)>,
    pub map_percent: f64,
}

/// Runs every sample as a query and aggregates.
pub fn evaluate(samples: &[LabeledSample]) -> Result<MapReport> {
    if samples.len() < 2 {
        return Err(DdError::InvalidArgument(
            "need at least two samples to evaluate retrieval".into(),
        ));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.label.as_str()).or_insert(0) += 1;
    }
    if counts.values().any(|&c| c < 2) {
        let detail: Vec<String> = counts
            .iter()
            .map(|(label, c)| format!("`{label}`: {c}"))
            .collect();
        return Err(DdError::InvalidArgument(format!(
            "every label needs at least 2 samples; got {}",
            detail.join(", ")
        )));
    }
    let aps: Vec<Result<(u64, f64)>> = samples
        .par_iter()
        .map(|q| {
            let ranked = rank(q, samples)?;
            Ok((q.id, average_precision(&ranked, samples)?))
        })
        .collect();
    let per_query: Vec<(u64, f64)> = aps.into_iter().collect::<Result<_>>()?;
    let mut total = 0.0;
    for &(_, ap) in &per_query {
        total += ap;
    }
    Ok(MapReport {
        map_percent: 100.0 * total / per_query.len() as f64,
        per_query,
    })
}

/// Writes `query_id,average_precision` rows followed by an `overall` row
/// with the MAP percentage.
pub fn write_map_report(path: &Path, report: &MapReport) -> Result<()> {
    let mut out = String::from("query_id,average_precision\n");
    for (id, ap) in &report.per_query {
        writeln!(out, "{id},{ap}").unwrap();
    }
    writeln!(out, "overall,{}", report.map_percent).unwrap();
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(id: u64, label: &str, feature: Vec<f64>) -> LabeledSample {
        LabeledSample::new(id, label, feature)
    }

    #[test]
    fn rank_single_other_sample() {
        let q = sample(1, "a", vec![0.0, 0.0]);
        let corpus = vec![q.clone(), sample(2, "a", vec![1.0, 0.0])];
        let r = rank(&q, &corpus).unwrap();
        assert_eq!(r.ranked_ids, vec![2]);
    }

    #[test]
    fn rank_breaks_distance_ties_by_lower_id() {
        let q = sample(5, "a", vec![0.0]);
        let corpus = vec![
            q.clone(),
            sample(9, "a", vec![1.0]),
            sample(2, "a", vec![1.0]),
            sample(7, "a", vec![-1.0]),
        ];
        let r = rank(&q, &corpus).unwrap();
        assert_eq!(r.ranked_ids, vec![2, 7, 9]);
    }

    #[test]
    fn rank_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let corpus: Vec<LabeledSample> = (1..=40)
            .map(|id| {
                sample(
                    id,
                    "x",
                    (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        for q in corpus.iter().take(5) {
            let r = rank(q, &corpus).unwrap();
            let mut oracle: Vec<(f64, u64)> = corpus
                .iter()
                .filter(|s| s.id != q.id)
                .map(|s| {
                    let d: f64 = s
                        .feature
                        .iter()
                        .zip(&q.feature)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    (d, s.id)
                })
                .collect();
            oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<u64> = oracle.into_iter().map(|(_, id)| id).collect();
            assert_eq!(r.ranked_ids, want);
        }
    }

    #[test]
    fn rank_rejects_dimension_mismatch() {
        let q = sample(1, "a", vec![0.0, 0.0]);
        let corpus = vec![q.clone(), sample(2, "a", vec![1.0])];
        assert!(rank(&q, &corpus).is_err());
    }

    #[test]
    fn perfect_ranking_has_unit_ap() {
        let corpus = vec![
            sample(1, "a", vec![0.0]),
            sample(2, "a", vec![0.1]),
            sample(3, "a", vec![0.2]),
            sample(4, "b", vec![5.0]),
            sample(5, "b", vec![5.1]),
        ];
        let r = rank(&corpus[0], &corpus).unwrap();
        assert!((average_precision(&r, &corpus).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_relevant_at_rank_two_gives_half() {
        let corpus = vec![
            sample(1, "a", vec![0.0]),
            sample(2, "b", vec![0.1]),
            sample(3, "a", vec![0.3]),
            sample(4, "b", vec![9.0]),
        ];
        let r = rank(&corpus[0], &corpus).unwrap();
        assert_eq!(r.ranked_ids[0], 2);
        assert!((average_precision(&r, &corpus).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_positional_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let corpus: Vec<LabeledSample> = (1..=30)
            .map(|id| {
                sample(
                    id,
                    if rng.gen_bool(0.4) { "a" } else { "b" },
                    (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let q = &corpus[3];
        let r = rank(q, &corpus).unwrap();
        let got = average_precision(&r, &corpus).unwrap();
        // Exhaustive positional oracle.
        let rel: Vec<bool> = r
            .ranked_ids
            .iter()
            .map(|id| corpus.iter().find(|s| s.id == *id).unwrap().label == q.label)
            .collect();
        let total_rel = rel.iter().filter(|&&b| b).count();
        let mut hits = 0;
        let mut acc = 0.0;
        for (i, &is_rel) in rel.iter().enumerate() {
            if is_rel {
                hits += 1;
                acc += hits as f64 / (i + 1) as f64;
            }
        }
        let want = acc / total_rel as f64;
        assert!((got - want).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn ap_rejects_query_with_no_relevant_items() {
        let corpus = vec![
            sample(1, "only", vec![0.0]),
            sample(2, "b", vec![0.1]),
            sample(3, "b", vec![0.2]),
        ];
        let r = rank(&corpus[0], &corpus).unwrap();
        assert!(average_precision(&r, &corpus).is_err());
    }

    #[test]
    fn map_of_two_same_label_samples_is_100() {
        let corpus = vec![sample(1, "a", vec![0.0]), sample(2, "a", vec![3.0])];
        assert!((mean_average_precision(&corpus).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn map_of_perfectly_clustered_labels_is_100() {
        let mut corpus = Vec::new();
        let mut id = 1;
        for (label, center) in [("a", 0.0), ("b", 10.0), ("c", -10.0)] {
            for i in 0..4 {
                corpus.push(sample(id, label, vec![center + 0.01 * i as f64]));
                id += 1;
            }
        }
        assert!((mean_average_precision(&corpus).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn map_rejects_degenerate_label_distribution() {
        let corpus = vec![
            sample(1, "a", vec![0.0]),
            sample(2, "a", vec![0.1]),
            sample(3, "lonely", vec![0.2]),
        ];
        let err = mean_average_precision(&corpus).unwrap_err();
        assert!(err.to_string().contains("lonely"));
    }

    #[test]
    fn map_is_invariant_under_isometry_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let corpus: Vec<LabeledSample> = (1..=24)
            .map(|id| {
                sample(
                    id,
                    if id % 3 == 0 { "a" } else { "b" },
                    (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        let base = mean_average_precision(&corpus).unwrap();
        // Rotation by 0.7 rad, translation, and uniform scaling by 3.
        let (c, s) = (0.7_f64.cos(), 0.7_f64.sin());
        let moved: Vec<LabeledSample> = corpus
            .iter()
            .map(|p| {
                let (x, y) = (p.feature[0], p.feature[1]);
                sample(
                    p.id,
                    &p.label,
                    vec![3.0 * (c * x - s * y) + 5.0, 3.0 * (s * x + c * y) - 2.0],
                )
            })
            .collect();
        let transformed = mean_average_precision(&moved).unwrap();
        assert!((base - transformed).abs() < 1e-9);
        assert!((0.0..=100.0).contains(&base));
    }
}
