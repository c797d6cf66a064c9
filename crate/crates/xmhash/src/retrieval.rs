//! Hamming-space retrieval and its evaluation metrics.
//!
//! Codes are packed into u64 words so distances are popcounts. Ranking ties
//! are broken by database index, which keeps every metric deterministic.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sign codes packed 64 bits per word, one row of words per instance.
/// Bit j of an instance is set when the code entry is positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    pub bits: Vec<Vec<u64>>,
    pub code_length: usize,
}

impl PackedCodes {
    /// Pack a +-1 matrix. Zero entries count as +1, matching the
    /// quantization rule used everywhere else.
    pub fn pack(codes: &DMatrix<f64>) -> Self {
        let l = codes.ncols();
        let words = l.div_ceil(64);
        let bits = (0..codes.nrows())
            .map(|i| {
                let mut row = vec![0u64; words];
                for j in 0..l {
                    if codes[(i, j)] >= 0.0 {
                        row[j / 64] |= 1u64 << (j % 64);
                    }
                }
                row
            })
            .collect();
        PackedCodes {
            bits,
            code_length: l,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn hamming(&self, i: usize, other: &PackedCodes, j: usize) -> u32 {
        self.bits[i]
            .iter()
            .zip(&other.bits[j])
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// Distances from one query row to every database row.
pub fn hamming_distances(query: &PackedCodes, qi: usize, database: &PackedCodes) -> Vec<u32> {
    (0..database.len())
        .map(|j| query.hamming(qi, database, j))
        .collect()
}

/// Two label sets are relevant when they share at least one label.
pub fn labels_relevant(a: &[u32], b: &[u32]) -> bool {
    a.iter().any(|l| b.contains(l))
}

/// Average precision of one ranked list: mean of precision-at-hit over all
/// relevant database items. Returns None when nothing is relevant.
fn average_precision(distances: &[u32], relevant: &[bool]) -> Option<f64> {
    let total_relevant = relevant.iter().filter(|&&r| r).count();
    if total_relevant == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by_key(|&j| (distances[j], j));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &j) in order.iter().enumerate() {
        if relevant[j] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total_relevant as f64)
}

/// Metrics for one query-modality -> database-modality task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// "m0->m1"-style task name.
    pub task: String,
    pub map: f64,
    pub prec_at_radius: f64,
    pub radius: u32,
    pub num_queries: usize,
    /// Queries with no relevant database item: excluded from the averages but
    /// still reported.
    pub skipped_queries: usize,
    /// Expected precision of a random ranking: mean relevant fraction.
    pub label_prior: f64,
}

/// Evaluate one task: query codes against database codes under label
/// relevance.
pub fn evaluate_task(
    task: String,
    query_codes: &PackedCodes,
    database_codes: &PackedCodes,
    query_labels: &[Vec<u32>],
    database_labels: &[Vec<u32>],
    radius: u32,
) -> Result<RetrievalResult> {
    if query_codes.len() != query_labels.len() || database_codes.len() != database_labels.len() {
        return Err(Error::dims("codes and labels disagree on instance count"));
    }
    if query_codes.code_length != database_codes.code_length {
        return Err(Error::dims("query and database code lengths differ"));
    }
    if database_codes.is_empty() {
        return Err(Error::invalid("database must be non-empty"));
    }
    let per_query: Vec<(Option<f64>, f64, f64)> = (0..query_codes.len())
        .into_par_iter()
        .map(|qi| {
            let distances = hamming_distances(query_codes, qi, database_codes);
            let relevant: Vec<bool> = database_labels
                .iter()
                .map(|dl| labels_relevant(&query_labels[qi], dl))
                .collect();
            let ap = average_precision(&distances, &relevant);
            // precision within the Hamming ball; zero when the ball is empty
            let mut in_ball = 0usize;
            let mut in_ball_relevant = 0usize;
            for (j, &d) in distances.iter().enumerate() {
                if d <= radius {
                    in_ball += 1;
                    if relevant[j] {
                        in_ball_relevant += 1;
                    }
                }
            }
            let prec = if in_ball == 0 {
                0.0
            } else {
                in_ball_relevant as f64 / in_ball as f64
            };
            let prior =
                relevant.iter().filter(|&&r| r).count() as f64 / database_labels.len() as f64;
            (ap, prec, prior)
        })
        .collect();
    let scored: Vec<&(Option<f64>, f64, f64)> =
        per_query.iter().filter(|(ap, _, _)| ap.is_some()).collect();
    let skipped = per_query.len() - scored.len();
    let denom = scored.len().max(1) as f64;
    Ok(RetrievalResult {
        task,
        map: scored.iter().map(|(ap, _, _)| ap.unwrap()).sum::<f64>() / denom,
        prec_at_radius: scored.iter().map(|(_, p, _)| p).sum::<f64>() / denom,
        radius,
        num_queries: per_query.len(),
        skipped_queries: skipped,
        label_prior: scored.iter().map(|(_, _, pr)| pr).sum::<f64>() / denom,
    })
}

/// Evaluate every ordered cross-modal pair (query modality m, database
/// modality t, m != t); with one modality, the single within-modality task.
pub fn evaluate_all_tasks(
    query_codes: &[PackedCodes],
    database_codes: &[PackedCodes],
    query_labels: &[Vec<u32>],
    database_labels: &[Vec<u32>],
    radius: u32,
) -> Result<Vec<RetrievalResult>> {
    if query_codes.len() != database_codes.len() || query_codes.is_empty() {
        return Err(Error::dims(
            "need the same non-zero modality count on both sides",
        ));
    }
    let m = query_codes.len();
    let pairs: Vec<(usize, usize)> = if m == 1 {
        vec![(0, 0)]
    } else {
        (0..m)
            .flat_map(|a| (0..m).filter(move |&b| b != a).map(move |b| (a, b)))
            .collect()
    };
    pairs
        .into_iter()
        .map(|(a, b)| {
            evaluate_task(
                format!("m{a}->m{b}"),
                &query_codes[a],
                &database_codes[b],
                query_labels,
                database_labels,
                radius,
            )
        })
        .collect()
}

/// One row per task, columns suitable for plotting.
pub fn write_results_csv(path: &Path, results: &[RetrievalResult]) -> Result<()> {
    let mut out = String::from("task,map,prec_at_radius,radius,num_queries,skipped_queries,label_prior\n");
    for r in results {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.task, r.map, r.prec_at_radius, r.radius, r.num_queries, r.skipped_queries, r.label_prior
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_results_json(path: &Path, results: &[RetrievalResult]) -> Result<()> {
    let json = serde_json::to_string_pretty(results)
        .map_err(|e| Error::Config(format!("serialize results: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn codes(rows: &[&[f64]]) -> PackedCodes {
        let l = rows[0].len();
        let m = DMatrix::from_fn(rows.len(), l, |i, j| rows[i][j]);
        PackedCodes::pack(&m)
    }

    #[test]
    fn packing_and_distance() {
        let c = codes(&[&[1.0, -1.0, 1.0], &[1.0, 1.0, -1.0], &[1.0, -1.0, 1.0]]);
        assert_eq!(c.hamming(0, &c, 1), 2);
        assert_eq!(c.hamming(0, &c, 2), 0);
        assert_eq!(c.hamming(1, &c, 1), 0);
    }

    #[test]
    fn packing_beyond_64_bits() {
        let l = 70;
        let a = DMatrix::from_fn(1, l, |_, _| 1.0);
        let mut b = a.clone();
        b[(0, 0)] = -1.0;
        b[(0, 69)] = -1.0;
        let pa = PackedCodes::pack(&a);
        let pb = PackedCodes::pack(&b);
        assert_eq!(pa.bits[0].len(), 2);
        assert_eq!(pa.hamming(0, &pb, 0), 2);
    }

    #[test]
    fn zero_entries_pack_as_positive() {
        let a = codes(&[&[0.0, -1.0]]);
        let b = codes(&[&[1.0, -1.0]]);
        assert_eq!(a.hamming(0, &b, 0), 0);
    }

    #[test]
    fn average_precision_oracle() {
        // ranks of relevant items: 1, 3, 5 -> AP = (1 + 2/3 + 3/5) / 3
        let distances = vec![0, 1, 2, 3, 4];
        let relevant = vec![true, false, true, false, true];
        let ap = average_precision(&distances, &relevant).unwrap();
        assert_relative_eq!(ap, (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn average_precision_ties_break_by_index() {
        // all distances equal: ranking is database order
        let distances = vec![5, 5, 5];
        let relevant = vec![false, true, true];
        let ap = average_precision(&distances, &relevant).unwrap();
        assert_relative_eq!(ap, (1.0 / 2.0 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn no_relevant_query_is_skipped_but_counted() {
        let q = codes(&[&[1.0, 1.0], &[-1.0, -1.0]]);
        let db = codes(&[&[1.0, 1.0], &[-1.0, -1.0]]);
        let q_labels = vec![vec![0], vec![9]]; // label 9 absent from database
        let db_labels = vec![vec![0], vec![1]];
        let r = evaluate_task("t".into(), &q, &db, &q_labels, &db_labels, 2).unwrap();
        assert_eq!(r.num_queries, 2);
        assert_eq!(r.skipped_queries, 1);
        assert_relative_eq!(r.map, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn precision_at_radius_zero_when_ball_empty() {
        let q = codes(&[&[1.0, 1.0, 1.0, 1.0]]);
        let db = codes(&[&[-1.0, -1.0, -1.0, -1.0]]);
        let r = evaluate_task("t".into(), &q, &db, &[vec![0]], &[vec![0]], 2).unwrap();
        assert_eq!(r.prec_at_radius, 0.0);
        assert_relative_eq!(r.map, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn precision_at_radius_counts_ball_members() {
        let q = codes(&[&[1.0, 1.0, 1.0, 1.0]]);
        let db = codes(&[
            &[1.0, 1.0, 1.0, 1.0],    // d=0, relevant
            &[-1.0, 1.0, 1.0, 1.0],   // d=1, irrelevant
            &[-1.0, -1.0, -1.0, 1.0], // d=3, outside ball
        ]);
        let r = evaluate_task(
            "t".into(),
            &q,
            &db,
            &[vec![0]],
            &[vec![0], vec![1], vec![0]],
            2,
        )
        .unwrap();
        assert_relative_eq!(r.prec_at_radius, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn perfect_codes_give_map_one() {
        // two clusters with opposite codes
        let q = codes(&[&[1.0, 1.0], &[-1.0, -1.0]]);
        let db = codes(&[&[1.0, 1.0], &[1.0, 1.0], &[-1.0, -1.0], &[-1.0, -1.0]]);
        let q_labels = vec![vec![0], vec![1]];
        let db_labels = vec![vec![0], vec![0], vec![1], vec![1]];
        let r = evaluate_task("t".into(), &q, &db, &q_labels, &db_labels, 2).unwrap();
        assert_relative_eq!(r.map, 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.label_prior, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn multilabel_relevance_shares_any_label() {
        assert!(labels_relevant(&[0, 2], &[2, 5]));
        assert!(!labels_relevant(&[0, 2], &[1, 5]));
        assert!(!labels_relevant(&[], &[1]));
    }

    #[test]
    fn all_tasks_are_ordered_pairs() {
        let c = codes(&[&[1.0, 1.0]]);
        let labels = vec![vec![0]];
        let results =
            evaluate_all_tasks(&[c.clone(), c.clone(), c.clone()], &[c.clone(), c.clone(), c.clone()], &labels, &labels, 2)
                .unwrap();
        let names: Vec<&str> = results.iter().map(|r| r.task.as_str()).collect();
        assert_eq!(
            names,
            vec!["m0->m1", "m0->m2", "m1->m0", "m1->m2", "m2->m0", "m2->m1"]
        );
    }

    #[test]
    fn single_modality_evaluates_self_task() {
        let c = codes(&[&[1.0, -1.0]]);
        let results = evaluate_all_tasks(
            &[c.clone()],
            &[c.clone()],
            &[vec![0]],
            &[vec![0]],
            2,
        )
        .unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].task, "m0->m0");
    }

    #[test]
    fn results_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let results = vec![RetrievalResult {
            task: "m0->m1".into(),
            map: 0.9,
            prec_at_radius: 0.8,
            radius: 2,
            num_queries: 10,
            skipped_queries: 1,
            label_prior: 0.33,
        }];
        let json_path = dir.path().join("results.json");
        write_results_json(&json_path, &results).unwrap();
        let back: Vec<RetrievalResult> =
            serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        assert_eq!(back[0].task, "m0->m1");
        assert_relative_eq!(back[0].map, 0.9);
        let csv_path = dir.path().join("results.csv");
        write_results_csv(&csv_path, &results).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert!(text.lines().count() == 2);
        assert!(text.contains("m0->m1"));
    }
}
