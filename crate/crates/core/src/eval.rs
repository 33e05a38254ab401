//! Identity accuracy under the optimal cluster→identity matching.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::assign;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_identities: usize,
    pub detections: usize,
    /// `confusion[cluster][identity]` counts.
    pub confusion: Vec<Vec<u64>>,
    /// `matching[cluster] = identity`.
    pub matching: Vec<usize>,
    pub accuracy: f64,
    pub per_identity_recall: Vec<f64>,
}

pub fn evaluate(assignments: &[usize], gt_labels: &[Option<u32>], n_identities: usize) -> Result<EvalReport> {
    if assignments.len() != gt_labels.len() {
        return Err(Error::Dimension(format!(
            "{} assignments but {} labels",
            assignments.len(),
            gt_labels.len()
        )));
    }
    if n_identities == 0 {
        return Err(Error::Config("n_identities must be >= 1".into()));
    }
    if assignments.is_empty() {
        return Err(Error::Coverage("nothing to evaluate".into()));
    }
    let mut confusion = vec![vec![0u64; n_identities]; n_identities];
    for (i, (&c, &g)) in assignments.iter().zip(gt_labels).enumerate() {
        let g = g.ok_or_else(|| Error::Coverage(format!("detection {i} has no ground-truth label")))? as usize;
        if c >= n_identities || g >= n_identities {
            return Err(Error::Data(format!(
                "detection {i}: cluster {c} / label {g} outside 0..{n_identities}"
            )));
        }
        confusion[c][g] += 1;
    }
    let scores = Array2::from_shape_fn((n_identities, n_identities), |(c, g)| confusion[c][g] as f64);
    let solved = assign::solve_max(scores.view())?;
    let mut matching = vec![0usize; n_identities];
    for &(c, g) in &solved.pairs {
        matching[c] = g;
    }
    let correct: u64 = solved.pairs.iter().map(|&(c, g)| confusion[c][g]).sum();
    let detections = assignments.len();
    let per_identity_recall = (0..n_identities)
        .map(|g| {
            let total: u64 = confusion.iter().map(|row| row[g]).sum();
            let c = matching.iter().position(|&m| m == g).unwrap();
            if total == 0 {
                0.0
            } else {
                confusion[c][g] as f64 / total as f64
            }
        })
        .collect();
    Ok(EvalReport {
        n_identities,
        detections,
        confusion,
        matching,
        accuracy: correct as f64 / detections as f64,
        per_identity_recall,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy {:.4} over {} detections", self.accuracy, self.detections)?;
        writeln!(f, "{:>8} {:>8} {:>8}", "cluster", "identity", "recall")?;
        for (c, &g) in self.matching.iter().enumerate() {
            writeln!(f, "{:>8} {:>8} {:>8.4}", c, g, self.per_identity_recall[g])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[u32]) -> Vec<Option<u32>> {
        v.iter().map(|&x| Some(x)).collect()
    }

    #[test]
    fn relabeling_is_free() {
        let r = evaluate(&[0, 0, 1, 1], &labels(&[1, 1, 0, 0]), 2).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.matching, vec![1, 0]);
    }

    #[test]
    fn two_thirds() {
        let r = evaluate(&[0, 1, 1], &labels(&[0, 0, 1]), 2).unwrap();
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identity_case() {
        let r = evaluate(&[0, 1, 2, 2], &labels(&[0, 1, 2, 2]), 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.matching, vec![0, 1, 2]);
        assert_eq!(r.per_identity_recall, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn single_cluster_hits_majority_class() {
        let gt = labels(&[0, 1, 1, 2, 1, 0]);
        let r = evaluate(&[0; 6], &gt, 3).unwrap();
        assert!((r.accuracy - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unknown_label_is_coverage_error() {
        assert!(matches!(evaluate(&[0, 1], &[Some(0), None], 2), Err(Error::Coverage(_))));
        assert!(matches!(evaluate(&[0, 2], &labels(&[0, 1]), 2), Err(Error::Data(_))));
    }

    #[test]
    fn report_serializes_confusion() {
        let r = evaluate(&[0, 1], &labels(&[1, 1]), 2).unwrap();
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["confusion"], serde_json::json!([[0, 1], [0, 1]]));
        assert!(r.to_string().starts_with("accuracy 0.5000"));
    }
}
