use serde::{Deserialize, Serialize};

use crate::dataset::PointId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: PointId,
    pub score: f64,
    pub truth: bool,
}

/// Orders scores numerically, with `-0.0` equal to `0.0`.
fn score_cmp(a: f64, b: f64) -> std::cmp::Ordering {
    (a + 0.0).total_cmp(&(b + 0.0))
}

fn check_scores(scores: impl Iterator<Item = f64>) -> Result<()> {
    for s in scores {
        if s.is_nan() {
            return Err(Error::Range("score is NaN".into()));
        }
    }
    Ok(())
}

/// Area under the ROC curve: the fraction of (positive, negative) pairs
/// ranked correctly, counting ties as one half. Computed from midranks in
/// `O(n log n)`.
pub fn auc_roc(scores: &[(f64, bool)]) -> Result<f64> {
    let n_pos = scores.iter().filter(|s| s.1).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC-ROC needs both classes".into()));
    }
    check_scores(scores.iter().map(|s| s.0))?;
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| score_cmp(a.0, b.0));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && score_cmp(sorted[j + 1].0, sorted[i].0).is_eq() {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = sorted[i..=j].iter().filter(|s| s.1).count();
        pos_rank_sum += mid * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of positives among the `k` highest scores, ties by ascending id.
pub fn precision_at_k(scores: &[Scored], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Range("precision@k needs k >= 1".into()));
    }
    if k > scores.len() {
        return Err(Error::Range(format!(
            "precision@{k} over only {} scored points",
            scores.len()
        )));
    }
    check_scores(scores.iter().map(|s| s.score))?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| score_cmp(b.score, a.score).then(a.id.cmp(&b.id)));
    Ok(sorted[..k].iter().filter(|s| s.truth).count() as f64 / k as f64)
}
