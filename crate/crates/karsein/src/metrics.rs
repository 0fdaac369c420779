//! Ranking and probability metrics for binary classifiers.

use crate::error::{Error, Result};

/// Area under the ROC curve via the rank-sum statistic.
///
/// Ties receive average ranks, which makes this exactly equal to the
/// all-pairs definition: P(score_pos > score_neg) + 0.5 * P(tie).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::data(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data(
            "auc undefined: need at least one positive and one negative".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie group [i, j]
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    let u = rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// Average binary cross-entropy with predictions clamped to
/// `[1e-7, 1 - 1e-7]` before the logs.
pub fn logloss(preds: &[f64], labels: &[u8]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::data("logloss of empty input".to_string()));
    }
    if preds.len() != labels.len() {
        return Err(Error::data(format!(
            "logloss: {} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let eps = 1e-7;
    let mut acc = 0.0;
    for (&p, &y) in preds.iter().zip(labels) {
        let p = p.clamp(eps, 1.0 - eps);
        acc += if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(-acc / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    /// Brute-force all-pairs AUC oracle.
    pub(crate) fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_perfect_and_inverted() {
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0, 0, 1, 1];
        assert_relative_eq!(auc(&scores, &labels).unwrap(), 1.0);
        let inv = [1, 1, 0, 0];
        assert_relative_eq!(auc(&scores, &inv).unwrap(), 0.0);
    }

    #[test]
    fn auc_with_ties_matches_bruteforce() {
        let scores = [0.5, 0.5, 0.5, 0.2, 0.9];
        let labels = [1, 0, 1, 0, 1];
        assert_relative_eq!(
            auc(&scores, &labels).unwrap(),
            auc_bruteforce(&scores, &labels),
            epsilon = 1e-15
        );
    }

    #[test]
    fn auc_random_matches_bruteforce() {
        let mut rng = crate::rng::seeded(77, 0);
        for _ in 0..5 {
            let n = 400;
            // quantized scores so ties actually occur
            let scores: Vec<f64> =
                (0..n).map(|_| (rng.random_range(0..50) as f64) / 50.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            if labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1) {
                continue;
            }
            assert_relative_eq!(
                auc(&scores, &labels).unwrap(),
                auc_bruteforce(&scores, &labels),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn auc_rejects_degenerate_labels() {
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auc(&[0.1, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn logloss_uniform_is_ln2() {
        let preds = [0.5; 6];
        let labels = [0, 1, 0, 1, 1, 0];
        assert_relative_eq!(logloss(&preds, &labels).unwrap(), (2.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn logloss_confident_is_clamp_bounded() {
        let preds = [1.0, 0.0];
        let labels = [1, 0];
        let ll = logloss(&preds, &labels).unwrap();
        assert!(ll > 0.0 && ll < 1.1e-7, "clamped loss {ll}");
    }

    #[test]
    fn logloss_hand_value() {
        let ll = logloss(&[0.9, 0.1], &[1, 0]).unwrap();
        assert_relative_eq!(ll, -(0.9f64.ln()), epsilon = 1e-9);
        assert_relative_eq!(ll, 0.105360515, epsilon = 1e-8);
    }

    #[test]
    fn logloss_empty_is_error() {
        assert!(logloss(&[], &[]).is_err());
    }
}
