use crate::error::{Error, Result};

/// Scores paired with binary labels, `1` marking anomalous items.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("labels must be 0 or 1, got {l}")));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::invalid("scores must not be NaN"));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn extend(&mut self, other: &LabeledScores) {
        self.scores.extend_from_slice(&other.scores);
        self.labels.extend_from_slice(&other.labels);
    }
}

/// Normalized Mann-Whitney statistic: the fraction of (anomalous, normal)
/// pairs ordered correctly, ties counting one half.
pub fn auroc(data: &LabeledScores) -> Result<f64> {
    let positives = data.labels.iter().filter(|&&l| l == 1).count();
    let negatives = data.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {positives} anomalous and {negatives} normal"
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.scores[a].total_cmp(&data.scores[b]));

    // Sum of 1-based ranks of the positives, ties sharing their average rank.
    // Ranks are multiples of ½, so the sum is exact in f64.
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let score = data.scores[order[start]];
        let mut end = start + 1;
        while end < order.len() && data.scores[order[end]] == score {
            end += 1;
        }
        let avg_rank = (start + 1 + end) as f64 / 2.0;
        let tied_pos = order[start..end]
            .iter()
            .filter(|&&i| data.labels[i] == 1)
            .count();
        rank_sum += avg_rank * tied_pos as f64;
        start = end;
    }
    let (p, n) = (positives as f64, negatives as f64);
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labeled(scores: &[f64], labels: &[u8]) -> LabeledScores {
        LabeledScores::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    #[test]
    fn perfect_separation() {
        assert_eq!(auroc(&labeled(&[0.9, 0.1], &[1, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&labeled(&[0.1, 0.9], &[1, 0])).unwrap(), 0.0);
    }

    #[test]
    fn all_ties_give_half() {
        assert_eq!(auroc(&labeled(&[0.3; 5], &[1, 0, 0, 1, 0])).unwrap(), 0.5);
    }

    #[test]
    fn one_wrong_pair_of_four() {
        assert_eq!(
            auroc(&labeled(&[0.2, 0.8, 0.4, 0.6], &[0, 1, 1, 0])).unwrap(),
            0.75
        );
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            auroc(&labeled(&[0.2, 0.8], &[0, 0])),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            auroc(&labeled(&[], &[])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(LabeledScores::new(vec![0.1], vec![]).is_err());
        assert!(LabeledScores::new(vec![0.1], vec![2]).is_err());
        assert!(LabeledScores::new(vec![f64::NAN], vec![1]).is_err());
    }
}
