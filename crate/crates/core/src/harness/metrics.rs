use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npcgp::{argmax, LogitsTriple};
use crate::tape::softmax_rows;
use crate::tape::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub f1: f64,
    pub acc: f64,
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Metric("AUC needs both positive and negative examples".into()));
    }
    // Rank-sum form with average ranks for ties.
    let mut all: Vec<(f64, bool)> = scores.iter().copied().zip(positive.iter().copied()).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += all[i..=j].iter().filter(|e| e.1).count() as f64 * avg;
        i = j + 1;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Binary AUC on the class-1 probability; macro one-vs-rest for more classes.
pub fn macro_auc(probs: &Mat, labels: &[usize]) -> Result<f64> {
    let k = probs.ncols();
    let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
    if present.len() < 2 {
        return Err(Error::Metric("AUC undefined: test set holds a single category".into()));
    }
    if k == 2 {
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return binary_auc(&probs.column(1).to_vec(), &pos);
    }
    let mut total = 0.0;
    for &c in &present {
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += binary_auc(&probs.column(c).to_vec(), &pos)?;
    }
    Ok(total / present.len() as f64)
}

/// Unweighted mean of per-class F1 over classes present in labels or
/// predictions.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..num_classes {
        let tp = preds.iter().zip(labels).filter(|(&p, &l)| p == c && l == c).count() as f64;
        let fp = preds.iter().zip(labels).filter(|(&p, &l)| p == c && l != c).count() as f64;
        let fn_ = preds.iter().zip(labels).filter(|(&p, &l)| p != c && l == c).count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        counted += 1;
        total += 2.0 * tp / (2.0 * tp + fp + fn_);
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len().max(1) as f64
}

pub fn evaluate_logits(triples: &[LogitsTriple], labels: &[usize]) -> Result<Metrics> {
    if triples.is_empty() || triples.len() != labels.len() {
        return Err(Error::Metric(format!("{} logit rows for {} labels", triples.len(), labels.len())));
    }
    let k = triples[0].num_classes();
    let logits = Mat::from_shape_fn((triples.len(), k), |(r, c)| triples[r].overall[c]);
    let probs = softmax_rows(&logits);
    let preds: Vec<usize> = triples.iter().map(|t| argmax(&t.overall)).collect();
    Ok(Metrics {
        auc: macro_auc(&probs, labels)?,
        f1: macro_f1(&preds, labels, k),
        acc: accuracy(&preds, labels),
    })
}

/// Mean and population standard deviation of each metric.
pub fn mean_std(rows: &[Metrics]) -> (Metrics, Metrics) {
    if rows.is_empty() {
        return (Metrics::default(), Metrics::default());
    }
    let n = rows.len() as f64;
    let stat = |f: fn(&Metrics) -> f64| {
        let mean = rows.iter().map(f).sum::<f64>() / n;
        let var = rows.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (auc, auc_sd) = stat(|m| m.auc);
    let (f1, f1_sd) = stat(|m| m.f1);
    let (acc, acc_sd) = stat(|m| m.acc);
    (
        Metrics { auc, f1, acc },
        Metrics {
            auc: auc_sd,
            f1: f1_sd,
            acc: acc_sd,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant_scores() {
        assert_eq!(binary_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(binary_auc(&[0.5; 4], &[false, true, false, true]).unwrap(), 0.5);
        assert!(binary_auc(&[0.5, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn six_bag_case_with_a_tie() {
        // positives 0.8, 0.4, 0.35; negatives 0.1, 0.4, 0.7
        // pairs won: 0.8 -> 3, 0.4 -> 1 + tie, 0.35 -> 1 => 5.5 / 9
        let scores = [0.8, 0.1, 0.4, 0.4, 0.35, 0.7];
        let pos = [true, false, true, false, true, false];
        assert!((binary_auc(&scores, &pos).unwrap() - 5.5 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn f1_and_accuracy() {
        let labels = [0, 0, 1, 1];
        assert_eq!(macro_f1(&labels, &labels, 2), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &labels), 0.75);
        // class 0: tp 1 fp 0 fn 1 -> 2/3; class 1: tp 2 fp 1 fn 0 -> 4/5
        assert!((macro_f1(&[0, 1, 1, 1], &labels, 2) - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_category_is_an_error() {
        let t = vec![LogitsTriple::from_scales(vec![1.0, 0.0], vec![1.0, 0.0]); 2];
        assert!(evaluate_logits(&t, &[0, 0]).is_err());
    }

    #[test]
    fn spread_of_identical_rows_is_zero() {
        let m = Metrics { auc: 0.9, f1: 0.8, acc: 0.7 };
        let (mean, sd) = mean_std(&[m; 5]);
        assert_eq!(mean, m);
        assert_eq!(sd, Metrics::default());
    }
}
