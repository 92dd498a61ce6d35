use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScores {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Single-label classification scores.
///
/// Macro averages run over every class that occurs as a gold or predicted
/// label. `positive_f1` is the F1 of the designated positive class, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub accuracy: f64,
    pub micro_f1: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub positive_f1: Option<f64>,
    pub per_relation: Vec<RelationScores>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p == r {
        p
    } else if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// `gold[i]` and `predicted[i]` index into `labels`.
pub fn compute_metrics(
    labels: &[String],
    gold: &[usize],
    predicted: &[usize],
    positive: Option<usize>,
) -> Metrics {
    assert_eq!(gold.len(), predicted.len(), "gold and predicted lengths differ");
    let k = labels.len();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fne = vec![0usize; k];
    for (&g, &p) in gold.iter().zip(predicted) {
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fne[g] += 1;
        }
    }
    let score = |c: usize| {
        let p = ratio(tp[c], tp[c] + fp[c]);
        let r = ratio(tp[c], tp[c] + fne[c]);
        RelationScores {
            label: labels[c].clone(),
            precision: p,
            recall: r,
            f1: f1(p, r),
            support: tp[c] + fne[c],
        }
    };
    let per_relation: Vec<RelationScores> = (0..k).map(score).collect();
    let seen: BTreeSet<usize> = gold.iter().chain(predicted).copied().collect();
    let macro_of = |f: fn(&RelationScores) -> f64| {
        if seen.is_empty() {
            0.0
        } else {
            seen.iter().map(|&c| f(&per_relation[c])).sum::<f64>() / seen.len() as f64
        }
    };
    let (stp, sfp, sfn) = (tp.iter().sum(), fp.iter().sum::<usize>(), fne.iter().sum::<usize>());
    let micro_p = ratio(stp, stp + sfp);
    let micro_r = ratio(stp, stp + sfn);
    Metrics {
        count: gold.len(),
        accuracy: ratio(stp, gold.len()),
        micro_f1: f1(micro_p, micro_r),
        macro_precision: macro_of(|s| s.precision),
        macro_f1: macro_of(|s| s.f1),
        positive_f1: positive.map(|c| per_relation[c].f1),
        per_relation,
    }
}
