use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::objectives::Component;

use super::config::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top1: f64,
    pub top5: f64,
    /// Top-1 accuracy per class; `NaN`-free, classes absent from the split report 0.
    pub per_class: Vec<f64>,
    pub count: usize,
    /// Mean loss components over the evaluated clips, when computed.
    pub loss: BTreeMap<Component, f64>,
}

/// Position of `label` when classes are sorted by descending logit, ties
/// broken by lower class index first.
pub fn rank_of(logits: &Array1<f64>, label: usize) -> usize {
    let target = logits[label];
    logits.iter().enumerate().filter(|&(k, &v)| v > target || (v == target && k < label)).count()
}

/// Arg-max with ties going to the lowest class index.
pub fn predict(logits: &Array1<f64>) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

pub fn metrics_from_logits(logits: &[Array1<f64>], labels: &[usize], num_classes: usize) -> Result<Metrics> {
    if logits.is_empty() {
        return Err(Error::Insufficient("cannot evaluate an empty split".into()));
    }
    if logits.len() != labels.len() {
        return Err(invalid(format!("{} logit rows for {} labels", logits.len(), labels.len())));
    }
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut class_total = vec![0usize; num_classes];
    let mut class_hits = vec![0usize; num_classes];
    for (z, &y) in logits.iter().zip(labels) {
        if z.len() != num_classes || y >= num_classes {
            return Err(invalid(format!("logits of length {} / label {y} do not fit {num_classes} classes", z.len())));
        }
        let r = rank_of(z, y);
        class_total[y] += 1;
        if r == 0 {
            hits1 += 1;
            class_hits[y] += 1;
        }
        if r < 5 {
            hits5 += 1;
        }
    }
    let n = logits.len() as f64;
    let per_class = class_total
        .iter()
        .zip(&class_hits)
        .map(|(&t, &h)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect();
    Ok(Metrics { top1: hits1 as f64 / n, top5: hits5 as f64 / n, per_class, count: logits.len(), loss: BTreeMap::new() })
}

/// One line of the metric history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    pub components: BTreeMap<Component, f64>,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
}

impl EpochRecord {
    /// `epoch=N stage=S loss=... top1=...`
    pub fn line(&self) -> String {
        let mut s = format!("epoch={} stage={} loss={:.6}", self.epoch, self.stage, self.loss);
        for (c, v) in &self.components {
            s.push_str(&format!(" {c}={v:.6}"));
        }
        match (self.val_top1, self.val_top5) {
            (Some(t1), Some(t5)) => s.push_str(&format!(" top1={t1:.4} top5={t5:.4}")),
            _ => s.push_str(" top1=na"),
        }
        s
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Median of the last 10 step losses is below the median of the first 10.
pub fn loss_trend_ok(step_losses: &[f64]) -> bool {
    if step_losses.len() < 2 {
        return false;
    }
    let k = 10.min(step_losses.len() / 2).max(1);
    median(&step_losses[step_losses.len() - k..]) < median(&step_losses[..k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ties_go_to_lowest_index() {
        let z = array![1.0, 3.0, 3.0, 0.0];
        assert_eq!(predict(&z), 1);
        assert_eq!(rank_of(&z, 1), 0);
        assert_eq!(rank_of(&z, 2), 1);
        let m = metrics_from_logits(&[z.clone(), z], &[1, 2], 4).unwrap();
        assert_eq!(m.top1, 0.5);
        assert_eq!(m.top5, 1.0);
        assert_eq!(m.per_class, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_split_rejected() {
        assert!(metrics_from_logits(&[], &[], 3).is_err());
    }

    #[test]
    fn trend_flag() {
        let down: Vec<f64> = (0..40).map(|i| 3.0 - i as f64 * 0.05).collect();
        assert!(loss_trend_ok(&down));
        let up: Vec<f64> = down.iter().rev().copied().collect();
        assert!(!loss_trend_ok(&up));
    }
}
