//! Supervised contrastive, two-view InfoNCE, cross-entropy and
//! temperature-scaled distillation losses, with analytic gradients.
//!
//! All reductions go through log-sum-exp. The `*_grad` functions accept
//! arbitrary rows so they can be checked against finite differences; the
//! batch-typed entry points validate the documented invariants first.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::fusion::Logits;
use crate::nn::{log_sum_exp, softmax};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewTag {
    Dark,
    Retinex,
    Fast,
    Slow,
}

/// Rows of unit-norm embeddings with their labels and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
    pub view_tags: Vec<ViewTag>,
    pub clip_ids: Vec<u32>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>, view_tags: Vec<ViewTag>, clip_ids: Vec<u32>) -> Result<Self> {
        let b = embeddings.nrows();
        if labels.len() != b || view_tags.len() != b || clip_ids.len() != b {
            return Err(shape(format!(
                "{b} embedding rows but {} labels, {} view tags, {} clip ids",
                labels.len(),
                view_tags.len(),
                clip_ids.len()
            )));
        }
        for (i, row) in embeddings.axis_iter(Axis(0)).enumerate() {
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::Invariant(format!("embedding row {i} has norm {norm}")));
            }
        }
        Ok(Self { embeddings, labels, view_tags, clip_ids })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks the class-balanced layout: `B = 2 n_c n_v` rows, `2 n_v` per class.
    pub fn check_supcon_layout(&self, n_c: usize, n_v: usize) -> Result<()> {
        if self.len() != 2 * n_c * n_v {
            return Err(Error::Invariant(format!("batch has {} rows, expected 2*{n_c}*{n_v}", self.len())));
        }
        let mut counts = BTreeMap::new();
        for &l in &self.labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        if counts.len() != n_c || counts.values().any(|&c| c != 2 * n_v) {
            return Err(Error::Invariant(format!("class counts {counts:?} do not match {n_c} classes x {} rows", 2 * n_v)));
        }
        Ok(())
    }
}

/// Indices sharing the anchor's label (positives) and the rest (negatives), anchor excluded.
pub fn positive_negative_sets(labels: &[usize], anchor: usize) -> (Vec<usize>, Vec<usize>) {
    let y = labels[anchor];
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (j, &l) in labels.iter().enumerate() {
        if j == anchor {
            continue;
        }
        if l == y {
            pos.push(j);
        } else {
            neg.push(j);
        }
    }
    (pos, neg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Ce,
    SupCon,
    Kd,
    Ssl,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Ce => "ce",
            Component::SupCon => "supcon",
            Component::Kd => "kd",
            Component::Ssl => "ssl",
        })
    }
}

/// Weighted sum of named loss terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub components: BTreeMap<Component, f64>,
    pub weights: BTreeMap<Component, f64>,
}

impl LossValue {
    pub fn single(component: Component, value: f64) -> Self {
        Self::weighted(&[(component, 1.0, value)])
    }

    /// `total = sum(weight * value)` over the terms, in the given order.
    pub fn weighted(terms: &[(Component, f64, f64)]) -> Self {
        let mut total = 0.0;
        let mut components = BTreeMap::new();
        let mut weights = BTreeMap::new();
        for &(c, w, v) in terms {
            total += w * v;
            components.insert(c, v);
            weights.insert(c, w);
        }
        Self { total, components, weights }
    }

    pub fn get(&self, c: Component) -> Option<f64> {
        self.components.get(&c).copied()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components.values().all(|v| v.is_finite())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Which indices enter the SupCon denominator.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupConDenominator {
    /// `a != i`, the correct form.
    ExcludeAnchor,
    /// Includes the anchor's self-similarity. Only used to show the checks catch it.
    IncludeAnchor,
}

pub struct SupConOutput {
    pub loss: f64,
    pub per_anchor: Array1<f64>,
    /// `d loss / d z`, same shape as the input rows.
    pub grad: Array2<f64>,
}

/// Batch SupCon: mean over anchors of `LSE_{a != i}(z_i.z_a / tau) - mean_{p in P(i)} z_i.z_p / tau`.
pub fn supcon_grad(z: &Array2<f64>, labels: &[usize], tau: f64) -> Result<SupConOutput> {
    supcon_with_denominator(z, labels, tau, SupConDenominator::ExcludeAnchor)
}

#[doc(hidden)]
pub fn supcon_with_denominator(z: &Array2<f64>, labels: &[usize], tau: f64, denominator: SupConDenominator) -> Result<SupConOutput> {
    check_tau(tau)?;
    let b = z.nrows();
    if labels.len() != b {
        return Err(shape(format!("{b} rows but {} labels", labels.len())));
    }
    if labels.iter().all(|&y| y == labels[0]) {
        return Err(Error::Degenerate(format!("all {b} rows share label {}; no anchor has a negative", labels[0])));
    }
    let sim = z.dot(&z.t()) / tau;
    let mut per_anchor = Array1::zeros(b);
    let mut g_sim = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        let (pos, _) = positive_negative_sets(labels, i);
        if pos.is_empty() {
            return Err(Error::Degenerate(format!("anchor {i} (label {}) has no positives in the batch", labels[i])));
        }
        let cand: Vec<usize> = match denominator {
            SupConDenominator::ExcludeAnchor => (0..b).filter(|&a| a != i).collect(),
            SupConDenominator::IncludeAnchor => (0..b).collect(),
        };
        let logits: Vec<f64> = cand.iter().map(|&a| sim[[i, a]]).collect();
        let lse = log_sum_exp(&logits);
        let mean_pos = pos.iter().map(|&p| sim[[i, p]]).sum::<f64>() / pos.len() as f64;
        per_anchor[i] = lse - mean_pos;
        for (&a, p) in cand.iter().zip(softmax(&logits)) {
            g_sim[[i, a]] += p;
        }
        for &p in &pos {
            g_sim[[i, p]] -= 1.0 / pos.len() as f64;
        }
    }
    let loss = per_anchor.sum() / b as f64;
    // sim = z z^T / tau, so d/dz = (G + G^T) z / (tau B)
    let sym = &g_sim + &g_sim.t();
    let grad = sym.dot(z) / (tau * b as f64);
    Ok(SupConOutput { loss, per_anchor, grad })
}

pub fn supcon_loss(batch: &EmbeddingBatch, tau: f64) -> Result<LossValue> {
    let out = supcon_grad(&batch.embeddings, &batch.labels, tau)?;
    Ok(LossValue::single(Component::SupCon, out.loss))
}

pub struct SslOutput {
    pub loss: f64,
    pub per_anchor: Array1<f64>,
    pub d_fast: Array2<f64>,
    pub d_slow: Array2<f64>,
}

fn normalize_rows(x: &Array2<f64>, what: &str) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some((i, n)) = norms.iter().enumerate().find(|(_, n)| !(**n > 0.0 && n.is_finite())) {
        return Err(Error::Degenerate(format!("{what} row {i} has norm {n}")));
    }
    let unit = x / &norms.clone().insert_axis(Axis(1));
    Ok((unit, norms))
}

fn normalize_backward(unit: &Array2<f64>, norms: &Array1<f64>, d_unit: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(unit.raw_dim());
    for i in 0..unit.nrows() {
        let u = unit.row(i);
        let g = d_unit.row(i);
        let proj = u.dot(&g);
        out.row_mut(i).assign(&((&g - &(&u * proj)) / norms[i]));
    }
    out
}

/// Two-view InfoNCE with the fast view as anchor. Each anchor's denominator
/// holds its positive pair plus both views of the other `B - 1` clips.
pub fn ssl_grad(fast: &Array2<f64>, slow: &Array2<f64>, tau: f64) -> Result<SslOutput> {
    check_tau(tau)?;
    if fast.dim() != slow.dim() {
        return Err(shape(format!("fast views {:?} and slow views {:?} differ", fast.dim(), slow.dim())));
    }
    let b = fast.nrows();
    if b < 2 {
        return Err(invalid(format!("two-view loss needs at least 2 clips for negatives, got {b}")));
    }
    let (f, f_norm) = normalize_rows(fast, "fast")?;
    let (s, s_norm) = normalize_rows(slow, "slow")?;
    let ff = f.dot(&f.t()) / tau;
    let fs = f.dot(&s.t()) / tau;

    let mut per_anchor = Array1::zeros(b);
    // gradients w.r.t. the similarity matrices
    let mut g_ff = Array2::<f64>::zeros((b, b));
    let mut g_fs = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        let mut logits = Vec::with_capacity(2 * b - 1);
        logits.push(fs[[i, i]]);
        for q in (0..b).filter(|&q| q != i) {
            logits.push(ff[[i, q]]);
            logits.push(fs[[i, q]]);
        }
        per_anchor[i] = log_sum_exp(&logits) - fs[[i, i]];
        let p = softmax(&logits);
        g_fs[[i, i]] += p[0] - 1.0;
        let mut k = 1;
        for q in (0..b).filter(|&q| q != i) {
            g_ff[[i, q]] += p[k];
            g_fs[[i, q]] += p[k + 1];
            k += 2;
        }
    }
    let loss = per_anchor.sum() / b as f64;
    let scale = 1.0 / (tau * b as f64);
    let d_f = ((&g_ff + &g_ff.t()).dot(&f) + g_fs.dot(&s)) * scale;
    let d_s = g_fs.t().dot(&f) * scale;
    Ok(SslOutput {
        loss,
        per_anchor,
        d_fast: normalize_backward(&f, &f_norm, &d_f),
        d_slow: normalize_backward(&s, &s_norm, &d_s),
    })
}

pub fn ssl_loss(fast: &Array2<f64>, slow: &Array2<f64>, tau: f64) -> Result<LossValue> {
    Ok(LossValue::single(Component::Ssl, ssl_grad(fast, slow, tau)?.loss))
}

/// Cross-entropy and its gradient w.r.t. the logits.
pub fn ce_grad(logits: &Array1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if label >= logits.len() {
        return Err(invalid(format!("label {label} out of range for {} classes", logits.len())));
    }
    let z = logits.as_slice().expect("contiguous logits");
    let loss = log_sum_exp(z) - z[label];
    let mut grad = Array1::from(softmax(z));
    grad[label] -= 1.0;
    Ok((loss, grad))
}

pub fn ce_loss(logits: &Logits, label: usize) -> Result<f64> {
    Ok(ce_grad(&logits.data, label)?.0)
}

fn log_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = z.iter().map(|v| v / tau).collect();
    let lse = log_sum_exp(&scaled);
    scaled.into_iter().map(|v| v - lse).collect()
}

/// `tau^2 KL(softmax(z_t / tau) || softmax(z_s / tau))` and its gradient
/// w.r.t. the student logits; the teacher side is a constant.
pub fn kd_grad(z_t: &Array1<f64>, z_s: &Array1<f64>, tau: f64) -> Result<(f64, Array1<f64>)> {
    check_tau(tau)?;
    if z_t.len() != z_s.len() {
        return Err(shape(format!("teacher has {} logits, student {}", z_t.len(), z_s.len())));
    }
    let lt = log_softmax(z_t.as_slice().expect("contiguous"), tau);
    let ls = log_softmax(z_s.as_slice().expect("contiguous"), tau);
    let mut kl = 0.0;
    let mut grad = Array1::zeros(z_t.len());
    for k in 0..lt.len() {
        let pt = lt[k].exp();
        if pt > 0.0 {
            kl += pt * (lt[k] - ls[k]);
        }
        grad[k] = tau * (ls[k].exp() - pt);
    }
    Ok((tau * tau * kl.max(0.0), grad))
}

pub fn kd_loss(z_t: &Logits, z_s: &Logits, tau: f64) -> Result<f64> {
    Ok(kd_grad(&z_t.data, &z_s.data, tau)?.0)
}

/// `mean CE + lambda_sup * SupCon`.
pub fn teacher_loss(logits: &[Logits], labels: &[usize], embeddings: &EmbeddingBatch, tau: f64, lambda_sup: f64) -> Result<LossValue> {
    let z: Vec<Array1<f64>> = logits.iter().map(|l| l.data.clone()).collect();
    Ok(teacher_objective(&z, labels, &embeddings.embeddings, &embeddings.labels, tau, lambda_sup)?.value)
}

pub struct TeacherObjective {
    pub value: LossValue,
    pub d_logits: Vec<Array1<f64>>,
    pub d_embeddings: Array2<f64>,
}

pub fn teacher_objective(
    logits: &[Array1<f64>],
    labels: &[usize],
    embeddings: &Array2<f64>,
    embedding_labels: &[usize],
    tau: f64,
    lambda_sup: f64,
) -> Result<TeacherObjective> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(shape(format!("{} logit rows for {} labels", logits.len(), labels.len())));
    }
    if !(lambda_sup >= 0.0) {
        return Err(invalid("lambda_sup must be >= 0"));
    }
    let n = logits.len() as f64;
    let mut ce = 0.0;
    let mut d_logits = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        let (l, g) = ce_grad(z, y)?;
        ce += l;
        d_logits.push(g / n);
    }
    ce /= n;
    let sc = supcon_grad(embeddings, embedding_labels, tau)?;
    let value = LossValue::weighted(&[(Component::Ce, 1.0, ce), (Component::SupCon, lambda_sup, sc.loss)]);
    Ok(TeacherObjective { value, d_logits, d_embeddings: sc.grad * lambda_sup })
}

/// `lambda_ce * CE + lambda_kd * KD` for a single clip.
pub fn student_loss(z_t: &Logits, z_s: &Logits, label: usize, tau: f64, lambda_ce: f64, lambda_kd: f64) -> Result<LossValue> {
    Ok(student_objective(&[z_t.data.clone()], &[z_s.data.clone()], &[label], tau, lambda_ce, lambda_kd)?.0)
}

/// Batch-mean student objective and `d loss / d z_s` per clip.
pub fn student_objective(
    z_t: &[Array1<f64>],
    z_s: &[Array1<f64>],
    labels: &[usize],
    tau: f64,
    lambda_ce: f64,
    lambda_kd: f64,
) -> Result<(LossValue, Vec<Array1<f64>>)> {
    if z_t.len() != z_s.len() || z_s.len() != labels.len() || z_s.is_empty() {
        return Err(shape(format!("{} teacher, {} student logit rows, {} labels", z_t.len(), z_s.len(), labels.len())));
    }
    if !(lambda_ce >= 0.0 && lambda_kd >= 0.0) {
        return Err(invalid("loss weights must be >= 0"));
    }
    let n = z_s.len() as f64;
    let (mut ce, mut kd) = (0.0, 0.0);
    let mut grads = Vec::with_capacity(z_s.len());
    for ((t, s), &y) in z_t.iter().zip(z_s).zip(labels) {
        let (lc, gc) = ce_grad(s, y)?;
        let (lk, gk) = kd_grad(t, s, tau)?;
        ce += lc;
        kd += lk;
        grads.push((gc * lambda_ce + gk * lambda_kd) / n);
    }
    let value = LossValue::weighted(&[(Component::Ce, lambda_ce, ce / n), (Component::Kd, lambda_kd, kd / n)]);
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn table_one_sets() {
        let labels = [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3];
        let (p, n) = positive_negative_sets(&labels, 0);
        assert_eq!(p, vec![1, 2, 3]);
        assert_eq!(n, (4..16).collect::<Vec<_>>());
        for i in 0..16 {
            let (p, n) = positive_negative_sets(&labels, i);
            assert_eq!((p.len(), n.len()), (3, 12));
        }
        let (p, n) = positive_negative_sets(&[0, 1, 2, 3], 2);
        assert!(p.is_empty());
        assert_eq!(n.len(), 3);
    }

    #[test]
    fn supcon_rejects_anchor_without_positive_and_bad_tau() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(supcon_grad(&z, &[0, 1], 0.1), Err(Error::Degenerate(_))));
        assert!(supcon_grad(&z, &[0, 0], 0.0).is_err());
    }

    #[test]
    fn ssl_rejects_degenerate() {
        let one = array![[1.0, 0.0]];
        assert!(ssl_grad(&one, &one, 0.1).is_err());
        let zero_row = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(matches!(ssl_grad(&zero_row, &zero_row, 0.1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ce_closed_forms() {
        let uniform = Logits { data: Array1::zeros(10) };
        assert!((ce_loss(&uniform, 3).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut onehot = Array1::zeros(10);
        onehot[4] = 1e4;
        assert!(ce_loss(&Logits { data: onehot }, 4).unwrap() < 1e-12);
        assert!(ce_loss(&uniform, 10).is_err());
    }

    #[test]
    fn kd_identity_and_mismatch() {
        let z = Logits { data: array![0.3, -2.0, 5.0] };
        assert!(kd_loss(&z, &z, 4.0).unwrap().abs() < 1e-12);
        assert!(kd_loss(&z, &Logits { data: array![1.0, 2.0] }, 4.0).is_err());
    }

    #[test]
    fn composite_weights() {
        let v = LossValue::weighted(&[(Component::Ce, 1.0, 2.0), (Component::SupCon, 0.1, 1.0)]);
        assert!((v.total - 2.1).abs() < 1e-15);
        let z = Logits { data: array![1.0, 0.0] };
        let s = student_loss(&z, &z, 0, 4.0, 1.0, 1.0).unwrap();
        assert_eq!(s.total, ce_loss(&z, 0).unwrap());
    }

    #[test]
    fn batch_layout_check() {
        let z = Array2::from_shape_fn((4, 2), |(i, j)| if (i / 2) == j { 1.0 } else { 0.0 });
        let b = EmbeddingBatch::new(z, vec![0, 0, 1, 1], vec![ViewTag::Dark, ViewTag::Retinex, ViewTag::Dark, ViewTag::Retinex], vec![0, 0, 1, 1]).unwrap();
        assert!(b.check_supcon_layout(2, 1).is_ok());
        assert!(b.check_supcon_layout(1, 2).is_err());
        let not_unit = Array2::from_elem((1, 2), 1.0);
        assert!(EmbeddingBatch::new(not_unit, vec![0], vec![ViewTag::Dark], vec![0]).is_err());
    }
}
