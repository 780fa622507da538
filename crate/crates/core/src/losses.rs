//! Classification losses and scoring functions.
//!
//! Everything here is a pure function of a logit vector `z` (one row per
//! object), a multi-hot label vector and, for the concurrent variants, a
//! [`RateMatrix`]. Exponentials are evaluated as weighted log-sum-exp so no
//! denominator can overflow, and a vanishing denominator is reported as a
//! numerical error rather than an infinity.
//!
//! Concurrent softmax, for a positive class `i`:
//!
//! ```text
//! s*_i = e^{z_i} / ( e^{z_i} + sum_{j != i, j not in K} (1 - r_ij) e^{z_j} )
//! ```
//!
//! At inference the label mask is dropped and the self term enters at weight 1:
//! `s+_i = e^{z_i} / sum_j (1 - r_ij) e^{z_j}` with `r_ii = 0`.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::rates::RateMatrix;
use crate::taxonomy::ClassId;

/// Multi-hot target over `C` classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    mask: Vec<bool>,
    positives: Vec<usize>,
}

impl LabelVector {
    pub fn from_mask(mask: Vec<bool>) -> Self {
        let positives = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &y)| y.then_some(i))
            .collect();
        LabelVector { mask, positives }
    }

    pub fn from_indices(num_classes: usize, positives: &[usize]) -> Result<Self> {
        let mut mask = vec![false; num_classes];
        for &i in positives {
            if i >= num_classes {
                return Err(Error::InvalidClass { id: i, num_classes });
            }
            mask[i] = true;
        }
        Ok(Self::from_mask(mask))
    }

    pub fn from_set(num_classes: usize, labels: &BTreeSet<ClassId>) -> Result<Self> {
        let idx: Vec<usize> = labels.iter().map(|c| c.index()).collect();
        Self::from_indices(num_classes, &idx)
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// `K`, ascending.
    pub fn positives(&self) -> &[usize] {
        &self.positives
    }

    /// `m = |K|`.
    pub fn count(&self) -> usize {
        self.positives.len()
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    /// dL/dz
    pub gradient: Vec<f64>,
}

/// Gradient used by [`concurrent_softmax_ce`] for non-target classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradMode {
    /// The analytic derivative of the loss value.
    #[default]
    Exact,
    /// `sum_{j in K} (1 - r_ij) s*_i` with `s*_i` built from row `i` of the
    /// rates. Not the derivative of the loss; kept for reproduction runs.
    AsPublished,
}

fn check_logits(z: &[f64]) -> Result<()> {
    match z.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::Numerical(format!("non-finite logit {v}"))),
        None => Ok(()),
    }
}

fn check_labels(z: &[f64], y: &LabelVector) -> Result<()> {
    check_logits(z)?;
    if y.len() != z.len() {
        return Err(Error::Dimension(format!(
            "{} logits, {} labels",
            z.len(),
            y.len()
        )));
    }
    Ok(())
}

fn check_rates(z: &[f64], r: &RateMatrix) -> Result<()> {
    if r.size() != z.len() {
        return Err(Error::Dimension(format!(
            "{} logits, {}x{} rate matrix",
            z.len(),
            r.size(),
            r.size()
        )));
    }
    Ok(())
}

/// `log sum_j w_j e^{z_j}` over the terms yielded by `terms`, skipping
/// zero weights.
fn log_weighted_sum<I>(terms: I) -> Result<f64>
where
    I: Iterator<Item = (f64, f64)> + Clone,
{
    let shift = terms
        .clone()
        .filter(|&(_, w)| w > 0.0)
        .map(|(z, w)| z + w.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return Err(Error::Numerical("softmax denominator vanished".into()));
    }
    let sum: f64 = terms
        .filter(|&(_, w)| w > 0.0)
        .map(|(z, w)| (z + w.ln() - shift).exp())
        .sum();
    let out = shift + sum.ln();
    if out.is_finite() {
        Ok(out)
    } else {
        Err(Error::Numerical(format!("softmax denominator is {out}")))
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max subtraction.
pub fn softmax_probs(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// `-sum_{i in K} log s_i`, gradient `m s_i - y_i`.
pub fn softmax_ce(z: &[f64], y: &LabelVector) -> Result<LossResult> {
    check_labels(z, y)?;
    if y.count() == 0 {
        return Err(Error::EmptyLabelSet);
    }
    let lse = log_sum_exp(z);
    let value = y.positives().iter().map(|&i| lse - z[i]).sum();
    let m = y.count() as f64;
    let gradient = softmax_probs(z)
        .into_iter()
        .enumerate()
        .map(|(i, p)| m * p - if y.contains(i) { 1.0 } else { 0.0 })
        .collect();
    Ok(LossResult { value, gradient })
}

/// `log D_i` for the training-time concurrent softmax of a positive class `i`.
fn log_train_denominator(z: &[f64], y: &LabelVector, r: &RateMatrix, i: usize) -> Result<f64> {
    let row = r.row(i);
    log_weighted_sum((0..z.len()).filter_map(move |j| {
        if j == i {
            Some((z[j], 1.0))
        } else if y.contains(j) {
            None
        } else {
            Some((z[j], 1.0 - row[j]))
        }
    }))
}

/// Concurrent softmax training loss `-sum_{i in K} log s*_i`.
pub fn concurrent_softmax_ce(
    z: &[f64],
    y: &LabelVector,
    r: &RateMatrix,
    mode: GradMode,
) -> Result<LossResult> {
    check_labels(z, y)?;
    check_rates(z, r)?;
    if y.count() == 0 {
        return Err(Error::EmptyLabelSet);
    }
    let c = z.len();
    let mut log_d = vec![f64::NAN; c];
    for &k in y.positives() {
        log_d[k] = log_train_denominator(z, y, r, k)?;
    }
    let value = y.positives().iter().map(|&k| log_d[k] - z[k]).sum();

    let mut gradient = vec![0.0; c];
    for i in 0..c {
        gradient[i] = if y.contains(i) {
            (z[i] - log_d[i]).exp_m1()
        } else {
            match mode {
                GradMode::Exact => y
                    .positives()
                    .iter()
                    .map(|&k| (1.0 - r.get(k, i)) * (z[i] - log_d[k]).exp())
                    .sum(),
                GradMode::AsPublished => {
                    let own = log_train_denominator(z, y, r, i)?;
                    let s = (z[i] - own).exp();
                    y.positives().iter().map(|&j| (1.0 - r.get(i, j)) * s).sum()
                }
            }
        };
    }
    Ok(LossResult { value, gradient })
}

/// Concurrent softmax scores for inference; no label mask, self term at weight 1.
pub fn concurrent_softmax_infer(z: &[f64], r: &RateMatrix) -> Result<Vec<f64>> {
    check_logits(z)?;
    check_rates(z, r)?;
    (0..z.len())
        .map(|i| {
            let row = r.row(i);
            let log_d = log_weighted_sum(
                (0..z.len()).map(move |j| (z[j], if j == i { 1.0 } else { 1.0 - row[j] })),
            )?;
            Ok((z[i] - log_d).exp().min(1.0))
        })
        .collect()
}

/// Per-class sigmoid cross-entropy, summed over classes.
pub fn bce_loss(z: &[f64], y: &LabelVector) -> Result<LossResult> {
    check_labels(z, y)?;
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(z.len());
    for (i, &zi) in z.iter().enumerate() {
        if y.contains(i) {
            value += softplus(-zi);
            gradient.push(sigmoid(zi) - 1.0);
        } else {
            value += softplus(zi);
            gradient.push(sigmoid(zi));
        }
    }
    Ok(LossResult { value, gradient })
}

/// Alpha-balanced focal loss on sigmoid outputs, summed over classes.
pub fn focal_loss(z: &[f64], y: &LabelVector, gamma: f64, alpha: f64) -> Result<LossResult> {
    check_labels(z, y)?;
    if !(gamma >= 0.0) || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "focal loss needs gamma >= 0 and alpha in [0, 1], got gamma={gamma} alpha={alpha}"
        )));
    }
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(z.len());
    for (i, &zi) in z.iter().enumerate() {
        let p = sigmoid(zi);
        let q = sigmoid(-zi);
        if y.contains(i) {
            // -log p = softplus(-z)
            let nll = softplus(-zi);
            let qg = q.powf(gamma);
            value += alpha * qg * nll;
            gradient.push(alpha * (-gamma * p * qg * nll - qg * q));
        } else {
            let nll = softplus(zi);
            let pg = p.powf(gamma);
            value += (1.0 - alpha) * pg * nll;
            gradient.push((1.0 - alpha) * (pg * p + gamma * pg * q * nll));
        }
    }
    Ok(LossResult { value, gradient })
}

/// Class-balanced weights `(1 - beta) / (1 - beta^n_i)`, scaled to mean 1 over
/// classes with `n_i > 0`. Empty classes get weight 0.
pub fn effective_number_weights(counts: &[u64], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} outside [0, 1)")));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else {
                (1.0 - beta) / (1.0 - beta.powf(n as f64))
            }
        })
        .collect();
    let present = counts.iter().filter(|&&n| n > 0).count();
    if present == 0 {
        return Err(Error::NoPositiveCounts);
    }
    let mean = raw.iter().sum::<f64>() / present as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

/// Training loss selector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Softmax,
    Concurrent(GradMode),
    Bce,
    Focal { gamma: f64, alpha: f64 },
}

impl LossKind {
    pub fn evaluate(&self, z: &[f64], y: &LabelVector, r: &RateMatrix) -> Result<LossResult> {
        match *self {
            LossKind::Softmax => softmax_ce(z, y),
            LossKind::Concurrent(mode) => concurrent_softmax_ce(z, y, r, mode),
            LossKind::Bce => bce_loss(z, y),
            LossKind::Focal { gamma, alpha } => focal_loss(z, y, gamma, alpha),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::Concurrent(GradMode::Exact) => "concurrent",
            LossKind::Concurrent(GradMode::AsPublished) => "concurrent_published",
            LossKind::Bce => "bce",
            LossKind::Focal { .. } => "focal",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    /// `focal` uses gamma 2 and alpha 0.25; callers override the fields.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "softmax" => LossKind::Softmax,
            "concurrent" => LossKind::Concurrent(GradMode::Exact),
            "concurrent_published" => LossKind::Concurrent(GradMode::AsPublished),
            "bce" => LossKind::Bce,
            "focal" => LossKind::Focal {
                gamma: 2.0,
                alpha: 0.25,
            },
            _ => {
                return Err(Error::Config(format!(
                    "unknown loss {s:?} (softmax, concurrent, concurrent_published, bce, focal)"
                )))
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;

    fn labels(c: usize, k: &[usize]) -> LabelVector {
        LabelVector::from_indices(c, k).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_probs(&[0.0, 0.0, 0.0]);
        for v in &p {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax_probs(&[2.0, 1.0, 0.0]);
        let expect = [0.6652409557748219, 0.24472847105479764, 0.09003057317038046];
        for (a, b) in p.iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let p = softmax_probs(&[1000.0, 0.0]);
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_examples() {
        let r = softmax_ce(&[2.0, 1.0, 0.0], &labels(3, &[0])).unwrap();
        assert_abs_diff_eq!(r.value, 0.4076059644443803, epsilon = 1e-12);
        let p = softmax_probs(&[2.0, 1.0, 0.0]);
        assert_abs_diff_eq!(r.gradient[0], p[0] - 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.gradient[1], p[1], epsilon = 1e-15);

        let r = softmax_ce(&[5.0, 4.0, -5.0], &labels(3, &[0, 1])).unwrap();
        assert_abs_diff_eq!(r.gradient[0], 0.46206863119026553, epsilon = 1e-12);
        assert!(r.gradient[0] > 0.0);

        let r = softmax_ce(&[0.7; 6], &labels(6, &[4])).unwrap();
        assert_abs_diff_eq!(r.value, 6f64.ln(), epsilon = 1e-14);

        assert!(matches!(softmax_ce(&[1.0, 2.0], &labels(2, &[])), Err(Error::EmptyLabelSet)));
    }

    #[test]
    fn concurrent_examples() {
        let zero = RateMatrix::zeros(3);
        let z = [2.0, 1.0, 0.0];
        let r = concurrent_softmax_ce(&z, &labels(3, &[0]), &zero, GradMode::Exact).unwrap();
        assert_abs_diff_eq!(r.value, 0.4076059644443803, epsilon = 1e-12);

        let r = concurrent_softmax_ce(&z, &labels(3, &[0, 1]), &zero, GradMode::Exact).unwrap();
        assert_abs_diff_eq!(r.value, 0.44018969856119533, epsilon = 1e-12);
        // s*_0 = e^2 / (e^0 + e^2), s*_1 = e / (e^0 + e)
        assert_abs_diff_eq!(r.gradient[0], 0.8807970779778823 - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.gradient[1], 0.7310585786300049 - 1.0, epsilon = 1e-12);

        let r = concurrent_softmax_ce(&[5.0, 4.0, -5.0], &labels(3, &[0, 1]), &zero, GradMode::Exact)
            .unwrap();
        assert_abs_diff_eq!(r.gradient[0], -4.5397868702434395e-05, epsilon = 1e-15);
        assert!(r.gradient[0] < 0.0);

        assert!(matches!(
            concurrent_softmax_ce(&z, &labels(3, &[]), &zero, GradMode::Exact),
            Err(Error::EmptyLabelSet)
        ));
        assert!(matches!(
            concurrent_softmax_ce(&z, &labels(3, &[0]), &RateMatrix::zeros(2), GradMode::Exact),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn as_published_differs_only_off_target() {
        let mut r = RateMatrix::zeros(4);
        r.set(0, 2, 0.4);
        r.set(2, 1, 0.7);
        r.set(3, 0, 0.2);
        let z = [0.3, -1.2, 2.0, 0.5];
        let y = labels(4, &[0, 1]);
        let exact = concurrent_softmax_ce(&z, &y, &r, GradMode::Exact).unwrap();
        let publ = concurrent_softmax_ce(&z, &y, &r, GradMode::AsPublished).unwrap();
        assert_eq!(exact.value, publ.value);
        assert_eq!(exact.gradient[0], publ.gradient[0]);
        assert_eq!(exact.gradient[1], publ.gradient[1]);
        assert!((exact.gradient[2] - publ.gradient[2]).abs() > 1e-3);
        // as-published branch by hand for class 3: D_3 = e^{z3} + e^{z2}, sum over K of (1 - r_3j)
        let s3 = z[3].exp() / (z[3].exp() + z[2].exp());
        assert_abs_diff_eq!(publ.gradient[3], (0.8 + 1.0) * s3, epsilon = 1e-14);
    }

    #[test]
    fn inference_examples() {
        let z = [2.0, 1.0, 0.0];
        let plain = concurrent_softmax_infer(&z, &RateMatrix::zeros(3)).unwrap();
        for (a, b) in plain.iter().zip(softmax_probs(&z)) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let mut r = RateMatrix::zeros(3);
        r.set(0, 1, 0.5);
        let s = concurrent_softmax_infer(&z, &r).unwrap();
        assert_abs_diff_eq!(s[0], 0.7579920767866452, epsilon = 1e-12);
        assert!(s[0] > softmax_probs(&z)[0]);

        let mut r = RateMatrix::zeros(3);
        r.set(0, 1, 1.0);
        r.set(0, 2, 1.0);
        assert_eq!(concurrent_softmax_infer(&z, &r).unwrap()[0], 1.0);

        assert!(matches!(
            concurrent_softmax_infer(&[f64::NAN, 0.0], &RateMatrix::zeros(2)),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn bce_examples() {
        let r = bce_loss(&[0.0; 4], &labels(4, &[0, 1, 2, 3])).unwrap();
        assert_abs_diff_eq!(r.value, 4.0 * 2f64.ln(), epsilon = 1e-15);
        assert!(r.gradient.iter().all(|&g| g == -0.5));
        let r = bce_loss(&[0.0; 2], &labels(2, &[])).unwrap();
        assert!(r.gradient.iter().all(|&g| g == 0.5));

        let r = bce_loss(&[2.0, 1.0, 0.0], &labels(3, &[0])).unwrap();
        assert_abs_diff_eq!(r.value, 2.1333368791211407, epsilon = 1e-12);
    }

    #[test]
    fn focal_examples() {
        let z = [2.0, -0.5, 1.0];
        let y = labels(3, &[0, 2]);
        let f = focal_loss(&z, &y, 0.0, 0.5).unwrap();
        let b = bce_loss(&z, &y).unwrap();
        assert_abs_diff_eq!(f.value, 0.5 * b.value, epsilon = 1e-15);
        for (a, c) in f.gradient.iter().zip(&b.gradient) {
            assert_abs_diff_eq!(*a, 0.5 * c, epsilon = 1e-15);
        }

        let f = focal_loss(&[2.0], &labels(1, &[0]), 2.0, 0.25).unwrap();
        assert_abs_diff_eq!(f.value, 0.00045089070881009386, epsilon = 1e-15);

        let f = focal_loss(&[40.0], &labels(1, &[0]), 2.0, 0.25).unwrap();
        assert!(f.value < 1e-30);

        assert!(focal_loss(&[0.0], &labels(1, &[0]), -1.0, 0.25).is_err());
        assert!(focal_loss(&[0.0], &labels(1, &[0]), 2.0, 1.5).is_err());
    }

    #[test]
    fn effective_number_examples() {
        assert_eq!(effective_number_weights(&[5, 100, 3], 0.0).unwrap(), vec![1.0; 3]);
        let w = effective_number_weights(&[1, 1], 0.99).unwrap();
        assert_abs_diff_eq!(w[0], w[1], epsilon = 1e-15);
        let w = effective_number_weights(&[10, 1], 0.9).unwrap();
        assert_abs_diff_eq!(w[0], 0.26619760522594316, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 1.7338023947740568, epsilon = 1e-12);
        let w = effective_number_weights(&[10, 0, 1], 0.9).unwrap();
        assert_eq!(w[1], 0.0);
        assert_abs_diff_eq!(w[0] + w[2], 2.0, epsilon = 1e-12);
        assert!(effective_number_weights(&[1], 1.0).is_err());
        assert!(matches!(effective_number_weights(&[0, 0], 0.5), Err(Error::NoPositiveCounts)));
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("concurrent".parse::<LossKind>().unwrap(), LossKind::Concurrent(GradMode::Exact));
        assert_eq!("softmax".parse::<LossKind>().unwrap().name(), "softmax");
        assert!("hinge".parse::<LossKind>().is_err());
    }

    fn case(max_c: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<f64>)> {
        (2..=max_c).prop_flat_map(|c| {
            (
                prop::collection::vec(-5.0f64..5.0, c),
                prop::collection::vec(any::<bool>(), c).prop_filter("m >= 1", |m| m.iter().any(|&b| b)),
                prop::collection::vec(0.0f64..=1.0, c * c),
            )
        })
    }

    fn rates(c: usize, raw: Vec<f64>) -> RateMatrix {
        RateMatrix::from_dense(c, raw).unwrap()
    }

    proptest! {
        #[test]
        fn single_label_zero_rate_reduces_to_softmax(z in prop::collection::vec(-5.0f64..5.0, 2..20), k in 0usize..20) {
            let c = z.len();
            let y = labels(c, &[k % c]);
            let a = concurrent_softmax_ce(&z, &y, &RateMatrix::zeros(c), GradMode::Exact).unwrap();
            let b = softmax_ce(&z, &y).unwrap();
            prop_assert!((a.value - b.value).abs() < 1e-12);
            let s = concurrent_softmax_infer(&z, &RateMatrix::zeros(c)).unwrap();
            for (x, p) in s.iter().zip(softmax_probs(&z)) {
                prop_assert!((x - p).abs() < 1e-12);
            }
        }

        #[test]
        fn ground_truth_scores_not_suppressed((z, mask, _) in case(20)) {
            let c = z.len();
            let y = LabelVector::from_mask(mask);
            let r = concurrent_softmax_ce(&z, &y, &RateMatrix::zeros(c), GradMode::Exact).unwrap();
            let p = softmax_probs(&z);
            for &i in y.positives() {
                let s_star = 1.0 + r.gradient[i];
                prop_assert!(s_star >= p[i] - 1e-15);
            }
        }

        #[test]
        fn positive_gradients_are_negative((z, mask, raw) in case(20)) {
            let c = z.len();
            let y = LabelVector::from_mask(mask);
            let r = concurrent_softmax_ce(&z, &y, &rates(c, raw), GradMode::Exact).unwrap();
            for &i in y.positives() {
                prop_assert!(r.gradient[i] <= 0.0);
                prop_assert!(r.gradient[i] >= -1.0);
            }
            prop_assert!(r.value >= 0.0);
        }

        #[test]
        fn raising_a_rate_never_lowers_inference_score(
            (z, _, raw) in case(12), i in 0usize..12, j in 0usize..12, bump in 0.0f64..1.0
        ) {
            let c = z.len();
            let (i, j) = (i % c, j % c);
            prop_assume!(i != j);
            let base = rates(c, raw);
            let mut up = base.clone();
            up.set(i, j, (base.get(i, j) + bump).min(1.0));
            let a = concurrent_softmax_infer(&z, &base).unwrap();
            let b = concurrent_softmax_infer(&z, &up).unwrap();
            prop_assert!(b[i] >= a[i] - 1e-15);
        }

        #[test]
        fn shift_invariance((z, _, raw) in case(20), shift in -50.0f64..50.0) {
            let c = z.len();
            let r = rates(c, raw);
            let moved: Vec<f64> = z.iter().map(|v| v + shift).collect();
            for (a, b) in softmax_probs(&z).iter().zip(softmax_probs(&moved)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let a = concurrent_softmax_infer(&z, &r).unwrap();
            let b = concurrent_softmax_infer(&moved, &r).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!(*x > 0.0 && *x <= 1.0);
            }
        }
    }
}
