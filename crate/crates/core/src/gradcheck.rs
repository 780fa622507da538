//! Central finite-difference checks for the analytic loss gradients.
//!
//! The numeric side only ever calls the loss *value*, so it stays independent
//! of the gradient code it audits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    bce_loss, concurrent_softmax_ce, focal_loss, softmax_ce, GradMode, LabelVector,
};
use crate::rates::RateMatrix;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-5;
/// Magnitude below which a gradient component is compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Central differences of `f` at `z`.
pub fn numerical_gradient<F>(f: F, z: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = z.to_vec();
    let mut grad = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        probe[i] = z[i] + step;
        let up = f(&probe)?;
        probe[i] = z[i] - step;
        let down = f(&probe)?;
        probe[i] = z[i];
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Largest componentwise `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedLoss {
    SoftmaxSingleLabel,
    Concurrent,
    Bce,
    Focal,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 4] = [
        CheckedLoss::SoftmaxSingleLabel,
        CheckedLoss::Concurrent,
        CheckedLoss::Bce,
        CheckedLoss::Focal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::SoftmaxSingleLabel => "softmax_ce",
            CheckedLoss::Concurrent => "concurrent_softmax_ce",
            CheckedLoss::Bce => "bce",
            CheckedLoss::Focal => "focal",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub loss: CheckedLoss,
    pub cases: usize,
    pub failures: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// A random problem: logits in `[-5, 5]`, a non-empty label set, dense random
/// rates with a zero diagonal.
#[derive(Debug, Clone)]
pub struct RandomCase {
    pub z: Vec<f64>,
    pub labels: LabelVector,
    pub rates: RateMatrix,
    pub gamma: f64,
    pub alpha: f64,
}

impl RandomCase {
    pub fn draw<R: Rng>(rng: &mut R, max_classes: usize, single_label: bool) -> Self {
        let c = rng.random_range(2..=max_classes.max(2));
        let z: Vec<f64> = (0..c).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut mask = vec![false; c];
        if single_label {
            mask[rng.random_range(0..c)] = true;
        } else {
            let m = rng.random_range(1..=c);
            for _ in 0..m {
                mask[rng.random_range(0..c)] = true;
            }
        }
        let mut rates = RateMatrix::zeros(c);
        for i in 0..c {
            for j in 0..c {
                if i != j {
                    rates.set(i, j, rng.random_range(0.0..=1.0));
                }
            }
        }
        RandomCase {
            z,
            labels: LabelVector::from_mask(mask),
            rates,
            gamma: rng.random_range(0.0..3.0),
            alpha: rng.random_range(0.0..=1.0),
        }
    }
}

/// Analytic-vs-numeric relative error for one loss on one case.
pub fn check_case(loss: CheckedLoss, case: &RandomCase) -> Result<f64> {
    let y = &case.labels;
    let (analytic, numeric) = match loss {
        CheckedLoss::SoftmaxSingleLabel => (
            softmax_ce(&case.z, y)?.gradient,
            numerical_gradient(|z| Ok(softmax_ce(z, y)?.value), &case.z, FD_STEP)?,
        ),
        CheckedLoss::Concurrent => (
            concurrent_softmax_ce(&case.z, y, &case.rates, GradMode::Exact)?.gradient,
            numerical_gradient(
                |z| Ok(concurrent_softmax_ce(z, y, &case.rates, GradMode::Exact)?.value),
                &case.z,
                FD_STEP,
            )?,
        ),
        CheckedLoss::Bce => (
            bce_loss(&case.z, y)?.gradient,
            numerical_gradient(|z| Ok(bce_loss(z, y)?.value), &case.z, FD_STEP)?,
        ),
        CheckedLoss::Focal => (
            focal_loss(&case.z, y, case.gamma, case.alpha)?.gradient,
            numerical_gradient(
                |z| Ok(focal_loss(z, y, case.gamma, case.alpha)?.value),
                &case.z,
                FD_STEP,
            )?,
        ),
    };
    Ok(relative_error(&analytic, &numeric))
}

/// Runs `trials` random cases per loss with at most `max_classes` classes.
pub fn run_suite(max_classes: usize, trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports: Vec<CheckReport> = CheckedLoss::ALL
        .iter()
        .map(|&loss| CheckReport {
            loss,
            cases: 0,
            failures: 0,
            max_rel_err: 0.0,
        })
        .collect();
    for _ in 0..trials {
        let multi = RandomCase::draw(&mut rng, max_classes, false);
        let single = RandomCase {
            labels: LabelVector::from_indices(multi.z.len(), &multi.labels.positives()[..1])?,
            ..multi.clone()
        };
        for report in reports.iter_mut() {
            let case = if report.loss == CheckedLoss::SoftmaxSingleLabel {
                &single
            } else {
                &multi
            };
            let err = check_case(report.loss, case)?;
            report.cases += 1;
            report.max_rel_err = report.max_rel_err.max(err);
            if !(err <= REL_TOL) {
                report.failures += 1;
            }
        }
    }
    Ok(reports)
}
