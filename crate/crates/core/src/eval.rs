//! Ranking-based average precision with image-level ignore semantics.
//!
//! For class `c`, every predicted instance contributes one scored entry. The
//! entry is a positive if `c` is among the instance's true labels, ignored if
//! the image neither verifies `c` as present nor as absent, and a negative
//! otherwise. AP averages the precision at the rank of each positive after
//! ignored entries are dropped.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::taxonomy::{AnnotationSet, ClassId, Verification};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredEntry {
    pub score: f64,
    pub positive: bool,
    pub ignored: bool,
}

impl ScoredEntry {
    pub fn new(score: f64, positive: bool, ignored: bool) -> Self {
        ScoredEntry {
            score,
            positive,
            ignored,
        }
    }
}

/// All-point AP; `None` when no non-ignored positive exists. Equal scores keep
/// input order.
pub fn average_precision(entries: &[ScoredEntry]) -> Option<f64> {
    let mut kept: Vec<&ScoredEntry> = entries.iter().filter(|e| !e.ignored).collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    let num_pos = kept.iter().filter(|e| e.positive).count();
    if num_pos == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, e) in kept.iter().enumerate() {
        if e.positive {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / num_pos as f64)
}

/// AP range over `trials` random orderings of tied scores.
pub fn tie_audit(entries: &[ScoredEntry], trials: usize, seed: u64) -> Option<(f64, f64)> {
    let base = average_precision(entries)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = entries.to_vec();
    let (mut lo, mut hi) = (base, base);
    for _ in 0..trials {
        shuffled.shuffle(&mut rng);
        let ap = average_precision(&shuffled)?;
        lo = lo.min(ap);
        hi = hi.max(ap);
    }
    Some((lo, hi))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    pub num_positives: Vec<usize>,
    /// Mean over classes with positives; NaN when there are none.
    pub map: f64,
    /// Non-positive entries dropped as unverified.
    pub ignored_fp_count: usize,
}

impl EvalReport {
    /// `class<TAB>num_pos<TAB>ap` rows (`NA` for absent classes), then `mAP<TAB>value`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (c, (ap, n)) in self.per_class_ap.iter().zip(&self.num_positives).enumerate() {
            match ap {
                Some(ap) => writeln!(out, "{c}\t{n}\t{ap}").unwrap(),
                None => writeln!(out, "{c}\t{n}\tNA").unwrap(),
            }
        }
        writeln!(out, "mAP\t{}", self.map).unwrap();
        out
    }
}

/// Scores `predictions[k][c]` for instance `k` of `truth` and class `c`.
pub fn evaluate(predictions: &[Vec<f64>], truth: &AnnotationSet) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::Misaligned(format!(
            "{} score rows for {} instances",
            predictions.len(),
            truth.len()
        )));
    }
    let c = truth.num_classes();
    if let Some((k, row)) = predictions.iter().enumerate().find(|(_, r)| r.len() != c) {
        return Err(Error::Misaligned(format!(
            "row {k} has {} scores for {c} classes",
            row.len()
        )));
    }

    let mut per_class_ap = Vec::with_capacity(c);
    let mut num_positives = Vec::with_capacity(c);
    let mut ignored_fp_count = 0;
    let mut entries = Vec::with_capacity(predictions.len());
    for class in 0..c {
        let id = ClassId(class);
        entries.clear();
        for (inst, row) in truth.instances().iter().zip(predictions) {
            let positive = inst.labels.contains(&id);
            let ignored =
                !positive && truth.verification(&inst.image_id, id) == Verification::Unverified;
            ignored_fp_count += ignored as usize;
            entries.push(ScoredEntry::new(row[class], positive, ignored));
        }
        num_positives.push(entries.iter().filter(|e| e.positive).count());
        per_class_ap.push(average_precision(&entries));
    }

    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalReport {
        per_class_ap,
        num_positives,
        map,
        ignored_fp_count,
    })
}
