//! Concurrent-rate estimation.
//!
//! `r[i][j]` is the probability that an object of class `i` is also labeled
//! `j`. Rates come from co-label counts over annotated instances, are floored
//! at a minimum rate, and then pinned for (leaf, ancestor) pairs according to a
//! [`HierarchyMode`]. The diagonal is always zero; consumers supply their own
//! self term.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::taxonomy::{AnnotationSet, ClassId, Taxonomy};

/// Default floor below which an estimated rate is treated as noise.
pub const DEFAULT_MIN_RATE: f64 = 0.1;

/// Dense `C x C` matrix of rates in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    size: usize,
    entries: Vec<f64>,
}

impl RateMatrix {
    pub fn zeros(size: usize) -> Self {
        RateMatrix {
            size,
            entries: vec![0.0; size * size],
        }
    }

    /// Diagonal entries are cleared.
    pub fn from_dense(size: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != size * size {
            return Err(Error::Dimension(format!(
                "{} entries for a {size}x{size} rate matrix",
                entries.len()
            )));
        }
        if let Some(bad) = entries.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numerical(format!("rate {bad} outside [0, 1]")));
        }
        let mut m = RateMatrix { size, entries };
        for i in 0..size {
            m.entries[i * size + i] = 0.0;
        }
        Ok(m)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.size + j]
    }

    /// # Panics
    /// If `value` is outside `[0, 1]`, or if a nonzero value targets the diagonal.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        assert!((0.0..=1.0).contains(&value), "rate {value} outside [0, 1]");
        assert!(i != j || value == 0.0, "diagonal rates are fixed at 0");
        self.entries[i * self.size + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.size..(i + 1) * self.size]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    /// Nonzero entries in row-major order.
    pub fn nonzero(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(move |(k, &v)| (k / self.size, k % self.size, v))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, j, v) in self.nonzero() {
            writeln!(out, "{i}\t{j}\t{v}").unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, size, path)
    }

    pub fn parse_tsv(text: &str, size: usize, origin: &Path) -> Result<Self> {
        let mut m = RateMatrix::zeros(size);
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::parse(origin, lineno, "expected i<TAB>j<TAB>rate"));
            }
            let parse_idx = |s: &str| -> Result<usize> {
                match s.trim().parse::<usize>() {
                    Ok(v) if v < size => Ok(v),
                    _ => Err(Error::parse(
                        origin,
                        lineno,
                        format!("bad class index {s:?} for {size} classes"),
                    )),
                }
            };
            let i = parse_idx(f[0])?;
            let j = parse_idx(f[1])?;
            let v: f64 = f[2]
                .trim()
                .parse()
                .map_err(|_| Error::parse(origin, lineno, format!("bad rate {:?}", f[2])))?;
            if !(0.0..=1.0).contains(&v) || (i == j && v != 0.0) {
                return Err(Error::parse(origin, lineno, format!("rate {v} not allowed at ({i}, {j})")));
            }
            m.entries[i * size + j] = v;
        }
        Ok(m)
    }
}

/// How (leaf, ancestor) pairs are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HierarchyMode {
    /// Rate 1 in both directions: leaf and ancestor never suppress each other.
    #[default]
    RemoveSuppression,
    /// Rate 0 in both directions.
    LiteralZero,
}

impl std::str::FromStr for HierarchyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remove_suppression" => Ok(HierarchyMode::RemoveSuppression),
            "literal_zero" => Ok(HierarchyMode::LiteralZero),
            _ => Err(Error::Config(format!(
                "unknown hierarchy mode {s:?} (expected remove_suppression or literal_zero)"
            ))),
        }
    }
}

/// Granularity at which two labels count as co-occurring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoLabelLevel {
    /// Both labels on the same instance.
    #[default]
    Instance,
    /// Both labels anywhere on the same image.
    Image,
}

impl std::str::FromStr for CoLabelLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(CoLabelLevel::Instance),
            "image" => Ok(CoLabelLevel::Image),
            _ => Err(Error::Config(format!("unknown co-label level {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateOptions {
    pub min_rate: f64,
    pub hierarchy: HierarchyMode,
    pub level: CoLabelLevel,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions {
            min_rate: DEFAULT_MIN_RATE,
            hierarchy: HierarchyMode::default(),
            level: CoLabelLevel::default(),
        }
    }
}

/// Source and joint label counts. Counts from disjoint shards add.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoLabelCounts {
    size: usize,
    source: Vec<u64>,
    joint: Vec<u64>,
}

impl CoLabelCounts {
    pub fn new(size: usize) -> Self {
        CoLabelCounts {
            size,
            source: vec![0; size],
            joint: vec![0; size * size],
        }
    }

    /// Records one object whose reference labels are `source` and whose
    /// annotated labels are `target`.
    pub fn add(&mut self, source: &BTreeSet<ClassId>, target: &BTreeSet<ClassId>) {
        for &i in source {
            let i = i.index();
            self.source[i] += 1;
            for &j in target {
                let j = j.index();
                if j != i {
                    self.joint[i * self.size + j] += 1;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &CoLabelCounts) {
        assert_eq!(self.size, other.size);
        for (a, b) in self.source.iter_mut().zip(&other.source) {
            *a += b;
        }
        for (a, b) in self.joint.iter_mut().zip(&other.joint) {
            *a += b;
        }
    }

    pub fn source(&self, i: usize) -> u64 {
        self.source[i]
    }

    pub fn joint(&self, i: usize, j: usize) -> u64 {
        self.joint[i * self.size + j]
    }

    /// Raw ratios, zero for rows with no source objects.
    pub fn ratios(&self) -> RateMatrix {
        let mut m = RateMatrix::zeros(self.size);
        for i in 0..self.size {
            let n = self.source[i];
            if n == 0 {
                continue;
            }
            for j in 0..self.size {
                if i != j {
                    m.entries[i * self.size + j] = self.joint[i * self.size + j] as f64 / n as f64;
                }
            }
        }
        m
    }
}

fn check_min_rate(min_rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&min_rate) {
        Ok(())
    } else {
        Err(Error::Config(format!("min_rate {min_rate} outside [0, 1)")))
    }
}

fn finish(mut m: RateMatrix, t: &Taxonomy, opts: &RateOptions) -> RateMatrix {
    for v in m.entries.iter_mut() {
        if *v < opts.min_rate {
            *v = 0.0;
        }
    }
    apply_hierarchy_rule(&m, t, opts.hierarchy)
}

/// Counts co-labels within `a` itself.
pub fn count_co_labels(a: &AnnotationSet, level: CoLabelLevel) -> CoLabelCounts {
    let mut counts = CoLabelCounts::new(a.num_classes());
    match level {
        CoLabelLevel::Instance => {
            for inst in a.instances() {
                counts.add(&inst.labels, &inst.labels);
            }
        }
        CoLabelLevel::Image => {
            for img in 0..a.num_images() {
                let labels: BTreeSet<ClassId> = a
                    .instances_of(img)
                    .iter()
                    .flat_map(|&k| a.instances()[k].labels.iter().copied())
                    .collect();
                counts.add(&labels, &labels);
            }
        }
    }
    counts
}

/// Estimates `r[i][j] = #(objects labeled i and j) / #(objects labeled i)`.
pub fn estimate_rates(a: &AnnotationSet, t: &Taxonomy, opts: &RateOptions) -> Result<RateMatrix> {
    check_min_rate(opts.min_rate)?;
    if a.is_empty() {
        return Err(Error::EmptyAnnotations);
    }
    if a.num_classes() != t.num_classes() {
        return Err(Error::Dimension(format!(
            "annotations have {} classes, taxonomy {}",
            a.num_classes(),
            t.num_classes()
        )));
    }
    Ok(finish(count_co_labels(a, opts.level).ratios(), t, opts))
}

/// Estimates rates by joining reference labels (`truth`) with annotated labels
/// (`observed`) instance by instance: `r[i][j] = #(truth has i, observed has j)
/// / #(truth has i)`. Needed when label noise replaces rather than adds labels.
pub fn estimate_rates_joined(
    truth: &AnnotationSet,
    observed: &AnnotationSet,
    t: &Taxonomy,
    opts: &RateOptions,
) -> Result<RateMatrix> {
    check_min_rate(opts.min_rate)?;
    if truth.is_empty() {
        return Err(Error::EmptyAnnotations);
    }
    if truth.len() != observed.len() || truth.num_classes() != observed.num_classes() {
        return Err(Error::Misaligned(format!(
            "truth has {} instances over {} classes, observed {} over {}",
            truth.len(),
            truth.num_classes(),
            observed.len(),
            observed.num_classes()
        )));
    }
    let mut counts = CoLabelCounts::new(truth.num_classes());
    for (a, b) in truth.instances().iter().zip(observed.instances()) {
        counts.add(&a.labels, &b.labels);
    }
    Ok(finish(counts.ratios(), t, opts))
}

/// Pins every (leaf, ancestor) and (ancestor, leaf) entry; other entries are
/// copied unchanged.
pub fn apply_hierarchy_rule(m: &RateMatrix, t: &Taxonomy, mode: HierarchyMode) -> RateMatrix {
    assert_eq!(m.size(), t.num_classes(), "rate matrix and taxonomy sizes differ");
    let value = match mode {
        HierarchyMode::RemoveSuppression => 1.0,
        HierarchyMode::LiteralZero => 0.0,
    };
    let mut out = m.clone();
    let n = m.size();
    for leaf in t.leaves() {
        for anc in t.ancestors(leaf) {
            let (i, j) = (leaf.index(), anc.index());
            out.entries[i * n + j] = value;
            out.entries[j * n + i] = value;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusedPair {
    pub source: ClassId,
    pub target: ClassId,
    pub rate: f64,
}

/// The `k` largest nonzero off-diagonal rates between classes that are not in
/// an ancestor relation, descending; ties go to the smaller `(i, j)`.
pub fn top_confused_pairs(m: &RateMatrix, t: &Taxonomy, k: usize) -> Vec<ConfusedPair> {
    let mut pairs: Vec<ConfusedPair> = m
        .nonzero()
        .filter(|&(i, j, _)| {
            i != j && !t.is_ancestor(ClassId(i), ClassId(j)) && !t.is_ancestor(ClassId(j), ClassId(i))
        })
        .map(|(i, j, rate)| ConfusedPair {
            source: ClassId(i),
            target: ClassId(j),
            rate,
        })
        .collect();
    pairs.sort_by(|a, b| {
        b.rate
            .total_cmp(&a.rate)
            .then(a.source.cmp(&b.source))
            .then(a.target.cmp(&b.target))
    });
    pairs.truncate(k);
    pairs
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::taxonomy::Instance;

    fn ids(v: &[usize]) -> Vec<ClassId> {
        v.iter().copied().map(ClassId).collect()
    }

    fn annotations(c: usize, rows: &[(&str, &[usize])]) -> AnnotationSet {
        let inst = rows
            .iter()
            .map(|(img, l)| Instance::new(*img, ids(l)))
            .collect();
        AnnotationSet::new(c, inst, BTreeMap::new()).unwrap()
    }

    fn no_floor() -> RateOptions {
        RateOptions {
            min_rate: 0.0,
            ..RateOptions::default()
        }
    }

    #[test]
    fn torch_flashlight_rate() {
        // class 0 = torch, 1 = flashlight, 2 = unrelated
        let mut rows: Vec<(String, Vec<usize>)> = Vec::new();
        for k in 0..100 {
            let labels = if k < 65 { vec![0, 1] } else { vec![0] };
            rows.push((format!("i{k}"), labels));
        }
        rows.push(("j".into(), vec![2]));
        let borrowed: Vec<(&str, &[usize])> =
            rows.iter().map(|(a, b)| (a.as_str(), b.as_slice())).collect();
        let a = annotations(3, &borrowed);
        let m = estimate_rates(&a, &Taxonomy::flat(3), &RateOptions::default()).unwrap();
        assert!((m.get(0, 1) - 0.65).abs() < 1e-15);
        // flashlight is always co-labeled torch
        assert_eq!(m.get(1, 0), 1.0);
        assert!(m.row(2).iter().all(|&v| v == 0.0));
        assert_eq!(m.get(0, 0), 0.0);
    }

    #[test]
    fn min_rate_floors_small_entries() {
        let mut rows = vec![("a", &[0usize, 1][..])];
        rows.extend(std::iter::repeat_n(("b", &[0usize][..]), 24));
        rows.push(("c", &[0, 1]));
        // raw rate 2/26 ~ 0.077 sits below the 0.1 floor
        let a = annotations(2, &rows);
        let raw = estimate_rates(&a, &Taxonomy::flat(2), &no_floor()).unwrap();
        assert!((raw.get(0, 1) - 2.0 / 26.0).abs() < 1e-15);
        let floored = estimate_rates(&a, &Taxonomy::flat(2), &RateOptions::default()).unwrap();
        assert_eq!(floored.get(0, 1), 0.0);
        assert_eq!(floored.get(1, 0), 1.0);
    }

    #[test]
    fn invalid_inputs() {
        let a = annotations(2, &[]);
        assert!(matches!(
            estimate_rates(&a, &Taxonomy::flat(2), &RateOptions::default()),
            Err(Error::EmptyAnnotations)
        ));
        let a = annotations(2, &[("x", &[0])]);
        let bad = RateOptions {
            min_rate: 1.0,
            ..RateOptions::default()
        };
        assert!(matches!(estimate_rates(&a, &Taxonomy::flat(2), &bad), Err(Error::Config(_))));
    }

    fn fruit() -> Taxonomy {
        Taxonomy::new(
            vec!["fruit".into(), "apple".into(), "banana".into()],
            vec![None, Some(ClassId(0)), Some(ClassId(0))],
        )
        .unwrap()
    }

    #[test]
    fn hierarchy_modes() {
        let t = fruit();
        let mut m = RateMatrix::zeros(3);
        m.set(1, 2, 0.3);
        let on = apply_hierarchy_rule(&m, &t, HierarchyMode::RemoveSuppression);
        assert_eq!(on.get(1, 0), 1.0);
        assert_eq!(on.get(0, 1), 1.0);
        assert_eq!(on.get(1, 2), 0.3);
        let mut filled = RateMatrix::from_dense(3, vec![0.5; 9]).unwrap();
        filled.set(1, 2, 0.3);
        let off = apply_hierarchy_rule(&filled, &t, HierarchyMode::LiteralZero);
        assert_eq!(off.get(1, 0), 0.0);
        assert_eq!(off.get(0, 1), 0.0);
        assert_eq!(off.get(2, 0), 0.0);
        assert_eq!(off.get(1, 2), 0.3);

        let flat = Taxonomy::flat(3);
        for mode in [HierarchyMode::RemoveSuppression, HierarchyMode::LiteralZero] {
            assert_eq!(apply_hierarchy_rule(&filled, &flat, mode), filled);
        }
    }

    #[test]
    fn top_pairs_order_and_filtering() {
        let t = Taxonomy::flat(4);
        let mut m = RateMatrix::zeros(4);
        m.set(1, 2, 0.3);
        m.set(0, 3, 0.3);
        m.set(2, 0, 0.5);
        let top = top_confused_pairs(&m, &t, 5);
        let got: Vec<_> = top.iter().map(|p| (p.source.0, p.target.0, p.rate)).collect();
        assert_eq!(got, vec![(2, 0, 0.5), (0, 3, 0.3), (1, 2, 0.3)]);
        assert_eq!(top_confused_pairs(&m, &t, 1).len(), 1);
        assert!(top_confused_pairs(&RateMatrix::zeros(4), &t, 5).is_empty());

        let h = apply_hierarchy_rule(&RateMatrix::zeros(3), &fruit(), HierarchyMode::RemoveSuppression);
        assert!(top_confused_pairs(&h, &fruit(), 5).is_empty());
    }

    #[test]
    fn leopard_cheetah_listed_first() {
        let t = Taxonomy::flat(3);
        let mut m = RateMatrix::zeros(3);
        m.set(0, 1, 0.5);
        m.set(2, 1, 0.2);
        let top = top_confused_pairs(&m, &t, 55);
        assert_eq!((top[0].source, top[0].target, top[0].rate), (ClassId(0), ClassId(1), 0.5));
    }

    #[test]
    fn image_level_estimator() {
        let a = annotations(2, &[("x", &[0]), ("x", &[1]), ("y", &[0])]);
        let inst = estimate_rates(&a, &Taxonomy::flat(2), &no_floor()).unwrap();
        assert_eq!(inst.get(0, 1), 0.0);
        let img = estimate_rates(
            &a,
            &Taxonomy::flat(2),
            &RateOptions {
                level: CoLabelLevel::Image,
                ..no_floor()
            },
        )
        .unwrap();
        assert_eq!(img.get(0, 1), 0.5);
        assert_eq!(img.get(1, 0), 1.0);
    }

    #[test]
    fn joined_estimator_sees_replacements() {
        let truth = annotations(2, &[("a", &[0]), ("b", &[0]), ("c", &[0]), ("d", &[0])]);
        let observed = annotations(2, &[("a", &[1]), ("b", &[0]), ("c", &[1]), ("d", &[0])]);
        let m = estimate_rates_joined(&truth, &observed, &Taxonomy::flat(2), &no_floor()).unwrap();
        assert_eq!(m.get(0, 1), 0.5);
        assert_eq!(estimate_rates(&observed, &Taxonomy::flat(2), &no_floor()).unwrap().get(0, 1), 0.0);
    }

    #[test]
    fn tsv_round_trip() {
        let mut m = RateMatrix::zeros(3);
        m.set(0, 1, 0.1 + 0.2);
        m.set(2, 0, 1.0 / 3.0);
        let text = m.to_tsv();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("0\t1\t"));
        let back = RateMatrix::parse_tsv(&text, 3, Path::new("mem")).unwrap();
        assert_eq!(back, m);
        assert!(RateMatrix::parse_tsv("0\t0\t0.5\n", 3, Path::new("mem")).is_err());
        assert!(RateMatrix::parse_tsv("0\t3\t0.5\n", 3, Path::new("mem")).is_err());
    }

    #[test]
    fn counts_merge_is_additive() {
        let a = annotations(3, &[("x", &[0, 1]), ("y", &[1, 2])]);
        let b = annotations(3, &[("z", &[0, 2]), ("w", &[0])]);
        let mut ca = count_co_labels(&a, CoLabelLevel::Instance);
        ca.merge(&count_co_labels(&b, CoLabelLevel::Instance));
        let all = annotations(3, &[("x", &[0, 1]), ("y", &[1, 2]), ("z", &[0, 2]), ("w", &[0])]);
        assert_eq!(ca, count_co_labels(&all, CoLabelLevel::Instance));
    }
}
