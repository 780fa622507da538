//! Synthetic imbalanced multi-label data with hierarchy, confused pairs and
//! parent-only labels.
//!
//! Leaf `k` (ids `0..num_leaf`, most frequent first) is the primary leaf of a
//! share of images proportional to `(k + 1)^-s`, with `s` chosen so the first
//! and last leaf differ by `imbalance_magnitude`. Parents take the ids after
//! the leaves and only ever appear through the hierarchy. Each image holds a
//! single instance.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rates::{estimate_rates_joined, CoLabelLevel, HierarchyMode, RateMatrix, RateOptions};
use crate::taxonomy::{AnnotationSet, ClassId, Instance, Taxonomy, MAX_LEVELS};

pub const MAX_CLASSES: usize = 500;
const FEATURES_MAGIC: &[u8; 4] = b"IMBK";

pub const CLASSES_FILE: &str = "classes.tsv";
pub const OBSERVED_FILE: &str = "annotations.jsonl";
pub const TRUTH_FILE: &str = "annotations.truth.jsonl";
pub const FEATURES_FILE: &str = "features.bin";
pub const TRUE_RATES_FILE: &str = "rates.true.tsv";

/// What a confusion flip does to the observed leaf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlipMode {
    /// The object loses leaf `i` and gains `j`.
    #[default]
    Replace,
    /// The object keeps `i` and gains `j`.
    CoLabel,
}

impl std::str::FromStr for FlipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(FlipMode::Replace),
            "colabel" => Ok(FlipMode::CoLabel),
            _ => Err(Error::Config(format!("unknown flip mode {s:?} (replace or colabel)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionPair {
    pub source: usize,
    pub target: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_leaf: usize,
    pub num_parents: usize,
    /// Hierarchy levels including the leaves; 1 means a flat label set.
    pub depth: usize,
    pub imbalance_magnitude: f64,
    pub feature_dim: usize,
    pub confusion_pairs: Vec<ConfusionPair>,
    pub flip_mode: FlipMode,
    pub parent_only_prob: f64,
    pub multi_leaf_prob: f64,
    /// Distance of every leaf prototype from the origin.
    pub prototype_radius: f64,
    pub images: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_leaf: 40,
            num_parents: 8,
            depth: 3,
            imbalance_magnitude: 100.0,
            feature_dim: 32,
            confusion_pairs: Vec::new(),
            flip_mode: FlipMode::Replace,
            parent_only_prob: 0.0,
            multi_leaf_prob: 0.0,
            prototype_radius: 6.0,
            images: 5000,
            seed: 0,
        }
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} outside [0, 1]")))
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.num_leaf == 0 {
            return cfg("num_leaf must be >= 1".into());
        }
        if self.num_leaf + self.num_parents > MAX_CLASSES {
            return cfg(format!(
                "num_leaf + num_parents = {} exceeds {MAX_CLASSES}",
                self.num_leaf + self.num_parents
            ));
        }
        if self.depth == 0 || self.depth > MAX_LEVELS {
            return cfg(format!("depth {} outside 1..={MAX_LEVELS}", self.depth));
        }
        if self.depth == 1 && self.num_parents > 0 {
            return cfg("depth 1 leaves no room for parents".into());
        }
        if self.depth > 1 && self.num_parents < self.depth - 1 {
            return cfg(format!(
                "depth {} needs at least {} parents, got {}",
                self.depth,
                self.depth - 1,
                self.num_parents
            ));
        }
        if self.num_parents > self.num_leaf {
            return cfg(format!(
                "{} parents cannot all have a leaf among {} leaves",
                self.num_parents, self.num_leaf
            ));
        }
        if !(self.imbalance_magnitude >= 1.0 && self.imbalance_magnitude.is_finite()) {
            return cfg(format!("imbalance_magnitude {} must be >= 1", self.imbalance_magnitude));
        }
        if self.feature_dim == 0 {
            return cfg("feature_dim must be >= 1".into());
        }
        if self.images == 0 {
            return cfg("images must be >= 1".into());
        }
        if !(self.prototype_radius > 0.0 && self.prototype_radius.is_finite()) {
            return cfg(format!("prototype_radius {} must be positive", self.prototype_radius));
        }
        check_prob("parent_only_prob", self.parent_only_prob)?;
        check_prob("multi_leaf_prob", self.multi_leaf_prob)?;
        let mut outgoing = vec![0.0; self.num_leaf];
        let mut seen = BTreeSet::new();
        for p in &self.confusion_pairs {
            for id in [p.source, p.target] {
                if id >= self.num_leaf {
                    return cfg(format!(
                        "confusion pair ({}, {}) references {id}, which is not a leaf",
                        p.source, p.target
                    ));
                }
            }
            if p.source == p.target {
                return cfg(format!("confusion pair ({0}, {0}) flips a leaf onto itself", p.source));
            }
            if !seen.insert((p.source, p.target)) {
                return cfg(format!("confusion pair ({}, {}) repeated", p.source, p.target));
            }
            check_prob("flip rate", p.rate)?;
            outgoing[p.source] += p.rate;
            if outgoing[p.source] > 1.0 + 1e-12 {
                return cfg(format!("flip rates out of leaf {} sum above 1", p.source));
            }
        }
        Ok(())
    }

    /// Power-law exponent giving `imbalance_magnitude` between the first and last leaf.
    pub fn power_law_exponent(&self) -> f64 {
        if self.num_leaf < 2 {
            0.0
        } else {
            self.imbalance_magnitude.ln() / (self.num_leaf as f64).ln()
        }
    }
}

/// Row-major `rows x dim` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Features {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{dim} feature matrix",
                data.len()
            )));
        }
        Ok(Features { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn select(&self, rows: &[usize]) -> Features {
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &k in rows {
            data.extend_from_slice(self.row(k));
        }
        Features {
            rows: rows.len(),
            dim: self.dim,
            data,
        }
    }

    /// 16-byte header (`IMBK`, rows, dim, reserved) then little-endian f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(FEATURES_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::parse(origin, 0, msg);
        if bytes.len() < 16 || &bytes[..4] != FEATURES_MAGIC {
            return Err(bad("missing IMBK header".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap()) as usize;
        let (rows, dim) = (word(4), word(8));
        let body = &bytes[16..];
        if body.len() != rows * dim * 4 {
            return Err(bad(format!(
                "header says {rows}x{dim} but the body holds {} bytes",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Features { rows, dim, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Features::from_bytes(&bytes, path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub taxonomy: Taxonomy,
    pub features: Features,
    pub observed: AnnotationSet,
    pub truth: AnnotationSet,
    pub true_rates: RateMatrix,
}

impl SynthDataset {
    pub fn num_classes(&self) -> usize {
        self.taxonomy.num_classes()
    }

    /// Writes the five dataset files into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.taxonomy.save(&dir.join(CLASSES_FILE))?;
        self.observed.save(&dir.join(OBSERVED_FILE))?;
        self.truth.save(&dir.join(TRUTH_FILE))?;
        self.features.save(&dir.join(FEATURES_FILE))?;
        self.true_rates.save(&dir.join(TRUE_RATES_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let taxonomy = Taxonomy::load(&dir.join(CLASSES_FILE))?;
        let c = taxonomy.num_classes();
        let observed = AnnotationSet::load(&dir.join(OBSERVED_FILE), c)?;
        let truth = AnnotationSet::load(&dir.join(TRUTH_FILE), c)?;
        let features = Features::load(&dir.join(FEATURES_FILE))?;
        let true_rates = RateMatrix::load(&dir.join(TRUE_RATES_FILE), c)?;
        if observed.len() != truth.len() || features.rows() != truth.len() {
            return Err(Error::Misaligned(format!(
                "{}: {} observed instances, {} truth instances, {} feature rows",
                dir.display(),
                observed.len(),
                truth.len(),
                features.rows()
            )));
        }
        if observed
            .instances()
            .iter()
            .zip(truth.instances())
            .any(|(a, b)| a.image_id != b.image_id)
        {
            return Err(Error::Misaligned(format!(
                "{}: observed and truth image ids differ",
                dir.display()
            )));
        }
        Ok(SynthDataset {
            taxonomy,
            features,
            observed,
            truth,
            true_rates,
        })
    }
}

/// Parents are split into `depth - 1` levels (deeper levels take the
/// remainder); each parent below the top hangs off the level above, and leaf
/// `k` hangs off parent `k mod num_parents`.
fn build_taxonomy(cfg: &SynthConfig) -> Result<Taxonomy> {
    let (nl, np) = (cfg.num_leaf, cfg.num_parents);
    let mut names: Vec<String> = (0..nl).map(|k| format!("leaf{k}")).collect();
    names.extend((0..np).map(|k| format!("parent{k}")));
    let mut parent = vec![None; nl + np];
    if np > 0 {
        let levels = cfg.depth - 1;
        let mut level_ids: Vec<Vec<usize>> = Vec::with_capacity(levels);
        let mut next = nl;
        for l in 0..levels {
            let size = np / levels + usize::from(l >= levels - np % levels);
            level_ids.push((next..next + size).collect());
            next += size;
        }
        for l in 1..levels {
            let above = &level_ids[l - 1];
            for (k, &id) in level_ids[l].iter().enumerate() {
                parent[id] = Some(ClassId(above[k % above.len()]));
            }
        }
        for (k, p) in parent.iter_mut().enumerate().take(nl) {
            *p = Some(ClassId(nl + k % np));
        }
    }
    Taxonomy::new(names, parent)
}

/// Primary-leaf quotas by largest remainder; ties favour the lower id.
fn allocate(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let short = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let taxonomy = build_taxonomy(cfg)?;
    let (nl, d) = (cfg.num_leaf, cfg.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut prototypes = vec![0.0f64; nl * d];
    for p in prototypes.chunks_mut(d) {
        loop {
            for v in p.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                p.iter_mut().for_each(|v| *v *= cfg.prototype_radius / norm);
                break;
            }
        }
    }

    let s = cfg.power_law_exponent();
    let weights: Vec<f64> = (0..nl).map(|k| ((k + 1) as f64).powf(-s)).collect();
    let mut primaries: Vec<usize> = allocate(&weights, cfg.images)
        .into_iter()
        .enumerate()
        .flat_map(|(k, n)| std::iter::repeat_n(k, n))
        .collect();
    primaries.shuffle(&mut rng);
    let leaf_dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::Numerical(format!("leaf distribution: {e}")))?;

    let mut flips: Vec<Vec<ConfusionPair>> = vec![Vec::new(); nl];
    for p in &cfg.confusion_pairs {
        flips[p.source].push(*p);
    }

    let closure = |leaves: &[usize]| -> BTreeSet<ClassId> {
        leaves.iter().flat_map(|&l| taxonomy.closure(ClassId(l))).collect()
    };

    let mut data = Vec::with_capacity(cfg.images * d);
    let mut truth = Vec::with_capacity(cfg.images);
    let mut observed = Vec::with_capacity(cfg.images);
    for (k, &primary) in primaries.iter().enumerate() {
        let image_id = format!("img{k}");
        let mut leaves = vec![primary];
        if nl > 1 && rng.random::<f64>() < cfg.multi_leaf_prob {
            let second = loop {
                let l = leaf_dist.sample(&mut rng);
                if l != primary {
                    break l;
                }
            };
            leaves.push(second);
        }

        for j in 0..d {
            let centre: f64 = leaves.iter().map(|&l| prototypes[l * d + j]).sum();
            let noise: f64 = rng.sample(StandardNormal);
            data.push((centre + noise) as f32);
        }

        let mut shown = Vec::with_capacity(leaves.len() + 1);
        for &l in &leaves {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let hit = flips[l].iter().find(|p| {
                acc += p.rate;
                u < acc
            });
            match (hit, cfg.flip_mode) {
                (Some(p), FlipMode::Replace) => shown.push(p.target),
                (Some(p), FlipMode::CoLabel) => shown.extend([l, p.target]),
                (None, _) => shown.push(l),
            }
        }
        shown.sort_unstable();
        shown.dedup();

        let mut labels = BTreeSet::new();
        for &l in &shown {
            let u: f64 = rng.random();
            let ancestors = taxonomy.ancestors(ClassId(l));
            if ancestors.is_empty() || u >= cfg.parent_only_prob {
                labels.insert(ClassId(l));
            }
            labels.extend(ancestors);
        }

        truth.push(Instance::new(image_id.clone(), closure(&leaves)));
        observed.push(Instance::new(image_id, labels));
    }

    let c = taxonomy.num_classes();
    let mut true_rates = RateMatrix::zeros(c);
    for p in &cfg.confusion_pairs {
        true_rates.set(p.source, p.target, p.rate);
    }
    Ok(SynthDataset {
        features: Features::new(cfg.images, d, data)?,
        observed: AnnotationSet::new(c, observed, Default::default())?,
        truth: AnnotationSet::new(c, truth, Default::default())?,
        taxonomy,
        true_rates,
    })
}

/// Largest `|estimated - configured|` over the configured flip pairs, with
/// rates estimated by joining truth against observed labels. Parent-only
/// drops remove flipped leaves too, so the estimate reads low when they are on.
pub fn rate_recovery_check(ds: &SynthDataset) -> Result<f64> {
    let opts = RateOptions {
        min_rate: 0.0,
        hierarchy: HierarchyMode::LiteralZero,
        level: CoLabelLevel::Instance,
    };
    let est = estimate_rates_joined(&ds.truth, &ds.observed, &ds.taxonomy, &opts)?;
    Ok(ds
        .true_rates
        .nonzero()
        .map(|(i, j, r)| (est.get(i, j) - r).abs())
        .fold(0.0, f64::max))
}
