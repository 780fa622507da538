//! Soft-balance sampling.
//!
//! Per-class probabilities interpolate geometrically between the natural
//! image share `P_n(i) = n_i / sum_j n_j` and the class-aware uniform share
//! `P_a(i) = 1 / C'` (with `C'` the number of non-empty classes):
//!
//! ```text
//! P_s(i)  = P_a(i)^lambda * P_n(i)^(1 - lambda)
//! P*_s(i) = P_s(i) / sum_j P_s(j)
//! ```
//!
//! `lambda = 0` reproduces the natural distribution, `lambda = 1` is
//! class-aware sampling, and values above 1 over-sample rare classes further.
//! Batches are filled one slot at a time: draw a class from `P*_s`, then an
//! image of that class.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::taxonomy::AnnotationSet;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    lambda: f64,
    counts: Vec<u64>,
    p_n: Vec<f64>,
    p_a: Vec<f64>,
    p_s: Vec<f64>,
    p_s_norm: Vec<f64>,
    active: usize,
    /// Image indices (into the source annotation set) per class.
    class_images: Vec<Vec<usize>>,
}

/// Sampling plan over the images of `a`.
pub fn build_plan(a: &AnnotationSet, lambda: f64) -> Result<SamplingPlan> {
    let c = a.num_classes();
    let mut class_images = vec![Vec::new(); c];
    for img in 0..a.num_images() {
        let mut seen = vec![false; c];
        for &k in a.instances_of(img) {
            for l in &a.instances()[k].labels {
                if !seen[l.index()] {
                    seen[l.index()] = true;
                    class_images[l.index()].push(img);
                }
            }
        }
    }
    SamplingPlan::with_images(class_images, lambda)
}

impl SamplingPlan {
    /// Plan from per-class image lists; `n_i` is the list length.
    pub fn with_images(class_images: Vec<Vec<usize>>, lambda: f64) -> Result<Self> {
        let counts: Vec<u64> = class_images.iter().map(|v| v.len() as u64).collect();
        let mut plan = Self::probabilities(&counts, lambda)?;
        plan.class_images = class_images;
        Ok(plan)
    }

    /// Probabilities only; such a plan reports but cannot sample.
    pub fn from_counts(counts: &[u64], lambda: f64) -> Result<Self> {
        Self::probabilities(counts, lambda)
    }

    fn probabilities(counts: &[u64], lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda {lambda} must be finite and >= 0")));
        }
        let total: u64 = counts.iter().sum();
        let active = counts.iter().filter(|&&n| n > 0).count();
        if total == 0 {
            return Err(Error::NoPositiveCounts);
        }
        let uniform = 1.0 / active as f64;
        let p_n: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
        let p_a: Vec<f64> = counts
            .iter()
            .map(|&n| if n > 0 { uniform } else { 0.0 })
            .collect();
        let p_s: Vec<f64> = p_n
            .iter()
            .zip(&p_a)
            .map(|(&pn, &pa)| {
                if pn > 0.0 {
                    pa.powf(lambda) * pn.powf(1.0 - lambda)
                } else {
                    0.0
                }
            })
            .collect();
        let z: f64 = p_s.iter().sum();
        let p_s_norm = p_s.iter().map(|v| v / z).collect();
        Ok(SamplingPlan {
            lambda,
            counts: counts.to_vec(),
            p_n,
            p_a,
            p_s,
            p_s_norm,
            active,
            class_images: vec![Vec::new(); counts.len()],
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// `C'`, classes with at least one image.
    pub fn active_classes(&self) -> usize {
        self.active
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn p_n(&self) -> &[f64] {
        &self.p_n
    }

    pub fn p_a(&self) -> &[f64] {
        &self.p_a
    }

    /// Unnormalized soft-balance probabilities.
    pub fn p_s(&self) -> &[f64] {
        &self.p_s
    }

    /// `P*_s`.
    pub fn p_s_norm(&self) -> &[f64] {
        &self.p_s_norm
    }

    pub fn class_images(&self, class: usize) -> &[usize] {
        &self.class_images[class]
    }
}

/// How an image is picked once its class has been drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImagePick {
    #[default]
    WithReplacement,
    /// Walk a shuffled copy of the class's images, reshuffling when exhausted.
    Cursor,
}

/// Stateful class-then-image sampler. One per worker; never shared.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    plan: &'a SamplingPlan,
    rng: ChaCha8Rng,
    classes: WeightedIndex<f64>,
    pick: ImagePick,
    cursors: Vec<(Vec<usize>, usize)>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(plan: &'a SamplingPlan, seed: u64, pick: ImagePick) -> Result<Self> {
        for (c, &p) in plan.p_s_norm.iter().enumerate() {
            if p > 0.0 && plan.class_images[c].is_empty() {
                return Err(Error::Config(format!(
                    "class {c} has probability {p} but no images to draw from"
                )));
            }
        }
        let classes = WeightedIndex::new(plan.p_s_norm.iter().copied())
            .map_err(|e| Error::Numerical(format!("class distribution: {e}")))?;
        Ok(BatchSampler {
            plan,
            rng: ChaCha8Rng::seed_from_u64(seed),
            classes,
            pick,
            cursors: vec![(Vec::new(), 0); plan.num_classes()],
        })
    }

    pub fn next_class(&mut self) -> usize {
        self.classes.sample(&mut self.rng)
    }

    fn image_of(&mut self, class: usize) -> usize {
        let images = &self.plan.class_images[class];
        match self.pick {
            ImagePick::WithReplacement => images[self.rng.random_range(0..images.len())],
            ImagePick::Cursor => {
                let (order, pos) = &mut self.cursors[class];
                if *pos >= order.len() {
                    order.clone_from(images);
                    order.shuffle(&mut self.rng);
                    *pos = 0;
                }
                *pos += 1;
                order[*pos - 1]
            }
        }
    }

    /// Image indices for one batch.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size)
            .map(|_| {
                let c = self.next_class();
                self.image_of(c)
            })
            .collect()
    }
}

/// One batch of image indices, reproducible from `seed`.
pub fn sample_batch(plan: &SamplingPlan, batch_size: usize, seed: u64) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    Ok(BatchSampler::new(plan, seed, ImagePick::WithReplacement)?.next_batch(batch_size))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassExposure {
    pub class: usize,
    pub images: u64,
    pub p_n: f64,
    pub p_s_norm: f64,
    /// Expected draws of each image of the class.
    pub expected_visits: f64,
    /// `max(0, 1 - visits)`.
    pub neglected_linear: f64,
    /// `exp(-visits)`, the Poisson chance an image is never drawn.
    pub never_sampled: f64,
}

/// Per-class exposure when `epochs * N` images are drawn, `N = sum_j n_j`.
pub fn exposure_report(plan: &SamplingPlan, epochs: f64) -> Vec<ClassExposure> {
    let total: u64 = plan.counts.iter().sum();
    (0..plan.num_classes())
        .map(|c| {
            let n = plan.counts[c];
            let visits = if n == 0 {
                0.0
            } else {
                epochs * plan.p_s_norm[c] * total as f64 / n as f64
            };
            ClassExposure {
                class: c,
                images: n,
                p_n: plan.p_n[c],
                p_s_norm: plan.p_s_norm[c],
                expected_visits: visits,
                neglected_linear: (1.0 - visits).max(0.0),
                never_sampled: if n == 0 { 1.0 } else { (-visits).exp() },
            }
        })
        .collect()
}

pub fn exposure_tsv(rows: &[ClassExposure]) -> String {
    let mut out = String::from("class\tn_i\tP_n\tP*_s\texpected_visits\tnever_sampled\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.class, r.images, r.p_n, r.p_s_norm, r.expected_visits, r.never_sampled
        )
        .unwrap();
    }
    out
}

/// Shannon entropy of `P*_s`, in nats.
pub fn plan_entropy(plan: &SamplingPlan) -> f64 {
    plan.p_s_norm
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}
