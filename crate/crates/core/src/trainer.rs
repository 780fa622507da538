//! SGD training of a linear (optionally one-hidden-layer) classifier over
//! synthetic features.
//!
//! Targets are the observed labels; the per-epoch validation mAP is measured
//! against the truth labels of a held-out tail of the images.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::losses::{
    concurrent_softmax_infer, effective_number_weights, softmax_probs, LabelVector, LossKind,
};
use crate::rates::RateMatrix;
use crate::sampling::{build_plan, BatchSampler, ImagePick, SamplingPlan};
use crate::schedule::{next_epoch, sequential_order, PhaseKind, TrainPlan};
use crate::synth::{Features, SynthDataset};
use crate::taxonomy::AnnotationSet;

const CHECKPOINT_MAGIC: &[u8; 4] = b"IMBM";
const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// Parameters live in one flat vector: `[w1, b1]` when there is a hidden
/// layer, then the output `[w, b]`. Weight matrices are row-major with one
/// row per output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    classes: usize,
    dim: usize,
    hidden: usize,
    params: Vec<f64>,
}

fn param_count(classes: usize, dim: usize, hidden: usize) -> usize {
    if hidden == 0 {
        classes * (dim + 1)
    } else {
        hidden * (dim + 1) + classes * (hidden + 1)
    }
}

impl Model {
    pub fn zeros(classes: usize, dim: usize, hidden: usize) -> Self {
        Model {
            classes,
            dim,
            hidden,
            params: vec![0.0; param_count(classes, dim, hidden)],
        }
    }

    /// Linear models start at zero. With a hidden layer the first weights are
    /// He-initialised from `seed`; everything else starts at zero.
    pub fn init(classes: usize, dim: usize, hidden: usize, seed: u64) -> Self {
        let mut m = Model::zeros(classes, dim, hidden);
        if hidden > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = (2.0 / dim as f64).sqrt();
            for w in &mut m.params[..hidden * dim] {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        m
    }

    pub fn from_params(classes: usize, dim: usize, hidden: usize, params: Vec<f64>) -> Result<Self> {
        let expected = param_count(classes, dim, hidden);
        if params.len() != expected {
            return Err(Error::Dimension(format!(
                "{} parameters for a model needing {expected}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(Model {
            classes,
            dim,
            hidden,
            params,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_dim(&self, x: &[f32]) -> Result<()> {
        if x.len() == self.dim {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "feature of length {} for a model of input dimension {}",
                x.len(),
                self.dim
            )))
        }
    }

    /// Logits, plus the hidden activations when there is a hidden layer.
    fn forward_cached(&self, x: &[f32]) -> (Vec<f64>, Vec<f64>) {
        let (input, offset): (Vec<f64>, usize) = if self.hidden == 0 {
            (x.iter().map(|&v| v as f64).collect(), 0)
        } else {
            let (d, h) = (self.dim, self.hidden);
            let b1 = &self.params[h * d..h * d + h];
            let act = (0..h)
                .map(|u| {
                    let row = &self.params[u * d..(u + 1) * d];
                    let pre = b1[u] + row.iter().zip(x).map(|(w, &v)| w * v as f64).sum::<f64>();
                    pre.max(0.0)
                })
                .collect();
            (act, h * (d + 1))
        };
        let n = input.len();
        let w = &self.params[offset..offset + self.classes * n];
        let b = &self.params[offset + self.classes * n..];
        let z = (0..self.classes)
            .map(|c| b[c] + w[c * n..(c + 1) * n].iter().zip(&input).map(|(a, v)| a * v).sum::<f64>())
            .collect();
        (z, input)
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.forward_cached(x).0)
    }

    pub fn forward_all(&self, features: &Features) -> Result<Vec<Vec<f64>>> {
        (0..features.rows()).map(|k| self.forward(features.row(k))).collect()
    }

    /// Adds `scale * d(loss)/d(params)` to `grad` given `d(loss)/dz`.
    fn backward(&self, x: &[f32], input: &[f64], gz: &[f64], scale: f64, grad: &mut [f64]) {
        let n = input.len();
        let offset = if self.hidden == 0 { 0 } else { self.hidden * (self.dim + 1) };
        let bias = offset + self.classes * n;
        for (c, &g) in gz.iter().enumerate() {
            let g = g * scale;
            if g == 0.0 {
                continue;
            }
            let row = &mut grad[offset + c * n..offset + (c + 1) * n];
            for (r, v) in row.iter_mut().zip(input) {
                *r += g * v;
            }
            grad[bias + c] += g;
        }
        if self.hidden == 0 {
            return;
        }
        let (d, h) = (self.dim, self.hidden);
        let w = &self.params[offset..offset + self.classes * n];
        for u in 0..h {
            if input[u] <= 0.0 {
                continue;
            }
            let gh: f64 = (0..self.classes).map(|c| gz[c] * w[c * n + u]).sum::<f64>() * scale;
            let row = &mut grad[u * d..(u + 1) * d];
            for (r, &v) in row.iter_mut().zip(x) {
                *r += gh * v as f64;
            }
            grad[h * d + u] += gh;
        }
    }

    /// Checkpoint bytes: `IMBM`, version, classes, dim, hidden (u32 LE each),
    /// then the parameters as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [CHECKPOINT_VERSION, self.classes as u32, self.dim as u32, self.hidden as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &p in &self.params {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::parse(origin, 0, msg);
        if bytes.len() < 20 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing IMBM header".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap());
        if word(4) != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {}", word(4))));
        }
        let (classes, dim, hidden) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let body = &bytes[20..];
        if body.len() != 4 * param_count(classes, dim, hidden) {
            return Err(bad(format!(
                "{} parameter bytes for classes={classes} dim={dim} hidden={hidden}",
                body.len()
            )));
        }
        let params = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Model::from_params(classes, dim, hidden, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Model::from_bytes(&bytes, path)
    }
}

/// SGD with momentum; weight decay is folded into the gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            velocity: vec![0.0; num_params],
            momentum,
            weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), self.velocity.len());
        assert_eq!(grad.len(), self.velocity.len());
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= lr * *v;
        }
    }
}

/// Scoring rule applied to logits at prediction time.
#[derive(Debug, Clone, Copy)]
pub enum ScoreMode<'a> {
    Softmax,
    Sigmoid,
    Concurrent(&'a RateMatrix),
}

/// Owned counterpart of [`ScoreMode`] for configs; concurrent scoring takes
/// the rates of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TestMode {
    #[default]
    Softmax,
    Sigmoid,
    Concurrent,
}

impl TestMode {
    pub fn with(self, rates: &RateMatrix) -> ScoreMode<'_> {
        match self {
            TestMode::Softmax => ScoreMode::Softmax,
            TestMode::Sigmoid => ScoreMode::Sigmoid,
            TestMode::Concurrent => ScoreMode::Concurrent(rates),
        }
    }
}

impl std::str::FromStr for TestMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(TestMode::Softmax),
            "sigmoid" => Ok(TestMode::Sigmoid),
            "concurrent" => Ok(TestMode::Concurrent),
            _ => Err(Error::Config(format!(
                "unknown test mode {s:?} (softmax, sigmoid, concurrent)"
            ))),
        }
    }
}

impl fmt::Display for TestMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestMode::Softmax => "softmax",
            TestMode::Sigmoid => "sigmoid",
            TestMode::Concurrent => "concurrent",
        })
    }
}

/// Scores for the first `classes` logits of every row. Logits beyond that
/// (a background unit) take part in normalisation but are not reported.
pub fn predict_logits(logits: &[Vec<f64>], classes: usize, mode: ScoreMode<'_>) -> Result<Vec<Vec<f64>>> {
    logits
        .iter()
        .map(|z| {
            let mut s = match mode {
                ScoreMode::Softmax => softmax_probs(z),
                ScoreMode::Sigmoid => z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
                ScoreMode::Concurrent(r) => {
                    if r.size() == z.len() {
                        concurrent_softmax_infer(z, r)?
                    } else {
                        concurrent_softmax_infer(z, &pad_rates(r, z.len())?)?
                    }
                }
            };
            s.truncate(classes);
            Ok(s)
        })
        .collect()
}

pub fn predict(model: &Model, features: &Features, mode: ScoreMode<'_>) -> Result<Vec<Vec<f64>>> {
    predict_logits(&model.forward_all(features)?, model.classes(), mode)
}

/// Zero rows and columns for the extra classes.
fn pad_rates(r: &RateMatrix, size: usize) -> Result<RateMatrix> {
    if size < r.size() {
        return Err(Error::Dimension(format!(
            "{}x{0} rates for {size} logits",
            r.size()
        )));
    }
    let mut out = RateMatrix::zeros(size);
    for (i, j, v) in r.nonzero() {
        out.set(i, j, v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub plan: TrainPlan,
    /// Concurrent rates for the concurrent loss and concurrent scoring.
    pub rates: RateMatrix,
    pub test_mode: TestMode,
    pub hidden: usize,
    /// Share of images, taken from the end, held out for validation.
    pub val_fraction: f64,
    /// Effective-number class weighting; an instance weighs the mean weight
    /// of its observed labels.
    pub class_weight_beta: Option<f64>,
    /// Adds a logit that is never a target.
    pub background: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(loss: LossKind, plan: TrainPlan, rates: RateMatrix) -> Self {
        TrainConfig {
            loss,
            plan,
            rates,
            test_mode: TestMode::Softmax,
            hidden: 0,
            val_fraction: DEFAULT_VAL_FRACTION,
            class_weight_beta: None,
            background: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub phase: PhaseKind,
    pub lr: f64,
    pub train_loss: f64,
    /// NaN when there is no validation split.
    pub val_map: f64,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.phase, self.lr, self.train_loss, self.val_map
        )
    }
}

pub fn metrics_log(rows: &[EpochMetrics]) -> String {
    let mut out = String::new();
    for r in rows {
        writeln!(out, "{r}").unwrap();
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: Model,
    pub log: Vec<EpochMetrics>,
}

/// Image indices of the training and validation parts.
pub fn split_images(num_images: usize, val_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {val_fraction} outside [0, 1)")));
    }
    let val = (num_images as f64 * val_fraction).round() as usize;
    let train = num_images - val;
    if train == 0 {
        return Err(Error::Config(format!(
            "val_fraction {val_fraction} leaves no training images out of {num_images}"
        )));
    }
    Ok(((0..train).collect(), (train..num_images).collect()))
}

fn instances_of(a: &AnnotationSet, images: &[usize]) -> Vec<usize> {
    images.iter().flat_map(|&img| a.instances_of(img).iter().copied()).collect()
}

/// Mean weighted loss over `rows` and its gradient with respect to the
/// model parameters.
pub fn batch_loss_and_grad(
    model: &Model,
    features: &Features,
    rows: &[usize],
    labels: &[LabelVector],
    weights: Option<&[f64]>,
    loss: &LossKind,
    rates: &RateMatrix,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.params.len()];
    let mut total = 0.0;
    let scale = 1.0 / rows.len() as f64;
    for &k in rows {
        let x = features.row(k);
        model.check_dim(x)?;
        let (z, input) = model.forward_cached(x);
        let res = loss.evaluate(&z, &labels[k], rates)?;
        let w = weights.map_or(1.0, |w| w[k]);
        total += w * res.value;
        model.backward(x, &input, &res.gradient, w * scale, &mut grad);
    }
    Ok((total * scale, grad))
}

/// Per-epoch seed for balanced batches.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add(0xA076_1D64_78BD_642F_u64.wrapping_mul(epoch as u64 + 1))
}

pub fn train(ds: &SynthDataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    let c = ds.num_classes();
    if ds.features.rows() != ds.observed.len() || ds.truth.len() != ds.observed.len() {
        return Err(Error::Misaligned(format!(
            "{} feature rows, {} observed and {} truth instances",
            ds.features.rows(),
            ds.observed.len(),
            ds.truth.len()
        )));
    }
    if cfg.rates.size() != c {
        return Err(Error::Dimension(format!(
            "{0}x{0} rates for {c} classes",
            cfg.rates.size()
        )));
    }
    let out_classes = c + usize::from(cfg.background);
    let rates = if cfg.background {
        pad_rates(&cfg.rates, out_classes)?
    } else {
        cfg.rates.clone()
    };

    let (train_imgs, val_imgs) = split_images(ds.observed.num_images(), cfg.val_fraction)?;
    let train_set = ds.observed.select_images(&train_imgs);
    let train_groups: Vec<&[usize]> =
        train_imgs.iter().map(|&img| ds.observed.instances_of(img)).collect();
    let val_rows = instances_of(&ds.truth, &val_imgs);
    let val_features = ds.features.select(&val_rows);
    let val_truth = ds.truth.select_images(&val_imgs);

    let labels: Vec<LabelVector> = ds
        .observed
        .instances()
        .iter()
        .map(|inst| {
            let mut mask = vec![false; out_classes];
            for l in &inst.labels {
                mask[l.index()] = true;
            }
            LabelVector::from_mask(mask)
        })
        .collect();
    let weights = match cfg.class_weight_beta {
        None => None,
        Some(beta) => {
            let per_class = effective_number_weights(&train_set.counts().images, beta)?;
            Some(
                ds.observed
                    .instances()
                    .iter()
                    .map(|inst| {
                        inst.labels.iter().map(|l| per_class[l.index()]).sum::<f64>()
                            / inst.labels.len() as f64
                    })
                    .collect::<Vec<f64>>(),
            )
        }
    };

    let plan = &cfg.plan;
    let mut model = Model::init(out_classes, ds.features.dim(), cfg.hidden, cfg.seed);
    let mut opt = OptimizerState::new(model.params.len(), plan.momentum, plan.weight_decay);
    let mut sampling: Option<(f64, SamplingPlan)> = None;
    let mut log = Vec::with_capacity(plan.total_epochs());
    let n_train = train_imgs.len();
    let bs = plan.batch_size;

    for epoch in 0..plan.total_epochs() {
        let spec = next_epoch(plan, epoch)?;
        let batches: Vec<Vec<usize>> = match spec.kind {
            PhaseKind::Sequential => sequential_order(n_train, cfg.seed, epoch)
                .chunks(bs)
                .map(|c| c.to_vec())
                .collect(),
            PhaseKind::Balanced { lambda } => {
                if sampling.as_ref().is_none_or(|(l, _)| *l != lambda) {
                    sampling = Some((lambda, build_plan(&train_set, lambda)?));
                }
                let sp = &sampling.as_ref().unwrap().1;
                let mut sampler = BatchSampler::new(sp, epoch_seed(cfg.seed, epoch), ImagePick::WithReplacement)?;
                (0..n_train.div_ceil(bs)).map(|_| sampler.next_batch(bs)).collect()
            }
        };

        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let rows: Vec<usize> = batch.iter().flat_map(|&i| train_groups[i].iter().copied()).collect();
            let (value, grad) = batch_loss_and_grad(
                &model,
                &ds.features,
                &rows,
                &labels,
                weights.as_deref(),
                &cfg.loss,
                &rates,
            )?;
            if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b + 1,
                    value,
                });
            }
            loss_sum += value;
            opt.step(&mut model.params, &grad, spec.lr);
        }

        let val_map = if val_rows.is_empty() {
            f64::NAN
        } else {
            let scores = predict_logits(
                &model.forward_all(&val_features)?,
                c,
                cfg.test_mode.with(&rates),
            )?;
            evaluate(&scores, &val_truth)?.map
        };
        log.push(EpochMetrics {
            epoch: epoch + 1,
            phase: spec.kind,
            lr: spec.lr,
            train_loss: loss_sum / batches.len() as f64,
            val_map,
        });
    }
    Ok(TrainOutput { model, log })
}

/// Evaluates `model` on the images of `ds` listed in `images` against truth.
pub fn evaluate_model(
    model: &Model,
    ds: &SynthDataset,
    images: &[usize],
    mode: ScoreMode<'_>,
) -> Result<EvalReport> {
    let c = ds.num_classes();
    if model.classes() < c {
        return Err(Error::Dimension(format!(
            "model scores {} classes, dataset has {c}",
            model.classes()
        )));
    }
    let rows = instances_of(&ds.truth, images);
    let scores = predict_logits(&model.forward_all(&ds.features.select(&rows))?, c, mode)?;
    evaluate(&scores, &ds.truth.select_images(images))
}
