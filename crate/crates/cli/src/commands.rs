use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use imlabel::eval::{tie_audit, ScoredEntry};
use imlabel::gradcheck::run_suite;
use imlabel::losses::LossKind;
use imlabel::rates::{estimate_rates, estimate_rates_joined, top_confused_pairs, RateMatrix, RateOptions};
use imlabel::sampling::{build_plan, exposure_report, exposure_tsv, plan_entropy};
use imlabel::schedule::{Phase, PhaseKind, TrainPlan};
use imlabel::synth::{self, generate, ConfusionPair, SynthConfig, SynthDataset};
use imlabel::taxonomy::{imbalance_magnitude, AnnotationSet, Taxonomy, Verification};
use imlabel::trainer::{
    evaluate_model, metrics_log, predict_logits, split_images, train, Model, TestMode, TrainConfig,
};
use imlabel::{ClassId, Error, Result};

use crate::config::RunConfig;

pub fn run(cfg: &RunConfig) -> Result<()> {
    match cfg.command {
        "gen-data" => gen_data(cfg),
        "estimate-rates" => estimate(cfg),
        "sample-plan" => sample_plan(cfg),
        "train" => train_cmd(cfg),
        "eval" => eval_cmd(cfg),
        "gradcheck" => gradcheck(cfg),
        other => Err(Error::Config(format!("unknown command {other}"))),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.path("out")?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `source:target:rate` triples, comma separated.
pub fn parse_pairs(s: &str) -> Result<Vec<ConfusionPair>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let bad = || Error::Config(format!("confusion pair {p:?} is not source:target:rate"));
            let mut it = p.split(':');
            let (Some(a), Some(b), Some(r), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad());
            };
            Ok(ConfusionPair {
                source: a.trim().parse().map_err(|_| bad())?,
                target: b.trim().parse().map_err(|_| bad())?,
                rate: r.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let sc = SynthConfig {
        num_leaf: cfg.get("num_leaf")?,
        num_parents: cfg.get("num_parents")?,
        depth: cfg.get("depth")?,
        imbalance_magnitude: cfg.get("imbalance_magnitude")?,
        feature_dim: cfg.get("feature_dim")?,
        confusion_pairs: parse_pairs(cfg.raw("confusion_pairs").unwrap_or(""))?,
        flip_mode: cfg.get("flip_mode")?,
        parent_only_prob: cfg.get("parent_only_prob")?,
        multi_leaf_prob: cfg.get("multi_leaf_prob")?,
        prototype_radius: cfg.get("prototype_radius")?,
        images: cfg.get("images")?,
        seed: cfg.get("seed")?,
    };
    let ds = generate(&sc)?;
    let dir = out_dir(cfg)?;
    ds.save(&dir)?;
    cfg.write_echo(&dir)?;
    let counts = &ds.truth.counts().images;
    let leaves: Vec<u64> = ds.taxonomy.leaves().iter().map(|l| counts[l.index()]).collect();
    println!(
        "classes={} leaves={} images={} leaf_imbalance={:.1} dir={}",
        ds.num_classes(),
        leaves.len(),
        ds.truth.num_images(),
        imbalance_magnitude(&leaves)?,
        dir.display()
    );
    Ok(())
}

/// Taxonomy and observed annotations, from explicit paths or the dataset dir.
fn load_annotations(cfg: &RunConfig) -> Result<(Taxonomy, AnnotationSet)> {
    let dataset = cfg.path("dataset")?;
    let taxonomy_path = cfg
        .get_opt::<String>("taxonomy")?
        .map_or_else(|| dataset.join(synth::CLASSES_FILE), PathBuf::from);
    let ann_path = cfg
        .get_opt::<String>("annotations")?
        .map_or_else(|| dataset.join(synth::OBSERVED_FILE), PathBuf::from);
    let taxonomy = Taxonomy::load(&taxonomy_path)?;
    let ann = AnnotationSet::load(&ann_path, taxonomy.num_classes())?;
    Ok((taxonomy, ann))
}

fn rate_options(cfg: &RunConfig) -> Result<RateOptions> {
    Ok(RateOptions {
        min_rate: cfg.get("min_rate")?,
        hierarchy: cfg.get("hierarchy")?,
        level: match cfg.raw("level") {
            Some(_) => cfg.get("level")?,
            None => Default::default(),
        },
    })
}

fn estimate(cfg: &RunConfig) -> Result<()> {
    let (taxonomy, ann) = load_annotations(cfg)?;
    let opts = rate_options(cfg)?;
    let rates = match cfg.get_opt::<String>("truth")? {
        Some(p) => {
            let truth = AnnotationSet::load(Path::new(&p), taxonomy.num_classes())?;
            estimate_rates_joined(&truth, &ann, &taxonomy, &opts)?
        }
        None => estimate_rates(&ann, &taxonomy, &opts)?,
    };
    let dir = out_dir(cfg)?;
    rates.save(&dir.join("rates.tsv"))?;
    cfg.write_echo(&dir)?;
    let pairs = top_confused_pairs(&rates, &taxonomy, cfg.get("top_k")?);
    println!("source\ttarget\trate");
    for p in &pairs {
        println!(
            "{}\t{}\t{:.4}",
            taxonomy.name(p.source),
            taxonomy.name(p.target),
            p.rate
        );
    }
    println!("nonzero_rates={} confused_pairs={}", rates.nonzero().count(), pairs.len());
    Ok(())
}

fn sample_plan(cfg: &RunConfig) -> Result<()> {
    let (_, ann) = load_annotations(cfg)?;
    let plan = build_plan(&ann, cfg.get("lambda")?)?;
    let rows = exposure_report(&plan, cfg.get("epochs")?);
    let dir = out_dir(cfg)?;
    write(&dir.join("sample-plan.tsv"), &exposure_tsv(&rows))?;
    cfg.write_echo(&dir)?;
    let active: Vec<f64> = plan.p_s_norm().iter().copied().filter(|&p| p > 0.0).collect();
    println!(
        "lambda={} active_classes={} entropy={:.4} min_p={:.6} max_p={:.6}",
        plan.lambda(),
        plan.active_classes(),
        plan_entropy(&plan),
        active.iter().copied().fold(f64::INFINITY, f64::min),
        active.iter().copied().fold(0.0, f64::max),
    );
    Ok(())
}

fn phase_kind(cfg: &RunConfig) -> Result<PhaseKind> {
    match cfg.raw("sampling") {
        Some("sequential") => Ok(PhaseKind::Sequential),
        Some("balanced") => Ok(PhaseKind::Balanced {
            lambda: cfg.get("lambda")?,
        }),
        other => Err(Error::Config(format!(
            "unknown sampling {other:?} (sequential or balanced)"
        ))),
    }
}

fn train_plan(cfg: &RunConfig) -> Result<TrainPlan> {
    let kind = phase_kind(cfg)?;
    let epochs = cfg.get("epochs")?;
    let pretrain: usize = cfg.get("pretrain_epochs")?;
    let mut phases = Vec::new();
    if pretrain > 0 {
        phases.push(Phase::scaled(PhaseKind::Sequential, pretrain)?);
    }
    phases.push(Phase::scaled(kind, epochs)?);
    let mut plan = TrainPlan::new(phases, cfg.get("batch_size")?)?;
    plan.base_lr_per_sample = cfg.get("base_lr_per_sample")?;
    plan.momentum = cfg.get("momentum")?;
    plan.weight_decay = cfg.get("weight_decay")?;
    Ok(plan)
}

fn loss_kind(cfg: &RunConfig) -> Result<LossKind> {
    let mut loss: LossKind = cfg.get("loss")?;
    if let LossKind::Focal { gamma, alpha } = &mut loss {
        *gamma = cfg.get("gamma")?;
        *alpha = cfg.get("alpha")?;
    }
    Ok(loss)
}

fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let loss = loss_kind(cfg)?;
    let plan = train_plan(cfg)?;
    let val_fraction: f64 = cfg.get("val_fraction")?;
    let opts = rate_options(cfg)?;
    let ds = SynthDataset::load(&cfg.path("dataset")?)?;
    let c = ds.num_classes();
    let rates = match cfg.get_opt::<String>("rates")? {
        Some(p) => RateMatrix::load(Path::new(&p), c)?,
        None => {
            let (train_images, _) = split_images(ds.truth.num_images(), val_fraction)?;
            estimate_rates(&ds.observed.select_images(&train_images), &ds.taxonomy, &opts)?
        }
    };
    let mut tc = TrainConfig::new(loss, plan, rates);
    tc.test_mode = cfg.get("test_mode")?;
    tc.hidden = cfg.get("hidden")?;
    tc.val_fraction = val_fraction;
    tc.class_weight_beta = cfg.get_opt("class_weight_beta")?;
    tc.background = cfg.get("background")?;
    tc.seed = cfg.get("seed")?;

    let out = train(&ds, &tc)?;
    let dir = out_dir(cfg)?;
    out.model.save(&dir.join("model.bin"))?;
    tc.rates.save(&dir.join("rates.tsv"))?;
    write(&dir.join("metrics.log"), &metrics_log(&out.log))?;
    cfg.write_echo(&dir)?;
    print!("{}", metrics_log(&out.log));
    if let Some(last) = out.log.last() {
        println!("final_val_map={:.4} plan={}", last.val_map, tc.plan);
    }
    Ok(())
}

fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let mode: TestMode = cfg.get("mode")?;
    let trials: usize = cfg.get("tie_audit")?;
    let ds = SynthDataset::load(&cfg.path("dataset")?)?;
    let checkpoint = cfg.path("checkpoint")?;
    let model = Model::load(&checkpoint)?;
    let rates = match (mode, cfg.get_opt::<String>("rates")?) {
        (TestMode::Concurrent, Some(p)) => RateMatrix::load(Path::new(&p), ds.num_classes())?,
        (TestMode::Concurrent, None) => {
            let beside = checkpoint.with_file_name("rates.tsv");
            RateMatrix::load(&beside, ds.num_classes())?
        }
        _ => RateMatrix::zeros(ds.num_classes()),
    };
    let images: Vec<usize> = match cfg.raw("split") {
        Some("val") => split_images(ds.truth.num_images(), cfg.get("val_fraction")?)?.1,
        Some("all") => (0..ds.truth.num_images()).collect(),
        other => return Err(Error::Config(format!("unknown split {other:?} (val or all)"))),
    };
    let report = evaluate_model(&model, &ds, &images, mode.with(&rates))?;
    let dir = out_dir(cfg)?;
    write(&dir.join("eval-report.tsv"), &report.to_tsv())?;
    cfg.write_echo(&dir)?;

    if trials > 0 {
        let audit = audit_ties(&model, &ds, &images, mode.with(&rates), trials, cfg.get("seed")?)?;
        println!("tie_audit_max_spread={audit:.3e}");
    }
    let scored = report.per_class_ap.iter().filter(|a| a.is_some()).count();
    println!(
        "mAP={:.4} classes_scored={scored} images={} mode={mode}",
        report.map,
        images.len()
    );
    Ok(())
}

/// Largest spread of per-class AP over random tie orders.
fn audit_ties(
    model: &Model,
    ds: &SynthDataset,
    images: &[usize],
    mode: imlabel::trainer::ScoreMode<'_>,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let truth = ds.truth.select_images(images);
    let rows: Vec<usize> = images
        .iter()
        .flat_map(|&img| ds.truth.instances_of(img).iter().copied())
        .collect();
    let scores = predict_logits(&model.forward_all(&ds.features.select(&rows))?, ds.num_classes(), mode)?;
    let mut spread: f64 = 0.0;
    for c in 0..ds.num_classes() {
        let entries: Vec<ScoredEntry> = truth
            .instances()
            .iter()
            .zip(&scores)
            .map(|(inst, s)| {
                let positive = inst.labels.contains(&ClassId(c));
                let ignored = !positive && truth.verification(&inst.image_id, ClassId(c)) == Verification::Unverified;
                ScoredEntry::new(s[c], positive, ignored)
            })
            .collect();
        if let Some((lo, hi)) = tie_audit(&entries, trials, seed.wrapping_add(c as u64)) {
            spread = spread.max(hi - lo);
        }
    }
    Ok(spread)
}

fn gradcheck(cfg: &RunConfig) -> Result<()> {
    let reports = run_suite(cfg.get("classes")?, cfg.get("trials")?, cfg.get("seed")?)?;
    let mut table = String::from("loss\tcases\tfailures\tmax_rel_err\tstatus\n");
    for r in &reports {
        writeln!(
            table,
            "{}\t{}\t{}\t{:.3e}\t{}",
            r.loss.name(),
            r.cases,
            r.failures,
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        )
        .unwrap();
    }
    print!("{table}");
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.loss.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}
