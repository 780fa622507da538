//! Run configuration: built-in defaults, then a `key=value` file, then
//! `--key value` flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use imlabel::{Error, Result};

pub struct Key {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
        help,
    }
}

const fn optional(name: &'static str, help: &'static str) -> Key {
    Key {
        name,
        default: None,
        help,
    }
}

pub struct Command {
    pub name: &'static str,
    pub about: &'static str,
    pub keys: &'static [Key],
}

pub const COMMANDS: &[Command] = &[
    Command {
        name: "gen-data",
        about: "Generate a synthetic dataset",
        keys: &[
            key("out", "data", "output directory"),
            key("seed", "0", "random seed"),
            key("num_leaf", "40", "leaf classes"),
            key("num_parents", "8", "parent classes"),
            key("depth", "3", "hierarchy levels including leaves (1-5)"),
            key("imbalance_magnitude", "100", "largest / smallest leaf image count"),
            key("feature_dim", "32", "feature dimension"),
            key("prototype_radius", "6", "distance of leaf prototypes from the origin"),
            key("images", "5000", "number of images (one instance each)"),
            key("confusion_pairs", "", "flips as source:target:rate, comma separated"),
            key("flip_mode", "replace", "replace or colabel"),
            key("parent_only_prob", "0", "chance a leaf label is dropped, keeping ancestors"),
            key("multi_leaf_prob", "0", "chance of a second leaf on an instance"),
        ],
    },
    Command {
        name: "estimate-rates",
        about: "Estimate concurrent rates from annotations",
        keys: &[
            key("out", "out", "output directory"),
            key("seed", "0", "unused; accepted for uniformity"),
            key("dataset", "data", "dataset directory"),
            optional("annotations", "annotations file (default: <dataset>/annotations.jsonl)"),
            optional("taxonomy", "class file (default: <dataset>/classes.tsv)"),
            optional("truth", "reference annotations; joins truth against annotations"),
            key("min_rate", "0.1", "rates below this are zeroed"),
            key("hierarchy", "remove_suppression", "remove_suppression or literal_zero"),
            key("level", "instance", "instance or image co-labelling"),
            key("top_k", "55", "confused pairs to print"),
        ],
    },
    Command {
        name: "sample-plan",
        about: "Per-class sampling probabilities for a soft-balance lambda",
        keys: &[
            key("out", "out", "output directory"),
            key("seed", "0", "unused; accepted for uniformity"),
            key("dataset", "data", "dataset directory"),
            optional("annotations", "annotations file (default: <dataset>/annotations.jsonl)"),
            optional("taxonomy", "class file (default: <dataset>/classes.tsv)"),
            key("lambda", "0.7", "soft-balance factor"),
            key("epochs", "7", "epochs used for expected visits"),
        ],
    },
    Command {
        name: "train",
        about: "Train a classifier on a synthetic dataset",
        keys: &[
            key("out", "out", "output directory"),
            key("seed", "0", "random seed"),
            key("dataset", "data", "dataset directory"),
            optional("rates", "rate file (default: estimated from the training split)"),
            key("min_rate", "0.1", "min_rate when estimating rates"),
            key("hierarchy", "remove_suppression", "hierarchy rule when estimating rates"),
            key("loss", "softmax", "softmax, concurrent, concurrent_published, bce or focal"),
            key("gamma", "2", "focal gamma"),
            key("alpha", "0.25", "focal alpha"),
            key("test_mode", "softmax", "validation scoring: softmax, sigmoid or concurrent"),
            key("sampling", "sequential", "sequential or balanced"),
            key("lambda", "0.7", "soft-balance factor for balanced sampling"),
            key("epochs", "7", "epochs of the main phase"),
            key("pretrain_epochs", "0", "sequential pretraining epochs before a balanced phase"),
            key("batch_size", "16", "images per batch"),
            key("base_lr_per_sample", "0.00125", "learning rate = this x batch_size"),
            key("momentum", "0.9", "SGD momentum"),
            key("weight_decay", "0.0001", "weight decay"),
            key("hidden", "0", "hidden units (0 = linear)"),
            key("val_fraction", "0.2", "share of images held out for validation"),
            optional("class_weight_beta", "effective-number class weighting beta"),
            key("background", "false", "add a background logit"),
        ],
    },
    Command {
        name: "eval",
        about: "Evaluate a checkpoint against truth labels",
        keys: &[
            key("out", "out", "output directory"),
            key("seed", "0", "seed for the tie audit"),
            key("dataset", "data", "dataset directory"),
            key("checkpoint", "out/model.bin", "model checkpoint"),
            optional("rates", "rate file for concurrent scoring (default: next to the checkpoint)"),
            key("mode", "softmax", "softmax, sigmoid or concurrent"),
            key("split", "val", "val or all"),
            key("val_fraction", "0.2", "validation share used at training time"),
            key("tie_audit", "0", "random tie orders to try per class (0 = off)"),
        ],
    },
    Command {
        name: "gradcheck",
        about: "Finite-difference check of every loss gradient",
        keys: &[
            key("seed", "0", "random seed"),
            key("classes", "10", "maximum number of classes"),
            key("trials", "100", "random cases per loss"),
        ],
    },
];

pub fn command(name: &str) -> Option<&'static Command> {
    COMMANDS.iter().find(|c| c.name == name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: &'static str,
    values: BTreeMap<&'static str, String>,
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_file(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key=value, got {line:?}",
                origin.display(),
                n + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Later sources win: defaults, then `file`, then `flags`.
    pub fn resolve(
        cmd: &'static Command,
        file: &[(String, String)],
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut values = BTreeMap::new();
        for k in cmd.keys {
            if let Some(d) = k.default {
                values.insert(k.name, d.to_string());
            }
        }
        for (k, v) in file.iter().chain(flags) {
            let Some(spec) = cmd.keys.iter().find(|s| s.name == k) else {
                return Err(Error::Config(format!("unknown key {k:?} for {}", cmd.name)));
            };
            values.insert(spec.name, v.clone());
        }
        Ok(RunConfig {
            command: cmd.name,
            values,
        })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self
            .raw(key)
            .ok_or_else(|| Error::Config(format!("{key} is required")))?;
        raw.parse().map_err(|e: T::Err| {
            let msg = e.to_string();
            let msg = msg.strip_prefix("invalid configuration: ").unwrap_or(&msg);
            Error::Config(format!("{key}={raw:?}: {msg}"))
        })
    }

    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None | Some("") => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.get::<String>(key).map(PathBuf::from)
    }

    /// `key=value` lines in key order; feeding them back through `--config`
    /// reproduces the run. Written as `<command>.config`.
    pub fn echo(&self) -> String {
        let mut out = format!("# imlabel {}\n", self.command);
        for (k, v) in &self.values {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(format!("{}.config", self.command));
        fs::write(&path, self.echo()).map_err(|e| Error::io(&path, e))
    }
}
