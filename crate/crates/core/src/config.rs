//! Run configuration: line-oriented `key = value` with dotted sections.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! paths.corpus = data/corpus
//! train.batch_size = 32
//! loss.alpha = 0.25, 0.25, 0.25, 0.25, 0.25, 0.25, 0.25
//! ```
//!
//! Unknown and repeated keys are rejected. Every problem found is reported,
//! not just the first.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::{SplitMode, TiePolicy, DEFAULT_RATIOS};
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::loss::{LossKind, Reduction};
use crate::nn::{Head, NetworkConfig};
use crate::tensor::Precision;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "TERRAEXPR_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub mode: SplitMode,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: DEFAULT_RATIOS,
            mode: SplitMode::Strict,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: PathBuf,
    /// Relative to the corpus root.
    pub manifest: PathBuf,
    pub output: PathBuf,
    /// Shared by initialization, shuffling, splitting and GAN sampling.
    pub seed: u64,
    pub precision: Precision,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub gan: GanConfig,
    pub split: SplitConfig,
    pub tie_policy: TiePolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::from("corpus"),
            manifest: PathBuf::from("manifest.jsonl"),
            output: PathBuf::from("out"),
            seed: 0,
            precision: Precision::Oracle,
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            gan: GanConfig::default(),
            split: SplitConfig::default(),
            tie_policy: TiePolicy::default(),
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "precision",
    "paths.corpus",
    "paths.manifest",
    "paths.output",
    "network.resolution",
    "network.width_multiplier",
    "network.head",
    "train.batch_size",
    "train.lr",
    "train.lr_decay",
    "train.epochs",
    "train.adam.beta1",
    "train.adam.beta2",
    "train.adam.eps",
    "loss.kind",
    "loss.alpha",
    "loss.gamma",
    "loss.reduction",
    "gan.resolution",
    "gan.width",
    "gan.lr",
    "gan.batch_size",
    "gan.adam.beta1",
    "gan.adam.beta2",
    "gan.adam.eps",
    "gan.lambda_adv",
    "gan.lambda_au",
    "gan.lambda_att",
    "gan.lambda_cyc",
    "split.mode",
    "split.ratios",
    "annotate.tie_policy",
];

/// Raw `key = value` pairs, with the line each came from.
fn parse_pairs(text: &str, problems: &mut Vec<String>) -> BTreeMap<String, (usize, String)> {
    let mut pairs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            problems.push(format!("line {line_no}: expected `key = value`, got `{line}`"));
            continue;
        };
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            problems.push(format!("line {line_no}: unknown key `{key}`"));
            continue;
        }
        if let Some((first, _)) = pairs.get(key) {
            problems.push(format!("line {line_no}: `{key}` already set on line {first}"));
            continue;
        }
        pairs.insert(key.to_string(), (line_no, value.to_string()));
    }
    pairs
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{}`: {e}", p.trim())))
        .collect()
}

impl RunConfig {
    /// Parses configuration text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut problems = Vec::new();
        let pairs = parse_pairs(text, &mut problems);
        let mut cfg = RunConfig::default();
        for (key, (line_no, value)) in &pairs {
            if let Err(e) = cfg.set(key, value) {
                problems.push(format!("line {line_no}: {key}: {e}"));
            }
        }
        cfg.propagate();
        problems.extend(cfg.violations());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Reads a file, applies the seed override from the environment, resolves
    /// relative paths against the file's directory and checks they exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::parse(&text)?;
        cfg.override_seed(std::env::var(SEED_ENV).ok().as_deref())?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.corpus = base.join(&cfg.corpus);
        cfg.output = base.join(&cfg.output);
        let missing = cfg.missing_paths();
        if missing.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(missing))
        }
    }

    /// Replaces the seed when `value` is present.
    pub fn override_seed(&mut self, value: Option<&str>) -> Result<()> {
        let Some(v) = value else { return Ok(()) };
        self.seed = v
            .trim()
            .parse()
            .map_err(|e| Error::Config(vec![format!("{SEED_ENV} = `{v}`: {e}")]))?;
        self.propagate();
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.corpus.join(&self.manifest)
    }

    /// Paths that must exist before a run can start.
    pub fn missing_paths(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !self.corpus.is_dir() {
            v.push(format!("paths.corpus: {} is not a directory", self.corpus.display()));
        }
        let parent = self.output.parent().filter(|p| !p.as_os_str().is_empty());
        if parent.is_some_and(|p| !p.is_dir()) {
            v.push(format!(
                "paths.output: parent of {} does not exist",
                self.output.display()
            ));
        }
        v
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.network.violations();
        v.extend(self.train.violations());
        v.extend(self.gan.violations());
        let r = self.split.ratios;
        if r.iter().any(|x| !(*x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            v.push(format!("split.ratios must be non-negative and sum to 1, got {r:?}"));
        }
        v
    }

    /// Copies the shared seed and precision into the component configs.
    fn propagate(&mut self) {
        self.network.seed = self.seed;
        self.train.seed = self.seed;
        self.gan.seed = self.seed;
        self.train.precision = self.precision;
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(s: &str) -> std::result::Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            s.parse::<T>().map_err(|e| format!("`{s}`: {e}"))
        }
        match key {
            "seed" => self.seed = num(value)?,
            "precision" => self.precision = value.parse()?,
            "paths.corpus" => self.corpus = PathBuf::from(value),
            "paths.manifest" => self.manifest = PathBuf::from(value),
            "paths.output" => self.output = PathBuf::from(value),
            "network.resolution" => self.network.input_resolution = num(value)?,
            "network.width_multiplier" => self.network.width_multiplier = num(value)?,
            "network.head" => self.network.head = value.parse::<Head>()?,
            "train.batch_size" => self.train.batch_size = num(value)?,
            "train.lr" => self.train.lr = num(value)?,
            "train.lr_decay" => self.train.lr_decay = num(value)?,
            "train.epochs" => self.train.epochs = num(value)?,
            "train.adam.beta1" => self.train.adam.beta1 = num(value)?,
            "train.adam.beta2" => self.train.adam.beta2 = num(value)?,
            "train.adam.eps" => self.train.adam.eps = num(value)?,
            "loss.kind" => self.train.loss.kind = value.parse::<LossKind>()?,
            "loss.alpha" => {
                let a = parse_list(value)?;
                // one value stands for every class
                self.train.loss.alpha = if a.len() == 1 { vec![a[0]; 7] } else { a };
            }
            "loss.gamma" => self.train.loss.gamma = num(value)?,
            "loss.reduction" => self.train.loss.reduction = value.parse::<Reduction>()?,
            "gan.resolution" => self.gan.resolution = num(value)?,
            "gan.width" => self.gan.width = num(value)?,
            "gan.lr" => self.gan.lr = num(value)?,
            "gan.batch_size" => self.gan.batch_size = num(value)?,
            "gan.adam.beta1" => self.gan.adam.beta1 = num(value)?,
            "gan.adam.beta2" => self.gan.adam.beta2 = num(value)?,
            "gan.adam.eps" => self.gan.adam.eps = num(value)?,
            "gan.lambda_adv" => self.gan.lambdas.adv = num(value)?,
            "gan.lambda_au" => self.gan.lambdas.au = num(value)?,
            "gan.lambda_att" => self.gan.lambdas.att = num(value)?,
            "gan.lambda_cyc" => self.gan.lambdas.cyc = num(value)?,
            "split.mode" => self.split.mode = value.parse()?,
            "split.ratios" => {
                let r = parse_list(value)?;
                self.split.ratios = r
                    .try_into()
                    .map_err(|r: Vec<f64>| format!("expected 3 ratios, got {}", r.len()))?;
            }
            "annotate.tie_policy" => self.tie_policy = value.parse()?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    /// Text that parses back to this configuration.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let n = &self.network;
        let t = &self.train;
        let g = &self.gan;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("precision", self.precision.to_string());
        kv("paths.corpus", self.corpus.display().to_string());
        kv("paths.manifest", self.manifest.display().to_string());
        kv("paths.output", self.output.display().to_string());
        kv("network.resolution", n.input_resolution.to_string());
        kv("network.width_multiplier", n.width_multiplier.to_string());
        kv("network.head", n.head.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.lr_decay", t.lr_decay.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.adam.beta1", t.adam.beta1.to_string());
        kv("train.adam.beta2", t.adam.beta2.to_string());
        kv("train.adam.eps", t.adam.eps.to_string());
        kv("loss.kind", t.loss.kind.to_string());
        kv("loss.alpha", list(&t.loss.alpha));
        kv("loss.gamma", t.loss.gamma.to_string());
        kv("loss.reduction", t.loss.reduction.to_string());
        kv("gan.resolution", g.resolution.to_string());
        kv("gan.width", g.width.to_string());
        kv("gan.lr", g.lr.to_string());
        kv("gan.batch_size", g.batch_size.to_string());
        kv("gan.adam.beta1", g.adam.beta1.to_string());
        kv("gan.adam.beta2", g.adam.beta2.to_string());
        kv("gan.adam.eps", g.adam.eps.to_string());
        kv("gan.lambda_adv", g.lambdas.adv.to_string());
        kv("gan.lambda_au", g.lambdas.au.to_string());
        kv("gan.lambda_att", g.lambdas.att.to_string());
        kv("gan.lambda_cyc", g.lambdas.cyc.to_string());
        kv("split.mode", self.split.mode.to_string());
        kv("split.ratios", list(&self.split.ratios));
        kv("annotate.tie_policy", self.tie_policy.to_string());
        s
    }

    /// The desk-scale configuration: 32px toy ResNet with the ARM head.
    pub fn toy(seed: u64) -> Self {
        let mut cfg = RunConfig {
            seed,
            network: NetworkConfig::toy(Head::Arm, seed),
            ..Default::default()
        };
        cfg.propagate();
        cfg
    }
}
