//! Classification losses over softmax probabilities.
//!
//! Both losses select `p_t`, the probability assigned to the true class,
//! clamp it to at least [`PROB_FLOOR`] and reduce over the batch.
//!
//! * cross-entropy: `-ln p_t`
//! * focal: `-α_t (1 - p_t)^γ ln p_t`

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, UnaryKind, Var};

pub const PROB_FLOOR: f64 = 1e-12;
pub const CLASS_COUNT: usize = 7;
pub const DEFAULT_ALPHA: f64 = 0.25;
pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Focal,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Focal => "focal",
        })
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ce" | "cross-entropy" => Ok(LossKind::CrossEntropy),
            "focal" => Ok(LossKind::Focal),
            other => Err(format!("unknown loss `{other}` (expected ce or focal)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        })
    }
}

impl FromStr for Reduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(format!("unknown reduction `{other}` (expected mean or sum)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Per-class weight `α_t`; only used by the focal loss.
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::focal()
    }
}

impl LossConfig {
    pub fn focal() -> Self {
        LossConfig {
            kind: LossKind::Focal,
            alpha: vec![DEFAULT_ALPHA; CLASS_COUNT],
            gamma: DEFAULT_GAMMA,
            reduction: Reduction::Mean,
        }
    }

    pub fn cross_entropy() -> Self {
        LossConfig {
            kind: LossKind::CrossEntropy,
            ..LossConfig::focal()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            v.push(format!("loss.gamma must be a finite value >= 0, got {}", self.gamma));
        }
        if self.alpha.len() != CLASS_COUNT {
            v.push(format!(
                "loss.alpha must list {CLASS_COUNT} class weights, got {}",
                self.alpha.len()
            ));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            v.push(format!("loss.alpha entries must be positive, got {a}"));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

fn check_labels(g: &Graph, probs: Var, labels: &[usize]) -> Result<()> {
    let s = g.shape(probs);
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::shape(
            "loss",
            format!("probabilities {s:?} with {} labels", labels.len()),
        ));
    }
    match labels.iter().find(|&&l| l >= s[1]) {
        Some(&bad) => Err(Error::LabelOutOfRange(bad)),
        None => Ok(()),
    }
}

/// Clamped true-class probabilities, shape `[N]`.
fn true_class_probs(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    check_labels(g, probs, labels)?;
    let pt = g.select_columns(probs, labels)?;
    g.unary(UnaryKind::ClampMin(PROB_FLOOR), pt)
}

fn reduce(g: &mut Graph, per_sample: Var, reduction: Reduction) -> Result<Var> {
    match reduction {
        Reduction::Mean => g.mean(per_sample),
        Reduction::Sum => g.sum(per_sample),
    }
}

/// Mean of `-ln p_t` over the batch.
pub fn cross_entropy(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    cross_entropy_reduced(g, probs, labels, Reduction::Mean)
}

pub fn cross_entropy_reduced(
    g: &mut Graph,
    probs: Var,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    let pt = true_class_probs(g, probs, labels)?;
    let log = g.log(pt)?;
    let neg = g.mul_scalar(log, -1.0)?;
    reduce(g, neg, reduction)
}

/// `-α_t (1 - p_t)^γ ln p_t`, reduced over the batch.
pub fn focal_loss(g: &mut Graph, probs: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let pt = true_class_probs(g, probs, labels)?;
    let alpha = labels.iter().map(|&l| cfg.alpha[l]).collect();
    let alpha = g.constant(Tensor::new([labels.len()], alpha)?);
    let log = g.log(pt)?;
    let one_minus = g.rsub_scalar(1.0, pt)?;
    let modulator = g.pow_scalar(one_minus, cfg.gamma)?;
    let weighted = g.mul(modulator, log)?;
    let weighted = g.mul(weighted, alpha)?;
    let neg = g.mul_scalar(weighted, -1.0)?;
    reduce(g, neg, cfg.reduction)
}

/// Dispatches on `cfg.kind`.
pub fn loss(g: &mut Graph, probs: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    match cfg.kind {
        LossKind::CrossEntropy => cross_entropy_reduced(g, probs, labels, cfg.reduction),
        LossKind::Focal => focal_loss(g, probs, labels, cfg),
    }
}

/// Softmax over logits followed by [`loss`].
pub fn loss_from_logits(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let probs = g.softmax(logits)?;
    loss(g, probs, labels, cfg)
}
