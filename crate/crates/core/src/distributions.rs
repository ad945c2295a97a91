//! Emotion distributions, Dirichlet priors and the three training objectives.
//!
//! An utterance's emotion state is a categorical distribution over `K`
//! classes. Annotator labels are one-hot samples from it; their average is
//! the soft label. A Dirichlet prior network predicts concentration
//! parameters `alpha = exp(logits)` whose normalized mean is the predictive
//! distribution, i.e. `softmax(logits)`.
//!
//! Losses come in two flavours: vector-level functions returning the value
//! and its gradient for a single utterance, and graph-level builders used by
//! the trainer on whole sequences.

use crate::error::{Error, Result};
use crate::numerics::autodiff::{softmax, Graph, Var};
use crate::numerics::special::lgamma;
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Default number of emotion classes: four emotions plus "others".
pub const DEFAULT_CLASSES: usize = 5;

pub const CLASS_NAMES: [&str; DEFAULT_CLASSES] = ["neutral", "happy", "sad", "angry", "others"];

const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmotionDistribution(Vec<f64>);

impl EmotionDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Data("emotion distribution has no classes".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(Error::Data(format!("probability {p} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Data(format!("probabilities must sum to 1 within {SIMPLEX_TOL:e}, got {total}")));
        }
        Ok(EmotionDistribution(probs))
    }

    pub fn uniform(k: usize) -> Self {
        EmotionDistribution(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut p = vec![0.0; k];
        p[class] = 1.0;
        EmotionDistribution(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }

    /// Index of the largest probability (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for EmotionDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        EmotionDistribution::new(v)
    }
}

impl From<EmotionDistribution> for Vec<f64> {
    fn from(d: EmotionDistribution) -> Self {
        d.0
    }
}

/// Dirichlet concentration parameters, all strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct DirichletParams {
    alpha: Vec<f64>,
    alpha0: f64,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Data("Dirichlet with no classes".into()));
        }
        if let Some(a) = alpha.iter().find(|a| !a.is_finite() || **a <= 0.0) {
            return Err(Error::Domain(format!("concentration parameters must be positive, got {a}")));
        }
        let alpha0 = alpha.iter().sum();
        Ok(DirichletParams { alpha, alpha0 })
    }

    /// `alpha = exp(logits)`, the network parameterization.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::new(logits.iter().map(|z| z.exp()).collect())
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }
}

/// The class labels given by each annotator to one utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotatorLabelSet(Vec<usize>);

impl AnnotatorLabelSet {
    pub fn new(labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Data("an utterance needs at least one annotator label".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("class index {l} out of range for {classes} classes")));
        }
        Ok(AnnotatorLabelSet(labels))
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes.max(self.0.iter().max().map_or(0, |m| m + 1))];
        for &l in &self.0 {
            c[l] += 1;
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    /// Cross-entropy on majority labels only.
    #[serde(rename = "HARD")]
    Hard,
    /// KL divergence to the soft label.
    #[serde(rename = "SOFT")]
    Soft,
    /// Dirichlet negative log-likelihood plus `lambda` times the soft KL.
    #[serde(rename = "DPN_KL")]
    DpnKl,
    /// Dirichlet negative log-likelihood alone.
    #[serde(rename = "DPN")]
    Dpn,
}

impl LossMode {
    /// Whether the model output is read as Dirichlet concentrations.
    pub fn is_dirichlet(self) -> bool {
        matches!(self, LossMode::DpnKl | LossMode::Dpn)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Hard => "HARD",
            LossMode::Soft => "SOFT",
            LossMode::DpnKl => "DPN_KL",
            LossMode::Dpn => "DPN",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "HARD" => Ok(LossMode::Hard),
            "SOFT" => Ok(LossMode::Soft),
            "DPN_KL" => Ok(LossMode::DpnKl),
            "DPN" => Ok(LossMode::Dpn),
            other => Err(Error::Config(format!("loss.mode: unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Weight of the KL term; only read in `DpnKl` mode.
    pub lambda: f64,
    /// Label smoothing applied to one-hot samples before the Dirichlet density.
    pub smoothing_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { mode: LossMode::DpnKl, lambda: 20.0, smoothing_eps: 0.01 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("loss.lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.smoothing_eps > 0.0 && self.smoothing_eps < 0.5) {
            return Err(Error::Config(format!("loss.smoothing_eps must lie in (0, 0.5), got {}", self.smoothing_eps)));
        }
        Ok(())
    }
}

/// Average of the annotators' one-hot labels.
pub fn soft_label(labels: &AnnotatorLabelSet, classes: usize) -> Result<EmotionDistribution> {
    if let Some(l) = labels.labels().iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("class index {l} out of range for {classes} classes")));
    }
    let m = labels.len() as f64;
    let probs = labels.counts(classes).into_iter().map(|c| c as f64 / m).collect();
    Ok(EmotionDistribution(probs))
}

/// The class chosen by a strict, unique plurality of at least two annotators.
pub fn majority_vote(labels: &AnnotatorLabelSet) -> Option<usize> {
    let counts = labels.counts(0);
    let top = *counts.iter().max()?;
    if top < 2 || counts.iter().filter(|&&c| c == top).count() != 1 {
        return None;
    }
    counts.iter().position(|&c| c == top)
}

/// ln Dir(mu | alpha). Every `mu_k` must be strictly positive.
pub fn dirichlet_log_density(mu: &EmotionDistribution, alpha: &DirichletParams) -> Result<f64> {
    if mu.classes() != alpha.alpha.len() {
        return Err(Error::Usage(format!(
            "distribution has {} classes, Dirichlet has {}",
            mu.classes(),
            alpha.alpha.len()
        )));
    }
    if let Some(p) = mu.probs().iter().find(|&&p| p <= 0.0) {
        return Err(Error::Domain(format!(
            "Dirichlet density needs an interior point, got component {p} (smooth one-hot labels first)"
        )));
    }
    let mut acc = lgamma(alpha.alpha0)?;
    for (&a, &p) in alpha.alpha.iter().zip(mu.probs()) {
        acc += (a - 1.0) * p.ln() - lgamma(a)?;
    }
    Ok(acc)
}

/// Expected categorical distribution under the Dirichlet: `alpha / alpha0`.
pub fn predictive_distribution(alpha: &DirichletParams) -> EmotionDistribution {
    EmotionDistribution(alpha.alpha.iter().map(|a| a / alpha.alpha0).collect())
}

/// `(1 - eps) * onehot(class) + eps / K`.
pub fn smooth_one_hot(class: usize, classes: usize, eps: f64) -> EmotionDistribution {
    let mut p = vec![eps / classes as f64; classes];
    p[class] += 1.0 - eps;
    EmotionDistribution(p)
}

/// A scalar loss and its gradient with respect to the function's first input.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Usage(format!("{what} has {got} classes, expected {want}")));
    }
    Ok(())
}

fn strictly_positive(pred: &EmotionDistribution) -> Result<()> {
    if let Some(p) = pred.probs().iter().find(|&&p| p <= 0.0) {
        return Err(Error::Domain(format!("prediction must be strictly positive, got {p}")));
    }
    Ok(())
}

fn with_graph(inputs: &[f64], build: impl FnOnce(&mut Graph, Var) -> Var) -> Result<LossValue> {
    let mut g = Graph::new();
    let x = g.param(Tensor::row_vector(inputs.to_vec()));
    let root = build(&mut g, x);
    let grads = g.backward(root)?;
    Ok(LossValue {
        value: g.value(root).item(),
        grad: grads.get(x).map_or_else(|| vec![0.0; inputs.len()], |t| t.data().to_vec()),
    })
}

/// Dirichlet negative log-likelihood of the smoothed annotator labels under
/// `alpha = exp(logits)`; gradient is with respect to `logits`.
pub fn loss_dpn(logits: &[f64], labels: &AnnotatorLabelSet, smoothing_eps: f64) -> Result<LossValue> {
    let targets = UtteranceTargets::from_labels(labels, logits.len(), smoothing_eps)?;
    with_graph(logits, |g, z| dpn_term(g, z, &targets.mean_log_smoothed()))
}

/// KL(soft || pred) with 0 ln 0 = 0; gradient is with respect to `pred`.
pub fn loss_kl(pred: &EmotionDistribution, soft: &EmotionDistribution) -> Result<LossValue> {
    check_len("soft label", soft.classes(), pred.classes())?;
    strictly_positive(pred)?;
    let entropy_term = neg_entropy(soft.probs());
    let soft_t = Tensor::row_vector(soft.probs().to_vec());
    with_graph(pred.probs(), |g, p| {
        let logp = g.log(p);
        let s = g.constant(soft_t);
        let cross = g.mul(logp, s);
        let cross = g.sum(cross);
        let neg = g.scale(cross, -1.0);
        g.add_scalar(neg, entropy_term)
    })
}

/// Cross-entropy against the majority class; zero (with zero gradient) when
/// there is none. Gradient is with respect to `pred`.
pub fn loss_hard(pred: &EmotionDistribution, majority: Option<usize>) -> Result<LossValue> {
    strictly_positive(pred)?;
    let Some(k) = majority else {
        return Ok(LossValue { value: 0.0, grad: vec![0.0; pred.classes()] });
    };
    if k >= pred.classes() {
        return Err(Error::Data(format!("majority class {k} out of range")));
    }
    let mask = Tensor::row_vector(EmotionDistribution::one_hot(pred.classes(), k).0);
    with_graph(pred.probs(), |g, p| {
        let logp = g.log(p);
        let m = g.constant(mask);
        let picked = g.mul(logp, m);
        let picked = g.sum(picked);
        g.scale(picked, -1.0)
    })
}

/// `loss_dpn + lambda * loss_kl(softmax(logits), soft)`; gradient is with
/// respect to `logits`.
pub fn loss_combined(
    logits: &[f64],
    labels: &AnnotatorLabelSet,
    soft: &EmotionDistribution,
    config: &LossConfig,
) -> Result<LossValue> {
    if config.mode != LossMode::DpnKl {
        return Err(Error::Usage(format!("loss_combined needs DPN_KL mode, got {}", config.mode)));
    }
    check_len("soft label", soft.classes(), logits.len())?;
    let targets = UtteranceTargets::from_labels(labels, logits.len(), config.smoothing_eps)?;
    let lambda = config.lambda;
    let soft_t = Tensor::row_vector(soft.probs().to_vec());
    let entropy_term = neg_entropy(soft.probs());
    with_graph(logits, |g, z| {
        let dpn = dpn_term(g, z, &targets.mean_log_smoothed());
        let kl = kl_term(g, z, soft_t, entropy_term);
        let kl = g.scale(kl, lambda);
        g.add(dpn, kl)
    })
}

/// Σ p ln p with 0 ln 0 = 0.
pub fn neg_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum()
}

/// Softmax of logits as a distribution.
pub fn softmax_distribution(logits: &[f64]) -> Result<EmotionDistribution> {
    Ok(EmotionDistribution(softmax(logits)?))
}

/// Per-utterance training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceTargets {
    pub soft: Vec<f64>,
    pub majority: Option<usize>,
    /// Per class, the mean over annotators of ln of the smoothed label.
    mean_log: Vec<f64>,
}

impl UtteranceTargets {
    pub fn from_labels(labels: &AnnotatorLabelSet, classes: usize, eps: f64) -> Result<Self> {
        let soft = soft_label(labels, classes)?;
        let hit = (1.0 - eps + eps / classes as f64).ln();
        let miss = (eps / classes as f64).ln();
        let mean_log = soft.probs().iter().map(|s| s * hit + (1.0 - s) * miss).collect();
        Ok(UtteranceTargets { soft: soft.0, majority: majority_vote(labels), mean_log })
    }

    fn mean_log_smoothed(&self) -> Tensor {
        Tensor::row_vector(self.mean_log.clone())
    }
}

/// Σ_rows [-ln Γ(α0) + Σ_k ln Γ(α_k) - Σ_k (α_k - 1) c_k] with α = exp(z).
fn dpn_term(g: &mut Graph, logits: Var, mean_log: &Tensor) -> Var {
    let alpha = g.exp(logits);
    let alpha0 = g.row_sum(alpha);
    let norm = g.lgamma(alpha0);
    let norm = g.sum(norm);
    let parts = g.lgamma(alpha);
    let parts = g.sum(parts);
    let shifted = g.add_scalar(alpha, -1.0);
    let c = g.constant(mean_log.clone());
    let weighted = g.mul(shifted, c);
    let weighted = g.sum(weighted);
    let a = g.sub(parts, norm);
    g.sub(a, weighted)
}

/// Σ_rows [-Σ_k s_k log_softmax(z)_k] + `entropy_const`.
fn kl_term(g: &mut Graph, logits: Var, soft: Tensor, entropy_const: f64) -> Var {
    let logp = g.log_softmax(logits);
    let s = g.constant(soft);
    let cross = g.mul(logp, s);
    let cross = g.sum(cross);
    let neg = g.scale(cross, -1.0);
    g.add_scalar(neg, entropy_const)
}

/// Targets for a whole sequence, stacked row-wise.
#[derive(Clone, Debug)]
pub struct SequenceTargets {
    soft: Tensor,
    mean_log: Tensor,
    majority_mask: Tensor,
    entropy_const: f64,
    majority_count: usize,
}

impl SequenceTargets {
    pub fn new(rows: &[UtteranceTargets]) -> Self {
        let k = rows.first().map_or(0, |r| r.soft.len());
        let soft = Tensor::from_rows(&rows.iter().map(|r| r.soft.clone()).collect::<Vec<_>>());
        let mean_log = Tensor::from_rows(&rows.iter().map(|r| r.mean_log.clone()).collect::<Vec<_>>());
        let mask_rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let mut m = vec![0.0; k];
                if let Some(c) = r.majority {
                    m[c] = 1.0;
                }
                m
            })
            .collect();
        SequenceTargets {
            soft,
            mean_log,
            majority_mask: Tensor::from_rows(&mask_rows),
            entropy_const: rows.iter().map(|r| neg_entropy(&r.soft)).sum(),
            majority_count: rows.iter().filter(|r| r.majority.is_some()).count(),
        }
    }

    pub fn len(&self) -> usize {
        self.soft.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Summed loss over the rows of `logits` and the number of rows that count
/// towards its normalization.
pub fn sequence_loss(g: &mut Graph, logits: Var, targets: &SequenceTargets, config: &LossConfig) -> (Var, usize) {
    match config.mode {
        LossMode::Hard => {
            let logp = g.log_softmax(logits);
            let m = g.constant(targets.majority_mask.clone());
            let picked = g.mul(logp, m);
            let picked = g.sum(picked);
            (g.scale(picked, -1.0), targets.majority_count)
        }
        LossMode::Soft => (kl_term(g, logits, targets.soft.clone(), targets.entropy_const), targets.len()),
        LossMode::Dpn => (dpn_term(g, logits, &targets.mean_log), targets.len()),
        LossMode::DpnKl => {
            let dpn = dpn_term(g, logits, &targets.mean_log);
            let kl = kl_term(g, logits, targets.soft.clone(), targets.entropy_const);
            let kl = g.scale(kl, config.lambda);
            (g.add(dpn, kl), targets.len())
        }
    }
}
