//! Mini-batch training with Adam, warm-up/decay learning rate, sub-sequence
//! augmentation and scheduled sampling.

use crate::corpus::{subsequence_sample, Corpus, Dialogue, Split};
use crate::distributions::{
    sequence_loss, softmax_distribution, LossConfig, LossMode, SequenceTargets, UtteranceTargets,
};
use crate::error::{Error, Result};
use crate::model::{BoundModel, Dropout, ModelConfig, ModelParams, TeacherForcingSchedule};
use crate::numerics::{Graph, RngStream, Tensor};
use serde::{Deserialize, Serialize};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub epochs: usize,
    /// Training sequences per mini-batch.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_updates: usize,
    /// Update at which the learning rate reaches zero; 0 means the last one.
    pub final_update: usize,
    /// Random fragments drawn from each training dialogue per epoch, in
    /// addition to the full dialogue.
    pub fragments_per_dialogue: usize,
    pub schedule: TeacherForcingSchedule,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            epochs: 8,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_updates: 100,
            final_update: 0,
            fragments_per_dialogue: 1,
            schedule: TeacherForcingSchedule::Exponential { k: 0.999 },
            clip_norm: 5.0,
        }
    }
}

impl OptimConfig {
    /// 2,000 warm-up updates and a smaller peak rate for the full-size model.
    pub fn full_size() -> Self {
        OptimConfig {
            peak_lr: 1e-4,
            warmup_updates: 2000,
            schedule: TeacherForcingSchedule::Exponential { k: 0.9995 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("optim.epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be positive".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("optim.peak_lr must be positive, got {}", self.peak_lr)));
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config(format!("optim.clip_norm must be non-negative, got {}", self.clip_norm)));
        }
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()
    }
}

/// Learning rate for 1-based update `u`: linear ramp to `peak` over
/// `warmup` updates, then linear decay reaching zero at `last`.
pub fn learning_rate(u: usize, peak: f64, warmup: usize, last: usize) -> f64 {
    if u <= warmup {
        return peak * u as f64 / warmup.max(1) as f64;
    }
    if u >= last {
        return 0.0;
    }
    peak * (last - u) as f64 / (last - warmup) as f64
}

pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Adam { m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, &g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Updates completed by the end of the epoch.
    pub updates: usize,
    /// Mean loss per counted utterance over the epoch.
    pub loss: f64,
    /// Teacher-forcing ratio of the epoch's last mini-batch.
    pub tf_ratio: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

/// Writes the loss log as CSV with columns `epoch,updates,loss,tf_ratio`.
pub fn loss_log_csv(log: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,updates,loss,tf_ratio\n");
    for r in log {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.updates, r.loss, r.tf_ratio));
    }
    s
}

struct Sample {
    audio: Tensor,
    text: Tensor,
    targets: SequenceTargets,
    /// Oracle history rows `t_1..t_N` (the last one is never fed back).
    oracle: Vec<Vec<f64>>,
}

fn prepare(d: &Dialogue, classes: usize, loss: &LossConfig) -> Result<Sample> {
    let rows = d
        .utterances
        .iter()
        .map(|u| UtteranceTargets::from_labels(&u.labels, classes, loss.smoothing_eps))
        .collect::<Result<Vec<_>>>()?;
    let oracle = d
        .utterances
        .iter()
        .map(|u| match (loss.mode, u.majority) {
            (LossMode::Hard, Some(c)) => {
                let mut v = vec![0.0; classes];
                v[c] = 1.0;
                v
            }
            _ => u.soft_label.probs().to_vec(),
        })
        .collect();
    Ok(Sample { audio: d.audio_matrix(), text: d.text_matrix(), targets: SequenceTargets::new(&rows), oracle })
}

/// Decoder history under scheduled sampling: for each step a coin decides
/// between the oracle target and the model's own previous prediction. The
/// predictions come from a gradient-free teacher-forced pass, so one
/// parallel decoder pass suffices.
fn sampled_history(params: &ModelParams, s: &Sample, eps: f64, rng: &mut RngStream) -> Result<Tensor> {
    let n = s.audio.rows();
    let k = params.config().classes;
    let use_truth: Vec<bool> = (1..n).map(|_| rng.uniform() <= eps).collect();
    let mut rows: Vec<Vec<f64>> = s.oracle[..n - 1].to_vec();
    if use_truth.iter().all(|&t| t) {
        return Ok(Tensor::new(vec![n - 1, k], rows.concat()));
    }
    let mut g = Graph::new();
    let model = BoundModel::bind(params, &mut g, false);
    let oracle = Tensor::new(vec![n - 1, k], rows.concat());
    let logits = model.forward(&mut g, &s.audio, &s.text, &oracle, &mut None)?;
    for (i, truth) in use_truth.iter().enumerate() {
        if !truth {
            rows[i] = softmax_distribution(g.value(logits).row(i))?.probs().to_vec();
        }
    }
    Ok(Tensor::new(vec![n - 1, k], rows.concat()))
}

/// Trains on the `train` split of `corpus`.
pub fn train(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mc = &config.model;
    if corpus.header.feature_dim != mc.feature_dim {
        return Err(Error::Config(format!(
            "corpus feature_dim is {} but model.feature_dim is {}",
            corpus.header.feature_dim, mc.feature_dim
        )));
    }
    if corpus.header.classes != mc.classes {
        return Err(Error::Config(format!(
            "corpus has {} classes but model.classes is {}",
            corpus.header.classes, mc.classes
        )));
    }
    let dialogues: Vec<&Dialogue> = corpus.split(Split::Train).collect();
    if dialogues.is_empty() {
        return Err(Error::Data("corpus has no training dialogues".into()));
    }
    let oc = &config.optim;
    let root = RngStream::new(config.seed);
    let mut params = ModelParams::init(mc, &mut root.derive("init", 0))?;
    let mut adam = Adam::new(&params);
    let per_epoch = dialogues.len() * (1 + oc.fragments_per_dialogue);
    let batches_per_epoch = per_epoch.div_ceil(oc.batch_size);
    let total = batches_per_epoch * oc.epochs;
    let last = if oc.final_update == 0 { total } else { oc.final_update };
    let mut log = Vec::with_capacity(oc.epochs);
    let mut update = 0usize;
    for epoch in 1..=oc.epochs {
        let mut aug = root.derive("augment", epoch as u64);
        let mut order: Vec<Dialogue> = Vec::with_capacity(per_epoch);
        for d in &dialogues {
            order.push((*d).clone());
            for _ in 0..oc.fragments_per_dialogue {
                order.push(subsequence_sample(d, &mut aug));
            }
        }
        let mut shuffle = root.derive("shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle.below(i + 1));
        }
        let (mut epoch_loss, mut epoch_count, mut tf_ratio) = (0.0, 0usize, 1.0);
        for batch in order.chunks(oc.batch_size) {
            let eps = crate::model::teacher_forcing_ratio(update, &oc.schedule)?;
            tf_ratio = eps;
            update += 1;
            let mut sampling = root.derive("sampling", update as u64);
            let mut drop_rng = root.derive("dropout", update as u64);
            let mut g = Graph::new();
            let model = BoundModel::bind(&params, &mut g, true);
            let mut parts = Vec::with_capacity(batch.len());
            let mut count = 0usize;
            for d in batch {
                let s = prepare(d, mc.classes, &config.loss)?;
                let history = sampled_history(&params, &s, eps, &mut sampling)?;
                let mut drop = Some(Dropout { rate: mc.dropout, rng: &mut drop_rng });
                let logits = model.forward(&mut g, &s.audio, &s.text, &history, &mut drop)?;
                let (l, c) = sequence_loss(&mut g, logits, &s.targets, &config.loss);
                parts.push(l);
                count += c;
            }
            let total_loss = parts.iter().skip(1).fold(parts[0], |acc, &p| g.add(acc, p));
            let batch_sum = g.value(total_loss).item();
            if !batch_sum.is_finite() {
                return Err(Error::Diverged { update, loss: batch_sum });
            }
            epoch_loss += batch_sum;
            epoch_count += count;
            if count == 0 {
                // Nothing to learn from: Adam sees zero gradients.
                let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
                adam.step(&mut params, &zeros, 0.0);
                continue;
            }
            let root_var = g.scale(total_loss, 1.0 / count as f64);
            let mut grads = g.backward(root_var)?;
            let mut flat: Vec<Tensor> = model
                .vars()
                .iter()
                .zip(params.tensors())
                .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
                .collect();
            if oc.clip_norm > 0.0 {
                let norm = flat.iter().map(|t| t.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
                if norm > oc.clip_norm {
                    flat.iter_mut().for_each(|t| t.scale_assign(oc.clip_norm / norm));
                }
            }
            adam.step(&mut params, &flat, learning_rate(update, oc.peak_lr, oc.warmup_updates, last));
            if !params.is_finite() {
                return Err(Error::Diverged { update, loss: batch_sum });
            }
        }
        let loss = if epoch_count == 0 { 0.0 } else { epoch_loss / epoch_count as f64 };
        log.push(EpochRecord { epoch, updates: update, loss, tf_ratio });
    }
    Ok(TrainOutcome { params, log })
}
