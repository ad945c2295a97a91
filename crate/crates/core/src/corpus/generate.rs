use super::{Corpus, CorpusHeader, Dialogue, Speaker, Split, Utterance};
use crate::distributions::{AnnotatorLabelSet, EmotionDistribution};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use serde::{Deserialize, Serialize};

pub const DEFAULT_SEED: u64 = 20221;

/// Probability that the same speaker talks twice in a row.
const SPEAKER_REPEAT: f64 = 0.1;

/// Synthetic conversation generator settings. Counts are signed so that a
/// negative value in a config file is reported by field name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub classes: i64,
    pub annotators: i64,
    pub train_dialogues: i64,
    pub dev_dialogues: i64,
    pub test_dialogues: i64,
    pub min_len: i64,
    pub max_len: i64,
    pub p_stay: f64,
    /// Dirichlet weight on the hidden state.
    pub sharpness: f64,
    /// Dirichlet weight added to every class.
    pub floor: f64,
    pub feature_dim: i64,
    pub sigma_audio: f64,
    pub sigma_text: f64,
    /// Supplied by the caller; not part of the serialized form.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            classes: 5,
            annotators: 3,
            train_dialogues: 400,
            dev_dialogues: 0,
            test_dialogues: 100,
            min_len: 8,
            max_len: 40,
            p_stay: 0.7,
            sharpness: 6.0,
            floor: 1.4,
            feature_dim: 32,
            sigma_audio: 0.6,
            sigma_text: 0.4,
            seed: DEFAULT_SEED,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        for (name, v, min) in [
            ("generator.classes", self.classes, 2),
            ("generator.annotators", self.annotators, 1),
            ("generator.train_dialogues", self.train_dialogues, 0),
            ("generator.dev_dialogues", self.dev_dialogues, 0),
            ("generator.test_dialogues", self.test_dialogues, 0),
            ("generator.min_len", self.min_len, 1),
            ("generator.feature_dim", self.feature_dim, 1),
        ] {
            if v < min {
                return err(format!("{name} must be at least {min}, got {v}"));
            }
        }
        if self.max_len < self.min_len {
            return err(format!("generator.max_len ({}) is below generator.min_len ({})", self.max_len, self.min_len));
        }
        if !(0.0..=1.0).contains(&self.p_stay) {
            return err(format!("generator.p_stay must lie in [0, 1], got {}", self.p_stay));
        }
        for (name, v) in [
            ("generator.sharpness", self.sharpness),
            ("generator.floor", self.floor),
            ("generator.sigma_audio", self.sigma_audio),
            ("generator.sigma_text", self.sigma_text),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn total_dialogues(&self) -> usize {
        (self.train_dialogues + self.dev_dialogues + self.test_dialogues) as usize
    }

    fn split_of(&self, index: usize) -> Split {
        let i = index as i64;
        if i < self.train_dialogues {
            Split::Train
        } else if i < self.train_dialogues + self.dev_dialogues {
            Split::Dev
        } else {
            Split::Test
        }
    }
}

/// Class-anchor matrices, `Q x K` each, stored row-major.
struct Anchors {
    audio: Vec<f64>,
    text: Vec<f64>,
}

fn anchors(root: &RngStream, q: usize, k: usize) -> Anchors {
    let draw = |label| {
        let mut rng = root.derive(label, 0);
        (0..q * k).map(|_| rng.normal()).collect()
    };
    Anchors { audio: draw("anchor-audio"), text: draw("anchor-text") }
}

fn project(w: &[f64], mu: &[f64], sigma: f64, rng: &mut RngStream) -> Vec<f64> {
    let k = mu.len();
    w.chunks(k).map(|row| row.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>() + sigma * rng.normal()).collect()
}

fn sample_dirichlet(alpha: &[f64], rng: &mut RngStream) -> Vec<f64> {
    let draws: Vec<f64> = alpha.iter().map(|&a| rng.gamma(a).max(f64::MIN_POSITIVE)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|d| d / total).collect()
}

fn dialogue(cfg: &GeneratorConfig, anchors: &Anchors, root: &RngStream, index: usize) -> Result<Dialogue> {
    let k = cfg.classes as usize;
    let mut rng = root.derive("dialogue", index as u64);
    let len = rng.range_inclusive(cfg.min_len as usize, cfg.max_len as usize);
    let id = format!("dlg{index:05}");
    let mut state = rng.below(k);
    let mut speaker = Speaker::A;
    let mut utterances = Vec::with_capacity(len);
    for n in 0..len {
        if n > 0 {
            if rng.uniform() >= cfg.p_stay {
                let other = rng.below(k - 1);
                state = if other >= state { other + 1 } else { other };
            }
            if rng.uniform() >= SPEAKER_REPEAT {
                speaker = speaker.other();
            }
        }
        let alpha: Vec<f64> = (0..k).map(|c| cfg.floor + if c == state { cfg.sharpness } else { 0.0 }).collect();
        let mu = sample_dirichlet(&alpha, &mut rng);
        let labels: Vec<usize> = (0..cfg.annotators).map(|_| rng.categorical(&mu)).collect();
        let audio = project(&anchors.audio, &mu, cfg.sigma_audio, &mut rng);
        let text = project(&anchors.text, &mu, cfg.sigma_text, &mut rng);
        utterances.push(Utterance::new(
            format!("{id}_u{n:03}"),
            speaker,
            audio,
            text,
            AnnotatorLabelSet::new(labels, k)?,
            k,
            Some(EmotionDistribution::new(mu)?),
        )?);
    }
    Ok(Dialogue { id, split: cfg.split_of(index), utterances, extra: Default::default() })
}

/// Generates a corpus; identical for identical configs.
pub fn generate(cfg: &GeneratorConfig) -> Result<Corpus> {
    generate_parallel(cfg, 1)
}

/// As [`generate`], spreading dialogues over `workers` threads. Each
/// dialogue owns a derived random stream, so the output does not depend on
/// the worker count.
pub fn generate_parallel(cfg: &GeneratorConfig, workers: usize) -> Result<Corpus> {
    cfg.validate()?;
    let (q, k) = (cfg.feature_dim as usize, cfg.classes as usize);
    let root = RngStream::new(cfg.seed);
    let anchors = anchors(&root, q, k);
    let total = cfg.total_dialogues();
    let workers = workers.clamp(1, total.max(1));
    let dialogues = if workers == 1 {
        (0..total).map(|i| dialogue(cfg, &anchors, &root, i)).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = total.div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let (anchors, root) = (&anchors, &root);
                    s.spawn(move || {
                        (w * chunk..((w + 1) * chunk).min(total))
                            .map(|i| dialogue(cfg, anchors, root, i))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("generator worker panicked")).collect::<Result<Vec<_>>>()
        })?
        .into_iter()
        .flatten()
        .collect()
    };
    Ok(Corpus { header: CorpusHeader::new(k, q, cfg.annotators as usize), dialogues })
}
