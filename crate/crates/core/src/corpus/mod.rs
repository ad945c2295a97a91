//! Dialogues, utterances and the corpus file format.

mod generate;
mod io;

pub use generate::{generate, generate_parallel, GeneratorConfig, DEFAULT_SEED};
pub use io::{load_corpus, parse_corpus, save_corpus, write_atomic, write_corpus, CORPUS_FORMAT, CORPUS_VERSION};

use crate::distributions::{majority_vote, soft_label, AnnotatorLabelSet, EmotionDistribution, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::fmt;

/// Fields this version does not know about, kept verbatim.
pub type Extra = BTreeMap<String, Value>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Speaker {
    A,
    B,
}

impl Speaker {
    pub fn other(self) -> Speaker {
        match self {
            Speaker::A => Speaker::B,
            Speaker::B => Speaker::A,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub speaker: Speaker,
    pub audio: Vec<f64>,
    pub text: Vec<f64>,
    pub labels: AnnotatorLabelSet,
    pub soft_label: EmotionDistribution,
    pub majority: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_distribution: Option<EmotionDistribution>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl Utterance {
    /// Builds an utterance with derived soft and majority labels.
    pub fn new(
        id: String,
        speaker: Speaker,
        audio: Vec<f64>,
        text: Vec<f64>,
        labels: AnnotatorLabelSet,
        classes: usize,
        true_distribution: Option<EmotionDistribution>,
    ) -> Result<Self> {
        let soft = soft_label(&labels, classes)?;
        let majority = majority_vote(&labels);
        Ok(Utterance {
            id,
            speaker,
            audio,
            text,
            labels,
            soft_label: soft,
            majority,
            true_distribution,
            extra: Extra::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub split: Split,
    pub utterances: Vec<Utterance>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn audio_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.utterances.iter().map(|u| u.audio.as_slice()).collect::<Vec<_>>())
    }

    pub fn text_matrix(&self) -> Tensor {
        Tensor::from_rows(&self.utterances.iter().map(|u| u.text.as_slice()).collect::<Vec<_>>())
    }

    /// Contiguous fragment of utterances `start..=end` (0-based).
    pub fn fragment(&self, start: usize, end: usize) -> Dialogue {
        Dialogue {
            id: format!("{}[{}:{}]", self.id, start + 1, end + 1),
            split: self.split,
            utterances: self.utterances[start..=end].to_vec(),
            extra: self.extra.clone(),
        }
    }
}

/// Header record pinning the class count and feature width of a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub classes: usize,
    pub feature_dim: usize,
    pub annotators: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl CorpusHeader {
    pub fn new(classes: usize, feature_dim: usize, annotators: usize) -> Self {
        let class_names = if classes == CLASS_NAMES.len() {
            CLASS_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            (0..classes).map(|k| format!("class{k}")).collect()
        };
        CorpusHeader {
            format: CORPUS_FORMAT.to_string(),
            version: CORPUS_VERSION,
            classes,
            feature_dim,
            annotators,
            class_names,
            extra: Extra::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub dialogues: Vec<Dialogue>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Dialogue> {
        self.dialogues.iter().filter(move |d| d.split == split)
    }

    pub fn utterance_count(&self) -> usize {
        self.dialogues.iter().map(Dialogue::len).sum()
    }

    /// Fraction of utterances without a majority label.
    pub fn no_majority_fraction(&self) -> f64 {
        let n = self.utterance_count();
        if n == 0 {
            return 0.0;
        }
        let none = self.dialogues.iter().flat_map(|d| &d.utterances).filter(|u| u.majority.is_none()).count();
        none as f64 / n as f64
    }

    /// Checks every cross-field invariant. `line_of(i)` maps a dialogue index
    /// to the file line it came from, for error messages.
    pub fn validate_with_lines(&self, line_of: impl Fn(usize) -> usize) -> Result<()> {
        let h = &self.header;
        let header_err = |m: String| Error::Schema { line: 1, message: m };
        if h.format != CORPUS_FORMAT {
            return Err(header_err(format!("format is {:?}, expected {CORPUS_FORMAT:?}", h.format)));
        }
        if h.version != CORPUS_VERSION {
            return Err(header_err(format!("unsupported corpus version {}", h.version)));
        }
        if h.classes < 2 || h.feature_dim == 0 || h.annotators == 0 {
            return Err(header_err("classes must be >= 2 and feature_dim, annotators positive".into()));
        }
        for (i, d) in self.dialogues.iter().enumerate() {
            let line = line_of(i);
            let err = |m: String| Error::Schema { line, message: format!("dialogue {}: {m}", d.id) };
            if d.utterances.is_empty() {
                return Err(err("dialogue has no utterances".into()));
            }
            let mut seen = std::collections::HashSet::new();
            for u in &d.utterances {
                let uerr = |m: String| err(format!("utterance {}: {m}", u.id));
                if !seen.insert(u.id.as_str()) {
                    return Err(uerr("duplicate utterance id".into()));
                }
                for (name, f) in [("audio", &u.audio), ("text", &u.text)] {
                    if f.len() != h.feature_dim {
                        return Err(uerr(format!(
                            "{name} has {} values, header feature_dim is {}",
                            f.len(),
                            h.feature_dim
                        )));
                    }
                }
                if u.labels.len() != h.annotators {
                    return Err(uerr(format!(
                        "labels has {} entries, header annotators is {}",
                        u.labels.len(),
                        h.annotators
                    )));
                }
                let soft = soft_label(&u.labels, h.classes).map_err(|e| uerr(e.to_string()))?;
                if u.soft_label.classes() != h.classes
                    || soft.probs().iter().zip(u.soft_label.probs()).any(|(a, b)| (a - b).abs() > 1e-12)
                {
                    return Err(uerr("soft_label does not match the annotator labels".into()));
                }
                if u.majority != majority_vote(&u.labels) {
                    return Err(uerr("majority does not match the annotator labels".into()));
                }
                if let Some(t) = &u.true_distribution {
                    if t.classes() != h.classes {
                        return Err(uerr(format!("true_distribution has {} classes", t.classes())));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with_lines(|i| i + 2)
    }
}

/// Draws a contiguous fragment with `1 <= s <= e <= N`, uniform over all
/// such pairs.
pub fn subsequence_sample(dialogue: &Dialogue, rng: &mut RngStream) -> Dialogue {
    let n = dialogue.len();
    assert!(n >= 1, "cannot sample from an empty dialogue");
    let mut idx = rng.below(n * (n + 1) / 2);
    // Pairs enumerated by start: start s (0-based) has n - s possible ends.
    let mut start = 0;
    while idx >= n - start {
        idx -= n - start;
        start += 1;
    }
    dialogue.fragment(start, start + idx)
}
