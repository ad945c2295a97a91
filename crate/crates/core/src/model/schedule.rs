use crate::distributions::EmotionDistribution;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use serde::{Deserialize, Serialize};

/// Sinusoidal position embedding; entry `2i` is `sin(pos / 10000^(2i/dim))`
/// and entry `2i + 1` the matching cosine.
pub fn positional_encoding(position: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let pair = (j / 2 * 2) as f64;
            let angle = position as f64 / 10000f64.powf(pair / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Decay of the teacher-forcing ratio over mini-batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherForcingSchedule {
    /// `k^i`
    Exponential { k: f64 },
    /// `max(0, a - b i)`
    Linear { a: f64, b: f64 },
    /// `c / (c + exp(i / c))`
    InverseSigmoid { c: f64 },
}

impl Default for TeacherForcingSchedule {
    fn default() -> Self {
        TeacherForcingSchedule::Exponential { k: 0.999 }
    }
}

impl TeacherForcingSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TeacherForcingSchedule::Exponential { k } if !(k > 0.0 && k <= 1.0) => {
                Err(Error::Config(format!("train.schedule.k must lie in (0, 1], got {k}")))
            }
            TeacherForcingSchedule::Linear { a, b } if !(a.is_finite() && a >= 0.0 && b.is_finite() && b >= 0.0) => {
                Err(Error::Config(format!("train.schedule linear constants must be non-negative, got a={a}, b={b}")))
            }
            TeacherForcingSchedule::InverseSigmoid { c } if !(c.is_finite() && c > 0.0) => {
                Err(Error::Config(format!("train.schedule.c must be positive, got {c}")))
            }
            _ => Ok(()),
        }
    }
}

/// Teacher-forcing ratio for mini-batch `batch` (0-based), clamped to [0, 1].
pub fn teacher_forcing_ratio(batch: usize, schedule: &TeacherForcingSchedule) -> Result<f64> {
    schedule.validate()?;
    let i = batch as f64;
    let r = match *schedule {
        TeacherForcingSchedule::Exponential { k } => k.powf(i),
        TeacherForcingSchedule::Linear { a, b } => (a - b * i).max(0.0),
        TeacherForcingSchedule::InverseSigmoid { c } => c / (c + (i / c).exp()),
    };
    Ok(r.clamp(0.0, 1.0))
}

/// Picks the decoder input for one step: the ground truth when a uniform
/// draw is `<= eps`, otherwise the model's own (detached) prediction.
pub fn scheduled_input<'a>(
    ground_truth: &'a EmotionDistribution,
    prediction: &'a EmotionDistribution,
    eps: f64,
    rng: &mut RngStream,
) -> &'a EmotionDistribution {
    if use_ground_truth(eps, rng) {
        ground_truth
    } else {
        prediction
    }
}

pub(crate) fn use_ground_truth(eps: f64, rng: &mut RngStream) -> bool {
    rng.uniform() <= eps
}
