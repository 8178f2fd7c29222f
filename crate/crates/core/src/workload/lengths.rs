use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};

use crate::math;

/// Distribution of a token count.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LengthDist {
    Fixed {
        tokens: u32,
    },
    /// Log-normal with the given mean and coefficient of variation, rounded
    /// and clamped to `[min, max]`.
    LogNormal {
        mean: f64,
        cv: f64,
        min: u32,
        max: u32,
    },
}

impl LengthDist {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match *self {
            LengthDist::Fixed { tokens } => tokens,
            LengthDist::LogNormal { mean, cv, min, max } => {
                let sigma2 = math::ln(1.0 + cv * cv);
                let mu = math::ln(mean) - sigma2 / 2.0;
                let d = LogNormal::new(mu, math::sqrt(sigma2)).expect("validated parameters");
                let x = math::round(d.sample(rng));
                (x.clamp(min as f64, max as f64)) as u32
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            LengthDist::Fixed { tokens } => tokens as f64,
            LengthDist::LogNormal { mean, .. } => mean,
        }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        match *self {
            LengthDist::Fixed { tokens: 0 } => Err("fixed length must be positive"),
            LengthDist::Fixed { .. } => Ok(()),
            LengthDist::LogNormal { mean, cv, min, max } => {
                if !(mean > 0.0 && mean.is_finite()) {
                    Err("mean must be positive")
                } else if !(cv > 0.0 && cv.is_finite()) {
                    Err("cv must be positive")
                } else if min == 0 || min > max {
                    Err("need 1 <= min <= max")
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Prompt and output lengths of one dataset.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LengthProfile {
    pub dataset: String,
    pub prompt: LengthDist,
    pub output: LengthDist,
}

impl LengthProfile {
    pub fn log_normal(
        dataset: &str,
        prompt_mean: f64,
        output_mean: f64,
        cv: f64,
        max: u32,
    ) -> Self {
        LengthProfile {
            dataset: dataset.into(),
            prompt: LengthDist::LogNormal {
                mean: prompt_mean,
                cv,
                min: 1,
                max,
            },
            output: LengthDist::LogNormal {
                mean: output_mean,
                cv,
                min: 1,
                max,
            },
        }
    }
}

/// `(prompt_tokens, output_tokens)` for one request.
pub fn sample_lengths<R: Rng + ?Sized>(profile: &LengthProfile, rng: &mut R) -> (u32, u32) {
    (profile.prompt.sample(rng), profile.output.sample(rng))
}

/// Chat, math, instruction and code datasets. Mean prompt+output footprints
/// differ by about 25x between the smallest and largest.
pub fn default_profiles() -> Vec<LengthProfile> {
    alloc::vec![
        LengthProfile::log_normal("alpaca", 16.0, 24.0, 0.5, 1024),
        LengthProfile::log_normal("gsm8k", 64.0, 128.0, 0.5, 1024),
        LengthProfile::log_normal("humaneval", 160.0, 192.0, 0.5, 1024),
        LengthProfile::log_normal("sharegpt", 512.0, 512.0, 0.5, 1024),
    ]
}
