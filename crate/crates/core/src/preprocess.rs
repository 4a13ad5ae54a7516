//! Intensity clipping and inversion of MR volumes so that a CT-trained
//! segmenter sees CT-like contrast.
//!
//! Inversion maps each voxel `x` to `max(X) - x + min(X)` over the
//! volume's own intensity range. The black-background variant first
//! finds the value `t` at percentile `p` of the (clipped) input and
//! forces every voxel with `x <= t` to literal 0, so air around the
//! patient stays black after inversion instead of turning bright.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{percentile, Volume3D};

/// Below this many voxels the sequential path is used.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    None,
    Invert,
    InvertBg,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::None, Mode::Invert, Mode::InvertBg];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Invert => "invert",
            Mode::InvertBg => "invert-bg",
        }
    }

    /// Column heading used in rendered reports.
    pub fn title(self) -> &'static str {
        match self {
            Mode::None => "Unprocessed",
            Mode::Invert => "Inverted",
            Mode::InvertBg => "Inverted (black background)",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Mode::None),
            "invert" => Ok(Mode::Invert),
            "invert-bg" => Ok(Mode::InvertBg),
            other => Err(Error::InvalidSpec(format!(
                "unknown mode {other:?} (expected none, invert or invert-bg)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub mode: Mode,
    pub bg_percentile: f64,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            clip_lo: 0.0,
            clip_hi: 3000.0,
            mode: Mode::InvertBg,
            bg_percentile: 1.0,
        }
    }
}

impl PreprocessSpec {
    pub fn with_mode(self, mode: Mode) -> Self {
        PreprocessSpec { mode, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_lo.is_finite() && self.clip_hi.is_finite()) || self.clip_lo >= self.clip_hi {
            return Err(Error::InvalidSpec(format!(
                "clip range [{}, {}] must satisfy lo < hi",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(0.0..=100.0).contains(&self.bg_percentile) {
            return Err(Error::InvalidSpec(format!(
                "background percentile {} outside [0, 100]",
                self.bg_percentile
            )));
        }
        Ok(())
    }
}

fn map_voxels<F>(v: &Volume3D, f: F) -> Volume3D
where
    F: Fn(f64) -> f64 + Sync + Send,
{
    let data = if v.len() >= PAR_THRESHOLD {
        v.data().par_iter().map(|&x| f(x)).collect()
    } else {
        v.data().iter().map(|&x| f(x)).collect()
    };
    v.derive(data)
}

pub fn clip(v: &Volume3D, lo: f64, hi: f64) -> Result<Volume3D> {
    if lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::InvalidSpec(format!("clip range [{lo}, {hi}] must satisfy lo < hi")));
    }
    Ok(map_voxels(v, |x| x.max(lo).min(hi)))
}

pub fn invert(v: &Volume3D) -> Volume3D {
    let (min, max) = v.min_max();
    map_voxels(v, move |x| reflect(x, min, max))
}

/// `max - x + min`, held inside `[min, max]` against rounding.
#[inline]
fn reflect(x: f64, min: f64, max: f64) -> f64 {
    (max - x + min).clamp(min, max)
}

/// Inversion with every voxel at or below the `p`-th percentile of the
/// input forced to 0.
pub fn invert_black_background(v: &Volume3D, p: f64) -> Result<Volume3D> {
    let threshold = percentile(v, p)?;
    let (min, max) = v.min_max();
    Ok(map_voxels(v, move |x| {
        if x <= threshold {
            0.0
        } else {
            reflect(x, min, max)
        }
    }))
}

/// Clip, then apply the spec's mode. The background gate sees clipped,
/// not-yet-inverted intensities.
pub fn preprocess_case(v: &Volume3D, spec: &PreprocessSpec) -> Result<Volume3D> {
    spec.validate()?;
    let clipped = clip(v, spec.clip_lo, spec.clip_hi)?;
    match spec.mode {
        Mode::None => Ok(clipped),
        Mode::Invert => Ok(invert(&clipped)),
        Mode::InvertBg => invert_black_background(&clipped, spec.bg_percentile),
    }
}
