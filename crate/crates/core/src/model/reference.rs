//! Reference preparation: random windowing and the optional input transforms
//! applied before a reference reaches an encoder.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceTransform {
    #[default]
    None,
    BandLimit,
    TimbrePerturb,
    Both,
}

impl ReferenceTransform {
    pub const ALL: [ReferenceTransform; 4] = [
        ReferenceTransform::None,
        ReferenceTransform::BandLimit,
        ReferenceTransform::TimbrePerturb,
        ReferenceTransform::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReferenceTransform::None => "none",
            ReferenceTransform::BandLimit => "band_limit",
            ReferenceTransform::TimbrePerturb => "timbre_perturb",
            ReferenceTransform::Both => "both",
        }
    }

    fn band_limits(self) -> bool {
        matches!(self, ReferenceTransform::BandLimit | ReferenceTransform::Both)
    }

    fn perturbs(self) -> bool {
        matches!(self, ReferenceTransform::TimbrePerturb | ReferenceTransform::Both)
    }

    /// Width of a `dim`-wide reference after this transform.
    pub fn output_dim(self, dim: usize) -> usize {
        if self.band_limits() {
            prosody_band(dim)
        } else {
            dim
        }
    }
}

/// The low band kept by band limiting: the first ⌈D/4⌉ channels.
pub fn prosody_band(dim: usize) -> usize {
    dim.div_ceil(4)
}

/// Channels carrying the speaker factor in generated data.
pub fn speaker_channels(dim: usize) -> Range<usize> {
    dim.div_ceil(8)..dim
}

/// Draws a window of length uniform in `[⌈T/2⌉, T]` at a uniform offset.
pub fn slice_reference<R: Rng + ?Sized>(features: &Matrix, rng: &mut R) -> Result<Matrix> {
    let t = features.rows();
    if t == 0 {
        return Err(Error::EmptyInput);
    }
    let len = rng.random_range(t.div_ceil(2)..=t);
    let start = rng.random_range(0..=t - len);
    Ok(features.slice_rows(start, start + len))
}

pub fn transform_reference<R: Rng + ?Sized>(
    features: &Matrix,
    mode: ReferenceTransform,
    rng: &mut R,
) -> Result<Matrix> {
    let d = features.cols();
    if d < 4 {
        return Err(Error::shape("at least 4 feature channels", d));
    }
    let mut out = features.clone();
    if mode.perturbs() {
        // Log-uniform over [0.8, 1.25], symmetric around 1.
        let gain = rng.random_range(0.8f64.ln()..=1.25f64.ln()).exp();
        let channels = speaker_channels(d);
        for i in 0..out.rows() {
            out.row_mut(i)[channels.clone()].iter_mut().for_each(|v| *v *= gain);
        }
    }
    if mode.band_limits() {
        out = out.slice_cols(0, prosody_band(d));
    }
    Ok(out)
}
