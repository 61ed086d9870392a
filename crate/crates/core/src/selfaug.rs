//! Self-augmentation: speaker-permuted conversions of the current batch,
//! mixed back into it at a fixed proportion.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Encoder, ModelState};
use crate::numerics::Matrix;
use crate::synthdata::FactorSample;

/// Where converted samples enter the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugMode {
    /// As reconstruction targets.
    #[serde(rename = "GT", alias = "gt")]
    Gt,
    /// As emotion-encoder references only.
    #[default]
    #[serde(rename = "ENC", alias = "enc")]
    Enc,
    #[serde(rename = "BOTH", alias = "both")]
    Both,
}

impl AugMode {
    pub const ALL: [AugMode; 3] = [AugMode::Gt, AugMode::Enc, AugMode::Both];

    pub fn name(self) -> &'static str {
        match self {
            AugMode::Gt => "GT",
            AugMode::Enc => "ENC",
            AugMode::Both => "BOTH",
        }
    }

    fn replaces_targets(self) -> bool {
        matches!(self, AugMode::Gt | AugMode::Both)
    }

    fn replaces_references(self) -> bool {
        matches!(self, AugMode::Enc | AugMode::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub mode: AugMode,
    pub proportion: f64,
    pub seed: u64,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig { mode: AugMode::Enc, proportion: 0.25, seed: 0 }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.proportion) {
            return Err(Error::InvalidProportion(self.proportion));
        }
        Ok(())
    }
}

/// Number of replaced items for a batch of `batch` at proportion `rho`.
pub fn masked_count(rho: f64, batch: usize) -> usize {
    (rho * batch as f64).floor() as usize
}

/// A training batch, possibly carrying converted items.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub ground_truth_targets: Vec<Matrix>,
    pub emotion_reference_inputs: Vec<Matrix>,
    pub speaker_reference_inputs: Vec<Matrix>,
    pub content_tokens: Vec<Vec<usize>>,
    pub emotion_labels: Vec<usize>,
    /// Speaker of each target (and of its speaker reference).
    pub speaker_labels: Vec<usize>,
    /// Speaker whose voice each emotion reference carries.
    pub emotion_reference_speakers: Vec<usize>,
    pub synthetic_mask: Vec<bool>,
}

impl MixedBatch {
    /// Ground-truth batch: every reference is the target itself.
    pub fn from_samples(samples: &[&FactorSample]) -> Self {
        let features: Vec<Matrix> = samples.iter().map(|s| s.features.clone()).collect();
        let speakers: Vec<usize> = samples.iter().map(|s| s.speaker_id).collect();
        MixedBatch {
            ground_truth_targets: features.clone(),
            emotion_reference_inputs: features.clone(),
            speaker_reference_inputs: features,
            content_tokens: samples.iter().map(|s| s.content_tokens.clone()).collect(),
            emotion_labels: samples.iter().map(|s| s.emotion_id).collect(),
            speaker_labels: speakers.clone(),
            emotion_reference_speakers: speakers,
            synthetic_mask: vec![false; samples.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.ground_truth_targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ground_truth_targets.is_empty()
    }

    pub fn masked(&self) -> usize {
        self.synthetic_mask.iter().filter(|m| **m).count()
    }
}

/// Item `i` takes its target speaker from batch member `assignment[i]`.
pub fn permute_speakers<R: Rng + ?Sized>(batch_size: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..batch_size).collect();
    p.shuffle(rng);
    p
}

/// Converted batch items. Values only: nothing here is differentiated.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBatch {
    pub features: Vec<Matrix>,
    /// The speaker reference each conversion was conditioned on.
    pub speaker_references: Vec<Matrix>,
    pub speaker_labels: Vec<usize>,
    pub emotion_labels: Vec<usize>,
}

/// Converts each target to its assigned speaker while keeping its own
/// emotion embedding.
pub fn generate_synthetic<R: Rng + ?Sized>(
    state: &ModelState,
    batch: &MixedBatch,
    assignment: &[usize],
    rng: &mut R,
) -> Result<SyntheticBatch> {
    let n = batch.len();
    if assignment.len() != n {
        return Err(Error::shape(n, assignment.len()));
    }
    let g: Vec<Vec<f64>> = batch
        .speaker_reference_inputs
        .iter()
        .map(|r| state.reference_encode(Encoder::Speaker, r))
        .collect::<Result<_>>()?;
    let mut out = SyntheticBatch {
        features: Vec::with_capacity(n),
        speaker_references: Vec::with_capacity(n),
        speaker_labels: Vec::with_capacity(n),
        emotion_labels: batch.emotion_labels.clone(),
    };
    for (i, &a) in assignment.iter().enumerate() {
        if a >= n {
            return Err(Error::shape(n, a));
        }
        let e = state.reference_encode(Encoder::Emotion, &batch.emotion_reference_inputs[i])?;
        out.features.push(state.voice_convert(&batch.ground_truth_targets[i], &g[i], &e, &g[a], &e, rng)?);
        out.speaker_references.push(batch.speaker_reference_inputs[a].clone());
        out.speaker_labels.push(batch.speaker_labels[a]);
    }
    Ok(out)
}

/// Replaces `⌊ρ·B⌋` uniformly chosen items.
///
/// ENC swaps the emotion reference for the conversion. GT swaps the target
/// for the conversion, and with it the speaker label and speaker reference,
/// so the target's conditioning names the voice it now carries. BOTH does
/// both. Emotion labels never change.
pub fn mix_batch<R: Rng + ?Sized>(
    batch: &MixedBatch,
    synthetic: &SyntheticBatch,
    config: &AugConfig,
    rng: &mut R,
) -> Result<MixedBatch> {
    config.validate()?;
    let n = batch.len();
    if synthetic.features.len() != n {
        return Err(Error::shape(n, synthetic.features.len()));
    }
    let mut out = batch.clone();
    let k = masked_count(config.proportion, n);
    for i in index::sample(rng, n, k) {
        out.synthetic_mask[i] = true;
        if config.mode.replaces_references() {
            out.emotion_reference_inputs[i] = synthetic.features[i].clone();
            out.emotion_reference_speakers[i] = synthetic.speaker_labels[i];
        }
        if config.mode.replaces_targets() {
            out.ground_truth_targets[i] = synthetic.features[i].clone();
            out.speaker_reference_inputs[i] = synthetic.speaker_references[i].clone();
            out.speaker_labels[i] = synthetic.speaker_labels[i];
        }
    }
    Ok(out)
}
