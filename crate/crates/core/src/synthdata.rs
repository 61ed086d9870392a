//! Synthetic factor dataset: every sample is a frame sequence built from a
//! constant speaker factor, a sinusoidal emotion trajectory, token content
//! embeddings and Gaussian noise, with the ground truth kept alongside.
//!
//! Channel layout for `D` features:
//! - channels 0 and 1 carry the emotion trajectory (inside the low band kept
//!   by band limiting);
//! - the speaker factor is mixed by orthonormal columns supported on
//!   channels `max(2, ⌈D/8⌉)..D`, the channels timbre perturbation scales;
//! - content embeddings live in the orthogonal complement of both.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::reference::speaker_channels;
use crate::numerics::{derive_seed, Matrix};
use crate::tensor_io::{read_tensor, write_tensor};

/// Frames per unit of trajectory frequency: `frequency` cycles every this
/// many frames, independent of sequence length.
pub const FREQUENCY_FRAMES: f64 = 32.0;

const FREQUENCY_RANGE: (f64, f64) = (0.5, 3.0);
const AMPLITUDE_RANGE: (f64, f64) = (0.3, 1.5);
const OFFSET_RANGE: (f64, f64) = (-1.0, 1.0);
const CONTENT_SCALE: f64 = 0.5;
const CORPUS_OFFSET: f64 = 0.5;
const MIN_RELATIVE_GAP: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_speakers: usize,
    /// Emotion 0 is neutral.
    pub n_emotions: usize,
    pub samples_per_cell: usize,
    pub feature_dim: usize,
    pub speaker_factor_dim: usize,
    /// Inclusive `[T_min, T_max]`.
    pub seq_len: [usize; 2],
    pub noise_std: f64,
    /// Speakers whose emotional samples are held out of training.
    pub neutral_only_speakers: Vec<usize>,
    /// Adds a fixed channel offset for odd-numbered speakers' corpus.
    pub corpus_bias: bool,
    pub n_tokens: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_speakers: 10,
            n_emotions: 5,
            samples_per_cell: 20,
            feature_dim: 16,
            speaker_factor_dim: 4,
            seq_len: [24, 48],
            noise_std: 0.1,
            neutral_only_speakers: vec![8, 9],
            corpus_bias: false,
            n_tokens: 12,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidSpec(msg));
        if self.n_speakers == 0 {
            return fail("n_speakers must be positive".into());
        }
        if self.n_emotions < 2 {
            return fail(format!("n_emotions must be at least 2, got {}", self.n_emotions));
        }
        if self.samples_per_cell == 0 {
            return fail("samples_per_cell must be positive".into());
        }
        let [t_min, t_max] = self.seq_len;
        if t_min < 8 || t_max < t_min {
            return fail(format!("seq_len must satisfy 8 <= T_min <= T_max, got {:?}", self.seq_len));
        }
        if self.speaker_factor_dim == 0 {
            return fail("speaker_factor_dim must be positive".into());
        }
        let support = self.speaker_support().len();
        if self.feature_dim < 8 || self.speaker_factor_dim >= support {
            return fail(format!(
                "feature_dim {} leaves {} speaker channels; need feature_dim >= 8 and more than speaker_factor_dim {}",
                self.feature_dim, support, self.speaker_factor_dim
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return fail(format!("noise_std must be finite and non-negative, got {}", self.noise_std));
        }
        if self.n_tokens == 0 {
            return fail("n_tokens must be positive".into());
        }
        let mut seen = BTreeSet::new();
        for &s in &self.neutral_only_speakers {
            if s >= self.n_speakers {
                return fail(format!("neutral-only speaker {s} is not a speaker id"));
            }
            if !seen.insert(s) {
                return fail(format!("neutral-only speaker {s} listed twice"));
            }
        }
        Ok(())
    }

    fn speaker_support(&self) -> std::ops::Range<usize> {
        let r = speaker_channels(self.feature_dim);
        r.start.max(2)..r.end
    }

    pub fn is_held_out(&self, speaker: usize, emotion: usize) -> bool {
        emotion != 0 && self.neutral_only_speakers.contains(&speaker)
    }

    pub fn total_samples(&self) -> usize {
        self.n_speakers * self.n_emotions * self.samples_per_cell
    }
}

/// Trajectory parameters of one emotion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmotionParams {
    pub frequency: f64,
    pub amplitude: f64,
    pub offset: f64,
}

impl EmotionParams {
    pub fn to_array(self) -> [f64; 3] {
        [self.frequency, self.amplitude, self.offset]
    }

    /// True when some parameter differs by at least 20% of the larger magnitude.
    pub fn distinct_from(&self, other: &EmotionParams) -> bool {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .any(|(a, b)| (a - b).abs() >= MIN_RELATIVE_GAP * a.abs().max(b.abs()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorSample {
    pub id: usize,
    /// T×D, values representable in f32 so on-disk copies are exact.
    pub features: Matrix,
    pub speaker_id: usize,
    pub emotion_id: usize,
    pub content_tokens: Vec<usize>,
    pub speaker_factor: Vec<f64>,
    pub emotion_params: EmotionParams,
    pub corpus_id: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    EvalHeldout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<FactorSample>,
    /// Indices into `samples`.
    pub train: Vec<usize>,
    pub eval_heldout: Vec<usize>,
    pub speaker_factors: Vec<Vec<f64>>,
    pub emotion_table: Vec<EmotionParams>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::EvalHeldout => &self.eval_heldout,
        }
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &FactorSample> {
        self.train.iter().map(|&i| &self.samples[i])
    }

    pub fn heldout_samples(&self) -> impl Iterator<Item = &FactorSample> {
        self.eval_heldout.iter().map(|&i| &self.samples[i])
    }
}

fn draw_emotion_table(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<EmotionParams>> {
    let mut table: Vec<EmotionParams> = Vec::with_capacity(n);
    let mut attempts = 0;
    while table.len() < n {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidSpec(format!("cannot draw {n} mutually distinct emotions")));
        }
        let candidate = EmotionParams {
            frequency: rng.random_range(FREQUENCY_RANGE.0..FREQUENCY_RANGE.1),
            amplitude: rng.random_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1),
            offset: rng.random_range(OFFSET_RANGE.0..OFFSET_RANGE.1),
        };
        if table.iter().all(|p| p.distinct_from(&candidate)) {
            table.push(candidate);
        }
    }
    Ok(table)
}

/// Orthonormal columns on `support`: the first `k` mix the speaker factor,
/// the rest span the content subspace.
fn mixing_bases(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (Matrix, Matrix) {
    let d = spec.feature_dim;
    let support = spec.speaker_support();
    let m = support.len();
    let g = nalgebra::DMatrix::<f64>::from_fn(m, m, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    let k = spec.speaker_factor_dim;
    let place = |cols: std::ops::Range<usize>| {
        Matrix::from_fn(d, cols.len(), |i, j| {
            if support.contains(&i) {
                q[(i - support.start, cols.start + j)]
            } else {
                0.0
            }
        })
    };
    (place(0..k), place(k..m))
}

fn content_tokens(t: usize, n_tokens: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut tokens = Vec::with_capacity(t);
    while tokens.len() < t {
        let token = rng.random_range(0..n_tokens);
        let run = rng.random_range(2..=5usize);
        tokens.extend(std::iter::repeat_n(token, run.min(t - tokens.len())));
    }
    tokens
}

/// Deterministic given `spec.seed`; samples are ordered speaker-major, then
/// emotion, then replicate.
pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0x5EED]));
    let emotion_table = draw_emotion_table(spec.n_emotions, &mut rng)?;
    let (speaker_basis, content_basis) = mixing_bases(spec, &mut rng);
    let speaker_factors: Vec<Vec<f64>> = (0..spec.n_speakers)
        .map(|_| (0..spec.speaker_factor_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let speaker_vectors: Vec<Vec<f64>> = speaker_factors
        .iter()
        .map(|f| (0..d).map(|i| (0..f.len()).map(|j| speaker_basis.get(i, j) * f[j]).sum()).collect())
        .collect();
    let token_vectors: Vec<Vec<f64>> = (0..spec.n_tokens)
        .map(|_| {
            let c: Vec<f64> = (0..content_basis.cols())
                .map(|_| CONTENT_SCALE * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (0..d).map(|i| (0..c.len()).map(|j| content_basis.get(i, j) * c[j]).sum()).collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.total_samples());
    let (mut train, mut eval_heldout) = (Vec::new(), Vec::new());
    for speaker in 0..spec.n_speakers {
        for emotion in 0..spec.n_emotions {
            for _ in 0..spec.samples_per_cell {
                let id = samples.len();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1, id as u64]));
                let t = rng.random_range(spec.seq_len[0]..=spec.seq_len[1]);
                let params = emotion_table[emotion];
                let phase = rng.random_range(0.0..TAU);
                let tokens = content_tokens(t, spec.n_tokens, &mut rng);
                let corpus_id = spec.corpus_bias.then_some(speaker % 2);
                let features = Matrix::from_fn(t, d, |frame, ch| {
                    let theta = TAU * params.frequency * frame as f64 / FREQUENCY_FRAMES + phase;
                    let emotion_part = match ch {
                        0 => params.offset + params.amplitude * theta.sin(),
                        1 => params.amplitude * theta.cos(),
                        _ => 0.0,
                    };
                    let bias = if corpus_id == Some(1) && ch == d - 1 { CORPUS_OFFSET } else { 0.0 };
                    let noise = spec.noise_std * rng.sample::<f64, _>(StandardNormal);
                    let v = speaker_vectors[speaker][ch] + emotion_part + token_vectors[tokens[frame]][ch] + bias + noise;
                    v as f32 as f64
                });
                if spec.is_held_out(speaker, emotion) {
                    eval_heldout.push(id);
                } else {
                    train.push(id);
                }
                samples.push(FactorSample {
                    id,
                    features,
                    speaker_id: speaker,
                    emotion_id: emotion,
                    content_tokens: tokens,
                    speaker_factor: speaker_factors[speaker].clone(),
                    emotion_params: params,
                    corpus_id,
                });
            }
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
        train,
        eval_heldout,
        speaker_factors,
        emotion_table,
    })
}

/// Indices of one shuffled epoch cut into batches; the last may be short.
pub fn epoch_batches<R: Rng + ?Sized>(indices: &[usize], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub struct Batch<'a> {
    pub epoch: usize,
    pub indices: Vec<usize>,
    pub samples: Vec<&'a FactorSample>,
}

/// Endless stream of training batches, reshuffled every epoch.
pub struct BatchIter<'a, R> {
    dataset: &'a Dataset,
    batch_size: usize,
    rng: R,
    pending: std::vec::IntoIter<Vec<usize>>,
    epoch: usize,
}

pub fn batch_iter<R: Rng>(dataset: &Dataset, batch_size: usize, rng: R) -> Result<BatchIter<'_, R>> {
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 || batch_size > dataset.train.len() {
        return Err(Error::InvalidSpec(format!(
            "batch_size {batch_size} must be in 1..={}",
            dataset.train.len()
        )));
    }
    Ok(BatchIter {
        dataset,
        batch_size,
        rng,
        pending: Vec::new().into_iter(),
        epoch: 0,
    })
}

impl<'a, R: Rng> Iterator for BatchIter<'a, R> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        let indices = match self.pending.next() {
            Some(b) => b,
            None => {
                self.pending = epoch_batches(&self.dataset.train, self.batch_size, &mut self.rng).into_iter();
                self.epoch += 1;
                self.pending.next().expect("non-empty epoch")
            }
        };
        Some(Batch {
            epoch: self.epoch - 1,
            samples: indices.iter().map(|&i| &self.dataset.samples[i]).collect(),
            indices,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    id: usize,
    file: String,
    split: Split,
    frames: usize,
    speaker_id: usize,
    emotion_id: usize,
    content_tokens: Vec<usize>,
    speaker_factor: Vec<f64>,
    emotion_params: EmotionParams,
    corpus_id: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    spec: DatasetSpec,
    speaker_factors: Vec<Vec<f64>>,
    emotion_table: Vec<EmotionParams>,
    train: Vec<usize>,
    eval_heldout: Vec<usize>,
    samples: Vec<SampleEntry>,
}

const MANIFEST_FORMAT: &str = "dkit-dataset";

/// Writes `manifest.json` and one tensor file per sample under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("samples"))?;
    let held: BTreeSet<usize> = dataset.eval_heldout.iter().copied().collect();
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let file = format!("samples/{:06}.dkt", s.id);
        write_tensor(&dir.join(&file), &s.features)?;
        entries.push(SampleEntry {
            id: s.id,
            file,
            split: if held.contains(&s.id) { Split::EvalHeldout } else { Split::Train },
            frames: s.features.rows(),
            speaker_id: s.speaker_id,
            emotion_id: s.emotion_id,
            content_tokens: s.content_tokens.clone(),
            speaker_factor: s.speaker_factor.clone(),
            emotion_params: s.emotion_params,
            corpus_id: s.corpus_id,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        spec: dataset.spec.clone(),
        speaker_factors: dataset.speaker_factors.clone(),
        emotion_table: dataset.emotion_table.clone(),
        train: dataset.train.clone(),
        eval_heldout: dataset.eval_heldout.clone(),
        samples: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest.json: {e}")))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported manifest {} v{} (expected {MANIFEST_FORMAT} v1)",
            manifest.format, manifest.version
        )));
    }
    manifest.spec.validate().map_err(|e| Error::Format(format!("manifest spec: {e}")))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (k, e) in manifest.samples.into_iter().enumerate() {
        if e.id != k {
            return Err(Error::Format(format!("sample {k} has id {}", e.id)));
        }
        let features = read_tensor(&dir.join(&e.file))?;
        if features.shape() != (e.frames, manifest.spec.feature_dim) {
            return Err(Error::Format(format!(
                "{}: shape {:?}, manifest says ({}, {})",
                e.file,
                features.shape(),
                e.frames,
                manifest.spec.feature_dim
            )));
        }
        samples.push(FactorSample {
            id: e.id,
            features,
            speaker_id: e.speaker_id,
            emotion_id: e.emotion_id,
            content_tokens: e.content_tokens,
            speaker_factor: e.speaker_factor,
            emotion_params: e.emotion_params,
            corpus_id: e.corpus_id,
        });
    }
    let n = samples.len();
    if manifest.train.iter().chain(&manifest.eval_heldout).any(|&i| i >= n) {
        return Err(Error::Format("split index out of range".into()));
    }
    Ok(Dataset {
        spec: manifest.spec,
        samples,
        train: manifest.train,
        eval_heldout: manifest.eval_heldout,
        speaker_factors: manifest.speaker_factors,
        emotion_table: manifest.emotion_table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ridge_fit;
    use proptest::prelude::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_speakers: 2,
            n_emotions: 2,
            samples_per_cell: 3,
            neutral_only_speakers: vec![],
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn counts_without_exclusions() {
        let ds = make_dataset(&small_spec()).unwrap();
        assert_eq!(ds.train.len(), 12);
        assert!(ds.eval_heldout.is_empty());
    }

    #[test]
    fn default_exclusions() {
        let spec = DatasetSpec::default();
        let ds = make_dataset(&spec).unwrap();
        let excluded = 2 * (spec.n_emotions - 1) * spec.samples_per_cell;
        assert_eq!(ds.samples.len(), 1000);
        assert_eq!(ds.train.len(), 1000 - excluded);
        assert_eq!(ds.eval_heldout.len(), excluded);
        for s in ds.train_samples() {
            assert!(!(spec.neutral_only_speakers.contains(&s.speaker_id) && s.emotion_id != 0));
        }
        let train_cells: BTreeSet<_> = ds.train_samples().map(|s| (s.speaker_id, s.emotion_id)).collect();
        for s in ds.heldout_samples() {
            assert!(spec.neutral_only_speakers.contains(&s.speaker_id) && s.emotion_id != 0);
            assert!(!train_cells.contains(&(s.speaker_id, s.emotion_id)));
        }
        for (i, a) in ds.emotion_table.iter().enumerate() {
            for b in &ds.emotion_table[i + 1..] {
                assert!(a.distinct_from(b));
            }
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let spec = DatasetSpec { samples_per_cell: 2, ..DatasetSpec::default() };
        assert_eq!(make_dataset(&spec).unwrap(), make_dataset(&spec).unwrap());
        let other = DatasetSpec { seed: 1, ..spec.clone() };
        assert_ne!(make_dataset(&spec).unwrap().samples, make_dataset(&other).unwrap().samples);
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            DatasetSpec { n_emotions: 1, ..DatasetSpec::default() },
            DatasetSpec { seq_len: [4, 10], ..DatasetSpec::default() },
            DatasetSpec { seq_len: [30, 20], ..DatasetSpec::default() },
            DatasetSpec { neutral_only_speakers: vec![10], ..DatasetSpec::default() },
            DatasetSpec { neutral_only_speakers: vec![1, 1], ..DatasetSpec::default() },
            DatasetSpec { noise_std: f64::NAN, ..DatasetSpec::default() },
            DatasetSpec { feature_dim: 4, ..DatasetSpec::default() },
            DatasetSpec { speaker_factor_dim: 14, ..DatasetSpec::default() },
        ];
        for spec in bad {
            assert!(matches!(make_dataset(&spec), Err(Error::InvalidSpec(_))), "{spec:?}");
        }
    }

    #[test]
    fn features_follow_the_generative_model() {
        let spec = DatasetSpec { noise_std: 0.0, samples_per_cell: 1, ..DatasetSpec::default() };
        let ds = make_dataset(&spec).unwrap();
        for s in &ds.samples {
            assert!(s.features.rows() >= 24 && s.features.rows() <= 48);
            assert_eq!(s.content_tokens.len(), s.features.rows());
            // Channel 0 and 1 trace a circle of radius `amplitude` around (offset, 0).
            let p = s.emotion_params;
            for t in 0..s.features.rows() {
                let r = (s.features.get(t, 0) - p.offset).hypot(s.features.get(t, 1));
                assert!((r - p.amplitude).abs() < 1e-5);
            }
            assert!(s.features.data().iter().all(|v| (*v as f32) as f64 == *v));
        }
    }

    #[test]
    fn ridge_recovers_speaker_factor() {
        let ds = make_dataset(&DatasetSpec::default()).unwrap();
        let (fit, test): (Vec<_>, Vec<_>) = ds.samples.iter().partition(|s| s.id % 5 != 0);
        let design = |v: &[&FactorSample]| {
            let x = Matrix::from_rows(&v.iter().map(|s| s.features.mean_rows()).collect::<Vec<_>>()).unwrap();
            let y = Matrix::from_rows(&v.iter().map(|s| s.speaker_factor.clone()).collect::<Vec<_>>()).unwrap();
            (x, y)
        };
        let (x, y) = design(&fit);
        let (w, b) = ridge_fit(&x, &y, 1e-3).unwrap();
        let (xt, yt) = design(&test);
        let pred = xt.matmul(&w);
        let ym = yt.mean_rows();
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for i in 0..yt.rows() {
            for j in 0..yt.cols() {
                ss_res += (pred.get(i, j) + b[j] - yt.get(i, j)).powi(2);
                ss_tot += (yt.get(i, j) - ym[j]).powi(2);
            }
        }
        let r2 = 1.0 - ss_res / ss_tot;
        assert!(r2 > 0.9, "R² = {r2}");
    }

    #[test]
    fn corpus_bias_marks_odd_speakers() {
        let spec = DatasetSpec { corpus_bias: true, samples_per_cell: 1, ..DatasetSpec::default() };
        let ds = make_dataset(&spec).unwrap();
        assert!(ds.samples.iter().all(|s| s.corpus_id == Some(s.speaker_id % 2)));
    }

    #[test]
    fn batches_cover_each_epoch() {
        let ds = make_dataset(&small_spec()).unwrap();
        let full: Vec<_> = batch_iter(&ds, 12, ChaCha8Rng::seed_from_u64(1)).unwrap().take(1).collect();
        let mut ids = full[0].indices.clone();
        ids.sort();
        assert_eq!(ids, ds.train);

        let epoch: Vec<_> = batch_iter(&ds, 5, ChaCha8Rng::seed_from_u64(2)).unwrap().take(3).collect();
        assert_eq!(epoch.iter().map(|b| b.indices.len()).collect::<Vec<_>>(), vec![5, 5, 2]);
        let mut union: Vec<usize> = epoch.iter().flat_map(|b| b.indices.clone()).collect();
        union.sort();
        assert_eq!(union, ds.train);
        assert!(epoch.iter().all(|b| b.epoch == 0));

        let run = |seed| -> Vec<Vec<usize>> {
            batch_iter(&ds, 5, ChaCha8Rng::seed_from_u64(seed)).unwrap().take(6).map(|b| b.indices).collect()
        };
        assert_eq!(run(3), run(3));
        let two: Vec<_> = batch_iter(&ds, 5, ChaCha8Rng::seed_from_u64(3)).unwrap().take(6).collect();
        assert_eq!(two[5].epoch, 1);
        assert!(two[0].samples.iter().zip(&two[0].indices).all(|(s, i)| s.id == *i));
    }

    #[test]
    fn batch_errors() {
        let ds = make_dataset(&small_spec()).unwrap();
        assert!(batch_iter(&ds, 13, ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(batch_iter(&ds, 0, ChaCha8Rng::seed_from_u64(0)).is_err());
        let spec = DatasetSpec {
            n_speakers: 1,
            n_emotions: 2,
            samples_per_cell: 1,
            neutral_only_speakers: vec![0],
            ..DatasetSpec::default()
        };
        let mut ds = make_dataset(&spec).unwrap();
        ds.train.clear();
        assert!(matches!(batch_iter(&ds, 1, ChaCha8Rng::seed_from_u64(0)), Err(Error::EmptyDataset)));
    }

    #[test]
    fn disk_round_trip() {
        let spec = DatasetSpec { samples_per_cell: 2, corpus_bias: true, ..DatasetSpec::default() };
        let ds = make_dataset(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);

        let first = dir.path().join("samples/000000.dkt");
        let bytes = fs::read(&first).unwrap();
        fs::write(&first, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn heldout_cells_never_train(
            n_speakers in 1usize..6,
            n_emotions in 2usize..5,
            per_cell in 1usize..4,
            mask in 0u8..32,
            seed in 0u64..1000,
        ) {
            let neutral_only: Vec<usize> = (0..n_speakers).filter(|s| mask & (1 << s) != 0).collect();
            let spec = DatasetSpec {
                n_speakers, n_emotions, samples_per_cell: per_cell,
                neutral_only_speakers: neutral_only.clone(), seq_len: [8, 12], seed,
                ..DatasetSpec::default()
            };
            let ds = make_dataset(&spec).unwrap();
            let expected_held = neutral_only.len() * (n_emotions - 1) * per_cell;
            prop_assert_eq!(ds.eval_heldout.len(), expected_held);
            prop_assert_eq!(ds.train.len() + expected_held, n_speakers * n_emotions * per_cell);
            for s in ds.train_samples() {
                prop_assert!(!spec.is_held_out(s.speaker_id, s.emotion_id));
            }
        }
    }
}
