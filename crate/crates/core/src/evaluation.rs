//! The evaluation suite run by `eval`, sweeps and periodic training logs.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{
    best_match, centroid_prototypes, embed_samples, eval_emotion_reference, linear_cka, lk_cka, probe_accuracy,
    Embeddings, FactorReadout, PrototypeSet,
};
use crate::model::{Encoder, ModelState, ReferenceTransform};
use crate::numerics::{cosine_similarity, derive_seed, Matrix};
use crate::synthdata::{Dataset, FactorSample};

/// Ground-truth factor readouts and their prototypes, fitted once per dataset.
#[derive(Clone, Debug)]
pub struct Oracle {
    pub speaker: FactorReadout,
    pub emotion: FactorReadout,
    /// Mean speaker readout of each speaker's training samples.
    pub speaker_prototypes: PrototypeSet,
    /// Readout-space target of each emotion, indexed by emotion id.
    pub emotion_targets: Vec<Vec<f64>>,
}

impl Oracle {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let train: Vec<&FactorSample> = dataset.train_samples().collect();
        let speaker = FactorReadout::fit_speaker(&train)?;
        let emotion = FactorReadout::fit_emotion(&train, &dataset.emotion_table)?;
        let readouts: Vec<Vec<f64>> = train.iter().map(|s| speaker.predict(&s.features)).collect::<Result<_>>()?;
        let labels: Vec<usize> = train.iter().map(|s| s.speaker_id).collect();
        let speaker_prototypes = centroid_prototypes(&Matrix::from_rows(&readouts)?, &labels)?;
        let emotion_targets = dataset.emotion_table.iter().map(|p| emotion.emotion_target(p)).collect();
        Ok(Oracle { speaker, emotion, speaker_prototypes, emotion_targets })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub transform: ReferenceTransform,
    pub seed: u64,
    /// Linear probes are the slowest part; periodic training logs skip them.
    pub probes: bool,
}

/// Cross-speaker conversion scores over the held-out cells.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ConversionStats {
    pub count: usize,
    pub secs: f64,
    pub eecs: f64,
    /// Fraction whose speaker readout is closer to the target than the source.
    pub speaker_match_rate: f64,
    /// Fraction whose emotion readout best matches the source emotion.
    pub emotion_match_rate: f64,
    pub heldout_recon_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub cka_g_e: f64,
    pub lk_cka_speaker: f64,
    pub lk_cka_emotion: f64,
    pub probes: Option<[f64; 3]>,
    pub conversion: ConversionStats,
}

impl EvalSummary {
    /// Named metric values in report order.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let c = &self.conversion;
        let mut out = vec![
            ("cka_g_e", self.cka_g_e),
            ("lk_cka_speaker", self.lk_cka_speaker),
            ("lk_cka_emotion", self.lk_cka_emotion),
        ];
        if let Some(p) = self.probes {
            out.push(("probe_speaker_acc", p[0]));
            out.push(("probe_emotion_acc", p[1]));
            out.push(("probe_leak_speaker_from_emotion", p[2]));
        }
        out.extend([
            ("secs", c.secs),
            ("eecs", c.eecs),
            ("speaker_match_rate", c.speaker_match_rate),
            ("emotion_match_rate", c.emotion_match_rate),
            ("heldout_recon_mse", c.heldout_recon_mse),
        ]);
        out
    }
}

/// Every metric name `evaluate` can emit, probes included.
pub const METRIC_NAMES: [&str; 11] = [
    "cka_g_e",
    "lk_cka_speaker",
    "lk_cka_emotion",
    "probe_speaker_acc",
    "probe_emotion_acc",
    "probe_leak_speaker_from_emotion",
    "secs",
    "eecs",
    "speaker_match_rate",
    "emotion_match_rate",
    "heldout_recon_mse",
];

pub fn evaluate(state: &ModelState, dataset: &Dataset, oracle: &Oracle, opts: EvalOptions) -> Result<EvalSummary> {
    let train: Vec<&FactorSample> = dataset.train_samples().collect();
    let emb = embed_samples(state, &train, opts.transform, opts.seed)?;
    let probes = if opts.probes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0x9B]));
        Some([
            probe_accuracy(&emb.speaker, &emb.speaker_labels, &mut rng)?,
            probe_accuracy(&emb.emotion, &emb.emotion_labels, &mut rng)?,
            probe_accuracy(&emb.emotion, &emb.speaker_labels, &mut rng)?,
        ])
    } else {
        None
    };
    Ok(EvalSummary {
        cka_g_e: linear_cka(&emb.speaker, &emb.emotion)?,
        lk_cka_speaker: lk_cka(&emb.speaker, &emb.speaker_labels)?,
        lk_cka_emotion: lk_cka(&emb.emotion, &emb.emotion_labels)?,
        probes,
        conversion: conversion_eval(state, dataset, &train, &emb, oracle, opts)?,
    })
}

/// For each held-out sample (speaker `t`, emotion `k`), converts a training
/// sample of emotion `k` from another speaker, conditioned on the speaker
/// centroid of `t` and the emotion centroid of `k`. Held-out samples are
/// also reconstructed with their own embeddings.
pub fn conversion_eval(
    state: &ModelState,
    dataset: &Dataset,
    train: &[&FactorSample],
    emb: &Embeddings,
    oracle: &Oracle,
    opts: EvalOptions,
) -> Result<ConversionStats> {
    let heldout: Vec<&FactorSample> = dataset.heldout_samples().collect();
    if heldout.is_empty() {
        return Ok(ConversionStats::default());
    }
    let spk_centroids = centroid_prototypes(&emb.speaker, &emb.speaker_labels)?;
    let emo_centroids = centroid_prototypes(&emb.emotion, &emb.emotion_labels)?;
    let mut by_emotion: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, s) in train.iter().enumerate() {
        by_emotion.entry(s.emotion_id).or_default().push(row);
    }
    let missing = |what: &str, id: usize| Error::DegenerateInput(format!("no training samples for {what} {id}"));

    let mut stats = ConversionStats { count: heldout.len(), ..ConversionStats::default() };
    let mut frames = 0usize;
    for h in &heldout {
        let (t, k) = (h.speaker_id, h.emotion_id);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &[0xC0, h.id as u64]));
        let pool: Vec<usize> = by_emotion
            .get(&k)
            .ok_or_else(|| missing("emotion", k))?
            .iter()
            .copied()
            .filter(|&r| train[r].speaker_id != t)
            .collect();
        let &row = pool.choose(&mut rng).ok_or_else(|| missing("emotion", k))?;
        let src = train[row];
        let g_tgt = spk_centroids.get(t).ok_or_else(|| missing("speaker", t))?;
        let e_tgt = emo_centroids.get(k).ok_or_else(|| missing("emotion", k))?;
        let out = state.voice_convert(&src.features, emb.speaker.row(row), emb.emotion.row(row), g_tgt, e_tgt, &mut rng)?;

        let spk = oracle.speaker.predict(&out)?;
        let to_target = cosine_similarity(&spk, oracle.speaker_prototypes.get(t).ok_or_else(|| missing("speaker", t))?)?;
        let to_source = cosine_similarity(
            &spk,
            oracle.speaker_prototypes.get(src.speaker_id).ok_or_else(|| missing("speaker", src.speaker_id))?,
        )?;
        stats.secs += to_target;
        if to_target > to_source {
            stats.speaker_match_rate += 1.0;
        }
        let emo = oracle.emotion.predict(&out)?;
        stats.eecs += cosine_similarity(&emo, &oracle.emotion_targets[k])?;
        if best_match(&emo, &oracle.emotion_targets)? == k {
            stats.emotion_match_rate += 1.0;
        }

        let g = state.reference_encode(Encoder::Speaker, &h.features)?;
        let e = state.reference_encode(Encoder::Emotion, &eval_emotion_reference(h, opts.transform, opts.seed)?)?;
        let recon = state.reconstruct(&h.features, &g, &e, &mut rng)?;
        stats.heldout_recon_mse += recon.data().iter().zip(h.features.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        frames += h.features.data().len();
    }
    let n = heldout.len() as f64;
    stats.secs /= n;
    stats.eecs /= n;
    stats.speaker_match_rate /= n;
    stats.emotion_match_rate /= n;
    stats.heldout_recon_mse /= frames as f64;
    Ok(stats)
}
