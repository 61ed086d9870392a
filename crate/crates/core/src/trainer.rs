//! Two-stage training: ground-truth pretraining, then self-augmented
//! refinement. AdamW with per-epoch learning-rate decay, checkpoints and a
//! long-format metrics history.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions, Oracle};
use crate::losses::{LossReport, LossTerms, LossWeights};
use crate::model::objective::{evaluate_objective, prepare_item, BatchItem, PreparedItem};
use crate::model::ModelState;
use crate::numerics::{derive_seed, Matrix};
use crate::selfaug::{generate_synthetic, mix_batch, permute_speakers, MixedBatch};
use crate::synthdata::{epoch_batches, Dataset, FactorSample};
use crate::tensor_io::{self, Precision, Reader};

pub const ADAM_EPSILON: f64 = 1e-8;

/// Reconstruction weight used by default in training. With unit weights the
/// regularizers dominate and the posterior collapses onto the prior.
pub const DEFAULT_RECON_WEIGHT: f64 = 45.0;

const SEED_MODEL: u64 = 0x11;
const SEED_RUN: u64 = 0x22;
const SEED_EPOCH: u64 = 0x33;
const SEED_AUG: u64 = 0x44;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub lr_decay_per_epoch: f64,
    pub batch_size: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub stage2_lr: f64,
    pub grl_lambda: f64,
    pub mpcl_temperature: f64,
    pub loss_weights: LossWeights,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Loss terms are logged every `log_every` steps (0 disables).
    pub log_every: u64,
    /// Embedding and conversion metrics every `eval_every` steps (0 disables).
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_initial: 2e-4,
            betas: [0.8, 0.99],
            weight_decay: 0.01,
            lr_decay_per_epoch: 0.999f64.powf(1.0 / 8.0),
            batch_size: 32,
            stage1_steps: 5000,
            stage2_steps: 1000,
            stage2_lr: 2e-5,
            grl_lambda: 1.0,
            mpcl_temperature: 0.1,
            loss_weights: LossWeights { recon: DEFAULT_RECON_WEIGHT, ..LossWeights::default() },
            grad_clip: 5.0,
            log_every: 50,
            eval_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let rates = [
            ("lr_initial", self.lr_initial),
            ("stage2_lr", self.stage2_lr),
            ("lr_decay_per_epoch", self.lr_decay_per_epoch),
            ("mpcl_temperature", self.mpcl_temperature),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.stage2_lr > self.lr_initial {
            return bad(format!("stage2_lr {} exceeds lr_initial {}", self.stage2_lr, self.lr_initial));
        }
        if self.lr_decay_per_epoch > 1.0 {
            return bad(format!("lr_decay_per_epoch {} exceeds 1", self.lr_decay_per_epoch));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.weight_decay >= 0.0 && self.grl_lambda >= 0.0) {
            return bad("weight_decay and grl_lambda must be non-negative".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2_steps
    }
}

/// Stage-1 learning rate after `epoch` completed epochs.
pub fn lr_at_epoch(config: &TrainConfig, epoch: u64) -> f64 {
    config.lr_initial * config.lr_decay_per_epoch.powf(epoch as f64)
}

/// AdamW moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn reset(&mut self) {
        for m in self.m.iter_mut().chain(self.v.iter_mut()) {
            m.data_mut().fill(0.0);
        }
        self.step = 0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub betas: [f64; 2],
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(c: &TrainConfig) -> Self {
        AdamW { betas: c.betas, weight_decay: c.weight_decay }
    }
}

/// One bias-corrected Adam update followed by decoupled weight decay:
/// `θ ← θ − lr·m̂/(√v̂ + ε) − lr·λ·θ`, the decay taken on the pre-update θ.
pub fn optimizer_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    opt: &mut OptimizerState,
    lr: f64,
    adam: AdamW,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != opt.m.len() {
        return Err(Error::shape(params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("{:?}", p.shape()), format!("{:?}", g.shape())));
        }
    }
    opt.step += 1;
    let [b1, b2] = adam.betas;
    let c1 = 1.0 - b1.powf(opt.step as f64);
    let c2 = 1.0 - b2.powf(opt.step as f64);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(opt.m.iter_mut()).zip(opt.v.iter_mut()) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let step = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPSILON);
            p[i] = p[i] - lr * step - lr * adam.weight_decay * p[i];
        }
    }
    Ok(())
}

/// Scales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: ModelState,
    pub optimizer: OptimizerState,
    /// Completed steps.
    pub step: u64,
    /// Stage of the last completed step; 0 before any step.
    pub stage: u8,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: u64,
    pub stage: u8,
    pub metric: String,
    pub value: f64,
}

pub struct TrainOptions<'a> {
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed steps (for staged runs); the schedule
    /// still follows the configured totals.
    pub stop_after: Option<u64>,
    /// Called with each logged group of rows.
    pub on_log: Option<&'a mut dyn FnMut(&[HistoryRow])>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions { resume: None, stop_after: None, on_log: None }
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    /// The final state, or on failure the last state with finite loss.
    pub checkpoint: Checkpoint,
    /// Lowest-loss logged checkpoint of stage 1, or of stage 2 once it ran.
    pub best: Option<Checkpoint>,
    pub history: Vec<HistoryRow>,
    /// `NonFiniteLoss` when training aborted.
    pub failure: Option<Error>,
}

impl TrainOutput {
    pub fn into_result(self) -> Result<TrainOutput> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok(self),
        }
    }
}

/// Builds the model for `config` on `dataset` and its initial checkpoint.
pub fn initial_checkpoint(config: &RunConfig, dataset: &Dataset) -> Result<Checkpoint> {
    let mut config = config.clone();
    config.dataset = dataset.spec.clone();
    config.validate()?;
    let t = &config.train;
    let state = ModelState::init(config.model_dims(&dataset.spec), derive_seed(t.seed, &[SEED_MODEL]))?;
    let optimizer = OptimizerState::new(state.params().values());
    let rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, &[SEED_RUN]));
    Ok(Checkpoint { config, state, optimizer, step: 0, stage: 0, rng })
}

/// Full batches of one epoch; a short tail is dropped unless the split is
/// smaller than a batch.
fn epoch_plan(dataset: &Dataset, config: &TrainConfig, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[SEED_EPOCH, epoch]));
    let mut batches = epoch_batches(&dataset.train, config.batch_size, &mut rng);
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < config.batch_size) {
        batches.pop();
    }
    batches
}

fn batches_per_epoch(dataset: &Dataset, config: &TrainConfig) -> u64 {
    let n = dataset.train.len();
    ((n / config.batch_size).max(1)) as u64
}

/// Learning rate of global step `step` (0-based).
pub fn lr_at_step(config: &TrainConfig, per_epoch: u64, step: u64) -> f64 {
    if step < config.stage1_steps {
        lr_at_epoch(config, step / per_epoch)
    } else {
        let local = (step - config.stage1_steps) / per_epoch;
        config.stage2_lr * config.lr_decay_per_epoch.powf(local as f64)
    }
}

/// Assembles the batch of one step, applying self-augmentation in stage 2.
pub fn assemble_batch(
    ckpt: &mut Checkpoint,
    samples: &[&FactorSample],
    stage: u8,
    step: u64,
) -> Result<(MixedBatch, Vec<PreparedItem>)> {
    let cfg = &ckpt.config;
    let mut batch = MixedBatch::from_samples(samples);
    if stage == 2 && cfg.self_augmentation.proportion > 0.0 {
        let aug = &cfg.self_augmentation;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(aug.seed, &[SEED_AUG, cfg.train.seed, step]));
        let assignment = permute_speakers(batch.len(), &mut rng);
        let synthetic = generate_synthetic(&ckpt.state, &batch, &assignment, &mut rng)?;
        batch = mix_batch(&batch, &synthetic, aug, &mut rng)?;
    }
    let transform = cfg.ablation.reference_transform;
    let items = (0..batch.len())
        .map(|i| {
            let item = BatchItem {
                target: batch.ground_truth_targets[i].clone(),
                speaker_ref: batch.speaker_reference_inputs[i].clone(),
                emotion_ref: batch.emotion_reference_inputs[i].clone(),
                tokens: batch.content_tokens[i].clone(),
                speaker: batch.speaker_labels[i],
                emotion: batch.emotion_labels[i],
            };
            prepare_item(&ckpt.state, &item, transform, &mut ckpt.rng)
        })
        .collect::<Result<_>>()?;
    Ok((batch, items))
}

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFiniteTerm(_) | Error::NonFinite(_) | Error::NonFiniteValue(_))
}

fn loss_rows(step: u64, stage: u8, report: &LossReport, lr: f64, masked: usize) -> Vec<HistoryRow> {
    let row = |metric: &str, value: f64| HistoryRow { step, stage, metric: metric.to_string(), value };
    let mut rows: Vec<HistoryRow> = LossTerms::NAMES
        .iter()
        .zip(report.terms().values())
        .map(|(n, v)| row(n, v))
        .collect();
    rows.push(row("total", report.total));
    rows.push(row("lr", lr));
    rows.push(row("synthetic_items", masked as f64));
    rows
}

/// Runs (or resumes) both stages. Setup errors are returned directly; a
/// non-finite loss ends the run early with `failure` set and the last good
/// checkpoint.
/// Runs both stages. When resuming, the checkpoint's own config drives the
/// run and `config` is ignored.
pub fn train(config: &RunConfig, dataset: &Dataset, mut opts: TrainOptions<'_>) -> Result<TrainOutput> {
    let mut ckpt = match opts.resume.take() {
        Some(c) => {
            c.config.validate()?;
            if c.config.dataset != dataset.spec {
                return Err(Error::Config("checkpoint was trained on a different dataset spec".into()));
            }
            c
        }
        None => initial_checkpoint(config, dataset)?,
    };
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tc = ckpt.config.train.clone();
    let objective = ckpt.config.objective();
    let adam = AdamW::from_config(&tc);
    let per_epoch = batches_per_epoch(dataset, &tc);
    let end = opts.stop_after.map_or(tc.total_steps(), |s| s.min(tc.total_steps()));
    let oracle = if tc.eval_every > 0 && end > ckpt.step { Some(Oracle::fit(dataset)?) } else { None };

    let mut history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut window = (0.0, 0u64);
    let mut plan: Option<(u64, Vec<Vec<usize>>)> = None;

    while ckpt.step < end {
        let step = ckpt.step;
        let stage: u8 = if step < tc.stage1_steps { 1 } else { 2 };
        if stage == 2 && step == tc.stage1_steps {
            ckpt.optimizer.reset();
            best = None;
            window = (0.0, 0);
        }
        let epoch = step / per_epoch;
        if plan.as_ref().is_none_or(|(e, _)| *e != epoch) {
            plan = Some((epoch, epoch_plan(dataset, &tc, epoch)));
        }
        let indices = &plan.as_ref().unwrap().1[(step % per_epoch) as usize];
        let samples: Vec<&FactorSample> = indices.iter().map(|&i| &dataset.samples[i]).collect();

        let before = ckpt.clone();
        let (batch, items) = assemble_batch(&mut ckpt, &samples, stage, step)?;
        let out = match evaluate_objective(&ckpt.state, &items, &objective, true) {
            Ok(o) => o,
            Err(e) if is_non_finite(&e) => return Ok(abort(before, best, history, step + 1)),
            Err(e) => return Err(e),
        };
        let mut grads = out.grads.expect("gradients requested");
        if !out.report.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Ok(abort(before, best, history, step + 1));
        }
        clip_global_norm(&mut grads, tc.grad_clip);
        let lr = lr_at_step(&tc, per_epoch, step);
        optimizer_step(ckpt.state.params_mut().values_mut(), &grads, &mut ckpt.optimizer, lr, adam)?;
        if !ckpt.state.params().is_finite() {
            return Ok(abort(before, best, history, step + 1));
        }
        ckpt.step += 1;
        ckpt.stage = stage;
        window.0 += out.report.total;
        window.1 += 1;

        let done = ckpt.step;
        let mut logged = Vec::new();
        if tc.log_every > 0 && (done % tc.log_every == 0 || done == end) {
            logged.extend(loss_rows(done, stage, &out.report, lr, batch.masked()));
            let mean = window.0 / window.1 as f64;
            if best.as_ref().is_none_or(|(b, _)| mean < *b) {
                best = Some((mean, ckpt.clone()));
            }
            window = (0.0, 0);
        }
        if let Some(oracle) = &oracle {
            if done % tc.eval_every == 0 || done == end {
                let opts = EvalOptions { transform: ckpt.config.ablation.reference_transform, seed: tc.seed, probes: false };
                let summary = evaluate(&ckpt.state, dataset, oracle, opts)?;
                logged.extend(summary.metrics().into_iter().map(|(m, v)| HistoryRow {
                    step: done,
                    stage,
                    metric: m.to_string(),
                    value: v,
                }));
            }
        }
        if !logged.is_empty() {
            if let Some(cb) = opts.on_log.as_mut() {
                cb(&logged);
            }
            history.extend(logged);
        }
    }
    Ok(TrainOutput { checkpoint: ckpt, best: best.map(|b| b.1), history, failure: None })
}

fn abort(last_good: Checkpoint, best: Option<(f64, Checkpoint)>, history: Vec<HistoryRow>, step: u64) -> TrainOutput {
    TrainOutput {
        checkpoint: last_good,
        best: best.map(|b| b.1),
        history,
        failure: Some(Error::NonFiniteLoss { step }),
    }
}

pub fn write_history(rows: &[HistoryRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(crate::metrics::csv_error)?;
    w.write_record(["step", "stage", "metric", "value"]).map_err(crate::metrics::csv_error)?;
    for r in rows {
        w.serialize(r).map_err(crate::metrics::csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(crate::metrics::csv_error)?;
    let header = r.headers().map_err(crate::metrics::csv_error)?;
    if header != vec!["step", "stage", "metric", "value"] {
        return Err(Error::Format(format!("unexpected history header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(crate::metrics::csv_error)).collect()
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DKC1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn push_section(out: &mut Vec<u8>, body: &[u8]) {
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
}

fn encode_tensors(ms: &[Matrix], out: &mut Vec<u8>) {
    out.extend_from_slice(&(ms.len() as u32).to_le_bytes());
    for m in ms {
        tensor_io::encode(m, Precision::F64, out);
    }
}

fn decode_tensors(r: &mut Reader<'_>) -> Result<Vec<Matrix>> {
    let n = r.u32("tensor count")?;
    (0..n).map(|_| tensor_io::decode_from(r)).collect()
}

/// `DKC1`, u32 version, then five u64-length-prefixed sections: config
/// JSON, parameters, optimizer, rng state, progress. Tensors are DKT8.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    push_section(&mut out, serde_json::to_string(&ckpt.config).expect("config serializes").as_bytes());

    let mut body = Vec::new();
    encode_tensors(ckpt.state.params().values(), &mut body);
    push_section(&mut out, &body);

    body.clear();
    body.extend_from_slice(&ckpt.optimizer.step.to_le_bytes());
    encode_tensors(&ckpt.optimizer.m, &mut body);
    encode_tensors(&ckpt.optimizer.v, &mut body);
    push_section(&mut out, &body);

    body.clear();
    body.extend_from_slice(&ckpt.rng.get_seed());
    body.extend_from_slice(&ckpt.rng.get_stream().to_le_bytes());
    body.extend_from_slice(&ckpt.rng.get_word_pos().to_le_bytes());
    push_section(&mut out, &body);

    body.clear();
    body.extend_from_slice(&ckpt.step.to_le_bytes());
    body.push(ckpt.stage);
    push_section(&mut out, &body);
    out
}

fn section<'a>(r: &mut Reader<'a>, what: &str) -> Result<Reader<'a>> {
    let len = r.u64(what)?;
    let len = usize::try_from(len).map_err(|_| Error::Format(format!("{what} section too large")))?;
    Ok(Reader::new(r.take(len, what)?))
}

fn finish(r: &Reader<'_>, what: &str) -> Result<()> {
    if r.is_empty() {
        Ok(())
    } else {
        Err(Error::Format(format!("trailing bytes in {what} section")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.u32("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let mut s = section(&mut r, "config")?;
    let text = s.take(s.remaining(), "config")?;
    let config: RunConfig =
        serde_json::from_slice(text).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;

    let mut s = section(&mut r, "parameters")?;
    let values = decode_tensors(&mut s)?;
    finish(&s, "parameters")?;
    let state = ModelState::from_values(config.model_dims(&config.dataset), values)?;

    let mut s = section(&mut r, "optimizer")?;
    let opt_step = s.u64("optimizer step")?;
    let m = decode_tensors(&mut s)?;
    let v = decode_tensors(&mut s)?;
    finish(&s, "optimizer")?;
    let shapes_match = |ms: &[Matrix]| {
        ms.len() == state.params().len() && ms.iter().zip(state.params().values()).all(|(a, b)| a.shape() == b.shape())
    };
    if !shapes_match(&m) || !shapes_match(&v) {
        return Err(Error::Format("optimizer moments do not match the parameter layout".into()));
    }

    let mut s = section(&mut r, "rng")?;
    let seed: [u8; 32] = s.take(32, "rng seed")?.try_into().unwrap();
    let stream = s.u64("rng stream")?;
    let word_pos = u128::from_le_bytes(s.take(16, "rng position")?.try_into().unwrap());
    finish(&s, "rng")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut s = section(&mut r, "progress")?;
    let step = s.u64("step")?;
    let stage = s.take(1, "stage")?[0];
    finish(&s, "progress")?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { config, state, optimizer: OptimizerState { m, v, step: opt_step }, step, stage, rng })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests;
