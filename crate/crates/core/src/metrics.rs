//! Representation analysis: linear CKA, label-kernel CKA, prototypes,
//! ground-truth factor readouts, leakage probes, the per-flow-step probe,
//! 2-D projection and report files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::reference::{transform_reference, ReferenceTransform};
use crate::model::{Encoder, ModelState};
use crate::numerics::{cosine_similarity, derive_seed, ridge_fit, symmetric_eigen, Matrix};
use crate::synthdata::{EmotionParams, FactorSample};

/// Ridge regularization of the factor readouts.
pub const READOUT_ALPHA: f64 = 1e-3;

fn center_columns(x: &Matrix) -> Matrix {
    let m = x.mean_rows();
    Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) - m[j])
}

/// Linear CKA with biased HSIC normalization, computed in feature space:
/// `‖XcᵀYc‖² / (‖XcᵀXc‖·‖YcᵀYc‖)` with column-centered `Xc`, `Yc`.
pub fn linear_cka(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape(x.rows(), y.rows()));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("cka input"));
    }
    let (xc, yc) = (center_columns(x), center_columns(y));
    let xx = xc.t_matmul(&xc).frobenius();
    let yy = yc.t_matmul(&yc).frobenius();
    // Centering leaves rounding residue on constant inputs; treat that as zero.
    let tiny = |v: f64, m: &Matrix| v <= 1e-24 * m.data().iter().map(|a| a * a).sum::<f64>().max(1e-300);
    if xx == 0.0 || yy == 0.0 || tiny(xx, x) || tiny(yy, y) {
        return Err(Error::DegenerateInput("centered Gram matrix is zero".into()));
    }
    let xy = xc.t_matmul(&yc).frobenius();
    Ok((xy * xy / (xx * yy)).clamp(0.0, 1.0))
}

pub fn label_kernel(labels: &[usize]) -> Matrix {
    let n = labels.len();
    Matrix::from_fn(n, n, |i, j| f64::from(u8::from(labels[i] == labels[j])))
}

/// Indicator rows whose Gram matrix is the label kernel.
fn indicator(labels: &[usize]) -> Matrix {
    let classes: BTreeMap<usize, usize> = {
        let mut m = BTreeMap::new();
        for &l in labels {
            let next = m.len();
            m.entry(l).or_insert(next);
        }
        m
    };
    Matrix::from_fn(labels.len(), classes.len(), |i, j| f64::from(u8::from(classes[&labels[i]] == j)))
}

/// CKA between the Gram matrix of `x` and the label kernel.
pub fn lk_cka(x: &Matrix, labels: &[usize]) -> Result<f64> {
    if x.rows() != labels.len() {
        return Err(Error::shape(x.rows(), labels.len()));
    }
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if labels.len() < 3 || distinct < 2 {
        return Err(Error::DegenerateInput(format!(
            "label-kernel CKA needs n >= 3 and 2 classes, got n={} with {distinct}",
            labels.len()
        )));
    }
    linear_cka(x, &indicator(labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub centroids: BTreeMap<usize, Vec<f64>>,
    pub counts: BTreeMap<usize, usize>,
}

impl PrototypeSet {
    pub fn get(&self, label: usize) -> Option<&[f64]> {
        self.centroids.get(&label).map(Vec::as_slice)
    }
}

/// Per-label means. Rows are summed in a canonical order, so any
/// permutation of the input gives a bit-identical result.
pub fn centroid_prototypes(embeddings: &Matrix, labels: &[usize]) -> Result<PrototypeSet> {
    if embeddings.rows() != labels.len() {
        return Err(Error::shape(embeddings.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(embeddings.row(i));
    }
    let mut set = PrototypeSet { centroids: BTreeMap::new(), counts: BTreeMap::new() };
    for (label, mut rows) in groups {
        rows.sort_by(|a, b| {
            a.iter()
                .zip(b.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut c = vec![0.0; embeddings.cols()];
        for r in &rows {
            c.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b);
        }
        let n = rows.len() as f64;
        c.iter_mut().for_each(|v| *v /= n);
        set.centroids.insert(label, c);
        set.counts.insert(label, rows.len());
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Speaker,
    Emotion,
}

/// Closed-form ridge readout from sequence statistics to generator factors;
/// the stand-in for external speaker and emotion embedders.
///
/// The speaker readout uses frame means. The emotion readout adds per-channel
/// standard deviation and mean absolute first difference, since frequency
/// and amplitude are invisible in a mean; its targets are the emotion
/// parameters standardized across the emotion table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorReadout {
    pub kind: FactorKind,
    pub weights: Matrix,
    pub intercept: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_scale: Vec<f64>,
}

pub fn sequence_statistics(kind: FactorKind, x: &Matrix) -> Vec<f64> {
    let mean = x.mean_rows();
    if kind == FactorKind::Speaker {
        return mean;
    }
    let (t, d) = x.shape();
    let mut std = vec![0.0; d];
    let mut diff = vec![0.0; d];
    for i in 0..t {
        for j in 0..d {
            std[j] += (x.get(i, j) - mean[j]).powi(2);
            if i > 0 {
                diff[j] += (x.get(i, j) - x.get(i - 1, j)).abs();
            }
        }
    }
    std.iter_mut().for_each(|v| *v = (*v / t as f64).sqrt());
    diff.iter_mut().for_each(|v| *v /= (t.max(2) - 1) as f64);
    mean.into_iter().chain(std).chain(diff).collect()
}

/// Mean and population standard deviation of each parameter over the table.
fn table_moments(table: &[EmotionParams]) -> (Vec<f64>, Vec<f64>) {
    let n = table.len() as f64;
    let rows: Vec<[f64; 3]> = table.iter().map(|p| p.to_array()).collect();
    let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale = (0..3)
        .map(|j| {
            let s = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

impl FactorReadout {
    pub fn fit_speaker(samples: &[&FactorSample]) -> Result<Self> {
        let targets: Vec<Vec<f64>> = samples.iter().map(|s| s.speaker_factor.clone()).collect();
        let k = targets.first().map_or(0, Vec::len);
        Self::fit(FactorKind::Speaker, samples, targets, vec![0.0; k], vec![1.0; k])
    }

    pub fn fit_emotion(samples: &[&FactorSample], table: &[EmotionParams]) -> Result<Self> {
        let (mean, scale) = table_moments(table);
        let targets = samples
            .iter()
            .map(|s| standardize(&s.emotion_params.to_array(), &mean, &scale))
            .collect();
        Self::fit(FactorKind::Emotion, samples, targets, mean, scale)
    }

    fn fit(
        kind: FactorKind,
        samples: &[&FactorSample],
        targets: Vec<Vec<f64>>,
        target_mean: Vec<f64>,
        target_scale: Vec<f64>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput);
        }
        let stats: Vec<Vec<f64>> = samples.iter().map(|s| sequence_statistics(kind, &s.features)).collect();
        let (weights, intercept) = ridge_fit(&Matrix::from_rows(&stats)?, &Matrix::from_rows(&targets)?, READOUT_ALPHA)?;
        Ok(FactorReadout { kind, weights, intercept, target_mean, target_scale })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        let s = sequence_statistics(self.kind, x);
        if s.len() != self.weights.rows() {
            return Err(Error::shape(self.weights.rows(), s.len()));
        }
        Ok((0..self.weights.cols())
            .map(|j| self.intercept[j] + s.iter().enumerate().map(|(i, v)| v * self.weights.get(i, j)).sum::<f64>())
            .collect())
    }

    /// Target-space vector of an emotion's parameters.
    pub fn emotion_target(&self, p: &EmotionParams) -> Vec<f64> {
        standardize(&p.to_array(), &self.target_mean, &self.target_scale)
    }
}

fn standardize(v: &[f64], mean: &[f64], scale: &[f64]) -> Vec<f64> {
    v.iter().zip(mean).zip(scale).map(|((x, m), s)| (x - m) / s).collect()
}

/// Cosine between the readout of `generated` and a target factor vector.
pub fn factor_similarity(generated: &Matrix, target: &[f64], readout: &FactorReadout) -> Result<f64> {
    cosine_similarity(&readout.predict(generated)?, target)
}

/// Index of the candidate with the highest cosine to `v` (first on ties).
pub fn best_match(v: &[f64], candidates: &[Vec<f64>]) -> Result<usize> {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, c) in candidates.iter().enumerate() {
        let s = cosine_similarity(v, c)?;
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(best.0)
}

const PROBE_FOLDS: usize = 5;
const PROBE_ITERS: usize = 300;
const PROBE_LR: f64 = 0.5;
const PROBE_L2: f64 = 1e-3;

/// 5-fold cross-validated accuracy of a multinomial logistic classifier
/// trained by full-batch gradient descent on standardized features.
pub fn probe_accuracy<R: Rng + ?Sized>(embeddings: &Matrix, labels: &[usize], rng: &mut R) -> Result<f64> {
    if embeddings.rows() != labels.len() {
        return Err(Error::shape(embeddings.rows(), labels.len()));
    }
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    if by_label.len() < 2 || by_label.values().any(|v| v.len() < 2) || labels.len() < PROBE_FOLDS {
        return Err(Error::TooFewSamples(format!(
            "probe needs 2 labels with 2 samples each and {PROBE_FOLDS} samples overall, got counts {:?}",
            by_label.values().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let classes: Vec<usize> = by_label.keys().copied().collect();
    let class_of = |l: usize| classes.binary_search(&l).unwrap();
    // Stratified folds: shuffle within each class, deal round-robin.
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for members in by_label.values_mut() {
        members.shuffle(rng);
        for &i in members.iter() {
            fold[i] = next % PROBE_FOLDS;
            next += 1;
        }
    }
    let mut correct = 0;
    for f in 0..PROBE_FOLDS {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold[i] == f).collect();
        if test.is_empty() {
            continue;
        }
        let xtr = embeddings.select_rows(&train);
        let mean = xtr.mean_rows();
        let sd: Vec<f64> = (0..xtr.cols())
            .map(|j| {
                let v = (0..xtr.rows()).map(|i| (xtr.get(i, j) - mean[j]).powi(2)).sum::<f64>() / xtr.rows() as f64;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let z = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |i, j| (m.get(i, j) - mean[j]) / sd[j]);
        let xtr = z(&xtr);
        let ytr: Vec<usize> = train.iter().map(|&i| class_of(labels[i])).collect();
        let (w, b) = fit_softmax(&xtr, &ytr, classes.len());
        let xte = z(&embeddings.select_rows(&test));
        let logits = xte.matmul(&w);
        for (r, &i) in test.iter().enumerate() {
            let row = logits.row(r);
            let pred = (0..classes.len())
                .max_by(|&a, &c| (row[a] + b[a]).total_cmp(&(row[c] + b[c])).then(c.cmp(&a)))
                .unwrap();
            correct += usize::from(pred == class_of(labels[i]));
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

fn fit_softmax(x: &Matrix, y: &[usize], k: usize) -> (Matrix, Vec<f64>) {
    let (n, d) = x.shape();
    let mut w = Matrix::zeros(d, k);
    let mut b = vec![0.0; k];
    for _ in 0..PROBE_ITERS {
        let logits = x.matmul(&w);
        let mut resid = Matrix::zeros(n, k);
        for i in 0..n {
            let row: Vec<f64> = (0..k).map(|c| logits.get(i, c) + b[c]).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..k {
                resid.set(i, c, (e[c] / s - f64::from(u8::from(y[i] == c))) / n as f64);
            }
        }
        let gw = x.t_matmul(&resid);
        for j in 0..d {
            for c in 0..k {
                let v = w.get(j, c) - PROBE_LR * (gw.get(j, c) + PROBE_L2 * w.get(j, c));
                w.set(j, c, v);
            }
        }
        for c in 0..k {
            b[c] -= PROBE_LR * (0..n).map(|i| resid.get(i, c)).sum::<f64>();
        }
    }
    (w, b)
}

/// Speaker and emotion embeddings of a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    /// n × d_emb speaker embeddings.
    pub speaker: Matrix,
    /// n × d_emb emotion embeddings.
    pub emotion: Matrix,
    pub speaker_labels: Vec<usize>,
    pub emotion_labels: Vec<usize>,
    pub sample_ids: Vec<usize>,
}

/// Emotion reference of a sample for evaluation passes: the full sequence
/// under `transform`, with randomness derived from the sample id.
pub fn eval_emotion_reference(sample: &FactorSample, transform: ReferenceTransform, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE5, sample.id as u64]));
    transform_reference(&sample.features, transform, &mut rng)
}

/// One pass over `samples` with full-length references.
pub fn embed_samples(
    state: &ModelState,
    samples: &[&FactorSample],
    transform: ReferenceTransform,
    seed: u64,
) -> Result<Embeddings> {
    let mut spk = Vec::with_capacity(samples.len());
    let mut emo = Vec::with_capacity(samples.len());
    for s in samples {
        spk.push(state.reference_encode(Encoder::Speaker, &s.features)?);
        emo.push(state.reference_encode(Encoder::Emotion, &eval_emotion_reference(s, transform, seed)?)?);
    }
    Ok(Embeddings {
        speaker: Matrix::from_rows(&spk)?,
        emotion: Matrix::from_rows(&emo)?,
        speaker_labels: samples.iter().map(|s| s.speaker_id).collect(),
        emotion_labels: samples.iter().map(|s| s.emotion_id).collect(),
        sample_ids: samples.iter().map(|s| s.id).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowProbeRow {
    pub flow_step: usize,
    pub reverse: bool,
    pub lk_cka_speaker: f64,
    pub lk_cka_emotion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowProbeTable {
    pub rows: Vec<FlowProbeRow>,
}

impl FlowProbeTable {
    pub fn speaker(&self, step: usize) -> f64 {
        self.rows[step - 1].lk_cka_speaker
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        for row in &self.rows {
            w.serialize(row).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(e.to_string())
    }
}

/// LK-CKA of time-mean latents after each forward coupling block, then
/// after each inverse block re-entered from the flow output under the same
/// conditioning. Posterior means are used as the latent.
pub fn flow_probe(
    state: &ModelState,
    samples: &[&FactorSample],
    transform: ReferenceTransform,
    seed: u64,
) -> Result<FlowProbeTable> {
    let emb = embed_samples(state, samples, transform, seed)?;
    let blocks = state.net().flow.len();
    let mut steps: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(samples.len()); 2 * blocks];
    for (i, s) in samples.iter().enumerate() {
        let (g, e) = (emb.speaker.row(i), emb.emotion.row(i));
        let zero = Matrix::zeros(s.features.rows(), state.latent_dim());
        let post = state.posterior_with_noise(&s.features, g, e, &zero)?;
        let fwd = state.flow_forward_steps(&post.z, g, e)?;
        let z_p = fwd.last().map(|(m, _)| m.clone()).expect("flow has blocks");
        let inv = state.flow_inverse_steps(&z_p, g, e)?;
        for (k, m) in fwd.iter().map(|(m, _)| m).chain(inv.iter().map(|(m, _)| m)).enumerate() {
            steps[k].push(m.mean_rows());
        }
    }
    let rows = steps
        .iter()
        .enumerate()
        .map(|(k, latents)| {
            let x = Matrix::from_rows(latents)?;
            Ok(FlowProbeRow {
                flow_step: k + 1,
                reverse: k >= blocks,
                lk_cka_speaker: lk_cka(&x, &emb.speaker_labels)?,
                lk_cka_emotion: lk_cka(&x, &emb.emotion_labels)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FlowProbeTable { rows })
}

/// Projection onto the top two principal axes. Each axis is signed so its
/// largest-magnitude loading is positive. Returns coordinates and the
/// variance along each axis.
pub fn pca_2d(x: &Matrix) -> Result<(Matrix, [f64; 2])> {
    if x.cols() < 2 || x.rows() < 2 {
        return Err(Error::DegenerateInput(format!("PCA needs at least 2×2 input, got {:?}", x.shape())));
    }
    let xc = center_columns(x);
    let cov = xc.t_matmul(&xc).scale(1.0 / x.rows() as f64);
    let (vals, vecs) = symmetric_eigen(&cov);
    let mut axes = vecs.slice_cols(0, 2);
    for c in 0..2 {
        let lead = (0..axes.rows())
            .max_by(|&a, &b| axes.get(a, c).abs().total_cmp(&axes.get(b, c).abs()).then(b.cmp(&a)))
            .unwrap();
        if axes.get(lead, c) < 0.0 {
            for r in 0..axes.rows() {
                let v = -axes.get(r, c);
                axes.set(r, c, v);
            }
        }
    }
    Ok((xc.matmul(&axes), [vals[0].max(0.0), vals[1].max(0.0)]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub config: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn value(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric).map(|r| r.value)
    }

    /// Writes the CSV table and its JSON mirror.
    pub fn write(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        write_rows_csv(&self.rows, csv_path)?;
        std::fs::write(json_path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Report> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn write_rows_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    if rows.is_empty() {
        w.write_record(["metric", "config", "value", "seed"]).map_err(csv_error)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    let headers = r.headers().map_err(csv_error)?.clone();
    if headers != vec!["metric", "config", "value", "seed"] {
        return Err(Error::Format(format!("{}: unexpected header {headers:?}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelDims};
    use crate::synthdata::{make_dataset, DatasetSpec};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Matrix {
        Matrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn random_orthogonal(rng: &mut ChaCha8Rng, p: usize) -> Matrix {
        let g = gaussian(rng, p, p).to_nalgebra();
        Matrix::from_nalgebra(&g.qr().q())
    }

    fn balanced(n: usize, k: usize) -> Vec<usize> {
        (0..n).map(|i| i % k).collect()
    }

    #[test]
    fn cka_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = gaussian(&mut rng, 30, 5);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let q = random_orthogonal(&mut rng, 5);
        let y = x.matmul(&q).scale(-3.7);
        assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-10);
        let z = gaussian(&mut rng, 30, 3);
        let base = linear_cka(&x, &z).unwrap();
        assert!((linear_cka(&x.matmul(&q).scale(0.2), &z).unwrap() - base).abs() < 1e-10);
        // n = 2: centered Grams are multiples of [[1,-1],[-1,1]].
        let a = gaussian(&mut rng, 2, 4);
        let b = gaussian(&mut rng, 2, 7);
        assert!((linear_cka(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(linear_cka(&Matrix::filled(5, 2, 3.0), &z.slice_rows(0, 5)), Err(Error::DegenerateInput(_))));
        assert!(linear_cka(&x, &z.slice_rows(0, 10)).is_err());
    }

    #[test]
    fn label_kernel_examples() {
        let k = label_kernel(&[0, 0, 1]);
        assert_eq!(k, Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
        assert_eq!(label_kernel(&[2, 2, 2]), Matrix::filled(3, 3, 1.0));
        assert_eq!(label_kernel(&[0, 1, 2, 3]), Matrix::identity(4));
        let labels = [0, 2, 1, 2, 0];
        let ind = indicator(&labels);
        assert_eq!(ind.matmul_t(&ind), label_kernel(&labels));
    }

    #[test]
    fn lk_cka_examples() {
        let labels = balanced(12, 3);
        assert!((lk_cka(&indicator(&labels), &labels).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gaussian(&mut rng, 12, 4);
        let relabeled: Vec<usize> = labels.iter().map(|l| [7, 3, 5][*l]).collect();
        assert_eq!(lk_cka(&x, &labels).unwrap(), lk_cka(&x, &relabeled).unwrap());
        assert!(lk_cka(&x, &[0; 12]).is_err());
        assert!(lk_cka(&x.slice_rows(0, 2), &[0, 1]).is_err());
    }

    #[test]
    fn lk_cka_of_noise_is_small() {
        // 95th percentile over 100 seeds of independent Gaussian features.
        let labels = balanced(60, 3);
        let mut values: Vec<f64> = (0..100)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                lk_cka(&gaussian(&mut rng, 60, 8), &labels).unwrap()
            })
            .collect();
        values.sort_by(f64::total_cmp);
        assert!(values[94] < 0.2, "p95 = {}", values[94]);
    }

    #[test]
    fn prototype_examples() {
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![3.0, 3.0]]).unwrap();
        let p = centroid_prototypes(&x, &[4, 4, 9]).unwrap();
        assert_eq!(p.get(4).unwrap(), &[0.5, 0.5]);
        assert_eq!(p.get(9).unwrap(), &[3.0, 3.0]);
        assert_eq!(p.counts[&4], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let big = gaussian(&mut rng, 40, 3);
        let labels = balanced(40, 4);
        let mut order: Vec<usize> = (0..40).collect();
        order.shuffle(&mut rng);
        let shuffled_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        assert_eq!(
            centroid_prototypes(&big, &labels).unwrap(),
            centroid_prototypes(&big.select_rows(&order), &shuffled_labels).unwrap()
        );
    }

    #[test]
    fn prototypes_commute_with_linear_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(&mut rng, 30, 3);
        let a = gaussian(&mut rng, 3, 5);
        let labels = balanced(30, 3);
        let mapped = centroid_prototypes(&x.matmul(&a), &labels).unwrap();
        let base = centroid_prototypes(&x, &labels).unwrap();
        for (l, c) in &base.centroids {
            let expected = Matrix::row_vector(c).matmul(&a);
            let got = Matrix::row_vector(mapped.get(*l).unwrap());
            assert!(got.max_abs_diff(&expected) < 1e-12);
        }
    }

    fn readout_data() -> crate::synthdata::Dataset {
        make_dataset(&DatasetSpec { samples_per_cell: 10, ..DatasetSpec::default() }).unwrap()
    }

    #[test]
    fn readouts_recover_factors() {
        let ds = readout_data();
        let fit: Vec<&FactorSample> = ds.samples.iter().filter(|s| s.id % 4 != 0).collect();
        let spk = FactorReadout::fit_speaker(&fit).unwrap();
        let emo = FactorReadout::fit_emotion(&fit, &ds.emotion_table).unwrap();
        let targets: Vec<Vec<f64>> = ds.emotion_table.iter().map(|p| emo.emotion_target(p)).collect();
        let held: Vec<&FactorSample> = ds.samples.iter().filter(|s| s.id % 4 == 0).collect();
        let mut matched = 0;
        for s in &held {
            assert!(factor_similarity(&s.features, &s.speaker_factor, &spk).unwrap() > 0.9);
            matched += usize::from(best_match(&emo.predict(&s.features).unwrap(), &targets).unwrap() == s.emotion_id);
        }
        assert!(matched as f64 >= 0.95 * held.len() as f64, "{matched}/{}", held.len());
    }

    #[test]
    fn factor_similarity_edges() {
        let ds = readout_data();
        let fit: Vec<&FactorSample> = ds.samples.iter().collect();
        let spk = FactorReadout::fit_speaker(&fit).unwrap();
        let x = &ds.samples[3].features;
        let r = spk.predict(x).unwrap();
        assert!((factor_similarity(x, &r, &spk).unwrap() - 1.0).abs() < 1e-12);
        // A probe factor orthogonal to the readout.
        let mut o = vec![r[1], -r[0], 0.0, 0.0];
        if o.iter().all(|v| *v == 0.0) {
            o = vec![0.0, 0.0, 1.0, 0.0];
        }
        assert!(factor_similarity(x, &o, &spk).unwrap().abs() < 1e-12);
        assert!(matches!(factor_similarity(x, &[0.0; 4], &spk), Err(Error::ZeroNorm)));
    }

    #[test]
    fn probe_examples() {
        let labels = balanced(40, 4);
        let onehot = indicator(&labels);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(probe_accuracy(&onehot, &labels, &mut rng).unwrap(), 1.0);

        let mut accs = Vec::new();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian(&mut rng, 120, 4);
            accs.push(probe_accuracy(&x, &balanced(120, 3), &mut rng).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 1.0 / 3.0).abs() < 0.1, "mean accuracy {mean}");

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels = balanced(90, 3);
        let x = Matrix::from_fn(90, 3, |i, j| if labels[i] == j { 1.0 } else { 0.0 } + 0.8 * rng.sample::<f64, _>(StandardNormal));
        let dup = Matrix::from_fn(90, 6, |i, j| x.get(i, j % 3));
        let a = probe_accuracy(&x, &labels, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = probe_accuracy(&dup, &labels, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert!((a - b).abs() <= 0.02, "{a} vs {b}");

        assert!(matches!(probe_accuracy(&onehot.slice_rows(0, 4), &labels[..4], &mut rng), Err(Error::TooFewSamples(_))));
    }

    fn tiny_state(ds: &crate::synthdata::Dataset) -> ModelState {
        let dims = ModelDims {
            config: ModelConfig { latent_dim: 4, emb_dim: 4, hidden: 8, ref_channels: vec![8; 6] },
            feature_dim: ds.spec.feature_dim,
            emotion_input_dim: ds.spec.feature_dim,
            n_speakers: ds.spec.n_speakers,
            n_emotions: ds.spec.n_emotions,
            n_tokens: ds.spec.n_tokens,
        };
        ModelState::init(dims, 1).unwrap()
    }

    #[test]
    fn flow_probe_layout_and_identity() {
        let ds = make_dataset(&DatasetSpec { samples_per_cell: 2, ..DatasetSpec::default() }).unwrap();
        let state = tiny_state(&ds);
        let samples: Vec<&FactorSample> = ds.train_samples().collect();
        let table = flow_probe(&state, &samples, ReferenceTransform::None, 0).unwrap();
        assert_eq!(table.rows.len(), 8);
        for (k, row) in table.rows.iter().enumerate() {
            assert_eq!(row.flow_step, k + 1);
            assert_eq!(row.reverse, k >= 4);
            assert!((0.0..=1.0).contains(&row.lk_cka_speaker));
            assert_eq!(row.lk_cka_speaker, table.rows[0].lk_cka_speaker);
            assert_eq!(row.lk_cka_emotion, table.rows[0].lk_cka_emotion);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probe.csv");
        table.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("flow_step,reverse,lk_cka_speaker,lk_cka_emotion\n"));
        assert_eq!(text.lines().count(), 9);
    }

    #[test]
    fn pca_orders_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::from_fn(50, 3, |_, j| [5.0, 0.3, 1.0][j] * rng.sample::<f64, _>(StandardNormal));
        let (coords, var) = pca_2d(&x).unwrap();
        assert_eq!(coords.shape(), (50, 2));
        let v = |c: usize| (0..50).map(|i| coords.get(i, c).powi(2)).sum::<f64>() / 50.0;
        assert!(v(0) >= v(1));
        assert!((v(0) - var[0]).abs() < 1e-9 && (v(1) - var[1]).abs() < 1e-9);
        assert_eq!(pca_2d(&x).unwrap(), (coords, var));
    }

    #[test]
    fn report_mirrors_agree() {
        let report = Report {
            meta: BTreeMap::from([("projection".to_string(), "pca".to_string())]),
            rows: vec![
                ReportRow { metric: "cka_g_e".into(), config: "mpcl+cosine".into(), value: 0.1234567890123, seed: 3 },
                ReportRow { metric: "secs".into(), config: "mpcl+cosine".into(), value: -1e-17, seed: 3 },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let (c, j) = (dir.path().join("r.csv"), dir.path().join("r.json"));
        report.write(&c, &j).unwrap();
        assert!(std::fs::read_to_string(&c).unwrap().starts_with("metric,config,value,seed\n"));
        assert_eq!(read_rows_csv(&c).unwrap(), report.rows);
        assert_eq!(Report::read_json(&j).unwrap(), report);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cka_symmetric_bounded_permutation_invariant(seed in 0u64..10_000, n in 3usize..25, p in 1usize..6, q in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gaussian(&mut rng, n, p);
            let y = gaussian(&mut rng, n, q);
            let a = linear_cka(&x, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - linear_cka(&y, &x).unwrap()).abs() < 1e-12);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            prop_assert!((a - linear_cka(&x.select_rows(&order), &y.select_rows(&order)).unwrap()).abs() < 1e-12);
        }
    }
}
