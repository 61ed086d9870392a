//! Training objectives with closed-form gradients.
//!
//! Every loss here returns its value together with the exact gradient with
//! respect to each differentiable input; the autodiff tape wraps them as
//! scalar-output nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, norm, Matrix};

const NORM_FLOOR: f64 = 1e-12;
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Anchors scored against a candidate set; rows are normalized inside the loss.
#[derive(Clone, Debug)]
pub struct MpclBatch {
    pub anchors: Matrix,
    pub candidates: Matrix,
    pub anchor_labels: Vec<usize>,
    pub candidate_labels: Vec<usize>,
    pub temperature: f64,
}

#[derive(Clone, Debug)]
pub struct MpclOutput {
    pub loss: f64,
    pub grad_anchors: Matrix,
    pub grad_candidates: Matrix,
}

fn normalized_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !(n >= NORM_FLOOR) {
            return Err(Error::ZeroNorm);
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pulls a gradient taken w.r.t. a unit vector back through `v / ‖v‖`.
fn through_normalization(unit: &[f64], norm: f64, g: &mut [f64]) {
    let proj = dot(unit, g);
    for (gi, ui) in g.iter_mut().zip(unit) {
        *gi = (*gi - ui * proj) / norm;
    }
}

/// Loss and logit gradient for one anchor, given its logits over candidates
/// and the match mask. Returns `(loss, dL/dlogit)` where logits are already
/// divided by the temperature.
fn anchor_cross_entropy(logits: &[f64], matches: &[bool]) -> (f64, Vec<f64>) {
    let n_pos = matches.iter().filter(|m| **m).count() as f64;
    let lse = log_sum_exp(logits, 1.0);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&s, &m) in logits.iter().zip(matches) {
        let q = (s - lse).exp();
        let c = if m { 1.0 / n_pos } else { 0.0 };
        if m {
            loss -= c * (s - lse);
        }
        grad.push(q - c);
    }
    (loss, grad)
}

pub fn mpcl_loss(batch: &MpclBatch) -> Result<MpclOutput> {
    let tau = batch.temperature;
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let (a, c) = (&batch.anchors, &batch.candidates);
    if a.cols() != c.cols() {
        return Err(Error::shape(a.cols(), c.cols()));
    }
    if a.rows() != batch.anchor_labels.len() || c.rows() != batch.candidate_labels.len() {
        return Err(Error::shape("one label per row", "label count differs"));
    }
    let (a_hat, a_norm) = normalized_rows(a)?;
    let (c_hat, c_norm) = normalized_rows(c)?;
    let mut grad_a = Matrix::zeros(a.rows(), a.cols());
    let mut grad_c = Matrix::zeros(c.rows(), c.cols());
    let scale = 1.0 / a.rows() as f64;
    let mut loss = 0.0;
    for i in 0..a.rows() {
        let matches: Vec<bool> = batch
            .candidate_labels
            .iter()
            .map(|&l| l == batch.anchor_labels[i])
            .collect();
        if !matches.iter().any(|m| *m) {
            return Err(Error::NoPositive { anchor: i });
        }
        let logits: Vec<f64> = (0..c.rows())
            .map(|k| dot(a_hat.row(i), c_hat.row(k)) / tau)
            .collect();
        let (l, dlogit) = anchor_cross_entropy(&logits, &matches);
        loss += l * scale;
        for (k, d) in dlogit.iter().enumerate() {
            let w = d * scale / tau;
            for j in 0..a.cols() {
                grad_a.row_mut(i)[j] += w * c_hat.get(k, j);
                grad_c.row_mut(k)[j] += w * a_hat.get(i, j);
            }
        }
    }
    for i in 0..a.rows() {
        through_normalization(a_hat.row(i), a_norm[i], grad_a.row_mut(i));
    }
    for k in 0..c.rows() {
        through_normalization(c_hat.row(k), c_norm[k], grad_c.row_mut(k));
    }
    Ok(MpclOutput {
        loss,
        grad_anchors: grad_a,
        grad_candidates: grad_c,
    })
}

/// Within-batch MPCL: every row is an anchor scored against all other rows.
///
/// Anchors whose label is unique in the batch have no positive and are
/// skipped; the loss averages over the remaining anchors. Fails with
/// `NoPositive` only when no anchor has a positive.
pub fn mpcl_loss_in_batch(
    embeddings: &Matrix,
    labels: &[usize],
    temperature: f64,
) -> Result<(f64, Matrix)> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::shape(n, labels.len()));
    }
    let (e_hat, e_norm) = normalized_rows(embeddings)?;
    let active: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|k| k != i && labels[k] == labels[i]))
        .collect();
    if active.is_empty() {
        return Err(Error::NoPositive { anchor: 0 });
    }
    let scale = 1.0 / active.len() as f64;
    let mut grad = Matrix::zeros(n, embeddings.cols());
    let mut loss = 0.0;
    for &i in &active {
        let others: Vec<usize> = (0..n).filter(|&k| k != i).collect();
        let logits: Vec<f64> = others
            .iter()
            .map(|&k| dot(e_hat.row(i), e_hat.row(k)) / temperature)
            .collect();
        let matches: Vec<bool> = others.iter().map(|&k| labels[k] == labels[i]).collect();
        let (l, dlogit) = anchor_cross_entropy(&logits, &matches);
        loss += l * scale;
        for (&k, d) in others.iter().zip(&dlogit) {
            let w = d * scale / temperature;
            for j in 0..embeddings.cols() {
                let (ai, ak) = (e_hat.get(i, j), e_hat.get(k, j));
                grad.row_mut(i)[j] += w * ak;
                grad.row_mut(k)[j] += w * ai;
            }
        }
    }
    for i in 0..n {
        through_normalization(e_hat.row(i), e_norm[i], grad.row_mut(i));
    }
    Ok((loss, grad))
}

/// Cosine between `predicted` and a detached `target`. Only the gradient
/// with respect to `predicted` exists.
pub fn cosine_disentangle_loss(predicted: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if predicted.len() != target.len() {
        return Err(Error::shape(predicted.len(), target.len()));
    }
    let (np, nt) = (norm(predicted), norm(target));
    if !(np >= NORM_FLOOR && nt >= NORM_FLOOR) {
        return Err(Error::ZeroNorm);
    }
    let cos = dot(predicted, target) / (np * nt);
    let grad = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| t / (nt * np) - cos * p / (np * np))
        .collect();
    Ok((cos, grad))
}

/// Row-wise [`cosine_disentangle_loss`], averaged over rows.
pub fn cosine_disentangle_rows(predicted: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if predicted.shape() != target.shape() {
        return Err(Error::shape(
            format!("{:?}", target.shape()),
            format!("{:?}", predicted.shape()),
        ));
    }
    let n = predicted.rows() as f64;
    let mut grad = Matrix::zeros(predicted.rows(), predicted.cols());
    let mut total = 0.0;
    for i in 0..predicted.rows() {
        let (c, g) = cosine_disentangle_loss(predicted.row(i), target.row(i))?;
        total += c / n;
        grad.row_mut(i)
            .iter_mut()
            .zip(g)
            .for_each(|(o, v)| *o = v / n);
    }
    Ok((total, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrlSpec {
    pub lambda: f64,
}

impl Default for GrlSpec {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

/// Backward rule of the gradient reversal layer; the forward pass is identity.
pub fn grl_backward(upstream_gradient: &[f64], spec: GrlSpec) -> Vec<f64> {
    upstream_gradient.iter().map(|g| -spec.lambda * g).collect()
}

pub fn gaussian_log_density(x: f64, mean: f64, logstd: f64) -> f64 {
    let u = (x - mean) * (-logstd).exp();
    -logstd - 0.5 * u * u - HALF_LN_TWO_PI
}

/// Inputs to [`kl_term`]; all matrices are `T × d_z`.
#[derive(Clone, Copy, Debug)]
pub struct KlInputs<'a> {
    pub z: &'a Matrix,
    pub post_mean: &'a Matrix,
    pub post_logstd: &'a Matrix,
    pub z_p: &'a Matrix,
    pub flow_logdet: f64,
    pub prior_mean: &'a Matrix,
    pub prior_logstd: &'a Matrix,
}

#[derive(Clone, Debug)]
pub struct KlOutput {
    pub value: f64,
    pub grad_z: Matrix,
    pub grad_post_mean: Matrix,
    pub grad_post_logstd: Matrix,
    pub grad_z_p: Matrix,
    pub grad_logdet: f64,
    pub grad_prior_mean: Matrix,
    pub grad_prior_logstd: Matrix,
}

/// Single-sample KL estimate `log q(z) − log p(z_p) − log|det|`, averaged
/// over frames and latent dimensions.
pub fn kl_term(inp: KlInputs<'_>) -> Result<KlOutput> {
    let shape = inp.z.shape();
    for m in [inp.post_mean, inp.post_logstd, inp.z_p, inp.prior_mean, inp.prior_logstd] {
        if m.shape() != shape {
            return Err(Error::shape(format!("{shape:?}"), format!("{:?}", m.shape())));
        }
    }
    let count = (shape.0 * shape.1) as f64;
    if count == 0.0 {
        return Err(Error::EmptyInput);
    }
    let s = 1.0 / count;
    let mut value = -inp.flow_logdet;
    let mut grad_z = Matrix::zeros(shape.0, shape.1);
    let mut grad_pm = Matrix::zeros(shape.0, shape.1);
    let mut grad_pl = Matrix::zeros(shape.0, shape.1);
    let mut grad_zp = Matrix::zeros(shape.0, shape.1);
    let mut grad_qm = Matrix::zeros(shape.0, shape.1);
    let mut grad_ql = Matrix::zeros(shape.0, shape.1);
    for k in 0..inp.z.data().len() {
        let (z, m, l) = (inp.z.data()[k], inp.post_mean.data()[k], inp.post_logstd.data()[k]);
        let (zp, pm, pl) = (inp.z_p.data()[k], inp.prior_mean.data()[k], inp.prior_logstd.data()[k]);
        let inv_q = (-l).exp();
        let inv_p = (-pl).exp();
        let u = (z - m) * inv_q;
        let w = (zp - pm) * inv_p;
        value += (-l - 0.5 * u * u) - (-pl - 0.5 * w * w);
        grad_z.data_mut()[k] = -u * inv_q * s;
        grad_pm.data_mut()[k] = u * inv_q * s;
        grad_pl.data_mut()[k] = (-1.0 + u * u) * s;
        grad_zp.data_mut()[k] = w * inv_p * s;
        grad_qm.data_mut()[k] = -w * inv_p * s;
        grad_ql.data_mut()[k] = (1.0 - w * w) * s;
    }
    Ok(KlOutput {
        value: value * s,
        grad_z,
        grad_post_mean: grad_pm,
        grad_post_logstd: grad_pl,
        grad_z_p: grad_zp,
        grad_logdet: -s,
        grad_prior_mean: grad_qm,
        grad_prior_logstd: grad_ql,
    })
}

/// Mean squared error over all entries, with the gradient w.r.t. `predicted`.
pub fn reconstruction_loss(predicted: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if predicted.shape() != target.shape() {
        return Err(Error::shape(
            format!("{:?}", target.shape()),
            format!("{:?}", predicted.shape()),
        ));
    }
    let n = predicted.data().len().max(1) as f64;
    let diff = predicted.zip_map(target, |p, t| p - t);
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((value, diff.scale(2.0 / n)))
}

/// Mean softmax cross-entropy of `logits` rows against class labels.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(logits.rows(), labels.len()));
    }
    let n = logits.rows().max(1) as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::shape(format!("label < {}", logits.cols()), y));
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row, 1.0);
        loss += (lse - row[y]) / n;
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *g = (p - if j == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss, grad))
}

/// The eight objective terms, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon: f64,
    pub kl: f64,
    pub mpcl_emotion: f64,
    pub mpcl_speaker: f64,
    pub cos_emb_ge: f64,
    pub cos_emb_eg: f64,
    pub cos_content_e: f64,
    pub cos_content_g: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 8] = [
        "recon",
        "kl",
        "mpcl_emotion",
        "mpcl_speaker",
        "cos_emb_ge",
        "cos_emb_eg",
        "cos_content_e",
        "cos_content_g",
    ];

    pub fn values(&self) -> [f64; 8] {
        [
            self.recon,
            self.kl,
            self.mpcl_emotion,
            self.mpcl_speaker,
            self.cos_emb_ge,
            self.cos_emb_eg,
            self.cos_content_e,
            self.cos_content_g,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self {
            recon: v[0],
            kl: v[1],
            mpcl_emotion: v[2],
            mpcl_speaker: v[3],
            cos_emb_ge: v[4],
            cos_emb_eg: v[5],
            cos_content_e: v[6],
            cos_content_g: v[7],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub kl: f64,
    pub mpcl_emotion: f64,
    pub mpcl_speaker: f64,
    pub cos_emb_ge: f64,
    pub cos_emb_eg: f64,
    pub cos_content_e: f64,
    pub cos_content_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            kl: 1.0,
            mpcl_emotion: 1.0,
            mpcl_speaker: 1.0,
            cos_emb_ge: 1.0,
            cos_emb_eg: 1.0,
            cos_content_e: 1.0,
            cos_content_g: 1.0,
        }
    }
}

impl LossWeights {
    pub fn values(&self) -> [f64; 8] {
        [
            self.recon,
            self.kl,
            self.mpcl_emotion,
            self.mpcl_speaker,
            self.cos_emb_ge,
            self.cos_emb_eg,
            self.cos_content_e,
            self.cos_content_g,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub kl: f64,
    pub mpcl_emotion: f64,
    pub mpcl_speaker: f64,
    pub cos_emb_ge: f64,
    pub cos_emb_eg: f64,
    pub cos_content_e: f64,
    pub cos_content_g: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            recon: self.recon,
            kl: self.kl,
            mpcl_emotion: self.mpcl_emotion,
            mpcl_speaker: self.mpcl_speaker,
            cos_emb_ge: self.cos_emb_ge,
            cos_emb_eg: self.cos_emb_eg,
            cos_content_e: self.cos_content_e,
            cos_content_g: self.cos_content_g,
        }
    }
}

pub fn total_loss(parts: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    let values = parts.values();
    let mut total = 0.0;
    for ((name, v), w) in LossTerms::NAMES.iter().zip(values).zip(weights.values()) {
        if !v.is_finite() {
            return Err(Error::NonFiniteTerm(name));
        }
        total += w * v;
    }
    Ok(LossReport {
        recon: parts.recon,
        kl: parts.kl,
        mpcl_emotion: parts.mpcl_emotion,
        mpcl_speaker: parts.mpcl_speaker,
        cos_emb_ge: parts.cos_emb_ge,
        cos_emb_eg: parts.cos_emb_eg,
        cos_content_e: parts.cos_content_e,
        cos_content_g: parts.cos_content_g,
        total,
    })
}
