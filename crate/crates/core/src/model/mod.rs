//! The miniature conversion network: two reference encoders, embedding and
//! latent processors, posterior encoder, a four-block conditional affine
//! coupling flow, a content prior and a feature decoder.

mod layers;
pub mod objective;
pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use layers::{Conv1d, Dense, Graph, Gru, ParamId, Params};
pub use reference::{slice_reference, transform_reference, ReferenceTransform};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::tape::Var;
use layers::Builder;

pub const FLOW_BLOCKS: usize = 4;
/// Bound on the coupling log-scale: `s = CLAMP·tanh(pre/CLAMP)`.
pub const LOG_SCALE_CLAMP: f64 = 5.0;

/// Architecture hyper-parameters exposed in the run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub ref_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            emb_dim: 8,
            hidden: 32,
            ref_channels: vec![16, 16, 32, 32, 32, 32],
        }
    }
}

/// Full set of sizes needed to lay out the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub emotion_input_dim: usize,
    pub n_speakers: usize,
    pub n_emotions: usize,
    pub n_tokens: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.latent_dim == 0 || c.latent_dim % 2 != 0 {
            return Err(Error::Config(format!("latent_dim must be even and positive, got {}", c.latent_dim)));
        }
        if c.ref_channels.len() != 6 {
            return Err(Error::Config(format!(
                "reference encoder needs 6 conv widths, got {}",
                c.ref_channels.len()
            )));
        }
        if c.emb_dim == 0 || c.hidden == 0 || c.ref_channels.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.feature_dim == 0 || self.emotion_input_dim == 0 || self.n_tokens == 0 {
            return Err(Error::Config("feature_dim, emotion_input_dim and n_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RefEncoder {
    pub convs: Vec<Conv1d>,
    pub gru: Gru,
    pub proj: Dense,
}

impl RefEncoder {
    fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, input: usize, dims: &ModelDims) -> Self {
        let c = &dims.config;
        b.scoped(name, |b| {
            let mut width = input;
            let convs = c
                .ref_channels
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let conv = Conv1d::new(b, &format!("conv{i}"), width, w, 2);
                    width = w;
                    conv
                })
                .collect();
            RefEncoder {
                convs,
                gru: Gru::new(b, "gru", width, c.hidden),
                proj: Dense::new(b, "proj", c.hidden, c.emb_dim),
            }
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(g, h);
            h = g.tape.relu(h);
        }
        let last = self.gru.last_state(g, h);
        self.proj.forward(g, last)
    }
}

/// Three dense layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct LinearProcessor {
    pub layers: [Dense; 3],
}

impl LinearProcessor {
    fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dims: &ModelDims) -> Self {
        let (d, h) = (dims.config.emb_dim, dims.config.hidden);
        b.scoped(name, |b| LinearProcessor {
            layers: [
                Dense::new(b, "l0", d, h),
                Dense::new(b, "l1", h, h),
                Dense::new(b, "l2", h, d),
            ],
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.layers[0].forward(g, x);
        let h = g.tape.relu(h);
        let h = self.layers[1].forward(g, h);
        let h = g.tape.relu(h);
        self.layers[2].forward(g, h)
    }
}

/// Three temporal convolutions with ReLU, then mean pooling over frames.
#[derive(Clone, Debug)]
pub struct ConvProcessor {
    pub convs: [Conv1d; 3],
}

impl ConvProcessor {
    fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dims: &ModelDims) -> Self {
        let c = &dims.config;
        b.scoped(name, |b| ConvProcessor {
            convs: [
                Conv1d::new(b, "c0", c.latent_dim, c.hidden, 1),
                Conv1d::new(b, "c1", c.hidden, c.hidden, 1),
                Conv1d::new(b, "c2", c.hidden, c.emb_dim, 1),
            ],
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.convs[0].forward(g, x);
        let h = g.tape.relu(h);
        let h = self.convs[1].forward(g, h);
        let h = g.tape.relu(h);
        let h = self.convs[2].forward(g, h);
        g.tape.mean_rows(h)
    }
}

/// Frame-wise network conditioned on `[g; e]`: conv → +cond → ReLU → conv → ReLU → dense.
#[derive(Clone, Debug)]
pub struct CondNet {
    pub conv_in: Conv1d,
    pub cond: Dense,
    pub conv_mid: Conv1d,
    pub out: Dense,
}

impl CondNet {
    fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        input: usize,
        output: usize,
        dims: &ModelDims,
        zero_out: bool,
    ) -> Self {
        let c = &dims.config;
        b.scoped(name, |b| CondNet {
            conv_in: Conv1d::new(b, "conv_in", input, c.hidden, 1),
            cond: Dense::new(b, "cond", 2 * c.emb_dim, c.hidden),
            conv_mid: Conv1d::new(b, "conv_mid", c.hidden, c.hidden, 1),
            out: if zero_out {
                Dense::zeroed(b, "out", c.hidden, output)
            } else {
                Dense::new(b, "out", c.hidden, output)
            },
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, cond: Var) -> Var {
        let h = self.conv_in.forward(g, x);
        let c = self.cond.forward(g, cond);
        let h = g.tape.add_row(h, c);
        let h = g.tape.relu(h);
        let h = self.conv_mid.forward(g, h);
        let h = g.tape.relu(h);
        self.out.forward(g, h)
    }
}

/// Affine coupling: one half of the latent channels is scaled and shifted by
/// a network of the other half and the conditioning.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    pub net: CondNet,
    /// When true the second half is transformed and the first half conditions.
    pub transform_second: bool,
    pub half: usize,
}

impl CouplingBlock {
    fn halves(&self, g: &mut Graph<'_>, x: Var) -> (Var, Var) {
        let d = 2 * self.half;
        let first = g.tape.slice_cols(x, 0, self.half);
        let second = g.tape.slice_cols(x, self.half, d);
        if self.transform_second {
            (first, second)
        } else {
            (second, first)
        }
    }

    fn join(&self, g: &mut Graph<'_>, kept: Var, changed: Var) -> Var {
        if self.transform_second {
            g.tape.concat_cols(&[kept, changed])
        } else {
            g.tape.concat_cols(&[changed, kept])
        }
    }

    fn scale_shift(&self, g: &mut Graph<'_>, kept: Var, cond: Var) -> (Var, Var) {
        let out = self.net.forward(g, kept, cond);
        let pre = g.tape.slice_cols(out, 0, self.half);
        let shift = g.tape.slice_cols(out, self.half, 2 * self.half);
        let s = g.tape.affine(pre, 1.0 / LOG_SCALE_CLAMP, 0.0);
        let s = g.tape.tanh(s);
        let log_scale = g.tape.affine(s, LOG_SCALE_CLAMP, 0.0);
        (log_scale, shift)
    }

    /// Returns the transformed latent and this block's log-determinant (1×1).
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, cond: Var) -> (Var, Var) {
        let (kept, moving) = self.halves(g, x);
        let (log_scale, shift) = self.scale_shift(g, kept, cond);
        let scale = g.tape.exp(log_scale);
        let y = g.tape.mul(moving, scale);
        let y = g.tape.add(y, shift);
        let logdet = g.tape.sum_all(log_scale);
        (self.join(g, kept, y), logdet)
    }

    /// Inverse map and its log-determinant (1×1).
    pub fn inverse(&self, g: &mut Graph<'_>, y: Var, cond: Var) -> (Var, Var) {
        let (kept, moving) = self.halves(g, y);
        let (log_scale, shift) = self.scale_shift(g, kept, cond);
        let neg = g.tape.affine(log_scale, -1.0, 0.0);
        let inv_scale = g.tape.exp(neg);
        let x = g.tape.sub(moving, shift);
        let x = g.tape.mul(x, inv_scale);
        let logdet = g.tape.sum_all(neg);
        (self.join(g, kept, x), logdet)
    }
}

/// Classifier heads used by the cross-entropy ablations.
#[derive(Clone, Debug)]
pub struct Heads {
    pub speaker_from_g: Dense,
    pub emotion_from_e: Dense,
    pub adv_emotion_from_g: Dense,
    pub adv_speaker_from_e: Dense,
    pub adv_speaker_from_zp: Dense,
    pub adv_emotion_from_zp: Dense,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub speaker_encoder: RefEncoder,
    pub emotion_encoder: RefEncoder,
    /// Processes `g`, predicts `e`.
    pub linear_proc_g: LinearProcessor,
    /// Processes `e`, predicts `g`.
    pub linear_proc_e: LinearProcessor,
    /// Processes `z_p`, predicts `g`.
    pub conv_proc_g: ConvProcessor,
    /// Processes `z_p`, predicts `e`.
    pub conv_proc_e: ConvProcessor,
    pub posterior: CondNet,
    pub flow: Vec<CouplingBlock>,
    pub decoder: CondNet,
    pub prior: [Dense; 2],
    pub heads: Heads,
}

impl Network {
    fn build<R: Rng>(b: &mut Builder<'_, R>, dims: &ModelDims) -> Self {
        let c = &dims.config;
        let d = c.emb_dim;
        let speaker_encoder = RefEncoder::new(b, "speaker_encoder", dims.feature_dim, dims);
        let emotion_encoder = RefEncoder::new(b, "emotion_encoder", dims.emotion_input_dim, dims);
        let linear_proc_g = LinearProcessor::new(b, "linear_proc_g", dims);
        let linear_proc_e = LinearProcessor::new(b, "linear_proc_e", dims);
        let conv_proc_g = ConvProcessor::new(b, "conv_proc_g", dims);
        let conv_proc_e = ConvProcessor::new(b, "conv_proc_e", dims);
        let posterior = CondNet::new(b, "posterior", dims.feature_dim, 2 * c.latent_dim, dims, false);
        let half = c.latent_dim / 2;
        let flow = (0..FLOW_BLOCKS)
            .map(|i| CouplingBlock {
                net: CondNet::new(b, &format!("flow{i}"), half, 2 * half, dims, true),
                transform_second: i % 2 == 0,
                half,
            })
            .collect();
        let decoder = CondNet::new(b, "decoder", c.latent_dim, dims.feature_dim, dims, false);
        let prior = b.scoped("prior", |b| {
            [
                Dense::new(b, "l0", dims.n_tokens, c.hidden),
                Dense::new(b, "l1", c.hidden, 2 * c.latent_dim),
            ]
        });
        let heads = b.scoped("heads", |b| Heads {
            speaker_from_g: Dense::new(b, "speaker_from_g", d, dims.n_speakers),
            emotion_from_e: Dense::new(b, "emotion_from_e", d, dims.n_emotions),
            adv_emotion_from_g: Dense::new(b, "adv_emotion_from_g", d, dims.n_emotions),
            adv_speaker_from_e: Dense::new(b, "adv_speaker_from_e", d, dims.n_speakers),
            adv_speaker_from_zp: Dense::new(b, "adv_speaker_from_zp", d, dims.n_speakers),
            adv_emotion_from_zp: Dense::new(b, "adv_emotion_from_zp", d, dims.n_emotions),
        });
        Network {
            speaker_encoder,
            emotion_encoder,
            linear_proc_g,
            linear_proc_e,
            conv_proc_g,
            conv_proc_e,
            posterior,
            flow,
            decoder,
            prior,
            heads,
        }
    }

    pub(crate) fn condition(g: &mut Graph<'_>, spk: Var, emo: Var) -> Var {
        g.tape.concat_cols(&[spk, emo])
    }

    /// `(z, mean, logstd)` with `z = mean + exp(logstd) ⊙ eps`.
    pub(crate) fn posterior(&self, g: &mut Graph<'_>, x: Var, cond: Var, eps: Var) -> (Var, Var, Var) {
        let d = g.value(eps).cols();
        let out = self.posterior.forward(g, x, cond);
        let mean = g.tape.slice_cols(out, 0, d);
        let logstd = g.tape.slice_cols(out, d, 2 * d);
        let std = g.tape.exp(logstd);
        let noise = g.tape.mul(std, eps);
        let z = g.tape.add(mean, noise);
        (z, mean, logstd)
    }

    /// Applies every coupling block; returns each block's output and logdet.
    pub(crate) fn flow_forward(&self, g: &mut Graph<'_>, z: Var, cond: Var) -> Vec<(Var, Var)> {
        let mut x = z;
        self.flow
            .iter()
            .map(|block| {
                let (y, ld) = block.forward(g, x, cond);
                x = y;
                (y, ld)
            })
            .collect()
    }

    /// Inverse blocks in reverse order; returns each intermediate output.
    pub(crate) fn flow_inverse(&self, g: &mut Graph<'_>, z_p: Var, cond: Var) -> Vec<(Var, Var)> {
        let mut x = z_p;
        self.flow
            .iter()
            .rev()
            .map(|block| {
                let (y, ld) = block.inverse(g, x, cond);
                x = y;
                (y, ld)
            })
            .collect()
    }

    /// `(mean, logstd)` of the content prior from one-hot tokens.
    pub(crate) fn prior(&self, g: &mut Graph<'_>, tokens: Var, latent: usize) -> (Var, Var) {
        let h = self.prior[0].forward(g, tokens);
        let h = g.tape.relu(h);
        let out = self.prior[1].forward(g, h);
        let mean = g.tape.slice_cols(out, 0, latent);
        let logstd = g.tape.slice_cols(out, latent, 2 * latent);
        (mean, logstd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoder {
    Speaker,
    Emotion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub z: Matrix,
    pub mean: Matrix,
    pub logstd: Matrix,
}

/// All trainable parameters plus the layout that names them.
#[derive(Clone, Debug)]
pub struct ModelState {
    dims: ModelDims,
    net: Network,
    params: Params,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.params == other.params
    }
}

impl ModelState {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut rng);
        let net = Network::build(&mut b, &dims);
        Ok(Self {
            dims,
            net,
            params: b.params,
        })
    }

    /// Rebuilds the layout for `dims` and installs `values` in layout order.
    pub fn from_values(dims: ModelDims, values: Vec<Matrix>) -> Result<Self> {
        let mut state = Self::init(dims, 0)?;
        if values.len() != state.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                state.params.len(),
                values.len()
            )));
        }
        for (i, (slot, v)) in state.params.values_mut().iter_mut().zip(values).enumerate() {
            if slot.shape() != v.shape() {
                return Err(Error::Format(format!(
                    "parameter {i} has shape {:?}, layout expects {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            *slot = v;
        }
        Ok(state)
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.dims.config.latent_dim
    }

    pub fn emb_dim(&self) -> usize {
        self.dims.config.emb_dim
    }

    fn eval_graph(&self) -> Graph<'_> {
        Graph::new(&self.params, false)
    }

    fn check_width(&self, m: &Matrix, width: usize) -> Result<()> {
        if m.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        if m.cols() != width {
            return Err(Error::shape(format!("{width} columns"), m.cols()));
        }
        Ok(())
    }

    fn check_emb(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.emb_dim() {
            return Err(Error::shape(self.emb_dim(), v.len()));
        }
        Ok(())
    }

    fn cond_vars(&self, g: &mut Graph<'_>, spk: &[f64], emo: &[f64]) -> Result<Var> {
        self.check_emb(spk)?;
        self.check_emb(emo)?;
        let s = g.input(Matrix::row_vector(spk));
        let e = g.input(Matrix::row_vector(emo));
        Ok(Network::condition(g, s, e))
    }

    /// Fixed-length embedding of an (already sliced/transformed) reference.
    pub fn reference_encode(&self, which: Encoder, reference: &Matrix) -> Result<Vec<f64>> {
        let (enc, width) = match which {
            Encoder::Speaker => (&self.net.speaker_encoder, self.dims.feature_dim),
            Encoder::Emotion => (&self.net.emotion_encoder, self.dims.emotion_input_dim),
        };
        self.check_width(reference, width)?;
        let mut g = self.eval_graph();
        let x = g.input(reference.clone());
        let out = enc.forward(&mut g, x);
        let v = g.value(out).data().to_vec();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("reference encoder"));
        }
        Ok(v)
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, frames: usize, rng: &mut R) -> Matrix {
        Matrix::from_fn(frames, self.latent_dim(), |_, _| rng.sample(StandardNormal))
    }

    /// Posterior sample with explicit standard-normal noise `eps`.
    pub fn posterior_with_noise(&self, features: &Matrix, spk: &[f64], emo: &[f64], eps: &Matrix) -> Result<Posterior> {
        self.check_width(features, self.dims.feature_dim)?;
        if eps.shape() != (features.rows(), self.latent_dim()) {
            return Err(Error::shape(
                format!("noise {}x{}", features.rows(), self.latent_dim()),
                format!("{:?}", eps.shape()),
            ));
        }
        let mut g = self.eval_graph();
        let cond = self.cond_vars(&mut g, spk, emo)?;
        let x = g.input(features.clone());
        let eps = g.input(eps.clone());
        let (z, mean, logstd) = self.net.posterior(&mut g, x, cond, eps);
        Ok(Posterior {
            z: g.value(z).clone(),
            mean: g.value(mean).clone(),
            logstd: g.value(logstd).clone(),
        })
    }

    pub fn posterior_encode<R: Rng + ?Sized>(
        &self,
        features: &Matrix,
        spk: &[f64],
        emo: &[f64],
        rng: &mut R,
    ) -> Result<Posterior> {
        self.check_width(features, self.dims.feature_dim)?;
        let eps = self.draw_noise(features.rows(), rng);
        self.posterior_with_noise(features, spk, emo, &eps)
    }

    fn check_latent(&self, z: &Matrix) -> Result<()> {
        self.check_width(z, self.latent_dim())
    }

    /// Output and log-determinant after each forward block.
    pub fn flow_forward_steps(&self, z: &Matrix, spk: &[f64], emo: &[f64]) -> Result<Vec<(Matrix, f64)>> {
        self.check_latent(z)?;
        let mut g = self.eval_graph();
        let cond = self.cond_vars(&mut g, spk, emo)?;
        let x = g.input(z.clone());
        let steps = self.net.flow_forward(&mut g, x, cond);
        let out: Vec<(Matrix, f64)> = steps
            .iter()
            .map(|(y, ld)| (g.value(*y).clone(), g.tape.scalar(*ld)))
            .collect();
        if out.iter().any(|(m, ld)| !m.is_finite() || !ld.is_finite()) {
            return Err(Error::NonFinite("flow forward"));
        }
        Ok(out)
    }

    pub fn flow_forward(&self, z: &Matrix, spk: &[f64], emo: &[f64]) -> Result<(Matrix, f64)> {
        let steps = self.flow_forward_steps(z, spk, emo)?;
        let logdet = steps.iter().map(|(_, ld)| ld).sum();
        let z_p = steps.into_iter().last().map(|(m, _)| m).expect("at least one block");
        Ok((z_p, logdet))
    }

    /// Output after each inverse block, last block first.
    pub fn flow_inverse_steps(&self, z_p: &Matrix, spk: &[f64], emo: &[f64]) -> Result<Vec<(Matrix, f64)>> {
        self.check_latent(z_p)?;
        let mut g = self.eval_graph();
        let cond = self.cond_vars(&mut g, spk, emo)?;
        let x = g.input(z_p.clone());
        let steps = self.net.flow_inverse(&mut g, x, cond);
        let out: Vec<(Matrix, f64)> = steps
            .iter()
            .map(|(y, ld)| (g.value(*y).clone(), g.tape.scalar(*ld)))
            .collect();
        if out.iter().any(|(m, ld)| !m.is_finite() || !ld.is_finite()) {
            return Err(Error::NonFinite("flow inverse"));
        }
        Ok(out)
    }

    /// Inverse map and its log-determinant.
    pub fn flow_inverse_with_logdet(&self, z_p: &Matrix, spk: &[f64], emo: &[f64]) -> Result<(Matrix, f64)> {
        let steps = self.flow_inverse_steps(z_p, spk, emo)?;
        let logdet = steps.iter().map(|(_, ld)| ld).sum();
        let z = steps.into_iter().last().map(|(m, _)| m).expect("at least one block");
        Ok((z, logdet))
    }

    pub fn flow_inverse(&self, z_p: &Matrix, spk: &[f64], emo: &[f64]) -> Result<Matrix> {
        Ok(self.flow_inverse_with_logdet(z_p, spk, emo)?.0)
    }

    pub fn decode(&self, z: &Matrix, spk: &[f64], emo: &[f64]) -> Result<Matrix> {
        self.check_latent(z)?;
        let mut g = self.eval_graph();
        let cond = self.cond_vars(&mut g, spk, emo)?;
        let x = g.input(z.clone());
        let y = self.net.decoder.forward(&mut g, x, cond);
        Ok(g.value(y).clone())
    }

    /// Posterior sample decoded under the same conditioning.
    pub fn reconstruct<R: Rng + ?Sized>(&self, features: &Matrix, spk: &[f64], emo: &[f64], rng: &mut R) -> Result<Matrix> {
        let post = self.posterior_encode(features, spk, emo, rng)?;
        self.decode(&post.z, spk, emo)
    }

    /// Posterior → forward flow under the source conditioning → inverse flow
    /// under the target conditioning → decoder.
    ///
    /// When source and target conditioning coincide the flow round trip is
    /// the identity and is skipped, so the result equals [`Self::reconstruct`]
    /// bit for bit.
    #[allow(clippy::too_many_arguments)]
    pub fn voice_convert<R: Rng + ?Sized>(
        &self,
        source: &Matrix,
        g_src: &[f64],
        e_src: &[f64],
        g_tgt: &[f64],
        e_tgt: &[f64],
        rng: &mut R,
    ) -> Result<Matrix> {
        let post = self.posterior_encode(source, g_src, e_src, rng)?;
        let z_hat = if g_src == g_tgt && e_src == e_tgt {
            post.z
        } else {
            let (z_p, _) = self.flow_forward(&post.z, g_src, e_src)?;
            self.flow_inverse(&z_p, g_tgt, e_tgt)?
        };
        self.decode(&z_hat, g_tgt, e_tgt)
    }

    /// Content prior `(mean, logstd)` for a token sequence.
    pub fn prior(&self, tokens: &[usize]) -> Result<(Matrix, Matrix)> {
        let one_hot = one_hot(tokens, self.dims.n_tokens)?;
        let mut g = self.eval_graph();
        let x = g.input(one_hot);
        let (m, l) = self.net.prior(&mut g, x, self.latent_dim());
        Ok((g.value(m).clone(), g.value(l).clone()))
    }
}

pub fn one_hot(tokens: &[usize], n: usize) -> Result<Matrix> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut m = Matrix::zeros(tokens.len(), n);
    for (i, &t) in tokens.iter().enumerate() {
        if t >= n {
            return Err(Error::shape(format!("token < {n}"), t));
        }
        m.set(i, t, 1.0);
    }
    Ok(m)
}
