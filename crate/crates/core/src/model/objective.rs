//! The full training objective on a prepared batch, with exact gradients for
//! every parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::reference::{slice_reference, transform_reference, ReferenceTransform};
use super::{one_hot, Graph, ModelState, Network};
use crate::error::{Error, Result};
use crate::losses::{
    cosine_disentangle_rows, cross_entropy, kl_term, mpcl_loss_in_batch, reconstruction_loss,
    total_loss, KlInputs, LossReport, LossTerms, LossWeights,
};
use crate::numerics::{dot, grad_check, l2_normalize, GradCheckReport, Matrix};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderLoss {
    #[default]
    Mpcl,
    Ce,
}

impl EncoderLoss {
    pub const ALL: [EncoderLoss; 2] = [EncoderLoss::Mpcl, EncoderLoss::Ce];

    pub fn name(self) -> &'static str {
        match self {
            EncoderLoss::Mpcl => "mpcl",
            EncoderLoss::Ce => "ce",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrlMode {
    None,
    Ce,
    #[default]
    Cosine,
}

impl GrlMode {
    pub const ALL: [GrlMode; 3] = [GrlMode::None, GrlMode::Ce, GrlMode::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            GrlMode::None => "none",
            GrlMode::Ce => "ce",
            GrlMode::Cosine => "cosine",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub encoder_loss: EncoderLoss,
    pub grl_mode: GrlMode,
    pub grl_lambda: f64,
    pub temperature: f64,
    pub weights: LossWeights,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            encoder_loss: EncoderLoss::Mpcl,
            grl_mode: GrlMode::Cosine,
            grl_lambda: 1.0,
            temperature: 0.1,
            weights: LossWeights::default(),
        }
    }
}

/// One batch element with all randomness already drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedItem {
    pub target: Matrix,
    pub speaker_ref: Matrix,
    pub emotion_ref: Matrix,
    pub tokens: Vec<usize>,
    pub speaker: usize,
    pub emotion: usize,
    pub eps: Matrix,
}

/// Raw (unsliced) batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub target: Matrix,
    pub speaker_ref: Matrix,
    pub emotion_ref: Matrix,
    pub tokens: Vec<usize>,
    pub speaker: usize,
    pub emotion: usize,
}

/// Slices both references, transforms the emotion reference and draws the
/// posterior noise.
pub fn prepare_item<R: Rng + ?Sized>(
    state: &ModelState,
    item: &BatchItem,
    transform: ReferenceTransform,
    rng: &mut R,
) -> Result<PreparedItem> {
    let speaker_ref = slice_reference(&item.speaker_ref, rng)?;
    let emotion_ref = slice_reference(&item.emotion_ref, rng)?;
    let emotion_ref = transform_reference(&emotion_ref, transform, rng)?;
    let eps = state.draw_noise(item.target.rows(), rng);
    Ok(PreparedItem {
        target: item.target.clone(),
        speaker_ref,
        emotion_ref,
        tokens: item.tokens.clone(),
        speaker: item.speaker,
        emotion: item.emotion,
        eps,
    })
}

#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    pub report: LossReport,
    /// One gradient per parameter, aligned with [`ModelState::params`].
    pub grads: Option<Vec<Matrix>>,
    pub speaker_embeddings: Matrix,
    pub emotion_embeddings: Matrix,
}

fn add_cosine(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (v, grad) = cosine_disentangle_rows(tape.value(pred), tape.value(target))?;
    Ok(tape.scalar_node(v, vec![(pred, grad)]))
}

fn add_ce(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (v, grad) = cross_entropy(tape.value(logits), labels)?;
    Ok(tape.scalar_node(v, vec![(logits, grad)]))
}

/// Within-batch MPCL; a batch in which no anchor has a positive contributes zero.
fn add_mpcl(tape: &mut Tape, emb: Var, labels: &[usize], tau: f64) -> Result<Var> {
    match mpcl_loss_in_batch(tape.value(emb), labels, tau) {
        Ok((v, grad)) => Ok(tape.scalar_node(v, vec![(emb, grad)])),
        Err(Error::NoPositive { .. }) => Ok(tape.scalar_node(0.0, Vec::new())),
        Err(e) => Err(e),
    }
}

/// Evaluates every term of the objective on `items`; with `with_grads` also
/// back-propagates the weighted total.
pub fn evaluate_objective(
    state: &ModelState,
    items: &[PreparedItem],
    cfg: &ObjectiveConfig,
    with_grads: bool,
) -> Result<ObjectiveOutput> {
    if items.is_empty() {
        return Err(Error::EmptyInput);
    }
    let net: &Network = state.net();
    let latent = state.latent_dim();
    let mut g = Graph::new(state.params(), with_grads);
    let spk_labels: Vec<usize> = items.iter().map(|i| i.speaker).collect();
    let emo_labels: Vec<usize> = items.iter().map(|i| i.emotion).collect();

    let mut g_rows = Vec::with_capacity(items.len());
    let mut e_rows = Vec::with_capacity(items.len());
    for item in items {
        let s = g.input(item.speaker_ref.clone());
        let e = g.input(item.emotion_ref.clone());
        g_rows.push(net.speaker_encoder.forward(&mut g, s));
        e_rows.push(net.emotion_encoder.forward(&mut g, e));
    }
    let g_all = g.tape.concat_rows(&g_rows);
    let e_all = g.tape.concat_rows(&e_rows);

    let (mpcl_emotion, mpcl_speaker) = match cfg.encoder_loss {
        EncoderLoss::Mpcl => (
            add_mpcl(&mut g.tape, e_all, &emo_labels, cfg.temperature)?,
            add_mpcl(&mut g.tape, g_all, &spk_labels, cfg.temperature)?,
        ),
        EncoderLoss::Ce => {
            let le = net.heads.emotion_from_e.forward(&mut g, e_all);
            let ls = net.heads.speaker_from_g.forward(&mut g, g_all);
            (add_ce(&mut g.tape, le, &emo_labels)?, add_ce(&mut g.tape, ls, &spk_labels)?)
        }
    };

    let inv_b = 1.0 / items.len() as f64;
    let mut recon_terms = Vec::with_capacity(items.len());
    let mut kl_terms = Vec::with_capacity(items.len());
    let mut zp_rows = Vec::with_capacity(items.len());
    for (k, item) in items.iter().enumerate() {
        let cond = Network::condition(&mut g, g_rows[k], e_rows[k]);
        let x = g.input(item.target.clone());
        let eps = g.input(item.eps.clone());
        let (z, mean, logstd) = net.posterior(&mut g, x, cond, eps);
        let steps = net.flow_forward(&mut g, z, cond);
        let z_p = steps.last().expect("flow has blocks").0;
        let lds: Vec<(Var, f64)> = steps.iter().map(|(_, ld)| (*ld, 1.0)).collect();
        let logdet = g.tape.weighted_sum(&lds);
        let tokens = g.input(one_hot(&item.tokens, state.dims().n_tokens)?);
        let (pm, pl) = net.prior(&mut g, tokens, latent);
        let kl = {
            let t = &g.tape;
            kl_term(KlInputs {
                z: t.value(z),
                post_mean: t.value(mean),
                post_logstd: t.value(logstd),
                z_p: t.value(z_p),
                flow_logdet: t.scalar(logdet),
                prior_mean: t.value(pm),
                prior_logstd: t.value(pl),
            })?
        };
        let kl_node = g.tape.scalar_node(
            kl.value,
            vec![
                (z, kl.grad_z),
                (mean, kl.grad_post_mean),
                (logstd, kl.grad_post_logstd),
                (z_p, kl.grad_z_p),
                (logdet, Matrix::filled(1, 1, kl.grad_logdet)),
                (pm, kl.grad_prior_mean),
                (pl, kl.grad_prior_logstd),
            ],
        );
        kl_terms.push((kl_node, inv_b));
        let y = net.decoder.forward(&mut g, z, cond);
        let (rv, rg) = reconstruction_loss(g.value(y), &item.target)?;
        let r_node = g.tape.scalar_node(rv, vec![(y, rg)]);
        recon_terms.push((r_node, inv_b));
        if cfg.grl_mode != GrlMode::None {
            zp_rows.push(g.tape.grl(z_p, cfg.grl_lambda));
        }
    }
    let recon = g.tape.weighted_sum(&recon_terms);
    let kl = g.tape.weighted_sum(&kl_terms);

    let zero = |g: &mut Graph<'_>| g.tape.scalar_node(0.0, Vec::new());
    let (cos_ge, cos_eg, cos_ce, cos_cg) = match cfg.grl_mode {
        GrlMode::None => (zero(&mut g), zero(&mut g), zero(&mut g), zero(&mut g)),
        GrlMode::Cosine => {
            let g_rev = g.tape.grl(g_all, cfg.grl_lambda);
            let e_rev = g.tape.grl(e_all, cfg.grl_lambda);
            let g_const = g.tape.detach(g_all);
            let e_const = g.tape.detach(e_all);
            let pred_e = net.linear_proc_g.forward(&mut g, g_rev);
            let pred_g = net.linear_proc_e.forward(&mut g, e_rev);
            let ge = add_cosine(&mut g.tape, pred_e, e_const)?;
            let eg = add_cosine(&mut g.tape, pred_g, g_const)?;
            let mut pe = Vec::with_capacity(zp_rows.len());
            let mut pg = Vec::with_capacity(zp_rows.len());
            for &zp in &zp_rows {
                pe.push(net.conv_proc_e.forward(&mut g, zp));
                pg.push(net.conv_proc_g.forward(&mut g, zp));
            }
            let pe = g.tape.concat_rows(&pe);
            let pg = g.tape.concat_rows(&pg);
            let ce = add_cosine(&mut g.tape, pe, e_const)?;
            let cg = add_cosine(&mut g.tape, pg, g_const)?;
            (ge, eg, ce, cg)
        }
        GrlMode::Ce => {
            let g_rev = g.tape.grl(g_all, cfg.grl_lambda);
            let e_rev = g.tape.grl(e_all, cfg.grl_lambda);
            let h = net.linear_proc_g.forward(&mut g, g_rev);
            let logits = net.heads.adv_emotion_from_g.forward(&mut g, h);
            let ge = add_ce(&mut g.tape, logits, &emo_labels)?;
            let h = net.linear_proc_e.forward(&mut g, e_rev);
            let logits = net.heads.adv_speaker_from_e.forward(&mut g, h);
            let eg = add_ce(&mut g.tape, logits, &spk_labels)?;
            let mut pe = Vec::with_capacity(zp_rows.len());
            let mut pg = Vec::with_capacity(zp_rows.len());
            for &zp in &zp_rows {
                pe.push(net.conv_proc_e.forward(&mut g, zp));
                pg.push(net.conv_proc_g.forward(&mut g, zp));
            }
            let pe = g.tape.concat_rows(&pe);
            let pg = g.tape.concat_rows(&pg);
            let le = net.heads.adv_emotion_from_zp.forward(&mut g, pe);
            let lg = net.heads.adv_speaker_from_zp.forward(&mut g, pg);
            let ce = add_ce(&mut g.tape, le, &emo_labels)?;
            let cg = add_ce(&mut g.tape, lg, &spk_labels)?;
            (ge, eg, ce, cg)
        }
    };

    let nodes = [recon, kl, mpcl_emotion, mpcl_speaker, cos_ge, cos_eg, cos_ce, cos_cg];
    let mut values = [0.0; 8];
    for (v, n) in values.iter_mut().zip(nodes) {
        *v = g.tape.scalar(n);
    }
    let report = total_loss(&LossTerms::from_values(values), &cfg.weights)?;
    let grads = if with_grads {
        let weighted: Vec<(Var, f64)> = nodes.iter().copied().zip(cfg.weights.values()).collect();
        let total = g.tape.weighted_sum(&weighted);
        let mut tape_grads = g.tape.backward(total);
        Some(g.param_grads(&mut tape_grads))
    } else {
        None
    };
    Ok(ObjectiveOutput {
        report,
        grads,
        speaker_embeddings: g.value(g_all).clone(),
        emotion_embeddings: g.value(e_all).clone(),
    })
}

/// Gradient check of [`evaluate_objective`] for the parameters whose names
/// start with `group`, along `dirs` random unit directions of that group's
/// parameter space. Individual coordinates can carry gradients below the
/// float64 differencing floor; projections onto random directions do not.
///
/// Gradient reversal and detached cosine targets make the analytic gradient
/// differ from the derivative of the scalar on purpose; set `grl_lambda` to
/// -1 and disable the cosine terms when checking groups upstream of them.
pub fn objective_grad_check(
    state: &ModelState,
    items: &[PreparedItem],
    cfg: &ObjectiveConfig,
    group: &str,
    dirs: usize,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let ids = state.params().group(group);
    if ids.is_empty() || dirs == 0 {
        return Err(Error::EmptyInput);
    }
    let n: usize = ids.iter().map(|id| state.params().get(*id).data().len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis = Vec::with_capacity(dirs);
    for _ in 0..dirs {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        basis.push(l2_normalize(&v)?);
    }
    let f = |c: &[f64]| {
        let mut s = state.clone();
        let mut off = 0;
        for id in &ids {
            let m = s.params_mut().get_mut(*id);
            for (k, v) in m.data_mut().iter_mut().enumerate() {
                *v += basis.iter().zip(c).map(|(b, ci)| ci * b[off + k]).sum::<f64>();
            }
            off += m.data().len();
        }
        let out = evaluate_objective(&s, items, cfg, true)?;
        let grads = out.grads.expect("requested gradients");
        let flat: Vec<f64> = ids.iter().flat_map(|id| grads[id.index()].data().iter().copied()).collect();
        Ok((out.report.total, basis.iter().map(|b| dot(b, &flat)).collect()))
    };
    grad_check(f, &vec![0.0; dirs], step)
}
