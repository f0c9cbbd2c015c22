//! The full training objective: NT-Xent components on OT-realigned
//! similarity matrices, reliability modulation by knowledge potentials,
//! analytic reverse-mode gradients, and the out-of-batch influence (OBI)
//! diagnostic.
//!
//! Retrieval index sets, transport plans, reliability weights, and the
//! potential partner vectors are stop-gradient constants, captured once per
//! batch in a [`BatchContext`]. The differentiable evaluation then runs on
//! raw vector views so the same function can be probed with finite
//! differences; gradients flow through injection (including
//! re-normalization), the similarity matrices, the fixed-plan realignment,
//! NT-Xent, and the anchor side of the potentials' exponential terms.
//! Knowledge entries therefore receive gradient only through the injection
//! pathway, whose per-neighbor Jacobian is the constant (1 - rho) / K
//! before re-normalization.

use crate::error::{Error, Result};
use crate::kb::{top_k, CoarseKB, FineKB, Side};
use crate::math::{dot, l2_normalize, SimMatrix, UnitVector};
use crate::ot::{mixing_row, realign, sinkhorn, TransportPlan};
use crate::reliability::{consistency_scores, reliability_weights};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    Baseline,
    Ask,
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossVariant::Baseline => write!(f, "baseline"),
            LossVariant::Ask => write!(f, "ask"),
        }
    }
}

/// Knobs of the knowledge-enhanced objective. `rho = 1`, `beta = 0`,
/// `lambda_f = lambda_c = 0` disables every mechanism and reduces the loss
/// to the plain contrastive baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AskConfig {
    pub k: usize,
    pub rho: f64,
    pub beta: f64,
    pub lambda_f: f64,
    pub lambda_c: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub sinkhorn_max_iters: usize,
    pub sinkhorn_tol: f64,
    pub renormalize_enhanced: bool,
    /// Rescale the transport plan to row-stochastic form before mixing.
    pub rescale_plan: bool,
}

impl Default for AskConfig {
    fn default() -> Self {
        Self {
            k: 10,
            rho: 0.2,
            beta: 0.2,
            lambda_f: 0.2,
            lambda_c: 0.3,
            tau: 0.07,
            epsilon: 0.05,
            sinkhorn_max_iters: 200,
            sinkhorn_tol: 1e-6,
            renormalize_enhanced: true,
            rescale_plan: true,
        }
    }
}

impl AskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::RhoOutOfRange(self.rho));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::BetaOutOfRange(self.beta));
        }
        if self.tau <= 0.0 {
            return Err(Error::NonPositiveTau(self.tau));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::NonPositiveEpsilon(self.epsilon));
        }
        if self.lambda_f < 0.0 || self.lambda_c < 0.0 {
            return Err(Error::Config("lambda weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Every term of the composite loss.
#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub l_t2a: f64,
    pub l_a2t: f64,
    pub f_f_t2a: f64,
    pub f_c_t2a: f64,
    pub f_f_a2t: f64,
    pub f_c_a2t: f64,
    pub l_star_t2a: f64,
    pub l_star_a2t: f64,
    pub total: f64,
    pub tau: f64,
    pub lambda_f: f64,
    pub lambda_c: f64,
}

/// Gradients of the total loss with respect to every batch embedding and
/// every knowledge entry (dense over the bases; entries never retrieved
/// stay exactly zero).
#[derive(Debug, Clone)]
pub struct AskGradients {
    pub batch_audio: Vec<Vec<f64>>,
    pub batch_text: Vec<Vec<f64>>,
    pub fine_audio: Vec<Vec<f64>>,
    pub fine_text: Vec<Vec<f64>>,
    pub coarse_audio: Vec<Vec<f64>>,
    pub coarse_text: Vec<Vec<f64>>,
}

/// Out-of-batch influence: mean gradient norm of the loss over knowledge
/// entries outside the batch.
#[derive(Debug, Clone, Serialize)]
pub struct ObiReport {
    pub entry_ids: Vec<usize>,
    pub per_entry_grad_norms: Vec<f64>,
    pub mean: f64,
}

/// One direction of the contrastive loss: rows are anchors, the diagonal
/// holds the positives.
pub fn ntxent(s: &SimMatrix, tau: f64) -> Result<f64> {
    Ok(ntxent_forward(s, tau)?.0)
}

fn ntxent_forward(s: &SimMatrix, tau: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    if tau <= 0.0 {
        return Err(Error::NonPositiveTau(tau));
    }
    let b = s.size();
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(b);
    for i in 0..b {
        let scaled: Vec<f64> = s.row(i).iter().map(|v| v / tau).collect();
        let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scaled.iter().map(|v| (v - m).exp()).sum();
        loss -= scaled[i] - m - z.ln();
        probs.push(scaled.iter().map(|v| (v - m).exp() / z).collect());
    }
    Ok((loss / b as f64, probs))
}

/// Sum of the fine- and coarse-grained contrastive objectives for one
/// direction.
pub fn directional_loss(s_star_f: &SimMatrix, s_star_c: &SimMatrix, tau: f64) -> Result<f64> {
    if s_star_f.size() != s_star_c.size() {
        return Err(Error::ShapeMismatch { left: s_star_f.size(), right: s_star_c.size() });
    }
    Ok(ntxent(s_star_f, tau)? + ntxent(s_star_c, tau)?)
}

/// Mean negative log-potential over the batch.
pub fn reliability_term(potentials: &[f64]) -> Result<f64> {
    if potentials.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = 0.0;
    for &p in potentials {
        if p <= 0.0 {
            return Err(Error::NonPositivePotential(p));
        }
        acc -= p.ln();
    }
    Ok(acc / potentials.len() as f64)
}

/// (1 + lambda_f * f_fine + lambda_c * f_coarse) * base.
pub fn modulated_loss(base: f64, f_fine: f64, f_coarse: f64, lambda_f: f64, lambda_c: f64) -> f64 {
    debug_assert!(lambda_f >= 0.0 && lambda_c >= 0.0);
    (1.0 + lambda_f * f_fine + lambda_c * f_coarse) * base
}

// ---------------------------------------------------------------------------
// frozen per-batch context

#[derive(Debug, Clone)]
pub(crate) struct SampleRetrieval {
    pub fine_audio: Vec<usize>,
    pub fine_text: Vec<usize>,
    pub coarse_audio: Vec<usize>,
    pub coarse_text: Vec<usize>,
}

/// Frozen state of one potential group for one sample: softmax weights and
/// the partner vectors themselves. Both are stop-gradient.
#[derive(Debug, Clone)]
pub(crate) struct PotentialCtx {
    pub weights: Vec<f64>,
    pub partners: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct SamplePotentials {
    pub f_t2a: PotentialCtx,
    pub f_a2t: PotentialCtx,
    pub c_t2a: PotentialCtx,
    pub c_a2t: PotentialCtx,
}

#[derive(Debug, Clone)]
pub(crate) struct DirectionalPlans {
    pub f_t2a: TransportPlan,
    pub c_t2a: TransportPlan,
    pub f_a2t: TransportPlan,
    pub c_a2t: TransportPlan,
}

/// Stop-gradient state for one batch evaluation: retrieval index sets,
/// potential contexts, and transport plans. Recomputed fresh every step.
#[derive(Debug, Clone)]
pub struct BatchContext {
    pub(crate) retrievals: Vec<SampleRetrieval>,
    pub(crate) potentials: Vec<SamplePotentials>,
    pub(crate) plans: Option<DirectionalPlans>,
}

impl BatchContext {
    pub fn batch_size(&self) -> usize {
        self.retrievals.len()
    }

    /// Fine-base indices retrieved by any sample of the batch, either side.
    pub fn retrieved_fine_ids(&self) -> std::collections::BTreeSet<usize> {
        let mut ids = std::collections::BTreeSet::new();
        for r in &self.retrievals {
            ids.extend(r.fine_audio.iter().copied());
            ids.extend(r.fine_text.iter().copied());
        }
        ids
    }
}

/// Raw borrowed views of both bases, the representation the differentiable
/// evaluation runs on.
pub struct KbView<'a> {
    pub fine_audio: Vec<&'a [f64]>,
    pub fine_text: Vec<&'a [f64]>,
    pub coarse_audio: Vec<&'a [f64]>,
    pub coarse_text: Vec<&'a [f64]>,
}

impl<'a> KbView<'a> {
    pub fn from_bases(fine: &'a FineKB, coarse: &'a CoarseKB) -> Self {
        Self {
            fine_audio: fine.entries.iter().map(|e| e.audio.as_slice()).collect(),
            fine_text: fine.entries.iter().map(|e| e.text.as_slice()).collect(),
            coarse_audio: coarse.prototypes.iter().map(|p| p.audio.as_slice()).collect(),
            coarse_text: coarse.prototypes.iter().map(|p| p.text.as_slice()).collect(),
        }
    }

    pub fn from_slices(
        fine_audio: &'a [Vec<f64>],
        fine_text: &'a [Vec<f64>],
        coarse_audio: &'a [Vec<f64>],
        coarse_text: &'a [Vec<f64>],
    ) -> Self {
        Self {
            fine_audio: fine_audio.iter().map(|v| v.as_slice()).collect(),
            fine_text: fine_text.iter().map(|v| v.as_slice()).collect(),
            coarse_audio: coarse_audio.iter().map(|v| v.as_slice()).collect(),
            coarse_text: coarse_text.iter().map(|v| v.as_slice()).collect(),
        }
    }
}

/// Captures retrieval, reliability weights with their partner vectors, and
/// transport plans for one batch. Everything in the returned context is
/// treated as constant by the gradient code.
pub fn plan_batch(
    batch: &[(UnitVector, UnitVector)],
    fine: &FineKB,
    coarse: &CoarseKB,
    cfg: &AskConfig,
    self_ids: Option<&[usize]>,
) -> Result<BatchContext> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(ids) = self_ids {
        if ids.len() != batch.len() {
            return Err(Error::LengthMismatch { left: ids.len(), right: batch.len() });
        }
    }

    let mut retrievals = Vec::with_capacity(batch.len());
    for (i, (u, v)) in batch.iter().enumerate() {
        let exclude = self_ids.map(|ids| ids[i]);
        retrievals.push(SampleRetrieval {
            fine_audio: top_k(u, fine, Side::Audio, cfg.k, exclude)?.indices,
            fine_text: top_k(v, fine, Side::Text, cfg.k, exclude)?.indices,
            coarse_audio: top_k(u, coarse, Side::Audio, cfg.k, None)?.indices,
            coarse_text: top_k(v, coarse, Side::Text, cfg.k, None)?.indices,
        });
    }

    let view = KbView::from_bases(fine, coarse);
    let mut potentials = Vec::with_capacity(batch.len());
    for r in &retrievals {
        let group = |source: &[&[f64]], partner_idx: &[usize], ref_idx: &[usize]| -> Result<PotentialCtx> {
            let partners: Vec<Vec<f64>> =
                partner_idx.iter().map(|&i| source[i].to_vec()).collect();
            let reference: Vec<&[f64]> = ref_idx.iter().map(|&i| source[i]).collect();
            let scores = consistency_scores(&partners, &reference)?;
            Ok(PotentialCtx {
                weights: reliability_weights(&scores)?.as_slice().to_vec(),
                partners,
            })
        };
        potentials.push(SamplePotentials {
            f_t2a: group(&view.fine_audio, &r.fine_text, &r.fine_audio)?,
            f_a2t: group(&view.fine_text, &r.fine_audio, &r.fine_text)?,
            c_t2a: group(&view.coarse_audio, &r.coarse_text, &r.coarse_audio)?,
            c_a2t: group(&view.coarse_text, &r.coarse_audio, &r.coarse_text)?,
        });
    }

    let plans = if cfg.beta > 0.0 {
        let (batch_audio, batch_text) = raw_batch(batch);
        let enhanced = enhanced_views(&batch_audio, &batch_text, &view, cfg, &retrievals)?;
        let s_f = similarity(&enhanced, Pick::Fine);
        let s_c = similarity(&enhanced, Pick::Coarse);
        Some(DirectionalPlans {
            f_t2a: sinkhorn(&s_f, cfg.epsilon, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol)?,
            c_t2a: sinkhorn(&s_c, cfg.epsilon, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol)?,
            f_a2t: sinkhorn(&s_f.transpose(), cfg.epsilon, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol)?,
            c_a2t: sinkhorn(&s_c.transpose(), cfg.epsilon, cfg.sinkhorn_max_iters, cfg.sinkhorn_tol)?,
        })
    } else {
        None
    };

    Ok(BatchContext { retrievals, potentials, plans })
}

// ---------------------------------------------------------------------------
// differentiable forward pass

struct EnhancedView {
    post: Vec<f64>,
    raw_norm: f64,
    passthrough: bool,
    renormalized: bool,
}

struct EnhancedSample {
    u_fine: EnhancedView,
    v_fine: EnhancedView,
    u_coarse: EnhancedView,
    v_coarse: EnhancedView,
}

fn enhance_one(
    original: &[f64],
    source: &[&[f64]],
    indices: &[usize],
    cfg: &AskConfig,
) -> Result<EnhancedView> {
    if cfg.rho == 1.0 {
        return Ok(EnhancedView {
            post: original.to_vec(),
            raw_norm: 1.0,
            passthrough: true,
            renormalized: false,
        });
    }
    let d = original.len();
    let mut kvec = vec![0.0; d];
    for &idx in indices {
        for (m, x) in kvec.iter_mut().zip(source[idx]) {
            *m += x;
        }
    }
    let k = indices.len() as f64;
    let raw: Vec<f64> = original
        .iter()
        .zip(&kvec)
        .map(|(o, s)| cfg.rho * o + (1.0 - cfg.rho) * s / k)
        .collect();
    if cfg.renormalize_enhanced {
        let n = crate::math::norm(&raw);
        let unit = l2_normalize(&raw)?;
        Ok(EnhancedView { post: unit.into_vec(), raw_norm: n, passthrough: false, renormalized: true })
    } else {
        Ok(EnhancedView { post: raw, raw_norm: 1.0, passthrough: false, renormalized: false })
    }
}

fn enhanced_views(
    batch_audio: &[Vec<f64>],
    batch_text: &[Vec<f64>],
    kb: &KbView,
    cfg: &AskConfig,
    retrievals: &[SampleRetrieval],
) -> Result<Vec<EnhancedSample>> {
    batch_audio
        .iter()
        .zip(batch_text)
        .zip(retrievals)
        .map(|((u, v), r)| {
            Ok(EnhancedSample {
                u_fine: enhance_one(u, &kb.fine_audio, &r.fine_audio, cfg)?,
                v_fine: enhance_one(v, &kb.fine_text, &r.fine_text, cfg)?,
                u_coarse: enhance_one(u, &kb.coarse_audio, &r.coarse_audio, cfg)?,
                v_coarse: enhance_one(v, &kb.coarse_text, &r.coarse_text, cfg)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy)]
enum Pick {
    Fine,
    Coarse,
}

fn similarity(enhanced: &[EnhancedSample], pick: Pick) -> SimMatrix {
    let b = enhanced.len();
    let mut s = SimMatrix::zeros(b);
    for i in 0..b {
        let vi = match pick {
            Pick::Fine => &enhanced[i].v_fine.post,
            Pick::Coarse => &enhanced[i].v_coarse.post,
        };
        for j in 0..b {
            let uj = match pick {
                Pick::Fine => &enhanced[j].u_fine.post,
                Pick::Coarse => &enhanced[j].u_coarse.post,
            };
            s.set(i, j, dot(vi, uj));
        }
    }
    s
}

struct PotentialForward {
    exps: Vec<f64>,
    psi: f64,
}

fn potentials_forward(anchors: &[Vec<f64>], groups: &[&PotentialCtx]) -> Vec<PotentialForward> {
    anchors
        .iter()
        .zip(groups)
        .map(|(anchor, g)| {
            let exps: Vec<f64> =
                g.partners.iter().map(|p| dot(anchor, p).exp()).collect();
            let psi = exps.iter().zip(&g.weights).map(|(e, w)| e * w).sum();
            PotentialForward { exps, psi }
        })
        .collect()
}

struct Forward {
    enhanced: Vec<EnhancedSample>,
    probs_f_t2a: Vec<Vec<f64>>,
    probs_c_t2a: Vec<Vec<f64>>,
    probs_f_a2t: Vec<Vec<f64>>,
    probs_c_a2t: Vec<Vec<f64>>,
    pot_f_t2a: Vec<PotentialForward>,
    pot_f_a2t: Vec<PotentialForward>,
    pot_c_t2a: Vec<PotentialForward>,
    pot_c_a2t: Vec<PotentialForward>,
    breakdown: LossBreakdown,
}

fn forward(
    batch_audio: &[Vec<f64>],
    batch_text: &[Vec<f64>],
    kb: &KbView,
    cfg: &AskConfig,
    ctx: &BatchContext,
) -> Result<Forward> {
    let b = batch_audio.len();
    if b == 0 || batch_text.len() != b || ctx.batch_size() != b {
        return Err(Error::EmptyBatch);
    }

    let enhanced = enhanced_views(batch_audio, batch_text, kb, cfg, &ctx.retrievals)?;
    let s_f = similarity(&enhanced, Pick::Fine);
    let s_c = similarity(&enhanced, Pick::Coarse);

    let realigned = |s: &SimMatrix, plan: Option<&TransportPlan>| -> Result<SimMatrix> {
        match plan {
            Some(p) if cfg.beta > 0.0 => realign(s, p, cfg.beta, cfg.rescale_plan),
            _ => Ok(s.clone()),
        }
    };
    let plans = ctx.plans.as_ref();
    let a_f = realigned(&s_f, plans.map(|p| &p.f_t2a))?;
    let a_c = realigned(&s_c, plans.map(|p| &p.c_t2a))?;
    let b_f = realigned(&s_f.transpose(), plans.map(|p| &p.f_a2t))?;
    let b_c = realigned(&s_c.transpose(), plans.map(|p| &p.c_a2t))?;

    let (lf_t2a, probs_f_t2a) = ntxent_forward(&a_f, cfg.tau)?;
    let (lc_t2a, probs_c_t2a) = ntxent_forward(&a_c, cfg.tau)?;
    let (lf_a2t, probs_f_a2t) = ntxent_forward(&b_f, cfg.tau)?;
    let (lc_a2t, probs_c_a2t) = ntxent_forward(&b_c, cfg.tau)?;
    let l_t2a = lf_t2a + lc_t2a;
    let l_a2t = lf_a2t + lc_a2t;

    let groups = |f: fn(&SamplePotentials) -> &PotentialCtx| -> Vec<&PotentialCtx> {
        ctx.potentials.iter().map(f).collect()
    };
    let pot_f_t2a = potentials_forward(batch_audio, &groups(|p| &p.f_t2a));
    let pot_f_a2t = potentials_forward(batch_text, &groups(|p| &p.f_a2t));
    let pot_c_t2a = potentials_forward(batch_audio, &groups(|p| &p.c_t2a));
    let pot_c_a2t = potentials_forward(batch_text, &groups(|p| &p.c_a2t));

    let term = |pots: &[PotentialForward]| -> Result<f64> {
        reliability_term(&pots.iter().map(|p| p.psi).collect::<Vec<_>>())
    };
    let f_f_t2a = term(&pot_f_t2a)?;
    let f_f_a2t = term(&pot_f_a2t)?;
    let f_c_t2a = term(&pot_c_t2a)?;
    let f_c_a2t = term(&pot_c_a2t)?;

    let l_star_t2a = modulated_loss(l_t2a, f_f_t2a, f_c_t2a, cfg.lambda_f, cfg.lambda_c);
    let l_star_a2t = modulated_loss(l_a2t, f_f_a2t, f_c_a2t, cfg.lambda_f, cfg.lambda_c);
    let total = 0.5 * (l_star_t2a + l_star_a2t);

    Ok(Forward {
        enhanced,
        probs_f_t2a,
        probs_c_t2a,
        probs_f_a2t,
        probs_c_a2t,
        pot_f_t2a,
        pot_f_a2t,
        pot_c_t2a,
        pot_c_a2t,
        breakdown: LossBreakdown {
            l_t2a,
            l_a2t,
            f_f_t2a,
            f_c_t2a,
            f_f_a2t,
            f_c_a2t,
            l_star_t2a,
            l_star_a2t,
            total,
            tau: cfg.tau,
            lambda_f: cfg.lambda_f,
            lambda_c: cfg.lambda_c,
        },
    })
}

/// Evaluates the composite loss on raw embedding views under a frozen
/// context. This is the function the gradients differentiate.
pub fn eval_with_context(
    batch_audio: &[Vec<f64>],
    batch_text: &[Vec<f64>],
    kb: &KbView,
    cfg: &AskConfig,
    ctx: &BatchContext,
) -> Result<LossBreakdown> {
    Ok(forward(batch_audio, batch_text, kb, cfg, ctx)?.breakdown)
}

// ---------------------------------------------------------------------------
// backward pass

fn zeros_like(rows: usize, d: usize) -> Vec<Vec<f64>> {
    vec![vec![0.0; d]; rows]
}

/// d(ntxent)/dS for one realigned matrix, scaled by `coef`.
fn ntxent_backward(probs: &[Vec<f64>], tau: f64, coef: f64) -> SimMatrix {
    let b = probs.len();
    let mut g = SimMatrix::zeros(b);
    let scale = coef / (b as f64 * tau);
    for i in 0..b {
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            g.set(i, j, scale * (probs[i][j] - delta));
        }
    }
    g
}

/// Pulls a gradient on the realigned matrix back through the fixed-plan
/// mixing: dS += M^T dA.
fn realign_backward(
    d_aligned: &SimMatrix,
    plan: Option<&TransportPlan>,
    cfg: &AskConfig,
    d_s: &mut SimMatrix,
) {
    let b = d_aligned.size();
    match plan {
        Some(p) if cfg.beta > 0.0 => {
            for i in 0..b {
                let m_row = mixing_row(p, cfg.beta, cfg.rescale_plan, i);
                for (l, &m_il) in m_row.iter().enumerate() {
                    if m_il == 0.0 {
                        continue;
                    }
                    for j in 0..b {
                        let v = d_s.get(l, j) + m_il * d_aligned.get(i, j);
                        d_s.set(l, j, v);
                    }
                }
            }
        }
        _ => {
            for i in 0..b {
                for j in 0..b {
                    d_s.set(i, j, d_s.get(i, j) + d_aligned.get(i, j));
                }
            }
        }
    }
}

/// Pulls a gradient on an enhanced view back to the original embedding and
/// the retrieved entries.
fn injection_backward(
    view: &EnhancedView,
    grad_post: &[f64],
    indices: &[usize],
    cfg: &AskConfig,
    d_original: &mut [f64],
    d_entries: &mut [Vec<f64>],
) {
    if view.passthrough {
        for (o, g) in d_original.iter_mut().zip(grad_post) {
            *o += g;
        }
        return;
    }
    let d_raw: Vec<f64> = if view.renormalized {
        let y = &view.post;
        let radial = dot(y, grad_post);
        grad_post
            .iter()
            .zip(y)
            .map(|(g, yi)| (g - yi * radial) / view.raw_norm)
            .collect()
    } else {
        grad_post.to_vec()
    };
    for (o, g) in d_original.iter_mut().zip(&d_raw) {
        *o += cfg.rho * g;
    }
    let w = (1.0 - cfg.rho) / indices.len() as f64;
    for &idx in indices {
        for (e, g) in d_entries[idx].iter_mut().zip(&d_raw) {
            *e += w * g;
        }
    }
}

/// Analytic gradients of the total loss under the frozen context, together
/// with the forward breakdown.
pub fn grad_with_context(
    batch_audio: &[Vec<f64>],
    batch_text: &[Vec<f64>],
    kb: &KbView,
    cfg: &AskConfig,
    ctx: &BatchContext,
) -> Result<(LossBreakdown, AskGradients)> {
    let fwd = forward(batch_audio, batch_text, kb, cfg, ctx)?;
    let b = batch_audio.len();
    let d = batch_audio[0].len();
    let bd = &fwd.breakdown;

    let mut grads = AskGradients {
        batch_audio: zeros_like(b, d),
        batch_text: zeros_like(b, d),
        fine_audio: zeros_like(kb.fine_audio.len(), d),
        fine_text: zeros_like(kb.fine_text.len(), d),
        coarse_audio: zeros_like(kb.coarse_audio.len(), d),
        coarse_text: zeros_like(kb.coarse_text.len(), d),
    };

    // modulation: total = 0.5 * (1 + lf*Ff + lc*Fc) * l  per direction,
    // so both the contrastive term and the F terms carry gradient
    let m_t2a = 1.0 + cfg.lambda_f * bd.f_f_t2a + cfg.lambda_c * bd.f_c_t2a;
    let m_a2t = 1.0 + cfg.lambda_f * bd.f_f_a2t + cfg.lambda_c * bd.f_c_a2t;
    let coef_l_t2a = 0.5 * m_t2a;
    let coef_l_a2t = 0.5 * m_a2t;

    // contrastive pathway: accumulate gradients on S_f and S_c from both
    // directions, then pull through the similarities and the injection
    let plans = ctx.plans.as_ref();
    let mut d_s_f = SimMatrix::zeros(b);
    let mut d_s_c = SimMatrix::zeros(b);

    let d_a_f = ntxent_backward(&fwd.probs_f_t2a, cfg.tau, coef_l_t2a);
    realign_backward(&d_a_f, plans.map(|p| &p.f_t2a), cfg, &mut d_s_f);
    let d_a_c = ntxent_backward(&fwd.probs_c_t2a, cfg.tau, coef_l_t2a);
    realign_backward(&d_a_c, plans.map(|p| &p.c_t2a), cfg, &mut d_s_c);

    let d_b_f = ntxent_backward(&fwd.probs_f_a2t, cfg.tau, coef_l_a2t);
    let mut d_t_f = SimMatrix::zeros(b);
    realign_backward(&d_b_f, plans.map(|p| &p.f_a2t), cfg, &mut d_t_f);
    let d_b_c = ntxent_backward(&fwd.probs_c_a2t, cfg.tau, coef_l_a2t);
    let mut d_t_c = SimMatrix::zeros(b);
    realign_backward(&d_b_c, plans.map(|p| &p.c_a2t), cfg, &mut d_t_c);
    for i in 0..b {
        for j in 0..b {
            d_s_f.set(j, i, d_s_f.get(j, i) + d_t_f.get(i, j));
            d_s_c.set(j, i, d_s_c.get(j, i) + d_t_c.get(i, j));
        }
    }

    // S[i][j] = v_i . u_j over the enhanced views
    let mut d_u_fine = zeros_like(b, d);
    let mut d_v_fine = zeros_like(b, d);
    let mut d_u_coarse = zeros_like(b, d);
    let mut d_v_coarse = zeros_like(b, d);
    for i in 0..b {
        for j in 0..b {
            let gf = d_s_f.get(i, j);
            let gc = d_s_c.get(i, j);
            if gf != 0.0 {
                for x in 0..d {
                    d_v_fine[i][x] += gf * fwd.enhanced[j].u_fine.post[x];
                    d_u_fine[j][x] += gf * fwd.enhanced[i].v_fine.post[x];
                }
            }
            if gc != 0.0 {
                for x in 0..d {
                    d_v_coarse[i][x] += gc * fwd.enhanced[j].u_coarse.post[x];
                    d_u_coarse[j][x] += gc * fwd.enhanced[i].v_coarse.post[x];
                }
            }
        }
    }
    for i in 0..b {
        let r = &ctx.retrievals[i];
        injection_backward(
            &fwd.enhanced[i].u_fine,
            &d_u_fine[i],
            &r.fine_audio,
            cfg,
            &mut grads.batch_audio[i],
            &mut grads.fine_audio,
        );
        injection_backward(
            &fwd.enhanced[i].v_fine,
            &d_v_fine[i],
            &r.fine_text,
            cfg,
            &mut grads.batch_text[i],
            &mut grads.fine_text,
        );
        injection_backward(
            &fwd.enhanced[i].u_coarse,
            &d_u_coarse[i],
            &r.coarse_audio,
            cfg,
            &mut grads.batch_audio[i],
            &mut grads.coarse_audio,
        );
        injection_backward(
            &fwd.enhanced[i].v_coarse,
            &d_v_coarse[i],
            &r.coarse_text,
            cfg,
            &mut grads.batch_text[i],
            &mut grads.coarse_text,
        );
    }

    // reliability pathway: F = mean_i(-ln psi_i). Weights and partner
    // vectors are frozen, so the potentials pull only on their anchors.
    {
        let b_f64 = b as f64;
        let pull = |pots: &[PotentialForward],
                    groups: &[&PotentialCtx],
                        coef: f64,
                        d_anchor: &mut Vec<Vec<f64>>| {
            if coef == 0.0 {
                return;
            }
            for (i, pot) in pots.iter().enumerate() {
                let d_psi = coef * (-1.0 / (b_f64 * pot.psi));
                let g = groups[i];
                for (slot, partner) in g.partners.iter().enumerate() {
                    let scale = d_psi * g.weights[slot] * pot.exps[slot];
                    for x in 0..d {
                        d_anchor[i][x] += scale * partner[x];
                    }
                }
            }
        };
        let groups = |f: fn(&SamplePotentials) -> &PotentialCtx| -> Vec<&PotentialCtx> {
            ctx.potentials.iter().map(f).collect()
        };
        pull(&fwd.pot_f_t2a, &groups(|p| &p.f_t2a), 0.5 * cfg.lambda_f * bd.l_t2a, &mut grads.batch_audio);
        pull(&fwd.pot_f_a2t, &groups(|p| &p.f_a2t), 0.5 * cfg.lambda_f * bd.l_a2t, &mut grads.batch_text);
        pull(&fwd.pot_c_t2a, &groups(|p| &p.c_t2a), 0.5 * cfg.lambda_c * bd.l_t2a, &mut grads.batch_audio);
        pull(&fwd.pot_c_a2t, &groups(|p| &p.c_a2t), 0.5 * cfg.lambda_c * bd.l_a2t, &mut grads.batch_text);
    }

    Ok((fwd.breakdown, grads))
}

// ---------------------------------------------------------------------------
// public entry points on typed inputs

fn raw_batch(batch: &[(UnitVector, UnitVector)]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (
        batch.iter().map(|(u, _)| u.as_slice().to_vec()).collect(),
        batch.iter().map(|(_, v)| v.as_slice().to_vec()).collect(),
    )
}

/// The composite loss for one batch against the current snapshots.
pub fn ask_loss(
    batch: &[(UnitVector, UnitVector)],
    fine: &FineKB,
    coarse: &CoarseKB,
    cfg: &AskConfig,
    self_ids: Option<&[usize]>,
) -> Result<LossBreakdown> {
    let ctx = plan_batch(batch, fine, coarse, cfg, self_ids)?;
    let (audio, text) = raw_batch(batch);
    eval_with_context(&audio, &text, &KbView::from_bases(fine, coarse), cfg, &ctx)
}

/// The composite loss plus analytic gradients with respect to every batch
/// embedding and every knowledge entry.
pub fn grad_embeddings(
    batch: &[(UnitVector, UnitVector)],
    fine: &FineKB,
    coarse: &CoarseKB,
    cfg: &AskConfig,
    self_ids: Option<&[usize]>,
) -> Result<(LossBreakdown, AskGradients)> {
    let ctx = plan_batch(batch, fine, coarse, cfg, self_ids)?;
    let (audio, text) = raw_batch(batch);
    grad_with_context(&audio, &text, &KbView::from_bases(fine, coarse), cfg, &ctx)
}

/// Plain symmetric contrastive baseline on the raw embeddings: the sum of
/// both directional NT-Xent losses, no knowledge pathway. Serves as the
/// independent reference the disabled-mechanism pipeline must reduce to.
pub struct BaselineResult {
    pub loss: f64,
    pub l_t2a: f64,
    pub l_a2t: f64,
    pub d_audio: Vec<Vec<f64>>,
    pub d_text: Vec<Vec<f64>>,
}

pub fn baseline_loss(batch: &[(UnitVector, UnitVector)], tau: f64) -> Result<BaselineResult> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let b = batch.len();
    let d = batch[0].0.dim();
    let texts: Vec<UnitVector> = batch.iter().map(|(_, v)| v.clone()).collect();
    let audios: Vec<UnitVector> = batch.iter().map(|(u, _)| u.clone()).collect();
    let s = crate::math::pairwise_sim(&texts, &audios)?;
    let st = s.transpose();
    let (l_t2a, p_t2a) = ntxent_forward(&s, tau)?;
    let (l_a2t, p_a2t) = ntxent_forward(&st, tau)?;

    let g_t2a = ntxent_backward(&p_t2a, tau, 1.0);
    let g_a2t = ntxent_backward(&p_a2t, tau, 1.0);
    let mut d_audio = zeros_like(b, d);
    let mut d_text = zeros_like(b, d);
    for i in 0..b {
        for j in 0..b {
            let g = g_t2a.get(i, j) + g_a2t.get(j, i);
            if g == 0.0 {
                continue;
            }
            for x in 0..d {
                d_text[i][x] += g * audios[j].as_slice()[x];
                d_audio[j][x] += g * texts[i].as_slice()[x];
            }
        }
    }
    Ok(BaselineResult { loss: l_t2a + l_a2t, l_t2a, l_a2t, d_audio, d_text })
}

/// Mean gradient norm of the chosen loss over out-of-batch knowledge
/// entries. Zero by construction for the baseline; strictly positive for
/// the knowledge-enhanced loss whenever an out-of-batch entry is retrieved
/// with rho < 1.
pub fn obi(
    batch: &[(UnitVector, UnitVector)],
    fine: &FineKB,
    coarse: &CoarseKB,
    cfg: &AskConfig,
    variant: LossVariant,
    self_ids: Option<&[usize]>,
) -> Result<ObiReport> {
    let in_batch: std::collections::BTreeSet<usize> =
        self_ids.map(|ids| ids.iter().copied().collect()).unwrap_or_default();
    let entry_ids: Vec<usize> = (0..fine.len()).filter(|i| !in_batch.contains(i)).collect();
    if entry_ids.is_empty() {
        return Err(Error::EmptyOutOfBatchSet);
    }
    let per_entry_grad_norms: Vec<f64> = match variant {
        LossVariant::Baseline => vec![0.0; entry_ids.len()],
        LossVariant::Ask => {
            let (_, grads) = grad_embeddings(batch, fine, coarse, cfg, self_ids)?;
            entry_ids
                .iter()
                .map(|&id| {
                    crate::math::norm(&grads.fine_audio[id]) + crate::math::norm(&grads.fine_text[id])
                })
                .collect()
        }
    };
    let mean = per_entry_grad_norms.iter().sum::<f64>() / per_entry_grad_norms.len() as f64;
    Ok(ObiReport { entry_ids, per_entry_grad_norms, mean })
}
