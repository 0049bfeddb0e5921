//! Top-k overlap and its surrogate, PGD over attention-weight perturbations,
//! the min-max SEAT objective and its trainer, plus the attention-space
//! baselines (random and adversarial perturbation training).

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, MAX_SEQ_LEN};
use crate::error::{Result, SeatError};
use crate::linalg::{dot, norm2, Mat};
use crate::model::{
    cross_entropy, logistic, scorer_backward, softmax, softmax_backward, AttentionModel,
    AttentionScorer, ScoreTrace, PROB_EPS,
};
use crate::optim::{sgd_step, Adam};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    L2,
    Linf,
}

impl NormKind {
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            NormKind::L2 => norm2(v),
            NormKind::Linf => v.iter().fold(0.0, |m, x| f64::max(m, x.abs())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeatConfig {
    /// Weight of the worst-case stability term.
    pub lambda1: f64,
    /// Weight of the top-k surrogate.
    pub lambda2: f64,
    pub k: usize,
    pub radius: f64,
    pub norm: NormKind,
    /// Inner PGD steps.
    pub pgd_steps: usize,
    /// Inner step size; `None` means `2R / K`.
    pub pgd_step_size: Option<f64>,
    /// Outer epochs.
    pub epochs: usize,
    /// Outer learning rate.
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OuterOptimizer,
    /// Scale the outer learning rate by `1/sqrt(epoch + 1)`.
    pub lr_decay: bool,
    /// Use the bracket `∇D1 − λ1∇D2 − λ2∇L_topk` instead of descending all three terms.
    pub algorithm1_signs: bool,
    /// Project `w̃ + δ` back onto the simplex before decoding.
    pub renormalize: bool,
}

impl Default for SeatConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1000.0,
            k: 7,
            radius: 0.1,
            norm: NormKind::L2,
            pgd_steps: 10,
            pgd_step_size: None,
            epochs: 10,
            lr: 0.001,
            batch_size: 32,
            optimizer: OuterOptimizer::Adam,
            lr_decay: true,
            algorithm1_signs: false,
            renormalize: false,
        }
    }
}

impl SeatConfig {
    pub fn step_size(&self) -> f64 {
        self.pgd_step_size
            .unwrap_or_else(|| 2.0 * self.radius / self.pgd_steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(SeatError::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if self.k == 0 || self.k > MAX_SEQ_LEN {
            return Err(SeatError::Config(format!("k must lie in [1, {MAX_SEQ_LEN}]")));
        }
        if self.radius < 0.0 || !self.radius.is_finite() {
            return Err(SeatError::Config("radius must be finite and non-negative".into()));
        }
        let pgd_moves = self.radius > 0.0 && self.pgd_steps > 0;
        if !(self.lr > 0.0) || (pgd_moves && !(self.step_size() > 0.0)) || self.batch_size == 0 {
            return Err(SeatError::Config("step sizes and batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One perturbation vector of length [`MAX_SEQ_LEN`], masked per example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub delta: Vec<f64>,
}

impl Perturbation {
    pub fn zeros() -> Self {
        Self {
            delta: vec![0.0; MAX_SEQ_LEN],
        }
    }

    pub fn active(&self, len: usize) -> &[f64] {
        &self.delta[..len]
    }
}

/// A trained replacement scorer and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeatScorer {
    pub scorer: AttentionScorer,
    pub base_model_hash: String,
    pub config: SeatConfig,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// top-k

/// Indices of the `k` largest entries, by descending value then ascending index.
pub fn topk_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(SeatError::Argument(format!(
            "k = {k} outside [1, {}]",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

fn membership(v: &[f64], k: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; v.len()];
    for i in topk_indices(v, k)? {
        mask[i] = true;
    }
    Ok(mask)
}

/// `|T_k(v1) ∩ T_k(v2)| / k`.
pub fn topk_overlap(v1: &[f64], v2: &[f64], k: usize) -> Result<f64> {
    if v1.len() != v2.len() {
        return Err(SeatError::Argument("top-k overlap of unequal lengths".into()));
    }
    let a = membership(v1, k)?;
    let b = membership(v2, k)?;
    let shared = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    Ok(shared as f64 / k as f64)
}

/// `(1/2k) (‖w_S − w̃_S‖₁ + ‖w̃_S̃ − w_S̃‖₁)` with `S`, `S̃` the top-k sets of `w`, `w̃`.
pub fn topk_surrogate(w: &[f64], w_tilde: &[f64], k: usize) -> Result<f64> {
    if w.len() != w_tilde.len() {
        return Err(SeatError::Argument("top-k surrogate of unequal lengths".into()));
    }
    let s = topk_indices(w, k)?;
    let st = topk_indices(w_tilde, k)?;
    let l1 = |set: &[usize]| set.iter().map(|&i| (w[i] - w_tilde[i]).abs()).sum::<f64>();
    Ok((l1(&s) + l1(&st)) / (2.0 * k as f64))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Subgradient of [`topk_surrogate`] with respect to `w̃`, index sets held fixed.
pub fn topk_surrogate_subgrad(w: &[f64], w_tilde: &[f64], k: usize) -> Result<Vec<f64>> {
    if w.len() != w_tilde.len() {
        return Err(SeatError::Argument("top-k surrogate of unequal lengths".into()));
    }
    let a = membership(w, k)?;
    let b = membership(w_tilde, k)?;
    let scale = 1.0 / (2.0 * k as f64);
    Ok((0..w.len())
        .map(|i| {
            let count = u8::from(a[i]) + u8::from(b[i]);
            f64::from(count) * scale * sign(w_tilde[i] - w[i])
        })
        .collect())
}

// ---------------------------------------------------------------------------
// projections

/// Nearest point of the radius-`radius` ball.
pub fn project(delta: &mut [f64], radius: f64, norm: NormKind) {
    match norm {
        NormKind::L2 => {
            let n = norm2(delta);
            if n > radius {
                let scale = radius / n;
                delta.iter_mut().for_each(|x| *x *= scale);
            }
        }
        NormKind::Linf => delta.iter_mut().for_each(|x| *x = x.clamp(-radius, radius)),
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, &u) in sorted.iter().enumerate() {
        cum += u;
        let t = (cum - 1.0) / (i + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        }
    }
    v.iter().map(|x| (x - tau).max(0.0)).collect()
}

/// Jacobian-vector product of [`project_simplex`] at a point whose projection
/// is `projected`: centre `g` on the support, zero elsewhere.
fn simplex_jvp(projected: &[f64], g: &[f64]) -> Vec<f64> {
    let support: Vec<bool> = projected.iter().map(|&x| x > 0.0).collect();
    let n = support.iter().filter(|&&s| s).count().max(1) as f64;
    let mean = g
        .iter()
        .zip(&support)
        .filter(|(_, s)| **s)
        .map(|(x, _)| x)
        .sum::<f64>()
        / n;
    g.iter()
        .zip(&support)
        .map(|(x, &s)| if s { x - mean } else { 0.0 })
        .collect()
}

// ---------------------------------------------------------------------------
// cached trunk

/// Frozen-trunk quantities for one example: hidden states, decoder projections
/// `θ·h_t`, and the base model's attention and prediction.
#[derive(Debug, Clone)]
pub struct CachedExample {
    pub h: Mat,
    pub proj: Vec<f64>,
    pub bias: f64,
    pub base_w: Vec<f64>,
    pub base_p: f64,
    pub label: u8,
}

impl CachedExample {
    pub fn new(model: &AttentionModel, ex: &Example) -> Result<Self> {
        let h = crate::model::encode(&model.encoder, &model.embeddings.lookup(&ex.token_ids))?;
        let proj = model.decoder.projections(&h);
        let base_w = softmax(&model.scorer.scores(&h).scores).w;
        let z = dot(&base_w, &proj) + model.decoder.bias;
        Ok(Self {
            h,
            proj,
            bias: model.decoder.bias,
            base_w,
            base_p: logistic(z),
            label: ex.label,
        })
    }

    pub fn len(&self) -> usize {
        self.proj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proj.is_empty()
    }

    pub fn base_y(&self) -> [f64; 2] {
        [self.base_p, 1.0 - self.base_p]
    }
}

pub fn cache_examples(model: &AttentionModel, examples: &[Example]) -> Result<Vec<CachedExample>> {
    examples.iter().map(|ex| CachedExample::new(model, ex)).collect()
}

/// Per-term weights of the scalar loss differentiated by [`example_terms`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossWeights {
    /// `D1(y(w̃), y(w))`
    pub d1: f64,
    /// `D2(y(w̃), y(w̃ + δ))`, both arguments differentiated.
    pub d2: f64,
    /// `L_topk(w, w̃)`
    pub topk: f64,
    /// `CE(label, y(w̃))`
    pub clean_ce: f64,
    /// `CE(label, y(w̃ + δ))`
    pub adv_ce: f64,
}

/// Values of every loss term for one example.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub d1: f64,
    pub d2: f64,
    pub topk: f64,
    pub clean_ce: f64,
    pub adv_ce: f64,
    pub overlap: f64,
}

impl Terms {
    fn add_scaled(&mut self, o: &Terms, s: f64) {
        self.d1 += s * o.d1;
        self.d2 += s * o.d2;
        self.topk += s * o.topk;
        self.clean_ce += s * o.clean_ce;
        self.adv_ce += s * o.adv_ce;
        self.overlap += s * o.overlap;
    }
}

/// What the perturbed forward pass of one example looks like.
struct Evaluated {
    trace: ScoreTrace,
    w: Vec<f64>,
    p: f64,
    z: f64,
    /// `w̃ + δ`, or its simplex projection.
    u: Vec<f64>,
    p_hat: f64,
}

fn evaluate(scorer: &AttentionScorer, ex: &CachedExample, delta: &[f64], renormalize: bool) -> Evaluated {
    let trace = scorer.scores(&ex.h);
    let w = softmax(&trace.scores).w;
    let z = dot(&w, &ex.proj) + ex.bias;
    let raw: Vec<f64> = w.iter().zip(delta).map(|(a, b)| a + b).collect();
    let u = if renormalize { project_simplex(&raw) } else { raw };
    let z_hat = dot(&u, &ex.proj) + ex.bias;
    Evaluated {
        trace,
        p: logistic(z),
        z,
        p_hat: logistic(z_hat),
        u,
        w,
    }
}

fn effective_k(k: usize, len: usize) -> usize {
    k.min(len)
}

fn clamp_ln(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0).ln()
}

/// All loss terms for one example under scorer `w̃` and perturbation `δ`,
/// with the gradient of `Σ weight·term` accumulated into `grad` (scorer) and
/// `grad_delta` (first `s` entries). Top-k index sets are frozen at the
/// current iterate.
#[allow(clippy::too_many_arguments)]
pub fn example_terms(
    scorer: &AttentionScorer,
    ex: &CachedExample,
    delta: &[f64],
    k: usize,
    renormalize: bool,
    weights: &LossWeights,
    grad: Option<&mut AttentionScorer>,
    grad_delta: Option<&mut [f64]>,
) -> Result<Terms> {
    let s = ex.len();
    let delta = &delta[..s];
    let ev = evaluate(scorer, ex, delta, renormalize);
    let k_eff = effective_k(k, s);
    let y_tilde = [ev.p, 1.0 - ev.p];
    let y_hat = [ev.p_hat, 1.0 - ev.p_hat];
    let label = f64::from(ex.label);
    let label_y = [label, 1.0 - label];
    let terms = Terms {
        d1: cross_entropy(&ex.base_y(), &y_tilde),
        d2: cross_entropy(&y_tilde, &y_hat),
        topk: topk_surrogate(&ex.base_w, &ev.w, k_eff)?,
        clean_ce: cross_entropy(&label_y, &y_tilde),
        adv_ce: cross_entropy(&label_y, &y_hat),
        overlap: topk_overlap(&ex.base_w, &ev.w, k_eff)?,
    };
    if !(terms.d1.is_finite() && terms.d2.is_finite() && ev.z.is_finite()) {
        return Err(SeatError::Numeric("non-finite SEAT loss term".into()));
    }

    // dL/dz̃ and dL/dẑ; z̃ = w̃·c + b, ẑ = u·c + b.
    let sigma_prime = ev.p * (1.0 - ev.p);
    let d_z = weights.d1 * (ev.p - ex.base_p)
        + weights.d2 * sigma_prime * (clamp_ln(1.0 - ev.p_hat) - clamp_ln(ev.p_hat))
        + weights.clean_ce * (ev.p - label);
    let d_zhat = weights.d2 * (ev.p_hat - ev.p) + weights.adv_ce * (ev.p_hat - label);

    // dL/du, pulled back through the optional simplex projection.
    let du: Vec<f64> = ex.proj.iter().map(|c| d_zhat * c).collect();
    let du = if renormalize { simplex_jvp(&ev.u, &du) } else { du };

    if let Some(gd) = grad_delta {
        for (g, d) in gd.iter_mut().zip(&du) {
            *g += d;
        }
    }
    if let Some(grad) = grad {
        let mut dw: Vec<f64> = ex.proj.iter().zip(&du).map(|(c, d)| d_z * c + d).collect();
        if weights.topk != 0.0 {
            let sub = topk_surrogate_subgrad(&ex.base_w, &ev.w, k_eff)?;
            for (g, t) in dw.iter_mut().zip(sub) {
                *g += weights.topk * t;
            }
        }
        let dphi = softmax_backward(&ev.w, &dw);
        scorer_backward(scorer, &ex.h, &ev.trace, &dphi, grad, None);
    }
    Ok(terms)
}

/// Scorer gradient and `δ` gradient of one example's weighted loss.
pub fn grad_scorer_and_delta(
    scorer: &AttentionScorer,
    ex: &CachedExample,
    delta: &Perturbation,
    k: usize,
    renormalize: bool,
    weights: &LossWeights,
) -> Result<(AttentionScorer, Vec<f64>, Terms)> {
    let mut grad = scorer.zeros_like();
    let mut gd = vec![0.0; MAX_SEQ_LEN];
    let terms = example_terms(
        scorer,
        ex,
        &delta.delta,
        k,
        renormalize,
        weights,
        Some(&mut grad),
        Some(&mut gd[..ex.len()]),
    )?;
    Ok((grad, gd, terms))
}

// ---------------------------------------------------------------------------
// inner maximization

/// Where PGD starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgdStart {
    Zero,
    /// Uniform draw from the ball over the active coordinates.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdParams {
    pub radius: f64,
    pub norm: NormKind,
    pub steps: usize,
    pub step_size: f64,
    pub start: PgdStart,
}

impl PgdParams {
    pub fn from_config(cfg: &SeatConfig, start: PgdStart) -> Self {
        Self {
            radius: cfg.radius,
            norm: cfg.norm,
            steps: cfg.pgd_steps,
            step_size: cfg.step_size(),
            start,
        }
    }
}

/// Uniform sample from the radius-`radius` ball restricted to the first `active` coordinates.
pub fn sample_ball(active: usize, radius: f64, norm: NormKind, rng: &mut StreamRng) -> Perturbation {
    let mut p = Perturbation::zeros();
    if active == 0 || radius == 0.0 {
        return p;
    }
    let v = &mut p.delta[..active];
    match norm {
        NormKind::L2 => {
            for x in v.iter_mut() {
                *x = StandardNormal.sample(rng);
            }
            let n = norm2(v);
            let r = radius * rng.unit().powf(1.0 / active as f64);
            if n > 0.0 {
                v.iter_mut().for_each(|x| *x *= r / n);
            }
        }
        NormKind::Linf => v.iter_mut().for_each(|x| *x = rng.uniform(-radius, radius)),
    }
    p
}

/// Steepest-ascent PGD: each step moves `step_size` along the normalized
/// gradient (sign for L∞), then projects back onto the ball.
pub fn pgd_ascent(
    params: &PgdParams,
    active: usize,
    rng: &mut StreamRng,
    mut grad_fn: impl FnMut(&Perturbation) -> Result<Vec<f64>>,
) -> Result<Perturbation> {
    if params.steps == 0 {
        return Ok(Perturbation::zeros());
    }
    let mut delta = match params.start {
        PgdStart::Zero => Perturbation::zeros(),
        PgdStart::Random => sample_ball(active, params.radius, params.norm, rng),
    };
    for _ in 0..params.steps {
        let g = grad_fn(&delta)?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(SeatError::Numeric("non-finite PGD gradient".into()));
        }
        match params.norm {
            NormKind::L2 => {
                let n = norm2(&g);
                if n > 0.0 {
                    for (d, gi) in delta.delta.iter_mut().zip(&g) {
                        *d += params.step_size * gi / n;
                    }
                }
            }
            NormKind::Linf => {
                for (d, gi) in delta.delta.iter_mut().zip(&g) {
                    *d += params.step_size * sign(*gi);
                }
            }
        }
        project(&mut delta.delta, params.radius, params.norm);
    }
    Ok(delta)
}

fn batch_delta_grad(
    scorer: &AttentionScorer,
    batch: &[CachedExample],
    delta: &Perturbation,
    renormalize: bool,
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    let mut g = vec![0.0; MAX_SEQ_LEN];
    let mut gi = vec![0.0; MAX_SEQ_LEN];
    let n = batch.len() as f64;
    for ex in batch {
        gi.iter_mut().for_each(|x| *x = 0.0);
        example_terms(scorer, ex, &delta.delta, 1, renormalize, weights, None, Some(&mut gi[..ex.len()]))?;
        for (a, b) in g.iter_mut().zip(&gi) {
            *a += b / n;
        }
    }
    Ok(g)
}

/// Batch-shared `δ*` maximizing mean `D2(y(w̃), y(w̃ + δ))` over the ball.
///
/// `δ = 0` is a stationary point of `D2`, so the ascent starts from a random
/// point of the ball; `K = 0` returns zero.
pub fn pgd_inner(
    scorer: &AttentionScorer,
    batch: &[CachedExample],
    cfg: &SeatConfig,
    rng: &mut StreamRng,
) -> Result<Perturbation> {
    let active = batch.iter().map(CachedExample::len).max().unwrap_or(0);
    let weights = LossWeights {
        d2: 1.0,
        ..LossWeights::default()
    };
    pgd_ascent(&PgdParams::from_config(cfg, PgdStart::Random), active, rng, |d| {
        batch_delta_grad(scorer, batch, d, cfg.renormalize, &weights)
    })
}

/// Batch-shared `δ*` maximizing mean label cross-entropy, started at zero.
pub fn pgd_label_attack(
    scorer: &AttentionScorer,
    batch: &[CachedExample],
    cfg: &SeatConfig,
    rng: &mut StreamRng,
) -> Result<Perturbation> {
    let active = batch.iter().map(CachedExample::len).max().unwrap_or(0);
    let weights = LossWeights {
        adv_ce: 1.0,
        ..LossWeights::default()
    };
    pgd_ascent(&PgdParams::from_config(cfg, PgdStart::Zero), active, rng, |d| {
        batch_delta_grad(scorer, batch, d, cfg.renormalize, &weights)
    })
}

/// Batch means of every loss term at `δ`.
pub fn batch_terms(
    scorer: &AttentionScorer,
    batch: &[CachedExample],
    delta: &Perturbation,
    k: usize,
    renormalize: bool,
) -> Result<Terms> {
    let mut acc = Terms::default();
    let n = batch.len() as f64;
    for ex in batch {
        let t = example_terms(scorer, ex, &delta.delta, k, renormalize, &LossWeights::default(), None, None)?;
        acc.add_scaled(&t, 1.0 / n);
    }
    Ok(acc)
}

/// Value of the SEAT objective on a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub total: f64,
    pub d1: f64,
    pub d2: f64,
    pub topk: f64,
}

/// `mean[D1 + λ1·D2(·, δ*) + λ2·L_topk]` and its components.
pub fn seat_objective(
    scorer: &AttentionScorer,
    batch: &[CachedExample],
    delta: &Perturbation,
    cfg: &SeatConfig,
) -> Result<Objective> {
    let t = batch_terms(scorer, batch, delta, cfg.k, cfg.renormalize)?;
    Ok(Objective {
        total: t.d1 + cfg.lambda1 * t.d2 + cfg.lambda2 * t.topk,
        d1: t.d1,
        d2: t.d2,
        topk: t.topk,
    })
}

// ---------------------------------------------------------------------------
// outer loops

/// Per-epoch means of the loss terms, measured before each update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub d1: f64,
    pub d2: f64,
    pub topk: f64,
    pub clean_ce: f64,
    pub adv_ce: f64,
    pub overlap: f64,
}

#[derive(Debug, Clone)]
pub struct ScorerOutcome {
    pub scorer: AttentionScorer,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Method {
    Seat,
    RandomPerturbation,
    AdversarialTraining,
}

impl Method {
    fn label(self) -> &'static str {
        match self {
            Method::Seat => "seat",
            Method::RandomPerturbation => "attention-rp",
            Method::AdversarialTraining => "attention-at",
        }
    }
}

fn train_scorer(
    base: &AttentionModel,
    train: &[Example],
    cfg: &SeatConfig,
    seed: u64,
    method: Method,
) -> Result<ScorerOutcome> {
    cfg.validate()?;
    let cached = cache_examples(base, train)?;
    if cached.is_empty() {
        return Err(SeatError::Argument("training split is empty".into()));
    }
    let mut scorer = base.scorer.clone();
    let mut adam = Adam::new(cfg.lr, 0.9, 0.999, 1e-8);
    let mut order: Vec<usize> = (0..cached.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let sign = if cfg.algorithm1_signs { -1.0 } else { 1.0 };
    let weights = match method {
        Method::Seat => LossWeights {
            d1: 1.0,
            d2: sign * cfg.lambda1,
            topk: sign * cfg.lambda2,
            ..LossWeights::default()
        },
        Method::RandomPerturbation => LossWeights {
            clean_ce: 1.0,
            adv_ce: 1.0,
            ..LossWeights::default()
        },
        Method::AdversarialTraining => LossWeights {
            clean_ce: 1.0,
            adv_ce: cfg.lambda1,
            ..LossWeights::default()
        },
    };
    let tag = method.label();

    for epoch in 0..cfg.epochs {
        let lr = if cfg.lr_decay {
            cfg.lr / ((epoch + 1) as f64).sqrt()
        } else {
            cfg.lr
        };
        adam.lr = lr;
        let mut shuffle = StreamRng::derive(seed, &format!("{tag}-shuffle"), epoch as u64);
        order.shuffle(&mut shuffle);
        let mut stats = Terms::default();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<CachedExample> = chunk.iter().map(|&i| cached[i].clone()).collect();
            let mut rng = StreamRng::derive(seed, &format!("{tag}-delta"), epoch as u64)
                .child("batch", b as u64);
            let active = batch.iter().map(CachedExample::len).max().unwrap_or(0);
            let delta = match method {
                Method::Seat if cfg.lambda1 != 0.0 => pgd_inner(&scorer, &batch, cfg, &mut rng)?,
                Method::Seat => Perturbation::zeros(),
                Method::RandomPerturbation => sample_ball(active, cfg.radius, cfg.norm, &mut rng),
                Method::AdversarialTraining if cfg.lambda1 != 0.0 => {
                    pgd_label_attack(&scorer, &batch, cfg, &mut rng)?
                }
                Method::AdversarialTraining => Perturbation::zeros(),
            };
            let n = batch.len() as f64;
            let mut grad = scorer.zeros_like();
            for ex in &batch {
                let t = example_terms(
                    &scorer,
                    ex,
                    &delta.delta,
                    cfg.k,
                    cfg.renormalize,
                    &weights,
                    Some(&mut grad),
                    None,
                )?;
                stats.add_scaled(&t, 1.0 / cached.len() as f64);
            }
            for s in grad.slices_mut() {
                s.iter_mut().for_each(|x| *x /= n);
            }
            if !grad.is_finite() {
                return Err(SeatError::Training(format!("{tag}: non-finite gradient in epoch {epoch}")));
            }
            let grads = grad.slices();
            match cfg.optimizer {
                OuterOptimizer::Sgd => sgd_step(lr, scorer.slices_mut(), &grads),
                OuterOptimizer::Adam => adam.step(scorer.slices_mut(), &grads),
            }
            if !scorer.is_finite() {
                return Err(SeatError::Training(format!("{tag}: scorer diverged in epoch {epoch}")));
            }
        }
        log::debug!(
            "{tag} epoch {epoch}: d1 {:.6} d2 {:.6} topk {:.6} overlap {:.4}",
            stats.d1,
            stats.d2,
            stats.topk,
            stats.overlap
        );
        history.push(EpochStats {
            d1: stats.d1,
            d2: stats.d2,
            topk: stats.topk,
            clean_ce: stats.clean_ce,
            adv_ce: stats.adv_ce,
            overlap: stats.overlap,
        });
    }
    Ok(ScorerOutcome { scorer, history })
}

/// Finds a stable and explainable replacement for the base model's scorer.
/// The trunk (embeddings, encoder, decoder) is never modified.
pub fn train_seat(base: &AttentionModel, train: &[Example], cfg: &SeatConfig, seed: u64) -> Result<ScorerOutcome> {
    train_scorer(base, train, cfg, seed, Method::Seat)
}

/// Continued scorer training on clean plus randomly perturbed attention.
pub fn train_attention_rp(
    base: &AttentionModel,
    train: &[Example],
    cfg: &SeatConfig,
    seed: u64,
) -> Result<ScorerOutcome> {
    train_scorer(base, train, cfg, seed, Method::RandomPerturbation)
}

/// Continued scorer training on clean plus `λ1` times adversarially perturbed
/// attention (PGD on label cross-entropy).
pub fn train_attention_at(
    base: &AttentionModel,
    train: &[Example],
    cfg: &SeatConfig,
    seed: u64,
) -> Result<ScorerOutcome> {
    train_scorer(base, train, cfg, seed, Method::AdversarialTraining)
}
