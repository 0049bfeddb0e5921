//! Recurrent encoder, additive / scaled dot-product attention and logistic
//! decoder, with exact forward and backward passes.

mod grad;
mod train;

use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingTable;
use crate::error::{Result, SeatError};
use crate::linalg::{dot, Mat};
use crate::rng::StreamRng;

pub use grad::{backprop, grad_all, scorer_backward, softmax_backward, ModelGrads, Trace};
pub use train::{test_f1, train_base, TrainConfig, TrainOutcome};

/// Probability clamp used by every cross-entropy in the crate.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Additive,
    ScaledDot,
}

/// `h_t = tanh(W_xhᵀ x_t + W_hhᵀ h_{t-1} + b_h)`, `h_0 = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `d × m`
    pub w_xh: Mat,
    /// `m × m`
    pub w_hh: Mat,
    pub b_h: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            w_xh: Mat::zeros(d, m),
            w_hh: Mat::zeros(m, m),
            b_h: vec![0.0; m],
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_h.len()
    }

    pub fn input_dim(&self) -> usize {
        self.w_xh.rows()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        vec![self.w_xh.as_slice(), self.w_hh.as_slice(), &self.b_h]
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_xh.as_mut_slice(),
            self.w_hh.as_mut_slice(),
            &mut self.b_h,
        ]
    }
}

/// Similarity function mapping hidden states to one score per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum AttentionScorer {
    /// `φ_t = vᵀ tanh(W1 h_t + W2 Q)`
    Additive {
        v: Vec<f64>,
        w1: Mat,
        w2: Mat,
        q: Vec<f64>,
    },
    /// `φ_t = h_t · Q / √m`
    ScaledDot { q: Vec<f64> },
}

impl AttentionScorer {
    pub fn zeros(kind: ScorerKind, m: usize) -> Self {
        match kind {
            ScorerKind::Additive => AttentionScorer::Additive {
                v: vec![0.0; m],
                w1: Mat::zeros(m, m),
                w2: Mat::zeros(m, m),
                q: vec![0.0; m],
            },
            ScorerKind::ScaledDot => AttentionScorer::ScaledDot { q: vec![0.0; m] },
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kind(), self.hidden())
    }

    pub fn kind(&self) -> ScorerKind {
        match self {
            AttentionScorer::Additive { .. } => ScorerKind::Additive,
            AttentionScorer::ScaledDot { .. } => ScorerKind::ScaledDot,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            AttentionScorer::Additive { q, .. } | AttentionScorer::ScaledDot { q } => q.len(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        match self {
            AttentionScorer::Additive { v, w1, w2, q } => {
                vec![v, w1.as_slice(), w2.as_slice(), q]
            }
            AttentionScorer::ScaledDot { q } => vec![q],
        }
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            AttentionScorer::Additive { v, w1, w2, q } => {
                vec![v, w1.as_mut_slice(), w2.as_mut_slice(), q]
            }
            AttentionScorer::ScaledDot { q } => vec![q],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Scores of every position of `h`, plus what the backward pass needs.
    pub fn scores(&self, h: &Mat) -> ScoreTrace {
        let s = h.rows();
        match self {
            AttentionScorer::Additive { v, w1, w2, q } => {
                let m = q.len();
                let mut query = vec![0.0; m];
                w2.add_matvec(q, &mut query);
                let mut act = Mat::zeros(s, m);
                let mut scores = Vec::with_capacity(s);
                for t in 0..s {
                    let row = act.row_mut(t);
                    row.copy_from_slice(&query);
                    w1.add_matvec(h.row(t), row);
                    row.iter_mut().for_each(|a| *a = a.tanh());
                    scores.push(dot(v, row));
                }
                ScoreTrace {
                    scores,
                    activations: Some(act),
                }
            }
            AttentionScorer::ScaledDot { q } => {
                let scale = 1.0 / (q.len() as f64).sqrt();
                let scores = (0..s).map(|t| dot(h.row(t), q) * scale).collect();
                ScoreTrace {
                    scores,
                    activations: None,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    pub scores: Vec<f64>,
    /// `tanh(W1 h_t + W2 Q)` rows for the additive scorer.
    pub activations: Option<Mat>,
}

/// `y = [σ(θ · Σ_t w_t h_t + bias), 1 − σ(…)]`, the distribution over labels {1, 0}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub theta: Vec<f64>,
    pub bias: f64,
}

impl DecoderParams {
    pub fn zeros(m: usize) -> Self {
        Self {
            theta: vec![0.0; m],
            bias: 0.0,
        }
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.theta, std::slice::from_mut(&mut self.bias)]
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        vec![&self.theta, std::slice::from_ref(&self.bias)]
    }

    /// `θ · h_t` for every position; the decoder is linear in `w` through these.
    pub fn projections(&self, h: &Mat) -> Vec<f64> {
        (0..h.rows()).map(|t| dot(&self.theta, h.row(t))).collect()
    }
}

/// Per-component trainability flags. Frozen parameters are never written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenMask {
    pub embeddings: bool,
    pub encoder: bool,
    pub scorer: bool,
    pub decoder: bool,
}

impl FrozenMask {
    pub const NONE: FrozenMask = FrozenMask {
        embeddings: false,
        encoder: false,
        scorer: false,
        decoder: false,
    };

    /// Only the scorer trains.
    pub const TRUNK: FrozenMask = FrozenMask {
        embeddings: true,
        encoder: true,
        scorer: false,
        decoder: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionModel {
    pub embeddings: EmbeddingTable,
    pub encoder: EncoderParams,
    pub scorer: AttentionScorer,
    pub decoder: DecoderParams,
    pub frozen: FrozenMask,
}

/// Post-softmax attention, or a raw perturbed weight vector when `on_simplex`
/// is false.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub w: Vec<f64>,
    pub on_simplex: bool,
}

impl AttentionWeights {
    pub fn raw(w: Vec<f64>) -> Self {
        Self { w, on_simplex: false }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.w.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl AttentionModel {
    /// Zero-initialized model over `embeddings`.
    pub fn zeros(embeddings: EmbeddingTable, hidden: usize, kind: ScorerKind) -> Self {
        let d = embeddings.dim();
        Self {
            embeddings,
            encoder: EncoderParams::zeros(d, hidden),
            scorer: AttentionScorer::zeros(kind, hidden),
            decoder: DecoderParams::zeros(hidden),
            frozen: FrozenMask::NONE,
        }
    }

    /// Uniform `[−1/√fan_in, 1/√fan_in]` initialization; decoder bias starts at 0.
    pub fn init(embeddings: EmbeddingTable, hidden: usize, kind: ScorerKind, rng: &mut StreamRng) -> Self {
        let mut model = Self::zeros(embeddings, hidden, kind);
        let d = model.embeddings.dim();
        let bound_d = 1.0 / (d as f64).sqrt();
        let bound_m = 1.0 / (hidden as f64).sqrt();
        let mut fill = |xs: &mut [f64], bound: f64| {
            xs.iter_mut().for_each(|x| *x = rng.uniform(-bound, bound));
        };
        fill(model.encoder.w_xh.as_mut_slice(), bound_d);
        fill(model.encoder.w_hh.as_mut_slice(), bound_m);
        fill(&mut model.encoder.b_h, bound_m);
        for s in model.scorer.slices_mut() {
            fill(s, bound_m);
        }
        fill(&mut model.decoder.theta, bound_m);
        model
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.embeddings.len(),
            embed: self.embeddings.dim(),
            hidden: self.encoder.hidden(),
        }
    }

    /// Same trunk, different scorer.
    pub fn with_scorer(&self, scorer: AttentionScorer) -> Result<Self> {
        if scorer.kind() != self.scorer.kind() || scorer.hidden() != self.scorer.hidden() {
            return Err(SeatError::Argument(
                "replacement scorer must match the model's variant and width".into(),
            ));
        }
        Ok(Self {
            scorer,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ModelDims { embed, hidden, .. } = self.dims();
        let ok = self.encoder.input_dim() == embed
            && self.encoder.w_xh.cols() == hidden
            && self.encoder.w_hh.rows() == hidden
            && self.encoder.w_hh.cols() == hidden
            && self.scorer.hidden() == hidden
            && self.decoder.theta.len() == hidden
            && match &self.scorer {
                AttentionScorer::Additive { v, w1, w2, .. } => {
                    v.len() == hidden
                        && (w1.rows(), w1.cols()) == (hidden, hidden)
                        && (w2.rows(), w2.cols()) == (hidden, hidden)
                }
                AttentionScorer::ScaledDot { .. } => true,
            };
        if !ok {
            return Err(SeatError::Data("inconsistent model dimensions".into()));
        }
        let finite = self.embeddings.matrix.is_finite()
            && self.encoder.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
            && self.scorer.is_finite()
            && self.decoder.slices().iter().all(|s| s.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(SeatError::Numeric("model has non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn forward(&self, token_ids: &[usize]) -> Result<(AttentionWeights, [f64; 2])> {
        forward_with(self, &self.scorer, &self.embeddings.lookup(token_ids))
    }

    pub fn predict(&self, token_ids: &[usize]) -> Result<u8> {
        Ok(predicted_label(&self.forward(token_ids)?.1))
    }
}

pub fn encode(enc: &EncoderParams, x_e: &Mat) -> Result<Mat> {
    let m = enc.hidden();
    let mut h = Mat::zeros(x_e.rows(), m);
    let mut prev = vec![0.0; m];
    for t in 0..x_e.rows() {
        let mut pre = enc.b_h.clone();
        enc.w_xh.add_tmatvec(x_e.row(t), &mut pre);
        enc.w_hh.add_tmatvec(&prev, &mut pre);
        for (dst, p) in h.row_mut(t).iter_mut().zip(&pre) {
            *dst = p.tanh();
        }
        prev.copy_from_slice(h.row(t));
    }
    if !h.is_finite() {
        return Err(SeatError::Numeric("encoder produced non-finite hidden states".into()));
    }
    Ok(h)
}

pub fn attend_scores(scorer: &AttentionScorer, h: &Mat) -> Vec<f64> {
    scorer.scores(h).scores
}

pub fn softmax(scores: &[f64]) -> AttentionWeights {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    AttentionWeights { w, on_simplex: true }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `θ · Σ_t w_t h_t + bias`; `w` may be any real vector of length `s`.
pub fn pre_activation(dec: &DecoderParams, h: &Mat, w: &[f64]) -> f64 {
    debug_assert_eq!(w.len(), h.rows());
    let mut hw = vec![0.0; dec.theta.len()];
    h.add_tmatvec(w, &mut hw);
    dot(&dec.theta, &hw) + dec.bias
}

pub fn decode(dec: &DecoderParams, h: &Mat, w: &[f64]) -> [f64; 2] {
    distribution(pre_activation(dec, h, w))
}

/// `[p, 1 − p]` for `p = σ(z)`.
pub fn distribution(z: f64) -> [f64; 2] {
    let p = logistic(z);
    [p, 1.0 - p]
}

/// Index into `[p(1), p(0)]` for a label.
pub fn class_index(label: u8) -> usize {
    if label == 1 {
        0
    } else {
        1
    }
}

/// Label with the larger probability; an exact 0.5 counts as label 0.
pub fn predicted_label(y: &[f64; 2]) -> u8 {
    u8::from(y[0] > y[1])
}

pub fn bce(y: &[f64; 2], label: u8) -> f64 {
    -y[class_index(label)].clamp(PROB_EPS, 1.0).ln()
}

/// Cross-entropy `−Σ_c target_c ln pred_c` with the usual clamp.
pub fn cross_entropy(target: &[f64; 2], pred: &[f64; 2]) -> f64 {
    -(target[0] * pred[0].clamp(PROB_EPS, 1.0).ln() + target[1] * pred[1].clamp(PROB_EPS, 1.0).ln())
}

/// Forward pass from dense token embeddings with an explicit scorer.
/// An empty sequence yields no weights and the `[0.5, 0.5]` prediction.
pub fn forward_with(
    model: &AttentionModel,
    scorer: &AttentionScorer,
    x_e: &Mat,
) -> Result<(AttentionWeights, [f64; 2])> {
    if x_e.rows() == 0 {
        return Ok((
            AttentionWeights {
                w: Vec::new(),
                on_simplex: true,
            },
            [0.5, 0.5],
        ));
    }
    let h = encode(&model.encoder, x_e)?;
    let w = softmax(&attend_scores(scorer, &h));
    let y = decode(&model.decoder, &h, &w.w);
    if !y[0].is_finite() {
        return Err(SeatError::Numeric("non-finite prediction".into()));
    }
    Ok((w, y))
}
