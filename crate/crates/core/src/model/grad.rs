//! Reverse-mode gradients for the attention classifier, derived by hand.

use super::{
    logistic, pre_activation, softmax, AttentionModel, AttentionScorer, DecoderParams,
    EncoderParams, FrozenMask, ScoreTrace,
};
use crate::corpus::{Example, Vocabulary};
use crate::error::{Result, SeatError};
use crate::linalg::{axpy, dot, Mat};

/// Gradient container shaped like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub embeddings: Mat,
    pub encoder: EncoderParams,
    pub scorer: AttentionScorer,
    pub decoder: DecoderParams,
}

impl ModelGrads {
    pub fn zeros(model: &AttentionModel) -> Self {
        let dims = model.dims();
        Self {
            embeddings: Mat::zeros(dims.vocab, dims.embed),
            encoder: EncoderParams::zeros(dims.embed, dims.hidden),
            scorer: model.scorer.zeros_like(),
            decoder: DecoderParams::zeros(dims.hidden),
        }
    }

    pub fn apply_mask(&mut self, mask: FrozenMask) {
        if mask.embeddings {
            self.embeddings.fill(0.0);
        }
        if mask.encoder {
            for s in self.encoder.slices_mut() {
                s.fill(0.0);
            }
        }
        if mask.scorer {
            for s in self.scorer.slices_mut() {
                s.fill(0.0);
            }
        }
        if mask.decoder {
            for s in self.decoder.slices_mut() {
                s.fill(0.0);
            }
        }
    }

    /// All slices in the order embeddings, encoder, scorer, decoder.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.embeddings.as_slice()];
        out.extend(self.encoder.slices());
        out.extend(self.scorer.slices());
        out.extend(self.decoder.slices());
        out
    }

    /// Slices of the components not frozen under `mask`, same order as
    /// [`AttentionModel::trainable_slices_mut`].
    pub fn trainable_slices(&self, mask: FrozenMask) -> Vec<&[f64]> {
        let mut out = Vec::new();
        if !mask.embeddings {
            out.push(self.embeddings.as_slice());
        }
        if !mask.encoder {
            out.extend(self.encoder.slices());
        }
        if !mask.scorer {
            out.extend(self.scorer.slices());
        }
        if !mask.decoder {
            out.extend(self.decoder.slices());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .map(|s| dot(s, s))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

impl AttentionModel {
    pub fn trainable_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mask = self.frozen;
        let mut out = Vec::new();
        if !mask.embeddings {
            out.push(self.embeddings.matrix.as_mut_slice());
        }
        if !mask.encoder {
            out.extend(self.encoder.slices_mut());
        }
        if !mask.scorer {
            out.extend(self.scorer.slices_mut());
        }
        if !mask.decoder {
            out.extend(self.decoder.slices_mut());
        }
        out
    }
}

/// Forward intermediates needed by [`backprop`].
#[derive(Debug, Clone)]
pub struct Trace {
    pub x_e: Mat,
    pub h: Mat,
    pub scores: ScoreTrace,
    pub w: Vec<f64>,
    pub z: f64,
}

impl Trace {
    pub fn new(model: &AttentionModel, scorer: &AttentionScorer, x_e: Mat) -> Result<Self> {
        let h = super::encode(&model.encoder, &x_e)?;
        let scores = scorer.scores(&h);
        let w = softmax(&scores.scores).w;
        let z = pre_activation(&model.decoder, &h, &w);
        if !z.is_finite() {
            return Err(SeatError::Numeric("non-finite pre-activation".into()));
        }
        Ok(Self {
            x_e,
            h,
            scores,
            w,
            z,
        })
    }

    pub fn p(&self) -> f64 {
        logistic(self.z)
    }
}

/// `dφ_t = w_t (dw_t − Σ_j w_j dw_j)`.
pub fn softmax_backward(w: &[f64], dw: &[f64]) -> Vec<f64> {
    let inner = dot(w, dw);
    w.iter().zip(dw).map(|(wi, di)| wi * (di - inner)).collect()
}

/// Accumulates scorer gradients for score gradients `dphi`; adds `∂/∂h` into
/// `dh` when given.
pub fn scorer_backward(
    scorer: &AttentionScorer,
    h: &Mat,
    trace: &ScoreTrace,
    dphi: &[f64],
    grad: &mut AttentionScorer,
    mut dh: Option<&mut Mat>,
) {
    match (scorer, grad) {
        (AttentionScorer::ScaledDot { q }, AttentionScorer::ScaledDot { q: gq }) => {
            let scale = 1.0 / (q.len() as f64).sqrt();
            for (t, &g) in dphi.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                axpy(g * scale, h.row(t), gq);
                if let Some(dh) = dh.as_deref_mut() {
                    axpy(g * scale, q, dh.row_mut(t));
                }
            }
        }
        (
            AttentionScorer::Additive { v, w1, w2, q },
            AttentionScorer::Additive {
                v: gv,
                w1: gw1,
                w2: gw2,
                q: gq,
            },
        ) => {
            let act = trace
                .activations
                .as_ref()
                .expect("additive scorer trace carries activations");
            let m = q.len();
            let mut da_sum = vec![0.0; m];
            let mut da = vec![0.0; m];
            for (t, &g) in dphi.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let u = act.row(t);
                axpy(g, u, gv);
                for j in 0..m {
                    da[j] = g * v[j] * (1.0 - u[j] * u[j]);
                }
                gw1.add_outer(&da, h.row(t), 1.0);
                if let Some(dh) = dh.as_deref_mut() {
                    w1.add_tmatvec(&da, dh.row_mut(t));
                }
                axpy(1.0, &da, &mut da_sum);
            }
            gw2.add_outer(&da_sum, q, 1.0);
            w2.add_tmatvec(&da_sum, gq);
        }
        _ => panic!("gradient container variant does not match scorer"),
    }
}

/// Backpropagates `dz = ∂loss/∂z` through decoder, attention and encoder.
/// Accumulates into `grads` (embedding rows excluded) and returns `∂loss/∂x_e`.
pub fn backprop(
    model: &AttentionModel,
    scorer: &AttentionScorer,
    trace: &Trace,
    dz: f64,
    grads: &mut ModelGrads,
) -> Mat {
    let (s, m) = (trace.h.rows(), trace.h.cols());
    let h = &trace.h;
    let theta = &model.decoder.theta;

    let mut h_w = vec![0.0; m];
    h.add_tmatvec(&trace.w, &mut h_w);
    axpy(dz, &h_w, &mut grads.decoder.theta);
    grads.decoder.bias += dz;

    let mut dh = Mat::zeros(s, m);
    let mut dw = vec![0.0; s];
    for t in 0..s {
        dw[t] = dz * dot(h.row(t), theta);
        axpy(dz * trace.w[t], theta, dh.row_mut(t));
    }
    let dphi = softmax_backward(&trace.w, &dw);
    scorer_backward(scorer, h, &trace.scores, &dphi, &mut grads.scorer, Some(&mut dh));

    let enc = &model.encoder;
    let d = trace.x_e.cols();
    let mut dx = Mat::zeros(s, d);
    let mut carry = vec![0.0; m];
    let mut dpre = vec![0.0; m];
    for t in (0..s).rev() {
        let ht = h.row(t);
        for j in 0..m {
            dpre[j] = (dh.get(t, j) + carry[j]) * (1.0 - ht[j] * ht[j]);
        }
        grads.encoder.w_xh.add_outer(trace.x_e.row(t), &dpre, 1.0);
        if t > 0 {
            grads.encoder.w_hh.add_outer(h.row(t - 1), &dpre, 1.0);
        }
        axpy(1.0, &dpre, &mut grads.encoder.b_h);
        enc.w_xh.add_matvec(&dpre, dx.row_mut(t));
        carry.iter_mut().for_each(|c| *c = 0.0);
        enc.w_hh.add_matvec(&dpre, &mut carry);
    }
    dx
}

/// Mean BCE over `batch` and its exact gradient. Frozen components get zeros.
pub fn grad_all(model: &AttentionModel, batch: &[Example]) -> Result<(f64, ModelGrads)> {
    if batch.is_empty() {
        return Err(SeatError::Argument("gradient batch is empty".into()));
    }
    let n = batch.len() as f64;
    let mut grads = ModelGrads::zeros(model);
    let mut loss = 0.0;
    for ex in batch {
        let trace = Trace::new(model, &model.scorer, model.embeddings.lookup(&ex.token_ids))?;
        let p = trace.p();
        loss += super::bce(&[p, 1.0 - p], ex.label) / n;
        let dz = (p - f64::from(ex.label)) / n;
        let dx = backprop(model, &model.scorer, &trace, dz, &mut grads);
        if !model.frozen.embeddings {
            for (t, &id) in ex.token_ids.iter().enumerate() {
                if id != Vocabulary::PAD {
                    axpy(1.0, dx.row(t), grads.embeddings.row_mut(id));
                }
            }
        }
    }
    grads.apply_mask(model.frozen);
    if !grads.is_finite() {
        return Err(SeatError::Numeric("non-finite gradient".into()));
    }
    Ok((loss, grads))
}
