//! Divergences, classification and faithfulness metrics, and the empirical
//! stability/explainability certificate of a replacement scorer.

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Result, SeatError};
use crate::linalg::{axpy, Mat};
use crate::model::{
    backprop, forward_with, predicted_label, AttentionModel, AttentionScorer, ModelGrads, Trace,
};
use crate::rng::StreamRng;
use crate::seat::{
    example_terms, pgd_ascent, topk_indices, CachedExample, LossWeights, PgdParams, PgdStart,
};

fn same_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(SeatError::Argument(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// `Σ p_i ln(p_i / q_i)` in nats, `q` clamped at 1e-12 and `0 ln 0 = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi.max(1e-12)).ln())
        .sum())
}

pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl(p, &m)? + 0.5 * kl(q, &m)?).max(0.0))
}

pub fn tvd(p: &[f64], q: &[f64]) -> Result<f64> {
    same_len(p, q)?;
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// F1 of the positive class; 0 when precision + recall is 0.
pub fn f1(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(SeatError::Argument(
            "f1 needs equal-length, non-empty inputs".into(),
        ));
    }
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fne += 1,
            _ => {}
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fne) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub positions: Vec<usize>,
}

/// Top-`k_r` attention positions (same ordering rule as top-k overlap).
pub fn extract_rationale(w: &[f64], k_r: usize) -> Rationale {
    let k = k_r.min(w.len());
    let positions = if k == 0 {
        Vec::new()
    } else {
        topk_indices(w, k).expect("k within range")
    };
    Rationale { positions }
}

fn predict_class(model: &AttentionModel, scorer: &AttentionScorer, ids: &[usize]) -> Result<[f64; 2]> {
    Ok(forward_with(model, scorer, &model.embeddings.lookup(ids))?.1)
}

fn rationale_split(
    model: &AttentionModel,
    scorer: &AttentionScorer,
    x: &Example,
    k_r: usize,
) -> Result<([f64; 2], usize, Vec<usize>, Vec<usize>)> {
    let (w, y) = forward_with(model, scorer, &model.embeddings.lookup(&x.token_ids))?;
    let j = predicted_label(&y);
    let r = extract_rationale(&w.w, k_r);
    let mut in_r = vec![false; x.len()];
    for &p in &r.positions {
        in_r[p] = true;
    }
    let kept: Vec<usize> = x.token_ids.iter().zip(&in_r).filter(|(_, r)| **r).map(|(t, _)| *t).collect();
    let removed: Vec<usize> = x.token_ids.iter().zip(&in_r).filter(|(_, r)| !**r).map(|(t, _)| *t).collect();
    Ok((y, usize::from(j == 0), kept, removed))
}

/// `m(x)_j − m(x \ r)_j` for the predicted class `j`.
pub fn comprehensiveness(model: &AttentionModel, scorer: &AttentionScorer, x: &Example, k_r: usize) -> Result<f64> {
    let (y, j, _, rest) = rationale_split(model, scorer, x, k_r)?;
    Ok(y[j] - predict_class(model, scorer, &rest)?[j])
}

/// `m(x)_j − m(r)_j` for the predicted class `j`.
pub fn sufficiency(model: &AttentionModel, scorer: &AttentionScorer, x: &Example, k_r: usize) -> Result<f64> {
    let (y, j, kept, _) = rationale_split(model, scorer, x, k_r)?;
    Ok(y[j] - predict_class(model, scorer, &kept)?[j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityConfig {
    /// Rationale sizes as fractions of the sentence length.
    pub sizes: Vec<f64>,
    pub steps: usize,
    pub eps_max: f64,
    /// Relative tolerance of the radius bisection.
    pub tol: f64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            sizes: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            steps: 50,
            eps_max: 10.0,
            tol: 1e-2,
        }
    }
}

impl SensitivityConfig {
    /// Probe budget of one bisection.
    pub fn max_probes(&self) -> usize {
        ((self.eps_max / self.tol).log2().ceil() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityResult {
    /// Flip radius per rationale size (`eps_max` when nothing flips).
    pub eps: Vec<f64>,
    /// Attacks run per size.
    pub probes: Vec<usize>,
    pub auc: f64,
}

/// PGD in the Frobenius ball of radius `eps` over the embedding rows listed in
/// `rows`, maximizing cross-entropy against class `label`. Returns whether the
/// prediction moved away from `label`.
pub fn embedding_attack(
    model: &AttentionModel,
    scorer: &AttentionScorer,
    x_e: &Mat,
    rows: &[usize],
    label: u8,
    eps: f64,
    steps: usize,
) -> Result<bool> {
    let step = 2.0 * eps / steps.max(1) as f64;
    let mut delta = Mat::zeros(x_e.rows(), x_e.cols());
    let mut mask = vec![false; x_e.rows()];
    for &r in rows {
        mask[r] = true;
    }
    let mut grads = ModelGrads::zeros(model);
    let shifted = |delta: &Mat| {
        let mut m = x_e.clone();
        axpy(1.0, delta.as_slice(), m.as_mut_slice());
        m
    };
    for _ in 0..steps {
        let trace = Trace::new(model, scorer, shifted(&delta))?;
        let p = trace.p();
        if predicted_label(&[p, 1.0 - p]) != label {
            return Ok(true);
        }
        let dz = p - f64::from(label);
        let mut g = backprop(model, scorer, &trace, dz, &mut grads);
        for (t, keep) in mask.iter().enumerate() {
            if !keep {
                g.row_mut(t).fill(0.0);
            }
        }
        let gn = crate::linalg::norm2(g.as_slice());
        if gn == 0.0 || !gn.is_finite() {
            break;
        }
        axpy(step / gn, g.as_slice(), delta.as_mut_slice());
        let dn = crate::linalg::norm2(delta.as_slice());
        if dn > eps {
            delta.as_mut_slice().iter_mut().for_each(|v| *v *= eps / dn);
        }
    }
    let (_, y) = forward_with(model, scorer, &shifted(&delta))?;
    Ok(predicted_label(&y) != label)
}

/// Smallest radius at which [`embedding_attack`] flips, by bisection on
/// `[0, eps_max]`. Returns the radius and the number of attacks run.
pub fn flip_radius(
    model: &AttentionModel,
    scorer: &AttentionScorer,
    x: &Example,
    rows: &[usize],
    cfg: &SensitivityConfig,
) -> Result<(f64, usize)> {
    let x_e = model.embeddings.lookup(&x.token_ids);
    let (_, y) = forward_with(model, scorer, &x_e)?;
    let label = predicted_label(&y);
    let budget = cfg.max_probes();
    let mut probes = 1;
    if !embedding_attack(model, scorer, &x_e, rows, label, cfg.eps_max, cfg.steps)? {
        return Ok((cfg.eps_max, probes));
    }
    let (mut lo, mut hi) = (0.0, cfg.eps_max);
    while hi - lo > cfg.tol * hi && probes < budget {
        let mid = 0.5 * (lo + hi);
        probes += 1;
        if embedding_attack(model, scorer, &x_e, rows, label, mid, cfg.steps)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok((hi, probes))
}

/// Trapezoid area under `(x, y)` in the given order.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum()
}

pub fn sensitivity(
    model: &AttentionModel,
    scorer: &AttentionScorer,
    x: &Example,
    cfg: &SensitivityConfig,
) -> Result<SensitivityResult> {
    if cfg.sizes.is_empty() || cfg.sizes.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(SeatError::Argument("rationale sizes must lie in (0, 1]".into()));
    }
    let (w, _) = forward_with(model, scorer, &model.embeddings.lookup(&x.token_ids))?;
    let s = x.len();
    let mut eps = Vec::with_capacity(cfg.sizes.len());
    let mut probes = Vec::with_capacity(cfg.sizes.len());
    for &f in &cfg.sizes {
        let k_r = ((f * s as f64).ceil() as usize).clamp(1, s);
        let rows = extract_rationale(&w.w, k_r).positions;
        let (e, n) = flip_radius(model, scorer, x, &rows, cfg)?;
        eps.push(e);
        probes.push(n);
    }
    let auc = trapezoid(&cfg.sizes, &eps);
    Ok(SensitivityResult { eps, probes, auc })
}

/// Empirical bounds of a replacement scorer over a set of examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeatCertificate {
    /// Largest `D1(y(w̃), y(w))`.
    pub gamma_hat: f64,
    /// Smallest top-k overlap with the base attention.
    pub beta_hat: f64,
    /// Largest `D2(y(w̃), y(w̃ + δ))` found by PGD; a lower bound on the true maximum.
    pub alpha_hat: f64,
    pub radius: f64,
    pub k: usize,
}

pub fn certify(
    base: &AttentionModel,
    scorer: &AttentionScorer,
    examples: &[Example],
    k: usize,
    pgd: &PgdParams,
    renormalize: bool,
    seed: u64,
) -> Result<SeatCertificate> {
    if examples.is_empty() {
        return Err(SeatError::Argument("certificate needs at least one example".into()));
    }
    let weights = LossWeights {
        d2: 1.0,
        ..LossWeights::default()
    };
    let (mut gamma, mut beta, mut alpha) = (0.0f64, 1.0f64, 0.0f64);
    for (i, ex) in examples.iter().enumerate() {
        let cached = CachedExample::new(base, ex)?;
        let zero = vec![0.0; cached.len()];
        let clean = example_terms(scorer, &cached, &zero, k, renormalize, &LossWeights::default(), None, None)?;
        gamma = gamma.max(clean.d1);
        beta = beta.min(clean.overlap);
        let mut rng = StreamRng::derive(seed, "certify-pgd", i as u64);
        let params = PgdParams {
            start: PgdStart::Random,
            ..*pgd
        };
        let delta = pgd_ascent(&params, cached.len(), &mut rng, |d| {
            let mut g = vec![0.0; d.delta.len()];
            example_terms(scorer, &cached, &d.delta, 1, renormalize, &weights, None, Some(&mut g[..cached.len()]))?;
            Ok(g)
        })?;
        let attacked = example_terms(scorer, &cached, &delta.delta, k, renormalize, &LossWeights::default(), None, None)?;
        alpha = alpha.max(attacked.d2.max(clean.d2));
    }
    Ok(SeatCertificate {
        gamma_hat: gamma,
        beta_hat: beta,
        alpha_hat: alpha,
        radius: pgd.radius,
        k,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub sum: f64,
    pub n: usize,
}

/// Sequential sum and mean over `values`.
pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(SeatError::Argument("cannot aggregate zero values".into()));
    }
    let sum: f64 = values.iter().sum();
    Ok(Aggregate {
        mean: sum / values.len() as f64,
        sum,
        n: values.len(),
    })
}

/// One method's evaluation. Interpretability fields are absent from pure
/// stability runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub jsd_mean: f64,
    pub jsd_sum: f64,
    pub tvd_mean: f64,
    pub tvd_sum: f64,
    pub f1: f64,
    pub comp: Option<f64>,
    pub suff: Option<f64>,
    pub sens_auc: Option<f64>,
    pub n_examples: usize,
}
