//! Analytic gradients against central finite differences. Each check
//! returns the worst relative error or the first failing instance.

use rand::Rng;
use seat_core::corpus::MAX_SEQ_LEN;
use seat_core::model::{grad_all, softmax, AttentionModel, AttentionScorer, FrozenMask, ScorerKind};
use seat_core::rng::StreamRng;
use seat_core::seat::{
    example_terms, project, project_simplex, topk_surrogate, topk_surrogate_subgrad, CachedExample, LossWeights,
    NormKind, Terms,
};

use super::*;

pub const INSTANCES: usize = 100;
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-6;
/// Instances closer than this to a top-k set change or a kink are rejected.
const TIE_GAP: f64 = 1e-4;

fn weighted(w: &LossWeights, t: &Terms) -> f64 {
    w.d1 * t.d1 + w.d2 * t.d2 + w.topk * t.topk + w.clean_ce * t.clean_ce + w.adv_ce * t.adv_ce
}

fn random_weights(rng: &mut StreamRng) -> LossWeights {
    LossWeights {
        d1: rng.uniform(0.1, 2.0),
        d2: rng.uniform(0.1, 2.0),
        topk: rng.uniform(0.1, 2.0),
        clean_ce: rng.uniform(0.1, 2.0),
        adv_ce: rng.uniform(0.1, 2.0),
    }
}

/// Smallest gap between the k-th and (k+1)-th largest entries.
fn boundary_gap(v: &[f64], k: usize) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    if k >= s.len() {
        f64::INFINITY
    } else {
        s[k - 1] - s[k]
    }
}

fn near_tie(base_w: &[f64], w: &[f64], k: usize) -> bool {
    let k = k.min(w.len());
    boundary_gap(base_w, k) < TIE_GAP
        || boundary_gap(w, k) < TIE_GAP
        || base_w.iter().zip(w).any(|(a, b)| (a - b).abs() < TIE_GAP)
}

/// True when some coordinate of `raw` sits near the simplex projection's
/// threshold.
fn near_simplex_kink(raw: &[f64]) -> bool {
    let u = project_simplex(raw);
    let Some(i) = u.iter().position(|&x| x > 0.0) else {
        return true;
    };
    let tau = raw[i] - u[i];
    raw.iter().any(|&r| (r - tau).abs() < TIE_GAP)
}

fn perturbed_scorer(model: &AttentionModel, rng: &mut StreamRng) -> AttentionScorer {
    let mut s = model.scorer.clone();
    for xs in s.slices_mut() {
        xs.iter_mut().for_each(|x| *x += rng.uniform(-0.5, 0.5));
    }
    s
}

fn random_delta(rng: &mut StreamRng, radius: f64) -> Vec<f64> {
    let mut d: Vec<f64> = (0..MAX_SEQ_LEN).map(|_| rng.uniform(-1.0, 1.0)).collect();
    project(&mut d, radius, NormKind::L2);
    d
}

pub fn check_bptt(kind: ScorerKind, seed: u64) -> Result<f64, String> {
    let mut rng = StreamRng::derive(seed, "fd-bptt", 0);
    let mut worst: f64 = 0.0;
    for i in 0..INSTANCES {
        let mut model = tiny_model(kind, seed * 1000 + i as u64);
        model.frozen = FrozenMask::NONE;
        let vocab = model.embeddings.len();
        let n = rng.random_range(1..=3);
        let batch: Vec<_> = (0..n).map(|_| random_example(&mut rng, vocab, 6)).collect();
        let (_, grads) = grad_all(&model, &batch).unwrap();
        let analytic = flatten(grads.trainable_slices(FrozenMask::NONE));
        let x0 = flatten(model.trainable_slices_mut().into_iter().map(|s| &*s).collect());
        let mut probe = model.clone();
        let numeric = central_diff(&x0, H, |x| {
            unflatten(probe.trainable_slices_mut(), x);
            grad_all(&probe, &batch).unwrap().0
        });
        if norm(&numeric) <= 1e-8 {
            return Err(format!("degenerate instance {i}"));
        }
        let e = rel_err(&analytic, &numeric);
        worst = worst.max(e);
        if e > TOL {
            return Err(format!("bptt {kind:?} instance {i}: relative error {e:.3e}"));
        }
    }
    Ok(worst)
}

/// One accepted SEAT instance: frozen trunk cache, replacement scorer, δ.
struct SeatInstance {
    ex: CachedExample,
    scorer: AttentionScorer,
    delta: Vec<f64>,
    k: usize,
    weights: LossWeights,
}

fn seat_instances(kind: ScorerKind, seed: u64, renormalize: bool) -> Vec<SeatInstance> {
    let mut rng = StreamRng::derive(seed, "fd-seat", u64::from(renormalize));
    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < INSTANCES {
        attempts += 1;
        assert!(attempts < 50 * INSTANCES, "too many rejected instances");
        let model = tiny_model(kind, seed * 7919 + attempts as u64);
        let vocab = model.embeddings.len();
        let ex = CachedExample::new(&model, &random_example(&mut rng, vocab, 8)).unwrap();
        let scorer = perturbed_scorer(&model, &mut rng);
        let radius = rng.uniform(0.05, 0.5);
        let delta = random_delta(&mut rng, radius);
        let k = rng.random_range(1..=ex.len());
        let w = softmax(&scorer.scores(&ex.h).scores).w;
        if near_tie(&ex.base_w, &w, k) {
            continue;
        }
        if renormalize {
            let raw: Vec<f64> = w.iter().zip(&delta).map(|(a, b)| a + b).collect();
            if near_simplex_kink(&raw) {
                continue;
            }
        }
        out.push(SeatInstance {
            ex,
            scorer,
            delta,
            k,
            weights: random_weights(&mut rng),
        });
    }
    out
}

pub fn check_scorer_grad(kind: ScorerKind, seed: u64, renormalize: bool) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for (i, inst) in seat_instances(kind, seed, renormalize).iter().enumerate() {
        let mut grad = inst.scorer.zeros_like();
        example_terms(&inst.scorer, &inst.ex, &inst.delta, inst.k, renormalize, &inst.weights, Some(&mut grad), None)
            .unwrap();
        let analytic = flatten(grad.slices());
        let x0 = flatten(inst.scorer.slices());
        let mut probe = inst.scorer.clone();
        let numeric = central_diff(&x0, H, |x| {
            unflatten(probe.slices_mut(), x);
            let t = example_terms(&probe, &inst.ex, &inst.delta, inst.k, renormalize, &LossWeights::default(), None, None)
                .unwrap();
            weighted(&inst.weights, &t)
        });
        let e = rel_err(&analytic, &numeric);
        worst = worst.max(e);
        if e > TOL {
            return Err(format!("scorer {kind:?} renormalize={renormalize} instance {i}: relative error {e:.3e}"));
        }
    }
    Ok(worst)
}

pub fn check_delta_grad(seed: u64, renormalize: bool) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for (i, inst) in seat_instances(ScorerKind::Additive, seed, renormalize).iter().enumerate() {
        let s = inst.ex.len();
        let mut gd = vec![0.0; s];
        example_terms(&inst.scorer, &inst.ex, &inst.delta, inst.k, renormalize, &inst.weights, None, Some(&mut gd))
            .unwrap();
        let numeric = central_diff(&inst.delta[..s], H, |d| {
            let mut full = inst.delta.clone();
            full[..s].copy_from_slice(d);
            let t = example_terms(&inst.scorer, &inst.ex, &full, inst.k, renormalize, &LossWeights::default(), None, None)
                .unwrap();
            weighted(&inst.weights, &t)
        });
        let e = rel_err(&gd, &numeric);
        worst = worst.max(e);
        if e > TOL {
            return Err(format!("delta renormalize={renormalize} instance {i}: relative error {e:.3e}"));
        }
    }
    Ok(worst)
}

fn random_simplex(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

pub fn check_surrogate_subgrad() -> Result<f64, String> {
    let mut rng = StreamRng::derive(8, "fd-topk", 0);
    let mut accepted = 0;
    let mut attempts = 0;
    let mut worst: f64 = 0.0;
    while accepted < INSTANCES {
        attempts += 1;
        assert!(attempts < 100 * INSTANCES);
        let n = rng.random_range(1..=12);
        let k = rng.random_range(1..=n);
        let w = random_simplex(&mut rng, n);
        let wt = random_simplex(&mut rng, n);
        let distinct = |v: &[f64]| {
            v.iter()
                .enumerate()
                .all(|(i, a)| v[i + 1..].iter().all(|b| (a - b).abs() >= TIE_GAP))
        };
        if !distinct(&w) || !distinct(&wt) || w.iter().zip(&wt).any(|(a, b)| (a - b).abs() < TIE_GAP) {
            continue;
        }
        let analytic = topk_surrogate_subgrad(&w, &wt, k).unwrap();
        let numeric = central_diff(&wt, H, |x| topk_surrogate(&w, x, k).unwrap());
        let e = rel_err(&analytic, &numeric);
        if e > TOL {
            return Err(format!("surrogate instance n={n} k={k}: relative error {e:.3e}"));
        }
        worst = worst.max(e);
        accepted += 1;
    }
    Ok(worst)
}
