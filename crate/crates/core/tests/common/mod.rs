#![allow(dead_code)]

pub mod gradcheck;

use rand::Rng;
use seat_core::corpus::{generate_synthetic, EmbeddingTable, Example, SyntheticSpec};
use seat_core::model::{AttentionModel, ScorerKind};
use seat_core::rng::StreamRng;

pub fn tiny_table(seed: u64) -> EmbeddingTable {
    let spec = SyntheticSpec {
        vocab_size: 10,
        dim: 3,
        min_len: 2,
        max_len: 6,
        n_train: 2,
        n_test: 2,
        keywords_per_class: 2,
        max_keywords: 2,
    };
    generate_synthetic(&spec, seed).unwrap().table
}

/// Small model with parameters spread wider than the default init.
pub fn tiny_model(kind: ScorerKind, seed: u64) -> AttentionModel {
    let mut rng = StreamRng::derive(seed, "tiny-model", 0);
    let mut model = AttentionModel::init(tiny_table(seed), 4, kind, &mut rng);
    for s in model.encoder.slices_mut().into_iter().chain(model.scorer.slices_mut()) {
        s.iter_mut().for_each(|x| *x *= 2.0);
    }
    model.decoder.theta.iter_mut().for_each(|x| *x *= 3.0);
    model.decoder.bias = rng.uniform(-0.5, 0.5);
    model
}

pub fn random_example(rng: &mut StreamRng, vocab: usize, max_len: usize) -> Example {
    let len = rng.random_range(1..=max_len);
    Example {
        token_ids: (0..len).map(|_| rng.random_range(2..vocab)).collect(),
        label: rng.random_range(0..=1u8),
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-300)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences of `f` around `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + h;
            let up = f(&v);
            v[i] = x[i] - h;
            let down = f(&v);
            v[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn flatten(slices: Vec<&[f64]>) -> Vec<f64> {
    slices.into_iter().flatten().copied().collect()
}

pub fn unflatten(slices: Vec<&mut [f64]>, v: &[f64]) {
    let mut off = 0;
    for s in slices {
        let n = s.len();
        s.copy_from_slice(&v[off..off + n]);
        off += n;
    }
}
