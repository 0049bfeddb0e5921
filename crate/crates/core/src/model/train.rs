//! Vanilla training of the full classifier with Adam.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{grad_all, AttentionModel, FrozenMask, ScorerKind};
use crate::corpus::{Dataset, EmbeddingTable};
use crate::error::{Result, SeatError};
use crate::metrics::f1;
use crate::optim::Adam;
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub scorer: ScorerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub train_embeddings: bool,
    /// Keep the epoch with the best clean test F1.
    pub early_stopping: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            scorer: ScorerKind::Additive,
            lr: 0.01,
            epochs: 20,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            train_embeddings: false,
            early_stopping: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AttentionModel,
    /// Mean mini-batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn test_f1(model: &AttentionModel, dataset: &Dataset) -> Result<f64> {
    let mut preds = Vec::with_capacity(dataset.test.len());
    for ex in &dataset.test {
        preds.push(model.predict(&ex.token_ids)?);
    }
    let labels: Vec<u8> = dataset.test.iter().map(|e| e.label).collect();
    f1(&preds, &labels)
}

/// Trains embeddings (optionally), encoder, scorer and decoder on the train
/// split. Deterministic for a fixed seed.
pub fn train_base(
    table: &EmbeddingTable,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if cfg.batch_size == 0 || cfg.hidden == 0 || !(cfg.lr > 0.0) {
        return Err(SeatError::Config(
            "batch size, hidden size and learning rate must be positive".into(),
        ));
    }
    let mut init_rng = StreamRng::derive(seed, "base-init", 0);
    let mut model = AttentionModel::init(table.clone(), cfg.hidden, cfg.scorer, &mut init_rng);
    model.frozen = FrozenMask {
        embeddings: !cfg.train_embeddings,
        ..FrozenMask::NONE
    };
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, AttentionModel)> = None;

    for epoch in 0..cfg.epochs {
        let mut rng = StreamRng::derive(seed, "base-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| dataset.train[i].clone()).collect();
            let (loss, grads) = grad_all(&model, &batch)?;
            if !loss.is_finite() {
                return Err(SeatError::Training(format!("loss became non-finite in epoch {epoch}")));
            }
            total += loss;
            batches += 1;
            let mask = model.frozen;
            opt.step(model.trainable_slices_mut(), &grads.trainable_slices(mask));
        }
        let epoch_loss = total / batches.max(1) as f64;
        log::debug!("base epoch {epoch}: loss {epoch_loss:.6}");
        epoch_losses.push(epoch_loss);
        if cfg.early_stopping {
            let score = test_f1(&model, dataset)?;
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.clone()));
            }
        }
    }
    if let Some((_, m)) = best {
        model = m;
    }
    model.validate()?;
    Ok(TrainOutcome {
        model,
        epoch_losses,
    })
}
