//! Stability studies: retraining under different seeds, Gaussian noise on
//! token embeddings, and nearest-synonym word substitution.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{perturb_words, Dataset, EmbeddingTable, Example};
use crate::error::{Result, SeatError};
use crate::linalg::Mat;
use crate::metrics::{
    aggregate, certify, f1, jsd, tvd, MetricReport, SeatCertificate,
};
use crate::model::{forward_with, predicted_label, train_base, AttentionModel, AttentionScorer, TrainConfig};
use crate::rng::StreamRng;
use crate::seat::{train_seat, EpochStats, PgdParams, PgdStart, SeatConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePositions {
    All,
    One,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbSpec {
    Seed { n_seeds: usize },
    /// `noise` is the per-coordinate variance of the added Gaussian.
    Embedding { noise: f64, positions: NoisePositions },
    Word { n: usize },
}

impl PerturbSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PerturbSpec::Seed { n_seeds } if n_seeds < 2 => {
                Err(SeatError::Config("seed study needs at least two seeds".into()))
            }
            PerturbSpec::Embedding { noise, .. } if !(noise > 0.0) => {
                Err(SeatError::Config("embedding noise must be positive".into()))
            }
            PerturbSpec::Word { n } if n == 0 => {
                Err(SeatError::Config("word perturbation needs at least one word".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `x' = x + N(0, variance·I)` on the selected rows; other rows are untouched.
pub fn embedding_perturb(x_e: &Mat, variance: f64, positions: NoisePositions, rng: &mut StreamRng) -> Mat {
    let mut out = x_e.clone();
    if x_e.rows() == 0 {
        return out;
    }
    let std = variance.sqrt();
    let rows: Vec<usize> = match positions {
        NoisePositions::All => (0..x_e.rows()).collect(),
        NoisePositions::One => vec![rng.random_range(0..x_e.rows())],
    };
    for r in rows {
        for v in out.row_mut(r) {
            let n: f64 = StandardNormal.sample(rng);
            *v += std * n;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub example_id: usize,
    pub jsd: f64,
    pub tvd: f64,
}

fn clean_f1(model: &AttentionModel, scorer: &AttentionScorer, test: &[Example]) -> Result<f64> {
    let mut preds = Vec::with_capacity(test.len());
    for ex in test {
        let (_, y) = forward_with(model, scorer, &model.embeddings.lookup(&ex.token_ids))?;
        preds.push(predicted_label(&y));
    }
    let labels: Vec<u8> = test.iter().map(|e| e.label).collect();
    f1(&preds, &labels)
}

/// Clean-vs-perturbed JSD of attention and TVD of predictions over `test`.
/// Embedding noise of zero is accepted here and leaves inputs unchanged.
pub fn eval_stability(
    model: &AttentionModel,
    scorer: &AttentionScorer,
    test: &[Example],
    spec: &PerturbSpec,
    seed: u64,
) -> Result<(MetricReport, Vec<StabilityRow>)> {
    let mut rows = Vec::with_capacity(test.len());
    for (i, ex) in test.iter().enumerate() {
        let x_e = model.embeddings.lookup(&ex.token_ids);
        let (w, y) = forward_with(model, scorer, &x_e)?;
        let perturbed = match *spec {
            PerturbSpec::Embedding { noise, positions } => {
                let mut rng = StreamRng::derive(seed, "embedding-perturb", i as u64);
                embedding_perturb(&x_e, noise.max(0.0), positions, &mut rng)
            }
            PerturbSpec::Word { n } => {
                let mut rng = StreamRng::derive(seed, "word-perturb", i as u64);
                let x2 = perturb_words(ex, n, &model.embeddings, &mut rng);
                model.embeddings.lookup(&x2.token_ids)
            }
            PerturbSpec::Seed { .. } => {
                return Err(SeatError::Argument(
                    "seed perturbation is evaluated by seed_study".into(),
                ))
            }
        };
        let (w2, y2) = forward_with(model, scorer, &perturbed)?;
        rows.push(StabilityRow {
            example_id: i,
            jsd: jsd(&w.w, &w2.w)?,
            tvd: tvd(&y, &y2)?,
        });
    }
    let j = aggregate(&rows.iter().map(|r| r.jsd).collect::<Vec<_>>())?;
    let t = aggregate(&rows.iter().map(|r| r.tvd).collect::<Vec<_>>())?;
    let report = MetricReport {
        jsd_mean: j.mean,
        jsd_sum: j.sum,
        tvd_mean: t.mean,
        tvd_sum: t.sum,
        f1: clean_f1(model, scorer, test)?,
        comp: None,
        suff: None,
        sens_auc: None,
        n_examples: rows.len(),
    };
    Ok((report, rows))
}

pub fn stability_csv(rows: &[StabilityRow]) -> String {
    let mut out = String::from("example_id,jsd,tvd\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.example_id, r.jsd, r.tvd));
    }
    out
}

/// What each seed of a seed study trains.
#[derive(Debug, Clone, PartialEq)]
pub enum SeedTrainer {
    Vanilla,
    Seat(SeatConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedStudyRow {
    pub example_id: usize,
    pub label: u8,
    pub max_attention: f64,
    pub bin: u8,
    pub max_jsd: f64,
}

/// Trained attention model for one seed: the base model, plus the SEAT
/// scorer when requested.
pub fn train_for_seed(
    table: &EmbeddingTable,
    dataset: &Dataset,
    train_cfg: &TrainConfig,
    trainer: &SeedTrainer,
    seed: u64,
) -> Result<AttentionModel> {
    let base = train_base(table, dataset, train_cfg, seed)
        .map_err(|e| SeatError::Training(format!("seed {seed}: {e}")))?
        .model;
    match trainer {
        SeedTrainer::Vanilla => Ok(base),
        SeedTrainer::Seat(cfg) => {
            let out = train_seat(&base, &dataset.train, cfg, seed)
                .map_err(|e| SeatError::Training(format!("seed {seed}: {e}")))?;
            base.with_scorer(out.scorer)
        }
    }
}

/// Quartile bin of `v` given the sorted sample `sorted`.
fn quartile_bin(sorted: &[f64], v: f64) -> u8 {
    let rank = sorted.partition_point(|&x| x < v);
    (4 * rank / sorted.len()).min(3) as u8
}

/// Per test example: the largest attention JSD between the base-seed model
/// and any other-seed model, binned by the base model's max attention.
pub fn seed_study_models(base: &AttentionModel, others: &[AttentionModel], test: &[Example]) -> Result<Vec<SeedStudyRow>> {
    let mut base_w = Vec::with_capacity(test.len());
    for ex in test {
        base_w.push(base.forward(&ex.token_ids)?.0);
    }
    let mut maxima: Vec<f64> = base_w.iter().map(|w| w.max()).collect();
    maxima.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(test.len());
    for (i, ex) in test.iter().enumerate() {
        let mut max_jsd = 0.0f64;
        for other in others {
            let (w2, _) = other.forward(&ex.token_ids)?;
            max_jsd = max_jsd.max(jsd(&base_w[i].w, &w2.w)?);
        }
        let max_attention = base_w[i].max();
        rows.push(SeedStudyRow {
            example_id: i,
            label: ex.label,
            max_attention,
            bin: quartile_bin(&maxima, max_attention),
            max_jsd,
        });
    }
    Ok(rows)
}

pub fn seed_study(
    table: &EmbeddingTable,
    dataset: &Dataset,
    train_cfg: &TrainConfig,
    trainer: &SeedTrainer,
    base_seed: u64,
    other_seeds: &[u64],
) -> Result<Vec<SeedStudyRow>> {
    if other_seeds.is_empty() {
        return Err(SeatError::Config("seed study needs at least one other seed".into()));
    }
    let base = train_for_seed(table, dataset, train_cfg, trainer, base_seed)?;
    let mut others = Vec::with_capacity(other_seeds.len());
    for &s in other_seeds {
        if s == base_seed {
            others.push(base.clone());
        } else {
            others.push(train_for_seed(table, dataset, train_cfg, trainer, s)?);
        }
    }
    seed_study_models(&base, &others, &dataset.test)
}

pub fn seed_study_csv(rows: &[SeedStudyRow]) -> String {
    let mut out = String::from("example_id,label,max_attention,bin,max_jsd\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.example_id, r.label, r.max_attention, r.bin, r.max_jsd
        ));
    }
    out
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationToggles {
    pub use_l3: bool,
    pub use_ltopk: bool,
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub report: MetricReport,
    pub certificate: SeatCertificate,
    pub history: Vec<EpochStats>,
    pub scorer: AttentionScorer,
}

/// Embedding noise variance used by the ablation study.
pub const ABLATION_NOISE: f64 = 0.01;

/// SEAT with the stability term and/or the top-k term switched off, evaluated
/// under one-token embedding noise of variance [`ABLATION_NOISE`].
pub fn ablation_run(
    base: &AttentionModel,
    dataset: &Dataset,
    toggles: AblationToggles,
    cfg: &SeatConfig,
    seed: u64,
) -> Result<AblationResult> {
    let cfg = SeatConfig {
        lambda1: if toggles.use_l3 { cfg.lambda1 } else { 0.0 },
        lambda2: if toggles.use_ltopk { cfg.lambda2 } else { 0.0 },
        ..cfg.clone()
    };
    let out = train_seat(base, &dataset.train, &cfg, seed)?;
    let spec = PerturbSpec::Embedding {
        noise: ABLATION_NOISE,
        positions: NoisePositions::One,
    };
    let (report, _) = eval_stability(base, &out.scorer, &dataset.test, &spec, seed)?;
    let certificate = certify(
        base,
        &out.scorer,
        &dataset.test,
        cfg.k,
        &PgdParams::from_config(&cfg, PgdStart::Random),
        cfg.renormalize,
        seed,
    )?;
    Ok(AblationResult {
        report,
        certificate,
        history: out.history,
        scorer: out.scorer,
    })
}
