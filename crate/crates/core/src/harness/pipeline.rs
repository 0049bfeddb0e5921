//! End-to-end recipes: train the base model and the replacement scorers,
//! then run the evaluation suites and persist everything under the output
//! directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{
    load_model, load_scorer, save_json, save_model, save_scorer, write_atomic, Provenance, ScorerCheckpoint,
    CHECKPOINT_VERSION,
};
use super::config::{DataSource, RunConfig};
use super::report::{Comparison, Report, RunManifest, REPORT_VERSION};
use crate::corpus::{generate_synthetic, load_dataset, load_embeddings, Dataset, EmbeddingTable};
use crate::error::{Result, SeatError};
use crate::metrics::{aggregate, certify, comprehensiveness, sensitivity, sufficiency, MetricReport, SeatCertificate};
use crate::model::{test_f1, train_base, AttentionModel, AttentionScorer};
use crate::perturb::{
    ablation_run, eval_stability, median, seed_study_csv, seed_study_models, stability_csv, AblationToggles,
    PerturbSpec, SeedStudyRow,
};
use crate::seat::{train_attention_at, train_attention_rp, train_seat, PgdParams, PgdStart, ScorerOutcome};

#[derive(Debug, Clone)]
pub struct Data {
    pub table: EmbeddingTable,
    pub dataset: Dataset,
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    match &cfg.data {
        DataSource::Synthetic { seed } => {
            let corpus = generate_synthetic(&cfg.synthetic, *seed)?;
            Ok(Data {
                table: corpus.table,
                dataset: corpus.dataset,
            })
        }
        DataSource::Files { dataset, embeddings } => {
            let table = load_embeddings(embeddings)?;
            let dataset = load_dataset(dataset, &table.vocab)?;
            Ok(Data { table, dataset })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    Vanilla,
    Seat,
    AttentionRp,
    AttentionAt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Vanilla, Method::Seat, Method::AttentionRp, Method::AttentionAt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Seat => "seat",
            Method::AttentionRp => "attention-rp",
            Method::AttentionAt => "attention-at",
        }
    }

    /// Checkpoint file name inside the output directory.
    pub fn checkpoint_file(self) -> &'static str {
        match self {
            Method::Vanilla => "base.json",
            Method::Seat => "seat.json",
            Method::AttentionRp => "attention-rp.json",
            Method::AttentionAt => "attention-at.json",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    StabilityEmbedding,
    StabilityWord,
    SeedStudy,
    Interpretability,
    Certify,
    Ablation,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::StabilityEmbedding,
        Suite::StabilityWord,
        Suite::Interpretability,
        Suite::Certify,
        Suite::Ablation,
        Suite::SeedStudy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::StabilityEmbedding => "stability-embedding",
            Suite::StabilityWord => "stability-word",
            Suite::SeedStudy => "seed-study",
            Suite::Interpretability => "interpretability",
            Suite::Certify => "certify",
            Suite::Ablation => "ablation",
        }
    }
}

impl FromStr for Suite {
    type Err = SeatError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| SeatError::Argument(format!("unknown suite {s:?}")))
    }
}

/// Trained scorers keyed by method; the vanilla scorer is the base model's.
pub type Scorers = BTreeMap<Method, AttentionScorer>;

pub fn train_method(cfg: &RunConfig, base: &AttentionModel, data: &Data, method: Method) -> Result<ScorerOutcome> {
    let train = &data.dataset.train;
    match method {
        Method::Vanilla => Ok(ScorerOutcome {
            scorer: base.scorer.clone(),
            history: Vec::new(),
        }),
        Method::Seat => train_seat(base, train, &cfg.seat, cfg.seed),
        Method::AttentionRp => train_attention_rp(base, train, &cfg.seat, cfg.seed),
        Method::AttentionAt => train_attention_at(base, train, &cfg.seat, cfg.seed),
    }
}

/// Output of one suite, ready to be written.
#[derive(Debug, Clone, Default)]
pub struct SuiteOutput {
    /// `(file stem, report)`.
    pub reports: Vec<(String, Report)>,
    pub comparisons: Vec<(String, Comparison)>,
    /// `(file stem, csv text)`.
    pub csvs: Vec<(String, String)>,
    pub seed_study: Option<SeedStudyOutput>,
    pub ablation: Vec<AblationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedStudySummary {
    pub version: u32,
    pub seeds: Vec<u64>,
    pub vanilla_median_max_jsd: f64,
    pub seat_median_max_jsd: f64,
}

#[derive(Debug, Clone)]
pub struct SeedStudyOutput {
    pub vanilla: Vec<SeedStudyRow>,
    pub seat: Vec<SeedStudyRow>,
    pub summary: SeedStudySummary,
}

#[derive(Debug, Clone)]
pub struct AblationEntry {
    pub toggles: AblationToggles,
    pub report: MetricReport,
    pub certificate: SeatCertificate,
    pub final_overlap: f64,
}

fn ablation_stem(t: AblationToggles) -> String {
    let part = |on: bool, name: &str| if on { name.to_string() } else { format!("no-{name}") };
    format!("ablation-{}-{}", part(t.use_l3, "l3"), part(t.use_ltopk, "topk"))
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    data: &'a Data,
    base: &'a AttentionModel,
    scorers: &'a Scorers,
}

impl Ctx<'_> {
    fn report(&self, method: &str, metrics: Option<MetricReport>, certificate: Option<SeatCertificate>, started: Instant) -> Report {
        let mut timings = BTreeMap::new();
        if self.cfg.report_timings {
            timings.insert("eval_seconds".to_string(), started.elapsed().as_secs_f64());
        }
        Report {
            version: REPORT_VERSION,
            method: method.to_string(),
            config_hash: self.cfg.hash(),
            metrics,
            certificate,
            timings,
        }
    }

    fn stability(&self, suite: &str, spec: PerturbSpec, out: &mut SuiteOutput) -> Result<()> {
        let mut by_method = BTreeMap::new();
        for (&method, scorer) in self.scorers {
            let started = Instant::now();
            let (metrics, rows) = eval_stability(self.base, scorer, &self.data.dataset.test, &spec, self.cfg.seed)?;
            out.csvs.push((format!("{suite}-{method}"), stability_csv(&rows)));
            out.reports
                .push((format!("{suite}-{method}"), self.report(method.name(), Some(metrics.clone()), None, started)));
            by_method.insert(method, metrics);
        }
        if let (Some(s), Some(v)) = (by_method.get(&Method::Seat), by_method.get(&Method::Vanilla)) {
            out.comparisons.push((format!("{suite}-comparison"), Comparison::new(suite, s, v)));
        }
        Ok(())
    }

    fn interpretability(&self, out: &mut SuiteOutput) -> Result<()> {
        let test = &self.data.dataset.test;
        let e = &self.cfg.eval;
        let spec = PerturbSpec::Embedding {
            noise: e.embedding_noise[0],
            positions: e.noise_positions,
        };
        let n_sens = e.sensitivity_examples.min(test.len());
        let sens_idx: Vec<usize> = (0..n_sens).map(|i| i * test.len() / n_sens.max(1)).collect();
        for (&method, scorer) in self.scorers {
            let started = Instant::now();
            let (mut metrics, _) = eval_stability(self.base, scorer, test, &spec, self.cfg.seed)?;
            let mut comp = Vec::with_capacity(test.len());
            let mut suff = Vec::with_capacity(test.len());
            for ex in test {
                comp.push(comprehensiveness(self.base, scorer, ex, e.rationale_k)?);
                suff.push(sufficiency(self.base, scorer, ex, e.rationale_k)?);
            }
            metrics.comp = Some(aggregate(&comp)?.mean);
            metrics.suff = Some(aggregate(&suff)?.mean);
            if !sens_idx.is_empty() {
                let mut aucs = Vec::with_capacity(sens_idx.len());
                for &i in &sens_idx {
                    aucs.push(sensitivity(self.base, scorer, &test[i], &e.sensitivity)?.auc);
                }
                metrics.sens_auc = Some(aggregate(&aucs)?.mean);
            }
            out.reports.push((
                format!("interpretability-{method}"),
                self.report(method.name(), Some(metrics), None, started),
            ));
        }
        Ok(())
    }

    fn certify(&self, out: &mut SuiteOutput) -> Result<()> {
        let pgd = PgdParams::from_config(&self.cfg.seat, PgdStart::Random);
        for (&method, scorer) in self.scorers {
            let started = Instant::now();
            let cert = certify(
                self.base,
                scorer,
                &self.data.dataset.test,
                self.cfg.seat.k,
                &pgd,
                self.cfg.seat.renormalize,
                self.cfg.seed,
            )?;
            out.reports
                .push((format!("certify-{method}"), self.report(method.name(), None, Some(cert), started)));
        }
        Ok(())
    }

    fn ablation(&self, out: &mut SuiteOutput) -> Result<()> {
        for (use_l3, use_ltopk) in [(true, true), (true, false), (false, true), (false, false)] {
            let toggles = AblationToggles { use_l3, use_ltopk };
            let started = Instant::now();
            let r = ablation_run(self.base, &self.data.dataset, toggles, &self.cfg.seat, self.cfg.seed)?;
            let stem = ablation_stem(toggles);
            out.reports.push((
                stem.clone(),
                self.report(&stem, Some(r.report.clone()), Some(r.certificate.clone()), started),
            ));
            out.ablation.push(AblationEntry {
                toggles,
                report: r.report,
                certificate: r.certificate,
                final_overlap: r.history.last().map_or(1.0, |h| h.overlap),
            });
        }
        Ok(())
    }

    fn seed_study(&self, out: &mut SuiteOutput) -> Result<()> {
        let seeds: Vec<u64> = (0..self.cfg.eval.seed_study_seeds as u64).map(|i| self.cfg.seed + i).collect();
        let seat_scorer = match self.scorers.get(&Method::Seat) {
            Some(s) => s.clone(),
            None => train_seat(self.base, &self.data.dataset.train, &self.cfg.seat, self.cfg.seed)?.scorer,
        };
        let seat_base = self.base.with_scorer(seat_scorer)?;
        let mut vanilla_models = Vec::new();
        let mut seat_models = Vec::new();
        for &s in &seeds[1..] {
            let base = train_base(&self.data.table, &self.data.dataset, &self.cfg.train, s)
                .map_err(|e| SeatError::Training(format!("seed {s}: {e}")))?
                .model;
            let seat = train_seat(&base, &self.data.dataset.train, &self.cfg.seat, s)
                .map_err(|e| SeatError::Training(format!("seed {s}: {e}")))?;
            seat_models.push(base.with_scorer(seat.scorer)?);
            vanilla_models.push(base);
        }
        let test = &self.data.dataset.test;
        let vanilla = seed_study_models(self.base, &vanilla_models, test)?;
        let seat = seed_study_models(&seat_base, &seat_models, test)?;
        let med = |rows: &[SeedStudyRow]| median(&rows.iter().map(|r| r.max_jsd).collect::<Vec<_>>());
        let summary = SeedStudySummary {
            version: REPORT_VERSION,
            seeds,
            vanilla_median_max_jsd: med(&vanilla),
            seat_median_max_jsd: med(&seat),
        };
        out.csvs.push(("seed-study-vanilla".into(), seed_study_csv(&vanilla)));
        out.csvs.push(("seed-study-seat".into(), seed_study_csv(&seat)));
        out.seed_study = Some(SeedStudyOutput { vanilla, seat, summary });
        Ok(())
    }
}

pub fn run_suite(cfg: &RunConfig, data: &Data, base: &AttentionModel, scorers: &Scorers, suite: Suite) -> Result<SuiteOutput> {
    let ctx = Ctx { cfg, data, base, scorers };
    let mut out = SuiteOutput::default();
    match suite {
        Suite::StabilityEmbedding => {
            for (i, &noise) in cfg.eval.embedding_noise.iter().enumerate() {
                let name = if i == 0 {
                    suite.name().to_string()
                } else {
                    format!("{}-{noise}", suite.name())
                };
                let spec = PerturbSpec::Embedding {
                    noise,
                    positions: cfg.eval.noise_positions,
                };
                ctx.stability(&name, spec, &mut out)?;
            }
        }
        Suite::StabilityWord => ctx.stability(suite.name(), PerturbSpec::Word { n: cfg.eval.word_n }, &mut out)?,
        Suite::Interpretability => ctx.interpretability(&mut out)?,
        Suite::Certify => ctx.certify(&mut out)?,
        Suite::Ablation => ctx.ablation(&mut out)?,
        Suite::SeedStudy => ctx.seed_study(&mut out)?,
    }
    Ok(out)
}

/// Writes reports under `reports/` and CSVs under `csv/`; returns content
/// hashes keyed by relative path.
pub fn write_suite(out_dir: &Path, out: &SuiteOutput) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    for (stem, report) in &out.reports {
        let rel = format!("reports/{stem}.json");
        hashes.insert(rel.clone(), save_json(&out_dir.join(&rel), report)?);
    }
    for (stem, cmp) in &out.comparisons {
        let rel = format!("reports/{stem}.json");
        hashes.insert(rel.clone(), save_json(&out_dir.join(&rel), cmp)?);
    }
    if let Some(s) = &out.seed_study {
        let rel = "reports/seed-study-summary.json".to_string();
        hashes.insert(rel.clone(), save_json(&out_dir.join(&rel), &s.summary)?);
    }
    for (stem, text) in &out.csvs {
        let rel = format!("csv/{stem}.csv");
        write_atomic(&out_dir.join(&rel), text.as_bytes())?;
        hashes.insert(rel, super::checkpoint::sha256_hex(text.as_bytes()));
    }
    Ok(hashes)
}

fn manifest_path(out_dir: &Path, command: &str) -> PathBuf {
    out_dir.join(format!("manifest-{command}.json"))
}

/// Trains the vanilla model and writes `base.json` plus its manifest.
pub fn cmd_train_base(cfg: &RunConfig) -> Result<(AttentionModel, String)> {
    cfg.validate()?;
    let started = Instant::now();
    let data = load_data(cfg)?;
    let outcome = train_base(&data.table, &data.dataset, &cfg.train, cfg.seed)?;
    let f1 = test_f1(&outcome.model, &data.dataset)?;
    let hash = save_model(&cfg.out_dir.join(Method::Vanilla.checkpoint_file()), &outcome.model)?;
    let mut m = RunManifest::new("train-base", cfg);
    m.hashes.insert(Method::Vanilla.checkpoint_file().into(), hash.clone());
    m.timings.insert("train_seconds".into(), started.elapsed().as_secs_f64());
    m.summary.insert("final_train_loss".into(), outcome.epoch_losses.last().copied().into());
    m.summary.insert("epoch_losses".into(), outcome.epoch_losses.clone().into());
    m.summary.insert("test_f1".into(), f1.into());
    m.write(&manifest_path(&cfg.out_dir, "train-base"))?;
    log::info!("base model: test F1 {f1:.4}, hash {hash}");
    Ok((outcome.model, hash))
}

/// Loads `base.json`, checking it against the train-base manifest when one
/// is present.
pub fn load_base(out_dir: &Path) -> Result<(AttentionModel, String)> {
    let (model, hash) = load_model(&out_dir.join(Method::Vanilla.checkpoint_file()))?;
    let mpath = manifest_path(out_dir, "train-base");
    if mpath.exists() {
        let m = RunManifest::load(&mpath)?;
        if let Some(recorded) = m.hashes.get(Method::Vanilla.checkpoint_file()) {
            if *recorded != hash {
                return Err(SeatError::Config(format!(
                    "stale base checkpoint: hash {hash} does not match manifest {recorded}"
                )));
            }
        }
    }
    Ok((model, hash))
}

/// Trains a replacement scorer for `method` on top of `base.json`.
pub fn cmd_train_scorer(cfg: &RunConfig, method: Method) -> Result<ScorerCheckpoint> {
    cfg.validate()?;
    if method == Method::Vanilla {
        return Err(SeatError::Argument("the vanilla scorer is trained by train-base".into()));
    }
    let started = Instant::now();
    let (base, base_hash) = load_base(&cfg.out_dir)?;
    let data = load_data(cfg)?;
    let outcome = train_method(cfg, &base, &data, method)?;
    let ck = ScorerCheckpoint {
        format_version: CHECKPOINT_VERSION,
        scorer: outcome.scorer,
        provenance: Provenance {
            base_model_hash: base_hash.clone(),
            method: method.name().into(),
            config: cfg.seat.clone(),
            seed: cfg.seed,
            history: outcome.history.clone(),
        },
    };
    let hash = save_scorer(&cfg.out_dir.join(method.checkpoint_file()), &ck)?;
    let command = format!("train-{method}");
    let mut m = RunManifest::new(&command, cfg);
    m.hashes.insert(Method::Vanilla.checkpoint_file().into(), base_hash);
    m.hashes.insert(method.checkpoint_file().into(), hash);
    m.timings.insert("train_seconds".into(), started.elapsed().as_secs_f64());
    let series = |f: fn(&crate::seat::EpochStats) -> f64| -> serde_json::Value {
        outcome.history.iter().map(f).collect::<Vec<f64>>().into()
    };
    m.summary.insert("d1".into(), series(|h| h.d1));
    m.summary.insert("d2".into(), series(|h| h.d2));
    m.summary.insert("topk".into(), series(|h| h.topk));
    m.summary.insert("overlap".into(), series(|h| h.overlap));
    m.write(&manifest_path(&cfg.out_dir, &command))?;
    Ok(ck)
}

/// Loads the base model and every scorer checkpoint present; the SEAT
/// checkpoint is required.
pub fn load_scorers(out_dir: &Path) -> Result<(AttentionModel, String, Scorers)> {
    let (base, base_hash) = load_base(out_dir)?;
    let mut scorers = Scorers::new();
    scorers.insert(Method::Vanilla, base.scorer.clone());
    for method in [Method::Seat, Method::AttentionRp, Method::AttentionAt] {
        let path = out_dir.join(method.checkpoint_file());
        if method != Method::Seat && !path.exists() {
            continue;
        }
        let (ck, _) = load_scorer(&path)?;
        if ck.provenance.base_model_hash != base_hash {
            return Err(SeatError::Config(format!(
                "stale {} checkpoint: trained on base {}, current base is {base_hash}",
                method,
                ck.provenance.base_model_hash
            )));
        }
        let checked = base.with_scorer(ck.scorer)?;
        scorers.insert(method, checked.scorer);
    }
    Ok((base, base_hash, scorers))
}

pub fn cmd_eval(cfg: &RunConfig, suites: &[Suite]) -> Result<Vec<SuiteOutput>> {
    cfg.validate()?;
    let started = Instant::now();
    let (base, base_hash, scorers) = load_scorers(&cfg.out_dir)?;
    let data = load_data(cfg)?;
    let mut m = RunManifest::new("eval", cfg);
    m.hashes.insert(Method::Vanilla.checkpoint_file().into(), base_hash);
    let mut outputs = Vec::new();
    for &suite in suites {
        let t = Instant::now();
        let out = run_suite(cfg, &data, &base, &scorers, suite)?;
        m.hashes.extend(write_suite(&cfg.out_dir, &out)?);
        m.timings.insert(suite.name().into(), t.elapsed().as_secs_f64());
        outputs.push(out);
    }
    m.timings.insert("total_seconds".into(), started.elapsed().as_secs_f64());
    let name = match suites {
        [one] => format!("eval-{}", one.name()),
        _ => "eval".to_string(),
    };
    m.command = name.clone();
    m.write(&manifest_path(&cfg.out_dir, &name))?;
    Ok(outputs)
}

/// Result of [`run_pipeline`], kept in memory for callers that inspect it.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub base: AttentionModel,
    pub seat: ScorerOutcome,
    pub scorers: Scorers,
    pub outputs: Vec<(Suite, SuiteOutput)>,
    pub seconds: f64,
}

impl PipelineOutcome {
    pub fn suite(&self, suite: Suite) -> Option<&SuiteOutput> {
        self.outputs.iter().find(|(s, _)| *s == suite).map(|(_, o)| o)
    }

    pub fn report(&self, stem: &str) -> Option<&Report> {
        self.outputs
            .iter()
            .flat_map(|(_, o)| &o.reports)
            .find(|(s, _)| s == stem)
            .map(|(_, r)| r)
    }
}

/// Full pipeline: base model, all scorers, every suite.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutcome> {
    let started = Instant::now();
    let (base, _) = cmd_train_base(cfg)?;
    let mut scorers = Scorers::new();
    scorers.insert(Method::Vanilla, base.scorer.clone());
    let mut seat = None;
    for method in [Method::Seat, Method::AttentionRp, Method::AttentionAt] {
        let ck = cmd_train_scorer(cfg, method)?;
        if method == Method::Seat {
            seat = Some(ScorerOutcome {
                scorer: ck.scorer.clone(),
                history: ck.provenance.history.clone(),
            });
        }
        scorers.insert(method, ck.scorer);
    }
    let outputs: Vec<SuiteOutput> = cmd_eval(cfg, &Suite::ALL)?;
    Ok(PipelineOutcome {
        base,
        seat: seat.expect("seat scorer trained above"),
        scorers,
        outputs: Suite::ALL.into_iter().zip(outputs).collect(),
        seconds: started.elapsed().as_secs_f64(),
    })
}
