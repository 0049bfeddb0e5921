//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown keys are rejected. Later assignments win, so command-line
//! overrides are applied after the file.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::corpus::SyntheticSpec;
use crate::error::{Result, SeatError};
use crate::metrics::SensitivityConfig;
use crate::model::{ScorerKind, TrainConfig};
use crate::perturb::NoisePositions;
use crate::seat::{NormKind, OuterOptimizer, SeatConfig};

/// Environment variable that selects the output directory.
pub const OUT_DIR_ENV: &str = "SEAT_OUT_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Embedding noise variances; the first is the headline value, the rest
    /// form the sweep.
    pub embedding_noise: Vec<f64>,
    pub noise_positions: NoisePositions,
    pub word_n: usize,
    /// Rationale size for comprehensiveness and sufficiency.
    pub rationale_k: usize,
    /// Test examples used by the sensitivity attack (evenly spaced).
    pub sensitivity_examples: usize,
    pub sensitivity: SensitivityConfig,
    pub seed_study_seeds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            embedding_noise: vec![1e-3, 5e-3, 1e-2, 5e-2],
            noise_positions: NoisePositions::One,
            word_n: 1,
            rationale_k: 3,
            sensitivity_examples: 20,
            sensitivity: SensitivityConfig::default(),
            seed_study_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated from `synthetic` with its own seed.
    Synthetic { seed: u64 },
    Files { dataset: PathBuf, embeddings: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub synthetic: SyntheticSpec,
    pub train: TrainConfig,
    pub seat: SeatConfig,
    pub eval: EvalConfig,
    /// Wall-clock timings inside reports; off keeps reports reproducible.
    pub report_timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("seat-out"),
            data: DataSource::Synthetic { seed: 0 },
            synthetic: SyntheticSpec::default(),
            train: TrainConfig::default(),
            seat: SeatConfig::default(),
            eval: EvalConfig::default(),
            report_timings: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| SeatError::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn choice<T: Copy>(key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
            SeatError::Config(format!("{key}: expected one of {}, got {value:?}", names.join("|")))
        })
}

const SCORERS: &[(&str, ScorerKind)] = &[("additive", ScorerKind::Additive), ("scaled_dot", ScorerKind::ScaledDot)];
const NORMS: &[(&str, NormKind)] = &[("l2", NormKind::L2), ("linf", NormKind::Linf)];
const OPTIMIZERS: &[(&str, OuterOptimizer)] = &[("sgd", OuterOptimizer::Sgd), ("adam", OuterOptimizer::Adam)];
const POSITIONS: &[(&str, NoisePositions)] = &[("one", NoisePositions::One), ("all", NoisePositions::All)];

fn name_of<T: PartialEq>(options: &[(&'static str, T)], v: &T) -> &'static str {
    options.iter().find(|(_, o)| o == v).map(|(n, _)| *n).unwrap_or("?")
}

impl RunConfig {
    /// Defaults, then the `SEAT_OUT_DIR` environment variable.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
            cfg.out_dir = PathBuf::from(dir);
        }
        cfg
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "report_timings" => self.report_timings = parse(key, v)?,
            "data.source" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic { seed: 0 },
                    "files" => DataSource::Files {
                        dataset: PathBuf::new(),
                        embeddings: PathBuf::new(),
                    },
                    _ => return Err(SeatError::Config(format!("{key}: expected synthetic|files, got {v:?}"))),
                }
            }
            "data.dataset" | "data.embeddings" => {
                let (mut dataset, mut embeddings) = match &self.data {
                    DataSource::Files { dataset, embeddings } => (dataset.clone(), embeddings.clone()),
                    DataSource::Synthetic { .. } => (PathBuf::new(), PathBuf::new()),
                };
                if key == "data.dataset" {
                    dataset = PathBuf::from(v);
                } else {
                    embeddings = PathBuf::from(v);
                }
                self.data = DataSource::Files { dataset, embeddings };
            }
            "synthetic.seed" => self.data = DataSource::Synthetic { seed: parse(key, v)? },
            "synthetic.vocab_size" => self.synthetic.vocab_size = parse(key, v)?,
            "synthetic.dim" => self.synthetic.dim = parse(key, v)?,
            "synthetic.min_len" => self.synthetic.min_len = parse(key, v)?,
            "synthetic.max_len" => self.synthetic.max_len = parse(key, v)?,
            "synthetic.n_train" => self.synthetic.n_train = parse(key, v)?,
            "synthetic.n_test" => self.synthetic.n_test = parse(key, v)?,
            "synthetic.keywords_per_class" => self.synthetic.keywords_per_class = parse(key, v)?,
            "synthetic.max_keywords" => self.synthetic.max_keywords = parse(key, v)?,
            "model.hidden" => self.train.hidden = parse(key, v)?,
            "model.scorer" => self.train.scorer = choice(key, v, SCORERS)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.train_embeddings" => self.train.train_embeddings = parse(key, v)?,
            "train.early_stopping" => self.train.early_stopping = parse(key, v)?,
            "seat.lambda1" => self.seat.lambda1 = parse(key, v)?,
            "seat.lambda2" => self.seat.lambda2 = parse(key, v)?,
            "seat.k" => self.seat.k = parse(key, v)?,
            "seat.radius" => self.seat.radius = parse(key, v)?,
            "seat.norm" => self.seat.norm = choice(key, v, NORMS)?,
            "seat.pgd_steps" => self.seat.pgd_steps = parse(key, v)?,
            "seat.pgd_step_size" => {
                self.seat.pgd_step_size = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "seat.epochs" => self.seat.epochs = parse(key, v)?,
            "seat.lr" => self.seat.lr = parse(key, v)?,
            "seat.batch_size" => self.seat.batch_size = parse(key, v)?,
            "seat.optimizer" => self.seat.optimizer = choice(key, v, OPTIMIZERS)?,
            "seat.lr_decay" => self.seat.lr_decay = parse(key, v)?,
            "seat.algorithm1_signs" => self.seat.algorithm1_signs = parse(key, v)?,
            "seat.renormalize" => self.seat.renormalize = parse(key, v)?,
            "eval.embedding_noise" => self.eval.embedding_noise = parse_list(key, v)?,
            "eval.noise_positions" => self.eval.noise_positions = choice(key, v, POSITIONS)?,
            "eval.word_n" => self.eval.word_n = parse(key, v)?,
            "eval.rationale_k" => self.eval.rationale_k = parse(key, v)?,
            "eval.sensitivity_examples" => self.eval.sensitivity_examples = parse(key, v)?,
            "eval.sensitivity_sizes" => self.eval.sensitivity.sizes = parse_list(key, v)?,
            "eval.sensitivity_steps" => self.eval.sensitivity.steps = parse(key, v)?,
            "eval.sensitivity_eps_max" => self.eval.sensitivity.eps_max = parse(key, v)?,
            "eval.sensitivity_tol" => self.eval.sensitivity.tol = parse(key, v)?,
            "eval.seed_study_seeds" => self.eval.seed_study_seeds = parse(key, v)?,
            _ => return Err(SeatError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| SeatError::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn parse_into(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply(line).map_err(|e| match e {
                SeatError::Config(msg) => SeatError::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| SeatError::io(path, e))?;
        self.parse_into(&text)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("report_timings", self.report_timings.to_string()),
        ];
        match &self.data {
            DataSource::Synthetic { seed } => {
                out.push(("data.source", "synthetic".into()));
                out.push(("synthetic.seed", seed.to_string()));
            }
            DataSource::Files { dataset, embeddings } => {
                out.push(("data.source", "files".into()));
                out.push(("data.dataset", dataset.display().to_string()));
                out.push(("data.embeddings", embeddings.display().to_string()));
            }
        }
        let s = &self.synthetic;
        out.extend([
            ("synthetic.vocab_size", s.vocab_size.to_string()),
            ("synthetic.dim", s.dim.to_string()),
            ("synthetic.min_len", s.min_len.to_string()),
            ("synthetic.max_len", s.max_len.to_string()),
            ("synthetic.n_train", s.n_train.to_string()),
            ("synthetic.n_test", s.n_test.to_string()),
            ("synthetic.keywords_per_class", s.keywords_per_class.to_string()),
            ("synthetic.max_keywords", s.max_keywords.to_string()),
        ]);
        let t = &self.train;
        out.extend([
            ("model.hidden", t.hidden.to_string()),
            ("model.scorer", name_of(SCORERS, &t.scorer).into()),
            ("train.lr", t.lr.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.eps", t.eps.to_string()),
            ("train.train_embeddings", t.train_embeddings.to_string()),
            ("train.early_stopping", t.early_stopping.to_string()),
        ]);
        let c = &self.seat;
        out.extend([
            ("seat.lambda1", c.lambda1.to_string()),
            ("seat.lambda2", c.lambda2.to_string()),
            ("seat.k", c.k.to_string()),
            ("seat.radius", c.radius.to_string()),
            ("seat.norm", name_of(NORMS, &c.norm).into()),
            ("seat.pgd_steps", c.pgd_steps.to_string()),
            (
                "seat.pgd_step_size",
                c.pgd_step_size.map_or_else(|| "auto".into(), |v| v.to_string()),
            ),
            ("seat.epochs", c.epochs.to_string()),
            ("seat.lr", c.lr.to_string()),
            ("seat.batch_size", c.batch_size.to_string()),
            ("seat.optimizer", name_of(OPTIMIZERS, &c.optimizer).into()),
            ("seat.lr_decay", c.lr_decay.to_string()),
            ("seat.algorithm1_signs", c.algorithm1_signs.to_string()),
            ("seat.renormalize", c.renormalize.to_string()),
        ]);
        let e = &self.eval;
        out.extend([
            ("eval.embedding_noise", join(&e.embedding_noise)),
            ("eval.noise_positions", name_of(POSITIONS, &e.noise_positions).into()),
            ("eval.word_n", e.word_n.to_string()),
            ("eval.rationale_k", e.rationale_k.to_string()),
            ("eval.sensitivity_examples", e.sensitivity_examples.to_string()),
            ("eval.sensitivity_sizes", join(&e.sensitivity.sizes)),
            ("eval.sensitivity_steps", e.sensitivity.steps.to_string()),
            ("eval.sensitivity_eps_max", e.sensitivity.eps_max.to_string()),
            ("eval.sensitivity_tol", e.sensitivity.tol.to_string()),
            ("eval.seed_study_seeds", e.seed_study_seeds.to_string()),
        ]);
        out
    }

    /// Text form that parses back to an equal config.
    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 of the canonical text, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            if k != "out_dir" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        if let DataSource::Files { dataset, embeddings } = &self.data {
            for (key, path) in [("data.dataset", dataset), ("data.embeddings", embeddings)] {
                if path.as_os_str().is_empty() {
                    return Err(SeatError::Config(format!("{key} is required when data.source = files")));
                }
                if !path.exists() {
                    return Err(SeatError::Config(format!("{key}: {} does not exist", path.display())));
                }
            }
        }
        let t = &self.train;
        if t.hidden == 0 || t.batch_size == 0 || !(t.lr > 0.0) {
            return Err(SeatError::Config("model.hidden, train.batch_size and train.lr must be positive".into()));
        }
        self.seat.validate()?;
        let e = &self.eval;
        if e.embedding_noise.is_empty() || e.embedding_noise.iter().any(|&v| !(v > 0.0)) {
            return Err(SeatError::Config("eval.embedding_noise must list positive variances".into()));
        }
        if e.word_n == 0 {
            return Err(SeatError::Config("eval.word_n must be at least 1".into()));
        }
        if e.seed_study_seeds < 2 {
            return Err(SeatError::Config("eval.seed_study_seeds must be at least 2".into()));
        }
        let s = &e.sensitivity;
        if s.sizes.is_empty() || s.sizes.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(SeatError::Config("eval.sensitivity_sizes must lie in (0, 1]".into()));
        }
        if !(s.eps_max > 0.0) || !(s.tol > 0.0) || s.steps == 0 {
            return Err(SeatError::Config("sensitivity eps_max, tol and steps must be positive".into()));
        }
        Ok(())
    }
}
