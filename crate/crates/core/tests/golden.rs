//! Reference outputs on a small fixed corpus. Set `UPDATE_GOLDEN=1` to
//! rewrite the files under `tests/golden/` after an intended change.

use std::path::PathBuf;
use std::sync::OnceLock;

use serde_json::{json, Value};

use seat_core::corpus::{generate_synthetic, perturb_words, Dataset, EmbeddingTable, SyntheticSpec};
use seat_core::metrics::{certify, comprehensiveness, sufficiency};
use seat_core::model::{train_base, AttentionModel, TrainConfig};
use seat_core::rng::StreamRng;
use seat_core::seat::{train_attention_at, train_attention_rp, train_seat, PgdParams, PgdStart, SeatConfig};

const REL_TOL: f64 = 1e-9;

struct Fixture {
    table: EmbeddingTable,
    dataset: Dataset,
    base: AttentionModel,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SyntheticSpec {
            vocab_size: 40,
            dim: 5,
            min_len: 3,
            max_len: 9,
            n_train: 120,
            n_test: 16,
            keywords_per_class: 4,
            max_keywords: 2,
        };
        let corpus = generate_synthetic(&spec, 21).unwrap();
        let cfg = TrainConfig {
            hidden: 6,
            epochs: 5,
            ..TrainConfig::default()
        };
        let base = train_base(&corpus.table, &corpus.dataset, &cfg, 2).unwrap().model;
        Fixture {
            table: corpus.table,
            dataset: corpus.dataset,
            base,
        }
    })
}

fn scorer_cfg() -> SeatConfig {
    SeatConfig {
        epochs: 2,
        batch_size: 16,
        pgd_steps: 3,
        ..SeatConfig::default()
    }
}

fn close(a: &Value, b: &Value, path: &str) -> Result<(), String> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            if (x - y).abs() <= REL_TOL * x.abs().max(y.abs()).max(1e-300) || x == y {
                Ok(())
            } else {
                Err(format!("{path}: {x} vs {y}"))
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                close(u, v, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => {
            for (k, u) in x {
                let v = y.get(k).ok_or_else(|| format!("{path}.{k} missing"))?;
                close(u, v, &format!("{path}.{k}"))?;
            }
            Ok(())
        }
        _ if a == b => Ok(()),
        _ => Err(format!("{path}: {a} vs {b}")),
    }
}

fn check(name: &str, actual: Value) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.json"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&actual).unwrap() + "\n").unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_GOLDEN=1 to create it", path.display()));
    let expected: Value = serde_json::from_str(&text).unwrap();
    if let Err(msg) = close(&actual, &expected, name) {
        panic!("golden mismatch in {msg}");
    }
}

#[test]
fn golden_word_perturbation() {
    let f = fixture();
    let out: Vec<Value> = f.dataset.test[..8]
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = StreamRng::derive(5, "golden-words", i as u64);
            let p = perturb_words(ex, 1, &f.table, &mut rng);
            json!({ "input": ex.token_ids, "output": p.token_ids })
        })
        .collect();
    check("perturb_words", json!(out));
}

#[test]
fn golden_forward() {
    let f = fixture();
    let out: Vec<Value> = f.dataset.test[..8]
        .iter()
        .map(|ex| {
            let (w, y) = f.base.forward(&ex.token_ids).unwrap();
            json!({ "w": w.w, "y": y })
        })
        .collect();
    check("forward", json!(out));
}

#[test]
fn golden_rationale_metrics() {
    let f = fixture();
    let out: Vec<Value> = f.dataset.test[..8]
        .iter()
        .map(|ex| {
            json!({
                "comprehensiveness": comprehensiveness(&f.base, &f.base.scorer, ex, 2).unwrap(),
                "sufficiency": sufficiency(&f.base, &f.base.scorer, ex, 2).unwrap(),
            })
        })
        .collect();
    check("rationale", json!(out));
}

#[test]
fn golden_seat_and_certificate() {
    let f = fixture();
    let cfg = scorer_cfg();
    let out = train_seat(&f.base, &f.dataset.train, &cfg, 8).unwrap();
    let pgd = PgdParams::from_config(&cfg, PgdStart::Random);
    let cert = certify(&f.base, &out.scorer, &f.dataset.test, cfg.k, &pgd, false, 8).unwrap();
    check("seat", json!({ "history": out.history, "certificate": cert }));
}

#[test]
fn golden_baselines() {
    let f = fixture();
    let cfg = scorer_cfg();
    let rp = train_attention_rp(&f.base, &f.dataset.train, &cfg, 8).unwrap();
    let at = train_attention_at(&f.base, &f.dataset.train, &cfg, 8).unwrap();
    check(
        "baselines",
        json!({ "rp": { "history": rp.history, "scorer": rp.scorer }, "at": { "history": at.history, "scorer": at.scorer } }),
    );
}
