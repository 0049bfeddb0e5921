//! Vocabulary, embeddings, labeled text, the bundled synthetic corpus and
//! nearest-neighbour word substitution.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SeatError};
use crate::linalg::{dot, Mat};
use crate::rng::StreamRng;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Longest sequence any model sees; longer inputs are truncated on load.
pub const MAX_SEQ_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let mut vocab = Vocabulary::new();
        for t in tokens.into_iter().skip(2) {
            vocab.insert(&t);
        }
        vocab
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.id_to_token
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;

    /// Empty vocabulary holding only the reserved pad and unk ids.
    pub fn new() -> Self {
        let mut token_to_id = HashMap::new();
        token_to_id.insert(PAD_TOKEN.to_string(), Self::PAD);
        token_to_id.insert(UNK_TOKEN.to_string(), Self::UNK);
        Self {
            token_to_id,
            id_to_token: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
        }
    }

    /// Returns the id of `token`, adding it if absent.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.token_to_id.get(token) {
            return id;
        }
        let id = self.id_to_token.len();
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    /// Unknown tokens map to the unk id.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn is_reserved(id: usize) -> bool {
        id == Self::PAD || id == Self::UNK
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Embedding matrix with one row per vocabulary id. The pad row is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub vocab: Vocabulary,
    pub matrix: Mat,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.matrix.row(id)
    }

    /// Dense `s × d` representation of a token sequence.
    pub fn lookup(&self, ids: &[usize]) -> Mat {
        let mut out = Mat::zeros(ids.len(), self.dim());
        for (t, &id) in ids.iter().enumerate() {
            out.row_mut(t).copy_from_slice(self.row(id));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub token_ids: Vec<usize>,
    pub label: u8,
}

impl Example {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

fn unk_row(dim: usize) -> Vec<f64> {
    let mut rng = StreamRng::derive(0, "unk-row", dim as u64);
    (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// Parses the whitespace-separated embedding text format.
///
/// An optional first line `count dim` is skipped. Duplicate tokens keep their
/// first row. A `<unk>` row in the file replaces the generated unk row; a
/// `<pad>` row is ignored since pad is always zero.
pub fn parse_embeddings(text: &str) -> Result<EmbeddingTable> {
    let mut vocab = Vocabulary::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut file_unk: Option<Vec<f64>> = None;
    let mut dim: Option<usize> = None;

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0
            && fields.len() == 2
            && fields[0].parse::<usize>().is_ok()
            && fields[1].parse::<usize>().is_ok()
        {
            continue;
        }
        let token = fields[0];
        let values = &fields[1..];
        if values.is_empty() {
            return Err(SeatError::Format {
                line: lineno,
                msg: format!("token {token:?} has no values"),
            });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(SeatError::Format {
                    line: lineno,
                    msg: format!("expected {d} values, found {}", values.len()),
                })
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(values.len());
        for v in values {
            let x: f64 = v.parse().map_err(|_| SeatError::Format {
                line: lineno,
                msg: format!("cannot parse {v:?} as a number"),
            })?;
            if !x.is_finite() {
                return Err(SeatError::Data(format!(
                    "non-finite embedding value at line {lineno}"
                )));
            }
            row.push(x);
        }
        if token == PAD_TOKEN {
            continue;
        }
        if token == UNK_TOKEN {
            if file_unk.is_none() {
                file_unk = Some(row);
            }
            continue;
        }
        if vocab.id(token).is_some() {
            continue;
        }
        vocab.insert(token);
        rows.push(row);
    }

    let dim = match dim {
        Some(d) if !rows.is_empty() || file_unk.is_some() => d,
        _ => return Err(SeatError::Data("no embedding rows".into())),
    };
    let mut matrix = Mat::zeros(vocab.len(), dim);
    matrix
        .row_mut(Vocabulary::UNK)
        .copy_from_slice(&file_unk.unwrap_or_else(|| unk_row(dim)));
    for (i, row) in rows.into_iter().enumerate() {
        matrix.row_mut(i + 2).copy_from_slice(&row);
    }
    Ok(EmbeddingTable { vocab, matrix })
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| SeatError::io(path, e))?;
    parse_embeddings(&text)
}

/// Text form accepted by [`parse_embeddings`]; the pad row is omitted.
pub fn format_embeddings(table: &EmbeddingTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", table.len() - 1, table.dim());
    for id in 1..table.len() {
        out.push_str(table.vocab.token(id).unwrap_or(UNK_TOKEN));
        for v in table.row(id) {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    std::fs::write(path, format_embeddings(table)).map_err(|e| SeatError::io(path, e))
}

/// Lowercase + whitespace tokenization, truncated to [`MAX_SEQ_LEN`].
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    text.split_whitespace()
        .take(MAX_SEQ_LEN)
        .map(|t| vocab.id_or_unk(&t.to_lowercase()))
        .collect()
}

#[derive(Serialize)]
struct DatasetRecord<'a> {
    text: String,
    label: u8,
    split: &'a str,
}

pub fn parse_dataset(text: &str, vocab: &Vocabulary) -> Result<Dataset> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| SeatError::Format {
            line: lineno,
            msg: e.to_string(),
        })?;
        let field = |name: &str| {
            value.get(name).ok_or_else(|| SeatError::Format {
                line: lineno,
                msg: format!("missing field {name:?}"),
            })
        };
        let text = field("text")?.as_str().ok_or_else(|| SeatError::Format {
            line: lineno,
            msg: "field \"text\" is not a string".into(),
        })?;
        let label = match field("label")?.as_i64() {
            Some(l @ (0 | 1)) => l as u8,
            _ => {
                return Err(SeatError::Data(format!(
                    "label at line {lineno} must be 0 or 1"
                )))
            }
        };
        let split = field("split")?.as_str().ok_or_else(|| SeatError::Format {
            line: lineno,
            msg: "field \"split\" is not a string".into(),
        })?;
        let token_ids = tokenize(text, vocab);
        if token_ids.is_empty() {
            return Err(SeatError::Data(format!("empty text at line {lineno}")));
        }
        let example = Example { token_ids, label };
        match split {
            "train" => train.push(example),
            "test" => test.push(example),
            other => {
                return Err(SeatError::Data(format!(
                    "unknown split {other:?} at line {lineno}"
                )))
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(SeatError::Data("both train and test splits must be non-empty".into()));
    }
    Ok(Dataset { train, test })
}

pub fn load_dataset(path: &Path, vocab: &Vocabulary) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| SeatError::io(path, e))?;
    parse_dataset(&text, vocab)
}

pub fn format_dataset(dataset: &Dataset, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (split, examples) in [("train", &dataset.train), ("test", &dataset.test)] {
        for ex in examples {
            let text = ex
                .token_ids
                .iter()
                .map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN))
                .collect::<Vec<_>>()
                .join(" ");
            let record = DatasetRecord {
                text,
                label: ex.label,
                split,
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
    }
    out
}

pub fn write_dataset(dataset: &Dataset, vocab: &Vocabulary, path: &Path) -> Result<()> {
    std::fs::write(path, format_dataset(dataset, vocab)).map_err(|e| SeatError::io(path, e))
}

/// Shape of the bundled keyword-sentiment corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Number of word tokens, excluding pad and unk.
    pub vocab_size: usize,
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub keywords_per_class: usize,
    /// Upper bound on keywords placed in one sentence.
    pub max_keywords: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            dim: 16,
            min_len: 8,
            max_len: 20,
            n_train: 2000,
            n_test: 500,
            keywords_per_class: 10,
            max_keywords: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    pub table: EmbeddingTable,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn vocab(&self) -> &Vocabulary {
        &self.table.vocab
    }

    /// Label implied by keyword counts; `None` when the counts tie.
    pub fn label_of(&self, ids: &[usize]) -> Option<u8> {
        let pos = ids.iter().filter(|id| self.positive.contains(id)).count();
        let neg = ids.iter().filter(|id| self.negative.contains(id)).count();
        match pos.cmp(&neg) {
            std::cmp::Ordering::Greater => Some(1),
            std::cmp::Ordering::Less => Some(0),
            std::cmp::Ordering::Equal => None,
        }
    }
}

/// Generates a separable binary corpus: every sentence carries 1 to
/// `max_keywords` keywords of its class among uniformly drawn distractors.
/// Labels are exactly balanced per split (up to one example).
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    let n_keywords = 2 * spec.keywords_per_class;
    if spec.keywords_per_class == 0 || spec.vocab_size <= n_keywords {
        return Err(SeatError::Config(format!(
            "vocab size {} must exceed the keyword count {n_keywords}",
            spec.vocab_size
        )));
    }
    if spec.dim == 0 {
        return Err(SeatError::Config("embedding dim must be positive".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len || spec.max_len > MAX_SEQ_LEN {
        return Err(SeatError::Config(format!(
            "sentence length range [{}, {}] must lie within [1, {MAX_SEQ_LEN}]",
            spec.min_len, spec.max_len
        )));
    }
    if spec.n_train == 0 || spec.n_test == 0 || spec.max_keywords == 0 {
        return Err(SeatError::Config(
            "train/test counts and max_keywords must be positive".into(),
        ));
    }

    let mut vocab = Vocabulary::new();
    let positive: Vec<usize> = (0..spec.keywords_per_class)
        .map(|i| vocab.insert(&format!("pos{i:02}")))
        .collect();
    let negative: Vec<usize> = (0..spec.keywords_per_class)
        .map(|i| vocab.insert(&format!("neg{i:02}")))
        .collect();
    let distractors: Vec<usize> = (0..spec.vocab_size - n_keywords)
        .map(|i| vocab.insert(&format!("w{i:03}")))
        .collect();

    let mut emb_rng = StreamRng::derive(seed, "synthetic-embeddings", 0);
    let mut matrix = Mat::from_fn(vocab.len(), spec.dim, |_, _| emb_rng.uniform(-1.0, 1.0));
    matrix.row_mut(Vocabulary::PAD).fill(0.0);
    let table = EmbeddingTable { vocab, matrix };

    let make_split = |label: &str, n: usize| {
        let mut rng = StreamRng::derive(seed, label, 0);
        let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        labels.shuffle(&mut rng);
        labels
            .into_iter()
            .map(|label| {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let n_kw = rng.random_range(1..=spec.max_keywords.min(len));
                let keywords = if label == 1 { &positive } else { &negative };
                let mut token_ids: Vec<usize> = (0..len)
                    .map(|_| distractors[rng.random_range(0..distractors.len())])
                    .collect();
                for pos in index::sample(&mut rng, len, n_kw) {
                    token_ids[pos] = keywords[rng.random_range(0..keywords.len())];
                }
                Example { token_ids, label }
            })
            .collect::<Vec<_>>()
    };
    let dataset = Dataset {
        train: make_split("synthetic-train", spec.n_train),
        test: make_split("synthetic-test", spec.n_test),
    };
    Ok(SyntheticCorpus {
        dataset,
        table,
        positive,
        negative,
    })
}

/// Nearest neighbour by cosine similarity, excluding the query and the
/// reserved ids. Ties go to the lowest id; zero-norm candidates are skipped.
pub fn nearest_synonym(token_id: usize, table: &EmbeddingTable) -> Result<usize> {
    if token_id == Vocabulary::PAD || token_id >= table.len() {
        return Err(SeatError::Argument(format!(
            "token id {token_id} is not a valid synonym query"
        )));
    }
    if table.len() < 4 {
        return Err(SeatError::Argument(
            "synonym lookup needs at least two non-reserved rows".into(),
        ));
    }
    let query = table.row(token_id);
    let qn = dot(query, query).sqrt();
    if qn == 0.0 {
        return Err(SeatError::Argument("no direction for synonym lookup".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for id in 2..table.len() {
        if id == token_id {
            continue;
        }
        let row = table.row(id);
        let rn = dot(row, row).sqrt();
        if rn == 0.0 {
            continue;
        }
        let cos = dot(query, row) / (qn * rn);
        if best.is_none_or(|(_, b)| cos > b) {
            best = Some((id, cos));
        }
    }
    best.map(|(id, _)| id)
        .ok_or_else(|| SeatError::Argument("no synonym candidates".into()))
}

/// Replaces `min(n, replaceable)` uniformly chosen positions with their
/// nearest synonym. Reserved tokens and zero-norm rows are not replaceable.
pub fn perturb_words(x: &Example, n: usize, table: &EmbeddingTable, rng: &mut StreamRng) -> Example {
    let candidates: Vec<(usize, usize)> = x
        .token_ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| !Vocabulary::is_reserved(id))
        .filter_map(|(pos, &id)| nearest_synonym(id, table).ok().map(|syn| (pos, syn)))
        .collect();
    let mut out = x.clone();
    let n = n.min(candidates.len());
    if n == 0 {
        return out;
    }
    for i in index::sample(rng, candidates.len(), n) {
        let (pos, syn) = candidates[i];
        out.token_ids[pos] = syn;
    }
    out
}
