//! Exhaustive cosine top-k search over a dialogue corpus.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DiseaseLabel, PatientRecord};
use crate::exec::Exec;
use crate::preprocess::Preprocessor;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate dialogue id {0}")]
    DuplicateId(String),
    #[error("entries embed to the zero vector: {}", .0.join(", "))]
    ZeroVectors(Vec<String>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("k must be >= 1")]
    InvalidK,
    #[error("embedding file row {row}: {message}")]
    MalformedRow { row: usize, message: String },
    #[error("embedding file header: {0}")]
    Header(String),
    #[error("embedding file declares count 0")]
    CountZero,
    #[error("embedding file declares {declared} rows, found {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("embedder: {0}")]
    Embedder(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RetrievalError + '_ {
    move |source| RetrievalError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueEntry {
    pub id: String,
    #[serde(rename = "patient")]
    pub patient_utterance: String,
    #[serde(rename = "doctor")]
    pub doctor_response: String,
    #[serde(rename = "disease", default, skip_serializing_if = "Option::is_none")]
    pub disease_tag: Option<String>,
}

/// Reads a JSON Lines corpus. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<DialogueEntry>, RetrievalError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: DialogueEntry = serde_json::from_str(&line).map_err(|e| RetrievalError::Corpus {
            line: i + 1,
            message: e.to_string(),
        })?;
        if entry.doctor_response.trim().is_empty() {
            return Err(RetrievalError::Corpus {
                line: i + 1,
                message: format!("entry {} has an empty doctor response", entry.id),
            });
        }
        if !seen.insert(entry.id.clone()) {
            return Err(RetrievalError::DuplicateId(entry.id));
        }
        out.push(entry);
    }
    Ok(out)
}

/// Text to vector. Implementations must emit a fixed dimension.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError>;
}

/// The builtin hashing featurizer used as a sentence embedder.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    pub preprocessor: Preprocessor,
}

impl HashingEmbedder {
    pub fn new(preprocessor: Preprocessor) -> Self {
        Self { preprocessor }
    }
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.preprocessor.config.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        self.preprocessor
            .text_features(text)
            .map(|f| f.values)
            .map_err(|e| RetrievalError::Embedder(e.to_string()))
    }
}

/// Remote encoder: `POST {"text": ...}` answered by `{"vector": [...]}`.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    pub url: String,
    pub dimension: usize,
    pub timeout: Duration,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, RetrievalError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut resp = agent
            .post(&self.url)
            .send_json(EmbedRequest { text })
            .map_err(|e| RetrievalError::Embedder(e.to_string()))?;
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| RetrievalError::Embedder(e.to_string()))?;
        if body.vector.len() != self.dimension {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dimension,
                got: body.vector.len(),
            });
        }
        Ok(body.vector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryText {
    /// doctor response followed by the patient utterance
    #[default]
    DoctorAndPatient,
    DoctorOnly,
}

impl EntryText {
    pub fn compose(self, e: &DialogueEntry) -> String {
        match self {
            EntryText::DoctorAndPatient => format!("{} {}", e.doctor_response, e.patient_utterance),
            EntryText::DoctorOnly => e.doctor_response.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    BuiltinFeaturizer,
    ExternalFile,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Unit vectors stored row-major with parallel ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dimension: usize,
    ids: Vec<String>,
    data: Vec<f64>,
    pub provenance: Provenance,
}

impl EmbeddingIndex {
    /// Normalizes each vector; rejects zero vectors, listing every offending id.
    pub fn from_vectors(
        dimension: usize,
        entries: Vec<(String, Vec<f64>)>,
        provenance: Provenance,
    ) -> Result<Self, RetrievalError> {
        if entries.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dimension);
        let mut zero = Vec::new();
        let mut seen = HashSet::new();
        for (id, v) in entries {
            if v.len() != dimension {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dimension,
                    got: v.len(),
                });
            }
            if !seen.insert(id.clone()) {
                return Err(RetrievalError::DuplicateId(id));
            }
            match unit(&v) {
                Some(u) => data.extend(u),
                None => {
                    zero.push(id.clone());
                    data.extend(v);
                }
            }
            ids.push(id);
        }
        if !zero.is_empty() {
            return Err(RetrievalError::ZeroVectors(zero));
        }
        Ok(Self {
            dimension,
            ids,
            data,
            provenance,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.data[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids
            .iter()
            .zip(self.data.chunks_exact(self.dimension))
            .map(|(id, v)| (id.as_str(), v))
    }

    pub fn write(&self, path: &Path) -> Result<(), RetrievalError> {
        let f = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = std::io::BufWriter::new(f);
        let mut line = format!("dim={} count={}\n", self.dimension, self.len());
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
        for (id, v) in self.entries() {
            line.clear();
            line.push_str(id);
            for x in v {
                let _ = write!(line, " {x:e}");
            }
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

/// Embeds every entry; the embedder must keep a fixed dimension.
pub fn build_index(
    corpus: &[DialogueEntry],
    embedder: &dyn Embedder,
    fields: EntryText,
) -> Result<EmbeddingIndex, RetrievalError> {
    if corpus.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let dim = embedder.dimension();
    let mut entries = Vec::with_capacity(corpus.len());
    for e in corpus {
        entries.push((e.id.clone(), embedder.embed(&fields.compose(e))?));
    }
    EmbeddingIndex::from_vectors(dim, entries, Provenance::BuiltinFeaturizer)
}

/// `u·v / (‖u‖‖v‖)`, clamped to [-1, 1] against rounding.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, RetrievalError> {
    if u.len() != v.len() {
        return Err(RetrievalError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn construct_query(diagnosis: &DiseaseLabel, record: &PatientRecord) -> String {
    format!("{} treatment: {}", diagnosis.name, record.symptom_text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub vector: Vec<f64>,
}

impl Query {
    pub fn embed(text: String, embedder: &dyn Embedder) -> Result<Self, RetrievalError> {
        let v = embedder.embed(&text)?;
        let vector = unit(&v).ok_or(RetrievalError::ZeroNorm)?;
        Ok(Self { text, vector })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
    pub k_requested: usize,
    pub min_score: f64,
}

impl RetrievalResult {
    pub fn empty(k: usize, min_score: f64) -> Self {
        Self {
            hits: Vec::new(),
            k_requested: k,
            min_score,
        }
    }
}

/// Scores every entry, keeps those `>= min_score`, orders by score
/// descending then id ascending, and cuts at `k`.
pub fn search(
    index: &EmbeddingIndex,
    query: &[f64],
    k: usize,
    min_score: f64,
    exec: Exec,
) -> Result<RetrievalResult, RetrievalError> {
    if k < 1 {
        return Err(RetrievalError::InvalidK);
    }
    if query.len() != index.dimension {
        return Err(RetrievalError::DimensionMismatch {
            expected: index.dimension,
            got: query.len(),
        });
    }
    let q = unit(query).ok_or(RetrievalError::ZeroNorm)?;
    let scores = exec.map_range(index.len(), |i| dot(&q, index.vector(i)).clamp(-1.0, 1.0));
    let mut kept: Vec<usize> = (0..index.len()).filter(|&i| scores[i] >= min_score).collect();
    let order = |a: &usize, b: &usize| {
        scores[*b]
            .total_cmp(&scores[*a])
            .then_with(|| index.ids[*a].cmp(&index.ids[*b]))
    };
    if kept.len() > k {
        kept.select_nth_unstable_by(k - 1, order);
        kept.truncate(k);
    }
    kept.sort_unstable_by(order);
    Ok(RetrievalResult {
        hits: kept
            .into_iter()
            .map(|i| Hit {
                id: index.ids[i].clone(),
                score: scores[i],
            })
            .collect(),
        k_requested: k,
        min_score,
    })
}

/// Parses `dim=<D> count=<N>` then `N` rows of `id` and `D` floats.
pub fn load_external_embeddings(path: &Path) -> Result<EmbeddingIndex, RetrievalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_embeddings(&text)
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingIndex, RetrievalError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(RetrievalError::CountZero)?;
    let mut dim = None;
    let mut count = None;
    for field in header.split_whitespace() {
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| RetrievalError::Header(format!("bad value in {field:?}")))
        };
        match field.split_once('=') {
            Some(("dim", v)) => dim = Some(parse(v)?),
            Some(("count", v)) => count = Some(parse(v)?),
            _ => return Err(RetrievalError::Header(format!("unexpected field {field:?}"))),
        }
    }
    let dim = dim.ok_or_else(|| RetrievalError::Header("missing dim".into()))?;
    let count = count.ok_or_else(|| RetrievalError::Header("missing count".into()))?;
    if count == 0 {
        return Err(RetrievalError::CountZero);
    }
    if dim == 0 {
        return Err(RetrievalError::Header("dim must be positive".into()));
    }
    let mut entries = Vec::with_capacity(count);
    for (i, line) in lines {
        let row = i + 1;
        let mut parts = line.split_whitespace();
        let id = parts.next().unwrap().to_string();
        let mut v = Vec::with_capacity(dim);
        for tok in parts {
            let x: f64 = tok.parse().map_err(|_| RetrievalError::MalformedRow {
                row,
                message: format!("not a number: {tok:?}"),
            })?;
            if !x.is_finite() {
                return Err(RetrievalError::MalformedRow {
                    row,
                    message: "non-finite value".into(),
                });
            }
            v.push(x);
        }
        if v.len() != dim {
            return Err(RetrievalError::MalformedRow {
                row,
                message: format!("expected {dim} values, found {}", v.len()),
            });
        }
        if norm(&v) == 0.0 {
            return Err(RetrievalError::MalformedRow {
                row,
                message: format!("zero vector for {id}"),
            });
        }
        entries.push((id, v));
    }
    if entries.len() != count {
        return Err(RetrievalError::CountMismatch {
            declared: count,
            found: entries.len(),
        });
    }
    EmbeddingIndex::from_vectors(dim, entries, Provenance::ExternalFile)
}
