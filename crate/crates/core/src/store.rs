//! Candidate pool, query manifests, precomputed embeddings and the coarse
//! cosine top-K stage.
//!
//! Embeddings are never computed here. They arrive in a small binary format:
//!
//! ```text
//! "VRE1" | dim: u32 LE | count: u32 LE | dim*count f32 LE (row-major) | crc32(payload): u32 LE
//! ```

use std::collections::{BTreeSet, HashMap};
use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"VRE1";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("bad embedding magic {found:?}, expected \"VRE1\"")]
    BadMagic { found: Vec<u8> },
    #[error("embedding file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("embedding file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("embedding header declares zero {0}")]
    EmptyHeader(&'static str),
    #[error("embedding checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("non-finite embedding value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),
    #[error("pool has no embeddings attached")]
    MissingEmbeddings,
    #[error("candidate {id:?} references embedding row {row}, matrix has {count} rows")]
    RowOutOfRange { id: String, row: usize, count: usize },
    #[error("embedding row {row} referenced by both {first:?} and {second:?}")]
    SharedRow {
        row: usize,
        first: String,
        second: String,
    },
    #[error("embedding matrix has {rows} rows but pool has {candidates} candidates")]
    RowCount { rows: usize, candidates: usize },
    #[error("K must be at least 1")]
    InvalidK,
    #[error("query {0:?} has no embedding")]
    MissingQueryEmbedding(String),
    #[error("unknown candidate id {0:?}")]
    UnknownCandidate(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "image")]
    Image,
    #[serde(rename = "text-image", alias = "text_image")]
    TextImage,
}

impl Modality {
    pub fn has_text(self) -> bool {
        matches!(self, Modality::Text | Modality::TextImage)
    }

    pub fn has_image(self) -> bool {
        matches!(self, Modality::Image | Modality::TextImage)
    }
}

fn non_empty(s: &Option<String>) -> bool {
    s.as_deref().is_some_and(|s| !s.is_empty())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_row: Option<usize>,
}

impl Candidate {
    pub fn text(id: impl Into<String>, text: impl Into<String>) -> Self {
        Candidate {
            id: id.into(),
            modality: Modality::Text,
            text: Some(text.into()),
            image_ref: None,
            embedding_row: None,
        }
    }

    pub fn image(id: impl Into<String>, image_ref: impl Into<String>) -> Self {
        Candidate {
            id: id.into(),
            modality: Modality::Image,
            text: None,
            image_ref: Some(image_ref.into()),
            embedding_row: None,
        }
    }

    /// Checks that the present fields agree with the declared modality.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty candidate id".into());
        }
        check_fields(
            self.modality,
            non_empty(&self.text),
            non_empty(&self.image_ref) as usize,
        )
    }
}

fn check_fields(modality: Modality, has_text: bool, n_images: usize) -> Result<(), String> {
    match (modality.has_text(), has_text) {
        (true, false) => return Err(format!("modality {modality:?} requires text")),
        (false, true) => return Err(format!("modality {modality:?} must not carry text")),
        _ => {}
    }
    match (modality.has_image(), n_images > 0) {
        (true, false) => Err(format!("modality {modality:?} requires an image reference")),
        (false, true) => Err(format!(
            "modality {modality:?} must not carry image references"
        )),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_refs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub gt_candidate_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_row: Option<usize>,
}

impl Query {
    pub fn text(id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            id: id.into(),
            modality: Modality::Text,
            text: Some(text.into()),
            image_refs: Vec::new(),
            gt_candidate_ids: BTreeSet::new(),
            embedding: None,
            embedding_row: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty query id".into());
        }
        if self.image_refs.iter().any(String::is_empty) {
            return Err("empty image reference".into());
        }
        check_fields(self.modality, non_empty(&self.text), self.image_refs.len())
    }

    /// The query vector: inline `embedding`, else `embedding_row` of `matrix`.
    pub fn vector<'a>(&'a self, matrix: Option<&'a EmbeddingMatrix>) -> Result<&'a [f32], StoreError> {
        if let Some(v) = &self.embedding {
            return Ok(v);
        }
        match (self.embedding_row, matrix) {
            (Some(row), Some(m)) if row < m.count() => Ok(m.row(row)),
            (Some(row), Some(m)) => Err(StoreError::RowOutOfRange {
                id: self.id.clone(),
                row,
                count: m.count(),
            }),
            _ => Err(StoreError::MissingQueryEmbedding(self.id.clone())),
        }
    }
}

fn normalise_strings(field: &mut Option<String>) {
    if field.as_deref() == Some("") {
        *field = None;
    }
}

/// Reads a candidate manifest. Empty string fields count as absent.
pub fn read_candidates<R: BufRead>(reader: R) -> Result<Vec<Candidate>, StoreError> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut cand: Candidate =
            serde_json::from_str(&line).map_err(|e| StoreError::Manifest {
                line: line_no,
                message: e.to_string(),
            })?;
        normalise_strings(&mut cand.text);
        normalise_strings(&mut cand.image_ref);
        cand.validate().map_err(|message| StoreError::Manifest {
            line: line_no,
            message,
        })?;
        if seen.insert(cand.id.clone(), line_no).is_some() {
            return Err(StoreError::DuplicateId {
                line: line_no,
                id: cand.id,
            });
        }
        out.push(cand);
    }
    Ok(out)
}

/// Reads a query manifest with the same line-numbered error reporting as candidates.
pub fn read_queries<R: BufRead>(reader: R) -> Result<Vec<Query>, StoreError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut query: Query = serde_json::from_str(&line).map_err(|e| StoreError::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        normalise_strings(&mut query.text);
        query.validate().map_err(|message| StoreError::Manifest {
            line: line_no,
            message,
        })?;
        if let Some(emb) = &query.embedding {
            if let Some(col) = emb.iter().position(|v| !v.is_finite()) {
                return Err(StoreError::Manifest {
                    line: line_no,
                    message: format!("non-finite query embedding value at index {col}"),
                });
            }
        }
        if !seen.insert(query.id.clone()) {
            return Err(StoreError::DuplicateId {
                line: line_no,
                id: query.id,
            });
        }
        out.push(query);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    count: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, count: usize, values: Vec<f32>) -> Result<Self, StoreError> {
        if dim == 0 {
            return Err(StoreError::EmptyHeader("dim"));
        }
        if count == 0 {
            return Err(StoreError::EmptyHeader("count"));
        }
        if values.len() != dim * count {
            return Err(StoreError::Truncated {
                expected: dim * count,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(EmbeddingMatrix { dim, count, values })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, StoreError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(dim * rows.len());
        for row in rows {
            if row.len() != dim {
                return Err(StoreError::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(dim, rows.len(), values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn read_from<R: Read>(mut reader: R) -> Result<Self, StoreError> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StoreError> {
        if bytes.len() < 12 {
            if bytes.len() >= 4 && &bytes[..4] != EMBEDDING_MAGIC {
                return Err(StoreError::BadMagic {
                    found: bytes[..4].to_vec(),
                });
            }
            return Err(StoreError::Truncated {
                expected: 12,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != EMBEDDING_MAGIC {
            return Err(StoreError::BadMagic {
                found: bytes[..4].to_vec(),
            });
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(StoreError::EmptyHeader("dim"));
        }
        if count == 0 {
            return Err(StoreError::EmptyHeader("count"));
        }
        let payload_len = dim
            .checked_mul(count)
            .and_then(|n| n.checked_mul(4))
            .ok_or(StoreError::Truncated {
                expected: usize::MAX,
                found: bytes.len(),
            })?;
        let expected = 12 + payload_len + 4;
        if bytes.len() < expected {
            return Err(StoreError::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(StoreError::TrailingBytes(bytes.len() - expected));
        }
        let payload = &bytes[12..12 + payload_len];
        let stored = u32::from_le_bytes(bytes[12 + payload_len..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(StoreError::Checksum { stored, computed });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dim, count, values)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        let payload_start = out.len();
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[payload_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> io::Result<()> {
        writer.write_all(&self.encode())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub candidate_id: String,
    pub score: f64,
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// An immutable candidate pool, optionally with an attached embedding matrix.
#[derive(Debug, Clone)]
pub struct Pool {
    candidates: Vec<Candidate>,
    by_id: HashMap<String, usize>,
    embeddings: Option<Embedded>,
}

#[derive(Debug, Clone)]
struct Embedded {
    matrix: EmbeddingMatrix,
    /// Matrix row for each candidate, in ingestion order.
    rows: Vec<usize>,
    norms: Vec<f64>,
}

impl Pool {
    pub fn new(candidates: Vec<Candidate>) -> Result<Self, StoreError> {
        let mut by_id = HashMap::with_capacity(candidates.len());
        for (i, c) in candidates.iter().enumerate() {
            c.validate().map_err(|message| StoreError::Manifest {
                line: i + 1,
                message,
            })?;
            if by_id.insert(c.id.clone(), i).is_some() {
                return Err(StoreError::DuplicateId {
                    line: i + 1,
                    id: c.id.clone(),
                });
            }
        }
        Ok(Pool {
            candidates,
            by_id,
            embeddings: None,
        })
    }

    pub fn ingest<R: BufRead>(reader: R) -> Result<Self, StoreError> {
        Self::new(read_candidates(reader)?)
    }

    /// Attaches an embedding matrix. Candidates without an explicit
    /// `embedding_row` use their ingestion index; every row must be used exactly once.
    pub fn with_embeddings(mut self, matrix: EmbeddingMatrix) -> Result<Self, StoreError> {
        if matrix.count() != self.candidates.len() {
            return Err(StoreError::RowCount {
                rows: matrix.count(),
                candidates: self.candidates.len(),
            });
        }
        let mut owner: Vec<Option<usize>> = vec![None; matrix.count()];
        let mut rows = Vec::with_capacity(self.candidates.len());
        for (i, c) in self.candidates.iter().enumerate() {
            let row = c.embedding_row.unwrap_or(i);
            if row >= matrix.count() {
                return Err(StoreError::RowOutOfRange {
                    id: c.id.clone(),
                    row,
                    count: matrix.count(),
                });
            }
            if let Some(prev) = owner[row] {
                return Err(StoreError::SharedRow {
                    row,
                    first: self.candidates[prev].id.clone(),
                    second: c.id.clone(),
                });
            }
            owner[row] = Some(i);
            rows.push(row);
        }
        let norms = rows.iter().map(|&r| norm(matrix.row(r))).collect();
        self.embeddings = Some(Embedded {
            matrix,
            rows,
            norms,
        });
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn get(&self, id: &str) -> Option<&Candidate> {
        self.by_id.get(id).map(|&i| &self.candidates[i])
    }

    /// Resolves ids to candidates, preserving order.
    pub fn resolve(&self, ids: &[String]) -> Result<Vec<Candidate>, StoreError> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| StoreError::UnknownCandidate(id.clone()))
            })
            .collect()
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embeddings.as_ref().map(|e| e.matrix.dim())
    }
}

/// Ranking key of a cosine score in `[-1, 1]`, quantised to 1e-12.
fn tie_key(score: f64) -> i64 {
    (score * 1e12).round() as i64
}

/// Exhaustive cosine top-K. Scores are accumulated in `f64`; ties keep ingestion order.
pub fn cosine_topk(query: &[f32], pool: &Pool, k: usize) -> Result<Vec<RetrievalHit>, StoreError> {
    if k == 0 {
        return Err(StoreError::InvalidK);
    }
    let emb = pool.embeddings.as_ref().ok_or(StoreError::MissingEmbeddings)?;
    if query.len() != emb.matrix.dim() {
        return Err(StoreError::DimensionMismatch {
            expected: emb.matrix.dim(),
            found: query.len(),
        });
    }
    let qn = norm(query);
    if qn == 0.0 || !qn.is_finite() {
        return Err(StoreError::ZeroNorm("query embedding".into()));
    }
    let mut scored = Vec::with_capacity(pool.len());
    for (i, (&row, &cn)) in emb.rows.iter().zip(&emb.norms).enumerate() {
        if cn == 0.0 {
            return Err(StoreError::ZeroNorm(format!(
                "candidate {:?}",
                pool.candidates[i].id
            )));
        }
        let s = (dot(query, emb.matrix.row(row)) / (qn * cn)).clamp(-1.0, 1.0);
        scored.push((i, s));
    }
    // Scores within 1e-12 tie (this also merges -0.0 and 0.0); the stable sort
    // then keeps ingestion order, which makes the order invariant to query scale.
    scored.sort_by_key(|&(_, s)| std::cmp::Reverse(tie_key(s)));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(i, score)| RetrievalHit {
            candidate_id: pool.candidates[i].id.clone(),
            score,
        })
        .collect())
}
