//! Exact cosine top-k retrieval over a caption corpus.
//!
//! The corpus is normalized once at build time and frozen. Queries are
//! normalized on the fly, so any positive rescaling of a query returns the
//! same hits. Ranking is by score descending with ties broken by ascending
//! corpus row.
//!
//! Index files (`CIX1`) store the normalized `f32` rows as an embedded `EMB1`
//! block followed by the captions:
//!
//! ```text
//! b"CIX1" | emb_len: u64 | EMB1 bytes (ids "0".."n-1") | captions joined by '\n'
//! ```

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs;
use std::path::Path;

use crate::embedstore::{l2_normalize, EmbeddingMatrix};
use crate::linalg;
use crate::{Error, Result};

pub const INDEX_MAGIC: &[u8; 4] = b"CIX1";

/// Default number of captions retrieved per image.
pub const DEFAULT_TOP_K: usize = 4;

/// Corpus rows scanned per block; keeps a block of rows hot while every
/// query in a chunk is scored against it.
const ROW_BLOCK: usize = 512;
const QUERY_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    pub corpus_row: usize,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct CorpusIndex {
    texts: Vec<String>,
    embeddings: EmbeddingMatrix,
    unit: Vec<f64>,
}

/// Candidate ordered so that "greater" means "ranks earlier".
#[derive(Debug, Clone, Copy)]
struct Candidate {
    score: f64,
    row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.row.cmp(&self.row))
    }
}

/// Bounded selection keeping the `k` best candidates; the worst sits on top.
struct TopK {
    k: usize,
    heap: BinaryHeap<std::cmp::Reverse<Candidate>>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(std::cmp::Reverse(c));
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if c > worst.0 {
                *worst = std::cmp::Reverse(c);
            }
        }
    }

    fn into_sorted(self) -> Vec<Candidate> {
        let mut v: Vec<Candidate> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_by(|a, b| b.cmp(a));
        v
    }
}

impl CorpusIndex {
    /// Builds an index from one caption per embedding row. Duplicate
    /// captions are kept as separate rows.
    pub fn build(texts: Vec<String>, embeddings: &EmbeddingMatrix) -> Result<Self> {
        if texts.len() != embeddings.rows() {
            return Err(Error::Shape(format!(
                "{} captions for {} embedding rows",
                texts.len(),
                embeddings.rows()
            )));
        }
        if let Some(t) = texts.iter().find(|t| t.contains('\n')) {
            return Err(Error::Format {
                what: "caption",
                detail: format!("caption contains a newline: {t:?}"),
            });
        }
        let normalized = l2_normalize(embeddings)?;
        let ids = (0..texts.len()).map(|i| i.to_string()).collect();
        let stored = EmbeddingMatrix::new(ids, normalized.dims(), normalized.data().to_vec())?;
        Ok(Self::from_stored(texts, stored))
    }

    /// The working copy is the stored `f32` rows renormalized in 64-bit, so
    /// an index reloaded from disk scores exactly like the one that wrote it.
    fn from_stored(texts: Vec<String>, embeddings: EmbeddingMatrix) -> Self {
        let mut unit = Vec::with_capacity(embeddings.data().len());
        for row in embeddings.iter_rows() {
            let n = linalg::norm_f32(row);
            unit.extend(row.iter().map(|&v| f64::from(v) / n));
        }
        Self {
            texts,
            embeddings,
            unit,
        }
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.embeddings.dims()
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn text(&self, row: usize) -> &str {
        &self.texts[row]
    }

    /// Unit-norm `f32` corpus rows.
    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    fn unit_row(&self, row: usize) -> &[f64] {
        let d = self.dims();
        &self.unit[row * d..(row + 1) * d]
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if k > self.len() {
            return Err(Error::invalid(format!(
                "k = {k} exceeds corpus size {}",
                self.len()
            )));
        }
        Ok(())
    }

    fn normalize_query(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: query.len(),
            });
        }
        if query.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("query has non-finite entries"));
        }
        let n = linalg::norm_f32(query);
        if n == 0.0 {
            return Err(Error::ZeroNorm {
                id: "<query>".into(),
            });
        }
        Ok(query.iter().map(|&v| f64::from(v) / n).collect())
    }

    pub fn query_topk(&self, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>> {
        self.check_k(k)?;
        let q = self.normalize_query(query)?;
        Ok(self.scan(std::slice::from_ref(&q), k).pop().unwrap())
    }

    /// Per-row [`query_topk`](Self::query_topk), aligned with the query rows.
    pub fn batch_query(
        &self,
        queries: &EmbeddingMatrix,
        k: usize,
    ) -> Result<Vec<Vec<RetrievalHit>>> {
        self.check_k(k)?;
        let normalized = queries
            .iter_rows()
            .map(|r| self.normalize_query(r))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(normalized.len());
        for chunk in normalized.chunks(QUERY_CHUNK) {
            out.extend(self.scan(chunk, k));
        }
        Ok(out)
    }

    fn scan(&self, queries: &[Vec<f64>], k: usize) -> Vec<Vec<RetrievalHit>> {
        let mut tops: Vec<TopK> = queries.iter().map(|_| TopK::new(k)).collect();
        for start in (0..self.len()).step_by(ROW_BLOCK) {
            let end = (start + ROW_BLOCK).min(self.len());
            for (q, top) in queries.iter().zip(tops.iter_mut()) {
                for row in start..end {
                    let score = linalg::dot(q, self.unit_row(row));
                    top.offer(Candidate { score, row });
                }
            }
        }
        tops.into_iter()
            .map(|t| {
                t.into_sorted()
                    .into_iter()
                    .map(|c| RetrievalHit {
                        corpus_row: c.row,
                        score: c.score,
                        text: self.texts[c.row].clone(),
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let emb = self.embeddings.to_bytes();
        let mut out = Vec::with_capacity(12 + emb.len());
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(emb.len() as u64).to_le_bytes());
        out.extend_from_slice(&emb);
        out.extend_from_slice(self.texts.join("\n").as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != INDEX_MAGIC {
            return Err(Error::BadMagic { expected: "CIX1" });
        }
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                expected: 12,
                found: bytes.len(),
            });
        }
        let emb_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let end = 12usize
            .checked_add(emb_len)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Truncated {
                expected: 12 + emb_len,
                found: bytes.len(),
            })?;
        let embeddings = EmbeddingMatrix::from_bytes(&bytes[12..end])?;
        let text = std::str::from_utf8(&bytes[end..]).map_err(|e| Error::Format {
            what: "caption block",
            detail: e.to_string(),
        })?;
        let texts: Vec<String> = text.split('\n').map(str::to_owned).collect();
        if texts.len() != embeddings.rows() {
            return Err(Error::Shape(format!(
                "{} captions for {} embedding rows",
                texts.len(),
                embeddings.rows()
            )));
        }
        Ok(Self::from_stored(texts, embeddings))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn build_index(texts: Vec<String>, embeddings: &EmbeddingMatrix) -> Result<CorpusIndex> {
    CorpusIndex::build(texts, embeddings)
}

pub fn query_topk(index: &CorpusIndex, query: &[f32], k: usize) -> Result<Vec<RetrievalHit>> {
    index.query_topk(query, k)
}

pub fn batch_query(
    index: &CorpusIndex,
    queries: &EmbeddingMatrix,
    k: usize,
) -> Result<Vec<Vec<RetrievalHit>>> {
    index.batch_query(queries, k)
}

/// Reads a corpus text file: one caption per line, line number = corpus row.
pub fn read_corpus_text(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let text = text.strip_suffix('\n').unwrap_or(&text);
    Ok(text
        .split('\n')
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_owned())
        .collect())
}

pub fn write_corpus_text(texts: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut body = texts.join("\n");
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes hits as CSV `query_id,rank,corpus_row,score`, ranks starting at 1.
pub fn write_hits(
    query_ids: &[String],
    hits: &[Vec<RetrievalHit>],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["query_id", "rank", "corpus_row", "score"])?;
    for (id, row_hits) in query_ids.iter().zip(hits) {
        for (rank, h) in row_hits.iter().enumerate() {
            w.write_record([
                id.clone(),
                (rank + 1).to_string(),
                h.corpus_row.to_string(),
                h.score.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
