//! On-disk formats and in-memory containers for embeddings, labels and splits.
//!
//! `EMB1` layout (all integers and floats little-endian):
//!
//! ```text
//! b"EMB1" | rows: u32 | dims: u32 | rows*dims f32, row-major | ids joined by '\n'
//! ```
//!
//! Label files are CSV `id,class_name`; split files are CSV
//! `id,class_name,is_labeled` with `is_labeled` in `{0,1}`. Both carry a
//! header row.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg;
use crate::{Error, Result};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 12;

/// Dense row-major `f32` matrix with one unique string id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dims: usize,
    data: Vec<f32>,
    ids: Vec<String>,
    positions: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dims: usize, data: Vec<f32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Shape("matrix must have at least one row".into()));
        }
        if dims == 0 {
            return Err(Error::Shape("matrix must have at least one column".into()));
        }
        if data.len() != ids.len() * dims {
            return Err(Error::Shape(format!(
                "{} values for {} rows of {} dims",
                data.len(),
                ids.len(),
                dims
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / dims,
                col: pos % dims,
            });
        }
        let mut positions = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() || id.contains('\n') || id.contains('\r') {
                return Err(Error::InvalidId(id.clone()));
            }
            if positions.insert(id.clone(), i).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            dims,
            data,
            ids,
            positions,
        })
    }

    /// Builds a matrix from row vectors, all of which must share a length.
    pub fn from_rows(ids: Vec<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dims) {
            return Err(Error::DimensionMismatch {
                expected: dims,
                got: bad.len(),
            });
        }
        Self::new(ids, dims, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dims..(row + 1) * self.dims]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dims)
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4 + self.ids.len() * 8);
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(self.ids.join("\n").as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != EMB_MAGIC {
            return Err(Error::BadMagic { expected: "EMB1" });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dims = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if rows == 0 || dims == 0 {
            return Err(Error::Shape(format!("header declares {rows}x{dims}")));
        }
        let payload = rows
            .checked_mul(dims)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Shape(format!("header {rows}x{dims} overflows")))?;
        let end = HEADER_LEN + payload;
        if bytes.len() < end {
            return Err(Error::Truncated {
                expected: end,
                found: bytes.len(),
            });
        }
        let data: Vec<f32> = bytes[HEADER_LEN..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let text = std::str::from_utf8(&bytes[end..]).map_err(|e| Error::Format {
            what: "id block",
            detail: e.to_string(),
        })?;
        let text = text.strip_suffix('\n').unwrap_or(text);
        let ids: Vec<String> = text.split('\n').map(str::to_owned).collect();
        if ids.len() != rows {
            return Err(Error::Shape(format!(
                "id block has {} ids for {} rows",
                ids.len(),
                rows
            )));
        }
        Self::new(ids, dims, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Returns the rows named by `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dims);
        for id in ids {
            let pos = self
                .position(id)
                .ok_or_else(|| Error::UnknownId(id.clone()))?;
            data.extend_from_slice(self.row(pos));
        }
        Self::new(ids.to_vec(), self.dims, data)
    }
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes)
}

pub fn save_matrix(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    m.save(path)
}

/// Scales every row to unit Euclidean norm. Norms are taken in 64-bit.
pub fn l2_normalize(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for (i, row) in m.iter_rows().enumerate() {
        let n = linalg::norm_f32(row);
        if n == 0.0 {
            return Err(Error::ZeroNorm {
                id: m.ids[i].clone(),
            });
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / n) as f32));
    }
    EmbeddingMatrix::new(m.ids.clone(), m.dims, data)
}

/// Ordered `id -> class_name` table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap(IndexMap<String, String>);

impl LabelMap {
    pub fn from_pairs<I, A, B>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut map = IndexMap::new();
        for (id, class) in pairs {
            let id = id.into();
            if id.is_empty() {
                return Err(Error::InvalidId(id));
            }
            if map.insert(id.clone(), class.into()).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        Ok(Self(map))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.0.get(id).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Distinct class names in lexicographic order.
    pub fn classes(&self) -> Vec<String> {
        self.0
            .values()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let mut reader = csv_reader(path)?;
    expect_header(&mut reader, &["id", "class_name"], "label file")?;
    let mut pairs = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Format {
                what: "label file",
                detail: format!("expected 2 fields, found {}", rec.len()),
            });
        }
        pairs.push((rec[0].to_owned(), rec[1].to_owned()));
    }
    LabelMap::from_pairs(pairs)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "class_name"])?;
    for (id, class) in labels.iter() {
        w.write_record([id, class])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitEntry {
    pub class: String,
    pub labeled: bool,
}

/// Partition of a dataset into a labeled set (seen classes only) and an
/// unlabeled set whose true classes are retained for evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    entries: IndexMap<String, SplitEntry>,
    seen: Vec<String>,
    classes: Vec<String>,
}

impl DatasetSplit {
    /// Seen classes are those carrying at least one labeled item.
    pub fn from_entries<I, A, B>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (A, B, bool)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut map = IndexMap::new();
        for (id, class, labeled) in entries {
            let id = id.into();
            if id.is_empty() {
                return Err(Error::InvalidId(id));
            }
            let entry = SplitEntry {
                class: class.into(),
                labeled,
            };
            if map.insert(id.clone(), entry).is_some() {
                return Err(Error::DuplicateId(id));
            }
        }
        if map.is_empty() {
            return Err(Error::invalid("split has no items"));
        }
        let seen: BTreeSet<String> = map
            .values()
            .filter(|e| e.labeled)
            .map(|e| e.class.clone())
            .collect();
        let classes: BTreeSet<String> = map.values().map(|e| e.class.clone()).collect();
        Ok(Self {
            entries: map,
            seen: seen.into_iter().collect(),
            classes: classes.into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SplitEntry> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SplitEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn labeled_ids(&self) -> Vec<String> {
        self.ids_where(true)
    }

    pub fn unlabeled_ids(&self) -> Vec<String> {
        self.ids_where(false)
    }

    fn ids_where(&self, labeled: bool) -> Vec<String> {
        self.iter()
            .filter(|(_, e)| e.labeled == labeled)
            .map(|(id, _)| id.to_owned())
            .collect()
    }

    /// `Y_L`, sorted.
    pub fn seen_classes(&self) -> &[String] {
        &self.seen
    }

    /// `Y_U`, sorted.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_seen_classes(&self) -> usize {
        self.seen.len()
    }

    pub fn num_total_classes(&self) -> usize {
        self.classes.len()
    }

    /// Position of `class` in the sorted seen-class list; this is the
    /// cluster index labeled items of that class are pinned to.
    pub fn seen_class_index(&self, class: &str) -> Option<usize> {
        self.seen.binary_search_by(|c| c.as_str().cmp(class)).ok()
    }

    pub fn is_seen(&self, class: &str) -> bool {
        self.seen_class_index(class).is_some()
    }

    /// True classes as a label table, in split order.
    pub fn truth(&self) -> LabelMap {
        LabelMap(
            self.entries
                .iter()
                .map(|(id, e)| (id.clone(), e.class.clone()))
                .collect(),
        )
    }
}

/// Item count for `fraction` of `n`, tolerant of binary rounding
/// (`0.7 * 10` must give 7, not 8).
fn fraction_ceil(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

fn fraction_floor(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64) + 1e-9).floor().max(0.0) as usize
}

/// Splits a labeled dataset into `D_L` and `D_U`.
///
/// The lexicographically first `ceil(seen_fraction * C)` classes are seen.
/// Within each seen class the items are shuffled with a ChaCha8 stream
/// seeded by `seed` and the first `floor(labeled_fraction * n)` (at least
/// one) become labeled. Everything else is unlabeled.
pub fn make_split(
    labels: &LabelMap,
    seen_fraction: f64,
    labeled_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    for (name, f) in [
        ("seen_fraction", seen_fraction),
        ("labeled_fraction", labeled_fraction),
    ] {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!("{name} must be in (0, 1], got {f}")));
        }
    }
    let classes = labels.classes();
    if classes.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 classes, found {}",
            classes.len()
        )));
    }
    let n_seen = fraction_ceil(seen_fraction, classes.len()).clamp(1, classes.len());

    let mut members: IndexMap<&str, Vec<&str>> = IndexMap::new();
    for (id, class) in labels.iter() {
        members.entry(class).or_default().push(id);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labeled = std::collections::HashSet::new();
    for class in &classes[..n_seen] {
        let mut items = members[class.as_str()].clone();
        if items.len() < 2 {
            return Err(Error::invalid(format!(
                "seen class {class:?} has {} item(s); at least 2 are needed to split it",
                items.len()
            )));
        }
        items.shuffle(&mut rng);
        let m = fraction_floor(labeled_fraction, items.len()).clamp(1, items.len());
        labeled.extend(items[..m].iter().copied());
    }

    if labeled.len() == labels.len() {
        return Err(Error::invalid(
            "split would leave the unlabeled set empty".to_string(),
        ));
    }
    DatasetSplit::from_entries(
        labels
            .iter()
            .map(|(id, class)| (id, class, labeled.contains(id))),
    )
}

pub fn read_split(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let path = path.as_ref();
    let mut reader = csv_reader(path)?;
    expect_header(&mut reader, &["id", "class_name", "is_labeled"], "split file")?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(Error::Format {
                what: "split file",
                detail: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        let labeled = match &rec[2] {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Format {
                    what: "split file",
                    detail: format!("is_labeled must be 0 or 1, found {other:?}"),
                })
            }
        };
        rows.push((rec[0].to_owned(), rec[1].to_owned(), labeled));
    }
    DatasetSplit::from_entries(rows)
}

pub fn write_split(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "class_name", "is_labeled"])?;
    for (id, e) in split.iter() {
        w.write_record([id, e.class.as_str(), if e.labeled { "1" } else { "0" }])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file))
}

pub(crate) fn expect_header(
    reader: &mut csv::Reader<fs::File>,
    expected: &[&str],
    what: &'static str,
) -> Result<()> {
    let header = reader.headers()?;
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Format {
            what,
            detail: format!("expected header {expected:?}, found {got:?}"),
        });
    }
    Ok(())
}
