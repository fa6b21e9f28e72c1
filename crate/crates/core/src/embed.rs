//! Word-level embedding matrices, the `EMB1` file format, and ensembling.
//!
//! `EMB1` layout (little-endian):
//!
//! ```text
//! magic   "EMB1"            4 bytes
//! version u32 = 1
//! count   u32               sentences
//! repeated `count` times:
//!   id_len u16, id bytes (UTF-8)
//!   rows u32, dim u32
//!   rows * dim f32, row-major
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const EMB1_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB1_VERSION: u32 = 1;

/// Row-major `rows × dim` matrix of `f32` vectors, one row per word (or piece).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
    pub source_model: Option<String>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(dim) != Some(values.len()) {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{dim} matrix needs {} values, got {}",
                rows.saturating_mul(dim),
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                id: String::new(),
                row: pos / dim.max(1),
                col: pos % dim.max(1),
            });
        }
        Ok(Self {
            rows,
            dim,
            values,
            source_model: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn with_source(mut self, model: impl Into<String>) -> Self {
        self.source_model = Some(model.into());
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(self.rows, self.dim, self.values.iter().map(|v| v * factor).collect())
    }
}

/// Elementwise mean of equally-shaped matrices.
///
/// Each element is accumulated in `f64` in input order, divided by the
/// number of matrices, then rounded once to `f32`. Identical inputs give
/// back the input bit-for-bit. For up to five inputs whose nonzero
/// magnitudes at an element lie within a factor 2^26 of each other the `f64`
/// sum is exact, so the result does not depend on input order.
pub fn ensemble_average<'a, I>(mats: I) -> Result<EmbeddingMatrix>
where
    I: IntoIterator<Item = &'a EmbeddingMatrix>,
{
    let mats: Vec<&EmbeddingMatrix> = mats.into_iter().collect();
    let first = *mats
        .first()
        .ok_or_else(|| Error::ShapeMismatch("ensemble of zero matrices".into()))?;
    for m in &mats[1..] {
        if m.dim != first.dim {
            return Err(Error::DimensionMismatch {
                expected: first.dim,
                actual: m.dim,
            });
        }
        if m.rows != first.rows {
            return Err(Error::ShapeMismatch(format!(
                "row counts differ: {} vs {}",
                first.rows, m.rows
            )));
        }
    }
    let k = mats.len() as f64;
    let values = (0..first.values.len())
        .map(|j| {
            let sum = mats.iter().fold(0.0f64, |acc, m| acc + f64::from(m.values[j]));
            (sum / k) as f32
        })
        .collect();
    Ok(EmbeddingMatrix {
        rows: first.rows,
        dim: first.dim,
        values,
        source_model: None,
    })
}

/// Parses an `EMB1` stream into `(sentence id, matrix)` pairs in file order.
pub fn read_embeddings<R: Read>(mut reader: R) -> Result<Vec<(String, EmbeddingMatrix)>> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<stream>", e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if magic != EMB1_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != EMB1_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = cur.u32("sentence count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for s in 0..count {
        let id_len = cur.u16("id length")? as usize;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| Error::Truncated(format!("sentence {s}: id is not UTF-8")))?
            .to_string();
        let rows = cur.u32("rows")? as usize;
        let dim = cur.u32("dim")? as usize;
        let n = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Truncated(format!("sentence `{id}`: absurd shape {rows}x{dim}")))?;
        let payload = cur.take(n, "payload")?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                id,
                row: pos / dim,
                col: pos % dim,
            });
        }
        out.push((
            id,
            EmbeddingMatrix {
                rows,
                dim,
                values,
                source_model: None,
            },
        ));
    }
    if cur.pos != bytes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} trailing bytes after last sentence",
            bytes.len() - cur.pos
        )));
    }
    Ok(out)
}

pub fn read_embedding_file(path: &Path) -> Result<HashMap<String, EmbeddingMatrix>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let entries = read_embeddings(std::io::BufReader::new(file))?;
    let mut map = HashMap::with_capacity(entries.len());
    for (id, m) in entries {
        if map.contains_key(&id) {
            return Err(Error::ShapeMismatch(format!(
                "{}: duplicate sentence id `{id}`",
                path.display()
            )));
        }
        map.insert(id, m);
    }
    Ok(map)
}

pub fn write_embeddings<'a, W, I>(mut writer: W, entries: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a EmbeddingMatrix)>,
{
    let entries: Vec<_> = entries.into_iter().collect();
    let io = |e| Error::io("<stream>", e);
    let count = u32::try_from(entries.len()).map_err(|_| Error::ShapeMismatch("too many sentences".into()))?;
    writer.write_all(&EMB1_MAGIC).map_err(io)?;
    writer.write_all(&EMB1_VERSION.to_le_bytes()).map_err(io)?;
    writer.write_all(&count.to_le_bytes()).map_err(io)?;
    for (id, m) in entries {
        let id_len = u16::try_from(id.len())
            .map_err(|_| Error::ShapeMismatch(format!("sentence id too long: {} bytes", id.len())))?;
        writer.write_all(&id_len.to_le_bytes()).map_err(io)?;
        writer.write_all(id.as_bytes()).map_err(io)?;
        writer.write_all(&(m.rows as u32).to_le_bytes()).map_err(io)?;
        writer.write_all(&(m.dim as u32).to_le_bytes()).map_err(io)?;
        for v in &m.values {
            writer.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    writer.flush().map_err(io)
}

pub fn write_embedding_file<'a, I>(path: &Path, entries: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a EmbeddingMatrix)>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_embeddings(BufWriter::new(file), entries).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Word-level matrices for every sentence, one per model in configured order.
///
/// Immutable once built.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    models: Vec<String>,
    sentences: BTreeMap<String, Vec<EmbeddingMatrix>>,
}

impl EmbeddingStore {
    /// Builds a store from per-model maps. Every model must cover the same
    /// sentence ids, and row counts must agree across models per sentence.
    pub fn from_models(per_model: Vec<(String, HashMap<String, EmbeddingMatrix>)>) -> Result<Self> {
        if per_model.is_empty() {
            return Err(Error::Config("no embedding models given".into()));
        }
        let models: Vec<String> = per_model.iter().map(|(m, _)| m.clone()).collect();
        let reference: std::collections::BTreeSet<String> = per_model[0].1.keys().cloned().collect();
        for (model, map) in &per_model[1..] {
            let ids: std::collections::BTreeSet<String> = map.keys().cloned().collect();
            if ids != reference {
                let missing = reference
                    .symmetric_difference(&ids)
                    .next()
                    .map(|s| s.to_string())
                    .unwrap_or_default();
                return Err(Error::ShapeMismatch(format!(
                    "model `{model}` covers a different sentence set (e.g. `{missing}`)"
                )));
            }
        }
        let mut sentences = BTreeMap::new();
        let mut per_model = per_model;
        for id in reference {
            let mut mats = Vec::with_capacity(models.len());
            for (model, map) in &mut per_model {
                let m = map.remove(&id).expect("same id set").with_source(model.clone());
                mats.push(m);
            }
            if mats.iter().any(|m| m.rows() != mats[0].rows()) {
                return Err(Error::ShapeMismatch(format!(
                    "sentence `{id}`: models disagree on word count"
                )));
            }
            sentences.insert(id, mats);
        }
        Ok(Self { models, sentences })
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn get(&self, id: &str) -> Option<&[EmbeddingMatrix]> {
        self.sentences.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Keeps only the given models, in the given order.
    pub fn select_models(&self, wanted: &[String]) -> Result<Self> {
        let idx: Vec<usize> = wanted
            .iter()
            .map(|w| {
                self.models
                    .iter()
                    .position(|m| m == w)
                    .ok_or_else(|| Error::Config(format!("model `{w}` not in embedding store")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            models: wanted.to_vec(),
            sentences: self
                .sentences
                .iter()
                .map(|(id, mats)| (id.clone(), idx.iter().map(|&i| mats[i].clone()).collect()))
                .collect(),
        })
    }

    /// Per-model dims, in model order.
    pub fn dims(&self) -> Vec<usize> {
        self.sentences
            .values()
            .next()
            .map(|mats| mats.iter().map(EmbeddingMatrix::dim).collect())
            .unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<EmbeddingMatrix>)> {
        self.sentences.iter()
    }
}
