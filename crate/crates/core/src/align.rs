//! Subword tokenizations from several encoders, per-word minimum-length
//! selection, and pooling of piece vectors back to word vectors.
//!
//! Each encoder's embeddings are pooled under that encoder's own
//! tokenization. The minimum-length selection is kept as alignment metadata
//! (which encoder splits a word into the fewest pieces), reported by
//! `align-inspect`.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};

/// One encoder's subword segmentation of one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenization {
    pub id: String,
    #[serde(rename = "model")]
    pub model_id: String,
    pub pieces: Vec<String>,
    pub word_index: Vec<usize>,
}

impl Tokenization {
    /// Number of words covered, i.e. `max(word_index) + 1`.
    pub fn n_words(&self) -> usize {
        self.word_index.last().map_or(0, |w| w + 1)
    }

    /// Validates the invariants against `n_words` and returns the piece range
    /// owned by each word.
    pub fn word_ranges(&self, n_words: usize) -> Result<Vec<Range<usize>>> {
        let bad = |msg: String| Error::InvalidTokenization(format!("`{}`/{}: {msg}", self.id, self.model_id));
        if self.pieces.len() != self.word_index.len() {
            return Err(bad(format!(
                "{} pieces but {} word indices",
                self.pieces.len(),
                self.word_index.len()
            )));
        }
        let mut ranges: Vec<Range<usize>> = Vec::with_capacity(n_words);
        for (p, &w) in self.word_index.iter().enumerate() {
            if w >= n_words {
                return Err(bad(format!("piece {p} points at word {w}, sentence has {n_words}")));
            }
            let started = ranges.len();
            if w + 1 == started {
                ranges[w].end = p + 1;
            } else if w == started {
                ranges.push(p..p + 1);
            } else if w < started {
                return Err(bad(format!("word_index decreases at piece {p}")));
            } else {
                return Err(bad(format!("word {started} has no pieces")));
            }
        }
        if ranges.len() != n_words {
            return Err(bad(format!("word {} has no pieces", ranges.len())));
        }
        Ok(ranges)
    }
}

/// Which encoder's segmentation was chosen for one word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WordSelection {
    /// Index into `WordAlignment::models`.
    pub model: usize,
    pub pieces: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WordAlignment {
    pub n_words: usize,
    pub models: Vec<String>,
    /// `per_model[m][w]` is the piece range of word `w` under model `m`.
    pub per_model: Vec<Vec<Range<usize>>>,
    pub selection: Vec<WordSelection>,
}

impl WordAlignment {
    pub fn piece_counts(&self, word: usize) -> Vec<usize> {
        self.per_model.iter().map(|r| r[word].len()).collect()
    }

    /// Words whose piece counts are not identical across models.
    pub fn divergent_words(&self) -> Vec<usize> {
        (0..self.n_words)
            .filter(|&w| {
                let counts = self.piece_counts(w);
                counts.iter().any(|&c| c != counts[0])
            })
            .collect()
    }
}

/// Picks, for every word, the model that splits it into the fewest pieces.
/// Ties go to the model that comes first in `toks`.
pub fn select_min_tokenization(toks: &[Tokenization], n_words: usize) -> Result<WordAlignment> {
    if toks.is_empty() {
        return Err(Error::InvalidTokenization("no tokenizations given".into()));
    }
    let per_model = toks
        .iter()
        .map(|t| t.word_ranges(n_words))
        .collect::<Result<Vec<_>>>()?;
    let selection = (0..n_words)
        .map(|w| {
            let (model, range) = per_model
                .iter()
                .enumerate()
                .min_by_key(|(m, ranges)| (ranges[w].len(), *m))
                .map(|(m, ranges)| (m, ranges[w].clone()))
                .expect("at least one model");
            WordSelection { model, pieces: range }
        })
        .collect();
    Ok(WordAlignment {
        n_words,
        models: toks.iter().map(|t| t.model_id.clone()).collect(),
        per_model,
        selection,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    First,
    #[default]
    Mean,
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::First => "first",
            PoolingMode::Mean => "mean",
        })
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(PoolingMode::First),
            "mean" => Ok(PoolingMode::Mean),
            other => Err(Error::Config(format!("unknown pooling mode `{other}`"))),
        }
    }
}

/// Collapses piece rows into one row per word.
pub fn pool_subwords(emb: &EmbeddingMatrix, tok: &Tokenization, mode: PoolingMode) -> Result<EmbeddingMatrix> {
    if emb.rows() != tok.pieces.len() {
        return Err(Error::ShapeMismatch(format!(
            "`{}`/{}: {} embedding rows for {} pieces",
            tok.id,
            tok.model_id,
            emb.rows(),
            tok.pieces.len()
        )));
    }
    let ranges = tok.word_ranges(tok.n_words())?;
    let dim = emb.dim();
    let mut values = Vec::with_capacity(ranges.len() * dim);
    for range in &ranges {
        match mode {
            PoolingMode::First => values.extend_from_slice(emb.row(range.start)),
            PoolingMode::Mean => {
                let mut acc = vec![0.0f64; dim];
                for p in range.clone() {
                    for (a, &v) in acc.iter_mut().zip(emb.row(p)) {
                        *a += f64::from(v);
                    }
                }
                let k = range.len() as f64;
                values.extend(acc.into_iter().map(|a| (a / k) as f32));
            }
        }
    }
    let out = EmbeddingMatrix::new(ranges.len(), dim, values)?;
    Ok(match &emb.source_model {
        Some(m) => out.with_source(m.clone()),
        None => out,
    })
}

/// Reads a JSON-lines tokenization file.
pub fn read_tokenization_file(path: &Path) -> Result<Vec<Tokenization>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tok: Tokenization = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        out.push(tok);
    }
    Ok(out)
}
