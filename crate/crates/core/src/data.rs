//! On-disk layout of embedding directories.
//!
//! ```text
//! <emb-dir>/<model>/<split>.emb          EMB1, one matrix per sentence
//! <emb-dir>/<model>/<split>.tok.jsonl    optional subword tokenization
//! ```
//!
//! `<split>` is the dataset file stem (`train.jsonl` → `train`). When a
//! tokenization file is present the matrices are piece-level and get pooled
//! to words; otherwise they must already hold one row per word.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::align::{pool_subwords, read_tokenization_file, PoolingMode, Tokenization};
use crate::corpus::{parse_dataset, LabelSet, Sentence};
use crate::embed::{read_embedding_file, EmbeddingMatrix, EmbeddingStore};
use crate::error::{Error, Result};

pub fn split_name(data_path: &Path) -> String {
    data_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn embedding_path(dir: &Path, model: &str, split: &str) -> PathBuf {
    dir.join(model).join(format!("{split}.emb"))
}

pub fn tokenization_path(dir: &Path, model: &str, split: &str) -> PathBuf {
    dir.join(model).join(format!("{split}.tok.jsonl"))
}

pub fn read_dataset_file(path: &Path, labels: &LabelSet) -> Result<Vec<Sentence>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(BufReader::new(file), labels).map_err(|e| match e {
        Error::MalformedRecord { line, message } => Error::MalformedRecord {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Model directories under `dir` that hold embeddings for `split`, sorted by name.
pub fn discover_models(dir: &Path, split: &str) -> Result<Vec<String>> {
    let mut models = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if embedding_path(dir, &name, split).is_file() {
            models.push(name);
        }
    }
    models.sort();
    if models.is_empty() {
        return Err(Error::Config(format!(
            "no <model>/{split}.emb files under {}",
            dir.display()
        )));
    }
    Ok(models)
}

pub fn load_tokenizations(dir: &Path, model: &str, split: &str) -> Result<Option<HashMap<String, Tokenization>>> {
    let path = tokenization_path(dir, model, split);
    if !path.is_file() {
        return Ok(None);
    }
    let mut map = HashMap::new();
    for mut tok in read_tokenization_file(&path)? {
        if tok.model_id != model {
            // directory name is authoritative for ensemble membership
            tok.model_id = model.to_string();
        }
        if map.insert(tok.id.clone(), tok).is_some() {
            return Err(Error::InvalidTokenization(format!("{}: duplicate sentence id", path.display())));
        }
    }
    Ok(Some(map))
}

/// Word-level matrices of one model, pooled when a tokenization file exists.
pub fn load_model_embeddings(
    dir: &Path,
    model: &str,
    split: &str,
    pooling: PoolingMode,
) -> Result<HashMap<String, EmbeddingMatrix>> {
    let raw = read_embedding_file(&embedding_path(dir, model, split))?;
    let Some(toks) = load_tokenizations(dir, model, split)? else {
        return Ok(raw);
    };
    raw.into_iter()
        .map(|(id, m)| {
            let tok = toks
                .get(&id)
                .ok_or_else(|| Error::InvalidTokenization(format!("{model}: no tokenization for `{id}`")))?;
            Ok((id, pool_subwords(&m, tok, pooling)?))
        })
        .collect()
}

pub fn load_store(dir: &Path, split: &str, models: &[String], pooling: PoolingMode) -> Result<EmbeddingStore> {
    let per_model = models
        .iter()
        .map(|m| Ok((m.clone(), load_model_embeddings(dir, m, split, pooling)?)))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingStore::from_models(per_model)
}
