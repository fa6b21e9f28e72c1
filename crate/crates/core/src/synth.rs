//! Seeded synthetic corpora that stand in for real encoder output.
//!
//! Every tag gets a fixed random prototype vector. A word tagged `t` is
//! embedded by each pseudo-encoder as `prototype[t] + N(0, σ²)` noise, with
//! independent noise per encoder.
//!
//! Prototypes are Gaussian draws, orthogonalized when there are no more tags
//! than dimensions, and scaled to `prototype_scale` per coordinate (RMS).

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::align::Tokenization;
use crate::corpus::{spans_to_bio, EntitySpan, LabelSet, Sentence};
use crate::embed::{EmbeddingMatrix, EmbeddingStore};
use crate::error::{Error, Result};

const DOMAINS: [&str; 3] = ["sales", "advertising", "investment"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_sentences: usize,
    pub dim: usize,
    pub noise: f64,
    pub seed: u64,
    pub n_models: usize,
    pub prototype_scale: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that an entity starts at a free position.
    pub entity_rate: f64,
}

impl SynthConfig {
    pub fn new(n_sentences: usize, dim: usize, noise: f64, seed: u64) -> Self {
        Self {
            n_sentences,
            dim,
            noise,
            seed,
            n_models: 3,
            prototype_scale: 6.0,
            min_len: 20,
            max_len: 60,
            entity_rate: 0.6,
        }
    }
}

/// Sentences and word-level embeddings for `synth-0 … synth-{k-1}`.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub sentences: Vec<Sentence>,
    pub store: EmbeddingStore,
}

pub fn model_name(i: usize) -> String {
    format!("synth-{i}")
}

/// Three pseudo-encoders, default sentence shape.
pub fn generate_synthetic(
    n_sentences: usize,
    dim: usize,
    labels: &LabelSet,
    noise: f64,
    seed: u64,
) -> Result<SynthCorpus> {
    generate(&SynthConfig::new(n_sentences, dim, noise, seed), labels)
}

pub fn generate(cfg: &SynthConfig, labels: &LabelSet) -> Result<SynthCorpus> {
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be finite and ≥ 0, got {}", cfg.noise)));
    }
    if !(cfg.prototype_scale > 0.0 && cfg.prototype_scale.is_finite()) {
        return Err(Error::Config(format!("prototype scale must be finite and > 0, got {}", cfg.prototype_scale)));
    }
    if cfg.dim == 0 || cfg.n_models == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config("synthetic corpus needs dim, models and a length range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prototypes: Vec<Vec<f64>> = (0..labels.num_tags())
        .map(|_| (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    if prototypes.len() <= cfg.dim {
        orthogonalize(&mut prototypes);
    }
    for p in &mut prototypes {
        let rms = (p.iter().map(|x| x * x).sum::<f64>() / cfg.dim as f64).sqrt();
        for x in p.iter_mut() {
            *x *= cfg.prototype_scale / rms;
        }
    }
    let noise = Normal::new(0.0, cfg.noise).expect("σ checked above");

    let mut sentences = Vec::with_capacity(cfg.n_sentences);
    let mut per_model: Vec<HashMap<String, EmbeddingMatrix>> = vec![HashMap::new(); cfg.n_models];
    for s in 0..cfg.n_sentences {
        let n = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut spans = Vec::new();
        let mut i = 0;
        while i < n {
            if rng.random_bool(cfg.entity_rate) {
                let label = rng.random_range(0..labels.len());
                let len = rng.random_range(1..=3).min(n - i);
                spans.push(EntitySpan::new(labels.labels()[label].clone(), i, i + len));
                i += len;
            } else {
                i += 1;
            }
        }
        let words = (0..n).map(|_| format!("w{:03}", rng.random_range(0..1000))).collect();
        let sentence = Sentence {
            id: format!("synth-{s:05}"),
            words,
            spans,
            domain: Some(DOMAINS[rng.random_range(0..DOMAINS.len())].to_string()),
        };
        let tags = spans_to_bio(&sentence.spans, n, labels)?;
        for map in &mut per_model {
            let mut values = Vec::with_capacity(n * cfg.dim);
            for &t in tags.as_slice() {
                for &p in &prototypes[t] {
                    values.push((p + noise.sample(&mut rng)) as f32);
                }
            }
            map.insert(sentence.id.clone(), EmbeddingMatrix::new(n, cfg.dim, values)?);
        }
        sentences.push(sentence);
    }
    let store = EmbeddingStore::from_models(
        per_model
            .into_iter()
            .enumerate()
            .map(|(i, m)| (model_name(i), m))
            .collect(),
    )?;
    Ok(SynthCorpus { sentences, store })
}

/// Gram–Schmidt in place; Gaussian draws are independent almost surely.
fn orthogonalize(vs: &mut [Vec<f64>]) {
    for i in 0..vs.len() {
        let (done, rest) = vs.split_at_mut(i);
        let v = &mut rest[0];
        for u in done.iter() {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= dot * b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in v.iter_mut() {
            *a /= norm;
        }
    }
}

/// Splits each word into 1–3 pieces (model-specific, seeded) and repeats the
/// word's vector for every piece. Mean pooling recovers the word vectors
/// exactly.
pub fn subword_expand(
    sentence: &Sentence,
    model: &str,
    words: &EmbeddingMatrix,
    rng: &mut impl Rng,
) -> Result<(Tokenization, EmbeddingMatrix)> {
    let mut pieces = Vec::new();
    let mut word_index = Vec::new();
    let mut values = Vec::new();
    for (w, word) in sentence.words.iter().enumerate() {
        let chars: Vec<char> = word.chars().collect();
        let k = rng.random_range(1..=3usize).min(chars.len());
        let base = chars.len() / k;
        let extra = chars.len() % k;
        let mut at = 0;
        for j in 0..k {
            let len = base + usize::from(j < extra);
            pieces.push(chars[at..at + len].iter().collect::<String>());
            at += len;
            word_index.push(w);
            values.extend_from_slice(words.row(w));
        }
    }
    let rows = pieces.len();
    Ok((
        Tokenization {
            id: sentence.id.clone(),
            model_id: model.to_string(),
            pieces,
            word_index,
        },
        EmbeddingMatrix::new(rows, words.dim(), values)?,
    ))
}
