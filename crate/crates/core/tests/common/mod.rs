#![allow(dead_code)]

use ensemble_ner::corpus::{LabelSet, TagSequence};
use ensemble_ner::crf::{CrfParams, ScoreLattice};
use ensemble_ner::model::{build_examples, Example};
use ensemble_ner::synth::{generate, SynthConfig};
use rand::Rng;

/// Owned parts of a random lattice with every score in `[lo, hi]`.
#[derive(Debug, Clone)]
pub struct RandomLattice {
    pub n: usize,
    pub l: usize,
    pub emissions: Vec<f64>,
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl RandomLattice {
    pub fn sample(rng: &mut impl Rng, max_n: usize, max_l: usize, lo: f64, hi: f64) -> Self {
        let n = rng.random_range(1..=max_n);
        let l = rng.random_range(1..=max_l);
        let mut draw = |k: usize| (0..k).map(|_| rng.random_range(lo..=hi)).collect::<Vec<f64>>();
        Self {
            n,
            l,
            emissions: draw(n * l),
            transitions: draw(l * l),
            start: draw(l),
            end: draw(l),
        }
    }

    pub fn lattice(&self) -> ScoreLattice<'_> {
        ScoreLattice::new(self.emissions.clone(), self.l, &self.transitions, &self.start, &self.end).unwrap()
    }

    /// Score written out from the definition, independent of the library.
    pub fn score(&self, path: &[usize]) -> f64 {
        let mut s = self.start[path[0]] + self.end[path[self.n - 1]];
        for (i, &y) in path.iter().enumerate() {
            s += self.emissions[i * self.l + y];
            if i > 0 {
                s += self.transitions[path[i - 1] * self.l + y];
            }
        }
        s
    }

    /// Every path in lexicographic order with its score.
    pub fn enumerate(&self) -> Vec<(Vec<usize>, f64)> {
        all_paths(self.n, self.l)
            .into_iter()
            .map(|p| {
                let s = self.score(&p);
                (p, s)
            })
            .collect()
    }
}

pub fn all_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
    let total = l.pow(n as u32);
    (0..total)
        .map(|mut code| {
            let mut p = vec![0; n];
            for slot in p.iter_mut().rev() {
                *slot = code % l;
                code /= l;
            }
            p
        })
        .collect()
}

/// `log Σ exp` by brute force, shifted by the max.
pub fn brute_log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn random_params(rng: &mut impl Rng, l: usize, d: usize) -> CrfParams {
    let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect::<Vec<f64>>();
    CrfParams::from_parts(l, d, draw(l * d), draw(l), draw(l * l), draw(l), draw(l)).unwrap()
}

pub fn random_path(rng: &mut impl Rng, n: usize, l: usize) -> TagSequence {
    TagSequence((0..n).map(|_| rng.random_range(0..l)).collect())
}

pub fn synth_examples(cfg: &SynthConfig, labels: &LabelSet, n_train: usize) -> (Vec<Example>, Vec<Example>) {
    let corpus = generate(cfg, labels).unwrap();
    let mut all = build_examples(corpus.sentences, &corpus.store, labels).unwrap();
    let dev = all.split_off(n_train);
    (all, dev)
}

/// Small corpus of short sentences for tests that only need a few steps.
pub fn small_config(n: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        min_len: 3,
        max_len: 10,
        ..SynthConfig::new(n, 8, 0.05, seed)
    }
}

/// Central-difference tolerance used throughout: relative 1e-4 with an
/// absolute floor of 1e-6.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-6 || diff <= 1e-4 * analytic.abs().max(numeric.abs())
}
