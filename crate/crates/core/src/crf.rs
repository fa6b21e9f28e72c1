//! Linear-chain CRF over word vectors.
//!
//! A path `y` through an `N`-word sentence scores
//!
//! ```text
//! start[y_0] + Σ_i e[i][y_i] + Σ_{i>0} b[y_{i-1}, y_i] + end[y_{N-1}]
//! e[i][y] = W_y · v_i + c[y]
//! ```
//!
//! and `p(y | x) = exp(score(y) - logZ)`. All dynamic programming runs in
//! `f64` log space.

#![allow(clippy::needless_range_loop)]

use rand::Rng;

use crate::corpus::{LabelSet, Tag, TagId, TagSequence};
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Emission, transition, and boundary parameters.
///
/// `weights` is `num_tags × dim` row-major; `transitions[prev * num_tags + next]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfParams {
    num_tags: usize,
    dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

impl CrfParams {
    pub fn zeros(num_tags: usize, dim: usize) -> Self {
        Self {
            num_tags,
            dim,
            weights: vec![0.0; num_tags * dim],
            bias: vec![0.0; num_tags],
            transitions: vec![0.0; num_tags * num_tags],
            start: vec![0.0; num_tags],
            end: vec![0.0; num_tags],
        }
    }

    /// `W ~ U(-√(6/(d+L)), √(6/(d+L)))`, everything else zero.
    pub fn init<R: Rng + ?Sized>(num_tags: usize, dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(num_tags, dim);
        let bound = (6.0 / (dim + num_tags) as f64).sqrt();
        for w in &mut p.weights {
            *w = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn from_parts(
        num_tags: usize,
        dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        transitions: Vec<f64>,
        start: Vec<f64>,
        end: Vec<f64>,
    ) -> Result<Self> {
        let p = Self {
            num_tags,
            dim,
            weights,
            bias,
            transitions,
            start,
            end,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight_row(&self, tag: TagId) -> &[f64] {
        &self.weights[tag * self.dim..(tag + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.num_tags;
        let shapes = [
            ("weights", self.weights.len(), l * self.dim),
            ("bias", self.bias.len(), l),
            ("transitions", self.transitions.len(), l * l),
            ("start", self.start.len(), l),
            ("end", self.end.len(), l),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::ShapeMismatch(format!("{name}: expected {want} values, got {got}")));
            }
        }
        if self.blocks().iter().any(|(_, b)| b.iter().any(|v| !v.is_finite())) {
            return Err(Error::Checkpoint("non-finite CRF parameter".into()));
        }
        Ok(())
    }

    /// Parameter blocks in serialization order.
    pub fn blocks(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("weights", &self.weights),
            ("bias", &self.bias),
            ("transitions", &self.transitions),
            ("start", &self.start),
            ("end", &self.end),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 5] {
        [
            ("weights", &mut self.weights),
            ("bias", &mut self.bias),
            ("transitions", &mut self.transitions),
            ("start", &mut self.start),
            ("end", &mut self.end),
        ]
    }
}

/// Which transitions are admissible under BIO: `I-y` may only follow
/// `B-y` or `I-y`, and may not start a sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionMask {
    num_tags: usize,
    allowed: Vec<bool>,
    start_allowed: Vec<bool>,
}

impl TransitionMask {
    pub fn bio(labels: &LabelSet) -> Self {
        let l = labels.num_tags();
        let tag = |id| labels.decode_tag(id).expect("id below num_tags");
        let mut allowed = vec![true; l * l];
        let mut start_allowed = vec![true; l];
        for next in 0..l {
            if let Tag::Inside(k) = tag(next) {
                start_allowed[next] = false;
                for prev in 0..l {
                    allowed[prev * l + next] = matches!(tag(prev), Tag::Begin(p) | Tag::Inside(p) if p == k);
                }
            }
        }
        Self {
            num_tags: l,
            allowed,
            start_allowed,
        }
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn allows(&self, prev: TagId, next: TagId) -> bool {
        self.allowed[prev * self.num_tags + next]
    }

    pub fn allows_start(&self, tag: TagId) -> bool {
        self.start_allowed[tag]
    }
}

/// Emission scores for one sentence plus borrowed transition parameters.
#[derive(Debug, Clone)]
pub struct ScoreLattice<'a> {
    n: usize,
    num_tags: usize,
    emissions: Vec<f64>,
    transitions: &'a [f64],
    start: &'a [f64],
    end: &'a [f64],
    mask: Option<&'a TransitionMask>,
}

impl<'a> ScoreLattice<'a> {
    /// `emissions` is `n × num_tags` row-major.
    pub fn new(
        emissions: Vec<f64>,
        num_tags: usize,
        transitions: &'a [f64],
        start: &'a [f64],
        end: &'a [f64],
    ) -> Result<Self> {
        if num_tags == 0 || emissions.is_empty() || !emissions.len().is_multiple_of(num_tags) {
            return Err(Error::ShapeMismatch(format!(
                "{} emission scores for {num_tags} tags",
                emissions.len()
            )));
        }
        if transitions.len() != num_tags * num_tags || start.len() != num_tags || end.len() != num_tags {
            return Err(Error::ShapeMismatch("transition parameters do not match tag count".into()));
        }
        if emissions.iter().any(|e| !e.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite emission score".into()));
        }
        Ok(Self {
            n: emissions.len() / num_tags,
            num_tags,
            emissions,
            transitions,
            start,
            end,
            mask: None,
        })
    }

    /// Restricts all paths to admissible BIO transitions.
    pub fn with_mask(mut self, mask: &'a TransitionMask) -> Self {
        assert_eq!(mask.num_tags(), self.num_tags, "mask built for a different tag set");
        self.mask = Some(mask);
        self
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn emission(&self, i: usize, y: TagId) -> f64 {
        self.emissions[i * self.num_tags + y]
    }

    pub fn emissions(&self) -> &[f64] {
        &self.emissions
    }

    pub fn emissions_mut(&mut self) -> &mut [f64] {
        &mut self.emissions
    }

    pub fn transition(&self, prev: TagId, next: TagId) -> f64 {
        match self.mask {
            Some(m) if !m.allows(prev, next) => f64::NEG_INFINITY,
            _ => self.transitions[prev * self.num_tags + next],
        }
    }

    pub fn start(&self, y: TagId) -> f64 {
        match self.mask {
            Some(m) if !m.allows_start(y) => f64::NEG_INFINITY,
            _ => self.start[y],
        }
    }

    pub fn end(&self, y: TagId) -> f64 {
        self.end[y]
    }

    /// Unnormalized log-score of `path`, boundary terms included.
    pub fn path_score(&self, path: &[TagId]) -> f64 {
        assert_eq!(path.len(), self.n);
        let mut s = self.start(path[0]) + self.end(path[self.n - 1]);
        for (i, &y) in path.iter().enumerate() {
            s += self.emission(i, y);
            if i > 0 {
                s += self.transition(path[i - 1], y);
            }
        }
        s
    }

    fn check_gold(&self, gold: &TagSequence) -> Result<()> {
        if gold.len() != self.n {
            return Err(Error::LengthMismatch {
                expected: self.n,
                actual: gold.len(),
            });
        }
        if let Some(&bad) = gold.as_slice().iter().find(|&&y| y >= self.num_tags) {
            return Err(Error::UnknownTag(bad));
        }
        Ok(())
    }
}

/// Computes `e[i][y] = W_y · v_i + c[y]` for each row of `v`.
pub fn emission_scores<'a>(v: &EmbeddingMatrix, params: &'a CrfParams) -> Result<ScoreLattice<'a>> {
    let dense: Vec<f64> = v.values().iter().map(|&x| f64::from(x)).collect();
    emission_scores_dense(&dense, v.dim(), params)
}

/// Same as [`emission_scores`] for an `f64` row-major feature matrix.
pub fn emission_scores_dense<'a>(features: &[f64], dim: usize, params: &'a CrfParams) -> Result<ScoreLattice<'a>> {
    if dim != params.dim {
        return Err(Error::DimensionMismatch {
            expected: params.dim,
            actual: dim,
        });
    }
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch(format!("{} features for dim {dim}", features.len())));
    }
    let l = params.num_tags;
    let mut emissions = Vec::with_capacity(features.len() / dim * l);
    for v in features.chunks_exact(dim) {
        for y in 0..l {
            let w = params.weight_row(y);
            emissions.push(dot(w, v) + params.bias[y]);
        }
    }
    ScoreLattice::new(emissions, l, &params.transitions, &params.start, &params.end)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log Σ exp(x)`, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Forward log-scores: `alpha[i][y]` sums all prefixes ending in `y` at `i`.
fn forward(lat: &ScoreLattice) -> Vec<f64> {
    let (n, l) = (lat.n, lat.num_tags);
    let mut alpha = vec![0.0; n * l];
    for y in 0..l {
        alpha[y] = lat.start(y) + lat.emission(0, y);
    }
    for i in 1..n {
        let (prev, cur) = alpha.split_at_mut(i * l);
        let prev = &prev[(i - 1) * l..];
        for y in 0..l {
            cur[y] = lat.emission(i, y) + log_sum_exp((0..l).map(|p| prev[p] + lat.transition(p, y)));
        }
    }
    alpha
}

/// Backward log-scores: `beta[i][y]` sums all suffixes after `y` at `i`, end term included.
fn backward(lat: &ScoreLattice) -> Vec<f64> {
    let (n, l) = (lat.n, lat.num_tags);
    let mut beta = vec![0.0; n * l];
    for y in 0..l {
        beta[(n - 1) * l + y] = lat.end(y);
    }
    for i in (0..n - 1).rev() {
        let (cur, next) = beta.split_at_mut((i + 1) * l);
        let cur = &mut cur[i * l..];
        for y in 0..l {
            cur[y] = log_sum_exp((0..l).map(|z| lat.transition(y, z) + lat.emission(i + 1, z) + next[z]));
        }
    }
    beta
}

fn log_partition_from_alpha(lat: &ScoreLattice, alpha: &[f64]) -> f64 {
    let l = lat.num_tags;
    let last = &alpha[(lat.n - 1) * l..];
    log_sum_exp((0..l).map(|y| last[y] + lat.end(y)))
}

/// Log of the sum of `exp(score)` over all `L^N` tag paths.
pub fn log_partition(lat: &ScoreLattice) -> f64 {
    log_partition_from_alpha(lat, &forward(lat))
}

/// Posterior marginals from forward–backward.
#[derive(Debug, Clone)]
pub struct Marginals {
    pub log_z: f64,
    /// `unary[i * L + y] = P(y_i = y | x)`
    pub unary: Vec<f64>,
    /// `pairwise[(i - 1) * L * L + prev * L + next] = P(y_{i-1} = prev, y_i = next | x)` for `i ≥ 1`
    pub pairwise: Vec<f64>,
}

pub fn marginals(lat: &ScoreLattice) -> Marginals {
    let (n, l) = (lat.n, lat.num_tags);
    let alpha = forward(lat);
    let beta = backward(lat);
    let log_z = log_partition_from_alpha(lat, &alpha);
    let unary = alpha.iter().zip(&beta).map(|(a, b)| (a + b - log_z).exp()).collect();
    let mut pairwise = vec![0.0; n.saturating_sub(1) * l * l];
    for i in 1..n {
        let block = &mut pairwise[(i - 1) * l * l..i * l * l];
        for prev in 0..l {
            let a = alpha[(i - 1) * l + prev];
            for next in 0..l {
                let s = a + lat.transition(prev, next) + lat.emission(i, next) + beta[i * l + next];
                block[prev * l + next] = (s - log_z).exp();
            }
        }
    }
    Marginals { log_z, unary, pairwise }
}

/// `-log p(gold | x)`.
pub fn nll_loss(lat: &ScoreLattice, gold: &TagSequence) -> Result<f64> {
    lat.check_gold(gold)?;
    // clamp rounding noise; the true value is never negative
    Ok((log_partition(lat) - lat.path_score(gold.as_slice())).max(0.0))
}

/// Gradients of the NLL with respect to the lattice scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeGradients {
    /// `n × L`
    pub emissions: Vec<f64>,
    /// `L × L`
    pub transitions: Vec<f64>,
    pub start: Vec<f64>,
    pub end: Vec<f64>,
}

/// Loss and its gradient: expected feature counts minus gold counts.
pub fn loss_gradients(lat: &ScoreLattice, gold: &TagSequence) -> Result<(f64, LatticeGradients)> {
    lat.check_gold(gold)?;
    let (n, l) = (lat.n, lat.num_tags);
    let m = marginals(lat);
    let gold = gold.as_slice();
    let loss = (m.log_z - lat.path_score(gold)).max(0.0);

    let mut emissions = m.unary.clone();
    for (i, &y) in gold.iter().enumerate() {
        emissions[i * l + y] -= 1.0;
    }
    let mut transitions = vec![0.0; l * l];
    for block in m.pairwise.chunks_exact(l * l) {
        for (t, p) in transitions.iter_mut().zip(block) {
            *t += p;
        }
    }
    for pair in gold.windows(2) {
        transitions[pair[0] * l + pair[1]] -= 1.0;
    }
    let mut start = m.unary[..l].to_vec();
    start[gold[0]] -= 1.0;
    let mut end = m.unary[(n - 1) * l..].to_vec();
    end[gold[n - 1]] -= 1.0;

    Ok((
        loss,
        LatticeGradients {
            emissions,
            transitions,
            start,
            end,
        },
    ))
}

/// Adds the chain-rule contribution of `grads` to `out` (same shape as
/// `params`). `features` are the `n × dim` vectors the lattice was built from.
pub fn accumulate_param_gradients(features: &[f64], grads: &LatticeGradients, out: &mut CrfParams) {
    let (l, dim) = (out.num_tags, out.dim);
    for (v, g) in features.chunks_exact(dim).zip(grads.emissions.chunks_exact(l)) {
        for y in 0..l {
            let gy = g[y];
            out.bias[y] += gy;
            for (w, &x) in out.weights[y * dim..(y + 1) * dim].iter_mut().zip(v) {
                *w += gy * x;
            }
        }
    }
    for (o, g) in out.transitions.iter_mut().zip(&grads.transitions) {
        *o += g;
    }
    for (o, g) in out.start.iter_mut().zip(&grads.start) {
        *o += g;
    }
    for (o, g) in out.end.iter_mut().zip(&grads.end) {
        *o += g;
    }
}

/// `∂loss/∂v_i = Σ_y g[i][y] W_y`, row-major `n × dim`.
pub fn feature_gradients(grads: &LatticeGradients, params: &CrfParams) -> Vec<f64> {
    let (l, dim) = (params.num_tags, params.dim);
    let mut out = vec![0.0; grads.emissions.len() / l * dim];
    for (row, g) in out.chunks_exact_mut(dim).zip(grads.emissions.chunks_exact(l)) {
        for (y, &gy) in g.iter().enumerate() {
            for (o, &w) in row.iter_mut().zip(params.weight_row(y)) {
                *o += gy * w;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub path: TagSequence,
    /// Unnormalized log-score, boundary terms included.
    pub score: f64,
    /// `score - logZ`
    pub log_prob: f64,
}

/// Highest-scoring path. Ties go to the lowest tag id at every step.
pub fn viterbi(lat: &ScoreLattice) -> DecodeResult {
    let (n, l) = (lat.n, lat.num_tags);
    let mut delta = vec![f64::NEG_INFINITY; n * l];
    let mut back = vec![0usize; n * l];
    for y in 0..l {
        delta[y] = lat.start(y) + lat.emission(0, y);
    }
    for i in 1..n {
        for y in 0..l {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for p in 0..l {
                let s = delta[(i - 1) * l + p] + lat.transition(p, y);
                if s > best {
                    best = s;
                    arg = p;
                }
            }
            delta[i * l + y] = best + lat.emission(i, y);
            back[i * l + y] = arg;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for y in 0..l {
        let s = delta[(n - 1) * l + y] + lat.end(y);
        if s > best {
            best = s;
            last = y;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for i in (1..n).rev() {
        path[i - 1] = back[i * l + path[i]];
    }
    let log_z = log_partition(lat);
    DecodeResult {
        path: TagSequence(path),
        score: best,
        log_prob: (best - log_z).min(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lattice<'a>(em: Vec<f64>, l: usize, zeros: &'a (Vec<f64>, Vec<f64>)) -> ScoreLattice<'a> {
        ScoreLattice::new(em, l, &zeros.0, &zeros.1, &zeros.1).unwrap()
    }

    fn zeros(l: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; l * l], vec![0.0; l])
    }

    #[test]
    fn identity_weights_pick_basis_vector() {
        let d = 4;
        let mut p = CrfParams::zeros(d, d);
        for y in 0..d {
            p.weights[y * d + y] = 1.0;
        }
        let v = EmbeddingMatrix::from_rows(&[vec![0.0, 0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let lat = emission_scores(&v, &p).unwrap();
        for y in 0..d {
            assert_eq!(lat.emission(0, y), if y == 2 { 1.0 } else { 0.0 });
            assert_eq!(lat.emission(1, y), if y == 0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut p = CrfParams::zeros(3, 2);
        p.bias = vec![0.5; 3];
        let v = EmbeddingMatrix::from_rows(&[vec![3.0, -1.0], vec![2.0, 7.0]]).unwrap();
        let lat = emission_scores(&v, &p).unwrap();
        assert!(lat.emissions().iter().all(|&e| e == 0.5));
    }

    #[test]
    fn emission_dim_mismatch() {
        let p = CrfParams::zeros(3, 2);
        let v = EmbeddingMatrix::from_rows(&[vec![3.0, -1.0, 0.0]]).unwrap();
        assert!(matches!(
            emission_scores(&v, &p),
            Err(Error::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn uniform_log_partition() {
        let z = zeros(3);
        let lat = lattice(vec![0.0; 3], 3, &z);
        assert!((log_partition(&lat) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn single_tag_has_one_path() {
        let t = (vec![0.7], vec![0.2]);
        let end = vec![-0.4];
        let lat = ScoreLattice::new(vec![1.0, -2.0, 0.5], 1, &t.0, &t.1, &end).unwrap();
        let expected = 0.2 + 1.0 - 2.0 + 0.5 + 0.7 * 2.0 - 0.4;
        assert!((log_partition(&lat) - expected).abs() < 1e-12);
        let gold = TagSequence(vec![0, 0, 0]);
        assert_eq!(nll_loss(&lat, &gold).unwrap(), 0.0);
        let d = viterbi(&lat);
        assert_eq!(d.path, gold);
        assert!((d.score - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_nll_is_n_log_l() {
        let z = zeros(2);
        let lat = lattice(vec![0.0; 4], 2, &z);
        for gold in [[0, 0], [0, 1], [1, 0], [1, 1]] {
            let loss = nll_loss(&lat, &TagSequence(gold.to_vec())).unwrap();
            assert!((loss - 2.0 * 2f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn gold_length_mismatch() {
        let z = zeros(2);
        let lat = lattice(vec![0.0; 4], 2, &z);
        assert!(matches!(
            nll_loss(&lat, &TagSequence(vec![0])),
            Err(Error::LengthMismatch { expected: 2, actual: 1 })
        ));
        assert!(loss_gradients(&lat, &TagSequence(vec![0, 5])).is_err());
    }

    #[test]
    fn saturated_gold_has_tiny_gradient() {
        let z = zeros(3);
        let mut em = vec![-30.0; 12];
        let gold = [2, 0, 1, 1];
        for (i, &y) in gold.iter().enumerate() {
            em[i * 3 + y] = 30.0;
        }
        let lat = lattice(em, 3, &z);
        let (loss, g) = loss_gradients(&lat, &TagSequence(gold.to_vec())).unwrap();
        assert!(loss < 1e-12);
        let norm: f64 = [&g.emissions, &g.transitions, &g.start, &g.end]
            .iter()
            .flat_map(|v| v.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-3, "{norm}");
    }

    #[test]
    fn decoupled_viterbi_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = zeros(4);
        let em: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lat = lattice(em.clone(), 4, &z);
        let path = viterbi(&lat).path;
        for (i, row) in em.chunks(4).enumerate() {
            let argmax = (0..4).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(path.as_slice()[i], argmax);
        }
    }

    #[test]
    fn viterbi_ties_pick_lowest_tag() {
        let z = zeros(3);
        let lat = lattice(vec![0.0; 9], 3, &z);
        let d = viterbi(&lat);
        assert_eq!(d.path.as_slice(), &[0, 0, 0]);
        assert!((d.log_prob + 3.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_scores_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = 4;
        let t: Vec<f64> = (0..l * l).map(|_| rng.random_range(-1e4..1e4)).collect();
        let s: Vec<f64> = (0..l).map(|_| rng.random_range(-1e4..1e4)).collect();
        let em: Vec<f64> = (0..6 * l).map(|_| rng.random_range(-1e4..1e4)).collect();
        let lat = ScoreLattice::new(em, l, &t, &s, &s).unwrap();
        assert!(log_partition(&lat).is_finite());
        let m = marginals(&lat);
        assert!(m.unary.iter().chain(&m.pairwise).all(|p| p.is_finite()));
        let d = viterbi(&lat);
        assert!(d.score.is_finite() && d.log_prob <= 0.0);
        let (loss, g) = loss_gradients(&lat, &d.path).unwrap();
        assert!(loss.is_finite() && g.emissions.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn bio_mask_forbids_dangling_inside() {
        let labels = LabelSet::new(["A", "B"]).unwrap();
        let mask = TransitionMask::bio(&labels);
        // tags: O, B-A, I-A, B-B, I-B
        assert!(!mask.allows_start(2));
        assert!(mask.allows_start(1));
        assert!(mask.allows(1, 2));
        assert!(mask.allows(2, 2));
        assert!(!mask.allows(0, 2));
        assert!(!mask.allows(3, 2));
        assert!(mask.allows(2, 0));

        // emissions favour a dangling I-A at position 1
        let l = 5;
        let z = zeros(l);
        let mut em = vec![0.0; 2 * l];
        em[0] = 1.0;
        em[l + 2] = 5.0;
        let lat = lattice(em, l, &z);
        assert_eq!(viterbi(&lat).path.as_slice(), &[0, 2]);
        let constrained = lat.clone().with_mask(&mask);
        let path = viterbi(&constrained).path;
        assert!(path.is_valid_bio(&labels), "{path:?}");
        assert_eq!(path.as_slice(), &[1, 2]);
        let m = marginals(&constrained);
        assert_eq!(m.unary[2], 0.0);
        assert!((m.unary[..l].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn init_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = CrfParams::init(13, 16, &mut rng);
        let bound = (6.0f64 / 29.0).sqrt();
        assert!(p.weights.iter().all(|w| w.abs() < bound));
        assert!(p.weights.iter().any(|w| *w != 0.0));
        assert!(p.bias.iter().chain(&p.transitions).chain(&p.start).chain(&p.end).all(|&x| x == 0.0));
        p.validate().unwrap();
    }
}
