//! The full tagger: per-model word vectors → ensemble vector → CRF.

use std::borrow::Cow;

use rand::Rng;

use crate::corpus::{bio_to_spans, spans_to_bio, BioMode, EntitySpan, LabelSet, Sentence, TagSequence};
use crate::crf::{
    accumulate_param_gradients, emission_scores_dense, feature_gradients, loss_gradients, viterbi, CrfParams,
    DecodeResult, TransitionMask,
};
use crate::embed::{ensemble_average, EmbeddingMatrix, EmbeddingStore};
use crate::error::{Error, Result};

/// Trainable linear map from one encoder's space to the shared space.
/// `weights` is `out_dim × in_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
}

impl Projection {
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect(),
        }
    }
}

/// A sentence with gold tags and its per-model word vectors.
#[derive(Debug, Clone)]
pub struct Example {
    pub sentence: Sentence,
    pub gold: TagSequence,
    pub inputs: Vec<EmbeddingMatrix>,
    /// Plain ensemble average as `f64`, present when all inputs share a dim.
    ensembled: Option<Vec<f64>>,
}

impl Example {
    pub fn new(sentence: Sentence, inputs: Vec<EmbeddingMatrix>, labels: &LabelSet) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::MissingEmbeddings(sentence.id.clone()));
        }
        for m in &inputs {
            if m.rows() != sentence.len() {
                return Err(Error::ShapeMismatch(format!(
                    "sentence `{}` has {} words but {} embedding rows{}",
                    sentence.id,
                    sentence.len(),
                    m.rows(),
                    m.source_model.as_deref().map(|s| format!(" ({s})")).unwrap_or_default()
                )));
            }
        }
        let gold = spans_to_bio(&sentence.spans, sentence.len(), labels)?;
        let ensembled = if inputs.iter().all(|m| m.dim() == inputs[0].dim()) {
            let avg = ensemble_average(&inputs)?;
            Some(avg.values().iter().map(|&x| f64::from(x)).collect())
        } else {
            None
        };
        Ok(Self {
            sentence,
            gold,
            inputs,
            ensembled,
        })
    }

    pub fn id(&self) -> &str {
        &self.sentence.id
    }

    pub fn len(&self) -> usize {
        self.sentence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentence.is_empty()
    }
}

/// Pairs every sentence with its embeddings from `store`.
pub fn build_examples(sentences: Vec<Sentence>, store: &EmbeddingStore, labels: &LabelSet) -> Result<Vec<Example>> {
    sentences
        .into_iter()
        .map(|s| {
            let mats = store
                .get(&s.id)
                .ok_or_else(|| Error::MissingEmbeddings(s.id.clone()))?
                .to_vec();
            Example::new(s, mats, labels)
        })
        .collect()
}

/// Gradient buffers shaped like a [`Tagger`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub crf: CrfParams,
    pub projections: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.crf.blocks().into_iter().map(|(_, b)| b).collect();
        out.extend(self.projections.iter().map(Vec::as_slice));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = self.crf.blocks_mut().into_iter().map(|(_, b)| b).collect();
        out.extend(self.projections.iter_mut());
        out
    }

    pub fn scale(&mut self, factor: f64) {
        for block in self.blocks_mut() {
            for g in block.iter_mut() {
                *g *= factor;
            }
        }
    }
}

/// Label set, ensemble members, CRF head, and optional projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Tagger {
    pub labels: LabelSet,
    /// Encoder ids in ensembling order.
    pub models: Vec<String>,
    /// Word-vector dim of each encoder, same order as `models`.
    pub input_dims: Vec<usize>,
    pub crf: CrfParams,
    /// Empty unless projection to a shared dim is enabled; then one per model.
    pub projections: Vec<Projection>,
    pub constrained: bool,
}

impl Tagger {
    /// Fresh parameters. With `projection_dim = None` all encoders must share a dim.
    pub fn init<R: Rng + ?Sized>(
        labels: LabelSet,
        models: Vec<String>,
        input_dims: Vec<usize>,
        projection_dim: Option<usize>,
        constrained: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if models.is_empty() || models.len() != input_dims.len() {
            return Err(Error::Config(format!(
                "{} model ids for {} input dims",
                models.len(),
                input_dims.len()
            )));
        }
        let dim = match projection_dim {
            Some(0) => return Err(Error::Config("projection dim must be positive".into())),
            Some(d) => d,
            None => {
                if let Some(&bad) = input_dims.iter().find(|&&d| d != input_dims[0]) {
                    return Err(Error::DimensionMismatch {
                        expected: input_dims[0],
                        actual: bad,
                    });
                }
                input_dims[0]
            }
        };
        let crf = CrfParams::init(labels.num_tags(), dim, rng);
        let projections = match projection_dim {
            Some(d) => input_dims.iter().map(|&i| Projection::init(i, d, rng)).collect(),
            None => Vec::new(),
        };
        Ok(Self {
            labels,
            models,
            input_dims,
            crf,
            projections,
            constrained,
        })
    }

    pub fn dim(&self) -> usize {
        self.crf.dim()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            crf: CrfParams::zeros(self.crf.num_tags(), self.crf.dim()),
            projections: self.projections.iter().map(|p| vec![0.0; p.weights.len()]).collect(),
        }
    }

    /// Named parameter blocks in serialization order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = self.crf.blocks().into_iter().map(|(n, b)| (n.to_string(), b)).collect();
        out.extend(self.projections.iter().enumerate().map(|(i, p)| (format!("projection.{i}"), p.weights.as_slice())));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = self.crf.blocks_mut().into_iter().map(|(_, b)| b).collect();
        out.extend(self.projections.iter_mut().map(|p| &mut p.weights));
        out
    }

    fn check_inputs(&self, inputs: &[EmbeddingMatrix]) -> Result<()> {
        if inputs.len() != self.models.len() {
            return Err(Error::ShapeMismatch(format!(
                "tagger expects {} encoders, got {}",
                self.models.len(),
                inputs.len()
            )));
        }
        for (m, &d) in inputs.iter().zip(&self.input_dims) {
            if m.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: m.dim(),
                });
            }
        }
        Ok(())
    }

    /// Ensemble word vectors as `n × dim` `f64`.
    pub fn features<'e>(&self, ex: &'e Example) -> Result<Cow<'e, [f64]>> {
        self.check_inputs(&ex.inputs)?;
        if self.projections.is_empty() {
            return ex
                .ensembled
                .as_deref()
                .map(Cow::Borrowed)
                .ok_or_else(|| Error::Config("encoders differ in dim; enable a projection".into()));
        }
        Ok(Cow::Owned(self.project(&ex.inputs)))
    }

    /// `(1/k) Σ_m P_m x_m` per word, summed in model order.
    fn project(&self, inputs: &[EmbeddingMatrix]) -> Vec<f64> {
        let n = inputs[0].rows();
        let d = self.dim();
        let k = inputs.len() as f64;
        let mut out = vec![0.0; n * d];
        for (x, p) in inputs.iter().zip(&self.projections) {
            for (i, row) in out.chunks_exact_mut(d).enumerate() {
                let xi = x.row(i);
                for (o, w) in row.iter_mut().zip(p.weights.chunks_exact(p.in_dim)) {
                    *o += w.iter().zip(xi).map(|(a, &b)| a * f64::from(b)).sum::<f64>();
                }
            }
        }
        for o in &mut out {
            *o /= k;
        }
        out
    }

    /// NLL of `ex`, adding its gradient into `grads`.
    ///
    /// Training always uses the unconstrained lattice; the mask only
    /// restricts decoding.
    pub fn accumulate(&self, ex: &Example, grads: &mut Gradients) -> Result<f64> {
        let features = self.features(ex)?;
        let lat = emission_scores_dense(&features, self.dim(), &self.crf)?;
        let (loss, lg) = loss_gradients(&lat, &ex.gold)?;
        accumulate_param_gradients(&features, &lg, &mut grads.crf);
        if !self.projections.is_empty() {
            let dv = feature_gradients(&lg, &self.crf);
            let k = ex.inputs.len() as f64;
            let d = self.dim();
            for ((x, p), gp) in ex.inputs.iter().zip(&self.projections).zip(&mut grads.projections) {
                for (i, dvi) in dv.chunks_exact(d).enumerate() {
                    let xi = x.row(i);
                    for (r, g) in dvi.iter().zip(gp.chunks_exact_mut(p.in_dim)) {
                        let scale = r / k;
                        for (gj, &xj) in g.iter_mut().zip(xi) {
                            *gj += scale * f64::from(xj);
                        }
                    }
                }
            }
        }
        Ok(loss)
    }

    pub fn loss(&self, ex: &Example) -> Result<f64> {
        let features = self.features(ex)?;
        let lat = emission_scores_dense(&features, self.dim(), &self.crf)?;
        crate::crf::nll_loss(&lat, &ex.gold)
    }

    pub fn decode(&self, ex: &Example) -> Result<DecodeResult> {
        let features = self.features(ex)?;
        let lat = emission_scores_dense(&features, self.dim(), &self.crf)?;
        Ok(if self.constrained {
            let mask = TransitionMask::bio(&self.labels);
            viterbi(&lat.with_mask(&mask))
        } else {
            viterbi(&lat)
        })
    }

    pub fn predict_spans(&self, ex: &Example, mode: BioMode) -> Result<Vec<EntitySpan>> {
        bio_to_spans(&self.decode(ex)?.path, &self.labels, mode)
    }
}
