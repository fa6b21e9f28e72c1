//! Training loop: shuffled epochs, gradient accumulation, per-epoch dev
//! scoring, checkpoint rotation, and best-on-dev selection among the
//! retained checkpoints.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::PoolingMode;
use crate::checkpoint::{checkpoint_file_name, list_checkpoints, Checkpoint, RngState};
use crate::corpus::{BioMode, LabelSet};
use crate::error::{Error, Result};
use crate::eval::entity_f1;
use crate::model::{Example, Gradients, Tagger};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Sentences-per-step batches accumulated before each optimizer update.
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub checkpoint_keep: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub batch_size: usize,
    pub pooling: PoolingMode,
    pub constrained: bool,
    /// Project each encoder to this dim before averaging.
    pub projection_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            accumulation_steps: 4,
            epochs: 50,
            checkpoint_keep: 10,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            batch_size: 1,
            pooling: PoolingMode::Mean,
            constrained: false,
            projection_dim: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", self.learning_rate)));
        }
        let counts = [
            ("accumulation_steps", self.accumulation_steps),
            ("epochs", self.epochs),
            ("checkpoint_keep", self.checkpoint_keep),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be ≥ 1")));
            }
        }
        if self.projection_dim == Some(0) {
            return Err(Error::Config("projection_dim must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn from_str_auto(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let in_file = |e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        };
        let cfg = Self::from_str_auto(&text).map_err(in_file)?;
        cfg.validate().map_err(in_file)?;
        Ok(cfg)
    }

    /// SHA-256 over the settings that shape the optimization trajectory
    /// (everything except `epochs` and `checkpoint_keep`).
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.checkpoint_keep = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam {
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, tagger: &Tagger) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => {
                let zeros: Vec<Vec<f64>> = tagger.blocks().iter().map(|(_, b)| vec![0.0; b.len()]).collect();
                OptimizerState::Adam {
                    step: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    pub fn apply(&mut self, lr: f64, tagger: &mut Tagger, grads: &Gradients) {
        let params = tagger.blocks_mut();
        let grads = grads.blocks();
        match self {
            OptimizerState::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (x, d) in p.iter_mut().zip(g) {
                        *x -= lr * d;
                    }
                }
            }
            OptimizerState::Adam { step, m, v } => {
                *step += 1;
                let t = *step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), mb), vb) in params.into_iter().zip(grads).zip(m).zip(v) {
                    for (((x, &d), mi), vi) in p.iter_mut().zip(g).zip(mb.iter_mut()).zip(vb.iter_mut()) {
                        *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * d;
                        *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * d * d;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_precision: f64,
    pub dev_recall: f64,
    pub dev_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// One entry per epoch run in this invocation.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    /// Epochs whose checkpoints are still retained, oldest first.
    pub retained_epochs: Vec<usize>,
    pub wall_time_secs: f64,
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        word_pos: rng.get_word_pos(),
    }
}

fn rng_from_state(state: &RngState) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_word_pos(state.word_pos);
    rng
}

/// Micro entity scores of `tagger` on `dev`, decoded spans repaired to valid BIO.
pub fn evaluate(tagger: &Tagger, dev: &[Example]) -> Result<crate::eval::Metrics> {
    let gold: Vec<_> = dev.iter().map(|ex| ex.sentence.spans.clone()).collect();
    let pred = dev
        .iter()
        .map(|ex| tagger.predict_spans(ex, BioMode::Repair))
        .collect::<Result<Vec<_>>>()?;
    entity_f1(&gold, &pred)
}

pub struct Trainer {
    cfg: TrainConfig,
    tagger: Tagger,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    /// Last completed epoch.
    epoch: usize,
    retained: VecDeque<Checkpoint>,
    checkpoint_dir: Option<PathBuf>,
}

impl Trainer {
    /// Initializes parameters from `cfg.seed`; the same RNG stream then
    /// drives shuffling.
    pub fn new(labels: LabelSet, models: Vec<String>, input_dims: Vec<usize>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tagger = Tagger::init(labels, models, input_dims, cfg.projection_dim, cfg.constrained, &mut rng)?;
        let optimizer = OptimizerState::new(cfg.optimizer, &tagger);
        Ok(Self {
            cfg,
            tagger,
            optimizer,
            rng,
            epoch: 0,
            retained: VecDeque::new(),
            checkpoint_dir: None,
        })
    }

    /// Continues from `ckpt`. `cfg` may change `epochs` and
    /// `checkpoint_keep`; anything else that shapes training must match.
    pub fn resume(ckpt: Checkpoint, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.trajectory_hash() != ckpt.config.trajectory_hash() {
            return Err(Error::Config(
                "resume config differs from the checkpoint's in more than epochs/checkpoint_keep".into(),
            ));
        }
        let mut tagger = ckpt.tagger.clone();
        tagger.constrained = cfg.constrained;
        let mut retained = VecDeque::new();
        let epoch = ckpt.epoch;
        let rng = rng_from_state(&ckpt.rng);
        let optimizer = ckpt.optimizer.clone();
        retained.push_back(ckpt);
        Ok(Self {
            cfg,
            tagger,
            optimizer,
            rng,
            epoch,
            retained,
            checkpoint_dir: None,
        })
    }

    /// Persists checkpoints under `dir`. Rotating checkpoints already there
    /// from earlier epochs of the same run are adopted; later ones are removed.
    pub fn with_checkpoint_dir(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let resumed = self.retained.pop_back();
        let mut adopted = VecDeque::new();
        for (epoch, path) in list_checkpoints(dir)? {
            if epoch > self.epoch || resumed.as_ref().is_some_and(|c| c.epoch == epoch) {
                if epoch > self.epoch {
                    fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                }
                continue;
            }
            adopted.push_back(Checkpoint::load(&path)?);
        }
        if let Some(c) = resumed {
            let path = dir.join(checkpoint_file_name(c.epoch));
            if !path.exists() {
                c.save(&path)?;
            }
            adopted.push_back(c);
        }
        adopted.make_contiguous().sort_by_key(|c| c.epoch);
        self.retained = adopted;
        self.checkpoint_dir = Some(dir.to_path_buf());
        self.trim_retained()?;
        Ok(self)
    }

    pub fn tagger(&self) -> &Tagger {
        &self.tagger
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn retained(&self) -> impl Iterator<Item = &Checkpoint> {
        self.retained.iter()
    }

    /// Retained checkpoint with the highest dev F1, earliest epoch on ties.
    pub fn best(&self) -> Option<&Checkpoint> {
        self.retained
            .iter()
            .fold(None, |best: Option<&Checkpoint>, c| match best {
                Some(b) if b.dev_f1 >= c.dev_f1 => Some(b),
                _ => Some(c),
            })
    }

    /// One optimizer update on the mean gradient of `window`, summed in the
    /// given order. Returns the summed loss.
    pub fn apply_window(&mut self, window: &[&Example]) -> Result<f64> {
        if window.is_empty() {
            return Ok(0.0);
        }
        let mut grads = self.tagger.zero_gradients();
        let mut total = 0.0;
        for ex in window {
            let loss = self.tagger.accumulate(ex, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch + 1,
                    id: ex.id().to_string(),
                });
            }
            total += loss;
        }
        grads.scale(1.0 / window.len() as f64);
        self.optimizer.apply(self.cfg.learning_rate, &mut self.tagger, &grads);
        Ok(total)
    }

    /// Runs one epoch, scores `dev`, and records a checkpoint.
    pub fn run_epoch(&mut self, train: &[Example], dev: &[Example]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let window = self.cfg.batch_size * self.cfg.accumulation_steps;
        let mut total = 0.0;
        // a short final window is flushed so every epoch ends on an update
        for chunk in order.chunks(window) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.apply_window(&batch)?;
        }
        self.epoch += 1;
        let metrics = evaluate(&self.tagger, dev)?;
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: total / train.len() as f64,
            dev_precision: metrics.precision,
            dev_recall: metrics.recall,
            dev_f1: metrics.f1,
        };
        self.record_checkpoint(&record)?;
        Ok(record)
    }

    fn record_checkpoint(&mut self, record: &EpochRecord) -> Result<()> {
        let ckpt = Checkpoint {
            epoch: record.epoch,
            dev_f1: record.dev_f1,
            train_loss: record.train_loss,
            config: self.cfg.clone(),
            tagger: self.tagger.clone(),
            optimizer: self.optimizer.clone(),
            rng: rng_state(&self.rng),
        };
        // drop the oldest first so the directory never holds more than `keep`
        while self.retained.len() >= self.cfg.checkpoint_keep {
            self.drop_oldest()?;
        }
        if let Some(dir) = &self.checkpoint_dir {
            ckpt.save(&dir.join(checkpoint_file_name(ckpt.epoch)))?;
        }
        self.retained.push_back(ckpt);
        Ok(())
    }

    fn drop_oldest(&mut self) -> Result<()> {
        if let Some(old) = self.retained.pop_front() {
            if let Some(dir) = &self.checkpoint_dir {
                let path = dir.join(checkpoint_file_name(old.epoch));
                match fs::remove_file(&path) {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                    Err(e) => return Err(Error::io(&path, e)),
                }
            }
        }
        Ok(())
    }

    fn trim_retained(&mut self) -> Result<()> {
        while self.retained.len() > self.cfg.checkpoint_keep {
            self.drop_oldest()?;
        }
        Ok(())
    }

    /// Trains until `cfg.epochs` epochs are complete, calling `on_epoch`
    /// after each.
    pub fn run_with(
        &mut self,
        train: &[Example],
        dev: &[Example],
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainReport> {
        let started = Instant::now();
        let mut epochs = Vec::new();
        while self.epoch < self.cfg.epochs {
            let record = self.run_epoch(train, dev)?;
            on_epoch(&record);
            epochs.push(record);
        }
        let (best_epoch, best_dev_f1) = self.best().map_or((0, 0.0), |c| (c.epoch, c.dev_f1));
        Ok(TrainReport {
            epochs,
            best_epoch,
            best_dev_f1,
            retained_epochs: self.retained.iter().map(|c| c.epoch).collect(),
            wall_time_secs: started.elapsed().as_secs_f64(),
        })
    }

    pub fn run(&mut self, train: &[Example], dev: &[Example]) -> Result<TrainReport> {
        self.run_with(train, dev, |_| {})
    }
}

/// Trains a fresh tagger and returns the best retained checkpoint's tagger.
///
/// Ensemble members and their dims come from the first training example.
pub fn fit(
    train: &[Example],
    dev: &[Example],
    labels: &LabelSet,
    models: &[String],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Tagger, TrainReport)> {
    let first = train.first().ok_or_else(|| Error::Config("empty training set".into()))?;
    let dims = first.inputs.iter().map(|m| m.dim()).collect();
    let mut trainer = Trainer::new(labels.clone(), models.to_vec(), dims, cfg.clone())?;
    if let Some(dir) = checkpoint_dir {
        trainer = trainer.with_checkpoint_dir(dir)?;
    }
    let report = trainer.run(train, dev)?;
    let best = trainer.best().expect("at least one epoch ran").tagger.clone();
    Ok((best, report))
}
