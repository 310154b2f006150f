//! Fine-tuning loop: AdamW, warmup/decay schedule, seeded determinism.

mod checkpoint;
mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION, MAGIC};
pub use optim::{adamw_step, clip_global_norm, OptimizerState, ParamSlot, BETA1, BETA2, EPSILON};
pub use schedule::{lr_at_step, warmup_steps};

use crate::arraycore::{Scalar, Tape};
use crate::data::{Dataset, Example, Label};
use crate::encoder::{Dropout, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::metrics;
use crate::model::{decays, mix_seed, stream_rng, Model, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    SquaredError,
}

impl LossKind {
    pub fn for_dataset(data: &Dataset) -> LossKind {
        if data.is_regression() {
            LossKind::SquaredError
        } else {
            LossKind::CrossEntropy
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::SquaredError => "squared_error",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" => Ok(LossKind::CrossEntropy),
            "squared_error" => Ok(LossKind::SquaredError),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected cross_entropy or squared_error)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub head: HeadKind,
    pub encoder: EncoderConfig,
    pub loss: LossKind,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
}

impl TrainConfig {
    pub fn new(head: HeadKind, encoder: EncoderConfig, seed: u64) -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            epochs: 4,
            batch_size: 32,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            seed,
            head,
            encoder,
            loss: LossKind::CrossEntropy,
            clip_norm: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio must be in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config(
                "weight_decay and clip_norm must be non-negative".into(),
            ));
        }
        self.encoder.validate()?;
        self.head
            .validate(self.encoder.num_layers, self.encoder.d_model)
    }

    /// `key=value` pairs covering every field.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let e = &self.encoder;
        [
            ("learning_rate", self.learning_rate.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("seed", self.seed.to_string()),
            ("head", self.head.to_string()),
            ("loss", self.loss.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("num_layers", e.num_layers.to_string()),
            ("d_model", e.d_model.to_string()),
            ("num_heads", e.num_heads.to_string()),
            ("d_ff", e.d_ff.to_string()),
            ("vocab_size", e.vocab_size.to_string()),
            ("max_seq_len", e.max_seq_len.to_string()),
            ("dropout", e.dropout.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Sets one field from its `key=value` form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        let e = &mut self.encoder;
        match key.trim() {
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "warmup_ratio" => self.warmup_ratio = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "head" => self.head = value.trim().parse()?,
            "loss" => self.loss = value.trim().parse()?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "num_layers" => e.num_layers = num(key, value)?,
            "d_model" => e.d_model = num(key, value)?,
            "num_heads" => e.num_heads = num(key, value)?,
            "d_ff" => e.d_ff = num(key, value)?,
            "vocab_size" => e.vocab_size = num(key, value)?,
            "max_seq_len" => e.max_seq_len = num(key, value)?,
            "dropout" => e.dropout = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub head: String,
    pub seed: u64,
    /// Headline metric name: `accuracy` or `spearman`.
    pub metric: String,
    pub eval: BTreeMap<String, f64>,
    pub train: BTreeMap<String, f64>,
    pub eval_examples: usize,
    pub train_examples: usize,
    pub steps: usize,
    /// Mean training loss of every optimizer step.
    pub losses: Vec<f64>,
    pub num_parameters: usize,
    pub wall_seconds: f64,
}

impl RunReport {
    pub fn score(&self) -> f64 {
        self.eval[&self.metric]
    }
}

/// Model plus optimizer state, advanced one batch at a time.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub state: OptimizerState<T>,
    decay: Vec<bool>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::init(&config.encoder, config.head, num_classes, config.seed)?;
        let mut sizes = Vec::new();
        let mut decay = Vec::new();
        model.visit(&mut |name, a| {
            sizes.push(a.len());
            decay.push(decays(&name));
        });
        Ok(Trainer {
            config,
            model,
            state: OptimizerState::new(&sizes),
            decay,
        })
    }

    /// Per-example loss and gradients (in parameter visit order), with
    /// dropout seeded by `dropout_seed` when given.
    pub fn example_grad(
        &self,
        example: &Example,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<Vec<T>>)> {
        let mut tape = Tape::new().with_finite_checks(false);
        let bound = self.model.bind(&mut tape);
        let mut rng;
        let mut dropout = match dropout_seed {
            Some(s) if self.config.encoder.dropout > 0.0 => {
                rng = ChaCha8Rng::seed_from_u64(s);
                Some(Dropout {
                    rate: self.config.encoder.dropout,
                    rng: &mut rng,
                })
            }
            _ => None,
        };
        let logits = self
            .model
            .forward(&mut tape, &bound, &example.tokens, None, dropout.as_mut())?;
        let loss = loss_on(&mut tape, logits, &example.label, self.config.loss)?;
        let value = tape.value(loss).data()[0].to_f64_lossy();
        tape.backward(loss)?;
        let mut grads = Vec::with_capacity(self.decay.len());
        bound.visit(&mut |_, &v| {
            grads.push(tape.take_grad(v).expect("parameters are leaves"));
        });
        Ok((value, grads))
    }

    /// One optimizer step on the mean loss of `batch`. `indices` identify
    /// the examples for dropout seeding. Returns the mean batch loss.
    pub fn step(&mut self, batch: &[&Example], indices: &[usize], lr: f64) -> Result<f64> {
        if batch.is_empty() || batch.len() != indices.len() {
            return Err(Error::InvalidArgument("empty or mismatched batch".into()));
        }
        let step = self.state.step;
        let seed = self.config.seed;
        let per_example: Vec<Result<(f64, Vec<Vec<T>>)>> = batch
            .par_iter()
            .zip(indices.par_iter())
            .map(|(ex, &idx)| {
                let s = mix_seed(mix_seed(seed ^ mix_seed(step)) ^ idx as u64);
                self.example_grad(ex, Some(s))
            })
            .collect();

        // Sequential reduction keeps the sum order fixed across thread counts.
        let mut total_loss = 0.0;
        let mut grads: Option<Vec<Vec<T>>> = None;
        for r in per_example {
            let (loss, g) = r?;
            total_loss += loss;
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x = *x + *y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let inv = T::from_f64_lossy(1.0 / batch.len() as f64);
        for g in grads.iter_mut().flatten() {
            *g = *g * inv;
        }
        let mean_loss = total_loss / batch.len() as f64;
        if self.config.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.config.clip_norm);
        }

        let decay = &self.decay;
        let mut slots = Vec::with_capacity(decay.len());
        self.model.visit_mut(&mut |_, value| {
            let decay = decay[slots.len()];
            slots.push(ParamSlot { value, decay });
        });
        adamw_step(
            &mut slots,
            &grads,
            &mut self.state,
            lr,
            self.config.weight_decay,
        )?;
        Ok(mean_loss)
    }
}

fn loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    logits: crate::arraycore::Var,
    label: &Label,
    kind: LossKind,
) -> Result<crate::arraycore::Var> {
    match (kind, label) {
        (LossKind::CrossEntropy, Label::Class(c)) => tape.cross_entropy(logits, *c),
        (LossKind::SquaredError, Label::Real(y)) => {
            tape.squared_error(logits, T::from_f64_lossy(*y))
        }
        (LossKind::SquaredError, Label::Class(c)) => {
            tape.squared_error(logits, T::from_f64_lossy(*c as f64))
        }
        (LossKind::CrossEntropy, Label::Real(_)) => Err(Error::Config(
            "cross-entropy loss needs class labels".into(),
        )),
    }
}

/// Mean evaluation-mode loss over `examples`.
pub fn mean_loss<T: Scalar>(model: &Model<T>, examples: &[Example], kind: LossKind) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("empty example set".into()));
    }
    let losses: Vec<Result<f64>> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new().with_finite_checks(false);
            let bound = model.bind(&mut tape);
            let logits = model.forward(&mut tape, &bound, &ex.tokens, None, None)?;
            let l = loss_on(&mut tape, logits, &ex.label, kind)?;
            Ok(tape.value(l).data()[0].to_f64_lossy())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / examples.len() as f64)
}

/// Task-appropriate metrics: accuracy (plus F1 and MCC when binary) for
/// classification, Spearman and Pearson for regression.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<BTreeMap<String, f64>> {
    if data.is_empty() {
        return Err(Error::Input("empty evaluation set".into()));
    }
    let outputs: Vec<Result<Vec<T>>> = data
        .examples
        .par_iter()
        .map(|ex| model.logits(&ex.tokens))
        .collect();
    let mut logits = Vec::with_capacity(outputs.len());
    for o in outputs {
        logits.push(o?);
    }
    let mut out = BTreeMap::new();
    if data.is_regression() {
        let preds: Vec<f64> = logits.iter().map(|z| z[0].to_f64_lossy()).collect();
        let gold: Vec<f64> = data.examples.iter().map(|e| e.label.value()).collect();
        out.insert("spearman".into(), metrics::spearman_rho(&preds, &gold)?.value);
        out.insert("pearson".into(), metrics::pearson(&preds, &gold)?.value);
        return Ok(out);
    }
    let preds: Vec<usize> = logits.iter().map(|z| argmax(z)).collect();
    let gold: Vec<usize> = data
        .examples
        .iter()
        .map(|e| e.label.class().unwrap_or(0))
        .collect();
    out.insert("accuracy".into(), metrics::accuracy(&preds, &gold)?);
    if model.num_classes == 2 {
        out.insert("f1".into(), metrics::f1_binary(&preds, &gold)?);
        out.insert("mcc".into(), metrics::matthews_corr(&preds, &gold)?);
    }
    Ok(out)
}

/// Index of the largest value; the first one on ties.
fn argmax<T: Scalar>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Total optimizer steps for `n` examples, keeping the last partial batch.
pub fn total_steps(n: usize, batch_size: usize, epochs: usize) -> usize {
    n.div_ceil(batch_size) * epochs
}

/// Fine-tunes a fresh model on `train_set` and evaluates it on `eval_set`
/// after the final epoch.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<(Model<T>, RunReport)> {
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Input("training and evaluation sets must be nonempty".into()));
    }
    if train_set.is_regression() != eval_set.is_regression() {
        return Err(Error::Input(
            "training and evaluation sets disagree on task type".into(),
        ));
    }
    if cfg.loss == LossKind::CrossEntropy && train_set.is_regression() {
        return Err(Error::Config("cross-entropy loss needs class labels".into()));
    }
    let longest = train_set.max_len().max(eval_set.max_len());
    if longest > cfg.encoder.max_seq_len {
        return Err(Error::Config(format!(
            "sequences of length {longest} exceed max_seq_len {}",
            cfg.encoder.max_seq_len
        )));
    }
    let num_classes = match cfg.loss {
        LossKind::SquaredError => 1,
        LossKind::CrossEntropy => train_set.num_classes().max(eval_set.num_classes()),
    };

    let started = Instant::now();
    let mut trainer = Trainer::<T>::new(cfg.clone(), num_classes)?;
    let total = total_steps(train_set.len(), cfg.batch_size, cfg.epochs);
    let mut shuffle = stream_rng(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut losses = Vec::with_capacity(total);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            let step = trainer.state.step as usize;
            let lr = lr_at_step(step, total, cfg.learning_rate, cfg.warmup_ratio)?;
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set.examples[i]).collect();
            let loss = trainer.step(&batch, chunk, lr).map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::Training {
                    epoch: epoch + 1,
                    step: step + 1,
                    reason: "non-finite gradient".into(),
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch: epoch + 1,
                    step: step + 1,
                    reason: format!("loss is {loss}"),
                });
            }
            losses.push(loss);
        }
    }

    let eval = evaluate(&trainer.model, eval_set)?;
    let train_metrics = evaluate(&trainer.model, train_set)?;
    let metric = if train_set.is_regression() {
        "spearman"
    } else {
        "accuracy"
    };
    let report = RunReport {
        head: cfg.head.to_string(),
        seed: cfg.seed,
        metric: metric.into(),
        eval,
        train: train_metrics,
        eval_examples: eval_set.len(),
        train_examples: train_set.len(),
        steps: losses.len(),
        losses,
        num_parameters: trainer.model.num_parameters(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((trainer.model, report))
}
