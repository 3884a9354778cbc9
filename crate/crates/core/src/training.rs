//! Loss, optimizers, the mini-batch training loop, evaluation, holdout and
//! k-fold protocols, and single-axis hyperparameter sweeps.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, PAD};
use crate::embeddings::{make_channels, ChannelSet, EmbeddingVariant};
use crate::error::{Error, Result};
use crate::model::{
    accumulate_gradients, forward, forward_with_mask, Gradients, Mode, ModelConfig, ModelParams,
};
use crate::numerics::{derive_seed, dropout_mask, Activation, Matrix, Rng};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Sentences per gradient chunk. Chunks are summed in a fixed order so the
/// result does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adadelta,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adadelta" => Ok(OptimizerKind::Adadelta),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Protocol {
    Holdout { fraction: f64 },
    Kfold { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// SGD step size; ADADELTA ignores it.
    pub learning_rate: f64,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub repeats: usize,
    pub protocol: Protocol,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adadelta,
            learning_rate: 0.1,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            batch_size: 50,
            epochs: 25,
            seed: 42,
            repeats: 5,
            protocol: Protocol::Holdout { fraction: 0.1 },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.optimizer == OptimizerKind::Sgd
            && self.learning_rate.partial_cmp(&0.0) != Some(Ordering::Greater)
        {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.adadelta_rho > 0.0 && self.adadelta_rho < 1.0) {
            return bad(format!(
                "adadelta rho must lie in (0, 1), got {}",
                self.adadelta_rho
            ));
        }
        if self.adadelta_eps.partial_cmp(&0.0) != Some(Ordering::Greater) {
            return bad(format!(
                "adadelta eps must be positive, got {}",
                self.adadelta_eps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        match self.protocol {
            Protocol::Holdout { fraction } if !(fraction > 0.0 && fraction < 1.0) => bad(format!(
                "holdout fraction must lie in (0, 1), got {fraction}"
            )),
            Protocol::Kfold { k } if k < 2 => bad(format!("k-fold needs k >= 2, got {k}")),
            _ => Ok(()),
        }
    }
}

/// `-ln P[target]` with `P[target]` floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    let p = probs
        .get(target)
        .ok_or_else(|| Error::Config(format!("target {target} outside {} classes", probs.len())))?;
    Ok(-p.max(PROB_FLOOR).ln())
}

fn check_grad_shapes(params: &ModelParams, grads: &Gradients) -> Result<()> {
    let ours = params.tensors();
    let theirs = grads.params.tensors();
    if ours.len() != theirs.len() || ours.iter().zip(&theirs).any(|(a, b)| a.shape != b.shape) {
        return Err(Error::Shape(
            "gradients do not match parameter shapes".into(),
        ));
    }
    Ok(())
}

fn check_embedding_key(channels: &ChannelSet, (k, id): (usize, usize), len: usize) -> Result<()> {
    if k >= channels.len() || id >= channels.vocab_size() || len != channels.dim() {
        return Err(Error::Shape(format!(
            "embedding gradient for channel {k}, row {id} does not fit the tables"
        )));
    }
    Ok(())
}

/// `theta <- theta - lr * g`. Frozen tables and PAD rows are left untouched.
pub fn sgd_step(
    params: &mut ModelParams,
    channels: &mut ChannelSet,
    grads: &Gradients,
    lr: f64,
) -> Result<()> {
    check_grad_shapes(params, grads)?;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.params.tensors()) {
        for (x, dx) in p.data.iter_mut().zip(g.data) {
            *x -= lr * dx;
        }
    }
    for (&(k, id), row) in &grads.embeddings {
        check_embedding_key(channels, (k, id), row.len())?;
        let table = &mut channels.channels[k];
        if !table.trainable || id == PAD {
            continue;
        }
        for (x, dx) in table.vectors.row_mut(id).iter_mut().zip(row) {
            *x -= lr * dx;
        }
    }
    Ok(())
}

/// Running averages of squared gradients and squared updates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub sq_grad: Vec<Vec<f64>>,
    pub sq_update: Vec<Vec<f64>>,
    /// Per-channel accumulators for embedding rows. Rows only advance on
    /// steps where they receive a gradient.
    pub emb_sq_grad: Vec<Matrix>,
    pub emb_sq_update: Vec<Matrix>,
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, channels: &ChannelSet) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        let emb: Vec<Matrix> = channels
            .channels
            .iter()
            .map(|t| {
                if t.trainable {
                    Matrix::zeros(t.vocab_size(), t.dim())
                } else {
                    Matrix::zeros(0, 0)
                }
            })
            .collect();
        OptimizerState {
            sq_grad: zeros.clone(),
            sq_update: zeros,
            emb_sq_grad: emb.clone(),
            emb_sq_update: emb,
            steps: 0,
        }
    }
}

fn adadelta_update(x: &mut f64, g: f64, eg: &mut f64, ex: &mut f64, rho: f64, eps: f64) {
    *eg = rho * *eg + (1.0 - rho) * g * g;
    let delta = -((*ex + eps).sqrt() / (*eg + eps).sqrt()) * g;
    *ex = rho * *ex + (1.0 - rho) * delta * delta;
    *x += delta;
}

/// One ADADELTA step over every trainable tensor.
pub fn adadelta_step(
    params: &mut ModelParams,
    channels: &mut ChannelSet,
    grads: &Gradients,
    state: &mut OptimizerState,
    rho: f64,
    eps: f64,
) -> Result<()> {
    check_grad_shapes(params, grads)?;
    let tensors = params.tensors_mut();
    if state.sq_grad.len() != tensors.len()
        || tensors
            .iter()
            .zip(&state.sq_grad)
            .any(|(t, s)| t.data.len() != s.len())
        || state.emb_sq_grad.len() != channels.len()
    {
        return Err(Error::Shape(
            "optimizer state does not match the parameters".into(),
        ));
    }
    for (((p, g), eg), ex) in tensors
        .into_iter()
        .zip(grads.params.tensors())
        .zip(&mut state.sq_grad)
        .zip(&mut state.sq_update)
    {
        for (((x, &dx), eg), ex) in p.data.iter_mut().zip(g.data).zip(eg).zip(ex) {
            adadelta_update(x, dx, eg, ex, rho, eps);
        }
    }
    for (&(k, id), row) in &grads.embeddings {
        check_embedding_key(channels, (k, id), row.len())?;
        let table = &mut channels.channels[k];
        if !table.trainable || id == PAD {
            continue;
        }
        let eg = state.emb_sq_grad[k].row_mut(id);
        let ex = state.emb_sq_update[k].row_mut(id);
        for (((x, &dx), eg), ex) in table
            .vectors
            .row_mut(id)
            .iter_mut()
            .zip(row)
            .zip(eg)
            .zip(ex)
        {
            adadelta_update(x, dx, eg, ex, rho, eps);
        }
    }
    state.steps += 1;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BestEpoch {
    pub epoch: usize,
    pub accuracy: f64,
    pub params: ModelParams,
    pub channels: ChannelSet,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Snapshot from the epoch with the highest validation accuracy.
    pub best: Option<BestEpoch>,
}

fn check_compat(
    dataset: &Dataset,
    channels: &ChannelSet,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<()> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    if dataset.class_count != cfg.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            dataset.class_count, cfg.classes
        )));
    }
    if channels.len() != cfg.channels || channels.dim() != cfg.embed_dim {
        return Err(Error::Config(format!(
            "model expects {} channel(s) of dimension {}, got {} of dimension {}",
            cfg.channels,
            cfg.embed_dim,
            channels.len(),
            channels.dim()
        )));
    }
    if dataset.vocab.len() > channels.vocab_size() {
        return Err(Error::Config(format!(
            "vocabulary of {} tokens exceeds embedding tables of {} rows",
            dataset.vocab.len(),
            channels.vocab_size()
        )));
    }
    Ok(())
}

/// Trains in place. Each epoch shuffles with `rng`, splits into batches and
/// takes one optimizer step on the mean batch gradient. With a validation
/// set, the best epoch is retained in the outcome.
pub fn train(
    dataset: &Dataset,
    channels: &mut ChannelSet,
    params: &mut ModelParams,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
    rng: &mut Rng,
    validation: Option<&Dataset>,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    check_compat(dataset, channels, params, cfg)?;
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(v) = validation {
        check_compat(v, channels, params, cfg)?;
    }

    let mut state = OptimizerState::new(params, channels);
    let mut outcome = TrainOutcome::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 1..=tcfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(tcfg.batch_size) {
            let masks: Vec<Option<Vec<f64>>> = batch
                .iter()
                .map(|_| {
                    (cfg.dropout > 0.0)
                        .then(|| {
                            dropout_mask(rng, cfg.pooled_len(), cfg.dropout).map(|m| m.into_vec())
                        })
                        .transpose()
                })
                .collect::<Result<_>>()?;

            let parts: Vec<(Gradients, f64)> = batch
                .par_chunks(CHUNK)
                .zip(masks.par_chunks(CHUNK))
                .map(|(idx, masks)| {
                    let mut grads = Gradients::zeros_like(params);
                    let mut loss = 0.0;
                    for (&i, mask) in idx.iter().zip(masks) {
                        let sent = &dataset.sentences[i];
                        let trace = forward_with_mask(sent, channels, params, cfg, mask.clone())?;
                        loss += cross_entropy(&trace.probs, sent.label)?;
                        accumulate_gradients(
                            &trace, sent.label, params, cfg, channels, &mut grads,
                        )?;
                    }
                    Ok((grads, loss))
                })
                .collect::<Result<_>>()?;

            let mut parts = parts.into_iter();
            let (mut grads, mut loss) = parts.next().expect("non-empty batch");
            for (g, l) in parts {
                grads.add_assign(&g);
                loss += l;
            }
            loss_sum += loss;
            grads.scale(1.0 / batch.len() as f64);
            match tcfg.optimizer {
                OptimizerKind::Sgd => sgd_step(params, channels, &grads, tcfg.learning_rate)?,
                OptimizerKind::Adadelta => adadelta_step(
                    params,
                    channels,
                    &grads,
                    &mut state,
                    tcfg.adadelta_rho,
                    tcfg.adadelta_eps,
                )?,
            }
        }

        let val_accuracy = match validation {
            Some(v) => Some(evaluate(v, channels, params, cfg)?.accuracy),
            None => None,
        };
        let train_loss = loss_sum / dataset.len() as f64;
        log::debug!("epoch {epoch}: loss {train_loss:.6} val {val_accuracy:?}");
        if let Some(acc) = val_accuracy {
            if outcome.best.as_ref().is_none_or(|b| acc > b.accuracy) {
                outcome.best = Some(BestEpoch {
                    epoch,
                    accuracy: acc,
                    params: params.clone(),
                    channels: channels.clone(),
                });
            }
        }
        outcome.history.push(EpochRecord {
            epoch,
            train_loss,
            val_accuracy,
        });
    }
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
    pub loss: f64,
    pub repeat: usize,
    pub fold: Option<usize>,
    pub config: String,
}

impl EvalReport {
    pub fn per_class_totals(&self) -> Vec<usize> {
        self.confusion.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn predictions_per_class(&self) -> Vec<usize> {
        let c = self.confusion.len();
        (0..c)
            .map(|p| self.confusion.iter().map(|r| r[p]).sum())
            .collect()
    }

    /// Aligned human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "accuracy {:.4} ({}/{})  mean loss {:.6}\n",
            self.accuracy, self.correct, self.total, self.loss
        );
        s.push_str("class  total  correct  predicted\n");
        let preds = self.predictions_per_class();
        for (c, row) in self.confusion.iter().enumerate() {
            s.push_str(&format!(
                "{c:>5}  {:>5}  {:>7}  {:>9}\n",
                row.iter().sum::<usize>(),
                row[c],
                preds[c]
            ));
        }
        s
    }

    /// CSV with one summary row followed by the confusion matrix.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let c = self.confusion.len();
        let mut header = vec![
            "accuracy".to_string(),
            "correct".into(),
            "total".into(),
            "loss".into(),
        ];
        header.extend((0..c).map(|i| format!("class_{i}_total")));
        header.extend((0..c).map(|i| format!("class_{i}_correct")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        let mut row = vec![
            fmt_real(self.accuracy),
            self.correct.to_string(),
            self.total.to_string(),
            fmt_real(self.loss),
        ];
        row.extend(self.per_class_totals().iter().map(usize::to_string));
        row.extend((0..c).map(|i| self.confusion[i][i].to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn fmt_real(x: f64) -> String {
    format!("{x:.6}")
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

/// Inference-mode accuracy, confusion counts and mean loss.
pub fn evaluate(
    dataset: &Dataset,
    channels: &ChannelSet,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<EvalReport> {
    check_compat(dataset, channels, params, cfg)?;
    let results: Vec<(usize, f64)> = dataset
        .sentences
        .par_iter()
        .map(|sent| {
            let trace = forward(sent, channels, params, cfg, Mode::Infer)?;
            Ok((trace.predicted(), cross_entropy(&trace.probs, sent.label)?))
        })
        .collect::<Result<_>>()?;
    let c = cfg.classes;
    let mut confusion = vec![vec![0; c]; c];
    let mut loss = 0.0;
    for (sent, &(pred, l)) in dataset.sentences.iter().zip(&results) {
        confusion[sent.label][pred] += 1;
        loss += l;
    }
    let total = dataset.len();
    let correct = (0..c).map(|i| confusion[i][i]).sum();
    Ok(EvalReport {
        accuracy: correct as f64 / total.max(1) as f64,
        correct,
        total,
        confusion,
        loss: loss / total.max(1) as f64,
        repeat: 0,
        fold: None,
        config: cfg.to_string(),
    })
}

/// Seeded split of `0..n` into `k` disjoint folds whose sizes differ by at
/// most one.
pub fn kfold_partition(n: usize, k: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::Config(format!(
            "cannot split {n} sentences into {k} folds"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Seeded `(train, test)` index split with `round(fraction * n)` test items
/// (at least one of each).
pub fn holdout_split(n: usize, fraction: f64, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 || !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "cannot hold out {fraction} of {n} sentences"
        )));
    }
    let test_n = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut test = idx[..test_n].to_vec();
    let mut train = idx[test_n..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProtocolReport {
    pub runs: Vec<EvalReport>,
    pub mean_accuracy: f64,
    pub stddev: f64,
}

impl ProtocolReport {
    pub fn from_runs(runs: Vec<EvalReport>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().map(|r| r.accuracy).sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter()
                .map(|r| (r.accuracy - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0)
        } else {
            0.0
        };
        ProtocolReport {
            runs,
            mean_accuracy: mean,
            stddev: var.sqrt(),
        }
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.accuracy).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["repeat", "fold", "accuracy", "loss", "correct", "total"])
            .map_err(|e| csv_err(path, e))?;
        for r in &self.runs {
            w.write_record([
                r.repeat.to_string(),
                r.fold.map_or(String::new(), |f| f.to_string()),
                fmt_real(r.accuracy),
                fmt_real(r.loss),
                r.correct.to_string(),
                r.total.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.write_record(["mean", "", &fmt_real(self.mean_accuracy), "", "", ""])
            .map_err(|e| csv_err(path, e))?;
        w.write_record(["stddev", "", &fmt_real(self.stddev), "", "", ""])
            .map_err(|e| csv_err(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Stream tags for seeds derived from the base seed.
mod tag {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const CHANNELS: u64 = 4;
}

fn run_seed(base: u64, stream: u64, repeat: usize, fold: usize) -> u64 {
    derive_seed(
        derive_seed(derive_seed(base, stream), repeat as u64),
        fold as u64,
    )
}

/// Trains and evaluates one fresh model per fold and repeat. Channels start
/// from `channels` for every run.
/// (repeat, fold, train indices, test indices)
type Job = (usize, Option<usize>, Vec<usize>, Vec<usize>);

pub fn run_protocol(
    dataset: &Dataset,
    channels: &ChannelSet,
    cfg: &ModelConfig,
    tcfg: &TrainConfig,
) -> Result<ProtocolReport> {
    tcfg.validate()?;
    cfg.validate()?;
    let n = dataset.len();

    let mut jobs: Vec<Job> = Vec::new();
    for repeat in 0..tcfg.repeats {
        let mut split_rng = Rng::new(run_seed(tcfg.seed, tag::SPLIT, repeat, 0));
        match tcfg.protocol {
            Protocol::Holdout { fraction } => {
                let (train, test) = holdout_split(n, fraction, &mut split_rng)?;
                jobs.push((repeat, None, train, test));
            }
            Protocol::Kfold { k } => {
                let folds = kfold_partition(n, k, &mut split_rng)?;
                for f in 0..k {
                    let train: Vec<usize> = folds
                        .iter()
                        .enumerate()
                        .filter(|&(g, _)| g != f)
                        .flat_map(|(_, idx)| idx.iter().copied())
                        .collect();
                    jobs.push((repeat, Some(f), train, folds[f].clone()));
                }
            }
        }
    }

    let runs: Vec<EvalReport> = jobs
        .par_iter()
        .map(|(repeat, fold, train_idx, test_idx)| {
            let f = fold.unwrap_or(0);
            let mut init_rng = Rng::new(run_seed(tcfg.seed, tag::INIT, *repeat, f));
            let mut train_rng = Rng::new(run_seed(tcfg.seed, tag::TRAIN, *repeat, f));
            let mut params = ModelParams::init(cfg, &mut init_rng)?;
            let mut ch = channels.clone();
            let train_set = dataset.subset(train_idx);
            let test_set = dataset.subset(test_idx);
            train(
                &train_set,
                &mut ch,
                &mut params,
                cfg,
                tcfg,
                &mut train_rng,
                None,
            )?;
            let mut report = evaluate(&test_set, &ch, &params, cfg)?;
            report.repeat = *repeat;
            report.fold = *fold;
            Ok(report)
        })
        .collect::<Result<_>>()?;
    Ok(ProtocolReport::from_runs(runs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Embedding,
    RegionSize,
    FilterCount,
    Dropout,
    Activation,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Embedding => "embedding",
            SweepAxis::RegionSize => "region_size",
            SweepAxis::FilterCount => "filter_count",
            SweepAxis::Dropout => "dropout",
            SweepAxis::Activation => "activation",
        }
    }

    /// Parses a list of axis values. Region-size tuples are written `(3,4,5)`
    /// or `3-4-5`; other values are comma-separated.
    pub fn parse_values(self, text: &str) -> Result<Vec<AxisValue>> {
        let items: Vec<String> = if self == SweepAxis::RegionSize {
            split_tuples(text)
        } else {
            text.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        };
        if items.is_empty() {
            return Err(Error::Config(format!(
                "no values given for axis {}",
                self.name()
            )));
        }
        items.iter().map(|s| self.parse_value(s)).collect()
    }

    pub fn parse_value(self, s: &str) -> Result<AxisValue> {
        let bad = || Error::Config(format!("invalid value {s:?} for axis {}", self.name()));
        match self {
            SweepAxis::Embedding => s.parse().map(AxisValue::Embedding).map_err(|_| bad()),
            SweepAxis::Activation => s.parse().map(AxisValue::Activation).map_err(|_| bad()),
            SweepAxis::FilterCount => s.trim().parse().map(AxisValue::Filters).map_err(|_| bad()),
            SweepAxis::Dropout => s.trim().parse().map(AxisValue::Dropout).map_err(|_| bad()),
            SweepAxis::RegionSize => s
                .trim()
                .trim_start_matches('(')
                .trim_end_matches(')')
                .split([',', '-', ' '])
                .filter(|p| !p.is_empty())
                .map(|p| p.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()
                .map(AxisValue::RegionSizes),
        }
    }
}

fn split_tuples(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0;
    let mut cur = String::new();
    for c in text.chars() {
        match c {
            '(' => {
                depth += 1;
                cur.push(c);
            }
            ')' => {
                depth -= 1;
                cur.push(c);
            }
            ',' | ';' if depth == 0 => {
                if !cur.trim().is_empty() {
                    out.push(cur.trim().to_string());
                }
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "embedding" => Ok(SweepAxis::Embedding),
            "region_size" | "regions" => Ok(SweepAxis::RegionSize),
            "filter_count" | "filters" => Ok(SweepAxis::FilterCount),
            "dropout" => Ok(SweepAxis::Dropout),
            "activation" => Ok(SweepAxis::Activation),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AxisValue {
    Embedding(EmbeddingVariant),
    RegionSizes(Vec<usize>),
    Filters(usize),
    Dropout(f64),
    Activation(Activation),
}

impl AxisValue {
    pub fn axis(&self) -> SweepAxis {
        match self {
            AxisValue::Embedding(_) => SweepAxis::Embedding,
            AxisValue::RegionSizes(_) => SweepAxis::RegionSize,
            AxisValue::Filters(_) => SweepAxis::FilterCount,
            AxisValue::Dropout(_) => SweepAxis::Dropout,
            AxisValue::Activation(_) => SweepAxis::Activation,
        }
    }

    fn sort_cmp(&self, other: &AxisValue) -> Ordering {
        match (self, other) {
            (AxisValue::Embedding(a), AxisValue::Embedding(b)) => a.cmp(b),
            (AxisValue::RegionSizes(a), AxisValue::RegionSizes(b)) => a.cmp(b),
            (AxisValue::Filters(a), AxisValue::Filters(b)) => a.cmp(b),
            (AxisValue::Dropout(a), AxisValue::Dropout(b)) => a.total_cmp(b),
            (AxisValue::Activation(a), AxisValue::Activation(b)) => a.cmp(b),
            _ => Ordering::Equal,
        }
    }
}

impl fmt::Display for AxisValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AxisValue::Embedding(v) => write!(f, "{v}"),
            AxisValue::RegionSizes(r) => {
                let parts: Vec<String> = r.iter().map(usize::to_string).collect();
                write!(f, "({})", parts.join(","))
            }
            AxisValue::Filters(n) => write!(f, "{n}"),
            AxisValue::Dropout(p) => write!(f, "{p}"),
            AxisValue::Activation(a) => write!(f, "{a}"),
        }
    }
}

/// Where a run's embedding channels come from.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSource {
    pub variant: EmbeddingVariant,
    pub paths: Vec<PathBuf>,
    pub embed_dim: usize,
}

impl ChannelSource {
    pub fn random(embed_dim: usize) -> Self {
        ChannelSource {
            variant: EmbeddingVariant::Random,
            paths: Vec::new(),
            embed_dim,
        }
    }

    pub fn build(&self, vocab: &crate::corpus::Vocabulary, seed: u64) -> Result<ChannelSet> {
        let mut rng = Rng::new(derive_seed(seed, tag::CHANNELS));
        make_channels(self.variant, &self.paths, vocab, self.embed_dim, &mut rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: AxisValue,
    pub report: ProtocolReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    fn header(&self) -> Vec<String> {
        let runs = self
            .rows
            .iter()
            .map(|r| r.report.runs.len())
            .max()
            .unwrap_or(0);
        let mut h = vec![
            "axis".to_string(),
            "value".into(),
            "mean_accuracy".into(),
            "stddev".into(),
        ];
        h.extend((1..=runs).map(|i| format!("run_{i}")));
        h
    }

    fn records(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|row| {
                let mut rec = vec![
                    self.axis.name().to_string(),
                    row.value.to_string(),
                    fmt_real(row.report.mean_accuracy),
                    fmt_real(row.report.stddev),
                ];
                rec.extend(row.report.accuracies().into_iter().map(fmt_real));
                rec
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(self.header())
            .map_err(|e| csv_err(path, e))?;
        for rec in self.records() {
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        let mut all = vec![self.header()];
        all.extend(self.records());
        let cols = all.iter().map(Vec::len).max().unwrap_or(0);
        let widths: Vec<usize> = (0..cols)
            .map(|c| {
                all.iter()
                    .filter_map(|r| r.get(c))
                    .map(String::len)
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = Vec::new();
        for r in &all {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, v)| format!("{v:<w$}", w = widths[c]))
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).expect("write to Vec");
        }
        String::from_utf8(out).expect("utf-8")
    }
}

/// Applies one axis value to a copy of the base configuration.
pub fn apply_axis_value(
    base: &ModelConfig,
    source: &ChannelSource,
    value: &AxisValue,
) -> Result<(ModelConfig, ChannelSource)> {
    let mut cfg = base.clone();
    let mut src = source.clone();
    let invalid = || Error::Config(format!("invalid value {value} for axis {}", value.axis()));
    match value {
        AxisValue::Embedding(v) => {
            src.variant = *v;
            cfg.channels = v.channel_count();
        }
        AxisValue::RegionSizes(r) => {
            if r.is_empty() || r.contains(&0) {
                return Err(invalid());
            }
            cfg.region_sizes = r.clone();
        }
        AxisValue::Filters(n) => {
            if *n == 0 {
                return Err(invalid());
            }
            cfg.filters = *n;
        }
        AxisValue::Dropout(p) => {
            if !(0.0..1.0).contains(p) {
                return Err(invalid());
            }
            cfg.dropout = *p;
        }
        AxisValue::Activation(a) => cfg.activation = *a,
    }
    cfg.validate()
        .map_err(|e| Error::Config(format!("value {value}: {e}")))?;
    Ok((cfg, src))
}

/// One protocol run per axis value with everything else held at `base`.
/// Rows come back sorted by axis value.
pub fn sweep(
    dataset: &Dataset,
    source: &ChannelSource,
    base: &ModelConfig,
    tcfg: &TrainConfig,
    axis: SweepAxis,
    values: &[AxisValue],
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config(format!("no values given for axis {axis}")));
    }
    let mut planned = Vec::with_capacity(values.len());
    for v in values {
        if v.axis() != axis {
            return Err(Error::Config(format!(
                "value {v} does not belong to axis {axis}"
            )));
        }
        planned.push((v.clone(), apply_axis_value(base, source, v)?));
    }
    let mut rows: Vec<SweepRow> = planned
        .par_iter()
        .map(|(value, (cfg, src))| {
            let channels = src.build(&dataset.vocab, tcfg.seed)?;
            let report = run_protocol(dataset, &channels, cfg, tcfg)?;
            Ok(SweepRow {
                value: value.clone(),
                report,
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| a.value.sort_cmp(&b.value));
    Ok(SweepTable { axis, rows })
}
