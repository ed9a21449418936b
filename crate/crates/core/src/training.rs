//! Mini-batch training with Adadelta, max-norm, dropout and early stopping.

use crate::attribute::GateCache;
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::layers::Dropout;
use crate::model::Model;
use crate::params::{ParamId, ParamStore};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout: f64,
    /// Row-norm cap on constrained matrices; `None` disables it.
    pub max_norm: Option<f64>,
    pub rho: f64,
    pub eps: f64,
    pub learning_rate: f64,
    /// Epochs without a dev-accuracy improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Chance of replacing a training example's user or product with the
    /// unknown row.
    pub unknown_attribute_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            dropout: 0.1,
            max_norm: Some(3.0),
            rho: 0.95,
            eps: 1e-6,
            learning_rate: 1.0,
            patience: 5,
            max_epochs: 200,
            seed: 0,
            unknown_attribute_rate: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.rho) || self.eps <= 0.0 {
            return Err(Error::config("rho must lie in [0, 1) and eps be positive"));
        }
        if !(0.0..=1.0).contains(&self.unknown_attribute_rate) {
            return Err(Error::config("unknown_attribute_rate outside [0, 1]"));
        }
        if self.max_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::config("max_norm must be positive"));
        }
        Ok(())
    }
}

/// Adadelta with per-value running averages of squared gradients and
/// squared updates.
#[derive(Debug, Clone)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    pub learning_rate: f64,
    sq_grad: Vec<Vec<f64>>,
    sq_update: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(params: &ParamStore, rho: f64, eps: f64, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .ids()
            .map(|id| vec![0.0; params.get(id).numel()])
            .collect();
        Self {
            rho,
            eps,
            learning_rate,
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }

    /// Applies one update from `grads`, indexed like the store.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let g = &grads[i];
            if g.iter().all(|v| *v == 0.0) && self.sq_grad[i].iter().all(|v| *v == 0.0) {
                continue;
            }
            let values = params.get_mut(id).data_mut();
            for k in 0..g.len() {
                let eg = &mut self.sq_grad[i][k];
                *eg = self.rho * *eg + (1.0 - self.rho) * g[k] * g[k];
                let ed = &mut self.sq_update[i][k];
                let dx = -((*ed + self.eps).sqrt() / (*eg + self.eps).sqrt()) * g[k];
                *ed = self.rho * *ed + (1.0 - self.rho) * dx * dx;
                values[k] += self.learning_rate * dx;
            }
        }
    }
}

/// Rescales each row of every constrained matrix whose L2 norm exceeds `c`.
pub fn max_norm_constrain(params: &mut ParamStore, c: f64) {
    let ids: Vec<ParamId> = params.ids().filter(|id| params.is_constrained(*id)).collect();
    for id in ids {
        let t = params.get(id);
        if t.shape().len() != 2 {
            continue;
        }
        let over: Vec<(usize, f64)> = (0..t.rows())
            .map(|r| (r, t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()))
            .filter(|(_, n)| *n > c)
            .collect();
        if over.is_empty() {
            continue;
        }
        let t = params.get_mut(id);
        for (r, n) in over {
            for v in t.row_mut(r) {
                *v *= c / n;
            }
        }
    }
}

/// Accuracy and RMSE over class indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub rmse: f64,
    pub count: usize,
}

pub fn score(predictions: &[usize], gold: &[usize]) -> Result<Evaluation> {
    if predictions.len() != gold.len() {
        return Err(Error::invalid("predictions and gold differ in length"));
    }
    if gold.is_empty() {
        return Err(Error::data("cannot evaluate on an empty split"));
    }
    let n = gold.len() as f64;
    let correct = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    let sq: f64 = predictions
        .iter()
        .zip(gold)
        .map(|(&p, &g)| (p as f64 - g as f64).powi(2))
        .sum();
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        rmse: (sq / n).sqrt(),
        count: gold.len(),
    })
}

pub fn evaluate(model: &Model, data: &[Instance], cache: Option<&GateCache>) -> Result<Evaluation> {
    let preds = data
        .iter()
        .map(|x| model.predict(&x.tokens, x.user, x.product, cache))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = data.iter().map(|x| x.label).collect();
    score(&preds, &gold)
}

/// Tracks the best dev accuracy and a copy of the parameters that reached it.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, Evaluation)>,
    best_params: Option<ParamStore>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_params: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns true when training should stop. A perfect
    /// score stops at once, since no later epoch could replace it.
    pub fn observe(&mut self, epoch: usize, eval: Evaluation, params: &ParamStore) -> bool {
        let improved = self.best.is_none_or(|(_, b)| eval.accuracy > b.accuracy);
        if improved {
            self.best = Some((epoch, eval));
            self.best_params = Some(params.clone());
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience || eval.accuracy >= 1.0
    }

    pub fn take_best(&mut self) -> Option<ParamStore> {
        self.best_params.take()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss.
    pub loss: f64,
    pub dev_acc: f64,
    pub dev_rmse: f64,
    pub seconds: f64,
    /// Parameter checksum at the end of the epoch.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_accuracy: f64,
    pub best_dev_rmse: f64,
    pub stopped_early: bool,
}

/// Batches of similar-length examples in random order.
pub fn length_buckets<R: Rng + ?Sized>(data: &[Instance], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| data[i].tokens.len());
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Trains `model` in place and leaves it holding the best dev parameters.
/// `observer` sees every epoch as it finishes.
pub fn train(
    model: &mut Model,
    train: &[Instance],
    dev: &[Instance],
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<RunMetrics> {
    train_with_steps(model, train, dev, config, observer, &mut |_| {})
}

/// [`train`], also calling `on_step` with the parameters after every
/// optimizer step (and its max-norm projection).
pub fn train_with_steps(
    model: &mut Model,
    train: &[Instance],
    dev: &[Instance],
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
    on_step: &mut dyn FnMut(&ParamStore),
) -> Result<RunMetrics> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::data("training split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adadelta::new(model.params(), config.rho, config.eps, config.learning_rate);
    let mut stopper = EarlyStopping::new(config.patience);
    let cache = GateCache::new();
    let mut epochs = Vec::new();
    let mut grads: Vec<Vec<f64>> = model
        .params()
        .ids()
        .map(|id| vec![0.0; model.params().get(id).numel()])
        .collect();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let mut total = 0.0;
        for batch in length_buckets(train, config.batch_size, &mut rng) {
            for g in &mut grads {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            for &i in &batch {
                let x = &train[i];
                let mut user = x.user;
                let mut product = x.product;
                if rng.gen::<f64>() < config.unknown_attribute_rate {
                    user = 0;
                }
                if rng.gen::<f64>() < config.unknown_attribute_rate {
                    product = 0;
                }
                let mut tape = model.tape();
                let mut dropout = Some(Dropout::new(config.dropout, &mut rng)?);
                let (loss, _) = model.loss(&mut tape, &x.tokens, user, product, x.label, &mut dropout)?;
                total += tape.value(loss).item();
                let g = tape.backward(loss)?;
                for (id, values) in g.params() {
                    for (acc, v) in grads[id.index()].iter_mut().zip(values) {
                        *acc += scale * v;
                    }
                }
            }
            opt.step(model.params_mut(), &grads);
            if let Some(c) = config.max_norm {
                max_norm_constrain(model.params_mut(), c);
            }
            on_step(model.params());
        }
        let eval = evaluate(model, dev, Some(&cache))?;
        let record = EpochRecord {
            epoch,
            loss: total / train.len() as f64,
            dev_acc: eval.accuracy,
            dev_rmse: eval.rmse,
            seconds: start.elapsed().as_secs_f64(),
            checksum: model.params().checksum(),
        };
        observer(&record);
        epochs.push(record);
        if stopper.observe(epoch, eval, model.params()) {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best) = stopper.best.expect("at least one epoch");
    if let Some(p) = stopper.take_best() {
        model.replace_params(p);
    }
    Ok(RunMetrics {
        epochs,
        best_epoch,
        best_dev_accuracy: best.accuracy,
        best_dev_rmse: best.rmse,
        stopped_early,
    })
}

/// Appends serialized records as JSON lines.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::invalid(e.to_string()))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}
