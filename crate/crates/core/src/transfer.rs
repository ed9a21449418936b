//! Reusing learned user and product encodings on other tasks.
//!
//! The encodings are copied out of a trained model and enter every transfer
//! model as constant inputs, so transfer training cannot change them.

use crate::autograd::{Tape, Var};
use crate::data::{EntityVocab, TransferRecord};
use crate::error::{Error, Result};
use crate::layers::LstmDirection;
use crate::model::Model;
use crate::params::{tensor_checksum, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::training::{max_norm_constrain, Adadelta};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// User and product tables held fixed during transfer training.
#[derive(Debug, Clone)]
pub struct FrozenEncodings {
    pub users: Tensor,
    pub products: Tensor,
    pub user_vocab: EntityVocab,
    pub product_vocab: EntityVocab,
    /// Where the tables came from, e.g. `chim[encoder] ckpt:ab12..` or
    /// `random(3)`.
    pub provenance: String,
}

impl FrozenEncodings {
    pub fn from_model(
        model: &Model,
        user_vocab: EntityVocab,
        product_vocab: EntityVocab,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let attrs = model
            .attributes
            .as_ref()
            .ok_or_else(|| Error::config("model has no user or product tables to transfer"))?;
        Ok(Self {
            users: model.params().get(attrs.users).clone(),
            products: model.params().get(attrs.products).clone(),
            user_vocab,
            product_vocab,
            provenance: provenance.into(),
        })
    }

    /// Tables drawn uniformly from `±0.01`.
    pub fn random(
        user_vocab: EntityVocab,
        product_vocab: EntityVocab,
        user_dim: usize,
        product_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            users: Tensor::uniform(&[user_vocab.len(), user_dim], 0.01, &mut rng),
            products: Tensor::uniform(&[product_vocab.len(), product_dim], 0.01, &mut rng),
            user_vocab,
            product_vocab,
            provenance: format!("random({seed})"),
        }
    }

    /// Random tables with the same vocabularies and widths as `self`.
    pub fn random_like(&self, seed: u64) -> Self {
        Self::random(
            self.user_vocab.clone(),
            self.product_vocab.clone(),
            self.user_dim(),
            self.product_dim(),
            seed,
        )
    }

    pub fn checksum(&self) -> String {
        format!("{}:{}", tensor_checksum(&self.users), tensor_checksum(&self.products))
    }

    pub fn user_dim(&self) -> usize {
        self.users.cols()
    }

    pub fn product_dim(&self) -> usize {
        self.products.cols()
    }

    /// `[u; p]`, or `p` alone for [`Features::Product`]. Unknown names use
    /// row 0.
    pub fn features(&self, user: &str, product: &str, features: Features) -> Vec<f64> {
        let p = self.products.row(self.product_vocab.id(product));
        match features {
            Features::Joint => {
                let mut v = self.users.row(self.user_vocab.id(user)).to_vec();
                v.extend_from_slice(p);
                v
            }
            Features::Product => p.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Features {
    /// User and product encodings concatenated.
    #[default]
    Joint,
    Product,
}

/// Mean and sample standard deviation over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Interval {
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            runs,
            mean,
            std: var.sqrt(),
        }
    }
}

impl std::fmt::Display for Interval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub runs: usize,
    pub features: Features,
}

impl Default for CategoryConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            runs: 10,
            features: Features::Joint,
        }
    }
}

/// Share of test records whose category is the most common training one.
pub fn majority_baseline(train: &[TransferRecord], test: &[TransferRecord]) -> Result<f64> {
    let classes = train.iter().map(|r| r.category).max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for r in train {
        counts[r.category] += 1;
    }
    let majority = crate::layers::argmax(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>());
    if test.is_empty() {
        return Err(Error::data("empty test split"));
    }
    Ok(test.iter().filter(|r| r.category == majority).count() as f64 / test.len() as f64)
}

fn category_count(train: &[TransferRecord]) -> Result<usize> {
    let mut seen: Vec<usize> = train.iter().map(|r| r.category).collect();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::data("category classification needs at least two categories in training"));
    }
    Ok(seen.last().unwrap() + 1)
}

/// Logistic classifier `W x + b` over frozen features.
struct Logistic {
    params: ParamStore,
    weight: ParamId,
    bias: ParamId,
}

impl Logistic {
    fn new(inputs: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let bound = (6.0 / (inputs + classes) as f64).sqrt();
        let weight = params.add("cat.weight", Tensor::uniform(&[classes, inputs], bound, rng), false);
        let bias = params.add("cat.bias", Tensor::zeros(&[classes]), false);
        Self { params, weight, bias }
    }

    fn logits(&self, tape: &mut Tape, x: &[f64]) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let x = tape.input(Tensor::vector(x.to_vec()));
        let z = tape.matmul(w, x)?;
        tape.add(z, b)
    }

    fn accuracy(&self, data: &[(Vec<f64>, usize)]) -> Result<f64> {
        let mut correct = 0;
        for (x, y) in data {
            let mut tape = Tape::with_params(&self.params);
            let z = self.logits(&mut tape, x)?;
            if crate::layers::argmax(tape.value(z).data()) == *y {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

fn zero_like(params: &ParamStore) -> Vec<Vec<f64>> {
    params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect()
}

/// Trains one classifier; returns test accuracy at the best dev epoch.
fn train_category(
    encodings: &FrozenEncodings,
    split: &[Vec<TransferRecord>; 3],
    config: &CategoryConfig,
    classes: usize,
    seed: u64,
) -> Result<f64> {
    let featurize = |rs: &[TransferRecord]| -> Vec<(Vec<f64>, usize)> {
        rs.iter()
            .map(|r| (encodings.features(&r.user, &r.product, config.features), r.category))
            .collect()
    };
    let (train, dev, test) = (featurize(&split[0]), featurize(&split[1]), featurize(&split[2]));
    if test.is_empty() {
        return Err(Error::data("empty test split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Logistic::new(train[0].0.len(), classes, &mut rng);
    let mut opt = Adadelta::new(&model.params, 0.95, 1e-6, 1.0);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size.max(1)) {
            let mut grads = zero_like(&model.params);
            for &i in batch {
                let (x, y) = &train[i];
                let mut tape = Tape::with_params(&model.params);
                let z = model.logits(&mut tape, x)?;
                let l = tape.cross_entropy(z, *y)?;
                for (id, g) in tape.backward(l)?.params() {
                    for (a, v) in grads[id.index()].iter_mut().zip(g) {
                        *a += v / batch.len() as f64;
                    }
                }
            }
            opt.step(&mut model.params, &grads);
        }
        let score = if dev.is_empty() { model.accuracy(&train)? } else { model.accuracy(&dev)? };
        if best.is_none_or(|(b, _)| score > b) {
            best = Some((score, model.accuracy(&test)?));
        }
    }
    best.map(|(_, t)| t).ok_or_else(|| Error::config("category training needs at least one epoch"))
}

/// Test accuracy over `config.runs` seeds starting at `seed`.
pub fn category_classify(
    encodings: &FrozenEncodings,
    split: &[Vec<TransferRecord>; 3],
    config: &CategoryConfig,
    seed: u64,
) -> Result<Interval> {
    let classes = category_count(&split[0])?;
    let runs = (0..config.runs as u64)
        .map(|k| train_category(encodings, split, config, classes, seed + k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Interval::from_runs(runs))
}

/// `exp(total NLL / tokens)`.
pub fn perplexity(total_nll: f64, tokens: usize) -> f64 {
    (total_nll / tokens as f64).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Subword vocabulary size, excluding the begin and end markers.
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_norm: Option<f64>,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 10_000,
            embed_dim: 300,
            hidden_dim: 300,
            epochs: 10,
            batch_size: 32,
            max_norm: Some(3.0),
            seed: 0,
        }
    }
}

/// LSTM language model over headline subwords whose initial hidden state
/// is an affine map of `[u; p]`.
///
/// Input ids are `0..V` for subwords and `V` for the begin marker; the
/// output layer scores `0..V` plus the end marker at index `V`.
pub struct HeadlineDecoder {
    pub config: DecoderConfig,
    pub params: ParamStore,
    embed: ParamId,
    init_weight: ParamId,
    init_bias: ParamId,
    lstm: LstmDirection,
    out_weight: ParamId,
    out_bias: ParamId,
}

impl HeadlineDecoder {
    pub fn new(config: DecoderConfig, attribute_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, e, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let glorot = |r: usize, c: usize| (6.0 / (r + c) as f64).sqrt();
        let mut params = ParamStore::new();
        let embed = params.add("dec.embed", Tensor::uniform(&[v + 1, e], 0.1, &mut rng), false);
        let init_weight = params.add(
            "dec.init.weight",
            Tensor::uniform(&[h, attribute_dim], glorot(h, attribute_dim), &mut rng),
            true,
        );
        let init_bias = params.add("dec.init.bias", Tensor::zeros(&[h]), false);
        let lstm_weight = params.add(
            "dec.lstm.weight",
            Tensor::uniform(&[4 * h, e + h], glorot(4 * h, e + h), &mut rng),
            true,
        );
        let lstm_bias = params.add("dec.lstm.bias", Tensor::zeros(&[4 * h]), false);
        let out_weight = params.add(
            "dec.out.weight",
            Tensor::uniform(&[v + 1, h], glorot(v + 1, h), &mut rng),
            true,
        );
        let out_bias = params.add("dec.out.bias", Tensor::zeros(&[v + 1]), false);
        Self {
            config,
            params,
            embed,
            init_weight,
            init_bias,
            lstm: LstmDirection {
                weight: Some(lstm_weight),
                bias: lstm_bias,
                hidden: h,
            },
            out_weight,
            out_bias,
        }
    }

    /// Number of scored positions in a headline (its tokens plus the end).
    pub fn targets(headline: &[usize]) -> usize {
        headline.len() + 1
    }

    /// Output logits, one row per target position.
    fn logits(&self, tape: &mut Tape, attrs: &[f64], headline: &[usize]) -> Result<Var> {
        let v = self.config.vocab_size;
        if let Some(bad) = headline.iter().find(|&&t| t >= v) {
            return Err(Error::data(format!("headline id {bad} outside vocabulary of size {v}")));
        }
        let mut inputs = vec![v];
        inputs.extend_from_slice(headline);

        let up = tape.input(Tensor::vector(attrs.to_vec()));
        let wi = tape.param(self.init_weight);
        let bi = tape.param(self.init_bias);
        let h0 = tape.matmul(wi, up)?;
        let h0 = tape.add(h0, bi)?;
        let c0 = tape.input(Tensor::zeros(&[self.config.hidden_dim]));

        let table = tape.param(self.embed);
        let x = tape.gather_rows(table, &inputs)?;
        let hs = self.lstm.run_from(tape, x, false, None, (h0, c0))?;
        let hs = tape.stack_rows(&hs)?;
        let wo = tape.param(self.out_weight);
        let wot = tape.transpose(wo)?;
        let logits = tape.matmul(hs, wot)?;
        let bo = tape.param(self.out_bias);
        tape.add_row_bias(logits, bo)
    }

    /// Summed teacher-forced negative log-likelihood of one headline.
    pub fn nll(&self, tape: &mut Tape, attrs: &[f64], headline: &[usize]) -> Result<Var> {
        let logits = self.logits(tape, attrs, headline)?;
        let mut targets = headline.to_vec();
        targets.push(self.config.vocab_size);
        let mut total = None;
        for (t, &y) in targets.iter().enumerate() {
            let row = tape.row(logits, t)?;
            let l = tape.cross_entropy(row, y)?;
            total = Some(match total {
                None => l,
                Some(s) => tape.add(s, l)?,
            });
        }
        Ok(total.expect("at least the end marker"))
    }

    /// Probability assigned to each target (headline tokens then the end),
    /// from a plain softmax over the output logits.
    pub fn step_probabilities(&self, attrs: &[f64], headline: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.params);
        let logits = self.logits(&mut tape, attrs, headline)?;
        let logits = tape.value(logits);
        let mut targets = headline.to_vec();
        targets.push(self.config.vocab_size);
        targets
            .iter()
            .enumerate()
            .map(|(t, &y)| Ok(crate::autograd::softmax_values(logits.row(t), None)?[y]))
            .collect()
    }

    /// Teacher-forced perplexity over `records`.
    pub fn perplexity(&self, encodings: &FrozenEncodings, records: &[TransferRecord]) -> Result<f64> {
        if records.is_empty() {
            return Err(Error::data("perplexity over an empty split"));
        }
        let mut total = 0.0;
        let mut tokens = 0;
        for r in records {
            let mut tape = Tape::with_params(&self.params);
            let attrs = encodings.features(&r.user, &r.product, Features::Joint);
            let l = self.nll(&mut tape, &attrs, &r.headline)?;
            total += tape.value(l).item();
            tokens += Self::targets(&r.headline);
        }
        Ok(perplexity(total, tokens))
    }

    /// Adadelta over the decoder's own parameters; keeps the parameters
    /// with the lowest dev perplexity.
    pub fn fit(
        &mut self,
        encodings: &FrozenEncodings,
        train: &[TransferRecord],
        dev: &[TransferRecord],
    ) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::data("headline training split is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        let mut opt = Adadelta::new(&self.params, 0.95, 1e-6, 1.0);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let held_out = if dev.is_empty() { train } else { dev };
        let mut best = (self.perplexity(encodings, held_out)?, self.params.clone());
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(self.config.batch_size.max(1)) {
                let mut grads = zero_like(&self.params);
                let tokens: usize = batch.iter().map(|&i| Self::targets(&train[i].headline)).sum();
                for &i in batch {
                    let r = &train[i];
                    let attrs = encodings.features(&r.user, &r.product, Features::Joint);
                    let mut tape = Tape::with_params(&self.params);
                    let l = self.nll(&mut tape, &attrs, &r.headline)?;
                    for (id, g) in tape.backward(l)?.params() {
                        for (a, v) in grads[id.index()].iter_mut().zip(g) {
                            *a += v / tokens as f64;
                        }
                    }
                }
                opt.step(&mut self.params, &grads);
                if let Some(c) = self.config.max_norm {
                    max_norm_constrain(&mut self.params, c);
                }
            }
            let ppl = self.perplexity(encodings, held_out)?;
            if ppl < best.0 {
                best = (ppl, self.params.clone());
            }
        }
        self.params = best.1;
        Ok(best.0)
    }

    /// Zeroes the output layer, making every prediction uniform.
    pub fn make_uniform(&mut self) {
        for id in [self.out_weight, self.out_bias] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Dev and test perplexity of a decoder trained on the first split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadlineResult {
    pub dev_perplexity: f64,
    pub test_perplexity: f64,
}

pub fn headline_perplexity(
    encodings: &FrozenEncodings,
    split: &[Vec<TransferRecord>; 3],
    config: &DecoderConfig,
) -> Result<HeadlineResult> {
    let mut decoder = HeadlineDecoder::new(config.clone(), encodings.user_dim() + encodings.product_dim());
    let dev_perplexity = decoder.fit(encodings, &split[0], &split[1])?;
    let test_perplexity = decoder.perplexity(encodings, &split[2])?;
    Ok(HeadlineResult {
        dev_perplexity,
        test_perplexity,
    })
}

/// Which transfer tasks to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferTask {
    Category,
    Headline,
    Both,
}

impl std::str::FromStr for TransferTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(Self::Category),
            "headline" => Ok(Self::Headline),
            "both" => Ok(Self::Both),
            other => Err(Error::config(format!(
                "unknown transfer task `{other}` (expected category, headline or both)"
            ))),
        }
    }
}

/// Results for one set of encodings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferReport {
    pub provenance: String,
    pub checksum: String,
    /// Checksum after every transfer model was trained; equal to
    /// `checksum` unless something wrote to the frozen tables.
    pub checksum_after: String,
    pub category: Option<Interval>,
    pub headline: Option<HeadlineResult>,
}

/// Runs the requested tasks on one set of encodings.
pub fn run_transfer(
    encodings: &FrozenEncodings,
    split: &[Vec<TransferRecord>; 3],
    task: TransferTask,
    category: &CategoryConfig,
    decoder: &DecoderConfig,
    seed: u64,
) -> Result<TransferReport> {
    let checksum = encodings.checksum();
    let cat = match task {
        TransferTask::Category | TransferTask::Both => Some(category_classify(encodings, split, category, seed)?),
        TransferTask::Headline => None,
    };
    let head = match task {
        TransferTask::Headline | TransferTask::Both => {
            let cfg = DecoderConfig { seed, ..decoder.clone() };
            Some(headline_perplexity(encodings, split, &cfg)?)
        }
        TransferTask::Category => None,
    };
    Ok(TransferReport {
        provenance: encodings.provenance.clone(),
        checksum,
        checksum_after: encodings.checksum(),
        category: cat,
        headline: head,
    })
}
