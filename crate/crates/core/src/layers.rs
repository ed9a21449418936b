//! Embedding nonlinearity, BiLSTM encoder, attention pooling and logistic
//! classifier. Each affine map accepts an optional [`Modulator`].

use crate::attribute::{effective_weight, extra_bias, Modulator};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamId;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Inverted dropout: kept entries are scaled by `1 / (1 - rate)` so the
/// expected value is unchanged.
pub struct Dropout<'r> {
    rate: f64,
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Dropout<'r> {
    pub fn new(rate: f64, rng: &'r mut ChaCha8Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate, rng })
    }

    pub fn mask(&mut self, n: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.rate);
        (0..n)
            .map(|_| if self.rng.gen::<f64>() < self.rate { 0.0 } else { keep })
            .collect()
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.rate == 0.0 {
            return Ok(x);
        }
        let mask = self.mask(tape.value(x).numel());
        tape.mask_mul(x, mask)
    }
}

fn drop(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// `x W^T + b` for row-stacked inputs, plus any modulator bias.
fn affine_rows(
    tape: &mut Tape,
    x: Var,
    weight: Option<ParamId>,
    bias: ParamId,
    gate: Option<&Modulator>,
) -> Result<Var> {
    let w = weight.map(|id| tape.param(id));
    let w = effective_weight(tape, w, gate)?;
    let wt = tape.transpose(w)?;
    let pre = tape.matmul(x, wt)?;
    let b = tape.param(bias);
    let mut pre = tape.add_row_bias(pre, b)?;
    if let Some(extra) = extra_bias(gate) {
        pre = tape.add_row_bias(pre, extra)?;
    }
    Ok(pre)
}

/// `w_t = tanh(W_emb x'_t + b_emb)`.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingLayer {
    /// `V × E` word vectors.
    pub word_table: ParamId,
    /// `D × E`; absent when replaced by a matrix representation.
    pub weight: Option<ParamId>,
    pub bias: ParamId,
}

impl EmbeddingLayer {
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        gate: Option<&Modulator>,
        dropout: &mut Option<Dropout>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        let table = tape.param(self.word_table);
        let vocab = tape.value(table).rows();
        if let Some(bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of size {vocab}"
            )));
        }
        let x = tape.gather_rows(table, tokens)?;
        let x = drop(tape, x, dropout)?;
        let pre = affine_rows(tape, x, self.weight, self.bias, gate)?;
        Ok(tape.tanh(pre))
    }
}

/// One direction of the encoder. Gate rows are stacked `[g; i; f; o]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmDirection {
    /// `4H × (D + H)`; absent when replaced by a matrix representation.
    pub weight: Option<ParamId>,
    pub bias: ParamId,
    pub hidden: usize,
}

/// One recurrence step. `input` is the precomputed `W_x x_t + b` part of
/// the pre-activation and `recurrent` the `4H × H` block acting on `h`.
///
/// `[g; i; f; o] = [tanh; σ; σ; σ](W [x; h] + b)`, `c' = f∘c + i∘g`,
/// `h' = o∘c'`.
pub fn lstm_step(
    tape: &mut Tape,
    recurrent: Var,
    input: Var,
    h: Var,
    c: Var,
    hidden: usize,
) -> Result<(Var, Var)> {
    let zh = tape.matmul(recurrent, h)?;
    let z = tape.add(input, zh)?;
    let g = tape.slice(z, 0, hidden)?;
    let g = tape.tanh(g);
    let i = tape.slice(z, hidden, hidden)?;
    let i = tape.sigmoid(i);
    let f = tape.slice(z, 2 * hidden, hidden)?;
    let f = tape.sigmoid(f);
    let o = tape.slice(z, 3 * hidden, hidden)?;
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let h = tape.mul(o, c)?;
    Ok((h, c))
}

impl LstmDirection {
    /// Runs over the rows of `inputs` (`n × D`) from zero state, last row
    /// first when `reverse`. Returns `h_t` for each input row, in input order.
    pub fn run(
        &self,
        tape: &mut Tape,
        inputs: Var,
        reverse: bool,
        gate: Option<&Modulator>,
    ) -> Result<Vec<Var>> {
        let zero = tape.input(crate::tensor::Tensor::zeros(&[self.hidden]));
        self.run_from(tape, inputs, reverse, gate, (zero, zero))
    }

    /// [`LstmDirection::run`] starting from the state `(h, c)`.
    pub fn run_from(
        &self,
        tape: &mut Tape,
        inputs: Var,
        reverse: bool,
        gate: Option<&Modulator>,
        state: (Var, Var),
    ) -> Result<Vec<Var>> {
        let w = self.weight.map(|id| tape.param(id));
        let w = effective_weight(tape, w, gate)?;
        let d = tape.value(inputs).cols();
        let w_x = tape.columns(w, 0, d)?;
        let w_h = tape.columns(w, d, self.hidden)?;
        let w_xt = tape.transpose(w_x)?;
        let pre = tape.matmul(inputs, w_xt)?;
        let b = tape.param(self.bias);
        let mut pre = tape.add_row_bias(pre, b)?;
        if let Some(extra) = extra_bias(gate) {
            pre = tape.add_row_bias(pre, extra)?;
        }
        let n = tape.value(inputs).rows();
        let (mut h, mut c) = state;
        let mut out = vec![h; n];
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let x = tape.row(pre, t)?;
            (h, c) = lstm_step(tape, w_h, x, h, c, self.hidden)?;
            out[t] = h;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Encoder {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl Encoder {
    /// Row `t` of the result is `[→h_t; ←h_t]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        words: Var,
        gates: [Option<&Modulator>; 2],
        dropout: &mut Option<Dropout>,
    ) -> Result<Var> {
        let words = drop(tape, words, dropout)?;
        if tape.value(words).rows() == 0 {
            return Err(Error::invalid("empty sequence"));
        }
        let fwd = self.forward.run(tape, words, false, gates[0])?;
        let bwd = self.backward.run(tape, words, true, gates[1])?;
        let joined = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| tape.concat(&[*f, *b]))
            .collect::<Result<Vec<_>>>()?;
        tape.stack_rows(&joined)
    }
}

/// `e_t = tanh(W_att h_t + b_att)`, `a = softmax(v^T e)`, `d = Σ a_t h_t`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionLayer {
    /// `A × 2H`; absent when replaced by a matrix representation.
    pub weight: Option<ParamId>,
    pub bias: ParamId,
    /// `A`, no bias.
    pub context: ParamId,
}

impl AttentionLayer {
    /// Returns `(d, a)`. Positions with `mask[t] == false` get zero weight.
    pub fn forward(
        &self,
        tape: &mut Tape,
        encodings: Var,
        mask: &[bool],
        gate: Option<&Modulator>,
        dropout: &mut Option<Dropout>,
    ) -> Result<(Var, Var)> {
        let n = tape.value(encodings).rows();
        if mask.len() != n {
            return Err(Error::shape("attention mask", &[n], &[mask.len()]));
        }
        if !mask.iter().any(|m| *m) {
            return Err(Error::invalid("attention with every position masked"));
        }
        let x = drop(tape, encodings, dropout)?;
        let pre = affine_rows(tape, x, self.weight, self.bias, gate)?;
        let e = tape.tanh(pre);
        let v = tape.param(self.context);
        let scores = tape.matmul(e, v)?;
        let a = tape.softmax(scores, Some(mask))?;
        let ht = tape.transpose(encodings)?;
        let d = tape.matmul(ht, a)?;
        Ok((d, a))
    }
}

/// `logits = W_cls d + b_cls`.
#[derive(Debug, Clone, Copy)]
pub struct Classifier {
    /// `C × 2H`; absent when replaced by a matrix representation.
    pub weight: Option<ParamId>,
    pub bias: ParamId,
}

impl Classifier {
    pub fn forward(
        &self,
        tape: &mut Tape,
        document: Var,
        gate: Option<&Modulator>,
        dropout: &mut Option<Dropout>,
    ) -> Result<Var> {
        let d = drop(tape, document, dropout)?;
        let w = self.weight.map(|id| tape.param(id));
        let w = effective_weight(tape, w, gate)?;
        let z = tape.matmul(w, d)?;
        let b = tape.param(self.bias);
        let mut z = tape.add(z, b)?;
        if let Some(extra) = extra_bias(gate) {
            z = tape.add(z, extra)?;
        }
        Ok(z)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
