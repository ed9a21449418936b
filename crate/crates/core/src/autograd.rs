//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation executed through it. Each call returns a
//! [`Var`], a cheap handle to the recorded output. [`Tape::backward`] replays
//! the record in reverse and returns [`Gradients`] for every recorded node and
//! for every parameter leaf.
//!
//! ```
//! use chim::autograd::Tape;
//! use chim::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.input(Tensor::vector(vec![2.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let three_x = tape.scale(x, 3.0);
//! let y = tape.add(sq, three_x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).unwrap(), &[7.0]); // 2x + 3
//! ```
//!
//! Parameters live in a [`ParamStore`] borrowed by the tape; they are never
//! copied onto it, and their gradients are reported by [`ParamId`].

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a small matrix is expanded to a larger one by [`Tape::tile`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileLayout {
    /// `out[i, j] = x[i mod r, j mod s]`: whole copies of `x` side by side.
    #[default]
    Periodic,
    /// `out[i, j] = x[i / c1, j / c2]`: every entry becomes a `c1 × c2` block.
    Block,
}

impl TileLayout {
    /// Source coordinate for output coordinate `(i, j)`.
    #[inline]
    pub fn source(self, i: usize, j: usize, r: usize, s: usize, c1: usize, c2: usize) -> (usize, usize) {
        match self {
            TileLayout::Periodic => (i % r, j % s),
            TileLayout::Block => (i / c1, j / c2),
        }
    }
}

/// Backward rule for [`Tape::custom`]: receives the output gradient and the
/// input values, returns one gradient buffer per input.
pub type CustomBackward = Box<dyn Fn(&[f64], &[&Tensor]) -> Vec<Vec<f64>>>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Tile {
        x: Var,
        c1: usize,
        c2: usize,
        layout: TileLayout,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Row {
        x: Var,
        index: usize,
    },
    Columns {
        x: Var,
        start: usize,
    },
    StackRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    AddRowBias(Var, Var),
    MaskMul {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        gold: usize,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: CustomBackward,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Ordered record of executed operations.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, Var)>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect()
    } else if a.is_scalar() {
        let x = a.item();
        b.data().iter().map(|y| f(x, *y)).collect()
    } else {
        let y = b.item();
        a.data().iter().map(|x| f(*x, y)).collect()
    }
}

/// Reduces a gradient flowing to `target` when it was scalar-broadcast.
fn unbroadcast(target: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if target.numel() == g.len() && (!target.is_scalar() || g.len() == 1) {
        g
    } else {
        vec![g.iter().sum()]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Masked, max-shifted softmax. Masked entries are exactly zero.
pub fn softmax_values(x: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::invalid("softmax over an empty vector"));
    }
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::shape("softmax mask", &[x.len()], &[m.len()]));
        }
    }
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..x.len())
        .filter(|&i| keep(i))
        .map(|i| x[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("softmax with every position masked"));
    }
    let mut out: Vec<f64> = (0..x.len())
        .map(|i| if keep(i) { (x[i] - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Ok(out)
}

/// `C += A · B` for row-major `A: m × k`, `B: k × n` given as
/// `(data, row stride, column stride)`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    c: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    let at = |i: usize, l: usize| a.0[(i as isize * a.1 + l as isize * a.2) as usize];
    let bt = |l: usize, j: usize| b.0[(l as isize * b.1 + j as isize * b.2) as usize];
    if n == 1 {
        for (i, ci) in c.iter_mut().enumerate() {
            *ci += (0..k).map(|l| at(i, l) * bt(l, 0)).sum::<f64>();
        }
        return;
    }
    if k == 1 || m == 1 {
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for l in 0..k {
                let av = at(i, l);
                if av == 0.0 {
                    continue;
                }
                if b.2 == 1 {
                    let start = (l as isize * b.1) as usize;
                    for (cv, bv) in row.iter_mut().zip(&b.0[start..start + n]) {
                        *cv += av * bv;
                    }
                } else {
                    for (j, cv) in row.iter_mut().enumerate() {
                        *cv += av * bt(l, j);
                    }
                }
            }
        }
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a`, `b` and the
    // row-major `m × n` buffer `c`, as checked by the callers' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_acc(m, k, n, (a, k as isize, 1), (b, n as isize, 1), &mut out);
    out
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    /// A tape whose [`Tape::param`] leaves read from `params`.
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .params
                .expect("param node without a store")
                .get(*id),
            _ => unreachable!("node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// A leaf holding `t`. Its gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// The leaf for a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some((_, v)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return *v;
        }
        assert!(self.params.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.push((id, v));
        v
    }

    /// Matrix product. `b` may be a vector, giving a matrix-vector product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape().len() != 2 || bt.shape().is_empty() || bt.shape().len() > 2 {
            return Err(Error::shape("matmul", at.shape(), bt.shape()));
        }
        let (m, k) = (at.shape()[0], at.shape()[1]);
        if bt.shape()[0] != k {
            return Err(Error::shape("matmul", at.shape(), bt.shape()));
        }
        let n = bt.cols();
        let data = matmul_kernel(at.data(), bt.data(), m, k, n);
        let shape: Vec<usize> = if bt.shape().len() == 1 { vec![m] } else { vec![m, n] };
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        if at.shape().len() != 2 {
            return Err(Error::shape("transpose", at.shape(), &[]));
        }
        let (r, c) = (at.shape()[0], at.shape()[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = at.data()[i * c + j];
            }
        }
        let out = Tensor::new(&[c, r], data)?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let shape = same_or_scalar("add", at, bt)?;
        let data = zip_broadcast(at, bt, |x, y| x + y);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let shape = same_or_scalar("sub", at, bt)?;
        let data = zip_broadcast(at, bt, |x, y| x - y);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let shape = same_or_scalar("mul", at, bt)?;
        let data = zip_broadcast(at, bt, |x, y| x * y);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let at = self.value(a);
        let data = at.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(at.shape(), data).expect("same shape");
        self.push(out, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let data = at.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(at.shape(), data).expect("same shape");
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let data = at.data().iter().map(|v| sigmoid(*v)).collect();
        let out = Tensor::new(at.shape(), data).expect("same shape");
        self.push(out, Op::Sigmoid(a))
    }

    /// Softmax over a vector; masked positions (`false`) come out exactly 0.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape().len() != 1 {
            return Err(Error::shape("softmax", xt.shape(), &[]));
        }
        let data = softmax_values(xt.data(), mask)?;
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Expands an `r × s` matrix to `(r·c1) × (s·c2)`.
    pub fn tile(&mut self, x: Var, c1: usize, c2: usize, layout: TileLayout) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape().len() != 2 {
            return Err(Error::shape("tile", xt.shape(), &[]));
        }
        if c1 == 0 || c2 == 0 {
            return Err(Error::invalid("tile factors must be at least 1"));
        }
        let (r, s) = (xt.shape()[0], xt.shape()[1]);
        let (rows, cols) = (r * c1, s * c2);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let (si, sj) = layout.source(i, j, r, s, c1, c2);
                data.push(xt.data()[si * s + sj]);
            }
        }
        let out = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(out, Op::Tile { x, c1, c2, layout }))
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Concatenates vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().len() != 1 {
                return Err(Error::shape("concat", t.shape(), &[]));
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// `x[start .. start + len]` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape().len() != 1 || start + len > xt.numel() {
            return Err(Error::shape("slice", xt.shape(), &[start, len]));
        }
        let out = Tensor::vector(xt.data()[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice { x, start }))
    }

    /// Row `index` of a matrix, as a vector.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape().len() != 2 || index >= xt.shape()[0] {
            return Err(Error::shape("row", xt.shape(), &[index]));
        }
        let out = Tensor::vector(xt.row(index).to_vec());
        Ok(self.push(out, Op::Row { x, index }))
    }

    /// Columns `start .. start + len` of a matrix.
    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.shape().len() != 2 || start + len > xt.cols() {
            return Err(Error::shape("columns", xt.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(xt.rows() * len);
        for r in 0..xt.rows() {
            data.extend_from_slice(&xt.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[xt.rows(), len], data)?;
        Ok(self.push(out, Op::Columns { x, start }))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::invalid("stack of zero rows"))?;
        let width = self.value(*first).numel();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let t = self.value(r);
            if t.shape() != [width] {
                return Err(Error::shape("stack_rows", &[width], t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(&[rows.len(), width], data)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec())))
    }

    /// Selects rows of `table` by index (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::shape("gather_rows", tt.shape(), &[]));
        }
        let mut data = Vec::with_capacity(ids.len() * tt.cols());
        for &i in ids {
            if i >= tt.rows() {
                return Err(Error::invalid(format!(
                    "row id {i} out of range for table with {} rows",
                    tt.rows()
                )));
            }
            data.extend_from_slice(tt.row(i));
        }
        let out = Tensor::new(&[ids.len(), tt.cols()], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Adds the vector `b` to every row of the matrix `x`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(b));
        if xt.shape().len() != 2 || bt.shape() != [xt.cols()] {
            return Err(Error::shape("add_row_bias", xt.shape(), bt.shape()));
        }
        let c = xt.cols();
        let data = xt
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v + bt.data()[k % c])
            .collect();
        let out = Tensor::new(xt.shape(), data)?;
        Ok(self.push(out, Op::AddRowBias(x, b)))
    }

    /// Multiplies by a constant mask (no gradient flows to the mask).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xt = self.value(x);
        if mask.len() != xt.numel() {
            return Err(Error::shape("mask_mul", xt.shape(), &[mask.len()]));
        }
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xt.shape(), data)?;
        Ok(self.push(out, Op::MaskMul { x, mask }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `-log softmax(logits)[gold]`, computed through log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let lt = self.value(logits);
        if lt.shape().len() != 1 {
            return Err(Error::shape("cross_entropy", lt.shape(), &[]));
        }
        if gold >= lt.numel() {
            return Err(Error::invalid(format!(
                "gold class {gold} out of range for {} classes",
                lt.numel()
            )));
        }
        let z = lt.data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - z[gold];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            },
        ))
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: CustomBackward) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.apply_rule(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = Vec::with_capacity(self.param_nodes.len());
        for &(id, v) in &self.param_nodes {
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| vec![0.0; self.value(v).numel()]);
            params.push((id, g));
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn apply_rule(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: Vec<f64>| match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(delta).for_each(|(b, d)| *b += d),
            slot @ None => *slot = Some(delta),
        };
        let out = || self.nodes[idx].value.as_ref().expect("op output");
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = bt.cols();
                // dA = G Bᵀ, dB = Aᵀ G
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                let (ni, ki) = (n as isize, k as isize);
                gemm_acc(m, n, k, (g, ni, 1), (bt.data(), 1, ni), &mut ga);
                gemm_acc(k, m, n, (at.data(), 1, ki), (g, ni, 1), &mut gb);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose(a) => {
                let at = self.value(*a);
                let (r, c) = (at.shape()[0], at.shape()[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, ga);
            }
            Op::Add(a, b) => {
                acc(*a, unbroadcast(self.value(*a), g.to_vec()));
                acc(*b, unbroadcast(self.value(*b), g.to_vec()));
            }
            Op::Sub(a, b) => {
                acc(*a, unbroadcast(self.value(*a), g.to_vec()));
                let neg = g.iter().map(|v| -v).collect();
                acc(*b, unbroadcast(self.value(*b), neg));
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let ga = g
                    .iter()
                    .enumerate()
                    .map(|(k, gv)| gv * if bt.is_scalar() { bt.item() } else { bt.data()[k] })
                    .collect();
                let gb = g
                    .iter()
                    .enumerate()
                    .map(|(k, gv)| gv * if at.is_scalar() { at.item() } else { at.data()[k] })
                    .collect();
                acc(*a, unbroadcast(at, ga));
                acc(*b, unbroadcast(bt, gb));
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::Tanh(a) => {
                let y = out().data();
                acc(*a, g.iter().zip(y).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect());
            }
            Op::Sigmoid(a) => {
                let y = out().data();
                acc(*a, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect());
            }
            Op::Softmax(x) => {
                let y = out().data();
                let dot: f64 = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                acc(*x, g.iter().zip(y).map(|(gv, yv)| yv * (gv - dot)).collect());
            }
            Op::Tile { x, c1, c2, layout } => {
                let xt = self.value(*x);
                let (r, s) = (xt.shape()[0], xt.shape()[1]);
                let cols = s * c2;
                let mut gx = vec![0.0; r * s];
                for i in 0..r * c1 {
                    for j in 0..cols {
                        let (si, sj) = layout.source(i, j, r, s, *c1, *c2);
                        gx[si * s + sj] += g[i * cols + j];
                    }
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    acc(*p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Slice { x, start } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                gx[*start..*start + g.len()].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::Row { x, index } => {
                let xt = self.value(*x);
                let c = xt.cols();
                let mut gx = vec![0.0; xt.numel()];
                gx[index * c..(index + 1) * c].copy_from_slice(g);
                acc(*x, gx);
            }
            Op::Columns { x, start } => {
                let xt = self.value(*x);
                let c = xt.cols();
                let len = g.len() / xt.rows();
                let mut gx = vec![0.0; xt.numel()];
                for r in 0..xt.rows() {
                    gx[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*x, gx);
            }
            Op::StackRows(rows) => {
                let w = g.len() / rows.len();
                for (i, r) in rows.iter().enumerate() {
                    acc(*r, g[i * w..(i + 1) * w].to_vec());
                }
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut gt = vec![0.0; tt.numel()];
                for (k, &i) in ids.iter().enumerate() {
                    for (dst, src) in gt[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *dst += src;
                    }
                }
                acc(*table, gt);
            }
            Op::AddRowBias(x, b) => {
                let c = self.value(*b).numel();
                let mut gb = vec![0.0; c];
                for (k, gv) in g.iter().enumerate() {
                    gb[k % c] += gv;
                }
                acc(*x, g.to_vec());
                acc(*b, gb);
            }
            Op::MaskMul { x, mask } => acc(*x, g.iter().zip(mask).map(|(gv, m)| gv * m).collect()),
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            } => {
                let mut gl: Vec<f64> = probs.iter().map(|p| g[0] * p).collect();
                gl[*gold] -= g[0];
                acc(*logits, gl);
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                for (v, gv) in inputs.iter().zip(rule(g, &vals)) {
                    acc(*v, gv);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value; `None` when
    /// the value does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a parameter placed on the tape.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Central differences of `f` at `x`, independent of any backward rule.
    fn numeric_grad(x: &Tensor, h: f64, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        (0..x.numel())
            .map(|k| {
                let mut plus = x.clone();
                plus.data_mut()[k] += h;
                let mut minus = x.clone();
                minus.data_mut()[k] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], n: &[f64]) -> f64 {
        a.iter()
            .zip(n)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_product() {
        let mut t = Tape::new();
        let i = t.input(Tensor::identity(2));
        let x = t.input(m(&[&[3.0], &[4.0]]));
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0]);
        assert_eq!(t.shape(y), &[2, 1]);

        let a = t.input(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.input(m(&[&[0.0], &[1.0]]));
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.input(Tensor::zeros(&[2, 3]));
        let b = t.input(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_sum_gradient_is_row_sums_of_b() {
        // d/dA sum(A·B)[i,l] = sum_j B[l,j]
        let a0 = m(&[&[0.3, -1.2, 0.5], &[2.0, 0.1, -0.7]]);
        let b0 = m(&[&[1.0, 2.0], &[-0.5, 0.25], &[3.0, -1.0]]);
        let mut t = Tape::new();
        let a = t.input(a0.clone());
        let b = t.input(b0.clone());
        let p = t.matmul(a, b).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        let f = |x: &Tensor| {
            let mut t = Tape::new();
            let a = t.input(x.clone());
            let b = t.input(b0.clone());
            let p = t.matmul(a, b).unwrap();
            t.value(p).sum()
        };
        let numeric = numeric_grad(&a0, 1e-6, &f);
        for (k, v) in g.wrt(a).unwrap().iter().enumerate() {
            assert_abs_diff_eq!(*v, numeric[k], epsilon = 1e-8);
            let row_sum: f64 = b0.row(k % 3).iter().sum();
            assert_abs_diff_eq!(*v, row_sum, epsilon = 1e-12);
        }
    }

    #[test]
    fn activations_at_zero() {
        let mut t = Tape::new();
        let z = t.input(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        let h = t.tanh(z);
        assert_eq!(t.value(s).item(), 0.5);
        assert_eq!(t.value(h).item(), 0.0);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.input(Tensor::zeros(&[2]));
        let b = t.input(Tensor::zeros(&[3]));
        assert!(matches!(t.mul(a, b), Err(Error::Shape { .. })));
        let c = t.input(Tensor::scalar(2.0));
        assert!(t.mul(a, c).is_ok());
    }

    #[test]
    fn mul_backward_is_other_operand() {
        let mut t = Tape::new();
        let a = t.input(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let b = t.input(Tensor::vector(vec![4.0, 3.0, -1.0]));
        let p = t.mul(a, b).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(a).unwrap(), &[4.0, 3.0, -1.0]);
        assert_eq!(g.wrt(b).unwrap(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = t.softmax(x, None).unwrap();
        for v in t.value(y).data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = t.input(Tensor::vector(vec![1000.0, 0.0]));
        let y = t.softmax(x, None).unwrap();
        assert_eq!(t.value(y).data()[0], 1.0);
        assert!(t.value(y).data()[1] < 1e-300);

        let x = t.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = t.softmax(x, Some(&[true, false, true])).unwrap();
        assert_eq!(t.value(y).data()[1], 0.0);
        assert_abs_diff_eq!(t.value(y).sum(), 1.0, epsilon = 1e-12);
        assert!(t.softmax(x, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn tile_examples() {
        let mut t = Tape::new();
        let c = t.input(m(&[&[5.0]]));
        let y = t.tile(c, 2, 2, TileLayout::Periodic).unwrap();
        assert_eq!(t.value(y).data(), &[5.0; 4]);

        let c = t.input(Tensor::zeros(&[20, 20]));
        let y = t.tile(c, 15, 15, TileLayout::Periodic).unwrap();
        assert_eq!(t.shape(y), &[300, 300]);

        let c = t.input(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = t.tile(c, 2, 2, TileLayout::Periodic).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(c).unwrap(), &[4.0; 4]);
    }

    #[test]
    fn tile_layouts_differ() {
        let mut t = Tape::new();
        let c = t.input(m(&[&[1.0, 2.0]]));
        let p = t.tile(c, 1, 2, TileLayout::Periodic).unwrap();
        let b = t.tile(c, 1, 2, TileLayout::Block).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(t.value(b).data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(&[2]));
        assert!(matches!(t.backward(x), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn weight_times_input_gradient_broadcasts_x_per_row() {
        let x0 = vec![0.5, -1.5, 2.0];
        let mut t = Tape::new();
        let w = t.input(Tensor::uniform(&[2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let x = t.input(Tensor::vector(x0.clone()));
        let y = t.matmul(w, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        let gw = g.wrt(w).unwrap();
        assert_eq!(&gw[0..3], x0.as_slice());
        assert_eq!(&gw[3..6], x0.as_slice());
    }

    #[test]
    fn unused_param_gets_zero_grad_and_reuse_sums() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::vector(vec![3.0]), false);
        let unused = store.add("unused", Tensor::vector(vec![1.0, 1.0]), false);
        let mut t = Tape::with_params(&store);
        let x = t.param(used);
        let _ = t.param(unused);
        // f(x) = x² + 3x, f'(3) = 9
        let sq = t.mul(x, x).unwrap();
        let lin = t.scale(x, 3.0);
        let f = t.add(sq, lin).unwrap();
        let loss = t.sum(f);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.param(used).unwrap(), &[9.0]);
        assert_eq!(g.param(unused).unwrap(), &[0.0, 0.0]);
        drop(t);
        store.zero_grads();
        store.accumulate(&g, 1.0);
        assert_eq!(store.get(used).grad().unwrap(), &[9.0]);
        assert_eq!(store.get(unused).grad().unwrap(), &[0.0, 0.0]);
    }

    /// Random 3×4 inputs through every differentiable op, checked against
    /// central differences with h = 1e-5.
    #[test]
    fn every_op_matches_finite_differences() {
        type Build = fn(&mut Tape, Var, Var) -> Var;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |t, a, b| {
                let bt = t.transpose(b).unwrap();
                t.matmul(a, bt).unwrap()
            }),
            ("add", |t, a, b| t.add(a, b).unwrap()),
            ("sub", |t, a, b| t.sub(a, b).unwrap()),
            ("mul", |t, a, b| t.mul(a, b).unwrap()),
            ("scale", |t, a, _| t.scale(a, -1.7)),
            ("tanh", |t, a, _| t.tanh(a)),
            ("sigmoid", |t, a, _| t.sigmoid(a)),
            ("softmax", |t, a, _| {
                let r = t.reshape(a, &[12]).unwrap();
                t.softmax(r, Some(&[true, true, false, true, true, true, true, true, true, false, true, true]))
                    .unwrap()
            }),
            ("tile", |t, a, _| t.tile(a, 2, 3, TileLayout::Periodic).unwrap()),
            ("tile_block", |t, a, _| t.tile(a, 3, 2, TileLayout::Block).unwrap()),
            ("row_stack", |t, a, b| {
                let r0 = t.row(a, 2).unwrap();
                let r1 = t.row(b, 0).unwrap();
                let r2 = t.row(a, 0).unwrap();
                t.stack_rows(&[r0, r1, r2]).unwrap()
            }),
            ("concat_slice", |t, a, b| {
                let r0 = t.row(a, 1).unwrap();
                let r1 = t.row(b, 2).unwrap();
                let c = t.concat(&[r0, r1]).unwrap();
                t.slice(c, 2, 5).unwrap()
            }),
            ("columns", |t, a, _| t.columns(a, 1, 2).unwrap()),
            ("gather", |t, a, _| t.gather_rows(a, &[2, 0, 2, 1]).unwrap()),
            ("row_bias", |t, a, b| {
                let r = t.row(b, 1).unwrap();
                t.add_row_bias(a, r).unwrap()
            }),
            ("mask", |t, a, _| t.mask_mul(a, (0..12).map(|k| (k % 3) as f64 * 0.5).collect()).unwrap()),
            ("cross_entropy", |t, a, b| {
                let ab = t.mul(a, b).unwrap();
                let r = t.row(ab, 1).unwrap();
                t.cross_entropy(r, 2).unwrap()
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, build) in cases {
            let a0 = Tensor::uniform(&[3, 4], 1.0, &mut rng);
            let b0 = Tensor::uniform(&[3, 4], 1.0, &mut rng);
            // weights make the loss sensitive to every output entry
            let eval = |a: &Tensor, b: &Tensor| -> (f64, Option<Gradients>, Var, Var) {
                let mut t = Tape::new();
                let av = t.input(a.clone());
                let bv = t.input(b.clone());
                let out = build(&mut t, av, bv);
                let n = t.value(out).numel();
                let w = t.input(Tensor::new(t.shape(out), (0..n).map(|k| 0.3 + 0.1 * k as f64).collect()).unwrap());
                let wo = t.mul(out, w).unwrap();
                let loss = t.sum(wo);
                let val = t.value(loss).item();
                let g = t.backward(loss).unwrap();
                (val, Some(g), av, bv)
            };
            let (_, g, av, bv) = eval(&a0, &b0);
            let g = g.unwrap();
            let na = numeric_grad(&a0, 1e-5, &|x| eval(x, &b0).0);
            let nb = numeric_grad(&b0, 1e-5, &|x| eval(&a0, x).0);
            let zeros = vec![0.0; 12];
            let ga = g.wrt(av).unwrap_or(&zeros);
            let gb = g.wrt(bv).unwrap_or(&zeros);
            let err = max_rel_err(ga, &na).max(max_rel_err(gb, &nb));
            assert!(err < 1e-6, "{name}: max relative error {err:e}");
        }
    }

    #[test]
    fn custom_rule_is_used() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![1.0, 2.0]));
        let v = t.value(x).clone();
        let y = t.custom(&[x], v, Box::new(|g, _| vec![g.iter().map(|v| 2.0 * v).collect()]));
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 2.0]);
    }
}
