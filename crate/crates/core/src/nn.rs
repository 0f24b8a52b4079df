//! Dense f64 tensors, a reverse-mode tape, parameter storage, SGD and
//! checkpoints.
//!
//! Every tape value is a matrix; vectors are `1 x n`. Parameters live in a
//! [`ParamStore`] and enter a tape by copy, once per tape.

use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{Cursor, Read};
use std::path::Path;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} with {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::row(vec![v])
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub type ParamId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out (m x n) += a (m x k) * b^T where b is (n x k).
fn matmul_bt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out (k x n) += a^T * c where a is (m x k), c is (m x n).
fn matmul_at_raw(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..m {
        let crow = &c[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &cv) in orow.iter_mut().zip(crow) {
                *o += av * cv;
            }
        }
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

/// Row-wise softmax; entries with `mask[j] == false` get exactly zero.
fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Vec<f64> {
    let (r, c) = x.dims();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row_slice(i);
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let max = (0..c)
            .filter(|&j| keep(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let o = &mut out[i * c..(i + 1) * c];
        let mut z = 0.0;
        for j in 0..c {
            if keep(j) {
                o[j] = (row[j] - max).exp();
                z += o[j];
            }
        }
        for v in o.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Row-wise softmax of a plain slice, without a tape.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_rows(&Tensor::row(logits.to_vec()), None)
}

/// Records operations for one forward pass and runs one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Brings a parameter onto the tape; repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.values[id].clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        Ok(self.param(store, id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims();
        let (k2, n) = self.value(b).dims();
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n, &mut out);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims();
        let (n, k2) = self.value(b).dims();
        if k != k2 {
            return Err(shape_err("matmul_bt", format!("{m}x{k} * ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_raw(&self.value(a).data, &self.value(b).data, m, k, n, &mut out);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).dims(), self.value(b).dims());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        if self.value(row).dims() != (1, c) {
            return Err(shape_err(
                "add_row",
                format!("{r}x{c} + {:?}", self.value(row).dims()),
            ));
        }
        let b = &self.value(row).data;
        let data = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % c])
            .collect();
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x * s).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Scale(a, s))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", format!("cols {} vs {c}", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let r = self.value(first).rows();
        if let Some(p) = parts.iter().find(|&&p| self.value(p).rows() != r) {
            return Err(shape_err(
                "concat_cols",
                format!("rows {} vs {r}", self.value(*p).rows()),
            ));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        if start + len > r || len == 0 {
            return Err(shape_err("slice_rows", format!("{start}+{len} of {r} rows")));
        }
        let data = self.value(a).data[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::matrix(len, c, data)?, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        if start + len > c || len == 0 {
            return Err(shape_err("slice_cols", format!("{start}+{len} of {c} cols")));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        Ok(self.push(Tensor::matrix(r, len, data)?, Op::SliceCols(a, start)))
    }

    /// Gathers rows by index; with a parameter table this is an embedding
    /// lookup whose gradient touches only the selected rows.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims();
        if idx.is_empty() {
            return Err(Error::Empty("select_rows"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(shape_err("select_rows", format!("row {i} of {r}")));
            }
            data.extend_from_slice(self.value(a).row_slice(i));
        }
        Ok(self.push(
            Tensor::matrix(idx.len(), c, data)?,
            Op::SelectRows(a, idx.to_vec()),
        ))
    }

    /// Row-wise layer norm with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims();
        if self.value(gamma).dims() != (1, c) || self.value(beta).dims() != (1, c) {
            return Err(shape_err("layer_norm", format!("input {r}x{c}")));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        for i in 0..r {
            let row = self.value(x).row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let data = softmax_rows(self.value(a), None);
        let shape = self.value(a).shape.clone();
        self.push(Tensor { shape, data }, Op::Softmax(a))
    }

    /// Row-wise softmax over the columns where `mask` is true; masked
    /// columns get exactly zero weight.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let c = self.value(a).cols();
        if mask.len() != c {
            return Err(shape_err("masked_softmax", format!("mask {} vs {c} cols", mask.len())));
        }
        let data = softmax_rows(self.value(a), Some(mask));
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor { shape, data }, Op::Softmax(a)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| gelu(x).0).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|&x| x.max(0.0)).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, data }, Op::Relu(a))
    }

    /// Summed negative log-likelihood of `targets[i]` under row `i`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.value(logits).dims();
        if targets.len() != r {
            return Err(shape_err("cross_entropy", format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(shape_err("cross_entropy", format!("target {t} of {c} classes")));
        }
        let probs = softmax_rows(self.value(logits), None);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = self.value(logits).row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Sum of scalar values.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut it = terms.iter();
        let mut acc = *it.next().ok_or(Error::Empty("add_all"))?;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// `x W + b` for a `1 x n` bias.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.done {
            return Err(Error::BackwardTwice);
        }
        let shape = &self.value(loss).shape;
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        self.done = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let (r, c) = node.value.dims();
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.add(*id, &g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let k = ta.cols();
                    let ga = acc(&mut grads, *a, ta.len());
                    matmul_bt_raw(&g, &tb.data, r, c, k, ga);
                    let gb = acc(&mut grads, *b, tb.len());
                    matmul_at_raw(&ta.data, &g, r, k, c, gb);
                }
                Op::MatMulBt(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let k = ta.cols();
                    let ga = acc(&mut grads, *a, ta.len());
                    matmul_raw(&g, &tb.data, r, c, k, ga);
                    let gb = acc(&mut grads, *b, tb.len());
                    matmul_at_raw(&g, &ta.data, r, c, k, gb);
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        for (x, y) in acc(&mut grads, *v, g.len()).iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                }
                Op::AddRow(a, b) => {
                    for (x, y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += y;
                    }
                    let gb = acc(&mut grads, *b, c);
                    for (k, y) in g.iter().enumerate() {
                        gb[k % c] += y;
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * tb[k];
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * ta[k];
                    }
                }
                Op::Scale(a, s) => {
                    for (x, y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += y * s;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        for (x, y) in acc(&mut grads, *p, len).iter_mut().zip(&g[off..off + len]) {
                            *x += y;
                        }
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let t = &self.nodes[p.0].value;
                        let pc = t.cols();
                        let gp = acc(&mut grads, *p, t.len());
                        for row in 0..r {
                            for j in 0..pc {
                                gp[row * pc + j] += g[row * c + off + j];
                            }
                        }
                        off += pc;
                    }
                }
                Op::SliceRows(a, start) => {
                    let len = self.nodes[a.0].value.len();
                    let ga = acc(&mut grads, *a, len);
                    for (x, y) in ga[start * c..].iter_mut().zip(&g) {
                        *x += y;
                    }
                }
                Op::SliceCols(a, start) => {
                    let t = &self.nodes[a.0].value;
                    let ac = t.cols();
                    let ga = acc(&mut grads, *a, t.len());
                    for row in 0..r {
                        for j in 0..c {
                            ga[row * ac + start + j] += g[row * c + j];
                        }
                    }
                }
                Op::SelectRows(a, idx) => {
                    let len = self.nodes[a.0].value.len();
                    let ga = acc(&mut grads, *a, len);
                    for (row, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[row * c + j];
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.nodes[gamma.0].value.data.clone();
                    {
                        let gg = acc(&mut grads, *gamma, c);
                        for k in 0..g.len() {
                            gg[k % c] += g[k] * xhat[k];
                        }
                    }
                    {
                        let gb = acc(&mut grads, *beta, c);
                        for k in 0..g.len() {
                            gb[k % c] += g[k];
                        }
                    }
                    let gx = acc(&mut grads, *x, g.len());
                    let cf = c as f64;
                    for row in 0..r {
                        let o = row * c;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let d = g[o + j] * gv[j];
                            m1 += d;
                            m2 += d * xhat[o + j];
                        }
                        m1 /= cf;
                        m2 /= cf;
                        for j in 0..c {
                            let d = g[o + j] * gv[j];
                            gx[o + j] += rstd[row] * (d - m1 - xhat[o + j] * m2);
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value.data;
                    let ga = acc(&mut grads, *a, g.len());
                    for row in 0..r {
                        let o = row * c;
                        let dot: f64 = (0..c).map(|j| g[o + j] * y[o + j]).sum();
                        for j in 0..c {
                            ga[o + j] += y[o + j] * (g[o + j] - dot);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let xs = &self.nodes[a.0].value.data;
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * gelu(xs[k]).1;
                    }
                }
                Op::Relu(a) => {
                    let xs = &self.nodes[a.0].value.data;
                    let ga = acc(&mut grads, *a, g.len());
                    for k in 0..g.len() {
                        if xs[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let lc = self.nodes[logits.0].value.cols();
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (row, &t) in targets.iter().enumerate() {
                        for j in 0..lc {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[row * lc + j] += g[0] * (probs[row * lc + j] - onehot);
                        }
                    }
                }
                Op::Sum(a) => {
                    for x in acc(&mut grads, *a, self.nodes[a.0].value.len()).iter_mut() {
                        *x += g[0];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Parameter gradients from one backward pass. Parameters that did not
/// take part have no entry and count as zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    by_param: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    fn add(&mut self, id: ParamId, g: &[f64]) {
        match self.by_param.get_mut(&id) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                self.by_param.insert(id, g.to_vec());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(|v| v.as_slice())
    }

    /// Gradient of `id`, zeros when absent.
    pub fn dense(&self, store: &ParamStore, id: ParamId) -> Vec<f64> {
        self.get(id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; store.values[id].len()])
    }

    pub fn merge(&mut self, other: &Gradients) {
        let mut ids: Vec<&ParamId> = other.by_param.keys().collect();
        ids.sort_unstable();
        for id in ids {
            self.add(*id, &other.by_param[id]);
        }
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_param.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Named, seeded parameter set.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
    grads: Option<Vec<Option<Vec<f64>>>>,
    seed: u64,
    rng: ChaCha8Rng,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
            grads: None,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.names.push(name.to_string());
        self.values.push(value);
        let id = self.values.len() - 1;
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Xavier-uniform initialization drawn from the store's seeded stream.
    pub fn add_xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-a..a)).collect();
        self.add(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn add_const(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.add(name, Tensor::matrix(rows, cols, vec![v; rows * cols])?)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn has_grads(&self) -> bool {
        self.grads.is_some()
    }

    pub fn accumulate(&mut self, g: &Gradients) {
        let n = self.values.len();
        let buf = self.grads.get_or_insert_with(|| vec![None; n]);
        let mut ids: Vec<ParamId> = g.params().collect();
        ids.sort_unstable();
        for id in ids {
            let src = g.get(id).unwrap();
            match &mut buf[id] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(src) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(src.to_vec()),
            }
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.as_ref()?.get(id)?.as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.grads = None;
    }

    /// `p <- p - lr * grad`, then clears gradients.
    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        let grads = self.grads.take().ok_or(Error::MissingGrads)?;
        for (p, g) in self.values.iter_mut().zip(grads) {
            if let Some(g) = g {
                for (v, d) in p.data.iter_mut().zip(g) {
                    *v -= lr * d;
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, meta: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u16::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        out.write_u64::<LittleEndian>(self.seed).unwrap();
        out.write_u32::<LittleEndian>(meta.len() as u32).unwrap();
        out.extend_from_slice(meta.as_bytes());
        out.write_u32::<LittleEndian>(self.values.len() as u32).unwrap();
        for (name, t) in self.names.iter().zip(&self.values) {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u8(t.shape.len() as u8).unwrap();
            for &d in &t.shape {
                out.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for &v in &t.data {
                out.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    /// Returns the parameters and the embedded metadata string.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<(Self, String)> {
        let bad = |w: &str| Error::Checkpoint(w.to_string());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u16::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let seed = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated header"))?;
        let read_string = |r: &mut Cursor<&[u8]>| -> Result<String> {
            let len = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated string"))? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(|_| bad("truncated string"))?;
            String::from_utf8(buf).map_err(|_| bad("string is not utf-8"))
        };
        let meta = read_string(&mut r)?;
        let n = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated count"))?;
        let mut store = ParamStore::new(seed);
        for _ in 0..n {
            let name = read_string(&mut r)?;
            let rank = r.read_u8().map_err(|_| bad("truncated record"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>().map_err(|_| bad("truncated record"))? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.read_f64::<LittleEndian>().map_err(|_| bad("truncated data"))?);
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
            store.add(&name, t).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if r.position() as usize != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok((store, meta))
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_checkpoint(meta))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        Self::from_checkpoint(&std::fs::read(path)?)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Central finite-difference comparison of analytic parameter gradients.
pub mod gradcheck {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Report {
        pub checked: usize,
        pub max_rel_err: f64,
        pub max_abs_err: f64,
    }

    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
    }

    pub const REL_FLOOR: f64 = 1e-6;

    /// Checks up to `per_param` entries of every parameter, chosen by a
    /// seeded sampler (all entries when the tensor is small enough).
    pub fn check<F>(store: &mut ParamStore, eps: f64, per_param: usize, seed: u64, f: F) -> Result<Report>
    where
        F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        let grads = tape.backward(loss)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eval = |store: &ParamStore| -> Result<f64> {
            let mut t = Tape::new();
            let l = f(&mut t, store)?;
            Ok(t.scalar(l))
        };
        let mut report = Report {
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for id in 0..store.len() {
            let analytic = grads.dense(store, id);
            let n = analytic.len();
            let picks: Vec<usize> = if n <= per_param {
                (0..n).collect()
            } else {
                (0..per_param).map(|_| rng.gen_range(0..n)).collect()
            };
            for k in picks {
                let orig = store.values[id].data[k];
                store.values[id].data[k] = orig + eps;
                let up = eval(store)?;
                store.values[id].data[k] = orig - eps;
                let down = eval(store)?;
                store.values[id].data[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[k];
                report.checked += 1;
                report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
                report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric, REL_FLOOR));
            }
        }
        Ok(report)
    }
}
