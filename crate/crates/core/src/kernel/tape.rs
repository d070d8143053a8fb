//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! Every operation appends a record to the [`Tape`]; records are stored in
//! execution order, so a single reverse sweep visits each exactly once.
//! Parameters live in a [`ParamStore`] and are copied onto the tape when
//! bound; their gradients come back through [`Gradients::params`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows = 0,
    Cols = 1,
}

#[derive(Debug, Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryOp {
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    ParamRows(ParamId, Vec<usize>),
    MatMul(usize, usize),
    Binary(BinOp, usize, usize),
    Affine(usize, f64),
    Concat(Vec<usize>, Axis),
    Slice {
        input: usize,
        axis: Axis,
        start: usize,
    },
    GatherRows(usize, Vec<usize>),
    Transpose(usize),
    Unary(UnaryOp, usize),
    Softmax(usize, Axis),
    LogSoftmax(usize, Axis),
    LayerNorm {
        input: usize,
        axis: Axis,
        inv_std: Vec<f64>,
    },
    Dropout(usize, Vec<f64>),
    MeanPool(usize, Axis),
    MinPool {
        input: usize,
        argmin: Vec<usize>,
    },
    Sum(usize),
    Pick(usize, usize),
    BceWithLogits(usize, Vec<f64>),
}

#[derive(Debug)]
struct Record {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient routed back to a parameter.
#[derive(Debug, Clone)]
pub enum ParamGrad {
    Dense(Tensor),
    /// Row-sparse gradient from an embedding lookup.
    Rows { indices: Vec<usize>, rows: Tensor },
}

#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, ParamGrad)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.nodes.get(var.index).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &[(ParamId, ParamGrad)] {
        &self.params
    }
}

/// Lane geometry for reductions along an axis of an `r x c` matrix.
#[derive(Clone, Copy)]
struct Lanes {
    count: usize,
    len: usize,
    lane_step: usize,
    stride: usize,
}

impl Lanes {
    fn new(rows: usize, cols: usize, axis: Axis) -> Self {
        match axis {
            Axis::Cols => Lanes {
                count: rows,
                len: cols,
                lane_step: cols,
                stride: 1,
            },
            Axis::Rows => Lanes {
                count: cols,
                len: rows,
                lane_step: 1,
                stride: cols,
            },
        }
    }

    fn at(&self, lane: usize, k: usize) -> usize {
        lane * self.lane_step + k * self.stride
    }

    fn pooled_shape(&self, axis: Axis) -> Vec<usize> {
        match axis {
            Axis::Cols => vec![self.count, 1],
            Axis::Rows => vec![1, self.count],
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based uniform in [0, 1): the same (seed, stream, index) always
/// produces the same draw.
pub fn counter_uniform(seed: u64, stream: u64, index: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(stream ^ splitmix64(index)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Tape {
    id: u64,
    records: Vec<Record>,
    training: bool,
    seed: u64,
    dropout_calls: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Inference-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            records: Vec::new(),
            training: false,
            seed: 0,
            dropout_calls: 0,
        }
    }

    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            seed,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "var from another tape");
        &self.records[v.index].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2().expect("tape values are matrices")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.records.push(Record {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.records.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.records.len() {
            return Err(Error::Tape(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn rg(&self, i: usize) -> bool {
        self.records[i].requires_grad
    }

    fn normalize_shape(t: Tensor) -> Result<Tensor> {
        let (r, c) = t.dims2()?;
        if t.shape().len() == 2 {
            Ok(t)
        } else {
            Tensor::new(vec![r, c], t.into_data())
        }
    }

    // ---- leaves -------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = Self::normalize_shape(value).expect("matrix leaf");
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = Self::normalize_shape(store.value(id).clone()).expect("matrix parameter");
        self.push(value, Op::Param(id), true)
    }

    /// Embedding lookup: gathers rows of a parameter table without copying
    /// the whole table onto the tape.
    pub fn param_rows(&mut self, store: &ParamStore, id: ParamId, indices: &[usize]) -> Result<Var> {
        let table = store.value(id);
        let (rows, cols) = table.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            if r >= rows {
                return Err(Error::Shape(format!(
                    "row index {r} out of range for table {:?}",
                    table.shape()
                )));
            }
            data.extend_from_slice(table.row_slice(r));
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        Ok(self.push(value, Op::ParamRows(id, indices.to_vec()), true))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.records[ia].value.matmul(&self.records[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.records[ia].value.transpose();
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Transpose(ia), rg))
    }

    fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
        let dim = |x: usize, y: usize| {
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        };
        Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let sa = self.records[ia].value.dims2()?;
        let sb = self.records[ib].value.dims2()?;
        let (r, c) = Self::broadcast_shape(sa, sb).ok_or_else(|| {
            Error::Shape(format!("{op:?} of {}x{} and {}x{}", sa.0, sa.1, sb.0, sb.1))
        })?;
        let av = self.records[ia].value.data();
        let bv = self.records[ib].value.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = av[bidx(sa, i, j)];
                let y = bv[bidx(sb, i, j)];
                out.push(match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                });
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::Binary(op, ia, ib), rg))
    }

    /// Elementwise sum; a dimension of size 1 on either side is expanded.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.records[ia].value.map(|x| scale * x + shift);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Affine(ia, scale), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    // ---- structure ---------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let shapes: Vec<(usize, usize)> = idx
            .iter()
            .map(|&i| self.records[i].value.dims2())
            .collect::<Result<_>>()?;
        let value = match axis {
            Axis::Rows => {
                let cols = shapes[0].1;
                if shapes.iter().any(|s| s.1 != cols) {
                    return Err(Error::Shape(format!("row concat of {shapes:?}")));
                }
                let mut data = Vec::new();
                for &i in &idx {
                    data.extend_from_slice(self.records[i].value.data());
                }
                let rows = shapes.iter().map(|s| s.0).sum();
                Tensor::new(vec![rows, cols], data)?
            }
            Axis::Cols => {
                let rows = shapes[0].0;
                if shapes.iter().any(|s| s.0 != rows) {
                    return Err(Error::Shape(format!("column concat of {shapes:?}")));
                }
                let cols: usize = shapes.iter().map(|s| s.1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &i in &idx {
                        data.extend_from_slice(self.records[i].value.row_slice(r));
                    }
                }
                Tensor::new(vec![rows, cols], data)?
            }
        };
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(value, Op::Concat(idx, axis), rg))
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.records[ia].value.dims2()?;
        let src = &self.records[ia].value;
        let value = match axis {
            Axis::Rows => {
                if start + len > r {
                    return Err(Error::Shape(format!("row slice {start}+{len} of {r}x{c}")));
                }
                Tensor::new(vec![len, c], src.data()[start * c..(start + len) * c].to_vec())?
            }
            Axis::Cols => {
                if start + len > c {
                    return Err(Error::Shape(format!("column slice {start}+{len} of {r}x{c}")));
                }
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&src.row_slice(i)[start..start + len]);
                }
                Tensor::new(vec![r, len], data)?
            }
        };
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Slice { input: ia, axis, start }, rg))
    }

    /// Rows of `a` in the given order (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.records[ia].value.dims2()?;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &k in indices {
            if k >= r {
                return Err(Error::Shape(format!("gather row {k} of {r}x{c}")));
            }
            data.extend_from_slice(self.records[ia].value.row_slice(k));
        }
        let value = Tensor::new(vec![indices.len(), c], data)?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::GatherRows(ia, indices.to_vec()), rg))
    }

    // ---- pointwise ---------------------------------------------------

    fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.records[ia].value.map(|x| match op {
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Gelu => gelu_scalar(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Sigmoid => sigmoid_scalar(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
        });
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Unary(op, ia), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    // ---- normalisation -----------------------------------------------

    fn lanes_of(&self, i: usize, axis: Axis) -> Result<Lanes> {
        let (r, c) = self.records[i].value.dims2()?;
        Ok(Lanes::new(r, c, axis))
    }

    fn softmax_values(x: &[f64], lanes: Lanes, log: bool) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for l in 0..lanes.count {
            let max = (0..lanes.len)
                .map(|k| x[lanes.at(l, k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..lanes.len).map(|k| (x[lanes.at(l, k)] - max).exp()).sum();
            let log_sum = sum.ln();
            for k in 0..lanes.len {
                let p = lanes.at(l, k);
                out[p] = if log {
                    x[p] - max - log_sum
                } else {
                    (x[p] - max).exp() / sum
                };
            }
        }
        out
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let ia = self.check(a)?;
        let lanes = self.lanes_of(ia, axis)?;
        let src = &self.records[ia].value;
        let value = Tensor::new(src.shape().to_vec(), Self::softmax_values(src.data(), lanes, false))?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Softmax(ia, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let ia = self.check(a)?;
        let lanes = self.lanes_of(ia, axis)?;
        let src = &self.records[ia].value;
        let value = Tensor::new(src.shape().to_vec(), Self::softmax_values(src.data(), lanes, true))?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::LogSoftmax(ia, axis), rg))
    }

    /// Standardises each lane along `axis` to zero mean and unit variance
    /// (no affine transform).
    pub fn layer_norm(&mut self, a: Var, axis: Axis, eps: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let lanes = self.lanes_of(ia, axis)?;
        let x = self.records[ia].value.data();
        let mut out = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(lanes.count);
        for l in 0..lanes.count {
            let n = lanes.len as f64;
            let mean = (0..lanes.len).map(|k| x[lanes.at(l, k)]).sum::<f64>() / n;
            let var = (0..lanes.len)
                .map(|k| (x[lanes.at(l, k)] - mean).powi(2))
                .sum::<f64>()
                / n;
            let is = 1.0 / (var + eps).sqrt();
            for k in 0..lanes.len {
                let p = lanes.at(l, k);
                out[p] = (x[p] - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(self.records[ia].value.shape().to_vec(), out)?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::LayerNorm { input: ia, axis, inv_std }, rg))
    }

    /// Inverted dropout. Identity on inference tapes; on training tapes the
    /// mask comes from a counter-based generator keyed by the tape seed and
    /// call index, and is stored so backward reuses it.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        let ia = self.check(a)?;
        if !self.training || rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let stream = self.dropout_calls;
        self.dropout_calls += 1;
        let keep = 1.0 / (1.0 - rate);
        let n = self.records[ia].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|k| {
                if counter_uniform(self.seed, stream, k as u64) < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let src = &self.records[ia].value;
        let data = src.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Dropout(ia, mask), rg))
    }

    // ---- reductions --------------------------------------------------

    /// Mean along `axis`; `Rows` gives a `1 x c` result, `Cols` an `r x 1`.
    pub fn mean_pool(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let ia = self.check(a)?;
        let lanes = self.lanes_of(ia, axis)?;
        if lanes.len == 0 {
            return Err(Error::Shape("mean over an empty axis".into()));
        }
        let x = self.records[ia].value.data();
        let data = (0..lanes.count)
            .map(|l| (0..lanes.len).map(|k| x[lanes.at(l, k)]).sum::<f64>() / lanes.len as f64)
            .collect();
        let value = Tensor::new(lanes.pooled_shape(axis), data)?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::MeanPool(ia, axis), rg))
    }

    /// Minimum along `axis`; ties resolve to the first position.
    pub fn min_pool(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let ia = self.check(a)?;
        let lanes = self.lanes_of(ia, axis)?;
        if lanes.len == 0 {
            return Err(Error::Shape("min over an empty axis".into()));
        }
        let x = self.records[ia].value.data();
        let mut argmin = Vec::with_capacity(lanes.count);
        let mut data = Vec::with_capacity(lanes.count);
        for l in 0..lanes.count {
            let mut best = lanes.at(l, 0);
            for k in 1..lanes.len {
                let p = lanes.at(l, k);
                if x[p] < x[best] {
                    best = p;
                }
            }
            argmin.push(best);
            data.push(x[best]);
        }
        let value = Tensor::new(lanes.pooled_shape(axis), data)?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::MinPool { input: ia, argmin }, rg))
    }

    /// Sum of all entries as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let total = self.records[ia].value.data().iter().sum();
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(total), Op::Sum(ia), rg))
    }

    /// Entry `(row, col)` as a `1 x 1` value.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let (r, c) = self.records[ia].value.dims2()?;
        if row >= r || col >= c {
            return Err(Error::Shape(format!("pick ({row},{col}) of {r}x{c}")));
        }
        let flat = row * c + col;
        let v = self.records[ia].value.data()[flat];
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(v), Op::Pick(ia, flat), rg))
    }

    /// Summed binary cross-entropy of `sigmoid(logits)` against targets in
    /// [0, 1], computed in the numerically stable softplus form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let ia = self.check(logits)?;
        let x = self.records[ia].value.data();
        if x.len() != targets.len() {
            return Err(Error::Shape(format!(
                "{} logits against {} targets",
                x.len(),
                targets.len()
            )));
        }
        let total = x
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(ia);
        Ok(self.push(Tensor::scalar(total), Op::BceWithLogits(ia, targets.to_vec()), rg))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.check(loss)?;
        if self.records[root].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.records[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut params = Vec::new();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let rec = &self.records[i];
            if !rec.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads, &mut params)?;
            grads[i] = Some(g);
        }

        let nodes = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.records[i].requires_grad).map(|g| {
                    Tensor::new(self.records[i].value.shape().to_vec(), g).expect("grad shape")
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            nodes,
            params,
        })
    }

    fn backprop(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        params: &mut Vec<(ParamId, ParamGrad)>,
    ) -> Result<()> {
        let rec = &self.records[i];
        let out_shape = rec.value.dims2()?;
        match &rec.op {
            Op::Leaf => {}
            Op::Param(id) => {
                let t = Tensor::new(rec.value.shape().to_vec(), g.to_vec())?;
                params.push((*id, ParamGrad::Dense(t)));
            }
            Op::ParamRows(id, indices) => {
                let rows = Tensor::new(rec.value.shape().to_vec(), g.to_vec())?;
                params.push((
                    *id,
                    ParamGrad::Rows {
                        indices: indices.clone(),
                        rows,
                    },
                ));
            }
            Op::MatMul(a, b) => {
                let av = &self.records[*a].value;
                let bv = &self.records[*b].value;
                let (n, k) = av.dims2()?;
                let (_, m) = bv.dims2()?;
                if self.rg(*a) {
                    // dA = G B^T
                    let bt = bv.transpose();
                    let mut da = vec![0.0; n * k];
                    matmul_into(g, bt.data(), &mut da, n, m, k);
                    accumulate(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB = A^T G
                    let at = av.transpose();
                    let mut db = vec![0.0; k * m];
                    matmul_into(at.data(), g, &mut db, k, n, m);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Binary(op, a, b) => {
                let (r, c) = out_shape;
                let sa = self.records[*a].value.dims2()?;
                let sb = self.records[*b].value.dims2()?;
                let av = self.records[*a].value.data();
                let bv = self.records[*b].value.data();
                let mut da = self.rg(*a).then(|| vec![0.0; sa.0 * sa.1]);
                let mut db = self.rg(*b).then(|| vec![0.0; sb.0 * sb.1]);
                for p in 0..r {
                    for q in 0..c {
                        let gi = g[p * c + q];
                        let (ka, kb) = (bidx(sa, p, q), bidx(sb, p, q));
                        let (x, y) = (av[ka], bv[kb]);
                        let (ga, gb) = match op {
                            BinOp::Add => (gi, gi),
                            BinOp::Sub => (gi, -gi),
                            BinOp::Mul => (gi * y, gi * x),
                            BinOp::Div => (gi / y, -gi * x / (y * y)),
                        };
                        if let Some(d) = da.as_mut() {
                            d[ka] += ga;
                        }
                        if let Some(d) = db.as_mut() {
                            d[kb] += gb;
                        }
                    }
                }
                if let Some(d) = da {
                    accumulate(grads, *a, &d);
                }
                if let Some(d) = db {
                    accumulate(grads, *b, &d);
                }
            }
            Op::Affine(a, s) => {
                let d: Vec<f64> = g.iter().map(|x| x * s).collect();
                accumulate(grads, *a, &d);
            }
            Op::Concat(inputs, axis) => {
                let (_, c) = out_shape;
                match axis {
                    Axis::Rows => {
                        let mut offset = 0;
                        for &inp in inputs {
                            let n = self.records[inp].value.len();
                            if self.rg(inp) {
                                accumulate(grads, inp, &g[offset..offset + n]);
                            }
                            offset += n;
                        }
                    }
                    Axis::Cols => {
                        let mut col = 0;
                        for &inp in inputs {
                            let (r, w) = self.records[inp].value.dims2()?;
                            if self.rg(inp) {
                                let mut d = Vec::with_capacity(r * w);
                                for row in 0..r {
                                    d.extend_from_slice(&g[row * c + col..row * c + col + w]);
                                }
                                accumulate(grads, inp, &d);
                            }
                            col += w;
                        }
                    }
                }
            }
            Op::Slice { input, axis, start } => {
                let (r, c) = self.records[*input].value.dims2()?;
                let (_, w) = out_shape;
                let mut d = vec![0.0; r * c];
                match axis {
                    Axis::Rows => d[start * c..start * c + g.len()].copy_from_slice(g),
                    Axis::Cols => {
                        for row in 0..r {
                            d[row * c + start..row * c + start + w]
                                .copy_from_slice(&g[row * w..(row + 1) * w]);
                        }
                    }
                }
                accumulate(grads, *input, &d);
            }
            Op::GatherRows(input, indices) => {
                let (r, c) = self.records[*input].value.dims2()?;
                let mut d = vec![0.0; r * c];
                for (k, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        d[src * c + j] += g[k * c + j];
                    }
                }
                accumulate(grads, *input, &d);
            }
            Op::Transpose(input) => {
                let (r, c) = out_shape;
                let gt = Tensor::new(vec![r, c], g.to_vec())?.transpose();
                accumulate(grads, *input, gt.data());
            }
            Op::Unary(op, input) => {
                let x = self.records[*input].value.data();
                let y = rec.value.data();
                let d: Vec<f64> = (0..g.len())
                    .map(|k| {
                        g[k] * match op {
                            UnaryOp::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Gelu => gelu_grad(x[k]),
                            UnaryOp::Tanh => 1.0 - y[k] * y[k],
                            UnaryOp::Sigmoid => y[k] * (1.0 - y[k]),
                            UnaryOp::Exp => y[k],
                            UnaryOp::Log => 1.0 / x[k],
                        }
                    })
                    .collect();
                accumulate(grads, *input, &d);
            }
            Op::Softmax(input, axis) => {
                let lanes = self.lanes_of(*input, *axis)?;
                let y = rec.value.data();
                let mut d = vec![0.0; y.len()];
                for l in 0..lanes.count {
                    let dot: f64 = (0..lanes.len)
                        .map(|k| {
                            let p = lanes.at(l, k);
                            g[p] * y[p]
                        })
                        .sum();
                    for k in 0..lanes.len {
                        let p = lanes.at(l, k);
                        d[p] = y[p] * (g[p] - dot);
                    }
                }
                accumulate(grads, *input, &d);
            }
            Op::LogSoftmax(input, axis) => {
                let lanes = self.lanes_of(*input, *axis)?;
                let y = rec.value.data();
                let mut d = vec![0.0; y.len()];
                for l in 0..lanes.count {
                    let total: f64 = (0..lanes.len).map(|k| g[lanes.at(l, k)]).sum();
                    for k in 0..lanes.len {
                        let p = lanes.at(l, k);
                        d[p] = g[p] - y[p].exp() * total;
                    }
                }
                accumulate(grads, *input, &d);
            }
            Op::LayerNorm {
                input,
                axis,
                inv_std,
            } => {
                let lanes = self.lanes_of(*input, *axis)?;
                let y = rec.value.data();
                let mut d = vec![0.0; y.len()];
                let n = lanes.len as f64;
                for l in 0..lanes.count {
                    let mut mean_g = 0.0;
                    let mut mean_gy = 0.0;
                    for k in 0..lanes.len {
                        let p = lanes.at(l, k);
                        mean_g += g[p];
                        mean_gy += g[p] * y[p];
                    }
                    mean_g /= n;
                    mean_gy /= n;
                    for k in 0..lanes.len {
                        let p = lanes.at(l, k);
                        d[p] = inv_std[l] * (g[p] - mean_g - y[p] * mean_gy);
                    }
                }
                accumulate(grads, *input, &d);
            }
            Op::Dropout(input, mask) => {
                let d: Vec<f64> = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                accumulate(grads, *input, &d);
            }
            Op::MeanPool(input, axis) => {
                let lanes = self.lanes_of(*input, *axis)?;
                let mut d = vec![0.0; self.records[*input].value.len()];
                for l in 0..lanes.count {
                    for k in 0..lanes.len {
                        d[lanes.at(l, k)] = g[l] / lanes.len as f64;
                    }
                }
                accumulate(grads, *input, &d);
            }
            Op::MinPool { input, argmin } => {
                let mut d = vec![0.0; self.records[*input].value.len()];
                for (l, &p) in argmin.iter().enumerate() {
                    d[p] += g[l];
                }
                accumulate(grads, *input, &d);
            }
            Op::Sum(input) => {
                let n = self.records[*input].value.len();
                accumulate(grads, *input, &vec![g[0]; n]);
            }
            Op::Pick(input, flat) => {
                let mut d = vec![0.0; self.records[*input].value.len()];
                d[*flat] = g[0];
                accumulate(grads, *input, &d);
            }
            Op::BceWithLogits(input, targets) => {
                let x = self.records[*input].value.data();
                let d: Vec<f64> = x
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g[0] * (sigmoid_scalar(z) - y))
                    .collect();
                accumulate(grads, *input, &d);
            }
        }
        Ok(())
    }
}

fn bidx(shape: (usize, usize), i: usize, j: usize) -> usize {
    let r = if shape.0 == 1 { 0 } else { i };
    let c = if shape.1 == 1 { 0 } else { j };
    r * shape.1 + c
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, d: &[f64]) {
    match &mut grads[i] {
        Some(buf) => buf.iter_mut().zip(d).for_each(|(b, v)| *b += v),
        slot @ None => *slot = Some(d.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let y = t.softmax(x, Axis::Cols).unwrap();
        for &p in t.value(y).data() {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1.0, -2.0, 0.5, 3.0]));
        let xs = t.affine(x, 1.0, 1000.0).unwrap();
        let a = t.softmax(x, Axis::Cols).unwrap();
        let b = t.softmax(xs, Axis::Cols).unwrap();
        assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-12);
    }

    #[test]
    fn relu_definition() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![-2.0, 3.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let mut t = Tape::new();
        let va = t.constant(Tensor::new(vec![2, 3], a.clone()).unwrap());
        let vb = t.constant(Tensor::new(vec![3, 4], b.clone()).unwrap());
        let c = t.matmul(va, vb).unwrap();
        assert_eq!(t.shape(c), (2, 4));
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * b[k * 4 + j];
                }
                assert!(close(t.value(c).get(i, j), s, 1e-14));
            }
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, c).is_err());
    }

    #[test]
    fn layer_norm_standardises_lanes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 10.0, -1.0, 0.0, 0.5, 7.0]).unwrap());
        let y = t.layer_norm(x, Axis::Cols, 1e-12).unwrap();
        for r in 0..2 {
            let row = t.value(y).row_slice(r).to_vec();
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!(close(var, 1.0, 1e-9));
        }
    }

    #[test]
    fn dropout_is_identity_in_inference() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1.0, 2.0]));
        let y = t.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_mask_is_seeded() {
        let run = |seed| {
            let mut t = Tape::training(seed);
            let x = t.constant(Tensor::filled(&[1, 64], 1.0));
            let y = t.dropout(x, 0.5).unwrap();
            t.value(y).data().to_vec()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
        assert!(run(7).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        // loss = sum(W x) with W: 2x3, x: 3x1 -> dL/dW = 1 x^T
        let x = vec![0.5, -1.0, 2.0];
        let mut t = Tape::new();
        let w = t.leaf(Tensor::new(vec![2, 3], vec![0.1; 6]).unwrap(), true);
        let xv = t.constant(Tensor::column(x.clone()));
        let y = t.matmul(w, xv).unwrap();
        let loss = t.sum(y).unwrap();
        let grads = t.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(gw.get(i, j), x[j]);
            }
        }
    }

    #[test]
    fn softmax_nll_gradient_is_p_minus_onehot() {
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let mut t = Tape::new();
        let z = t.leaf(Tensor::row(logits.clone()), true);
        let lp = t.log_softmax(z, Axis::Cols).unwrap();
        let pick = t.pick(lp, 0, 2).unwrap();
        let loss = t.scale(pick, -1.0).unwrap();
        let grads = t.backward(loss).unwrap();
        let g = grads.get(z).unwrap();
        let max = 2.0;
        let denom: f64 = logits.iter().map(|v| (v - max).exp()).sum();
        for (k, &v) in logits.iter().enumerate() {
            let p = (v - max).exp() / denom;
            let expected = p - if k == 2 { 1.0 } else { 0.0 };
            assert!(close(g.data()[k], expected, 1e-14));
        }
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar_losses() {
        let mut a = Tape::new();
        let b = Tape::new();
        let x = a.leaf(Tensor::row(vec![1.0, 2.0]), true);
        assert!(a.backward(x).is_err());
        let s = a.sum(x).unwrap();
        assert!(b.backward(s).is_err());
    }

    #[test]
    fn broadcast_column_times_matrix() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::column(vec![2.0, 3.0]), true);
        let m = t.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = t.mul(w, m).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 4.0, 9.0, 12.0]);
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(g.get(m).unwrap().data(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn min_pool_routes_gradient_to_argmin() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3, 2], vec![3.0, -1.0, 1.0, 5.0, 2.0, -4.0]).unwrap(), true);
        let m = t.min_pool(x, Axis::Rows).unwrap();
        assert_eq!(t.value(m).data(), &[1.0, -4.0]);
        let s = t.sum(m).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    }
}
