//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] is rebuilt for every training example. Nodes are appended in
//! evaluation order, so the tape is topologically sorted by construction and
//! [`Graph::backward`] is a single reverse sweep.
//!
//! Tensors are 1-D (`[n]`) or 2-D (`[rows, cols]`) and row-major. Scalars are
//! `[1]`. Row vectors used by the recurrent layers are `[1, n]`.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Shape-carrying array of 64-bit reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Domain(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim("tensor", &shape, &[values.len()]));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Rows when viewed as a matrix; a 1-D tensor is a single row.
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

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.values[0]
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations accepted by [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// Matrix plus a row vector repeated over every row.
    AddRow(Var, Var),
    LogSumExp(Var, Option<usize>),
    Sum(Var),
    Row(Var, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Unfold(Var, usize),
    MaxRows(Var, Vec<usize>),
    Gather(Var, Vec<usize>),
    /// Scalar output whose local gradients were computed eagerly.
    Fused(Vec<(Var, Vec<f64>)>),
    /// LSTM cell on pre-activations `z` (gate order i, f, g, o) and cell
    /// state `c`; keeps the activated gates for the backward pass.
    LstmCell(Var, Var, Vec<f64>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::LstmCell(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::LogSumExp(a, _)
            | Op::Sum(a)
            | Op::Row(a, _)
            | Op::SliceCols(a, _, _)
            | Op::Unfold(a, _)
            | Op::MaxRows(a, _)
            | Op::Gather(a, _) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Fused(parts) => parts.iter().map(|(v, _)| *v).collect(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.by_node.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Domain("log_sum_exp over an empty axis".into()));
    }
    Ok(lse(xs))
}

#[inline]
pub(crate) fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dynamic computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf => value.requires_grad,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    /// Binds a named parameter as a differentiable leaf. Binding the same
    /// parameter twice returns the first node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .position(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if let Some(&v) = self.bound.get(&idx) {
            return Ok(v);
        }
        let t = store.tensors[idx].clone().with_requires_grad(true);
        let v = self.leaf(t);
        self.bound.insert(idx, v);
        Ok(v)
    }

    /// Gradients for every parameter in `store`, zero where unbound.
    pub fn param_grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.bound
                    .get(&i)
                    .and_then(|&v| grads.get(v))
                    .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
            })
            .collect()
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.shape[1] != tb.shape[0] {
            return Err(Error::dim("matmul", &ta.shape, &tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.values[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.values[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a), self.val(b));
        if !ta.is_matrix() || !tb.is_matrix() || ta.shape[1] != tb.shape[1] {
            return Err(Error::dim("matmul_nt", &ta.shape, &tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.values[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &tb.values[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMulNt(a, b)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        let values = if ta.shape == tb.shape {
            ta.values.iter().zip(&tb.values).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.numel() == 1 {
            let y = tb.values[0];
            ta.values.iter().map(|&x| f(x, y)).collect()
        } else if ta.numel() == 1 {
            let x = ta.values[0];
            tb.values.iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(Error::dim(name, &ta.shape, &tb.shape));
        };
        let shape = if ta.numel() >= tb.numel() { ta.shape.clone() } else { tb.shape.clone() };
        Tensor::new(shape, values)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.val(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            values: ta.values.iter().map(|&x| x * c).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::Scale(a, c))
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64) -> Tensor {
        let ta = self.val(a);
        Tensor {
            shape: ta.shape.clone(),
            values: ta.values.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a))
    }

    /// Dispatches one of the elementwise operations. Unary operations take
    /// exactly one input; binary ones exactly two.
    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        match (op, inputs) {
            (Elementwise::Add, &[a, b]) => self.add(a, b),
            (Elementwise::Mul, &[a, b]) => self.mul(a, b),
            (Elementwise::Sigmoid, &[a]) => Ok(self.sigmoid(a)),
            (Elementwise::Tanh, &[a]) => Ok(self.tanh(a)),
            (Elementwise::Relu, &[a]) => Ok(self.relu(a)),
            _ => Err(Error::Contract(format!(
                "{op:?} called with {} inputs",
                inputs.len()
            ))),
        }
    }

    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (self.val(m), self.val(row));
        let c = tm.cols();
        if tr.numel() != c {
            return Err(Error::dim("add_row", &tm.shape, &tr.shape));
        }
        let values = tm
            .values
            .chunks(c)
            .flat_map(|r| r.iter().zip(&tr.values).map(|(&x, &y)| x + y))
            .collect();
        let t = Tensor::new(tm.shape.clone(), values)?;
        Ok(self.push(t, Op::AddRow(m, row)))
    }

    /// `ln Σ exp` over the whole tensor (`axis = None`) or along one axis of a
    /// matrix. Reducing axis 0 yields `[1, cols]`; axis 1 yields `[rows, 1]`.
    pub fn log_sum_exp(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let ta = self.val(a);
        let t = match axis {
            None => Tensor::scalar(lse(&ta.values)),
            Some(0) if ta.is_matrix() => {
                let (r, c) = (ta.shape[0], ta.shape[1]);
                let mut col = vec![0.0; r];
                let values = (0..c)
                    .map(|j| {
                        for (i, x) in col.iter_mut().enumerate() {
                            *x = ta.values[i * c + j];
                        }
                        lse(&col)
                    })
                    .collect();
                Tensor::matrix(1, c, values)?
            }
            Some(1) if ta.is_matrix() => {
                let values = ta.values.chunks(ta.shape[1]).map(lse).collect();
                Tensor::matrix(ta.shape[0], 1, values)?
            }
            Some(ax) => {
                return Err(Error::Domain(format!(
                    "axis {ax} out of range for shape {:?}",
                    ta.shape
                )))
            }
        };
        Ok(self.push(t, Op::LogSumExp(a, axis)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).values.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Row `r` of a matrix as a `[1, cols]` tensor.
    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        let ta = self.val(a);
        if r >= ta.rows() {
            return Err(Error::Domain(format!("row {r} of {:?}", ta.shape)));
        }
        let t = Tensor::matrix(1, ta.cols(), ta.row(r).to_vec())?;
        Ok(self.push(t, Op::Row(a, r)))
    }

    /// One LSTM cell update. `z: 1×4h` holds the gate pre-activations in
    /// order i, f, g, o and `c: 1×h` the previous cell state. Returns
    /// `1×2h` laid out as `[h' | c']` with `c' = σ(f)⊙c + σ(i)⊙tanh(g)` and
    /// `h' = σ(o)⊙tanh(c')`.
    pub fn lstm_cell(&mut self, z: Var, c: Var) -> Result<Var> {
        let (tz, tc) = (self.val(z), self.val(c));
        let h = tc.numel();
        if tz.numel() != 4 * h || tz.rows() != 1 || tc.rows() != 1 {
            return Err(Error::dim("lstm_cell", &tz.shape, &tc.shape));
        }
        let zv = &tz.values;
        let mut gates = Vec::with_capacity(4 * h);
        gates.extend(zv[..2 * h].iter().map(|&x| sigmoid(x)));
        gates.extend(zv[2 * h..3 * h].iter().map(|&x| x.tanh()));
        gates.extend(zv[3 * h..].iter().map(|&x| sigmoid(x)));
        let mut out = vec![0.0; 2 * h];
        for j in 0..h {
            let cn = gates[h + j] * tc.values[j] + gates[j] * gates[2 * h + j];
            out[h + j] = cn;
            out[j] = gates[3 * h + j] * cn.tanh();
        }
        let t = Tensor::matrix(1, 2 * h, out)?;
        Ok(self.push(t, Op::LstmCell(z, c, gates)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.val(a);
        let c = ta.cols();
        if start >= end || end > c {
            return Err(Error::Domain(format!(
                "column slice {start}..{end} of {:?}",
                ta.shape
            )));
        }
        let values = ta.values.chunks(c).flat_map(|r| r[start..end].iter().copied()).collect();
        let t = Tensor::matrix(ta.rows(), end - start, values)?;
        Ok(self.push(t, Op::SliceCols(a, start, end)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.val(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|&&p| self.val(p).rows() != rows) {
            return Err(Error::dim("concat_cols", &self.val(parts[0]).shape, &self.val(*bad).shape));
        }
        let total: usize = parts.iter().map(|&p| self.val(p).cols()).sum();
        let mut values = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                values.extend_from_slice(self.val(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, values)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.val(parts[0]).cols();
        if let Some(bad) = parts.iter().find(|&&p| self.val(p).cols() != cols) {
            return Err(Error::dim("concat_rows", &self.val(parts[0]).shape, &self.val(*bad).shape));
        }
        let mut values = Vec::new();
        let mut rows = 0;
        for &p in parts {
            values.extend_from_slice(&self.val(p).values);
            rows += self.val(p).rows();
        }
        let t = Tensor::matrix(rows, cols, values)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Sliding windows of `width` consecutive rows, each flattened into one
    /// output row: `T×c → (T−width+1)×(width·c)`.
    pub fn unfold(&mut self, a: Var, width: usize) -> Result<Var> {
        let ta = self.val(a);
        let (t, c) = (ta.rows(), ta.cols());
        if width == 0 || width > t {
            return Err(Error::Domain(format!("window {width} over {t} rows")));
        }
        let n = t - width + 1;
        let mut values = Vec::with_capacity(n * width * c);
        for r in 0..n {
            values.extend_from_slice(&ta.values[r * c..(r + width) * c]);
        }
        let out = Tensor::matrix(n, width * c, values)?;
        Ok(self.push(out, Op::Unfold(a, width)))
    }

    /// Column-wise maximum over rows, `T×c → 1×c`. Ties go to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.val(a);
        let c = ta.cols();
        let mut arg = vec![0usize; c];
        let mut best = ta.row(0).to_vec();
        for r in 1..ta.rows() {
            for (j, &x) in ta.row(r).iter().enumerate() {
                if x > best[j] {
                    best[j] = x;
                    arg[j] = r;
                }
            }
        }
        let t = Tensor::matrix(1, c, best)?;
        Ok(self.push(t, Op::MaxRows(a, arg)))
    }

    /// Picks entries by flat row-major index into a 1-D tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.val(a);
        if indices.is_empty() {
            return Err(Error::Domain("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.numel()) {
            return Err(Error::Domain(format!("gather index {bad} of {:?}", ta.shape)));
        }
        let values = indices.iter().map(|&i| ta.values[i]).collect();
        let t = Tensor::new(vec![indices.len()], values)?;
        Ok(self.push(t, Op::Gather(a, indices.to_vec())))
    }

    /// Records a scalar-valued operation whose gradients with respect to its
    /// inputs are already known.
    pub fn fused_scalar(&mut self, value: f64, parts: Vec<(Var, Vec<f64>)>) -> Result<Var> {
        for (v, g) in &parts {
            if g.len() != self.val(*v).numel() {
                return Err(Error::dim("fused_scalar", &self.val(*v).shape, &[g.len()]));
            }
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused(parts)))
    }

    /// Reverse sweep from a scalar `loss`. Leaves that require gradients get
    /// their `grad` field filled (zeros when the loss does not depend on
    /// them).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.val(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(up) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &up, &mut grads);
            grads[idx] = Some(up);
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                let g = grads[idx]
                    .get_or_insert_with(|| vec![0.0; node.value.numel()])
                    .clone();
                node.value.grad = Some(g);
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn propagate(&self, idx: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let g = self.slot(grads, *a);
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            g[i * k + p] += dot(urow, &tb.values[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let g = self.slot(grads, *b);
                    for i in 0..m {
                        let urow = &up[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.values[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (gv, &u) in g[p * n..(p + 1) * n].iter_mut().zip(urow) {
                                *gv += av * u;
                            }
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                if self.wants(*a) {
                    // dA = dC · B
                    let g = self.slot(grads, *a);
                    for i in 0..m {
                        let grow = &mut g[i * k..(i + 1) * k];
                        for j in 0..n {
                            let u = up[i * n + j];
                            if u == 0.0 {
                                continue;
                            }
                            for (gv, &bv) in grow.iter_mut().zip(&tb.values[j * k..(j + 1) * k]) {
                                *gv += u * bv;
                            }
                        }
                    }
                }
                if self.wants(*b) {
                    // dB = dCᵀ · A
                    let g = self.slot(grads, *b);
                    for i in 0..m {
                        let arow = &ta.values[i * k..(i + 1) * k];
                        for j in 0..n {
                            let u = up[i * n + j];
                            if u == 0.0 {
                                continue;
                            }
                            for (gv, &av) in g[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                *gv += u * av;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate_broadcast(grads, *a, up, |_| 1.0);
                self.accumulate_broadcast(grads, *b, up, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate_broadcast(grads, *a, up, |_| 1.0);
                self.accumulate_broadcast(grads, *b, up, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let pick = |t: &Tensor, i: usize| if t.numel() == 1 { t.values[0] } else { t.values[i] };
                self.accumulate_broadcast(grads, *a, up, |i| pick(tb, i));
                self.accumulate_broadcast(grads, *b, up, |i| pick(ta, i));
            }
            Op::Scale(a, c) => {
                let g = self.slot(grads, *a);
                for (gv, &u) in g.iter_mut().zip(up) {
                    *gv += c * u;
                }
            }
            Op::Sigmoid(a) => {
                let g = self.slot(grads, *a);
                for ((gv, &u), &y) in g.iter_mut().zip(up).zip(&out.values) {
                    *gv += u * y * (1.0 - y);
                }
            }
            Op::LstmCell(z, c, gates) => {
                let h = gates.len() / 4;
                let (gi, gf, gg, go) = (&gates[..h], &gates[h..2 * h], &gates[2 * h..3 * h], &gates[3 * h..]);
                let cn = &out.values[h..];
                let mut dcn = vec![0.0; h];
                let mut dz = vec![0.0; 4 * h];
                for j in 0..h {
                    let tc = cn[j].tanh();
                    dcn[j] = up[h + j] + up[j] * go[j] * (1.0 - tc * tc);
                    dz[3 * h + j] = up[j] * tc * go[j] * (1.0 - go[j]);
                }
                let cprev = &self.val(*c).values;
                for j in 0..h {
                    dz[j] = dcn[j] * gg[j] * gi[j] * (1.0 - gi[j]);
                    dz[h + j] = dcn[j] * cprev[j] * gf[j] * (1.0 - gf[j]);
                    dz[2 * h + j] = dcn[j] * gi[j] * (1.0 - gg[j] * gg[j]);
                }
                if self.wants(*z) {
                    for (gv, d) in self.slot(grads, *z).iter_mut().zip(&dz) {
                        *gv += d;
                    }
                }
                if self.wants(*c) {
                    for (j, gv) in self.slot(grads, *c).iter_mut().enumerate() {
                        *gv += dcn[j] * gf[j];
                    }
                }
            }
            Op::Tanh(a) => {
                let g = self.slot(grads, *a);
                for ((gv, &u), &y) in g.iter_mut().zip(up).zip(&out.values) {
                    *gv += u * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let x = &self.val(*a).values;
                let g = self.slot(grads, *a);
                for ((gv, &u), &xv) in g.iter_mut().zip(up).zip(x) {
                    if xv > 0.0 {
                        *gv += u;
                    }
                }
            }
            Op::AddRow(m, row) => {
                if self.wants(*m) {
                    let g = self.slot(grads, *m);
                    for (gv, &u) in g.iter_mut().zip(up) {
                        *gv += u;
                    }
                }
                if self.wants(*row) {
                    let c = out.cols();
                    let g = self.slot(grads, *row);
                    for urow in up.chunks(c) {
                        for (gv, &u) in g.iter_mut().zip(urow) {
                            *gv += u;
                        }
                    }
                }
            }
            Op::LogSumExp(a, axis) => {
                let ta = self.val(*a);
                let g = self.slot(grads, *a);
                match axis {
                    None => {
                        let y = out.values[0];
                        for (gv, &x) in g.iter_mut().zip(&ta.values) {
                            *gv += up[0] * (x - y).exp();
                        }
                    }
                    Some(0) => {
                        let c = ta.shape[1];
                        for (i, &x) in ta.values.iter().enumerate() {
                            let j = i % c;
                            g[i] += up[j] * (x - out.values[j]).exp();
                        }
                    }
                    Some(_) => {
                        let c = ta.shape[1];
                        for (i, &x) in ta.values.iter().enumerate() {
                            let r = i / c;
                            g[i] += up[r] * (x - out.values[r]).exp();
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let g = self.slot(grads, *a);
                for gv in g.iter_mut() {
                    *gv += up[0];
                }
            }
            Op::Row(a, r) => {
                let c = out.cols();
                let g = self.slot(grads, *a);
                for (gv, &u) in g[r * c..(r + 1) * c].iter_mut().zip(up) {
                    *gv += u;
                }
            }
            Op::SliceCols(a, start, end) => {
                let c = self.val(*a).cols();
                let w = end - start;
                let g = self.slot(grads, *a);
                for (r, urow) in up.chunks(w).enumerate() {
                    for (gv, &u) in g[r * c + start..r * c + end].iter_mut().zip(urow) {
                        *gv += u;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.val(p).cols();
                    if self.wants(p) {
                        let g = self.slot(grads, p);
                        for (r, urow) in up.chunks(total).enumerate() {
                            for (gv, &u) in g[r * c..(r + 1) * c].iter_mut().zip(&urow[offset..offset + c]) {
                                *gv += u;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).numel();
                    if self.wants(p) {
                        let g = self.slot(grads, p);
                        for (gv, &u) in g.iter_mut().zip(&up[offset..offset + n]) {
                            *gv += u;
                        }
                    }
                    offset += n;
                }
            }
            Op::Unfold(a, width) => {
                let c = self.val(*a).cols();
                let span = width * c;
                let g = self.slot(grads, *a);
                for (r, urow) in up.chunks(span).enumerate() {
                    for (gv, &u) in g[r * c..r * c + span].iter_mut().zip(urow) {
                        *gv += u;
                    }
                }
            }
            Op::MaxRows(a, arg) => {
                let c = out.cols();
                let g = self.slot(grads, *a);
                for (j, &r) in arg.iter().enumerate() {
                    g[r * c + j] += up[j];
                }
            }
            Op::Gather(a, indices) => {
                let g = self.slot(grads, *a);
                for (&i, &u) in indices.iter().zip(up) {
                    g[i] += u;
                }
            }
            Op::Fused(parts) => {
                for (v, local) in parts {
                    if self.wants(*v) {
                        let g = self.slot(grads, *v);
                        for (gv, &l) in g.iter_mut().zip(local) {
                            *gv += up[0] * l;
                        }
                    }
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    /// Adds `up[i] * local(i)` into the gradient of `v`, summing over the
    /// broadcast dimension when `v` is a scalar operand.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<f64>>],
        v: Var,
        up: &[f64],
        local: impl Fn(usize) -> f64,
    ) {
        if !self.wants(v) {
            return;
        }
        let scalar = self.nodes[v.0].value.numel() == 1 && up.len() > 1;
        let g = self.slot(grads, v);
        if scalar {
            g[0] += up.iter().enumerate().map(|(i, &u)| u * local(i)).sum::<f64>();
        } else {
            for (i, (gv, &u)) in g.iter_mut().zip(up).enumerate() {
                *gv += u * local(i);
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.position(&name) {
            Some(i) => self.tensors[i] = t,
            None => {
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// Uniform Glorot initialisation: `U(−r, r)` with `r = √(6/(fan_in+fan_out))`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-r..r)).collect();
    Tensor::new(shape.to_vec(), values).expect("shape matches value count")
}

/// One SGD update after clipping the global gradient norm to `clip`.
/// Returns the pre-clipping norm.
pub fn sgd_step(store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, clip: f64) -> Result<f64> {
    if grads.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    if !(lr > 0.0) || !(clip > 0.0) {
        return Err(Error::Config(format!("lr={lr} and clip={clip} must be positive")));
    }
    let mut sq = 0.0;
    for ((name, t), g) in store.names.iter().zip(&store.tensors).zip(grads) {
        if g.len() != t.numel() {
            return Err(Error::dim("sgd_step", &t.shape, &[g.len()]));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Training {
                param: name.clone(),
                msg: "non-finite gradient".into(),
            });
        }
        sq += g.iter().map(|x| x * x).sum::<f64>();
    }
    let norm = sq.sqrt();
    let factor = if norm > clip { clip / norm } else { 1.0 };
    for (t, g) in store.tensors.iter_mut().zip(grads) {
        for (p, &gv) in t.values.iter_mut().zip(g) {
            *p -= lr * factor * gv;
        }
    }
    Ok(norm)
}
