//! Compute tape: records forward operations, replays them in reverse.

use std::rc::Rc;

use super::array::DiffArray;
use super::special::{normal_cdf, normal_pdf};
use crate::error::{Error, Result};

/// Sentinel for log(0). Large enough in magnitude to never win a logaddexp,
/// small enough that exp(LOG_ZERO - x) underflows to 0.0 instead of producing
/// NaN. Never exponentiated on the positive side.
pub const LOG_ZERO: f64 = -1.0e30;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Backward rule for an operation the tape does not know natively.
///
/// `backward` receives the upstream gradient of the node's output, the input
/// values, and the node's own output, and returns one gradient buffer per
/// input (`None` for inputs that need none).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        grad_out: &[f64],
        inputs: &[&DiffArray],
        output: &DiffArray,
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    Constant,
    Add(ValueId, ValueId),
    Hadamard(ValueId, ValueId),
    Scale(ValueId, f64),
    AddRow(ValueId, ValueId),
    MulRow(ValueId, ValueId),
    Matmul(ValueId, ValueId),
    MatmulNt(ValueId, ValueId),
    SliceCols {
        input: ValueId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<ValueId>),
    Sigmoid(ValueId),
    Gelu(ValueId),
    LayerNorm {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    SoftmaxRows(ValueId),
    LogSoftmaxRows(ValueId),
    Conv1d {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
    },
    Dropout {
        input: ValueId,
        /// Per-element multiplier: 0.0 for dropped units, 1/(1-p) otherwise.
        mult: Vec<f64>,
    },
    SumAll(ValueId),
    Custom {
        op: Rc<dyn CustomOp>,
        inputs: Vec<ValueId>,
    },
}

struct Node {
    value: DiffArray,
    op: Op,
    needs_grad: bool,
}

/// Wengert list. Forward calls append nodes; [`Tape::backward`] fills the
/// `grad` buffer of every node that influences the root.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &DiffArray {
        &self.nodes[id.0].value
    }

    /// Gradient of the value at `id`, available after [`Tape::backward`].
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Record a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: DiffArray) -> ValueId {
        let value = value.with_requires_grad(true);
        self.push(value, Op::Leaf, true)
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, value: DiffArray) -> ValueId {
        self.push(value, Op::Constant, false)
    }

    fn push(&mut self, value: DiffArray, op: Op, needs_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn needs(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn push_checked(&mut self, value: DiffArray, op: Op, inputs: &[ValueId]) -> Result<ValueId> {
        value.check_finite("operation output")?;
        let needs = self.needs(inputs);
        Ok(self.push(value, op, needs))
    }

    // ── element-wise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = DiffArray::new(av.shape().to_vec(), data)?;
        self.push_checked(value, Op::Add(a, b), &[a, b])
    }

    pub fn hadamard(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "hadamard: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = DiffArray::new(av.shape().to_vec(), data)?;
        self.push_checked(value, Op::Hadamard(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId> {
        let av = self.value(a);
        let data: Vec<f64> = av.data().iter().map(|x| x * factor).collect();
        let value = DiffArray::new(av.shape().to_vec(), data)?;
        self.push_checked(value, Op::Scale(a, factor), &[a])
    }

    /// `a[r, j] + v[j]`, broadcasting the vector over rows.
    pub fn add_row(&mut self, a: ValueId, v: ValueId) -> Result<ValueId> {
        let (av, vv) = (self.value(a), self.value(v));
        let m = av.last_dim();
        if vv.shape() != [m] {
            return Err(Error::Dimension(format!(
                "add_row: width {} vs vector {:?}",
                m,
                vv.shape()
            )));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(m) {
            for (x, y) in row.iter_mut().zip(vv.data()) {
                *x += y;
            }
        }
        let value = DiffArray::new(av.shape().to_vec(), data)?;
        self.push_checked(value, Op::AddRow(a, v), &[a, v])
    }

    /// `a[r, j] * v[j]`, broadcasting the vector over rows.
    pub fn mul_row(&mut self, a: ValueId, v: ValueId) -> Result<ValueId> {
        let (av, vv) = (self.value(a), self.value(v));
        let m = av.last_dim();
        if vv.shape() != [m] {
            return Err(Error::Dimension(format!(
                "mul_row: width {} vs vector {:?}",
                m,
                vv.shape()
            )));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(m) {
            for (x, y) in row.iter_mut().zip(vv.data()) {
                *x *= y;
            }
        }
        let value = DiffArray::new(av.shape().to_vec(), data)?;
        self.push_checked(value, Op::MulRow(a, v), &[a, v])
    }

    // ── matrix products ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(av, "matmul lhs")?;
        let (k2, n) = matrix_dims(bv, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dims {k} vs {k2}"
            )));
        }
        let mut data = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), m, k, n, &mut data);
        let value = DiffArray::new(vec![m, n], data)?;
        self.push_checked(value, Op::Matmul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims(av, "matmul_nt lhs")?;
        let (n, k2) = matrix_dims(bv, "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt: inner dims {k} vs {k2}"
            )));
        }
        let mut data = vec![0.0; m * n];
        matmul_nt_acc(av.data(), bv.data(), m, k, n, &mut data);
        let value = DiffArray::new(vec![m, n], data)?;
        self.push_checked(value, Op::MatmulNt(a, b), &[a, b])
    }

    // ── shape surgery ────────────────────────────────────────────────────

    pub fn slice_cols(&mut self, input: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let xv = self.value(input);
        let (rows, cols) = matrix_dims(xv, "slice_cols")?;
        if start + len > cols {
            return Err(Error::Dimension(format!(
                "slice_cols: {start}..{} out of width {cols}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let value = DiffArray::new(vec![rows, len], data)?;
        self.push_checked(value, Op::SliceCols { input, start, len }, &[input])
    }

    pub fn concat_cols(&mut self, inputs: &[ValueId]) -> Result<ValueId> {
        if inputs.is_empty() {
            return Err(Error::Usage("concat_cols: empty input list".into()));
        }
        let rows = matrix_dims(self.value(inputs[0]), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let (r, c) = matrix_dims(self.value(id), "concat_cols")?;
            if r != rows {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {rows} vs {r}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&id, &c) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(id).data()[r * c..(r + 1) * c]);
            }
        }
        let value = DiffArray::new(vec![rows, total], data)?;
        self.push_checked(value, Op::ConcatCols(inputs.to_vec()), inputs)
    }

    // ── activations ──────────────────────────────────────────────────────

    pub fn sigmoid(&mut self, input: ValueId) -> Result<ValueId> {
        let xv = self.value(input);
        let data: Vec<f64> = xv.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let value = DiffArray::new(xv.shape().to_vec(), data)?;
        self.push_checked(value, Op::Sigmoid(input), &[input])
    }

    /// Exact GELU `x * Phi(x)` with the erf-based normal CDF.
    pub fn gelu(&mut self, input: ValueId) -> Result<ValueId> {
        let xv = self.value(input);
        let data: Vec<f64> = xv.data().iter().map(|&x| x * normal_cdf(x)).collect();
        let value = DiffArray::new(xv.shape().to_vec(), data)?;
        self.push_checked(value, Op::Gelu(input), &[input])
    }

    /// Per-last-axis `(x - mean) / sqrt(var + eps) * gamma + beta` with
    /// population variance.
    pub fn layernorm(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layernorm eps {eps} must be > 0")));
        }
        let (xv, gv, bv) = (self.value(input), self.value(gamma), self.value(beta));
        let m = xv.last_dim();
        if gv.shape() != [m] || bv.shape() != [m] {
            return Err(Error::Dimension(format!(
                "layernorm: width {m} vs gamma {:?} beta {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for (x, (g, b)) in row.iter_mut().zip(gv.data().iter().zip(bv.data())) {
                *x = (*x - mean) * inv_std * g + b;
            }
        }
        let value = DiffArray::new(xv.shape().to_vec(), data)?;
        self.push_checked(
            value,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            },
            &[input, gamma, beta],
        )
    }

    pub fn softmax_rows(&mut self, input: ValueId) -> Result<ValueId> {
        let xv = self.value(input);
        let m = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let value = DiffArray::new(xv.shape().to_vec(), data)?;
        self.push_checked(value, Op::SoftmaxRows(input), &[input])
    }

    /// Log-space softmax over the last axis: `x - logsumexp(x)` per row.
    pub fn log_softmax_rows(&mut self, input: ValueId) -> Result<ValueId> {
        let xv = self.value(input);
        let m = xv.last_dim();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(m) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let value = DiffArray::new(xv.shape().to_vec(), data)?;
        self.push_checked(value, Op::LogSoftmaxRows(input), &[input])
    }

    // ── structured ops ───────────────────────────────────────────────────

    /// 1-D convolution of `input: [T, c_in]` with `weight: [c_out, k, c_in]`
    /// and `bias: [c_out]`, producing `[(T-k)/stride + 1, c_out]`.
    ///
    /// The tap-major weight layout makes each output cell a single dot
    /// product between two contiguous `k * c_in` runs: the input window
    /// starting at the stride offset and one output channel's weight block.
    pub fn conv1d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
        stride: usize,
    ) -> Result<ValueId> {
        if stride == 0 {
            return Err(Error::Parameter("conv1d stride must be >= 1".into()));
        }
        let (xv, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let (t, c_in) = matrix_dims(xv, "conv1d input")?;
        let wshape = wv.shape();
        if wshape.len() != 3 || wshape[2] != c_in {
            return Err(Error::Dimension(format!(
                "conv1d: weight {:?} vs input channels {c_in}",
                wshape
            )));
        }
        let (c_out, k) = (wshape[0], wshape[1]);
        if bv.shape() != [c_out] {
            return Err(Error::Dimension(format!(
                "conv1d: bias {:?} vs {c_out} output channels",
                bv.shape()
            )));
        }
        if t < k {
            return Err(Error::Input(format!(
                "conv1d: input length {t} shorter than kernel {k}"
            )));
        }
        let t_out = (t - k) / stride + 1;
        let window = k * c_in;
        let mut data = Vec::with_capacity(t_out * c_out);
        let (x, w, b) = (xv.data(), wv.data(), bv.data());
        for to in 0..t_out {
            let xwin = &x[to * stride * c_in..to * stride * c_in + window];
            for (co, wblock) in w.chunks_exact(window).enumerate() {
                data.push(b[co] + dot(xwin, wblock));
            }
        }
        let value = DiffArray::new(vec![t_out, c_out], data)?;
        self.push_checked(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
            },
            &[input, weight, bias],
        )
    }

    /// Inverted dropout: surviving units scaled by `1/(1-p)` at train time;
    /// with `training == false` this is the exact identity (the input id is
    /// returned unchanged).
    pub fn dropout(
        &mut self,
        input: ValueId,
        p: f64,
        rng: &mut impl rand::Rng,
        training: bool,
    ) -> Result<ValueId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let xv = self.value(input);
        let keep_scale = 1.0 / (1.0 - p);
        let mult: Vec<f64> = (0..xv.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data: Vec<f64> = xv
            .data()
            .iter()
            .zip(&mult)
            .map(|(x, m)| x * m)
            .collect();
        let value = DiffArray::new(xv.shape().to_vec(), data)?;
        self.push_checked(value, Op::Dropout { input, mult }, &[input])
    }

    pub fn sum_all(&mut self, input: ValueId) -> Result<ValueId> {
        let total: f64 = self.value(input).data().iter().sum();
        let value = DiffArray::scalar(total);
        self.push_checked(value, Op::SumAll(input), &[input])
    }

    /// Record an externally computed operation with its own backward rule.
    pub fn custom(
        &mut self,
        op: Rc<dyn CustomOp>,
        inputs: &[ValueId],
        output: DiffArray,
    ) -> Result<ValueId> {
        output.check_finite(op.name())?;
        let needs = self.needs(inputs);
        Ok(self.push(
            output,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    // ── reverse pass ─────────────────────────────────────────────────────

    /// Accumulate gradients of the scalar at `root` into every node that
    /// requires them. Fails on a non-scalar root.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = grad {
                node.value.set_grad(g);
                node.value.check_grad_finite("gradient")?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let needs = |id: ValueId| self.nodes[id.0].needs_grad;

        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate_slice(grads, *a, g);
                }
                if needs(*b) {
                    accumulate_slice(grads, *b, g);
                }
            }
            Op::Hadamard(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b).data();
                    let contrib: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, contrib);
                }
                if needs(*b) {
                    let av = self.value(*a).data();
                    let contrib: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, contrib);
                }
            }
            Op::Scale(a, factor) => {
                if needs(*a) {
                    let contrib: Vec<f64> = g.iter().map(|x| x * factor).collect();
                    accumulate(grads, *a, contrib);
                }
            }
            Op::AddRow(a, v) => {
                if needs(*a) {
                    accumulate_slice(grads, *a, g);
                }
                if needs(*v) {
                    let m = self.value(*v).numel();
                    let mut contrib = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (c, x) in contrib.iter_mut().zip(row) {
                            *c += x;
                        }
                    }
                    accumulate(grads, *v, contrib);
                }
            }
            Op::MulRow(a, v) => {
                let m = self.value(*v).numel();
                if needs(*a) {
                    let vv = self.value(*v).data();
                    let mut contrib = vec![0.0; g.len()];
                    for (crow, grow) in contrib.chunks_mut(m).zip(g.chunks(m)) {
                        for ((c, x), y) in crow.iter_mut().zip(grow).zip(vv) {
                            *c = x * y;
                        }
                    }
                    accumulate(grads, *a, contrib);
                }
                if needs(*v) {
                    let av = self.value(*a).data();
                    let mut contrib = vec![0.0; m];
                    for (arow, grow) in av.chunks(m).zip(g.chunks(m)) {
                        for ((c, x), y) in contrib.iter_mut().zip(grow).zip(arow) {
                            *c += x * y;
                        }
                    }
                    accumulate(grads, *v, contrib);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = matrix_dims(self.value(*a), "matmul")?;
                let n = self.value(*b).shape()[1];
                if needs(*a) {
                    // da = g · bᵀ
                    let bv = self.value(*b).data();
                    let mut contrib = vec![0.0; m * k];
                    matmul_nt_acc(g, bv, m, n, k, &mut contrib);
                    accumulate(grads, *a, contrib);
                }
                if needs(*b) {
                    // db = aᵀ · g
                    let av = self.value(*a).data();
                    let mut contrib = vec![0.0; k * n];
                    matmul_tn_acc(av, g, m, k, n, &mut contrib);
                    accumulate(grads, *b, contrib);
                }
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = matrix_dims(self.value(*a), "matmul_nt")?;
                let n = self.value(*b).shape()[0];
                if needs(*a) {
                    // da = g · b
                    let bv = self.value(*b).data();
                    let mut contrib = vec![0.0; m * k];
                    matmul_acc(g, bv, m, n, k, &mut contrib);
                    accumulate(grads, *a, contrib);
                }
                if needs(*b) {
                    // db = gᵀ · a
                    let av = self.value(*a).data();
                    let mut contrib = vec![0.0; n * k];
                    matmul_tn_acc(g, av, m, n, k, &mut contrib);
                    accumulate(grads, *b, contrib);
                }
            }
            Op::SliceCols { input, start, len } => {
                if needs(*input) {
                    let (rows, cols) = matrix_dims(self.value(*input), "slice_cols")?;
                    let mut contrib = vec![0.0; rows * cols];
                    for r in 0..rows {
                        contrib[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(grads, *input, contrib);
                }
            }
            Op::ConcatCols(inputs) => {
                let rows = self.value(inputs[0]).shape()[0];
                let total: usize = inputs
                    .iter()
                    .map(|&id| self.value(id).shape()[1])
                    .sum();
                let mut offset = 0;
                for &id in inputs {
                    let c = self.value(id).shape()[1];
                    if needs(id) {
                        let mut contrib = vec![0.0; rows * c];
                        for r in 0..rows {
                            contrib[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(grads, id, contrib);
                    }
                    offset += c;
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let y = self.nodes[i].value.data();
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| gv * yv * (1.0 - yv))
                        .collect();
                    accumulate(grads, *a, contrib);
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let x = self.value(*a).data();
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| gv * (normal_cdf(xv) + xv * normal_pdf(xv)))
                        .collect();
                    accumulate(grads, *a, contrib);
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*input);
                let m = xv.last_dim();
                let gv = self.value(*gamma).data();
                let mut dx = vec![0.0; xv.numel()];
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                for (row_idx, (xrow, grow)) in
                    xv.data().chunks(m).zip(g.chunks(m)).enumerate()
                {
                    let _ = row_idx;
                    let mean = xrow.iter().sum::<f64>() / m as f64;
                    let var =
                        xrow.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> =
                        xrow.iter().map(|x| (x - mean) * inv_std).collect();
                    let u: Vec<f64> = grow.iter().zip(gv).map(|(g, gam)| g * gam).collect();
                    let mean_u = u.iter().sum::<f64>() / m as f64;
                    let mean_ux =
                        u.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    let dxrow = &mut dx[row_idx * m..(row_idx + 1) * m];
                    for j in 0..m {
                        dxrow[j] = (u[j] - mean_u - xhat[j] * mean_ux) * inv_std;
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                if needs(*input) {
                    accumulate(grads, *input, dx);
                }
                if needs(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let y = self.nodes[i].value.data();
                    let m = self.nodes[i].value.last_dim();
                    let mut contrib = vec![0.0; y.len()];
                    for ((crow, yrow), grow) in
                        contrib.chunks_mut(m).zip(y.chunks(m)).zip(g.chunks(m))
                    {
                        let inner: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((c, yv), gv) in crow.iter_mut().zip(yrow).zip(grow) {
                            *c = yv * (gv - inner);
                        }
                    }
                    accumulate(grads, *a, contrib);
                }
            }
            Op::LogSoftmaxRows(a) => {
                if needs(*a) {
                    let y = self.nodes[i].value.data();
                    let m = self.nodes[i].value.last_dim();
                    let mut contrib = vec![0.0; y.len()];
                    for ((crow, yrow), grow) in
                        contrib.chunks_mut(m).zip(y.chunks(m)).zip(g.chunks(m))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((c, yv), gv) in crow.iter_mut().zip(yrow).zip(grow) {
                            *c = gv - yv.exp() * gsum;
                        }
                    }
                    accumulate(grads, *a, contrib);
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
            } => {
                let xv = self.value(*input);
                let wv = self.value(*weight);
                let (t, c_in) = matrix_dims(xv, "conv1d")?;
                let (c_out, k) = (wv.shape()[0], wv.shape()[1]);
                let t_out = (t - k) / stride + 1;
                let window = k * c_in;
                let (x, w) = (xv.data(), wv.data());
                let mut dx = vec![0.0; xv.numel()];
                let mut dw = vec![0.0; wv.numel()];
                let mut db = vec![0.0; c_out];
                for to in 0..t_out {
                    let start = to * stride * c_in;
                    let xwin = &x[start..start + window];
                    let dxwin = &mut dx[start..start + window];
                    for co in 0..c_out {
                        let gv = g[to * c_out + co];
                        db[co] += gv;
                        let wblock = &w[co * window..(co + 1) * window];
                        for (d, &wval) in dxwin.iter_mut().zip(wblock) {
                            *d += gv * wval;
                        }
                        let dwblock = &mut dw[co * window..(co + 1) * window];
                        for (d, &xval) in dwblock.iter_mut().zip(xwin) {
                            *d += gv * xval;
                        }
                    }
                }
                if needs(*input) {
                    accumulate(grads, *input, dx);
                }
                if needs(*weight) {
                    accumulate(grads, *weight, dw);
                }
                if needs(*bias) {
                    accumulate(grads, *bias, db);
                }
            }
            Op::Dropout { input, mult } => {
                if needs(*input) {
                    let contrib: Vec<f64> =
                        g.iter().zip(mult).map(|(gv, m)| gv * m).collect();
                    accumulate(grads, *input, contrib);
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let contrib = vec![g[0]; self.value(*a).numel()];
                    accumulate(grads, *a, contrib);
                }
            }
            Op::Custom { op, inputs } => {
                let input_values: Vec<&DiffArray> =
                    inputs.iter().map(|&id| self.value(id)).collect();
                let contribs = op.backward(g, &input_values, &self.nodes[i].value);
                if contribs.len() != inputs.len() {
                    return Err(Error::Usage(format!(
                        "{}: backward returned {} gradients for {} inputs",
                        op.name(),
                        contribs.len(),
                        inputs.len()
                    )));
                }
                for (&id, contrib) in inputs.iter().zip(contribs) {
                    if let Some(c) = contrib {
                        if needs(id) {
                            accumulate(grads, id, c);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn matrix_dims(a: &DiffArray, context: &str) -> Result<(usize, usize)> {
    match a.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Dimension(format!(
            "{context}: expected 2-D array, got {other:?}"
        ))),
    }
}

/// Dot product accumulated in four independent lanes. A strict
/// left-to-right sum would chain every add through one register; separate
/// lanes let the compiler keep the running sums in SIMD lanes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let split = a.len() - a.len() % 4;
    let mut lanes = [0.0f64; 4];
    for (ca, cb) in a[..split].chunks_exact(4).zip(b[..split].chunks_exact(4)) {
        lanes[0] += ca[0] * cb[0];
        lanes[1] += ca[1] * cb[1];
        lanes[2] += ca[2] * cb[2];
        lanes[3] += ca[3] * cb[3];
    }
    let mut sum = (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        sum += x * y;
    }
    sum
}

/// Fold `contrib` into the gradient slot for `id`, taking ownership so the
/// first (and usually only) contribution is a move instead of a zero-fill
/// plus add.
fn accumulate(grads: &mut [Option<Vec<f64>>], id: ValueId, contrib: Vec<f64>) {
    match &mut grads[id.0] {
        Some(slot) => {
            for (s, c) in slot.iter_mut().zip(&contrib) {
                *s += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// [`accumulate`] for gradients passed through unchanged (the contribution
/// is someone else's buffer, so the first contribution copies it).
fn accumulate_slice(grads: &mut [Option<Vec<f64>>], id: ValueId, contrib: &[f64]) {
    match &mut grads[id.0] {
        Some(slot) => {
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        }
        slot @ None => *slot = Some(contrib.to_vec()),
    }
}

/// `out += a · b` for row-major `a: [m,k]`, `b: [k,n]`.
///
/// The `chunks_exact` structure hands the optimizer fixed-length rows, which
/// eliminates per-element bounds checks in the innermost loop.
fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` for row-major `a: [m,k]`, `b: [n,k]`: every output cell
/// is a dot product of two contiguous rows.
fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
            *o += dot(arow, brow);
        }
    }
}

/// `out += aᵀ · b` for row-major `a: [m,k]`, `b: [m,n]`: row `i` of `a`
/// scales row `i` of `b` into the matching output rows, so both inner loops
/// run over contiguous memory.
fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tape_with(values: &[DiffArray]) -> (Tape, Vec<ValueId>) {
        let mut tape = Tape::new();
        let ids = values.iter().map(|v| tape.leaf(v.clone())).collect();
        (tape, ids)
    }

    #[test]
    fn matmul_identity() {
        let eye = DiffArray::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = DiffArray::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (mut tape, ids) = tape_with(&[eye, a.clone()]);
        let out = tape.matmul(ids[0], ids[1]).unwrap();
        assert_eq!(tape.value(out).data(), a.data());
    }

    #[test]
    fn matmul_row_times_column() {
        let a = DiffArray::matrix(&[vec![1.0, 2.0]]).unwrap();
        let b = DiffArray::matrix(&[vec![3.0], vec![4.0]]).unwrap();
        let (mut tape, ids) = tape_with(&[a, b]);
        let out = tape.matmul(ids[0], ids[1]).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = DiffArray::zeros(vec![2, 3]);
        let b = DiffArray::zeros(vec![2, 3]);
        let (mut tape, ids) = tape_with(&[a, b]);
        assert!(matches!(
            tape.matmul(ids[0], ids[1]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn sigmoid_at_zero_and_saturation() {
        let x = DiffArray::vector(vec![0.0, 50.0]);
        let (mut tape, ids) = tape_with(&[x]);
        let y = tape.sigmoid(ids[0]).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.5);
        // sigmoid(50) saturates to 1.0 in f64 without overflowing on the way.
        assert!(out[1] >= 1.0 - 1e-15 && out[1] <= 1.0);
    }

    #[test]
    fn gelu_endpoints() {
        let x = DiffArray::vector(vec![0.0, -30.0, 30.0, 1.0]);
        let (mut tape, ids) = tape_with(&[x]);
        let y = tape.gelu(ids[0]).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!(out[1].abs() < 1e-12);
        assert!((out[2] - 30.0).abs() < 1e-12);
        // x * Phi(x) at x = 1, against the high-precision erf value.
        assert!((out[3] - 0.841_344_746_068_542_9).abs() < 1e-14);
    }

    #[test]
    fn layernorm_two_points() {
        let x = DiffArray::matrix(&[vec![1.0, 3.0]]).unwrap();
        let gamma = DiffArray::vector(vec![1.0, 1.0]);
        let beta = DiffArray::vector(vec![0.0, 0.0]);
        let (mut tape, ids) = tape_with(&[x, gamma, beta]);
        let y = tape.layernorm(ids[0], ids[1], ids[2], 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-6);
        assert!((out[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_zero_input_maps_to_beta() {
        let x = DiffArray::zeros(vec![2, 3]);
        let gamma = DiffArray::vector(vec![1.0; 3]);
        let beta = DiffArray::vector(vec![0.0; 3]);
        let (mut tape, ids) = tape_with(&[x, gamma, beta]);
        let y = tape.layernorm(ids[0], ids[1], ids[2], 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv1d_length_formula() {
        let x = DiffArray::zeros(vec![5, 1]);
        let w = DiffArray::zeros(vec![2, 3, 1]);
        let b = DiffArray::zeros(vec![2]);
        let (mut tape, ids) = tape_with(&[x, w, b]);
        let y = tape.conv1d(ids[0], ids[1], ids[2], 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2]);
    }

    #[test]
    fn dropout_inference_is_identity() {
        let x = DiffArray::vector(vec![1.0, -2.0, 3.0]);
        let (mut tape, ids) = tape_with(&[x.clone()]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = tape.dropout(ids[0], 0.5, &mut rng, false).unwrap();
        assert_eq!(y, ids[0]);
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn dropout_fixed_rng_reproducible() {
        let x = DiffArray::vector((0..64).map(|i| i as f64).collect());
        let run = || {
            let (mut tape, ids) = tape_with(&[x.clone()]);
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let y = tape.dropout(ids[0], 0.3, &mut rng, true).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_rejects_bad_p() {
        let x = DiffArray::vector(vec![1.0]);
        let (mut tape, ids) = tape_with(&[x]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            tape.dropout(ids[0], 1.0, &mut rng, true),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn log_softmax_rows_normalized() {
        let x = DiffArray::matrix(&[vec![0.5, -1.0, 2.0], vec![100.0, 100.0, 100.0]]).unwrap();
        let (mut tape, ids) = tape_with(&[x]);
        let y = tape.log_softmax_rows(ids[0]).unwrap();
        for row in tape.value(y).data().chunks(3) {
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let x = DiffArray::vector(vec![1.0, 2.0]);
        let (mut tape, ids) = tape_with(&[x]);
        assert!(matches!(tape.backward(ids[0]), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_deterministic() {
        let run = || {
            let a = DiffArray::matrix(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap();
            let b = DiffArray::matrix(&[vec![1.5, 0.2], vec![-0.4, 0.9]]).unwrap();
            let (mut tape, ids) = tape_with(&[a, b]);
            let c = tape.matmul(ids[0], ids[1]).unwrap();
            let s = tape.sigmoid(c).unwrap();
            let root = tape.sum_all(s).unwrap();
            tape.backward(root).unwrap();
            (
                tape.grad(ids[0]).unwrap().to_vec(),
                tape.grad(ids[1]).unwrap().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reused_value_accumulates_once_per_use() {
        // y = x + x  =>  dy/dx = 2 exactly.
        let x = DiffArray::vector(vec![3.0]);
        let (mut tape, ids) = tape_with(&[x]);
        let y = tape.add(ids[0], ids[0]).unwrap();
        let root = tape.sum_all(y).unwrap();
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(ids[0]).unwrap(), &[2.0]);
    }
}
