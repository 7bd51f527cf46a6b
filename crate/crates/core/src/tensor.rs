//! Minimal reverse-mode autodiff over 2-D matrices, sized for small
//! transformers. A [`Tape`] records operations on node ids; [`Tape::backward`]
//! accumulates gradients into a flat buffer aligned with a [`ParamStore`] and
//! into per-node buffers for input leaves.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

/// Named parameter tensors in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    data: Vec<f64>,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamStore {
    pub fn new() -> Self {
        Self {
            data: Vec::new(),
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let offset = self.data.len();
        self.data.resize(offset + rows * cols, 0.0);
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            offset,
            rows,
            cols,
        });
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn view(&self, id: ParamId) -> ArrayView2<'_, f64> {
        let e = &self.entries[id.0];
        ArrayView2::from_shape((e.rows, e.cols), &self.data[e.offset..e.offset + e.rows * e.cols])
            .expect("entry shape")
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Overwrites one named tensor.
    pub fn set(&mut self, name: &str, values: &Array2<f64>) {
        let id = self.index[name];
        let e = &self.entries[id];
        assert_eq!((e.rows, e.cols), values.dim(), "shape mismatch for {name}");
        for (i, v) in values.iter().enumerate() {
            self.data[e.offset + i] = *v;
        }
    }

    /// Shape-scaled Gaussian init for weight matrices (std
    /// `gain * sqrt(2 / (rows + cols))`), ones for `*.gain`, zeros for
    /// `*.bias`.
    pub fn init<R: Rng + ?Sized>(&mut self, gain: f64, rng: &mut R) {
        for e in &self.entries {
            let slice = &mut self.data[e.offset..e.offset + e.rows * e.cols];
            if e.name.ends_with(".gain") {
                slice.fill(1.0);
            } else if e.name.ends_with(".bias") {
                slice.fill(0.0);
            } else {
                let std = gain * (2.0 / (e.rows + e.cols) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("std > 0");
                for v in slice.iter_mut() {
                    *v = normal.sample(rng);
                }
            }
        }
    }

    /// Rounds every value through f32 so the on-disk format is lossless.
    pub fn quantize_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the tape's node list, usable to index the gradient vector
    /// returned by [`Tape::backward`].
    pub fn index(&self) -> usize {
        self.0
    }
}

enum Payload {
    Owned(Array2<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param(ParamId),
    /// a [m,k] x b [k,n]
    MatMul(NodeId, NodeId),
    /// a [m,k] x b[n,k]^T
    MatMulTB(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast a [1,n] row over every row of a [m,n] matrix.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
}

struct Node {
    payload: Payload,
    op: Op,
}

/// Records a computation over one sequence; not thread-safe, build one per
/// work item.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
        }
    }

    fn push(&mut self, payload: Payload, op: Op) -> NodeId {
        self.nodes.push(Node { payload, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        match &self.nodes[id.0].payload {
            Payload::Owned(a) => a.view(),
            Payload::Param(p) => self.params.view(*p),
        }
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Payload::Owned(value), Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(Payload::Param(id), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b));
        self.push(Payload::Owned(v), Op::MatMul(a, b))
    }

    /// `a . b^T` without materializing the transpose.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Payload::Owned(v), Op::MatMulTB(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(b);
        self.push(Payload::Owned(v), Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        debug_assert_eq!(r.nrows(), 1);
        let v = &self.value(a) + &r.row(0);
        self.push(Payload::Owned(v), Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x * c);
        self.push(Payload::Owned(v), Op::Scale(a, c))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.to_owned();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            row.mapv_inplace(|z| (z - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|z| z / sum);
        }
        self.push(Payload::Owned(v), Op::SoftmaxRows(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(Payload::Owned(v), Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let input = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = input.to_owned();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(Payload::Owned(out), Op::LayerNorm { x, gain, bias })
    }

    pub fn slice_rows(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let v = self.value(a).slice(s![from..to, ..]).to_owned();
        self.push(Payload::Owned(v), Op::SliceRows(a, from, to))
    }

    pub fn slice_cols(&mut self, a: NodeId, from: usize, to: usize) -> NodeId {
        let v = self.value(a).slice(s![.., from..to]).to_owned();
        self.push(Payload::Owned(v), Op::SliceCols(a, from, to))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ndarray::concatenate(ndarray::Axis(1), &views).expect("column concat");
        self.push(Payload::Owned(v), Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = ndarray::concatenate(ndarray::Axis(0), &views).expect("row concat");
        self.push(Payload::Owned(v), Op::ConcatRows(parts.to_vec()))
    }

    /// Convenience: `x . w + bias_row`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, bias)
    }

    /// Backpropagates `seed` (the gradient at `root`) into `param_grads`
    /// (aligned with the parameter store) and returns per-node gradients so
    /// callers can read input-leaf gradients.
    pub fn backward(
        &self,
        root: NodeId,
        seed: Array2<f64>,
        param_grads: &mut [f64],
    ) -> Vec<Option<Array2<f64>>> {
        assert_eq!(param_grads.len(), self.params.len());
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(grad);
                }
                Op::Param(pid) => {
                    let e = &self.params.entries()[pid.0];
                    let target = &mut param_grads[e.offset..e.offset + e.rows * e.cols];
                    for (t, g) in target.iter_mut().zip(grad.iter()) {
                        *t += g;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = grad.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&grad);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulTB(a, b) => {
                    // c = a b^T: da = g b; db = g^T a.
                    let da = grad.dot(&self.value(*b));
                    let db = grad.t().dot(&self.value(*a));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    accumulate(&mut grads, *b, grad);
                }
                Op::AddRow(a, row) => {
                    let row_grad = grad
                        .sum_axis(ndarray::Axis(0))
                        .insert_axis(ndarray::Axis(0));
                    accumulate(&mut grads, *a, grad);
                    accumulate(&mut grads, *row, row_grad);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, grad.mapv(|g| g * c));
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value_owned(i);
                    let mut dx = grad;
                    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot: f64 = drow
                            .iter()
                            .zip(yrow.iter())
                            .map(|(d, y)| d * y)
                            .sum();
                        for (d, y) in drow.iter_mut().zip(yrow.iter()) {
                            *d = y * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut dx = grad;
                    for (d, xv) in dx.iter_mut().zip(x.iter()) {
                        *d *= gelu_grad(*xv);
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let input = self.value(*x);
                    let g = self.value(*gain);
                    let cols = input.ncols() as f64;
                    let mut dx = Array2::zeros(input.raw_dim());
                    let mut dgain = Array2::zeros((1, input.ncols()));
                    let mut dbias = Array2::zeros((1, input.ncols()));
                    for (r, row) in input.rows().into_iter().enumerate() {
                        let mean = row.sum() / cols;
                        let var = row.fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / cols;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let mut sum_dy_g = 0.0;
                        let mut sum_dy_g_xhat = 0.0;
                        for j in 0..input.ncols() {
                            let xhat = (row[j] - mean) * inv;
                            let dy = grad[[r, j]];
                            let dyg = dy * g[[0, j]];
                            sum_dy_g += dyg;
                            sum_dy_g_xhat += dyg * xhat;
                            dgain[[0, j]] += dy * xhat;
                            dbias[[0, j]] += dy;
                        }
                        for j in 0..input.ncols() {
                            let xhat = (row[j] - mean) * inv;
                            let dyg = grad[[r, j]] * g[[0, j]];
                            dx[[r, j]] =
                                inv * (dyg - sum_dy_g / cols - xhat * sum_dy_g_xhat / cols);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gain, dgain);
                    accumulate(&mut grads, *bias, dbias);
                }
                Op::SliceRows(a, from, _to) => {
                    let full = self.value(*a);
                    let mut da = Array2::zeros(full.raw_dim());
                    da.slice_mut(s![*from..*from + grad.nrows(), ..])
                        .assign(&grad);
                    accumulate(&mut grads, *a, da);
                }
                Op::SliceCols(a, from, _to) => {
                    let full = self.value(*a);
                    let mut da = Array2::zeros(full.raw_dim());
                    da.slice_mut(s![.., *from..*from + grad.ncols()])
                        .assign(&grad);
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let dp = grad.slice(s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, *p, dp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        let dp = grad.slice(s![offset..offset + h, ..]).to_owned();
                        accumulate(&mut grads, *p, dp);
                        offset += h;
                    }
                }
            }
        }
        grads
    }

    fn value_owned(&self, i: usize) -> Array2<f64> {
        match &self.nodes[i].payload {
            Payload::Owned(a) => a.clone(),
            Payload::Param(p) => self.params.view(*p).to_owned(),
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, add: Array2<f64>) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &add,
        slot => *slot = Some(add),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Adam with optional cosine-annealed step size, operating on a flat
/// parameter buffer.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Cosine-annealed step size with a short linear warmup. Reaches zero at
/// `total` steps.
pub fn cosine_schedule(base_lr: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return base_lr;
    }
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup.max(1) as f64;
    }
    let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
}
