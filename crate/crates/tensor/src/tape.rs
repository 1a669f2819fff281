//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and enough
//! context to apply its backward rule. Nodes are appended in execution
//! order, so the tape is already topologically sorted and `backward` is a
//! single reverse sweep.

use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::linalg::{col2im_3x3, gemm, im2col_3x3};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        cols: Vec<f64>,
    },
    Upsample2x(Var),
    Concat(Vec<Var>),
    Slice0 {
        a: Var,
        offset: usize,
    },
    GroupNorm {
        x: Var,
        groups: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
///
/// A tape borrows the parameter store it reads from; parameter leaves are
/// created lazily and deduplicated, so calling [`Tape::param`] twice with the
/// same id yields the same [`Var`].
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("parameter node without store")
                .get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.needs(*v));
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free input whose gradient is reported by `backward`.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        assert!(self.store.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .ok_or_else(|| shape_err(op, format!("expected 2-D, got {:?}", self.shape(v))))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] . [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new([n, m], out)?, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Broadcast `b[n]` over the rows of `a[m, n]` and add.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_bcast("add_row", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_bcast("mul_row", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::MulRow(a, b), &[a, b]))
    }

    /// Broadcast `b[c]` over everything after the leading axis of `a[c, ...]`.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.col_bcast("add_col", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::AddCol(a, b), &[a, b]))
    }

    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.col_bcast("mul_col", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::MulCol(a, b), &[a, b]))
    }

    fn row_bcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (_, n) = self.dims2(op, a)?;
        if self.value(b).numel() != n {
            return Err(shape_err(
                op,
                format!("{:?} with {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let bv = self.data(b);
        let data = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(x, y)| f(*x, *y)))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    fn col_bcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let lead = *self.shape(a).first().unwrap_or(&0);
        if lead == 0 || self.value(b).numel() != lead {
            return Err(shape_err(
                op,
                format!("{:?} with {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let inner = self.value(a).numel() / lead;
        let bv = self.data(b);
        let data = self
            .data(a)
            .chunks(inner)
            .zip(bv)
            .flat_map(|(row, y)| row.iter().map(|x| f(*x, *y)).collect::<Vec<_>>())
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * sigmoid(x));
        self.push(t, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    // ---- structure ------------------------------------------------------

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?}", s, self.shape(first)),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), parts))
    }

    /// Slice `len` entries of the leading axis starting at `start`.
    pub fn slice0(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(shape_err(
                "slice0",
                format!("[{start}, {}) of {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data(a)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice0 {
                a,
                offset: start * inner,
            },
            &[a],
        ))
    }

    /// Split along the leading axis into pieces of the given sizes.
    pub fn split0(&mut self, a: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let total = *self.shape(a).first().unwrap_or(&0);
        if sizes.iter().sum::<usize>() != total {
            return Err(shape_err(
                "split0",
                format!("sizes {sizes:?} vs leading dim {total}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice0(a, start, s)?);
            start += s;
        }
        Ok(out)
    }

    // ---- convolution ----------------------------------------------------

    /// 3x3 convolution with zero padding 1 over `x[c_in, h, w]` and
    /// `w[c_out, c_in, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (c, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(shape_err("conv2d", format!("input {s:?}"))),
        };
        let o = match self.shape(w) {
            [o, ci, 3, 3] if *ci == c => *o,
            s => {
                return Err(shape_err(
                    "conv2d",
                    format!("weight {s:?} for {c} input channels"),
                ))
            }
        };
        if stride != 1 && stride != 2 {
            return Err(shape_err("conv2d", format!("stride {stride}")));
        }
        let ho = (h - 1) / stride + 1;
        let wo = (wd - 1) / stride + 1;
        let cols = im2col_3x3(self.data(x), c, h, wd, stride);
        let mut out = vec![0.0; o * ho * wo];
        gemm(o, c * 9, ho * wo, self.data(w), false, &cols, false, &mut out, false);
        Ok(self.push(
            Tensor::new([o, ho, wo], out)?,
            Op::Conv2d { x, w, stride, cols },
            &[x, w],
        ))
    }

    /// Nearest-neighbour 2x upsampling of `x[c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(shape_err("upsample2x", format!("{s:?}"))),
        };
        let src = self.data(x);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(Tensor::new([c, 2 * h, 2 * w], out)?, Op::Upsample2x(x), &[x]))
    }

    // ---- normalization --------------------------------------------------

    /// Group normalization without affine terms over `x[c, ...]`.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let c = *self.shape(x).first().unwrap_or(&0);
        if groups == 0 || c % groups != 0 {
            return Err(shape_err(
                "group_norm",
                format!("{groups} groups over {c} channels"),
            ));
        }
        let group_len = self.value(x).numel() / groups;
        let (xhat, inv_std) = normalize_chunks(self.data(x), group_len, eps);
        let t = Tensor::new(self.shape(x).to_vec(), xhat.clone())?;
        Ok(self.push(t, Op::GroupNorm { x, groups, xhat, inv_std }, &[x]))
    }

    /// Normalize each row of `x[m, n]` to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, n) = self.dims2("layer_norm", x)?;
        let (xhat, inv_std) = normalize_chunks(self.data(x), n, eps);
        let t = Tensor::new(self.shape(x).to_vec(), xhat.clone())?;
        Ok(self.push(t, Op::LayerNorm { x, xhat, inv_std }, &[x]))
    }

    /// Row-wise softmax of `a[m, n]`. Columns where `mask` is false get zero
    /// weight. A row with no unmasked column puts all weight on column 0.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (_, n) = self.dims2("softmax", a)?;
        if let Some(m) = mask {
            if m.len() != n {
                return Err(shape_err("softmax", format!("mask {} for {n} columns", m.len())));
            }
        }
        let keep = |j: usize| mask.map_or(true, |m| m[j]);
        let any = (0..n).any(keep);
        let mut out = vec![0.0; self.value(a).numel()];
        for (row, dst) in self.data(a).chunks(n).zip(out.chunks_mut(n)) {
            if !any {
                dst[0] = 1.0;
                continue;
            }
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    dst[j] = (row[j] - max).exp();
                    total += dst[j];
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    // ---- lookup and reductions ------------------------------------------

    /// Gather rows of `table[v, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("embedding", format!("id {bad} >= vocabulary {v}")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let n = self.value(a).numel() as f64;
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    // ---- backward -------------------------------------------------------

    /// Differentiate the scalar `loss` with respect to every recorded input.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(&node.op, Var(idx), &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, op: &Op, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).dims2().unwrap().1;
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, bv, true, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, av, true, g, false, gb, true);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                }
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).numel();
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::MulRow(a, b) => {
                let n = self.value(*b).numel();
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bv[i % n];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % n] += gi * av[i];
                    }
                }
            }
            Op::AddCol(a, b) => {
                let lead = self.value(*b).numel();
                let inner = g.len() / lead;
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (c, row) in g.chunks(inner).enumerate() {
                        gb[c] += row.iter().sum::<f64>();
                    }
                }
            }
            Op::MulCol(a, b) => {
                let lead = self.value(*b).numel();
                let inner = g.len() / lead;
                let (av, bv) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bv[i / inner];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i / inner] += gi * av[i];
                    }
                }
            }
            Op::Conv2d { x, w, stride, cols } => {
                let (c, h, wd) = match self.shape(*x) {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!(),
                };
                let o = self.shape(*w)[0];
                let hw_out = self.value(out).numel() / o;
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(o, hw_out, c * 9, g, false, cols, true, gw, true);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; c * 9 * hw_out];
                    gemm(c * 9, o, hw_out, self.data(*w), true, g, false, &mut dcols, false);
                    let gx = self.acc(grads, *x).unwrap();
                    col2im_3x3(&dcols, gx, c, h, wd, *stride);
                }
            }
            Op::Upsample2x(a) => {
                let (c, h, w) = match self.shape(*a) {
                    [c, h, w] => (*c, *h, *w),
                    _ => unreachable!(),
                };
                if let Some(ga) = self.acc(grads, *a) {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                ga[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(gp) = self.acc(grads, *p) {
                        add_into(gp, &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Slice0 { a, offset } => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(&mut ga[*offset..*offset + g.len()], g);
                }
            }
            Op::GroupNorm {
                x,
                groups,
                xhat,
                inv_std,
            } => {
                let group_len = g.len() / groups;
                if let Some(gx) = self.acc(grads, *x) {
                    normalize_backward(g, xhat, inv_std, group_len, gx);
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let n = self.shape(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    normalize_backward(g, xhat, inv_std, n, gx);
                }
            }
            Op::Relu(a) => {
                let av = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Silu(a) => {
                let av = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let s = sigmoid(av[i]);
                        ga[i] += g[i] * s * (1.0 + av[i] * (1.0 - s));
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = self.data(out);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = self.shape(*a)[1];
                let y = self.data(out);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((yr, gr), dst) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (row, &i) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[i * d..(i + 1) * d], row);
                    }
                }
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).numel() as f64;
                let (av, bv) = (self.data(*a), self.data(*b));
                let scale = 2.0 * g[0] / n;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += scale * (av[i] - bv[i]);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] -= scale * (av[i] - bv[i]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0] / n;
                    }
                }
            }
        }
    }
}

/// Output of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter of `store`; parameters the loss never
    /// touched get zeros.
    pub fn param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for (id, v) in &self.param_vars {
            if let Some(g) = self.wrt(*v) {
                out.get_mut(*id).copy_from_slice(g);
            }
        }
        out
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

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn normalize_chunks(x: &[f64], len: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / len);
    for (src, dst) in x.chunks(len).zip(xhat.chunks_mut(len)) {
        let n = len as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

fn normalize_backward(g: &[f64], xhat: &[f64], inv_std: &[f64], len: usize, gx: &mut [f64]) {
    let n = len as f64;
    for (k, ((gc, xc), dst)) in g
        .chunks(len)
        .zip(xhat.chunks(len))
        .zip(gx.chunks_mut(len))
        .enumerate()
    {
        let mean_g = gc.iter().sum::<f64>() / n;
        let mean_gx = gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>() / n;
        for i in 0..len {
            dst[i] += inv_std[k] * (gc[i] - mean_g - xc[i] * mean_gx);
        }
    }
}
