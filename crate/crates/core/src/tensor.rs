//! Dense `f64` tensors and a reverse-mode tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! creation order, which is already a topological order. [`Tape::backward`]
//! walks that list once in reverse and leaves `dLoss/dLeaf` on every leaf
//! that was created with `requires_grad`.
//!
//! Binary ops accept equal shapes, or operands of equal rank where one side
//! has extent 1 on the last axis and every other axis matches. Nothing else
//! broadcasts.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape")]
    AlreadyBackpropagated,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Length {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::Shape {
                    op: "from_rows",
                    lhs: vec![cols],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data, new shape with the same element count.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Log,
    Max0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand repeats along the last axis of the left.
    Rhs,
    /// Left operand repeats along the last axis of the right.
    Lhs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Binary(Binary, Var, Var, Bcast),
    Unary(Unary, Var),
    Affine { x: Var, scale: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    Reduce { x: Var, kind: Reduction, axis: Option<usize> },
    Dot(Var, Var),
    Norm(Var),
    LocalLinear { x: Var, w: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records a forward computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Splits a shape around `axis` into (outer, extent, inner) block sizes.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    if a == b {
        return Ok((Bcast::Same, a.to_vec()));
    }
    let err = || TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() || a.is_empty() {
        return Err(err());
    }
    let r = a.len() - 1;
    if a[..r] != b[..r] {
        return Err(err());
    }
    match (a[r], b[r]) {
        (_, 1) => Ok((Bcast::Rhs, a.to_vec())),
        (1, _) => Ok((Bcast::Lhs, b.to_vec())),
        _ => Err(err()),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], if the node took part.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a leaf, or zeros when the loss never touched it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                for (o, y) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += x * y;
                }
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let v = &self.nodes[a.0].value.data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (bc, shape) = broadcast(name, self.shape(a), self.shape(b))?;
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let last = shape.last().copied().unwrap_or(1).max(1);
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out: Vec<f64> = (0..n)
            .map(|i| match bc {
                Bcast::Same => f(av[i], bv[i]),
                Bcast::Rhs => f(av[i], bv[i / last]),
                Bcast::Lhs => f(av[i / last], bv[i]),
            })
            .collect();
        if kind == Binary::Div && out.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Domain {
                op: "div",
                msg: "division produced a non-finite value".into(),
            });
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let data: Vec<f64> = match kind {
            Unary::Tanh => x.data.iter().map(|v| v.tanh()).collect(),
            Unary::Sigmoid => x.data.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Max0 => x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Unary::Log => {
                if let Some(bad) = x.data.iter().find(|v| !(**v > 0.0)) {
                    return Err(TensorError::Domain {
                        op: "log",
                        msg: format!("non-positive input {bad}"),
                    });
                }
                x.data.iter().map(|v| v.ln()).collect()
            }
        };
        let value = Tensor::new(x.shape.clone(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Unary(kind, a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    /// Rectifier `max(0, x)`; its subgradient at 0 is 0.
    pub fn max0(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Max0, a)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let data = x.data.iter().map(|v| scale * v + shift).collect();
        let value = Tensor::new(x.shape.clone(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Affine { x: a, scale }, rg))
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    /// Clips into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let data = x.data.iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(x.shape.clone(), data)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Clamp { x: a, lo, hi }, rg))
    }

    /// Softmax along `axis`, computed with the slice maximum subtracted.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        if axis >= x.rank() {
            return Err(TensorError::Axis {
                axis,
                rank: x.rank(),
            });
        }
        let (outer, n, inner) = split_axis(&x.shape, axis);
        let mut out = vec![0.0; x.data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| x.data[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (x.data[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(x.shape.clone(), out)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax { x: a, axis }, rg))
    }

    /// Sum or mean over one axis (removed from the shape) or over everything.
    pub fn reduce(&mut self, a: Var, kind: Reduction, axis: Option<usize>) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let value = match axis {
            None => {
                let s: f64 = x.data.iter().sum();
                match kind {
                    Reduction::Sum => Tensor::scalar(s),
                    Reduction::Mean if x.data.is_empty() => Tensor::scalar(0.0),
                    Reduction::Mean => Tensor::scalar(s / x.data.len() as f64),
                }
            }
            Some(axis) => {
                if axis >= x.rank() {
                    return Err(TensorError::Axis {
                        axis,
                        rank: x.rank(),
                    });
                }
                let (outer, n, inner) = split_axis(&x.shape, axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &x.data[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                if kind == Reduction::Mean && n > 0 {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
                let mut shape = x.shape.clone();
                shape.remove(axis);
                Tensor::new(shape, out)?
            }
        };
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reduce { x: a, kind, axis }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Reduction::Sum, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, Reduction::Mean, None)
    }

    fn check_vector_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sa != sb || sa[0] == 0 {
            return Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_vector_pair("dot", a, b)?;
        let s = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(x, y)| x * y)
            .sum();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), rg))
    }

    /// Euclidean norm of a vector; the gradient at the zero vector is 0.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        self.check_vector_pair("norm", a, a)?;
        let s = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Norm(a), rg))
    }

    /// Returns `(a·b, ‖a‖, ‖b‖)`.
    pub fn dot_and_norm(&mut self, a: Var, b: Var) -> Result<(Var, Var, Var)> {
        let d = self.dot(a, b)?;
        Ok((d, self.norm(a)?, self.norm(b)?))
    }

    /// Row-local dense layer: `y[r] = w[r] · x[r] + b[r]` with a separate
    /// weight block per row. `x: [R, I]`, `w: [R, O, I]`, `b: [R, O]`.
    pub fn local_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = sx.len() == 2
            && sw.len() == 3
            && sb.len() == 2
            && sw[0] == sx[0]
            && sw[2] == sx[1]
            && sb[0] == sx[0]
            && sb[1] == sw[1];
        if !ok {
            return Err(TensorError::Shape {
                op: "local_linear",
                lhs: sx.to_vec(),
                rhs: sw.to_vec(),
            });
        }
        let (rows, o_dim, i_dim) = (sw[0], sw[1], sw[2]);
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = bv.clone();
        for r in 0..rows {
            let xr = &xv[r * i_dim..(r + 1) * i_dim];
            for o in 0..o_dim {
                let wr = &wv[(r * o_dim + o) * i_dim..(r * o_dim + o + 1) * i_dim];
                out[r * o_dim + o] += dot(wr, xr);
            }
        }
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![rows, o_dim], out)?,
            Op::LocalLinear { x, w, b },
            rg,
        ))
    }

    /// Which side of its kink every rectifier and clip input falls on, plus
    /// the smallest distance of any such input to its kink.
    pub fn kink_pattern(&self) -> (Vec<bool>, f64) {
        let mut pattern = Vec::new();
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Unary(Unary::Max0, x) => {
                    for &v in &self.nodes[x.0].value.data {
                        pattern.push(v > 0.0);
                        margin = margin.min(v.abs());
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    for &v in &self.nodes[x.0].value.data {
                        pattern.push(v > lo);
                        pattern.push(v < hi);
                        margin = margin.min((v - lo).abs()).min((v - hi).abs());
                    }
                }
                _ => {}
            }
        }
        (pattern, margin)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar loss. Runs at most once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            match node.op.clone() {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (val(a).shape[0], val(a).shape[1]);
                    let n = val(b).shape[1];
                    if needs(a) {
                        let bv = &val(b).data;
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                ga[i * k + p] = dot(&g[i * n..(i + 1) * n], &bv[p * n..(p + 1) * n]);
                            }
                        }
                        Self::accumulate(&mut grads, a, ga);
                    }
                    if needs(b) {
                        let av = &val(a).data;
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let x = av[i * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += x * y;
                                }
                            }
                        }
                        Self::accumulate(&mut grads, b, gb);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (val(a).shape[0], val(a).shape[1]);
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j * r + i];
                        }
                    }
                    Self::accumulate(&mut grads, a, ga);
                }
                Op::Reshape(a) => Self::accumulate(&mut grads, a, g),
                Op::Binary(kind, a, b, bc) => {
                    let last = node.value.shape.last().copied().unwrap_or(1).max(1);
                    let (av, bv) = (&val(a).data, &val(b).data);
                    let ai = |i: usize| if bc == Bcast::Lhs { i / last } else { i };
                    let bi = |i: usize| if bc == Bcast::Rhs { i / last } else { i };
                    let (mut ga, mut gb) = (vec![0.0; av.len()], vec![0.0; bv.len()]);
                    for (i, gi) in g.iter().enumerate() {
                        let (x, y) = (av[ai(i)], bv[bi(i)]);
                        let (da, db) = match kind {
                            Binary::Add => (1.0, 1.0),
                            Binary::Sub => (1.0, -1.0),
                            Binary::Mul => (y, x),
                            Binary::Div => (1.0 / y, -x / (y * y)),
                        };
                        ga[ai(i)] += gi * da;
                        gb[bi(i)] += gi * db;
                    }
                    if needs(a) {
                        Self::accumulate(&mut grads, a, ga);
                    }
                    if needs(b) {
                        Self::accumulate(&mut grads, b, gb);
                    }
                }
                Op::Unary(kind, a) => {
                    let (x, y) = (&val(a).data, &node.value.data);
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| {
                            gi * match kind {
                                Unary::Tanh => 1.0 - y[i] * y[i],
                                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                Unary::Log => 1.0 / x[i],
                                Unary::Max0 => {
                                    if x[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            }
                        })
                        .collect();
                    Self::accumulate(&mut grads, a, ga);
                }
                Op::Affine { x, scale } => {
                    Self::accumulate(&mut grads, x, g.iter().map(|v| v * scale).collect());
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &val(x).data;
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, &v)| if v > lo && v < hi { *gi } else { 0.0 })
                        .collect();
                    Self::accumulate(&mut grads, x, gx);
                }
                Op::Softmax { x, axis } => {
                    let y = &node.value.data;
                    let (outer, n, inner) = split_axis(&node.value.shape, axis);
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let s: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] = y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                    Self::accumulate(&mut grads, x, gx);
                }
                Op::Reduce { x, kind, axis } => {
                    let shape = &val(x).shape;
                    let total = val(x).data.len();
                    let gx = match axis {
                        None => {
                            let s = match kind {
                                Reduction::Sum => g[0],
                                Reduction::Mean => g[0] / total.max(1) as f64,
                            };
                            vec![s; total]
                        }
                        Some(axis) => {
                            let (outer, n, inner) = split_axis(shape, axis);
                            let scale = match kind {
                                Reduction::Sum => 1.0,
                                Reduction::Mean => 1.0 / n.max(1) as f64,
                            };
                            let mut gx = vec![0.0; total];
                            for o in 0..outer {
                                for j in 0..n {
                                    for i in 0..inner {
                                        gx[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                                    }
                                }
                            }
                            gx
                        }
                    };
                    Self::accumulate(&mut grads, x, gx);
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&val(a).data, &val(b).data);
                    if needs(a) {
                        Self::accumulate(&mut grads, a, bv.iter().map(|v| v * g[0]).collect());
                    }
                    if needs(b) {
                        Self::accumulate(&mut grads, b, av.iter().map(|v| v * g[0]).collect());
                    }
                }
                Op::Norm(a) => {
                    let n = node.value.data[0];
                    let av = &val(a).data;
                    let ga = if n > 0.0 {
                        av.iter().map(|v| g[0] * v / n).collect()
                    } else {
                        vec![0.0; av.len()]
                    };
                    Self::accumulate(&mut grads, a, ga);
                }
                Op::LocalLinear { x, w, b } => {
                    let sw = &val(w).shape;
                    let (rows, o_dim, i_dim) = (sw[0], sw[1], sw[2]);
                    let (xv, wv) = (&val(x).data, &val(w).data);
                    if needs(x) {
                        let mut gx = vec![0.0; rows * i_dim];
                        for r in 0..rows {
                            let gxr = &mut gx[r * i_dim..(r + 1) * i_dim];
                            for o in 0..o_dim {
                                let go = g[r * o_dim + o];
                                if go == 0.0 {
                                    continue;
                                }
                                let wr = &wv[(r * o_dim + o) * i_dim..(r * o_dim + o + 1) * i_dim];
                                for (d, wi) in gxr.iter_mut().zip(wr) {
                                    *d += go * wi;
                                }
                            }
                        }
                        Self::accumulate(&mut grads, x, gx);
                    }
                    if needs(w) {
                        let mut gw = vec![0.0; wv.len()];
                        for r in 0..rows {
                            let xr = &xv[r * i_dim..(r + 1) * i_dim];
                            for o in 0..o_dim {
                                let go = g[r * o_dim + o];
                                if go == 0.0 {
                                    continue;
                                }
                                let start = (r * o_dim + o) * i_dim;
                                for (d, xi) in gw[start..start + i_dim].iter_mut().zip(xr) {
                                    *d = go * xi;
                                }
                            }
                        }
                        Self::accumulate(&mut grads, w, gw);
                    }
                    if needs(b) {
                        Self::accumulate(&mut grads, b, g.clone());
                    }
                }
            }
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                node.grad = Some(Tensor {
                    shape: node.value.shape.clone(),
                    data: g,
                });
            }
        }
        Ok(())
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

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
