//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node whose
//! parents already exist, so node order is a topological order and the
//! backward sweep is a single reverse pass over the tape. Nodes that do not
//! depend on a trainable leaf are never visited by the sweep.

use crate::error::{invalid, mismatch, Error, Result};
use crate::tensor::{self as t, ConvGeometry, Tensor};
use crate::wavelet::{self, half_len, WaveletFilters};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Powf(Var, f64),
    Exp(Var),
    Abs(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geo: ConvGeometry },
    Softmax(Var, usize),
    Dwt1d(Var),
    Idwt1d(Var),
    Dwt2d(Var),
    Idwt2d(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Powf(a, _)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::Sigmoid(a)
            | Op::Silu(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Softmax(a, _)
            | Op::Dwt1d(a)
            | Op::Idwt1d(a)
            | Op::Dwt2d(a)
            | Op::Idwt2d(a) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
            Op::Concat(vs, _) => vs.clone(),
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when `v` does not
    /// influence the root through any trainable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materialises zeros for untouched nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether `v` is `root` or one of its ancestors on the tape.
    pub fn reaches(&self, root: Var, v: Var) -> bool {
        if v.0 > root.0 {
            return false;
        }
        let mut live = vec![false; root.0 + 1];
        live[root.0] = true;
        for i in (v.0..=root.0).rev() {
            if !live[i] {
                continue;
            }
            if i == v.0 {
                return true;
            }
            for p in self.nodes[i].op.parents() {
                live[p.0] = true;
            }
        }
        false
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, parents: &[Var]) -> Result<Var> {
        let value = value.check_finite(op)?;
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = t::add(self.value(a), self.value(b))?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = t::sub(self.value(a), self.value(b))?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = t::mul(self.value(a), self.value(b))?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = t::zip_with("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.push("div", v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push("add_scalar", v, Op::Offset(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x.powf(p));
        self.push("powf", v, Op::Powf(a, p), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.push("abs", v, Op::Abs(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push("silu", v, Op::Silu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push("relu", v, Op::Relu(a), &[a])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = t::sum_axis(self.value(a), axis, true)?;
        self.push("sum_axis", v, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = self.shape(a).get(axis).copied().unwrap_or(1) as f64;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n)
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = t::permute(self.value(a), axes)?;
        self.push("permute", v, Op::Permute(a, axes.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.value(a).ndim() != 2 {
            return Err(invalid("transpose", format!("expected rank 2, got {:?}", self.shape(a))));
        }
        self.permute(a, &[1, 0])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = t::concat(&vals, axis)?;
        self.push("concat", v, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = t::slice(self.value(a), axis, start, len)?;
        self.push("slice", v, Op::Slice { input: a, axis, start }, &[a])
    }

    // ---- linear algebra / nn --------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = t::matmul(self.value(a), self.value(b))?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// `x · W + b` with `x: (N, in)` or `(in)`, `W: (in, out)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let vector = self.value(x).ndim() == 1;
        let x2 = if vector {
            let n = self.shape(x)[0];
            self.reshape(x, &[1, n])?
        } else {
            x
        };
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        if vector {
            let n = self.shape(y)[1];
            y = self.reshape(y, &[n])?;
        }
        Ok(y)
    }

    /// Cross-correlation of `(C,H,W)` with `(O, C/groups, KH, KW)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let geo = ConvGeometry::resolve(self.shape(input), self.shape(weight), stride, padding, groups)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.out_channels] {
                return Err(mismatch("conv2d bias", self.shape(b), &[geo.out_channels]));
            }
        }
        let v = t::conv2d_forward(&geo, self.value(input), self.value(weight), bias.map(|b| self.value(b)));
        let mut parents = vec![input, weight];
        parents.extend(bias);
        self.push("conv2d", v, Op::Conv2d { input, weight, bias, geo }, &parents)
    }

    /// 1-D cross-correlation of `(C,L)` with `(O, C, K)`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 2 || ws.len() != 3 {
            return Err(mismatch("conv1d", &xs, &ws));
        }
        let x = self.reshape(input, &[xs[0], 1, xs[1]])?;
        let w = self.reshape(weight, &[ws[0], ws[1], 1, ws[2]])?;
        let y = self.conv2d(x, w, bias, (1, stride), (0, padding), 1)?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[2]])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = t::softmax(self.value(a), axis)?;
        self.push("softmax", v, Op::Softmax(a, axis), &[a])
    }

    /// Normalises `(C, …)` over each of `groups` contiguous channel groups,
    /// then applies per-channel `gamma`/`beta` of shape `(C)`.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        if groups == 0 || c % groups != 0 {
            return Err(invalid("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if eps <= 0.0 {
            return Err(invalid("group_norm", "eps must be positive"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("group_norm affine", self.shape(gamma), &[c]));
        }
        let per = self.value(x).len() / groups;
        let g = self.reshape(x, &[groups, per])?;
        let mu = self.mean_axis(g, 1)?;
        let centered = self.sub(g, mu)?;
        let sq = self.square(centered)?;
        let var = self.mean_axis(sq, 1)?;
        let var = self.add_scalar(var, eps)?;
        let inv = self.powf(var, -0.5)?;
        let normed = self.mul(centered, inv)?;
        let normed = self.reshape(normed, &shape)?;
        let mut affine_shape = vec![1; shape.len()];
        affine_shape[0] = c;
        let gam = self.reshape(gamma, &affine_shape)?;
        let bet = self.reshape(beta, &affine_shape)?;
        let y = self.mul(normed, gam)?;
        self.add(y, bet)
    }

    /// Normalises each row of `(N, D)` and applies `(D)` affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let mu = self.mean_axis(x, 1)?;
        let centered = self.sub(x, mu)?;
        let sq = self.square(centered)?;
        let var = self.mean_axis(sq, 1)?;
        let var = self.add_scalar(var, eps)?;
        let inv = self.powf(var, -0.5)?;
        let normed = self.mul(centered, inv)?;
        let y = self.mul(normed, gamma)?;
        self.add(y, beta)
    }

    /// `(C,H,W) → (C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(invalid("global_avg_pool", format!("expected (C, …), got {s:?}")));
        }
        let rest = s[1..].iter().product();
        let flat = self.reshape(x, &[s[0], rest])?;
        let m = self.mean_axis(flat, 1)?;
        self.reshape(m, &[s[0]])
    }

    /// Mean over one spatial `axis` of `(C,H,W)`, kept with size 1.
    pub fn directional_avg_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        if self.value(x).ndim() != 3 || !(1..=2).contains(&axis) {
            return Err(invalid(
                "directional_avg_pool",
                format!("axis {axis} on {:?}; expected (C,H,W) and axis 1 or 2", self.shape(x)),
            ));
        }
        self.mean_axis(x, axis)
    }

    // ---- wavelets -------------------------------------------------------

    /// Single-level Haar analysis along the last axis of `(R, L)`,
    /// returning stacked `(2, R, ⌈L/2⌉)` as `[cA, cD]`.
    pub fn dwt1d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] < 2 {
            return Err(invalid("dwt1d", format!("expected (rows, L ≥ 2), got {s:?}")));
        }
        let (r, n) = (s[0], s[1]);
        let h = half_len(n);
        let mut out = vec![0.0; 2 * r * h];
        let (a, d) = out.split_at_mut(r * h);
        let xv = self.value(x).data();
        for row in 0..r {
            wavelet::analysis(&WaveletFilters::HAAR, xv, row * n, 1, n, a, d, row * h, 1);
        }
        let v = Tensor::new(&[2, r, h], out)?;
        self.push("dwt1d", v, Op::Dwt1d(x), &[x])
    }

    /// Inverse of [`dwt1d`](Self::dwt1d): `(2, R, ⌈L/2⌉) → (R, L)`.
    pub fn idwt1d(&mut self, bands: Var, len: usize) -> Result<Var> {
        let s = self.shape(bands).to_vec();
        if s.len() != 3 || s[0] != 2 || s[2] != half_len(len) {
            return Err(mismatch("idwt1d", &s, &[2, s.get(1).copied().unwrap_or(0), half_len(len)]));
        }
        let (r, h) = (s[1], s[2]);
        let bv = self.value(bands).data();
        let (a, d) = bv.split_at(r * h);
        let mut x = vec![0.0; r * len];
        for row in 0..r {
            wavelet::synthesis(&WaveletFilters::HAAR, a, d, row * h, 1, &mut x, row * len, 1, len);
        }
        let v = Tensor::new(&[r, len], x)?;
        self.push("idwt1d", v, Op::Idwt1d(bands), &[bands])
    }

    /// Single-level 2-D Haar analysis of `(C,H,W)`, returning stacked
    /// `(4, C, ⌈H/2⌉, ⌈W/2⌉)` as `[cA, cH, cV, cD]`.
    pub fn dwt2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(invalid("dwt2d", format!("expected (C, H ≥ 2, W ≥ 2), got {s:?}")));
        }
        let out = wavelet::forward_2d(&WaveletFilters::HAAR, self.value(x).data(), s[0], s[1], s[2]);
        let v = Tensor::new(&[4, s[0], half_len(s[1]), half_len(s[2])], out)?;
        self.push("dwt2d", v, Op::Dwt2d(x), &[x])
    }

    /// Inverse of [`dwt2d`](Self::dwt2d) back to spatial size `(h, w)`.
    pub fn idwt2d(&mut self, bands: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(bands).to_vec();
        if s.len() != 4 || s[0] != 4 || s[2] != half_len(h) || s[3] != half_len(w) {
            return Err(mismatch("idwt2d", &s, &[4, s.get(1).copied().unwrap_or(0), half_len(h), half_len(w)]));
        }
        let x = wavelet::inverse_2d(&WaveletFilters::HAAR, self.value(bands).data(), s[1], h, w);
        let v = Tensor::new(&[s[1], h, w], x)?;
        self.push("idwt2d", v, Op::Idwt2d(bands), &[bands])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, t::reduce_to_shape(g, val(*a).shape()));
                acc(*b, t::reduce_to_shape(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                acc(*a, t::reduce_to_shape(g, val(*a).shape()));
                acc(*b, t::reduce_to_shape(&g.scale(-1.0), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let d = t::mul(g, val(*b)).expect("broadcast checked in forward");
                    acc(*a, t::reduce_to_shape(&d, val(*a).shape()));
                }
                if self.nodes[b.0].needs_grad {
                    let d = t::mul(g, val(*a)).expect("broadcast checked in forward");
                    acc(*b, t::reduce_to_shape(&d, val(*b).shape()));
                }
            }
            Op::Div(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let d = t::zip_with("div", g, val(*b), |x, y| x / y).expect("checked");
                    acc(*a, t::reduce_to_shape(&d, val(*a).shape()));
                }
                if self.nodes[b.0].needs_grad {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let yb = t::zip_with("div", y, val(*b), |x, z| -x / z).expect("checked");
                    let d = t::mul(g, &yb).expect("checked");
                    acc(*b, t::reduce_to_shape(&d, val(*b).shape()));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Offset(a) => acc(*a, g.clone()),
            Op::Powf(a, p) => {
                let x = val(*a);
                let d = zip(g, x, |gi, xi| gi * p * xi.powf(p - 1.0));
                acc(*a, d);
            }
            Op::Exp(a) => acc(*a, zip(g, y, |gi, yi| gi * yi)),
            Op::Abs(a) => acc(*a, zip(g, val(*a), |gi, xi| gi * sign(xi))),
            Op::Sigmoid(a) => acc(*a, zip(g, y, |gi, s| gi * s * (1.0 - s))),
            Op::Silu(a) => acc(
                *a,
                zip(g, val(*a), |gi, xi| {
                    let s = sigmoid(xi);
                    gi * (s + xi * s * (1.0 - s))
                }),
            ),
            Op::Relu(a) => acc(*a, zip(g, val(*a), |gi, xi| if xi > 0.0 { gi } else { 0.0 })),
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
            Op::SumAxis(a, axis) => {
                let shape = val(*a).shape();
                acc(*a, t::expand_axis(g, *axis, shape[*axis], shape));
            }
            Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape()).expect("same numel")),
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                acc(*a, t::permute(g, &inv).expect("valid permutation"));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis];
                    if self.nodes[p.0].needs_grad {
                        acc(*p, t::slice(g, *axis, start, len).expect("in range"));
                    }
                    start += len;
                }
            }
            Op::Slice { input, axis, start } => {
                acc(*input, t::unslice(g, val(*input).shape(), *axis, *start));
            }
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, t::matmul_nt(g, val(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, t::matmul_tn(val(*a), g));
                }
            }
            Op::Conv2d { input, weight, bias, geo } => {
                if self.nodes[input.0].needs_grad {
                    acc(*input, t::conv2d_grad_input(geo, g, val(*weight)));
                }
                if self.nodes[weight.0].needs_grad {
                    acc(*weight, t::conv2d_grad_weight(geo, g, val(*input), val(*weight).shape()));
                }
                if let Some(b) = bias {
                    let per = g.len() / geo.out_channels;
                    let db: Vec<f64> = g.data().chunks(per).map(|c| c.iter().sum()).collect();
                    acc(*b, Tensor::from_vec(db));
                }
            }
            Op::Softmax(a, axis) => {
                let gy = t::mul(g, y).expect("same shape");
                let s = t::sum_axis(&gy, *axis, true).expect("axis valid");
                let centered = t::sub(g, &s).expect("broadcast");
                acc(*a, t::mul(y, &centered).expect("same shape"));
            }
            Op::Dwt1d(x) => {
                let s = val(*x).shape();
                let (r, n) = (s[0], s[1]);
                let h = half_len(n);
                let (ga, gd) = g.data().split_at(r * h);
                let mut gx = vec![0.0; r * n];
                for row in 0..r {
                    wavelet::analysis_adjoint(&WaveletFilters::HAAR, ga, gd, row * h, 1, &mut gx, row * n, 1, n);
                }
                acc(*x, Tensor::new(s, gx).expect("shape"));
            }
            Op::Idwt1d(b) => {
                let s = val(*b).shape();
                let (r, h) = (s[1], s[2]);
                let n = y.shape()[1];
                let mut gb = vec![0.0; 2 * r * h];
                let (ga, gd) = gb.split_at_mut(r * h);
                for row in 0..r {
                    wavelet::synthesis_adjoint(&WaveletFilters::HAAR, g.data(), row * n, 1, n, ga, gd, row * h, 1);
                }
                acc(*b, Tensor::new(s, gb).expect("shape"));
            }
            Op::Dwt2d(x) => {
                let s = val(*x).shape();
                let gx = wavelet::forward_2d_adjoint(&WaveletFilters::HAAR, g.data(), s[0], s[1], s[2]);
                acc(*x, Tensor::new(s, gx).expect("shape"));
            }
            Op::Idwt2d(b) => {
                let ys = y.shape();
                let gb = wavelet::inverse_2d_adjoint(&WaveletFilters::HAAR, g.data(), ys[0], ys[1], ys[2]);
                acc(*b, Tensor::new(val(*b).shape(), gb).expect("shape"));
            }
        }
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

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    t::zip_with("backward", a, b, f).expect("same shape")
}
