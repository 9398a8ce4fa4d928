//! Dense row-major `f64` tensors and the numeric kernels the
//! differentiation graph is built from.
//!
//! Every kernel here is a pure function: inputs are borrowed, a fresh
//! tensor is returned. Shape errors carry both offending shapes.

use crate::error::{invalid, mismatch, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(invalid("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(invalid(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut o = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of size {d}");
            o = o * d + ix;
        }
        o
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(mismatch("reshape", &self.shape, shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(mismatch("zip_map", &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// ∞-norm of the difference to `other`.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Self> {
        if self.all_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`, with zero
/// stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Elementwise binary operation with numpy-style broadcasting.
pub fn zip_with(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| mismatch(op, &a.shape, &b.shape))?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let n: usize = out.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; out.len()];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..n {
        data.push(f(a.data[oa], b.data[ob]));
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor { shape: out, data })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

/// Sums `grad` (shaped like a broadcast result) down to `shape`.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let out = &grad.shape;
    let st = broadcast_strides(shape, out);
    let mut res = Tensor::zeros(shape);
    let mut idx = vec![0usize; out.len()];
    let mut o = 0usize;
    for &g in &grad.data {
        res.data[o] += g;
        for ax in (0..out.len()).rev() {
            idx[ax] += 1;
            o += st[ax];
            if idx[ax] < out[ax] {
                break;
            }
            o -= st[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    res
}

/// `(m,k) × (k,n) → (m,n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0] {
        return Err(mismatch("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `aᵀ × b` without materialising the transpose: `(k,m)ᵀ × (k,n) → (m,n)`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

/// Four interleaved partial sums, combined pairwise.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a × bᵀ`: `(m,k) × (n,k)ᵀ → (m,n)`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Tensor {
        shape: vec![m, n],
        data: out,
    }
}

pub fn permute(a: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let nd = a.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&x| x >= nd || std::mem::replace(&mut seen[x], true)) {
        return Err(invalid("permute", format!("{axes:?} is not a permutation of rank {nd}")));
    }
    let src = strides(&a.shape);
    let shape: Vec<usize> = axes.iter().map(|&x| a.shape[x]).collect();
    let st: Vec<usize> = axes.iter().map(|&x| src[x]).collect();
    let n = a.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut o = 0usize;
    for _ in 0..n {
        data.push(a.data[o]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            o += st[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            o -= st[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Tensor { shape, data })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 {
        return Err(invalid("transpose", format!("expected rank 2, got {:?}", a.shape)));
    }
    permute(a, &[1, 0])
}

/// (outer, axis, inner) sizes around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    if axis >= first.ndim() {
        return Err(invalid("concat", format!("axis {axis} out of range for {:?}", first.shape)));
    }
    for p in parts {
        let ok = p.ndim() == first.ndim()
            && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(mismatch("concat", &first.shape, &p.shape));
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
    let (outer, _, inner) = split_dims(&first.shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor { shape, data })
}

pub fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= a.ndim() || len == 0 || start + len > a.shape[axis] {
        return Err(invalid(
            "slice",
            format!("range {start}..{} on axis {axis} of {:?}", start + len, a.shape),
        ));
    }
    let (outer, size, inner) = split_dims(&a.shape, axis);
    let mut shape = a.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * size + start) * inner;
        data.extend_from_slice(&a.data[base..base + len * inner]);
    }
    Ok(Tensor { shape, data })
}

/// Adjoint of [`slice`]: places `grad` at `start` inside zeros of `full`.
pub(crate) fn unslice(grad: &Tensor, full: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, size, inner) = split_dims(full, axis);
    let len = grad.shape[axis];
    let mut out = Tensor::zeros(full);
    for o in 0..outer {
        let base = (o * size + start) * inner;
        out.data[base..base + len * inner]
            .copy_from_slice(&grad.data[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

pub fn sum_axis(a: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
    if axis >= a.ndim() {
        return Err(invalid("sum_axis", format!("axis {axis} out of range for {:?}", a.shape)));
    }
    let (outer, size, inner) = split_dims(&a.shape, axis);
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for s in 0..size {
            let src = &a.data[(o * size + s) * inner..(o * size + s + 1) * inner];
            for (d, &v) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    let mut shape = a.shape.clone();
    if keepdim || shape.len() == 1 {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok(Tensor { shape, data })
}

/// Repeats a size-1 `axis` of `a` `size` times (adjoint of a keepdim sum).
pub(crate) fn expand_axis(a: &Tensor, axis: usize, size: usize, target: &[usize]) -> Tensor {
    let (outer, _, inner) = split_dims(target, axis);
    let mut data = Vec::with_capacity(outer * size * inner);
    for o in 0..outer {
        let src = &a.data[o * inner..(o + 1) * inner];
        for _ in 0..size {
            data.extend_from_slice(src);
        }
    }
    Tensor {
        shape: target.to_vec(),
        data,
    }
}

pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= a.ndim() {
        return Err(invalid("softmax", format!("axis {axis} out of range for {:?}", a.shape)));
    }
    let (outer, size, inner) = split_dims(&a.shape, axis);
    let mut out = a.clone();
    for o in 0..outer {
        for i in 0..inner {
            let at = |s: usize| (o * size + s) * inner + i;
            let m = (0..size).map(|s| a.data[at(s)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in 0..size {
                let e = (a.data[at(s)] - m).exp();
                out.data[at(s)] = e;
                z += e;
            }
            for s in 0..size {
                out.data[at(s)] /= z;
            }
        }
    }
    Ok(out)
}

/// Geometry of a 2-D cross-correlation over a `(C,H,W)` input with
/// weights `(O, C/groups, KH, KW)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvGeometry {
    pub fn resolve(
        input: &[usize],
        weight: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        if input.len() != 3 || weight.len() != 4 {
            return Err(mismatch("conv2d", input, weight));
        }
        let (c, h, w) = (input[0], input[1], input[2]);
        let (o, cg, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if groups == 0 || c % groups != 0 || o % groups != 0 {
            return Err(invalid(
                "conv2d",
                format!("groups={groups} must divide in_channels={c} and out_channels={o}"),
            ));
        }
        if cg != c / groups {
            return Err(mismatch("conv2d", input, weight));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * padding.0 || kw > w + 2 * padding.1 {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding.0, w + 2 * padding.1),
            ));
        }
        Ok(Self {
            in_channels: c,
            out_channels: o,
            height: h,
            width: w,
            kernel: (kh, kw),
            stride,
            padding,
            groups,
        })
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1,
            (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1,
        )
    }

    /// Visits every contiguous run of multiply-accumulates sharing one
    /// weight: `f(out_start, in_start, run_len, in_stride, weight_offset)`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (oh, ow) = self.out_hw();
        let (kh, kw) = self.kernel;
        let (sy, sx) = self.stride;
        let (py, px) = self.padding;
        let cg = self.in_channels / self.groups;
        let og = self.out_channels / self.groups;
        for oc in 0..self.out_channels {
            let g = oc / og;
            for ic in 0..cg {
                let c = g * cg + ic;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wo = ((oc * cg + ic) * kh + ki) * kw + kj;
                        let x0 = if px > kj { (px - kj).div_ceil(sx) } else { 0 };
                        let x1 = if self.width + px > kj { (self.width + px - kj).div_ceil(sx).min(ow) } else { 0 };
                        if x0 >= x1 {
                            continue;
                        }
                        for y in 0..oh {
                            let iy = y * sy + ki;
                            if iy < py || iy - py >= self.height {
                                continue;
                            }
                            let row_in = (c * self.height + iy - py) * self.width;
                            let row_out = (oc * oh + y) * ow;
                            f(row_out + x0, row_in + x0 * sx + kj - px, x1 - x0, sx, wo);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
    groups: usize,
) -> Result<Tensor> {
    let geo = ConvGeometry::resolve(&input.shape, &weight.shape, stride, padding, groups)?;
    if let Some(b) = bias {
        if b.shape != [geo.out_channels] {
            return Err(mismatch("conv2d bias", &b.shape, &[geo.out_channels]));
        }
    }
    Ok(conv2d_forward(&geo, input, weight, bias))
}

pub(crate) fn conv2d_forward(geo: &ConvGeometry, input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (oh, ow) = geo.out_hw();
    let mut out = vec![0.0; geo.out_channels * oh * ow];
    if let Some(b) = bias {
        for (oc, chunk) in out.chunks_mut(oh * ow).enumerate() {
            chunk.fill(b.data[oc]);
        }
    }
    let (x, k) = (&input.data, &weight.data);
    geo.for_each_run(|o, i, n, sx, w| {
        let kv = k[w];
        for (t, ov) in out[o..o + n].iter_mut().enumerate() {
            *ov += x[i + t * sx] * kv;
        }
    });
    Tensor {
        shape: vec![geo.out_channels, oh, ow],
        data: out,
    }
}

pub(crate) fn conv2d_grad_input(geo: &ConvGeometry, grad: &Tensor, weight: &Tensor) -> Tensor {
    let mut gx = vec![0.0; geo.in_channels * geo.height * geo.width];
    let (g, k) = (&grad.data, &weight.data);
    geo.for_each_run(|o, i, n, sx, w| {
        let kv = k[w];
        for (t, gv) in g[o..o + n].iter().enumerate() {
            gx[i + t * sx] += gv * kv;
        }
    });
    Tensor {
        shape: vec![geo.in_channels, geo.height, geo.width],
        data: gx,
    }
}

pub(crate) fn conv2d_grad_weight(geo: &ConvGeometry, grad: &Tensor, input: &Tensor, wshape: &[usize]) -> Tensor {
    let mut gw = vec![0.0; wshape.iter().product()];
    let (g, x) = (&grad.data, &input.data);
    geo.for_each_run(|o, i, n, sx, w| {
        let mut acc = 0.0;
        for (t, gv) in g[o..o + n].iter().enumerate() {
            acc += gv * x[i + t * sx];
        }
        gw[w] += acc;
    });
    Tensor {
        shape: wshape.to_vec(),
        data: gw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&a, &Tensor::identity(2)).unwrap(), a);
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn add_zero_vector() {
        let z = Tensor::zeros(&[3]);
        let v = Tensor::from_vec(vec![5.0, 6.0, 7.0]);
        assert_eq!(add(&z, &v).unwrap(), v);
    }

    #[test]
    fn broadcasting_and_reduction_agree() {
        let a = Tensor::new(&[2, 1, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = mul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 4, 3]);
        assert_eq!(c.get(&[1, 2, 0]), 3.0 * 3.0);
        let r = reduce_to_shape(&Tensor::ones(&[2, 4, 3]), &[4, 1]);
        assert_eq!(r.data(), &[6.0; 4]);
    }

    #[test]
    fn concat_shapes() {
        let c = concat(&[&Tensor::zeros(&[2, 3]), &Tensor::ones(&[1, 3])], 0).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(c.data()[6..], [1.0; 3]);
        assert!(concat(&[&Tensor::zeros(&[2, 3]), &Tensor::ones(&[1, 2])], 0).is_err());
    }

    #[test]
    fn slice_then_unslice() {
        let a = Tensor::new(&[2, 4], (0..8).map(f64::from).collect()).unwrap();
        let s = slice(&a, 1, 1, 2).unwrap();
        assert_eq!(s.data(), &[1.0, 2.0, 5.0, 6.0]);
        let u = unslice(&s, &[2, 4], 1, 1);
        assert_eq!(u.data(), &[0.0, 1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let a = Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute(&a, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), a.get(&[1, 2, 3]));
        assert!(permute(&a, &[0, 0, 1]).is_err());
    }

    #[test]
    fn softmax_constant_is_uniform() {
        let s = softmax(&Tensor::full(&[4], 3.0), 0).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(&[2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let mut k = Tensor::zeros(&[2, 1, 1, 1]);
        k.data_mut().fill(1.0);
        let y = conv2d(&x, &k, None, (1, 1), (0, 0), 2).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_shape_contract() {
        let x = Tensor::zeros(&[2, 8, 8]);
        let k = Tensor::zeros(&[3, 2, 3, 3]);
        assert_eq!(conv2d(&x, &k, None, (1, 1), (1, 1), 1).unwrap().shape(), &[3, 8, 8]);
    }

    #[test]
    fn conv_ones_sum_nine() {
        let y = conv2d(&Tensor::ones(&[1, 3, 3]), &Tensor::ones(&[1, 1, 3, 3]), None, (1, 1), (0, 0), 1).unwrap();
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::zeros(&[3, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[2, 1, 3, 3]), None, (1, 1), (0, 0), 2).is_err());
        assert!(conv2d(&x, &Tensor::zeros(&[2, 3, 5, 5]), None, (1, 1), (0, 0), 1).is_err());
    }
}
