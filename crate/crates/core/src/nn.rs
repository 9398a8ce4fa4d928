//! Named parameter storage and the small layer set shared by the
//! attention blocks and the policy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// `uniform(−s, s)` with `s = 1/√fan_in`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let s = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-s..s)).collect();
        self.add(name, Tensor::new(shape, data).expect("shape"))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(crate::error::mismatch("ParamStore::set", value.shape(), self.tensors[id.0].shape()));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Inserts every parameter into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Inserts every parameter into `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Replaces one binding, e.g. to route a parameter through a grad check.
    pub fn with(mut self, id: ParamId, v: Var) -> Self {
        self.vars[id.0] = v;
        self
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.uniform(format!("{name}.weight"), &[in_features, out_features], in_features, rng),
            bias: store.uniform(format!("{name}.bias"), &[out_features], in_features, rng),
            in_features,
            out_features,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::zeros(&[in_features, out_features])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.get(self.weight), Some(p.get(self.bias)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
            return Err(invalid("Conv2d::new", format!("groups={groups} must divide {in_ch} and {out_ch}")));
        }
        let fan_in = in_ch / groups * kernel * kernel;
        Ok(Self {
            weight: store.uniform(format!("{name}.weight"), &[out_ch, in_ch / groups, kernel, kernel], fan_in, rng),
            bias: store.uniform(format!("{name}.bias"), &[out_ch], fan_in, rng),
            stride,
            padding,
            groups,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p.get(self.weight),
            Some(p.get(self.bias)),
            (self.stride, self.stride),
            (self.padding, self.padding),
            self.groups,
        )
    }

    /// Sets the kernel to a per-channel pass-through (centre tap 1, bias 0).
    pub fn set_identity(&self, store: &mut ParamStore) {
        let w = store.get_mut(self.weight);
        let s = w.shape().to_vec();
        let (out, cg, kh, kw) = (s[0], s[1], s[2], s[3]);
        let og = out / self.groups;
        w.data_mut().fill(0.0);
        for o in 0..out {
            let i = o - (o / og) * og;
            if i < cg {
                w.set(&[o, i, kh / 2, kw / 2], 1.0);
            }
        }
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(self.gamma), p.get(self.beta), Self::EPS)
    }
}

/// Scaled dot-product attention with `heads` parallel heads.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(invalid("MultiHeadAttention::new", format!("{dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        })
    }

    /// `query: (Nq, D)`, `memory: (Nk, D)` → `(Nq, D)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, query: Var, memory: Var) -> Result<Var> {
        let dim = g.shape(query)[1];
        let hd = dim / self.heads;
        let q = self.q.forward(g, p, query)?;
        let k = self.k.forward(g, p, memory)?;
        let v = self.v.forward(g, p, memory)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * hd, hd)?;
            let kh = g.slice(k, 1, h * hd, hd)?;
            let vh = g.slice(v, 1, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat(&heads, 1)?;
        self.out.forward(g, p, cat)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.silu(h)?;
        self.down.forward(g, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.uniform("w", &[10, 10], 16, &mut rng);
        assert!(store.get(id).data().iter().all(|v| v.abs() < 0.25));
        assert_eq!(store.find("w"), Some(id));
    }

    #[test]
    fn identity_conv_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 4, 4, 3, 1, 1, 2, &mut rng).unwrap();
        conv.set_identity(&mut store);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let xv = Tensor::new(&[4, 3, 5], (0..60).map(|v| (v as f64).cos()).collect()).unwrap();
        let x = g.constant(xv.clone());
        let y = conv.forward(&mut g, &p, x).unwrap();
        assert!(g.value(y).max_abs_diff(&xv) < 1e-15);
    }

    #[test]
    fn attention_rows_are_convex_mixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(Tensor::new(&[5, 8], (0..40).map(|v| (v as f64 * 0.1).sin()).collect()).unwrap());
        let y = mha.forward(&mut g, &p, x, x).unwrap();
        assert_eq!(g.shape(y), &[5, 8]);
        assert!(MultiHeadAttention::new(&mut store, "b", 8, 3, &mut rng).is_err());
    }
}
