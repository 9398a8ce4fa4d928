//! Grouped multi-scale attention (EMA), its frequency-enhanced variant
//! (FE-EMA) and the wavelet channel attention for sequences (TS-DWT).

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Conv2d, Linear, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::wavelet::half_len;

pub const GROUP_NORM_EPS: f64 = 1e-5;

fn check_channels(op: &'static str, channels: usize, groups: usize) -> Result<usize> {
    if groups == 0 || channels == 0 || channels % groups != 0 {
        return Err(invalid(op, format!("{channels} channels not divisible into {groups} groups")));
    }
    Ok(channels / groups)
}

fn check_input(op: &'static str, g: &Graph, x: Var, channels: usize) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != channels {
        return Err(invalid(op, format!("expected ({channels}, H, W), got {s:?}")));
    }
    Ok((s[1], s[2]))
}

/// Directional-pool 1×1 path, shared by every channel group.
#[derive(Clone, Copy, Debug)]
pub struct SpatialPath {
    pub conv1x1: Conv2d,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub group_channels: usize,
}

impl SpatialPath {
    pub fn new(store: &mut ParamStore, name: &str, group_channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            conv1x1: Conv2d::new(store, &format!("{name}.conv1x1"), group_channels, group_channels, 1, 1, 0, 1, rng)?,
            gamma: store.add(format!("{name}.gn.gamma"), Tensor::ones(&[group_channels])),
            beta: store.add(format!("{name}.gn.beta"), Tensor::zeros(&[group_channels])),
            group_channels,
        })
    }

    /// `gx: (cg,H,W)` → `GN(gx ⊙ σ(h-gate) ⊙ σ(w-gate))`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, gx: Var) -> Result<Var> {
        let (cg, h, w) = {
            let s = g.shape(gx);
            (s[0], s[1], s[2])
        };
        let pool_h = g.directional_avg_pool(gx, 2)?;
        let pool_w = g.directional_avg_pool(gx, 1)?;
        let pool_w = g.permute(pool_w, &[0, 2, 1])?;
        let cat = g.concat(&[pool_h, pool_w], 1)?;
        let mixed = self.conv1x1.forward(g, p, cat)?;
        let gate_h = g.slice(mixed, 1, 0, h)?;
        let gate_w = g.slice(mixed, 1, h, w)?;
        let gate_w = g.permute(gate_w, &[0, 2, 1])?;
        let gate_h = g.sigmoid(gate_h)?;
        let gate_w = g.sigmoid(gate_w)?;
        let y = g.mul(gx, gate_h)?;
        let y = g.mul(y, gate_w)?;
        g.group_norm(y, cg, p.get(self.gamma), p.get(self.beta), GROUP_NORM_EPS)
    }
}

/// Cross-spatial recalibration of one channel group:
/// `gx ⊙ σ(softmax(GAP(a))·b + softmax(GAP(b))·a)`, all `(cg,H,W)`.
pub fn cross_spatial(g: &mut Graph, gx: Var, a: Var, b: Var) -> Result<Var> {
    let (cg, h, w) = {
        let s = g.shape(gx);
        (s[0], s[1], s[2])
    };
    let descriptor = |g: &mut Graph, v: Var| -> Result<Var> {
        let pooled = g.global_avg_pool(v)?;
        let sm = g.softmax(pooled, 0)?;
        g.reshape(sm, &[1, cg])
    };
    let da = descriptor(g, a)?;
    let db = descriptor(g, b)?;
    let fa = g.reshape(a, &[cg, h * w])?;
    let fb = g.reshape(b, &[cg, h * w])?;
    let m1 = g.matmul(da, fb)?;
    let m2 = g.matmul(db, fa)?;
    let map = g.add(m1, m2)?;
    let map = g.reshape(map, &[1, h, w])?;
    let map = g.sigmoid(map)?;
    g.mul(gx, map)
}

#[derive(Clone, Copy, Debug)]
pub struct EmaParams {
    pub channels: usize,
    pub groups: usize,
    pub spatial: SpatialPath,
    pub conv3x3: Conv2d,
}

impl EmaParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let cg = check_channels("EmaParams::new", channels, groups)?;
        Ok(Self {
            channels,
            groups,
            spatial: SpatialPath::new(store, &format!("{name}.spatial"), cg, rng)?,
            conv3x3: Conv2d::new(store, &format!("{name}.conv3x3"), cg, cg, 3, 1, 1, 1, rng)?,
        })
    }
}

pub fn ema_forward(g: &mut Graph, p: &Bound, params: &EmaParams, x: Var) -> Result<Var> {
    check_input("ema_forward", g, x, params.channels)?;
    let cg = params.channels / params.groups;
    let mut outs = Vec::with_capacity(params.groups);
    for grp in 0..params.groups {
        let gx = g.slice(x, 0, grp * cg, cg)?;
        let x1 = params.spatial.forward(g, p, gx)?;
        let x2 = params.conv3x3.forward(g, p, gx)?;
        outs.push(cross_spatial(g, gx, x1, x2)?);
    }
    g.concat(&outs, 0)
}

/// One fusion weight per channel, or a single weight shared by all.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AlphaMode {
    #[default]
    PerChannel,
    Scalar,
}

impl AlphaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AlphaMode::PerChannel => "per_channel",
            AlphaMode::Scalar => "scalar",
        }
    }
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_channel" => Ok(AlphaMode::PerChannel),
            "scalar" => Ok(AlphaMode::Scalar),
            _ => Err(Error::Config(format!("unknown alpha_mode '{s}' (per_channel|scalar)"))),
        }
    }
}

/// `α = σ(GAP(X)·W + b)`; zero-initialised so α starts at 0.5.
#[derive(Clone, Copy, Debug)]
pub struct AlphaHead {
    pub linear: Linear,
    pub mode: AlphaMode,
}

impl AlphaHead {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, mode: AlphaMode) -> Self {
        let out = match mode {
            AlphaMode::PerChannel => channels,
            AlphaMode::Scalar => 1,
        };
        Self {
            linear: Linear::zeros(store, name, channels, out),
            mode,
        }
    }
}

pub fn alpha_weights(g: &mut Graph, p: &Bound, head: &AlphaHead, x: Var) -> Result<Var> {
    let pooled = g.global_avg_pool(x)?;
    let logits = head.linear.forward(g, p, pooled)?;
    g.sigmoid(logits)
}

/// Grouped 3×3 conv on the approximation band, learned per-channel gains
/// on the three detail bands.
#[derive(Clone, Copy, Debug)]
pub struct FrequencyBranch {
    pub approx: Conv2d,
    pub detail_gain: ParamId,
    pub channels: usize,
}

impl FrequencyBranch {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            approx: Conv2d::new(store, &format!("{name}.approx"), channels, channels, 3, 1, 1, groups, rng)?,
            detail_gain: store.add(format!("{name}.detail_gain"), Tensor::ones(&[3, channels])),
            channels,
        })
    }

    /// Makes the branch a perfect-reconstruction pass-through.
    pub fn set_identity(&self, store: &mut ParamStore) {
        self.approx.set_identity(store);
        store.get_mut(self.detail_gain).data_mut().fill(1.0);
    }
}

pub fn frequency_branch(g: &mut Graph, p: &Bound, fb: &FrequencyBranch, x: Var) -> Result<Var> {
    let (h, w) = check_input("frequency_branch", g, x, fb.channels)?;
    let c = fb.channels;
    let (h2, w2) = (half_len(h), half_len(w));
    let bands = g.dwt2d(x)?;
    let ca = g.slice(bands, 0, 0, 1)?;
    let ca = g.reshape(ca, &[c, h2, w2])?;
    let ca = fb.approx.forward(g, p, ca)?;
    let ca = g.reshape(ca, &[1, c, h2, w2])?;
    let details = g.slice(bands, 0, 1, 3)?;
    let gain = g.reshape(p.get(fb.detail_gain), &[3, c, 1, 1])?;
    let details = g.mul(details, gain)?;
    let bands = g.concat(&[ca, details], 0)?;
    g.idwt2d(bands, h, w)
}

#[derive(Clone, Copy, Debug)]
pub struct FeEmaParams {
    pub channels: usize,
    pub groups: usize,
    pub spatial: SpatialPath,
    pub frequency: FrequencyBranch,
    pub alpha: AlphaHead,
}

impl FeEmaParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        groups: usize,
        mode: AlphaMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cg = check_channels("FeEmaParams::new", channels, groups)?;
        Ok(Self {
            channels,
            groups,
            spatial: SpatialPath::new(store, &format!("{name}.spatial"), cg, rng)?,
            frequency: FrequencyBranch::new(store, &format!("{name}.frequency"), channels, groups, rng)?,
            alpha: AlphaHead::new(store, &format!("{name}.alpha"), channels, mode),
        })
    }

    /// Pins the α head bias to `bias` with zero weights.
    pub fn saturate_alpha(&self, store: &mut ParamStore, bias: f64) {
        store.get_mut(self.alpha.linear.weight).data_mut().fill(0.0);
        store.get_mut(self.alpha.linear.bias).data_mut().fill(bias);
    }
}

/// Intermediate values of one FE-EMA evaluation, all `(C,H,W)` except
/// `alpha` which is `(C)` or `(1)`.
#[derive(Clone, Copy, Debug)]
pub struct FeEmaTrace {
    pub spatial: Var,
    pub frequency: Var,
    pub alpha: Var,
    pub fused: Var,
    pub output: Var,
}

pub fn fe_ema_forward(g: &mut Graph, p: &Bound, params: &FeEmaParams, x: Var) -> Result<Var> {
    Ok(fe_ema_trace(g, p, params, x)?.output)
}

pub fn fe_ema_trace(g: &mut Graph, p: &Bound, params: &FeEmaParams, x: Var) -> Result<FeEmaTrace> {
    let (h, w) = check_input("fe_ema_forward", g, x, params.channels)?;
    if h < 2 || w < 2 {
        return Err(invalid("fe_ema_forward", format!("spatial size {h}x{w} below 2x2")));
    }
    let c = params.channels;
    let cg = c / params.groups;
    let mut spatial = Vec::with_capacity(params.groups);
    for grp in 0..params.groups {
        let gx = g.slice(x, 0, grp * cg, cg)?;
        spatial.push(params.spatial.forward(g, p, gx)?);
    }
    let spatial = g.concat(&spatial, 0)?;
    let frequency = frequency_branch(g, p, &params.frequency, x)?;
    let alpha = alpha_weights(g, p, &params.alpha, x)?;
    let fused = fuse(g, alpha, spatial, frequency)?;
    let mut outs = Vec::with_capacity(params.groups);
    for grp in 0..params.groups {
        let gx = g.slice(x, 0, grp * cg, cg)?;
        let fg = g.slice(fused, 0, grp * cg, cg)?;
        let qg = g.slice(frequency, 0, grp * cg, cg)?;
        outs.push(cross_spatial(g, gx, fg, qg)?);
    }
    let output = g.concat(&outs, 0)?;
    Ok(FeEmaTrace {
        spatial,
        frequency,
        alpha,
        fused,
        output,
    })
}

/// `α·spatial + (1−α)·frequency` with `α` broadcast over `(H,W)`.
pub fn fuse(g: &mut Graph, alpha: Var, spatial: Var, frequency: Var) -> Result<Var> {
    let n = g.shape(alpha)[0];
    let a = g.reshape(alpha, &[n, 1, 1])?;
    let neg = g.scale(a, -1.0)?;
    let one_minus = g.add_scalar(neg, 1.0)?;
    let s = g.mul(a, spatial)?;
    let f = g.mul(one_minus, frequency)?;
    g.add(s, f)
}

#[derive(Clone, Copy, Debug)]
pub struct TsDwtParams {
    pub len: usize,
    pub channels: usize,
    pub up_approx: Linear,
    pub up_detail: Linear,
    pub fuse_weight: ParamId,
    pub fuse_bias: ParamId,
    pub fc: Linear,
}

impl TsDwtParams {
    pub fn new(store: &mut ParamStore, name: &str, len: usize, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if len < 2 {
            return Err(invalid("TsDwtParams::new", format!("sequence length {len} below 2")));
        }
        if channels == 0 {
            return Err(invalid("TsDwtParams::new", "zero channels"));
        }
        let half = half_len(len);
        let fan = 2 * channels * 3;
        Ok(Self {
            len,
            channels,
            up_approx: Linear::new(store, &format!("{name}.up_approx"), half, len, rng),
            up_detail: Linear::new(store, &format!("{name}.up_detail"), half, len, rng),
            fuse_weight: store.uniform(format!("{name}.fuse.weight"), &[channels, 2 * channels, 3], fan, rng),
            fuse_bias: store.uniform(format!("{name}.fuse.bias"), &[channels], fan, rng),
            fc: Linear::new(store, &format!("{name}.fc"), channels, channels, rng),
        })
    }

    pub fn zero_fc(&self, store: &mut ParamStore) {
        store.get_mut(self.fc.weight).data_mut().fill(0.0);
        store.get_mut(self.fc.bias).data_mut().fill(0.0);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TsDwtTrace {
    /// `(D, ⌈k/2⌉)`.
    pub approx: Var,
    pub detail: Var,
    /// `(D)`, strictly inside (0,1).
    pub weights: Var,
    pub output: Var,
}

pub fn ts_dwt_forward(g: &mut Graph, p: &Bound, params: &TsDwtParams, t: Var) -> Result<Var> {
    Ok(ts_dwt_trace(g, p, params, t)?.output)
}

pub fn ts_dwt_trace(g: &mut Graph, p: &Bound, params: &TsDwtParams, t: Var) -> Result<TsDwtTrace> {
    let s = g.shape(t).to_vec();
    if s.len() != 2 || s[0] < 2 {
        return Err(invalid("ts_dwt_forward", format!("expected (k ≥ 2, D), got {s:?}")));
    }
    if s != [params.len, params.channels] {
        return Err(crate::error::mismatch("ts_dwt_forward", &s, &[params.len, params.channels]));
    }
    let (k, d) = (s[0], s[1]);
    let half = half_len(k);
    let series = g.transpose(t)?;
    let bands = g.dwt1d(series)?;
    let approx = g.slice(bands, 0, 0, 1)?;
    let approx = g.reshape(approx, &[d, half])?;
    let detail = g.slice(bands, 0, 1, 1)?;
    let detail = g.reshape(detail, &[d, half])?;
    let ua = params.up_approx.forward(g, p, approx)?;
    let ud = params.up_detail.forward(g, p, detail)?;
    let spliced = g.concat(&[ua, ud], 0)?;
    let fused = g.conv1d(spliced, p.get(params.fuse_weight), Some(p.get(params.fuse_bias)), 1, 1)?;
    let pooled = g.mean_axis(fused, 1)?;
    let pooled = g.reshape(pooled, &[d])?;
    let logits = params.fc.forward(g, p, pooled)?;
    let weights = g.sigmoid(logits)?;
    let output = g.mul(t, weights)?;
    Ok(TsDwtTrace {
        approx,
        detail,
        weights,
        output,
    })
}
