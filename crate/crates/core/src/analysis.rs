//! Cost accounting, Grad-CAM heatmaps and training/attention exports.
//!
//! FLOPs convention: 2 per multiply-accumulate; bias adds, sigmoid and
//! softmax outputs, elementwise products and sums cost 1 per output scalar;
//! pooling costs 1 per input plus 1 per output; group norm costs `7·N + 3·G`;
//! each Haar pass (forward or inverse) costs 2 FLOPs per output coefficient
//! per filter tap, i.e. 4 per output coefficient.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::attention::AlphaMode;
use crate::dataset::Observation;
use crate::error::{invalid, mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::policy::{AlphaRow, MetricRow, Policy};
use crate::tensor::Tensor;
use crate::wavelet::half_len;

pub const FLOPS_CONVENTION: &str =
    "2 FLOPs per multiply-accumulate; bias/sigmoid/softmax/elementwise 1 per scalar; pools 1 per input + 1 per output; \
     group norm 7 per scalar + 3 per group; fuse 3 per scalar + 2 per alpha; DWT/IDWT 2 per coefficient per tap per pass";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Linear { in_features: usize, out_features: usize, bias: bool },
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, groups: usize, bias: bool },
    GroupNorm { channels: usize, groups: usize },
    /// Learned multiplicative gains broadcast over the input.
    Gain { count: usize },
    Sigmoid,
    Softmax,
    /// Elementwise product or sum of two equally shaped operands.
    Mul,
    Add,
    /// `α·a + (1−α)·b`, `α` one per leading channel.
    Fuse,
    GlobalAvgPool,
    /// Mean over the last axis of `(C,H,W)`.
    PoolW,
    /// Mean over the middle axis of `(C,H,W)`.
    PoolH,
    /// `(m,k)` times `(k,n)`.
    MatMul { n: usize },
    Dwt2d,
    Idwt2d { height: usize, width: usize },
    Reshape { shape: Vec<usize> },
}

fn numel(s: &[usize]) -> u64 {
    s.iter().map(|&d| d as u64).product()
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::GroupNorm { .. } => "group_norm",
            LayerSpec::Gain { .. } => "gain",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Mul => "mul",
            LayerSpec::Add => "add",
            LayerSpec::Fuse => "fuse",
            LayerSpec::GlobalAvgPool => "gap",
            LayerSpec::PoolW => "pool_w",
            LayerSpec::PoolH => "pool_h",
            LayerSpec::MatMul { .. } => "matmul",
            LayerSpec::Dwt2d => "dwt2d",
            LayerSpec::Idwt2d { .. } => "idwt2d",
            LayerSpec::Reshape { .. } => "reshape",
        }
    }

    pub fn params(&self) -> u64 {
        match *self {
            LayerSpec::Linear { in_features, out_features, bias } => {
                (in_features * out_features + if bias { out_features } else { 0 }) as u64
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, groups, bias, .. } => {
                let w = out_channels * (in_channels / groups.max(1)) * kernel * kernel;
                (w + if bias { out_channels } else { 0 }) as u64
            }
            LayerSpec::GroupNorm { channels, .. } => 2 * channels as u64,
            LayerSpec::Gain { count } => count as u64,
            _ => 0,
        }
    }

    /// Output shape and FLOPs for one application to `input`.
    pub fn apply(&self, input: &[usize]) -> Result<(Vec<usize>, u64)> {
        let unresolved = |why: String| Err(invalid("count_flops", format!("{} on {input:?}: {why}", self.kind())));
        let n = numel(input);
        match self {
            &LayerSpec::Linear { in_features, out_features, bias } => {
                match input.last() {
                    Some(&d) if d == in_features => {}
                    _ => return unresolved(format!("last axis must be {in_features}")),
                }
                let rows = n / in_features as u64;
                let mut out = input.to_vec();
                *out.last_mut().expect("nonempty") = out_features;
                let bias_flops = if bias { rows * out_features as u64 } else { 0 };
                Ok((out, 2 * rows * (in_features * out_features) as u64 + bias_flops))
            }
            &LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding, groups, bias } => {
                if input.len() != 3 || input[0] != in_channels {
                    return unresolved(format!("expected ({in_channels}, H, W)"));
                }
                if groups == 0 || stride == 0 || in_channels % groups != 0 || out_channels % groups != 0 {
                    return unresolved(format!("groups {groups} / stride {stride} invalid"));
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return unresolved("kernel exceeds padded input".into());
                }
                let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                let outputs = (out_channels * oh * ow) as u64;
                let macs = outputs * ((in_channels / groups) * kernel * kernel) as u64;
                Ok((vec![out_channels, oh, ow], 2 * macs + if bias { outputs } else { 0 }))
            }
            &LayerSpec::GroupNorm { channels, groups } => {
                if input.first() != Some(&channels) || groups == 0 || channels % groups != 0 {
                    return unresolved(format!("expected {channels} leading channels in {groups} groups"));
                }
                Ok((input.to_vec(), 7 * n + 3 * groups as u64))
            }
            &LayerSpec::Gain { count } => {
                if count == 0 || n % count as u64 != 0 {
                    return unresolved(format!("{count} gains do not tile the input"));
                }
                Ok((input.to_vec(), n))
            }
            LayerSpec::Sigmoid | LayerSpec::Softmax | LayerSpec::Mul | LayerSpec::Add => Ok((input.to_vec(), n)),
            LayerSpec::Fuse => {
                let Some(&c) = input.first() else { return unresolved("scalar input".into()) };
                Ok((input.to_vec(), 3 * n + 2 * c as u64))
            }
            LayerSpec::GlobalAvgPool => {
                if input.len() != 3 {
                    return unresolved("expected (C, H, W)".into());
                }
                Ok((vec![input[0]], n + input[0] as u64))
            }
            LayerSpec::PoolW | LayerSpec::PoolH => {
                if input.len() != 3 {
                    return unresolved("expected (C, H, W)".into());
                }
                let out = if matches!(self, LayerSpec::PoolW) {
                    vec![input[0], input[1], 1]
                } else {
                    vec![input[0], 1, input[2]]
                };
                let m = numel(&out);
                Ok((out, n + m))
            }
            &LayerSpec::MatMul { n: cols } => {
                if input.len() != 2 {
                    return unresolved("expected (m, k)".into());
                }
                let (m, k) = (input[0] as u64, input[1] as u64);
                Ok((vec![input[0], cols], 2 * m * k * cols as u64))
            }
            LayerSpec::Dwt2d => {
                if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                    return unresolved("expected (C, H, W) with H, W >= 2".into());
                }
                let (c, h, w) = (input[0], input[1], input[2]);
                let (h2, w2) = (half_len(h), half_len(w));
                Ok((vec![4, c, h2, w2], haar_passes(c, h, w)))
            }
            &LayerSpec::Idwt2d { height, width } => {
                if input.len() != 4 || input[0] != 4 || input[2] != half_len(height) || input[3] != half_len(width) {
                    return unresolved(format!("bands do not reconstruct {height}x{width}"));
                }
                let c = input[1];
                Ok((vec![c, height, width], haar_passes(c, height, width)))
            }
            LayerSpec::Reshape { shape } => {
                if numel(shape) != n {
                    return unresolved(format!("cannot reshape to {shape:?}"));
                }
                Ok((shape.clone(), 0))
            }
        }
    }
}

/// Row pass yields `H × 2⌈W/2⌉` coefficients, column pass `2⌈H/2⌉ × 2⌈W/2⌉`.
fn haar_passes(c: usize, h: usize, w: usize) -> u64 {
    let (hp, wp) = (2 * half_len(h) as u64, 2 * half_len(w) as u64);
    4 * c as u64 * (h as u64 * wp + hp * wp)
}

fn parse_kv<T: FromStr>(kv: &[(String, String)], key: &str, default: Option<T>, line: &str) -> Result<T> {
    match kv.iter().find(|(k, _)| k == key) {
        Some((_, v)) => v.parse().map_err(|_| invalid("parse_layer", format!("bad `{key}` in `{line}`"))),
        None => default.ok_or_else(|| invalid("parse_layer", format!("missing `{key}` in `{line}`"))),
    }
}

fn parse_bool(kv: &[(String, String)], line: &str) -> Result<bool> {
    match kv.iter().find(|(k, _)| k == "bias").map(|(_, v)| v.as_str()) {
        None | Some("true") => Ok(true),
        Some("false") => Ok(false),
        Some(_) => Err(invalid("parse_layer", format!("bad `bias` in `{line}`"))),
    }
}

/// Parses `kind key=value ...`, e.g. `conv2d in=2 out=3 k=3 pad=1`.
impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let kind = parts.next().ok_or_else(|| invalid("parse_layer", "empty layer line"))?;
        let mut kv = Vec::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| invalid("parse_layer", format!("expected key=value, got `{p}`")))?;
            kv.push((k.to_string(), v.to_string()));
        }
        let get = |key: &str, default: Option<usize>| parse_kv::<usize>(&kv, key, default, line);
        Ok(match kind {
            "linear" => LayerSpec::Linear {
                in_features: get("in", None)?,
                out_features: get("out", None)?,
                bias: parse_bool(&kv, line)?,
            },
            "conv2d" => LayerSpec::Conv2d {
                in_channels: get("in", None)?,
                out_channels: get("out", None)?,
                kernel: get("k", None)?,
                stride: get("stride", Some(1))?,
                padding: get("pad", Some(0))?,
                groups: get("groups", Some(1))?,
                bias: parse_bool(&kv, line)?,
            },
            "group_norm" => LayerSpec::GroupNorm {
                channels: get("channels", None)?,
                groups: get("groups", None)?,
            },
            "gain" => LayerSpec::Gain { count: get("count", None)? },
            "sigmoid" => LayerSpec::Sigmoid,
            "softmax" => LayerSpec::Softmax,
            "mul" => LayerSpec::Mul,
            "add" => LayerSpec::Add,
            "fuse" => LayerSpec::Fuse,
            "gap" => LayerSpec::GlobalAvgPool,
            "pool_w" => LayerSpec::PoolW,
            "pool_h" => LayerSpec::PoolH,
            "matmul" => LayerSpec::MatMul { n: get("n", None)? },
            "dwt2d" => LayerSpec::Dwt2d,
            "idwt2d" => LayerSpec::Idwt2d {
                height: get("h", None)?,
                width: get("w", None)?,
            },
            other => return Err(Error::UnknownLayer(other.to_string())),
        })
    }
}

/// One layer application. `input: None` chains from the previous layer's
/// output; `repeat` applies it that many times with the same weights (e.g.
/// once per channel group), so it scales FLOPs but not parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCall {
    pub name: String,
    pub spec: LayerSpec,
    pub input: Option<Vec<usize>>,
    pub repeat: u64,
}

impl LayerCall {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self {
            name: name.into(),
            spec,
            input: None,
            repeat: 1,
        }
    }

    pub fn on(mut self, input: &[usize]) -> Self {
        self.input = Some(input.to_vec());
        self
    }

    pub fn times(mut self, repeat: usize) -> Self {
        self.repeat = repeat as u64;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Module {
    pub label: String,
    pub layers: Vec<LayerCall>,
}

impl Module {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, call: LayerCall) {
        self.layers.push(call);
    }

    /// One layer per non-empty line; `#` starts a comment. Every layer
    /// chains from the previous one.
    pub fn parse(label: &str, text: &str) -> Result<Self> {
        let mut m = Module::new(label);
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                m.push(LayerCall::new(format!("{}{i}", &line[..line.find(' ').unwrap_or(line.len())]), line.parse()?));
            }
        }
        Ok(m)
    }
}

pub fn count_params(m: &Module) -> u64 {
    m.layers.iter().map(|l| l.spec.params()).sum()
}

pub fn count_flops(m: &Module, input: &[usize]) -> Result<u64> {
    Ok(cost_report(m, input)?.total_flops)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub repeat: u64,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub label: String,
    pub input: Vec<usize>,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
}

pub fn cost_report(m: &Module, input: &[usize]) -> Result<CostReport> {
    let mut shape = input.to_vec();
    let mut rows = Vec::with_capacity(m.layers.len());
    for l in &m.layers {
        let inp = l.input.clone().unwrap_or_else(|| shape.clone());
        let (out, flops) = l.spec.apply(&inp)?;
        rows.push(CostRow {
            name: l.name.clone(),
            kind: l.spec.kind(),
            input: inp,
            output: out.clone(),
            repeat: l.repeat,
            params: l.spec.params(),
            flops: flops * l.repeat,
        });
        shape = out;
    }
    Ok(CostReport {
        label: m.label.clone(),
        input: input.to_vec(),
        total_params: rows.iter().map(|r| r.params).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        rows,
    })
}

fn dims(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("# {FLOPS_CONVENTION}\nmodule,layer,kind,input,output,repeat,params,flops\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                self.label,
                r.name,
                r.kind,
                dims(&r.input),
                dims(&r.output),
                r.repeat,
                r.params,
                r.flops
            );
        }
        let _ = writeln!(s, "{},total,,{},,,{},{}", self.label, dims(&self.input), self.total_params, self.total_flops);
        s
    }
}

fn conv(in_channels: usize, out_channels: usize, kernel: usize, padding: usize, groups: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel,
        stride: 1,
        padding,
        groups,
        bias: true,
    }
}

/// Host layer every module is attached to: a 3×3 conv `C → C`.
pub fn baseline_module(c: usize, h: usize, w: usize) -> Module {
    let mut m = Module::new("baseline");
    m.push(LayerCall::new("host.conv3x3", conv(c, c, 3, 1, 1)).on(&[c, h, w]));
    m
}

fn spatial_layers(m: &mut Module, prefix: &str, cg: usize, h: usize, w: usize, g: usize) {
    let gx = [cg, h, w];
    m.push(LayerCall::new(format!("{prefix}.pool_h"), LayerSpec::PoolW).on(&gx).times(g));
    m.push(LayerCall::new(format!("{prefix}.pool_w"), LayerSpec::PoolH).on(&gx).times(g));
    m.push(LayerCall::new(format!("{prefix}.conv1x1"), conv(cg, cg, 1, 0, 1)).on(&[cg, h + w, 1]).times(g));
    m.push(LayerCall::new(format!("{prefix}.gates"), LayerSpec::Sigmoid).times(g));
    m.push(LayerCall::new(format!("{prefix}.gate_h"), LayerSpec::Mul).on(&gx).times(g));
    m.push(LayerCall::new(format!("{prefix}.gate_w"), LayerSpec::Mul).on(&gx).times(g));
    m.push(LayerCall::new(format!("{prefix}.gn"), LayerSpec::GroupNorm { channels: cg, groups: cg }).on(&gx).times(g));
}

fn cross_layers(m: &mut Module, prefix: &str, cg: usize, h: usize, w: usize, g: usize) {
    let gx = [cg, h, w];
    for side in ["a", "b"] {
        m.push(LayerCall::new(format!("{prefix}.gap_{side}"), LayerSpec::GlobalAvgPool).on(&gx).times(g));
        m.push(LayerCall::new(format!("{prefix}.softmax_{side}"), LayerSpec::Softmax).times(g));
        m.push(LayerCall::new(format!("{prefix}.matmul_{side}"), LayerSpec::MatMul { n: h * w }).on(&[1, cg]).times(g));
    }
    m.push(LayerCall::new(format!("{prefix}.sum"), LayerSpec::Add).on(&[1, h * w]).times(g));
    m.push(LayerCall::new(format!("{prefix}.sigmoid"), LayerSpec::Sigmoid).times(g));
    m.push(LayerCall::new(format!("{prefix}.reweight"), LayerSpec::Mul).on(&gx).times(g));
}

fn group_channels(c: usize, g: usize) -> Result<usize> {
    if g == 0 || c % g != 0 {
        return Err(invalid("cost module", format!("{c} channels not divisible into {g} groups")));
    }
    Ok(c / g)
}

/// Layers of an EMA block alone, on `(C,H,W)` with `G` groups.
pub fn ema_layers(c: usize, h: usize, w: usize, g: usize) -> Result<Module> {
    let cg = group_channels(c, g)?;
    let mut m = Module::new("ema");
    spatial_layers(&mut m, "ema.spatial", cg, h, w, g);
    m.push(LayerCall::new("ema.conv3x3", conv(cg, cg, 3, 1, 1)).on(&[cg, h, w]).times(g));
    cross_layers(&mut m, "ema.cross", cg, h, w, g);
    Ok(m)
}

/// Layers of an FE-EMA block alone, on `(C,H,W)` with `G` groups.
pub fn fe_ema_layers(c: usize, h: usize, w: usize, g: usize, mode: AlphaMode) -> Result<Module> {
    let cg = group_channels(c, g)?;
    if h < 2 || w < 2 {
        return Err(invalid("cost module", format!("spatial size {h}x{w} below 2x2")));
    }
    let (h2, w2) = (half_len(h), half_len(w));
    let mut m = Module::new("fe_ema");
    spatial_layers(&mut m, "fe_ema.spatial", cg, h, w, g);
    m.push(LayerCall::new("fe_ema.dwt", LayerSpec::Dwt2d).on(&[c, h, w]));
    m.push(LayerCall::new("fe_ema.approx_conv", conv(c, c, 3, 1, g)).on(&[c, h2, w2]));
    m.push(LayerCall::new("fe_ema.detail_gain", LayerSpec::Gain { count: 3 * c }).on(&[3, c, h2, w2]));
    m.push(LayerCall::new("fe_ema.idwt", LayerSpec::Idwt2d { height: h, width: w }).on(&[4, c, h2, w2]));
    let alphas = match mode {
        AlphaMode::PerChannel => c,
        AlphaMode::Scalar => 1,
    };
    m.push(LayerCall::new("fe_ema.alpha_gap", LayerSpec::GlobalAvgPool).on(&[c, h, w]));
    m.push(LayerCall::new(
        "fe_ema.alpha_linear",
        LayerSpec::Linear {
            in_features: c,
            out_features: alphas,
            bias: true,
        },
    ));
    m.push(LayerCall::new("fe_ema.alpha_sigmoid", LayerSpec::Sigmoid));
    m.push(LayerCall::new("fe_ema.fuse", LayerSpec::Fuse).on(&[c, h, w]));
    cross_layers(&mut m, "fe_ema.cross", cg, h, w, g);
    Ok(m)
}

fn hosted(label: &str, c: usize, h: usize, w: usize, block: Module) -> Module {
    let mut m = baseline_module(c, h, w);
    m.label = label.to_string();
    m.layers.extend(block.layers);
    m
}

pub fn ema_module(c: usize, h: usize, w: usize, g: usize) -> Result<Module> {
    Ok(hosted("ema", c, h, w, ema_layers(c, h, w, g)?))
}

pub fn fe_ema_module(c: usize, h: usize, w: usize, g: usize, mode: AlphaMode) -> Result<Module> {
    Ok(hosted("fe_ema", c, h, w, fe_ema_layers(c, h, w, g, mode)?))
}

/// One configuration of the ordering grid: `(C, H=W, G)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridPoint {
    pub channels: usize,
    pub size: usize,
    pub groups: usize,
}

pub fn default_grid() -> Vec<GridPoint> {
    let mut v = Vec::new();
    for channels in [8, 16, 32, 64] {
        for size in [16, 32, 64] {
            for groups in [2, 4, 8] {
                v.push(GridPoint { channels, size, groups });
            }
        }
    }
    v
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderingRow {
    pub point: GridPoint,
    /// Baseline, EMA, FE-EMA.
    pub reports: [CostReport; 3],
}

impl OrderingRow {
    pub fn params_ordered(&self) -> bool {
        let [b, e, f] = &self.reports;
        b.total_params < e.total_params && e.total_params < f.total_params
    }

    pub fn flops_ordered(&self) -> bool {
        let [b, e, f] = &self.reports;
        b.total_flops < f.total_flops && f.total_flops < e.total_flops
    }
}

pub fn ordering_row(point: GridPoint, mode: AlphaMode) -> Result<OrderingRow> {
    let GridPoint { channels: c, size: s, groups: g } = point;
    let input = [c, s, s];
    Ok(OrderingRow {
        point,
        reports: [
            cost_report(&baseline_module(c, s, s), &input)?,
            cost_report(&ema_module(c, s, s, g)?, &input)?,
            cost_report(&fe_ema_module(c, s, s, g, mode)?, &input)?,
        ],
    })
}

/// Three rows per grid point with the ordering verdicts.
pub fn ordering_csv(rows: &[OrderingRow]) -> String {
    let mut s = format!("# {FLOPS_CONVENTION}\nchannels,size,groups,module,params,flops,params_rank,flops_rank\n");
    for r in rows {
        let p = if r.params_ordered() { "baseline<ema<fe_ema" } else { "violated" };
        let f = if r.flops_ordered() { "baseline<fe_ema<ema" } else { "violated" };
        for rep in &r.reports {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{p},{f}",
                r.point.channels, r.point.size, r.point.groups, rep.label, rep.total_params, rep.total_flops
            );
        }
    }
    s
}

/// Normalised `(H,W)` map and what produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Tensor,
    pub model_id: String,
    pub input_id: String,
    pub target: String,
}

/// Bilinear resize of `(h,w)` to `(oh,ow)` with half-pixel centres.
pub fn bilinear_resize(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 || oh == 0 || ow == 0 {
        return Err(invalid("bilinear_resize", format!("cannot resize {s:?} to {oh}x{ow}")));
    }
    let (h, w) = (s[0], s[1]);
    let src = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, x - i0 as f64)
    };
    let d = t.data();
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        let (r0, r1, fr) = src(r, oh, h);
        for c in 0..ow {
            let (c0, c1, fc) = src(c, ow, w);
            let top = d[r0 * w + c0] * (1.0 - fc) + d[r0 * w + c1] * fc;
            let bot = d[r1 * w + c0] * (1.0 - fc) + d[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bot * fr);
        }
    }
    Tensor::new(&[oh, ow], out)
}

/// Maps to `[0,1]` by min-max scaling; constant maps become all zero.
pub fn normalize_unit(t: &Tensor) -> Tensor {
    let (lo, hi) = (t.min(), t.max());
    if !(hi > lo) {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| (v - lo) / (hi - lo))
}

/// `ReLU(Σ_c mean(grad_c) · act_c)` resized to `(oh,ow)` and normalised.
pub fn cam_from(activation: &Tensor, grad: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let s = activation.shape();
    if s.len() != 3 {
        return Err(invalid("grad_cam", format!("layer output {s:?} is not a (C,H,W) feature map")));
    }
    if grad.shape() != s {
        return Err(mismatch("grad_cam", grad.shape(), s));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut map = vec![0.0; hw];
    for ch in 0..c {
        let gslice = &grad.data()[ch * hw..(ch + 1) * hw];
        let weight = gslice.iter().sum::<f64>() / hw as f64;
        if weight == 0.0 {
            continue;
        }
        for (m, a) in map.iter_mut().zip(&activation.data()[ch * hw..(ch + 1) * hw]) {
            *m += weight * a;
        }
    }
    let map = Tensor::new(&[s[1], s[2]], map.into_iter().map(|v| v.max(0.0)).collect())?;
    Ok(normalize_unit(&bilinear_resize(&map, oh, ow)?))
}

/// Grad-CAM of `target` with respect to `layer`, both on tape `g`.
pub fn grad_cam_graph(g: &Graph, target: Var, layer: Var, oh: usize, ow: usize) -> Result<Tensor> {
    if !g.reaches(target, layer) {
        return Err(invalid("grad_cam", "layer not on the gradient path to the target"));
    }
    let act = g.value(layer);
    let grads = g.backward(target)?;
    let grad = grads.get_or_zeros(layer, act.shape());
    cam_from(act, &grad, oh, ow)
}

/// Scalar read off a predicted chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamTarget {
    /// Mean over the chunk of one action coordinate.
    ActionMean(usize),
    /// Mean over the whole chunk.
    ChunkMean,
}

impl CamTarget {
    pub fn describe(&self) -> String {
        match self {
            CamTarget::ActionMean(d) => format!("mean of action[{d}] over the chunk"),
            CamTarget::ChunkMean => "mean of the predicted chunk".into(),
        }
    }
}

/// Backbone stage output of one camera view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CamLayer {
    pub view: usize,
    pub stage: usize,
}

pub fn grad_cam(policy: &Policy, obs: &Observation, target: CamTarget, layer: CamLayer, input_id: &str) -> Result<Heatmap> {
    let stages = policy.layout.stages.len();
    if layer.view >= obs.images.len() || layer.stage >= stages {
        return Err(invalid(
            "grad_cam",
            format!("layer view {} stage {} not on the gradient path", layer.view, layer.stage),
        ));
    }
    let mut g = Graph::new();
    let p = policy.store.bind(&mut g);
    let z = g.constant(Tensor::zeros(&[policy.config.d_z]));
    let tr = policy.forward(&mut g, &p, obs, z)?;
    let scalar = match target {
        CamTarget::ChunkMean => g.mean(tr.actions)?,
        CamTarget::ActionMean(d) => {
            let dims = g.shape(tr.actions)[1];
            if d >= dims {
                return Err(invalid("grad_cam", format!("action index {d} out of {dims}")));
            }
            let col = g.slice(tr.actions, 1, d, 1)?;
            g.mean(col)?
        }
    };
    let (h, w) = obs.image_hw();
    let values = grad_cam_graph(&g, scalar, tr.stage_outputs[layer.view][layer.stage], h, w)?;
    Ok(Heatmap {
        values,
        model_id: format!("{}:{:016x}", policy.config.variant, policy.architecture_hash()),
        input_id: input_id.to_string(),
        target: format!("{} at view {} stage {}", target.describe(), layer.view, layer.stage),
    })
}

pub fn alpha_csv(rows: &[AlphaRow]) -> String {
    let mut s = String::from("step,block,mean_alpha,min_alpha,max_alpha\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:e},{:e},{:e}", r.step, r.block, r.stat.mean, r.stat.min, r.stat.max);
    }
    s
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,loss,l1,kl,grad_norm,val_l1\n");
    for r in rows {
        let val = r.val_l1.map(|v| format!("{v:e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:e},{:e},{:e},{:e},{val}", r.step, r.loss, r.l1, r.kl, r.grad_norm);
    }
    s
}

/// Rows and columns of a 2D tensor, with a `row` index column.
pub fn matrix_csv(t: &Tensor, column_prefix: &str) -> Result<String> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(invalid("matrix_csv", format!("expected a matrix, got {s:?}")));
    }
    let mut out = String::from("row");
    for c in 0..s[1] {
        let _ = write!(out, ",{column_prefix}{c}");
    }
    out.push('\n');
    for r in 0..s[0] {
        let _ = write!(out, "{r}");
        for v in &t.data()[r * s[1]..(r + 1) * s[1]] {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Binary 8-bit greyscale image of a `(H,W)` matrix, min-max scaled.
pub fn pgm_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(invalid("pgm", format!("expected a matrix, got {s:?}")));
    }
    let unit = normalize_unit(t);
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(unit.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_pgm(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = pgm_bytes(t)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// TS-DWT weights and the encoder output with and without them applied,
/// for one observation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention {
    /// `(D)`.
    pub weights: Tensor,
    /// `(L,D)`, encoder output after the channel weights.
    pub with_ts_dwt: Tensor,
    /// `(L,D)`, raw encoder output.
    pub without_ts_dwt: Tensor,
}

impl ChannelAttention {
    /// `with / without` elementwise; zero where the raw value is zero.
    pub fn ratio(&self) -> Tensor {
        self.with_ts_dwt
            .zip_map(&self.without_ts_dwt, |a, b| if b == 0.0 { 0.0 } else { a / b })
            .expect("aligned exports")
    }
}

pub fn export_channel_attention(policy: &Policy, batch: &[Observation]) -> Result<Vec<ChannelAttention>> {
    if policy.layout.ts_dwt.is_none() {
        return Err(invalid(
            "export_channel_attention",
            format!("variant {} has no TS-DWT block", policy.config.variant),
        ));
    }
    batch
        .iter()
        .map(|obs| {
            let mut g = Graph::new();
            let p = policy.store.bind_frozen(&mut g);
            let z = g.constant(Tensor::zeros(&[policy.config.d_z]));
            let tr = policy.forward(&mut g, &p, obs, z)?;
            let ts = tr.ts_dwt.expect("ts_dwt present");
            Ok(ChannelAttention {
                weights: g.value(ts.weights).clone(),
                with_ts_dwt: g.value(ts.output).clone(),
                without_ts_dwt: g.value(tr.encoder_output).clone(),
            })
        })
        .collect()
}
