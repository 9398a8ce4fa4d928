//! Toy-scale action-chunking CVAE policy with optional EMA / FE-EMA
//! backbone attention and TS-DWT on the encoder sequence.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::attention::{self, AlphaMode, EmaParams, FeEmaParams, TsDwtParams, TsDwtTrace};
use crate::dataset::{Episode, Observation, World, ACTION_DIM, IMU_DIM, JOINT_DIM, VIEWS};
use crate::error::{invalid, mismatch, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Ema,
    FeEma,
    TsDwt,
    EmaTsDwt,
    #[default]
    Fewt,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Ema,
        Variant::FeEma,
        Variant::TsDwt,
        Variant::EmaTsDwt,
        Variant::Fewt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Ema => "ema",
            Variant::FeEma => "fe_ema",
            Variant::TsDwt => "ts_dwt",
            Variant::EmaTsDwt => "ema_ts_dwt",
            Variant::Fewt => "fewt",
        }
    }

    pub fn backbone_attention(self) -> BackboneAttention {
        match self {
            Variant::Baseline | Variant::TsDwt => BackboneAttention::None,
            Variant::Ema | Variant::EmaTsDwt => BackboneAttention::Ema,
            Variant::FeEma | Variant::Fewt => BackboneAttention::FeEma,
        }
    }

    pub fn uses_ts_dwt(self) -> bool {
        matches!(self, Variant::TsDwt | Variant::EmaTsDwt | Variant::Fewt)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}' (baseline|ema|fe_ema|ts_dwt|ema_ts_dwt|fewt)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneAttention {
    None,
    Ema,
    FeEma,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub variant: Variant,
    pub alpha_mode: AlphaMode,
    pub image_height: usize,
    pub image_width: usize,
    pub k: usize,
    pub d_z: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_hidden: usize,
    pub stage_channels: Vec<usize>,
    pub attention_groups: usize,
    pub cvae_hidden: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Fewt,
            alpha_mode: AlphaMode::PerChannel,
            image_height: 24,
            image_width: 32,
            k: 16,
            d_z: 8,
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 1,
            ffn_hidden: 128,
            stage_channels: vec![8, 16, 32],
            attention_groups: 2,
            cvae_hidden: 64,
        }
    }
}

impl PolicyConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    /// Spatial size after each stride-2 stage.
    pub fn stage_sizes(&self) -> Vec<(usize, usize)> {
        let mut hw = (self.image_height, self.image_width);
        self.stage_channels
            .iter()
            .map(|_| {
                hw = ((hw.0 - 1) / 2 + 1, (hw.1 - 1) / 2 + 1);
                hw
            })
            .collect()
    }

    pub fn tokens_per_view(&self) -> usize {
        let (h, w) = *self.stage_sizes().last().expect("at least one stage");
        h * w
    }

    /// z, joints, imu, then every view's feature tokens.
    pub fn sequence_len(&self) -> usize {
        3 + VIEWS * self.tokens_per_view()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.k == 0 || self.d_z == 0 {
            return bad(format!("k={} and d_z={} must be positive", self.k, self.d_z));
        }
        if self.image_height < 8 || self.image_width < 8 {
            return bad(format!("image {}x{} below 8x8", self.image_height, self.image_width));
        }
        if self.stage_channels.is_empty() {
            return bad("no backbone stages".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.variant.backbone_attention() != BackboneAttention::None {
            for &c in &self.stage_channels {
                if self.attention_groups == 0 || c % self.attention_groups != 0 {
                    return bad(format!("stage width {c} not divisible into {} groups", self.attention_groups));
                }
            }
            if self.stage_sizes().iter().any(|&(h, w)| h < 2 || w < 2) {
                return bad("attention stage smaller than 2x2".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum StageAttention {
    None,
    Ema(EmaParams),
    FeEma(FeEmaParams),
}

#[derive(Clone, Copy, Debug)]
pub struct Stage {
    pub conv: Conv2d,
    pub attention: StageAttention,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct CvaeEncoder {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub stages: Vec<Stage>,
    pub image_proj: Linear,
    pub joint_proj: Linear,
    pub imu_proj: Linear,
    pub z_proj: Linear,
    pub positions: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub ts_dwt: Option<TsDwtParams>,
    pub queries: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub head: Linear,
    pub cvae: CvaeEncoder,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

/// Values recorded during one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub actions: Var,
    /// `stage_outputs[view][stage]`, each `(C,H,W)` after attention.
    pub stage_outputs: Vec<Vec<Var>>,
    /// `alphas[view][block]` for every FE-EMA block.
    pub alphas: Vec<Vec<Var>>,
    pub encoder_output: Var,
    pub ts_dwt: Option<TsDwtTrace>,
}

impl Policy {
    /// Initialises every module from a stream named after it, so variants
    /// sharing a module also share its initial values.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = rng::sub_seed(seed, rng::INIT);
        let r = |name: &str| rng::stream(init, name);
        let mut store = ParamStore::new();
        let d = config.d_model;

        let mut stages = Vec::new();
        let mut in_ch = 3;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            let name = format!("stage{i}");
            let conv = Conv2d::new(&mut store, &format!("{name}.conv"), in_ch, c, 3, 2, 1, 1, &mut r(&format!("{name}.conv")))?;
            let attn_name = format!("{name}.attn");
            let attention = match config.variant.backbone_attention() {
                BackboneAttention::None => StageAttention::None,
                BackboneAttention::Ema => StageAttention::Ema(EmaParams::new(
                    &mut store,
                    &attn_name,
                    c,
                    config.attention_groups,
                    &mut r(&attn_name),
                )?),
                BackboneAttention::FeEma => StageAttention::FeEma(FeEmaParams::new(
                    &mut store,
                    &attn_name,
                    c,
                    config.attention_groups,
                    config.alpha_mode,
                    &mut r(&attn_name),
                )?),
            };
            stages.push(Stage { conv, attention });
            in_ch = c;
        }
        let feat = in_ch;
        let image_proj = Linear::new(&mut store, "image_proj", feat, d, &mut r("image_proj"));
        let joint_proj = Linear::new(&mut store, "joint_proj", JOINT_DIM, d, &mut r("joint_proj"));
        let imu_proj = Linear::new(&mut store, "imu_proj", IMU_DIM, d, &mut r("imu_proj"));
        let z_proj = Linear::new(&mut store, "z_proj", config.d_z, d, &mut r("z_proj"));
        let positions = store.uniform("positions", &[config.sequence_len(), d], d, &mut r("positions"));

        let mut encoder = Vec::new();
        for i in 0..config.encoder_layers {
            let n = format!("encoder{i}");
            let mut lr = r(&n);
            encoder.push(EncoderLayer {
                attn: MultiHeadAttention::new(&mut store, &format!("{n}.attn"), d, config.heads, &mut lr)?,
                norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d),
                ffn: FeedForward::new(&mut store, &format!("{n}.ffn"), d, config.ffn_hidden, &mut lr),
                norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d),
            });
        }
        let ts_dwt = if config.variant.uses_ts_dwt() {
            Some(TsDwtParams::new(&mut store, "ts_dwt", config.sequence_len(), d, &mut r("ts_dwt"))?)
        } else {
            None
        };
        let queries = store.uniform("queries", &[config.k, d], d, &mut r("queries"));
        let mut decoder = Vec::new();
        for i in 0..config.decoder_layers {
            let n = format!("decoder{i}");
            let mut lr = r(&n);
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(&mut store, &format!("{n}.self_attn"), d, config.heads, &mut lr)?,
                norm1: LayerNorm::new(&mut store, &format!("{n}.norm1"), d),
                cross_attn: MultiHeadAttention::new(&mut store, &format!("{n}.cross_attn"), d, config.heads, &mut lr)?,
                norm2: LayerNorm::new(&mut store, &format!("{n}.norm2"), d),
                ffn: FeedForward::new(&mut store, &format!("{n}.ffn"), d, config.ffn_hidden, &mut lr),
                norm3: LayerNorm::new(&mut store, &format!("{n}.norm3"), d),
            });
        }
        let head = Linear::new(&mut store, "head", d, ACTION_DIM, &mut r("head"));
        let cvae_in = config.k * ACTION_DIM + JOINT_DIM + IMU_DIM;
        let mut cr = r("cvae");
        let cvae = CvaeEncoder {
            hidden: Linear::new(&mut store, "cvae.hidden", cvae_in, config.cvae_hidden, &mut cr),
            out: Linear::new(&mut store, "cvae.out", config.cvae_hidden, 2 * config.d_z, &mut cr),
        };
        Ok(Self {
            config,
            store,
            layout: Layout {
                stages,
                image_proj,
                joint_proj,
                imu_proj,
                z_proj,
                positions,
                encoder,
                ts_dwt,
                queries,
                decoder,
                head,
                cvae,
            },
        })
    }

    /// Text that fixes the parameter layout: every name and shape.
    pub fn architecture(&self) -> String {
        let mut s = format!(
            "variant={} alpha_mode={} image={}x{} k={} d_z={} d_model={} heads={}\n",
            self.config.variant,
            self.config.alpha_mode.as_str(),
            self.config.image_height,
            self.config.image_width,
            self.config.k,
            self.config.d_z,
            self.config.d_model,
            self.config.heads
        );
        for (name, t) in self.store.iter() {
            s.push_str(&format!("{name} {:?}\n", t.shape()));
        }
        s
    }

    pub fn architecture_hash(&self) -> u64 {
        let d = Sha256::digest(self.architecture().as_bytes());
        u64::from_le_bytes(d[..8].try_into().expect("digest length"))
    }

    pub fn fe_ema_blocks(&self) -> usize {
        self.layout
            .stages
            .iter()
            .filter(|s| matches!(s.attention, StageAttention::FeEma(_)))
            .count()
    }

    /// Identity FE-EMA: frequency branch pass-through, α saturated to 1.
    pub fn set_fe_ema_identity(&mut self, bias: f64) {
        for s in &self.layout.stages {
            if let StageAttention::FeEma(fe) = s.attention {
                fe.frequency.set_identity(&mut self.store);
                fe.saturate_alpha(&mut self.store, bias);
            }
        }
    }

    pub fn set_ema_conv_identity(&mut self) {
        for s in &self.layout.stages {
            if let StageAttention::Ema(e) = s.attention {
                e.conv3x3.set_identity(&mut self.store);
            }
        }
    }

    /// Copies every same-named, same-shaped tensor from `other`.
    pub fn copy_shared_from(&mut self, other: &Policy) -> usize {
        let mut n = 0;
        for id in self.store.ids().collect::<Vec<_>>() {
            if let Some(src) = other.store.find(self.store.name(id)) {
                let t = other.store.get(src).clone();
                if self.store.set(id, t).is_ok() {
                    n += 1;
                }
            }
        }
        n
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        obs.validate()?;
        let want = (self.config.image_height, self.config.image_width);
        if obs.image_hw() != want {
            return Err(mismatch("policy observation", &[obs.image_hw().0, obs.image_hw().1], &[want.0, want.1]));
        }
        Ok(())
    }

    /// Backbone of one view: `(3,H,W)` → per-stage outputs.
    pub fn backbone(&self, g: &mut Graph, p: &Bound, image: Var, alphas: &mut Vec<Var>) -> Result<Vec<Var>> {
        let mut x = image;
        let mut outs = Vec::with_capacity(self.layout.stages.len());
        for stage in &self.layout.stages {
            x = stage.conv.forward(g, p, x)?;
            x = g.silu(x)?;
            x = match &stage.attention {
                StageAttention::None => x,
                StageAttention::Ema(e) => attention::ema_forward(g, p, e, x)?,
                StageAttention::FeEma(fe) => {
                    let tr = attention::fe_ema_trace(g, p, fe, x)?;
                    alphas.push(tr.alpha);
                    tr.output
                }
            };
            outs.push(x);
        }
        Ok(outs)
    }

    /// `(μ, logvar)`, each `(d_z)`.
    pub fn cvae_encode(&self, g: &mut Graph, p: &Bound, actions: Var, joints: Var, imu: Var) -> Result<(Var, Var)> {
        let k = self.config.k;
        if g.shape(actions) != [k, ACTION_DIM] {
            return Err(mismatch("cvae_encode actions", g.shape(actions), &[k, ACTION_DIM]));
        }
        if g.shape(joints) != [JOINT_DIM] || g.shape(imu) != [IMU_DIM] {
            return Err(mismatch("cvae_encode joints/imu", g.shape(joints), &[JOINT_DIM]));
        }
        let flat = g.reshape(actions, &[k * ACTION_DIM])?;
        let input = g.concat(&[flat, joints, imu], 0)?;
        let h = self.layout.cvae.hidden.forward(g, p, input)?;
        let h = g.silu(h)?;
        let out = self.layout.cvae.out.forward(g, p, h)?;
        let dz = self.config.d_z;
        let mu = g.slice(out, 0, 0, dz)?;
        let logvar = g.slice(out, 0, dz, dz)?;
        Ok((mu, logvar))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, obs: &Observation, z: Var) -> Result<ForwardTrace> {
        self.check_obs(obs)?;
        let images: Vec<Var> = obs.images.iter().map(|im| g.constant(im.clone())).collect();
        let joints = g.constant(obs.joints.clone());
        let imu = g.constant(obs.imu.clone());
        self.forward_vars(g, p, &images, joints, imu, z)
    }

    pub fn forward_vars(&self, g: &mut Graph, p: &Bound, images: &[Var], joints: Var, imu: Var, z: Var) -> Result<ForwardTrace> {
        let l = &self.layout;
        let d = self.config.d_model;
        if g.shape(z) != [self.config.d_z] {
            return Err(mismatch("policy_forward z", g.shape(z), &[self.config.d_z]));
        }
        let mut stage_outputs = Vec::with_capacity(VIEWS);
        let mut alphas = Vec::with_capacity(VIEWS);
        let mut tokens = Vec::with_capacity(3 + VIEWS);
        let zt = l.z_proj.forward(g, p, z)?;
        let jt = l.joint_proj.forward(g, p, joints)?;
        let it = l.imu_proj.forward(g, p, imu)?;
        for t in [zt, jt, it] {
            tokens.push(g.reshape(t, &[1, d])?);
        }
        for &image in images {
            let mut view_alphas = Vec::new();
            let outs = self.backbone(g, p, image, &mut view_alphas)?;
            let feat = *outs.last().expect("stages");
            let s = g.shape(feat).to_vec();
            let flat = g.reshape(feat, &[s[0], s[1] * s[2]])?;
            let seq = g.transpose(flat)?;
            tokens.push(l.image_proj.forward(g, p, seq)?);
            stage_outputs.push(outs);
            alphas.push(view_alphas);
        }
        let seq = g.concat(&tokens, 0)?;
        let mut x = g.add(seq, p.get(l.positions))?;
        for layer in &l.encoder {
            let a = layer.attn.forward(g, p, x, x)?;
            let r = g.add(x, a)?;
            x = layer.norm1.forward(g, p, r)?;
            let f = layer.ffn.forward(g, p, x)?;
            let r = g.add(x, f)?;
            x = layer.norm2.forward(g, p, r)?;
        }
        let encoder_output = x;
        let (memory, ts_dwt) = match &l.ts_dwt {
            Some(ts) => {
                let tr = attention::ts_dwt_trace(g, p, ts, x)?;
                (tr.output, Some(tr))
            }
            None => (x, None),
        };
        let mut q = p.get(l.queries);
        for layer in &l.decoder {
            let a = layer.self_attn.forward(g, p, q, q)?;
            let r = g.add(q, a)?;
            q = layer.norm1.forward(g, p, r)?;
            let c = layer.cross_attn.forward(g, p, q, memory)?;
            let r = g.add(q, c)?;
            q = layer.norm2.forward(g, p, r)?;
            let f = layer.ffn.forward(g, p, q)?;
            let r = g.add(q, f)?;
            q = layer.norm3.forward(g, p, r)?;
        }
        let actions = l.head.forward(g, p, q)?;
        Ok(ForwardTrace {
            actions,
            stage_outputs,
            alphas,
            encoder_output,
            ts_dwt,
        })
    }

    /// Deterministic chunk with `z = 0`.
    pub fn infer(&self, obs: &Observation) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let z = g.constant(Tensor::zeros(&[self.config.d_z]));
        let tr = self.forward(&mut g, &p, obs, z)?;
        Ok(g.value(tr.actions).clone())
    }

    /// Forward pass with an explicit style variable.
    pub fn policy_forward(&self, obs: &Observation, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g);
        let z = g.constant(z.clone());
        let tr = self.forward(&mut g, &p, obs, z)?;
        Ok(g.value(tr.actions).clone())
    }
}

/// `½ Σ (μ² + e^logvar − 1 − logvar)`.
pub fn kl_divergence(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let m2 = g.square(mu)?;
    let ev = g.exp(logvar)?;
    let s = g.add(m2, ev)?;
    let s = g.sub(s, logvar)?;
    let s = g.add_scalar(s, -1.0)?;
    let total = g.sum(s)?;
    g.scale(total, 0.5)
}

pub fn kl_closed_form(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + lv.exp() - 1.0 - lv).sum::<f64>()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!("unknown optimizer '{s}' (sgd|adam)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            learning_rate: 1e-3,
            grad_clip: 10.0,
            batch_size: 8,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

/// Gradient descent with global-norm clipping; optionally Adam moments.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub grad_clip: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            grad_clip: cfg.grad_clip,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies one update and returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut [Tensor]) -> Result<f64> {
        let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { op: "optimizer" });
        }
        if self.grad_clip > 0.0 && norm > self.grad_clip {
            let s = self.grad_clip / norm;
            for gr in grads.iter_mut() {
                *gr = gr.scale(s);
            }
        }
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, gr) in store.tensors_mut().iter_mut().zip(grads.iter()) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(gr.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|gr| Tensor::zeros(gr.shape())).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.t as i32);
                let c2 = 1.0 - Self::BETA2.powi(self.t as i32);
                for (((p, gr), m), v) in store.tensors_mut().iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
                    for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(gr.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *mv = Self::BETA1 * *mv + (1.0 - Self::BETA1) * gv;
                        *vv = Self::BETA2 * *vv + (1.0 - Self::BETA2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
        Ok(norm)
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub obs: Observation,
    pub target: Tensor,
}

/// Per-block α summary over a batch: mean, min and max across channels,
/// views and samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaStat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub l1: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub alphas: Vec<AlphaStat>,
}

/// Mean of `L1 + β·KL` over the batch for the current parameters, with
/// gradients averaged over samples.
pub fn loss_and_grads(policy: &Policy, batch: &[Sample], beta: f64, noise: &mut ChaCha8Rng) -> Result<(StepStats, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(invalid("train_step", "empty batch"));
    }
    let k = policy.config.k;
    let n = batch.len() as f64;
    let mut grads: Vec<Tensor> = policy.store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let blocks = policy.fe_ema_blocks();
    let mut alpha_acc = vec![(0.0, 0usize, f64::INFINITY, f64::NEG_INFINITY); blocks];
    let (mut loss, mut l1_sum, mut kl_sum) = (0.0, 0.0, 0.0);
    for s in batch {
        if s.target.shape() != [k, ACTION_DIM] {
            return Err(mismatch("train_step target", s.target.shape(), &[k, ACTION_DIM]));
        }
        let mut g = Graph::new();
        let p = policy.store.bind(&mut g);
        let target = g.constant(s.target.clone());
        let joints = g.constant(s.obs.joints.clone());
        let imu = g.constant(s.obs.imu.clone());
        let (mu, logvar) = policy.cvae_encode(&mut g, &p, target, joints, imu)?;
        let eps: Vec<f64> = (0..policy.config.d_z).map(|_| noise.sample(StandardNormal)).collect();
        let eps = g.constant(Tensor::from_vec(eps));
        let half = g.scale(logvar, 0.5)?;
        let std = g.exp(half)?;
        let noise_term = g.mul(std, eps)?;
        let z = g.add(mu, noise_term)?;
        let images: Vec<Var> = s.obs.images.iter().map(|im| g.constant(im.clone())).collect();
        policy.check_obs(&s.obs)?;
        let tr = policy.forward_vars(&mut g, &p, &images, joints, imu, z)?;
        let diff = g.sub(tr.actions, target)?;
        let abs = g.abs(diff)?;
        let l1 = g.mean(abs)?;
        let kl = kl_divergence(&mut g, mu, logvar)?;
        let weighted = g.scale(kl, beta)?;
        let total = g.add(l1, weighted)?;
        let total = g.scale(total, 1.0 / n)?;
        let lv = g.value(total).item() * n;
        if !lv.is_finite() {
            return Err(Error::NonFinite { op: "train_step loss" });
        }
        loss += lv / n;
        l1_sum += g.value(l1).item();
        kl_sum += g.value(kl).item();
        for view in &tr.alphas {
            for (b, a) in view.iter().enumerate() {
                let acc = &mut alpha_acc[b];
                for &v in g.value(*a).data() {
                    acc.0 += v;
                    acc.1 += 1;
                    acc.2 = acc.2.min(v);
                    acc.3 = acc.3.max(v);
                }
            }
        }
        let gr = g.backward(total)?;
        for (i, acc) in grads.iter_mut().enumerate() {
            if let Some(t) = gr.get(p.vars()[i]) {
                acc.add_assign(t);
            }
        }
    }
    let stats = StepStats {
        loss,
        l1: l1_sum / n,
        kl: kl_sum / n,
        grad_norm: 0.0,
        alphas: alpha_acc
            .into_iter()
            .map(|(s, c, lo, hi)| AlphaStat {
                mean: s / c as f64,
                min: lo,
                max: hi,
            })
            .collect(),
    };
    Ok((stats, grads))
}

pub fn train_step(
    policy: &mut Policy,
    opt: &mut Optimizer,
    batch: &[Sample],
    beta: f64,
    noise: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let (mut stats, mut grads) = loss_and_grads(policy, batch, beta, noise)?;
    stats.grad_norm = opt.step(&mut policy.store, &mut grads)?;
    if policy.store.iter().any(|(_, t)| !t.all_finite()) {
        return Err(Error::NonFinite { op: "train_step parameters" });
    }
    Ok(stats)
}

/// Observation at `t` and the `k` actions that follow it.
pub fn sample_at(e: &Episode, t: usize, k: usize) -> Sample {
    Sample {
        obs: e.records[t].obs.clone(),
        target: e.chunk(t, k),
    }
}

/// Mean absolute chunk error of `infer` over every `stride`-th step.
pub fn validation_l1(policy: &Policy, episodes: &[&Episode], stride: usize) -> Result<f64> {
    let k = policy.config.k;
    let (mut total, mut count) = (0.0, 0usize);
    for e in episodes {
        for t in (0..e.len()).step_by(stride.max(1)) {
            let pred = policy.infer(&e.records[t].obs)?;
            let target = e.chunk(t, k);
            total += pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rollout {
    pub delivered: bool,
    pub delivery_error: f64,
}

/// Closed-loop execution: observe, predict a chunk, execute it fully.
pub fn rollout(policy: &Policy, e: &Episode) -> Result<Rollout> {
    let mut world = World::new(e.height, e.width, e.scene);
    let k = policy.config.k;
    let mut t = 0;
    while t < e.len() {
        let chunk = policy.infer(&world.observe())?;
        for i in 0..k.min(e.len() - t) {
            world.apply(&chunk.data()[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
        }
        t += k;
    }
    Ok(Rollout {
        delivered: world.delivered(),
        delivery_error: world.delivery_error(),
    })
}

/// Uniform episode, uniform step.
pub fn sample_batch(episodes: &[&Episode], k: usize, batch_size: usize, r: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..batch_size)
        .map(|_| {
            let e = episodes[r.gen_range(0..episodes.len())];
            sample_at(e, r.gen_range(0..e.len()), k)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub l1: f64,
    pub kl: f64,
    pub grad_norm: f64,
    pub val_l1: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaRow {
    pub step: usize,
    pub block: usize,
    pub stat: AlphaStat,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub metrics: Vec<MetricRow>,
    pub alphas: Vec<AlphaRow>,
    /// Validation L1 before the first update.
    pub initial_val_l1: Option<f64>,
    /// Validation L1 after the last update.
    pub final_val_l1: Option<f64>,
}

impl TrainLog {
    /// `1 − final/initial`.
    pub fn val_reduction(&self) -> Option<f64> {
        Some(1.0 - self.final_val_l1? / self.initial_val_l1?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub steps: usize,
    /// Validation before every `eval_every`-th update (step 0 included);
    /// 0 evaluates only before the first and after the last update.
    pub eval_every: usize,
    /// Every `val_stride`-th step of each validation episode is scored.
    pub val_stride: usize,
}

/// Runs `schedule.steps` updates; `val` may be empty.
pub fn train(
    policy: &mut Policy,
    train_set: &[&Episode],
    val: &[&Episode],
    cfg: &TrainConfig,
    schedule: &Schedule,
    seed: u64,
) -> Result<TrainLog> {
    if train_set.is_empty() {
        return Err(invalid("train", "empty training set"));
    }
    let mut r = rng::stream(seed, rng::SAMPLING);
    let mut opt = Optimizer::new(cfg);
    let mut log = TrainLog::default();
    let k = policy.config.k;
    let evaluate = |p: &Policy| -> Result<Option<f64>> {
        if val.is_empty() {
            Ok(None)
        } else {
            validation_l1(p, val, schedule.val_stride).map(Some)
        }
    };
    for step in 0..schedule.steps {
        let due = step == 0 || (schedule.eval_every > 0 && step % schedule.eval_every == 0);
        let val_l1 = if due { evaluate(policy)? } else { None };
        if step == 0 {
            log.initial_val_l1 = val_l1;
        }
        let batch = sample_batch(train_set, k, cfg.batch_size, &mut r);
        let stats = train_step(policy, &mut opt, &batch, cfg.beta, &mut r)?;
        for (block, stat) in stats.alphas.iter().enumerate() {
            log.alphas.push(AlphaRow { step, block, stat: *stat });
        }
        log.metrics.push(MetricRow {
            step,
            loss: stats.loss,
            l1: stats.l1,
            kl: stats.kl,
            grad_norm: stats.grad_norm,
            val_l1,
        });
    }
    log.final_val_l1 = evaluate(policy)?;
    if schedule.steps == 0 {
        log.initial_val_l1 = log.final_val_l1;
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_task, ToyConfig};

    fn obs() -> Observation {
        generate_toy_task(1, 1, &ToyConfig::default()).unwrap()[0].records[5].obs.clone()
    }

    #[test]
    fn variants_parse_and_configure() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("act".parse::<Variant>().is_err());
        assert!(!Variant::Baseline.uses_ts_dwt());
        assert_eq!(Variant::Fewt.backbone_attention(), BackboneAttention::FeEma);
    }

    #[test]
    fn sequence_layout() {
        let c = PolicyConfig::default();
        assert_eq!(c.stage_sizes(), vec![(12, 16), (6, 8), (3, 4)]);
        assert_eq!(c.sequence_len(), 39);
    }

    #[test]
    fn output_shape_and_determinism() {
        let p = Policy::new(PolicyConfig::default(), 0).unwrap();
        let o = obs();
        let a = p.infer(&o).unwrap();
        assert_eq!(a.shape(), &[16, ACTION_DIM]);
        assert_eq!(a, p.infer(&o).unwrap());
        assert_eq!(a, p.policy_forward(&o, &Tensor::zeros(&[8])).unwrap());
    }

    #[test]
    fn kl_matches_closed_form() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::from_vec(vec![1.0]));
        let lv = g.constant(Tensor::from_vec(vec![0.0]));
        let kl = kl_divergence(&mut g, mu, lv).unwrap();
        assert_eq!(g.value(kl).item(), 0.5);
        assert_eq!(kl_closed_form(&[1.0], &[0.0]), 0.5);
    }

    #[test]
    fn architecture_hash_depends_on_variant() {
        let a = Policy::new(PolicyConfig::default(), 0).unwrap();
        let b = Policy::new(PolicyConfig::default().with_variant(Variant::Baseline), 0).unwrap();
        let c = Policy::new(PolicyConfig::default(), 9).unwrap();
        assert_ne!(a.architecture_hash(), b.architecture_hash());
        assert_eq!(a.architecture_hash(), c.architecture_hash());
    }

    #[test]
    fn shared_modules_share_initialisation() {
        let a = Policy::new(PolicyConfig::default(), 3).unwrap();
        let b = Policy::new(PolicyConfig::default().with_variant(Variant::Baseline), 3).unwrap();
        let id_a = a.store.find("decoder0.cross_attn.q.weight").unwrap();
        let id_b = b.store.find("decoder0.cross_attn.q.weight").unwrap();
        assert_eq!(a.store.get(id_a), b.store.get(id_b));
    }

    #[test]
    fn bad_observation_rejected() {
        let p = Policy::new(PolicyConfig::default().with_variant(Variant::Baseline), 0).unwrap();
        let mut o = obs();
        o.joints = Tensor::zeros(&[13]);
        assert!(p.infer(&o).is_err());
    }
}
