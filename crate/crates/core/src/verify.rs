//! Randomised verification suites for the wavelet transforms and the
//! reverse-mode gradients of every attention block and the policy.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{self, AlphaMode, EmaParams, FeEmaParams, TsDwtParams};
use crate::dataset::{generate_toy_task, ToyConfig};
use crate::error::{invalid, Result};
use crate::gradcheck::{grad_check_at, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::policy::{Policy, PolicyConfig, Variant};
use crate::rng;
use crate::tensor::Tensor;
use crate::wavelet::{self, WaveletFilters};

/// One wavelet round trip.
#[derive(Clone, Debug, PartialEq)]
pub struct DwtCase {
    /// `(L)` for 1-D cases, `(C,H,W)` for 2-D ones.
    pub shape: Vec<usize>,
    pub levels: usize,
    /// `‖x − idwt(dwt(x))‖∞`.
    pub roundtrip_error: f64,
    /// `|‖x‖² − Σ‖band‖²| / max(1, ‖x‖²)`; `None` when some level pads.
    pub energy_error: Option<f64>,
}

impl DwtCase {
    pub fn dims(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            2
        }
    }

    pub fn worst(&self) -> f64 {
        self.roundtrip_error.max(self.energy_error.unwrap_or(0.0))
    }
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn even_at_every_level(n: usize, levels: usize) -> bool {
    n % (1 << levels) == 0
}

fn relative_energy(x: &Tensor, coeffs: f64) -> f64 {
    let e = x.sq_norm();
    (e - coeffs).abs() / e.max(1.0)
}

pub fn dwt_case_1d(f: &WaveletFilters, x: &Tensor, levels: usize) -> Result<DwtCase> {
    let bands = wavelet::dwt1d_with(f, x, levels)?;
    let back = wavelet::idwt1d_with(f, &bands)?;
    let n = x.shape()[x.ndim() - 1];
    Ok(DwtCase {
        shape: x.shape().to_vec(),
        levels,
        roundtrip_error: back.max_abs_diff(x),
        energy_error: even_at_every_level(n, levels).then(|| relative_energy(x, bands.energy())),
    })
}

pub fn dwt_case_2d(f: &WaveletFilters, x: &Tensor, levels: usize) -> Result<DwtCase> {
    let p = wavelet::dwt2d_levels_with(f, x, levels)?;
    let back = wavelet::idwt2d_levels_with(f, &p)?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    Ok(DwtCase {
        shape: x.shape().to_vec(),
        levels,
        roundtrip_error: back.max_abs_diff(x),
        energy_error: (even_at_every_level(h, levels) && even_at_every_level(w, levels))
            .then(|| relative_energy(x, p.energy())),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DwtSuite {
    pub seed: u64,
    pub cases_1d: usize,
    pub cases_2d: usize,
    pub filters: WaveletFilters,
}

impl Default for DwtSuite {
    fn default() -> Self {
        Self {
            seed: 0,
            cases_1d: 1000,
            cases_2d: 600,
            filters: WaveletFilters::HAAR,
        }
    }
}

/// Every fourth case draws an arbitrary size (round trip only); the rest
/// use sizes divisible by `2^levels` so energy is checked too.
pub fn run_dwt_suite(s: &DwtSuite) -> Result<Vec<DwtCase>> {
    let mut r = rng::stream(s.seed, "dwt_suite");
    let mut out = Vec::with_capacity(s.cases_1d + s.cases_2d);
    for i in 0..s.cases_1d {
        let levels = r.gen_range(1..=6);
        let n = if i % 4 == 3 {
            r.gen_range((1usize << levels).max(2)..=256)
        } else {
            (1 << levels) * r.gen_range(1..=(256 >> levels))
        };
        let x = random_tensor(&[n], &mut r);
        out.push(dwt_case_1d(&s.filters, &x, levels.min(wavelet::max_levels(n)))?);
    }
    for i in 0..s.cases_2d {
        let levels = r.gen_range(1..=4);
        let side = |r: &mut ChaCha8Rng| {
            if i % 4 == 3 {
                r.gen_range((1usize << levels).max(2)..=64)
            } else {
                (1 << levels) * r.gen_range(1..=(64 >> levels))
            }
        };
        let (h, w) = (side(&mut r), side(&mut r));
        let c = r.gen_range(1..=3);
        let x = random_tensor(&[c, h, w], &mut r);
        let levels = levels.min(wavelet::max_levels(h)).min(wavelet::max_levels(w));
        out.push(dwt_case_2d(&s.filters, &x, levels)?);
    }
    Ok(out)
}

/// Every `(size, level)` pair for the listed sizes: 1-D on `(n)` and 2-D
/// on `(2,n,n)`.
pub fn run_dwt_sizes(f: &WaveletFilters, sizes: &[usize], seed: u64) -> Result<Vec<DwtCase>> {
    let mut r = rng::stream(seed, "dwt_sizes");
    let mut out = Vec::new();
    for &n in sizes {
        if n < 2 {
            return Err(invalid("dwt-check", format!("size {n} below 2")));
        }
        for levels in 1..=wavelet::max_levels(n) {
            out.push(dwt_case_1d(f, &random_tensor(&[n], &mut r), levels)?);
            out.push(dwt_case_2d(f, &random_tensor(&[2, n, n], &mut r), levels)?);
        }
    }
    Ok(out)
}

pub fn dwt_csv(cases: &[DwtCase]) -> String {
    let mut s = String::from("dims,shape,levels,roundtrip_error,energy_error\n");
    for c in cases {
        let shape = c.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        let energy = c.energy_error.map(|e| format!("{e:e}")).unwrap_or_default();
        s.push_str(&format!("{},{shape},{},{:e},{energy}\n", c.dims(), c.levels, c.roundtrip_error));
    }
    s
}

/// Modules covered by the gradient suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Ema,
    FeEma,
    TsDwt,
    Policy,
}

impl GradModule {
    pub const ALL: [GradModule; 4] = [GradModule::Ema, GradModule::FeEma, GradModule::TsDwt, GradModule::Policy];

    pub fn as_str(self) -> &'static str {
        match self {
            GradModule::Ema => "ema",
            GradModule::FeEma => "fe_ema",
            GradModule::TsDwt => "ts_dwt",
            GradModule::Policy => "policy",
        }
    }
}

impl std::str::FromStr for GradModule {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        GradModule::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| crate::error::Error::Config(format!("unknown module `{s}` (ema|fe_ema|ts_dwt|policy)")))
    }
}

/// Worst coordinate of one tensor in one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub module: GradModule,
    pub trial: usize,
    /// Parameter name, or `input`.
    pub tensor: String,
    pub report: GradCheckReport,
}

pub const GRAD_STEP: f64 = 1e-5;
const COORDS_PER_TENSOR: usize = 6;

fn coords(len: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= COORDS_PER_TENSOR {
        (0..len).collect()
    } else {
        let mut v = sample(r, len, COORDS_PER_TENSOR).into_vec();
        v.sort_unstable();
        v
    }
}

fn jitter(store: &mut ParamStore, scale: f64, r: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += scale * r.sample::<f64, _>(StandardNormal);
        }
    }
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Checks the input and every parameter tensor of a block `f(g, p, x)`.
fn check_block<F>(
    module: GradModule,
    trial: usize,
    store: &ParamStore,
    x: &Tensor,
    out_shape: &[usize],
    f: F,
    r: &mut ChaCha8Rng,
) -> Result<Vec<GradRow>>
where
    F: Fn(&mut Graph, &Bound, Var) -> Result<Var>,
{
    let weights = random_tensor(out_shape, r);
    let mut rows = Vec::new();
    let xc = coords(x.len(), r);
    let report = grad_check_at(
        |g, leaf| {
            let p = store.bind_frozen(g);
            let out = f(g, &p, leaf)?;
            project(g, out, &weights)
        },
        x,
        GRAD_STEP,
        &xc,
    )?;
    rows.push(GradRow {
        module,
        trial,
        tensor: "input".into(),
        report,
    });
    for id in store.ids() {
        let t = store.get(id);
        let c = coords(t.len(), r);
        let report = grad_check_at(
            |g, leaf| {
                let p = store.bind_frozen(g).with(id, leaf);
                let xv = g.constant(x.clone());
                let out = f(g, &p, xv)?;
                project(g, out, &weights)
            },
            t,
            GRAD_STEP,
            &c,
        )?;
        rows.push(GradRow {
            module,
            trial,
            tensor: store.name(id).to_string(),
            report,
        });
    }
    Ok(rows)
}

fn normal_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.sample(StandardNormal)).collect()).expect("shape")
}

pub fn grad_trial(module: GradModule, seed: u64, trial: usize) -> Result<Vec<GradRow>> {
    let mut r = rng::stream(seed, &format!("grad_suite.{}.{trial}", module.as_str()));
    match module {
        GradModule::Ema => {
            let (c, g, h, w) = (8, 2, 6, 8);
            let mut store = ParamStore::new();
            let params = EmaParams::new(&mut store, "ema", c, g, &mut r)?;
            jitter(&mut store, 0.2, &mut r);
            let x = normal_tensor(&[c, h, w], &mut r);
            check_block(module, trial, &store, &x, &[c, h, w], |g, p, x| attention::ema_forward(g, p, &params, x), &mut r)
        }
        GradModule::FeEma => {
            let (c, g, h, w) = (8, 2, 6, 8);
            let mode = if trial % 2 == 0 { AlphaMode::PerChannel } else { AlphaMode::Scalar };
            let mut store = ParamStore::new();
            let params = FeEmaParams::new(&mut store, "fe_ema", c, g, mode, &mut r)?;
            jitter(&mut store, 0.2, &mut r);
            let x = normal_tensor(&[c, h, w], &mut r);
            check_block(module, trial, &store, &x, &[c, h, w], |g, p, x| attention::fe_ema_forward(g, p, &params, x), &mut r)
        }
        GradModule::TsDwt => {
            let (len, d) = (if trial % 2 == 0 { 12 } else { 13 }, 8);
            let mut store = ParamStore::new();
            let params = TsDwtParams::new(&mut store, "ts_dwt", len, d, &mut r)?;
            jitter(&mut store, 0.2, &mut r);
            let x = normal_tensor(&[len, d], &mut r);
            check_block(module, trial, &store, &x, &[len, d], |g, p, x| attention::ts_dwt_forward(g, p, &params, x), &mut r)
        }
        GradModule::Policy => policy_trial(seed, trial, &mut r),
    }
}

/// Mean squared chunk of the full FEWT policy against one image, one
/// backbone kernel and a few other sampled parameter tensors.
fn policy_trial(seed: u64, trial: usize, r: &mut ChaCha8Rng) -> Result<Vec<GradRow>> {
    let variant = Variant::ALL[trial % Variant::ALL.len()];
    let policy = Policy::new(PolicyConfig::default().with_variant(variant), seed.wrapping_add(trial as u64))?;
    let ep = generate_toy_task(seed.wrapping_add(trial as u64), 1, &ToyConfig::default())?;
    let obs = ep[0].records[r.gen_range(0..ep[0].len())].obs.clone();
    let z = normal_tensor(&[policy.config.d_z], r);
    let loss = |g: &mut Graph, p: &Bound, images: &[Var]| -> Result<Var> {
        let joints = g.constant(obs.joints.clone());
        let imu = g.constant(obs.imu.clone());
        let zv = g.constant(z.clone());
        let tr = policy.forward_vars(g, p, images, joints, imu, zv)?;
        let sq = g.square(tr.actions)?;
        g.mean(sq)
    };
    let mut rows = Vec::new();
    let view = trial % obs.images.len();
    let image = &obs.images[view];
    let c = coords(image.len(), r);
    let report = grad_check_at(
        |g, leaf| {
            let p = policy.store.bind_frozen(g);
            let mut images: Vec<Var> = obs.images.iter().map(|im| g.constant(im.clone())).collect();
            images[view] = leaf;
            loss(g, &p, &images)
        },
        image,
        GRAD_STEP,
        &c,
    )?;
    rows.push(GradRow {
        module: GradModule::Policy,
        trial,
        tensor: format!("input.view{view}"),
        report,
    });
    let ids: Vec<ParamId> = policy.store.ids().collect();
    let mut chosen = vec![policy.layout.stages[0].conv.weight];
    for i in sample(r, ids.len(), 3).into_vec() {
        if !chosen.contains(&ids[i]) {
            chosen.push(ids[i]);
        }
    }
    for id in chosen {
        let t = policy.store.get(id);
        let c = coords(t.len(), r);
        let report = grad_check_at(
            |g, leaf| {
                let p = policy.store.bind_frozen(g).with(id, leaf);
                let images: Vec<Var> = obs.images.iter().map(|im| g.constant(im.clone())).collect();
                loss(g, &p, &images)
            },
            t,
            GRAD_STEP,
            &c,
        )?;
        rows.push(GradRow {
            module: GradModule::Policy,
            trial,
            tensor: policy.store.name(id).to_string(),
            report,
        });
    }
    Ok(rows)
}

pub fn run_grad_suite(modules: &[GradModule], trials: usize, seed: u64) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for &m in modules {
        for t in 0..trials {
            rows.extend(grad_trial(m, seed, t)?);
        }
    }
    Ok(rows)
}

pub fn grad_csv(rows: &[GradRow]) -> String {
    let mut s = String::from("module,trial,tensor,checked,max_rel_error,analytic,numeric\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:e},{:e},{:e}\n",
            r.module.as_str(),
            r.trial,
            r.tensor,
            r.report.checked,
            r.report.max_error,
            r.report.analytic,
            r.report.numeric
        ));
    }
    s
}
