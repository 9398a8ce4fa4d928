//! Scripted pick-and-transfer toy task, its renderer and simulator, and the
//! episode container format.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const JOINT_DIM: usize = 14;
pub const IMU_DIM: usize = 6;
pub const ACTION_DIM: usize = 16;
pub const VIEWS: usize = 3;
pub const TIMESTEP: f64 = 0.02;

pub const EPISODE_MAGIC: [u8; 4] = *b"FEWT";
pub const EPISODE_VERSION: u16 = 1;

const BLOCK_SIZE: f64 = 4.0;
const ZONE_SIZE: f64 = 6.0;
const DISTRACTOR_SIZE: f64 = 4.0;
/// Grasp radius in top-view pixels.
const GRASP_RADIUS: f64 = 2.5;
/// Delivery tolerance around the target zone, in pixels.
pub const SUCCESS_TOLERANCE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// Top, left and right views, each `(3, H, W)` in `[0, 1]`.
    pub images: [Tensor; VIEWS],
    pub joints: Tensor,
    pub imu: Tensor,
}

impl Observation {
    pub fn validate(&self) -> Result<()> {
        let s = self.images[0].shape().to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(invalid("Observation", format!("image shape {s:?}, expected (3, H, W)")));
        }
        if self.images.iter().any(|im| im.shape() != s.as_slice()) {
            return Err(invalid("Observation", "views differ in shape"));
        }
        if self.joints.shape() != [JOINT_DIM] || self.imu.shape() != [IMU_DIM] {
            return Err(invalid(
                "Observation",
                format!("joints {:?} / imu {:?}, expected ({JOINT_DIM}) / ({IMU_DIM})", self.joints.shape(), self.imu.shape()),
            ));
        }
        Ok(())
    }

    pub fn image_hw(&self) -> (usize, usize) {
        let s = self.images[0].shape();
        (s[1], s[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub obs: Observation,
    pub action: Tensor,
}

/// Static layout of one episode, in top-view pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scene {
    pub block: (f64, f64),
    pub distractor: (f64, f64),
    pub target: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub timestep: f64,
    pub scene: Scene,
    pub records: Vec<Record>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Actions `t .. t+k`, repeating the last action past the end.
    pub fn chunk(&self, t: usize, k: usize) -> Tensor {
        let last = self.records.len() - 1;
        let mut data = Vec::with_capacity(k * ACTION_DIM);
        for i in 0..k {
            data.extend_from_slice(self.records[(t + i).min(last)].action.data());
        }
        Tensor::new(&[k, ACTION_DIM], data).expect("chunk shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            length: 64,
            height: 24,
            width: 32,
            k: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arm {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub grip: f64,
}

impl Arm {
    fn joints(&self, w: f64, h: f64) -> [f64; 7] {
        let (u, v) = (self.x / w, self.y / h);
        [u, v, self.z, self.grip, 0.5 * (u + v), 0.5 * (u - v) + 0.5, self.z * (1.0 - 0.5 * self.grip)]
    }

    fn from_joints(j: &[f64], w: f64, h: f64) -> Self {
        Self {
            x: j[0] * w,
            y: j[1] * h,
            z: j[2],
            grip: j[3],
        }
    }
}

const RIGHT_ARM: Arm = Arm {
    x: 24.0,
    y: 18.0,
    z: 0.9,
    grip: 0.0,
};

/// Kinematic world state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct World {
    pub height: usize,
    pub width: usize,
    pub scene: Scene,
    pub left: Arm,
    pub right: Arm,
    pub block: (f64, f64, f64),
    pub attached: bool,
    pub velocity: f64,
    pub yaw_rate: f64,
    pub prev_velocity: f64,
    pub prev_yaw_rate: f64,
}

impl World {
    pub fn new(height: usize, width: usize, scene: Scene) -> Self {
        Self {
            height,
            width,
            scene,
            left: home(width, height),
            right: RIGHT_ARM,
            block: (scene.block.0, scene.block.1, 0.0),
            attached: false,
            velocity: 0.0,
            yaw_rate: 0.0,
            prev_velocity: 0.0,
            prev_yaw_rate: 0.0,
        }
    }

    pub fn joints(&self) -> Tensor {
        let (w, h) = (self.width as f64, self.height as f64);
        let mut j = self.left.joints(w, h).to_vec();
        j.extend_from_slice(&self.right.joints(w, h));
        Tensor::from_vec(j.into_iter().map(round32).collect())
    }

    pub fn imu(&self) -> Tensor {
        let accel = (self.velocity - self.prev_velocity) * 10.0;
        let yaw_accel = (self.yaw_rate - self.prev_yaw_rate) * 10.0;
        let v = [self.velocity, 0.5 * self.yaw_rate, 0.0, accel, 0.5 * yaw_accel, 0.0];
        Tensor::from_vec(v.into_iter().map(round32).collect())
    }

    pub fn observe(&self) -> Observation {
        Observation {
            images: render(self),
            joints: self.joints(),
            imu: self.imu(),
        }
    }

    /// Moves both arms to the commanded joint targets and the chassis to the
    /// commanded wheel speeds, then updates the block.
    pub fn apply(&mut self, action: &[f64]) {
        let (w, h) = (self.width as f64, self.height as f64);
        self.left = Arm::from_joints(&action[0..7], w, h);
        self.right = Arm::from_joints(&action[7..14], w, h);
        let (wl, wr) = (action[14], action[15]);
        self.prev_velocity = self.velocity;
        self.prev_yaw_rate = self.yaw_rate;
        self.velocity = 0.5 * (wl + wr);
        self.yaw_rate = 0.5 * (wr - wl);
        let g = self.left;
        let (bx, by, bz) = self.block;
        if self.attached {
            if g.grip < 0.5 {
                self.attached = false;
                self.block = (bx, by, 0.0);
            } else {
                self.block = (g.x, g.y, g.z);
            }
        } else if g.grip >= 0.5 && (g.x - bx).hypot(g.y - by) <= GRASP_RADIUS && g.z - bz <= 0.3 {
            self.attached = true;
            self.block = (g.x, g.y, g.z);
        }
    }

    /// Distance from the block centre to the target zone square.
    pub fn delivery_error(&self) -> f64 {
        let half = ZONE_SIZE / 2.0;
        let dx = ((self.block.0 - self.scene.target.0).abs() - half).max(0.0);
        let dy = ((self.block.1 - self.scene.target.1).abs() - half).max(0.0);
        dx.hypot(dy)
    }

    pub fn delivered(&self) -> bool {
        !self.attached && self.block.2 == 0.0 && self.delivery_error() <= SUCCESS_TOLERANCE
    }

    /// Integer pixel box `(row0, col0, rows, cols)` of the block in the top view.
    pub fn block_box(&self) -> (usize, usize, usize, usize) {
        let (r0, r1) = span(self.block.1, BLOCK_SIZE, self.height);
        let (c0, c1) = span(self.block.0, BLOCK_SIZE, self.width);
        (r0, c0, r1 - r0, c1 - c0)
    }
}

fn round32(v: f64) -> f64 {
    v as f32 as f64
}

fn home(width: usize, height: usize) -> Arm {
    Arm {
        x: width as f64 * 0.5,
        y: height as f64 * 0.5,
        z: 1.0,
        grip: 0.0,
    }
}

fn ease(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn lerp(a: f64, b: f64, u: f64) -> f64 {
    a + (b - a) * u
}

/// Half-open integer span of a `size`-wide box centred at `c`, clipped.
fn span(c: f64, size: f64, limit: usize) -> (usize, usize) {
    let lo = (c - size / 2.0).round().max(0.0) as usize;
    let hi = ((c + size / 2.0).round().max(0.0) as usize).min(limit);
    (lo.min(limit), hi.max(lo.min(limit)))
}

fn fill(img: &mut [f64], h: usize, w: usize, rows: (usize, usize), cols: (usize, usize), rgb: [f64; 3]) {
    for (ch, value) in rgb.iter().enumerate() {
        for r in rows.0..rows.1.min(h) {
            for c in cols.0..cols.1.min(w) {
                img[(ch * h + r) * w + c] = round32(*value);
            }
        }
    }
}

const BACKGROUND: f64 = 0.5;
const RED: [f64; 3] = [0.9, 0.15, 0.1];
const GREEN: [f64; 3] = [0.2, 0.7, 0.2];
const BLUE: [f64; 3] = [0.2, 0.25, 0.85];

fn gripper_shade(z: f64, grip: f64) -> [f64; 3] {
    let v = 0.05 + 0.25 * z.clamp(0.0, 1.0) + 0.1 * grip.clamp(0.0, 1.0);
    [v, v, v]
}

/// Flat-shaded top, left and right views.
pub fn render(world: &World) -> [Tensor; VIEWS] {
    let (h, w) = (world.height, world.width);
    let (hf, wf) = (h as f64, w as f64);
    let floor = hf * 0.85;
    let lift = hf * 0.5;
    let sc = &world.scene;
    let g = world.left;
    let (bx, by, bz) = world.block;

    let mut top = vec![BACKGROUND; 3 * h * w];
    fill(&mut top, h, w, span(sc.target.1, ZONE_SIZE, h), span(sc.target.0, ZONE_SIZE, w), GREEN);
    fill(
        &mut top,
        h,
        w,
        span(sc.distractor.1, DISTRACTOR_SIZE, h),
        span(sc.distractor.0, DISTRACTOR_SIZE, w),
        BLUE,
    );
    fill(&mut top, h, w, span(g.y, 3.0, h), span(g.x, 3.0, w), gripper_shade(g.z, g.grip));
    fill(&mut top, h, w, span(by, BLOCK_SIZE, h), span(bx, BLOCK_SIZE, w), RED);

    // Side views: horizontal axis is x (left) or y rescaled to the width
    // (right); vertical axis is height above the floor.
    let side = |horiz: &dyn Fn(f64, f64) -> f64| {
        let mut img = vec![BACKGROUND; 3 * h * w];
        let floor_rows = (floor.round() as usize, h);
        fill(&mut img, h, w, floor_rows, (0, w), [0.35, 0.35, 0.35]);
        let tz = horiz(sc.target.0, sc.target.1);
        fill(&mut img, h, w, floor_rows, span(tz, ZONE_SIZE, w), GREEN);
        let dc = horiz(sc.distractor.0, sc.distractor.1);
        fill(&mut img, h, w, span(floor - DISTRACTOR_SIZE / 2.0, DISTRACTOR_SIZE, h), span(dc, DISTRACTOR_SIZE, w), BLUE);
        let gc = horiz(g.x, g.y);
        let grow = floor - BLOCK_SIZE - g.z * lift;
        fill(&mut img, h, w, span(grow, 3.0, h), span(gc, 2.0, w), gripper_shade(g.z, g.grip));
        let bc = horiz(bx, by);
        let brow = floor - BLOCK_SIZE / 2.0 - bz * lift;
        fill(&mut img, h, w, span(brow, BLOCK_SIZE, h), span(bc, BLOCK_SIZE, w), RED);
        img
    };
    let left = side(&|x, _| x);
    let right = side(&|_, y| y * wf / hf);
    [top, left, right].map(|d| Tensor::new(&[3, h, w], d).expect("image shape"))
}

/// Scripted left-arm pose and chassis speeds at step `t`.
fn script(cfg: &ToyConfig, scene: &Scene, cruise: f64, turn: f64, t: usize) -> (Arm, f64, f64) {
    let (w, h) = (cfg.width, cfg.height);
    let start = home(w, h);
    let t1 = cfg.length / 3;
    let t2 = 2 * cfg.length / 3;
    let last = cfg.length - 1;
    let (bx, by) = scene.block;
    let (tx, ty) = scene.target;
    let tf = t as f64;
    let arm = if t <= t1 {
        let u = ease(tf / t1 as f64);
        Arm {
            x: lerp(start.x, bx, u),
            y: lerp(start.y, by, u),
            z: lerp(start.z, 0.0, u),
            grip: 0.0,
        }
    } else if t <= t2 {
        let u = (tf - t1 as f64) / (t2 - t1) as f64;
        Arm {
            x: bx,
            y: by,
            z: if u < 1.0 / 3.0 { 0.0 } else { ease((u - 1.0 / 3.0) * 1.5) },
            grip: (3.0 * u).min(1.0),
        }
    } else {
        let u = ((tf - t2 as f64) / (last - t2) as f64).min(1.0);
        let m = ease(u / 0.75);
        Arm {
            x: lerp(bx, tx, m),
            y: lerp(by, ty, m),
            z: if u < 0.75 { 1.0 } else { lerp(1.0, 0.3, ease((u - 0.75) * 4.0)) },
            grip: if u < 0.9 { 1.0 } else { 0.0 },
        }
    };
    let (v, yaw) = if t > t2 && t <= last {
        let u = (tf - t2 as f64) / (last - t2) as f64;
        let v = cruise * (std::f64::consts::PI * u).sin();
        (v, turn * v)
    } else {
        (0.0, 0.0)
    };
    (arm, v, yaw)
}

fn action_for(cfg: &ToyConfig, arm: Arm, v: f64, yaw: f64) -> Tensor {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut a = arm.joints(w, h).to_vec();
    a.extend_from_slice(&RIGHT_ARM.joints(w, h));
    a.push(v - yaw);
    a.push(v + yaw);
    Tensor::from_vec(a.into_iter().map(round32).collect())
}

pub fn random_scene(cfg: &ToyConfig, rng: &mut impl Rng) -> Scene {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let block = (round32(rng.gen_range(0.12 * w..0.44 * w)), round32(rng.gen_range(0.2 * h..0.8 * h)));
    let target = (round32(0.8 * w), round32(0.5 * h));
    let mut distractor;
    loop {
        distractor = (round32(rng.gen_range(0.5 * w..0.68 * w)), round32(rng.gen_range(0.15 * h..0.85 * h)));
        if (distractor.1 - target.1).abs() > 0.2 * h || distractor.0 < target.0 - 0.25 * w {
            break;
        }
    }
    Scene {
        block,
        distractor,
        target,
    }
}

/// One scripted episode; executing its own actions delivers the block.
pub fn generate_episode(cfg: &ToyConfig, scene: Scene, cruise: f64, turn: f64) -> Result<Episode> {
    if cfg.length < cfg.k || cfg.length < 6 || cfg.height < 8 || cfg.width < 8 {
        return Err(invalid("generate_episode", format!("unsupported configuration {cfg:?}")));
    }
    let mut world = World::new(cfg.height, cfg.width, scene);
    let mut records = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        let obs = world.observe();
        let (arm, v, yaw) = script(cfg, &scene, cruise, turn, t + 1);
        let action = action_for(cfg, arm, v, yaw);
        world.apply(action.data());
        records.push(Record { obs, action });
    }
    Ok(Episode {
        height: cfg.height,
        width: cfg.width,
        k: cfg.k,
        timestep: TIMESTEP,
        scene,
        records,
    })
}

pub fn generate_toy_task(seed: u64, num_episodes: usize, cfg: &ToyConfig) -> Result<Vec<Episode>> {
    if num_episodes == 0 {
        return Err(invalid("generate_toy_task", "num_episodes must be at least 1"));
    }
    let mut r = rng::stream(seed, rng::DATA);
    (0..num_episodes)
        .map(|_| {
            let scene = random_scene(cfg, &mut r);
            let cruise = round32(r.gen_range(0.3..0.7));
            let turn = round32(r.gen_range(-0.4..0.4));
            generate_episode(cfg, scene, cruise, turn)
        })
        .collect()
}

/// `(train, validation)` index lists: the last `ceil(n·val_fraction)`
/// episodes are held out.
pub fn split_indices(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let val = ((n as f64 * val_fraction).ceil() as usize).min(n.saturating_sub(1));
    let cut = n - val;
    ((0..cut).collect(), (cut..n).collect())
}

// ---- container format ---------------------------------------------------

fn put_f32(out: &mut Vec<u8>, v: f64, op: &'static str) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::NonFinite { op });
    }
    out.extend_from_slice(&(v as f32).to_le_bytes());
    Ok(())
}

const HEADER_LEN: usize = 4 + 2 + 7 * 4 + 8 + 6 * 4;

pub fn record_floats(height: usize, width: usize) -> usize {
    VIEWS * 3 * height * width + JOINT_DIM + IMU_DIM + ACTION_DIM
}

pub fn encode_episode(e: &Episode) -> Result<Vec<u8>> {
    let per = record_floats(e.height, e.width);
    let mut out = Vec::with_capacity(HEADER_LEN + e.len() * per * 4);
    out.extend_from_slice(&EPISODE_MAGIC);
    out.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    for d in [e.height, e.width, e.len(), e.k, ACTION_DIM, JOINT_DIM, IMU_DIM] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    if !e.timestep.is_finite() {
        return Err(Error::NonFinite { op: "save_episode" });
    }
    out.extend_from_slice(&e.timestep.to_le_bytes());
    let s = e.scene;
    for v in [s.block.0, s.block.1, s.distractor.0, s.distractor.1, s.target.0, s.target.1] {
        put_f32(&mut out, v, "save_episode")?;
    }
    for r in &e.records {
        r.obs.validate()?;
        if r.obs.image_hw() != (e.height, e.width) || r.action.shape() != [ACTION_DIM] {
            return Err(Error::DimInconsistency(format!(
                "record image {:?} / action {:?} disagree with header {}x{}",
                r.obs.image_hw(),
                r.action.shape(),
                e.height,
                e.width
            )));
        }
        for t in r.obs.images.iter().chain([&r.obs.joints, &r.obs.imu, &r.action]) {
            for &v in t.data() {
                put_f32(&mut out, v, "save_episode")?;
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f64> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
    }
}

fn truncated_header(found: usize) -> Error {
    Error::TruncatedPayload {
        expected: HEADER_LEN,
        found,
    }
}

pub fn decode_episode(bytes: &[u8]) -> Result<Episode> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4).ok_or_else(|| truncated_header(bytes.len()))?;
    if magic != EPISODE_MAGIC {
        return Err(Error::BadMagic {
            expected: EPISODE_MAGIC,
            found: magic.try_into().unwrap(),
        });
    }
    let version = r.u16().ok_or_else(|| truncated_header(bytes.len()))?;
    if version != EPISODE_VERSION {
        return Err(Error::VersionMismatch {
            expected: EPISODE_VERSION,
            found: version,
        });
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32().ok_or_else(|| truncated_header(bytes.len()))? as usize;
    }
    let [height, width, t, k, action_dim, joint_dim, imu_dim] = dims;
    if action_dim != ACTION_DIM || joint_dim != JOINT_DIM || imu_dim != IMU_DIM {
        return Err(Error::DimInconsistency(format!(
            "action/joint/imu dims {action_dim}/{joint_dim}/{imu_dim}, expected {ACTION_DIM}/{JOINT_DIM}/{IMU_DIM}"
        )));
    }
    if height == 0 || width == 0 || t == 0 || k == 0 || k > t {
        return Err(Error::DimInconsistency(format!("header H={height} W={width} T={t} k={k}")));
    }
    let timestep = r
        .take(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| truncated_header(bytes.len()))?;
    let mut sc = [0.0; 6];
    for v in &mut sc {
        *v = r.f32().ok_or_else(|| truncated_header(bytes.len()))?;
    }
    let per_bytes = record_floats(height, width) * 4;
    let payload = bytes.len() - HEADER_LEN;
    let expected = t * per_bytes;
    if payload < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload,
        });
    }
    if payload > expected {
        return Err(Error::DimInconsistency(format!(
            "payload holds {payload} bytes, header implies {expected}"
        )));
    }
    let mut records = Vec::with_capacity(t);
    let read_tensor = |r: &mut Reader, shape: &[usize]| -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| r.f32().expect("length checked")).collect();
        Tensor::new(shape, data).expect("shape")
    };
    for _ in 0..t {
        let images = [0; VIEWS].map(|_| read_tensor(&mut r, &[3, height, width]));
        let joints = read_tensor(&mut r, &[JOINT_DIM]);
        let imu = read_tensor(&mut r, &[IMU_DIM]);
        let action = read_tensor(&mut r, &[ACTION_DIM]);
        records.push(Record {
            obs: Observation { images, joints, imu },
            action,
        });
    }
    Ok(Episode {
        height,
        width,
        k,
        timestep,
        scene: Scene {
            block: (sc[0], sc[1]),
            distractor: (sc[2], sc[3]),
            target: (sc[4], sc[5]),
        },
        records,
    })
}

pub fn save_episode(e: &Episode, path: &Path) -> Result<()> {
    let bytes = encode_episode(e)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_episode(path: &Path) -> Result<Episode> {
    decode_episode(&fs::read(path)?)
}

pub fn episode_file_name(index: usize) -> String {
    format!("episode_{index:03}.fewt")
}

/// Writes `episodes` as `episode_NNN.fewt` under `dir`.
pub fn save_dataset(episodes: &[Episode], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, e) in episodes.iter().enumerate() {
        save_episode(e, &dir.join(episode_file_name(i)))?;
    }
    Ok(())
}

/// Loads every `*.fewt` file under `dir` in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Episode>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "fewt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("no .fewt episodes in {}", dir.display()),
        )));
    }
    paths.iter().map(|p| load_episode(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Vec<Episode> {
        generate_toy_task(7, 3, &ToyConfig::default()).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(), small());
        let e = &small()[0];
        assert_eq!(e.len(), 64);
        assert_eq!(e.timestep, TIMESTEP);
        assert!(e.records.iter().all(|r| r.obs.images.iter().all(|im| im.min() >= 0.0 && im.max() <= 1.0)));
    }

    #[test]
    fn scripted_actions_deliver_the_block() {
        for e in generate_toy_task(11, 20, &ToyConfig::default()).unwrap() {
            let mut w = World::new(e.height, e.width, e.scene);
            for r in &e.records {
                w.apply(r.action.data());
            }
            assert!(w.delivered(), "{:?} err {}", w.block, w.delivery_error());
        }
    }

    #[test]
    fn block_is_the_reddest_region() {
        let e = &small()[1];
        let top = &e.records[0].obs.images[0];
        let (h, w) = (e.height, e.width);
        let redness: Vec<f64> = (0..h * w)
            .map(|i| top.data()[i] - 0.5 * (top.data()[h * w + i] + top.data()[2 * h * w + i]))
            .collect();
        let best = Tensor::from_vec(redness).argmax();
        let (r, c) = (best / w, best % w);
        let world = World::new(h, w, e.scene);
        let (r0, c0, rh, cw) = world.block_box();
        assert!(r >= r0 && r < r0 + rh && c >= c0 && c < c0 + cw);
    }

    #[test]
    fn chunk_pads_with_last_action() {
        let e = &small()[0];
        let c = e.chunk(60, 16);
        assert_eq!(c.shape(), &[16, ACTION_DIM]);
        assert_eq!(&c.data()[15 * ACTION_DIM..], e.records[63].action.data());
    }

    #[test]
    fn split_holds_out_tail() {
        let (tr, va) = split_indices(50, 0.2);
        assert_eq!(tr, (0..40).collect::<Vec<_>>());
        assert_eq!(va, (40..50).collect::<Vec<_>>());
        assert_eq!(split_indices(1, 0.5).1.len(), 0);
    }

    #[test]
    fn encode_decode_exact() {
        let e = &small()[2];
        let bytes = encode_episode(e).unwrap();
        let back = decode_episode(&bytes).unwrap();
        assert_eq!(&back, e);
        assert_eq!(encode_episode(&back).unwrap(), bytes);
    }

    #[test]
    fn format_errors_are_distinct() {
        let e = &small()[0];
        let bytes = encode_episode(e).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_episode(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_episode(&bad), Err(Error::VersionMismatch { .. })));
        let per = record_floats(e.height, e.width) * 4;
        let short = &bytes[..bytes.len() - per];
        assert!(matches!(decode_episode(short), Err(Error::TruncatedPayload { .. })));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_episode(&long), Err(Error::DimInconsistency(_))));
        let mut nan = e.clone();
        nan.records[0].action.data_mut()[0] = f64::NAN;
        assert!(matches!(encode_episode(&nan), Err(Error::NonFinite { .. })));
    }
}
