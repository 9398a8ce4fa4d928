//! Plain-text `key=value` configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::policy::{OptimizerKind, PolicyConfig, Schedule, TrainConfig};

/// Lines of `key=value`; blank lines and `#` comments are skipped.
/// Duplicate keys are rejected.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| value(key, x.trim())).collect()
}

fn list_text(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl PolicyConfig {
    /// Applies one key; `Ok(false)` when the key is not a model key.
    pub fn set_key(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "variant" => self.variant = value(key, v)?,
            "alpha_mode" => self.alpha_mode = value(key, v)?,
            "image_height" => self.image_height = value(key, v)?,
            "image_width" => self.image_width = value(key, v)?,
            "k" => self.k = value(key, v)?,
            "d_z" => self.d_z = value(key, v)?,
            "d_model" => self.d_model = value(key, v)?,
            "heads" => self.heads = value(key, v)?,
            "encoder_layers" => self.encoder_layers = value(key, v)?,
            "decoder_layers" => self.decoder_layers = value(key, v)?,
            "ffn_hidden" => self.ffn_hidden = value(key, v)?,
            "stage_channels" => self.stage_channels = usize_list(key, v)?,
            "attention_groups" => self.attention_groups = value(key, v)?,
            "cvae_hidden" => self.cvae_hidden = value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        format!(
            "variant={}\nalpha_mode={}\nimage_height={}\nimage_width={}\nk={}\nd_z={}\nd_model={}\nheads={}\n\
             encoder_layers={}\ndecoder_layers={}\nffn_hidden={}\nstage_channels={}\nattention_groups={}\ncvae_hidden={}\n",
            self.variant,
            self.alpha_mode.as_str(),
            self.image_height,
            self.image_width,
            self.k,
            self.d_z,
            self.d_model,
            self.heads,
            self.encoder_layers,
            self.decoder_layers,
            self.ffn_hidden,
            list_text(&self.stage_channels),
            self.attention_groups,
            self.cvae_hidden
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = PolicyConfig::default();
        for (k, v) in parse_pairs(text)? {
            if !c.set_key(&k, &v)? {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Everything a run needs. Missing keys keep their defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: PolicyConfig,
    pub train: TrainConfig,
    pub steps: usize,
    pub eval_every: usize,
    pub val_stride: usize,
    /// Directory of `.fewt` episodes; a toy task is generated when absent.
    pub dataset: Option<PathBuf>,
    pub episodes: usize,
    pub val_fraction: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: PolicyConfig::default(),
            train: TrainConfig::default(),
            steps: 2000,
            eval_every: 200,
            val_stride: 8,
            dataset: None,
            episodes: 50,
            val_fraction: 0.2,
            output_dir: PathBuf::from("fewt_out"),
        }
    }
}

pub const RUN_KEYS: &[&str] = &[
    "seed",
    "variant",
    "alpha_mode",
    "image_height",
    "image_width",
    "k",
    "d_z",
    "d_model",
    "heads",
    "encoder_layers",
    "decoder_layers",
    "ffn_hidden",
    "stage_channels",
    "attention_groups",
    "cvae_hidden",
    "beta",
    "learning_rate",
    "grad_clip",
    "batch_size",
    "optimizer",
    "steps",
    "eval_every",
    "val_stride",
    "dataset",
    "episodes",
    "val_fraction",
    "output_dir",
];

impl RunConfig {
    pub fn set_key(&mut self, key: &str, v: &str) -> Result<()> {
        if self.model.set_key(key, v)? {
            return Ok(());
        }
        match key {
            "seed" => self.seed = value(key, v)?,
            "beta" => self.train.beta = value(key, v)?,
            "learning_rate" => self.train.learning_rate = value(key, v)?,
            "grad_clip" => self.train.grad_clip = value(key, v)?,
            "batch_size" => self.train.batch_size = value(key, v)?,
            "optimizer" => self.train.optimizer = value::<OptimizerKind>(key, v)?,
            "steps" => self.steps = value(key, v)?,
            "eval_every" => self.eval_every = value(key, v)?,
            "val_stride" => self.val_stride = value(key, v)?,
            "dataset" => self.dataset = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "episodes" => self.episodes = value(key, v)?,
            "val_fraction" => self.val_fraction = value(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (known: {})",
                    RUN_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            c.set_key(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", t.learning_rate)));
        }
        if !(t.beta >= 0.0 && t.beta.is_finite()) || !(t.grad_clip > 0.0) {
            return Err(Error::Config("beta must be non-negative and grad_clip positive".into()));
        }
        if t.batch_size == 0 || self.episodes == 0 {
            return Err(Error::Config("batch_size and episodes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    /// Every key with its effective value, in [`RUN_KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = format!("seed={}\n", self.seed);
        s.push_str(&self.model.to_text());
        let t = &self.train;
        let _ = write!(
            s,
            "beta={}\nlearning_rate={}\ngrad_clip={}\nbatch_size={}\noptimizer={}\nsteps={}\neval_every={}\nval_stride={}\n\
             dataset={}\nepisodes={}\nval_fraction={}\noutput_dir={}\n",
            t.beta,
            t.learning_rate,
            t.grad_clip,
            t.batch_size,
            t.optimizer.as_str(),
            self.steps,
            self.eval_every,
            self.val_stride,
            self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            self.episodes,
            self.val_fraction,
            self.output_dir.display()
        );
        s
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            steps: self.steps,
            eval_every: self.eval_every,
            val_stride: self.val_stride,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AlphaMode;
    use crate::policy::Variant;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::from_text("# run
seed = 3
variant=ema
alpha_mode=scalar

steps=10
").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.variant, Variant::Ema);
        assert_eq!(c.model.alpha_mode, AlphaMode::Scalar);
        assert_eq!(c.steps, 10);
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.learning_rate, 1e-3);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(RunConfig::from_text("sead=1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("seed=1\nseed=2"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("variant=act"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("seed"), Err(Error::Config(_))));
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_text("seed=9\nstage_channels=8,16\ndataset=/tmp/d\noptimizer=adam").unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        let keys: Vec<String> = parse_pairs(&c.to_text()).unwrap().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, RUN_KEYS);
        let m = PolicyConfig::default().with_variant(Variant::TsDwt);
        assert_eq!(PolicyConfig::from_text(&m.to_text()).unwrap(), m);
    }
}
