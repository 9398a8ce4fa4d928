//! End-to-end runs driven by a [`RunConfig`]: data, training, outputs and
//! closed-loop evaluation.

use std::path::{Path, PathBuf};

use crate::analysis::{alpha_csv, metrics_csv, write_text};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::dataset::{generate_toy_task, load_dataset, split_indices, Episode, ToyConfig};
use crate::error::{invalid, Result};
use crate::policy::{rollout, train, validation_l1, Policy, TrainLog};

impl RunConfig {
    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            height: self.model.image_height,
            width: self.model.image_width,
            k: self.model.k,
            ..ToyConfig::default()
        }
    }

    /// Episodes from `dataset`, or the toy task generated from `seed`.
    pub fn episodes(&self) -> Result<Vec<Episode>> {
        let eps = match &self.dataset {
            Some(dir) => load_dataset(dir)?,
            None => generate_toy_task(self.seed, self.episodes, &self.toy_config())?,
        };
        if let Some(e) = eps.iter().find(|e| (e.height, e.width) != (self.model.image_height, self.model.image_width)) {
            return Err(invalid(
                "run",
                format!("episode images are {}x{}, model expects {}x{}", e.height, e.width, self.model.image_height, self.model.image_width),
            ));
        }
        Ok(eps)
    }
}

pub struct RunOutcome {
    pub policy: Policy,
    pub log: TrainLog,
    pub episodes: Vec<Episode>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl RunOutcome {
    pub fn train_set(&self) -> Vec<&Episode> {
        self.train_indices.iter().map(|&i| &self.episodes[i]).collect()
    }

    pub fn val_set(&self) -> Vec<&Episode> {
        self.val_indices.iter().map(|&i| &self.episodes[i]).collect()
    }
}

pub fn run_training(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let episodes = cfg.episodes()?;
    let (train_indices, val_indices) = split_indices(episodes.len(), cfg.val_fraction);
    let mut policy = Policy::new(cfg.model.clone(), cfg.seed)?;
    let log = {
        let tr: Vec<&Episode> = train_indices.iter().map(|&i| &episodes[i]).collect();
        let va: Vec<&Episode> = val_indices.iter().map(|&i| &episodes[i]).collect();
        train(&mut policy, &tr, &va, &cfg.train, &cfg.schedule(), cfg.seed)?
    };
    Ok(RunOutcome {
        policy,
        log,
        episodes,
        train_indices,
        val_indices,
    })
}

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ALPHA_FILE: &str = "alpha.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.fewc";

/// Effective config, metrics, α log (FE-EMA variants only) and checkpoint.
pub fn write_run_outputs(cfg: &RunConfig, out: &RunOutcome, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = vec![dir.join(CONFIG_FILE), dir.join(METRICS_FILE)];
    write_text(&written[0], &cfg.to_text())?;
    write_text(&written[1], &metrics_csv(&out.log.metrics))?;
    if out.policy.fe_ema_blocks() > 0 {
        let p = dir.join(ALPHA_FILE);
        write_text(&p, &alpha_csv(&out.log.alphas))?;
        written.push(p);
    }
    let ck = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&out.policy, &ck)?;
    written.push(ck);
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeEval {
    pub episode: usize,
    pub l1: f64,
    pub delivery_error: f64,
    pub delivered: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeEval>,
}

impl EvalReport {
    pub fn mean_l1(&self) -> f64 {
        self.episodes.iter().map(|e| e.l1).sum::<f64>() / self.episodes.len().max(1) as f64
    }

    pub fn success_rate(&self) -> f64 {
        self.episodes.iter().filter(|e| e.delivered).count() as f64 / self.episodes.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("episode,l1,delivery_error,delivered\n");
        for e in &self.episodes {
            s.push_str(&format!("{},{},{},{}\n", e.episode, e.l1, e.delivery_error, u8::from(e.delivered)));
        }
        s
    }
}

/// Chunk L1 every `stride` steps plus one scripted rollout per episode.
pub fn evaluate(policy: &Policy, episodes: &[(usize, &Episode)], stride: usize) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(invalid("eval", "no episodes"));
    }
    let rows = episodes
        .iter()
        .map(|&(i, e)| {
            let r = rollout(policy, e)?;
            Ok(EpisodeEval {
                episode: i,
                l1: validation_l1(policy, &[e], stride)?,
                delivery_error: r.delivery_error,
                delivered: r.delivered,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { episodes: rows })
}
