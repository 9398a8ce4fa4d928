use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fewt::analysis::{
    default_grid, export_channel_attention, grad_cam, matrix_csv, ordering_csv, ordering_row, write_pgm, write_text,
    CamLayer, CamTarget, GridPoint, FLOPS_CONVENTION,
};
use fewt::attention::AlphaMode;
use fewt::checkpoint::load_checkpoint;
use fewt::config::RunConfig;
use fewt::dataset::{generate_toy_task, load_dataset, save_dataset, split_indices, Episode, ToyConfig};
use fewt::run::{evaluate, run_training, write_run_outputs};
use fewt::verify::{dwt_csv, grad_csv, run_dwt_sizes, run_dwt_suite, run_grad_suite, DwtSuite, GradModule};
use fewt::wavelet::WaveletFilters;
use fewt::Error;

const OUT_ENV: &str = "FEWT_OUT";

#[derive(Parser)]
#[command(name = "fewt", version, about = "Frequency-enhanced wavelet attention for toy bimanual imitation")]
struct Cli {
    /// Output directory; `FEWT_OUT` takes precedence.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Haar round-trip and energy checks.
    DwtCheck(DwtCheck),
    /// Finite-difference gradient checks.
    GradCheck(GradCheck),
    /// Analytic params/FLOPs of baseline, EMA and FE-EMA blocks.
    FlopsReport(FlopsReport),
    /// Writes a toy dataset of `.fewt` episodes.
    GenerateData(GenerateData),
    Train(Train),
    /// Chunk L1 and scripted-rollout success.
    Eval(Eval),
    Gradcam(Gradcam),
    /// TS-DWT channel weights with and without their application.
    ChannelAttn(ChannelAttn),
}

#[derive(Args)]
struct DwtCheck {
    /// Fixed signal sizes; every level of each is checked.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
    /// Negates the high-pass filter so the suite must fail.
    #[arg(long)]
    flip_highpass: bool,
}

#[derive(Args)]
struct GradCheck {
    /// Repeat to select several; all modules by default.
    #[arg(long)]
    module: Vec<String>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FlopsReport {
    /// `C:S:G` points, comma separated; `S` is the square input side.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<String>>,
    #[arg(long, default_value = "per_channel")]
    alpha_mode: String,
}

#[derive(Args)]
struct GenerateData {
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 24)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` overrides applied after the file.
    #[arg(long = "set")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Data {
    /// Directory of `.fewt` episodes; the seed-0 toy task when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: Data,
    /// all, train or val.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 8)]
    stride: usize,
}

#[derive(Args)]
struct Gradcam {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: Data,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long, default_value_t = 0)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    view: usize,
    /// Backbone stage; the last stage when omitted.
    #[arg(long)]
    stage: Option<usize>,
    /// Action coordinate to explain; the whole chunk mean when omitted.
    #[arg(long)]
    action: Option<usize>,
}

#[derive(Args)]
struct ChannelAttn {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: Data,
    #[arg(long, default_value_t = 0)]
    episode: usize,
    #[arg(long, default_value_t = 0)]
    t: usize,
}

enum Failure {
    Property(String),
    Usage(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::TruncatedPayload { .. }
            | Error::DimInconsistency(_) => Failure::Io(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn output_dir(flag: Option<&Path>, default: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.map(Path::to_path_buf).unwrap_or_else(|| default.to_path_buf()),
    }
}

/// Prints the effective settings and writes them next to the outputs.
fn echo(dir: &Path, command: &str, settings: &str) -> Outcome {
    print!("{settings}");
    write_text(&dir.join(format!("{command}.config.txt")), settings)?;
    Ok(())
}

fn save(path: PathBuf, text: &str) -> Outcome {
    write_text(&path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn dwt_check(a: &DwtCheck, dir: &Path) -> Outcome {
    let filters = if a.flip_highpass {
        WaveletFilters::haar_with_flipped_highpass()
    } else {
        WaveletFilters::HAAR
    };
    let sizes = a.sizes.as_ref().map(|s| s.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","));
    echo(
        dir,
        "dwt-check",
        &format!(
            "seed={}\ntolerance={:e}\nflip_highpass={}\nsizes={}\n",
            a.seed,
            a.tolerance,
            a.flip_highpass,
            sizes.unwrap_or_else(|| "random".into())
        ),
    )?;
    let cases = match &a.sizes {
        Some(s) => run_dwt_sizes(&filters, s, a.seed)?,
        None => run_dwt_suite(&DwtSuite {
            seed: a.seed,
            filters,
            ..DwtSuite::default()
        })?,
    };
    save(dir.join("dwt_check.csv"), &dwt_csv(&cases))?;
    let mut bad: Vec<_> = cases.iter().filter(|c| !(c.worst() < a.tolerance)).collect();
    println!("{} cases, {} with energy checked", cases.len(), cases.iter().filter(|c| c.energy_error.is_some()).count());
    if bad.is_empty() {
        let worst = cases.iter().map(|c| c.worst()).fold(0.0, f64::max);
        println!("PASS worst error {worst:e}");
        return Ok(());
    }
    bad.sort_by(|x, y| y.worst().total_cmp(&x.worst()));
    let mut msg = format!("{} of {} cases exceed {:e}; worst:", bad.len(), cases.len(), a.tolerance);
    for c in bad.iter().take(5) {
        let _ = write!(msg, "\n  shape {:?} levels {} roundtrip {:e} energy {:?}", c.shape, c.levels, c.roundtrip_error, c.energy_error);
    }
    Err(Failure::Property(msg))
}

fn grad_check(a: &GradCheck, dir: &Path) -> Outcome {
    let modules = if a.module.is_empty() {
        GradModule::ALL.to_vec()
    } else {
        a.module.iter().map(|m| m.parse()).collect::<Result<Vec<GradModule>, _>>()?
    };
    let names: Vec<&str> = modules.iter().map(|m| m.as_str()).collect();
    echo(
        dir,
        "grad-check",
        &format!("modules={}\ntrials={}\ntolerance={:e}\nseed={}\n", names.join(","), a.trials, a.tolerance, a.seed),
    )?;
    let rows = run_grad_suite(&modules, a.trials, a.seed)?;
    save(dir.join("grad_check.csv"), &grad_csv(&rows))?;
    let mut failed = Vec::new();
    for m in &modules {
        let mine: Vec<_> = rows.iter().filter(|r| r.module == *m).collect();
        let worst = mine.iter().map(|r| r.report.max_error).fold(0.0, f64::max);
        let ok = mine.iter().all(|r| r.report.passes(a.tolerance));
        println!("{} {}: {} tensors checked, worst relative error {worst:e}", if ok { "PASS" } else { "FAIL" }, m.as_str(), mine.len());
        if !ok {
            failed.push(m.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Property(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn parse_point(s: &str) -> Result<GridPoint, Failure> {
    let v: Vec<usize> = s
        .split(':')
        .map(|x| x.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Usage(format!("grid point `{s}` is not C:S:G")))?;
    match v[..] {
        [channels, size, groups] => Ok(GridPoint { channels, size, groups }),
        _ => Err(Failure::Usage(format!("grid point `{s}` is not C:S:G"))),
    }
}

fn flops_report(a: &FlopsReport, dir: &Path) -> Outcome {
    let mode: AlphaMode = a.alpha_mode.parse()?;
    let grid = match &a.grid {
        Some(g) => g.iter().map(|s| parse_point(s)).collect::<Result<Vec<_>, _>>()?,
        None => default_grid(),
    };
    let points: Vec<String> = grid.iter().map(|p| format!("{}:{}:{}", p.channels, p.size, p.groups)).collect();
    echo(dir, "flops-report", &format!("grid={}\nalpha_mode={}\nconvention={FLOPS_CONVENTION}\n", points.join(","), mode.as_str()))?;
    let rows = grid.into_iter().map(|p| ordering_row(p, mode)).collect::<Result<Vec<_>, _>>()?;
    save(dir.join("flops_report.csv"), &ordering_csv(&rows))?;
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !(r.params_ordered() && r.flops_ordered()))
        .map(|r| {
            let (f, p) = (&r.reports, r.point);
            format!(
                "C={} S={} G={}: params {} / {} / {}, flops {} / {} / {}",
                p.channels, p.size, p.groups, f[0].total_params, f[1].total_params, f[2].total_params, f[0].total_flops,
                f[1].total_flops, f[2].total_flops
            )
        })
        .collect();
    if bad.is_empty() {
        println!("PASS ordering holds at all {} points", rows.len());
        Ok(())
    } else {
        Err(Failure::Property(format!(
            "ordering violated at {} of {} points (baseline / EMA / FE-EMA):\n  {}",
            bad.len(),
            rows.len(),
            bad.join("\n  ")
        )))
    }
}

fn generate_data(a: &GenerateData, dir: &Path) -> Outcome {
    let cfg = ToyConfig {
        height: a.height,
        width: a.width,
        ..ToyConfig::default()
    };
    echo(dir, "generate-data", &format!("episodes={}\nseed={}\nheight={}\nwidth={}\n", a.episodes, a.seed, a.height, a.width))?;
    let eps = generate_toy_task(a.seed, a.episodes, &cfg)?;
    save_dataset(&eps, dir)?;
    println!("wrote {} episodes to {}", eps.len(), dir.display());
    Ok(())
}

fn train_cmd(a: &Train, flag: Option<&Path>) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &a.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("override `{kv}` is not key=value")))?;
        cfg.set_key(k.trim(), v.trim())?;
    }
    cfg.output_dir = output_dir(flag, &cfg.output_dir);
    cfg.validate()?;
    print!("{}", cfg.to_text());
    let outcome = run_training(&cfg)?;
    for f in write_run_outputs(&cfg, &outcome, &cfg.output_dir)? {
        println!("wrote {}", f.display());
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "n/a".into());
    println!(
        "validation L1 {} -> {} (reduction {})",
        fmt(outcome.log.initial_val_l1),
        fmt(outcome.log.final_val_l1),
        fmt(outcome.log.val_reduction())
    );
    Ok(())
}

fn episodes(d: &Data, height: usize, width: usize) -> Result<Vec<Episode>, Failure> {
    let eps = match &d.dataset {
        Some(dir) => load_dataset(dir)?,
        None => generate_toy_task(
            d.seed,
            d.episodes,
            &ToyConfig {
                height,
                width,
                ..ToyConfig::default()
            },
        )?,
    };
    Ok(eps)
}

fn data_settings(d: &Data) -> String {
    match &d.dataset {
        Some(p) => format!("dataset={}\n", p.display()),
        None => format!("dataset=toy\nepisodes={}\nseed={}\n", d.episodes, d.seed),
    }
}

fn frame<'a>(eps: &'a [Episode], episode: usize, t: usize) -> Result<&'a Episode, Failure> {
    let e = eps
        .get(episode)
        .ok_or_else(|| Failure::Usage(format!("episode {episode} out of {}", eps.len())))?;
    if t >= e.len() {
        return Err(Failure::Usage(format!("t={t} out of episode length {}", e.len())));
    }
    Ok(e)
}

fn eval_cmd(a: &Eval, dir: &Path) -> Outcome {
    let policy = load_checkpoint(&a.checkpoint)?;
    let eps = episodes(&a.data, policy.config.image_height, policy.config.image_width)?;
    let (tr, va) = split_indices(eps.len(), a.val_fraction);
    let chosen: Vec<usize> = match a.split.as_str() {
        "all" => (0..eps.len()).collect(),
        "train" => tr,
        "val" => va,
        s => return Err(Failure::Usage(format!("split `{s}` is not all|train|val"))),
    };
    echo(
        dir,
        "eval",
        &format!(
            "checkpoint={}\n{}split={}\nval_fraction={}\nstride={}\n",
            a.checkpoint.display(),
            data_settings(&a.data),
            a.split,
            a.val_fraction,
            a.stride
        ),
    )?;
    let refs: Vec<(usize, &Episode)> = chosen.iter().map(|&i| (i, &eps[i])).collect();
    let report = evaluate(&policy, &refs, a.stride)?;
    save(dir.join("eval.csv"), &report.to_csv())?;
    println!(
        "episodes {} mean L1 {:.6} success {:.3}",
        report.episodes.len(),
        report.mean_l1(),
        report.success_rate()
    );
    Ok(())
}

fn gradcam_cmd(a: &Gradcam, dir: &Path) -> Outcome {
    let policy = load_checkpoint(&a.checkpoint)?;
    let eps = episodes(&a.data, policy.config.image_height, policy.config.image_width)?;
    let e = frame(&eps, a.episode, a.t)?;
    let target = a.action.map(CamTarget::ActionMean).unwrap_or(CamTarget::ChunkMean);
    let stage = a.stage.unwrap_or(policy.config.stage_channels.len() - 1);
    echo(
        dir,
        "gradcam",
        &format!(
            "checkpoint={}\n{}episode={}\nt={}\nview={}\nstage={}\ntarget={}\n",
            a.checkpoint.display(),
            data_settings(&a.data),
            a.episode,
            a.t,
            a.view,
            stage,
            target.describe()
        ),
    )?;
    let layer = CamLayer { view: a.view, stage };
    let map = grad_cam(&policy, &e.records[a.t].obs, target, layer, &format!("episode{}:t{}", a.episode, a.t))?;
    let pgm = dir.join("gradcam.pgm");
    write_pgm(&pgm, &map.values)?;
    println!("wrote {}", pgm.display());
    save(dir.join("gradcam.csv"), &matrix_csv(&map.values, "x")?)?;
    let peak = map.values.argmax();
    let w = map.values.shape()[1];
    println!("model {} input {} target {}", map.model_id, map.input_id, map.target);
    println!("peak at row {} col {}", peak / w, peak % w);
    Ok(())
}

fn channel_attn_cmd(a: &ChannelAttn, dir: &Path) -> Outcome {
    let policy = load_checkpoint(&a.checkpoint)?;
    let eps = episodes(&a.data, policy.config.image_height, policy.config.image_width)?;
    let e = frame(&eps, a.episode, a.t)?;
    echo(
        dir,
        "channel-attn",
        &format!(
            "checkpoint={}\n{}episode={}\nt={}\n",
            a.checkpoint.display(),
            data_settings(&a.data),
            a.episode,
            a.t
        ),
    )?;
    let ca = export_channel_attention(&policy, std::slice::from_ref(&e.records[a.t].obs))?.remove(0);
    let ratio = ca.ratio();
    let (l, d) = (ratio.shape()[0], ratio.shape()[1]);
    let mut s = String::from("channel,weight,ratio_min,ratio_max\n");
    for c in 0..d {
        let col = (0..l).map(|r| ratio.data()[r * d + c]).filter(|v| *v != 0.0);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let _ = writeln!(s, "{c},{},{lo},{hi}", ca.weights.data()[c]);
    }
    save(dir.join("channel_attn.csv"), &s)?;
    save(dir.join("channel_attn_with.csv"), &matrix_csv(&ca.with_ts_dwt, "d")?)?;
    save(dir.join("channel_attn_without.csv"), &matrix_csv(&ca.without_ts_dwt, "d")?)?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let flag = cli.out.as_deref();
    let dir = || output_dir(flag, Path::new("fewt_out"));
    match &cli.command {
        Command::DwtCheck(a) => dwt_check(a, &dir()),
        Command::GradCheck(a) => grad_check(a, &dir()),
        Command::FlopsReport(a) => flops_report(a, &dir()),
        Command::GenerateData(a) => generate_data(a, &dir()),
        Command::Train(a) => train_cmd(a, flag),
        Command::Eval(a) => eval_cmd(a, &dir()),
        Command::Gradcam(a) => gradcam_cmd(a, &dir()),
        Command::ChannelAttn(a) => channel_attn_cmd(a, &dir()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Property(m)) => {
            eprintln!("FAIL {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Io(m)) => {
            eprintln!("io error: {m}");
            ExitCode::from(3)
        }
    }
}
