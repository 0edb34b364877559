//! `bevtrack` command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use super::{generate_synthetic, load_sequence, SceneConfig, SequenceDataset};
use crate::error::{Error, Result};
use crate::evalrep::{emit_report, ope_metrics, proposal_curve, ReportRun, StreamSet};
use crate::fsutil::atomic_write;
use crate::geom::{Aggregation, Box3d};
use crate::model::Networks;
use crate::track::{run_tracklet, write_results_csv, SearchMode, TrackerConfig, TrackletResult};
use crate::train::{fit, write_loss_history, LossWeights, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "bevtrack", version, about = "Single-object LIDAR tracking with BEV proposals and 3D Siamese ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train both networks.
    Train(TrainArgs),
    /// Track every tracklet and write per-frame results.
    Track(TrackArgs),
    /// Track every tracklet and write an OPE report.
    Eval(TrackArgs),
    /// Best-proposal and selector curves for the RPN, KF and PF generators.
    CompareSearch(CompareArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    tracklets: usize,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and loss history.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fine-tuning epochs.
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 2)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 1)]
    frame_stride: usize,
    #[arg(long, default_value_t = 1e-2)]
    lambda_cls: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_reg: f64,
    #[arg(long, default_value_t = 1e-2)]
    lambda_tr: f64,
    #[arg(long, default_value_t = 1e-6)]
    lambda_comp: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SearchKind {
    Rpn,
    Kf,
    Pf,
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AggregationArg {
    All,
    First,
    Prev,
    #[value(name = "first_prev")]
    FirstPrev,
}

impl From<AggregationArg> for Aggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::All => Aggregation::All,
            AggregationArg::First => Aggregation::FirstOnly,
            AggregationArg::Prev => Aggregation::PrevOnly,
            AggregationArg::FirstPrev => Aggregation::FirstAndPrev,
        }
    }
}

#[derive(Debug, Args)]
struct TrackArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Results CSV for `track`, report directory for `eval`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SearchKind::Rpn)]
    search: SearchKind,
    #[arg(long, default_value_t = 16)]
    topk: usize,
    #[arg(long, value_enum, default_value_t = AggregationArg::All)]
    aggregation: AggregationArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 160)]
    max_candidates: usize,
    /// Candidates the analysed trackers select from.
    #[arg(long, default_value_t = 16)]
    topk: usize,
    #[arg(long, value_enum, default_value_t = AggregationArg::All)]
    aggregation: AggregationArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
}

fn log_config<T: Serialize>(dir: &Path, name: &str, cfg: &T) -> Result<()> {
    let path = dir.join(name);
    atomic_write(&path, serde_json::to_string_pretty(cfg)?.as_bytes())?;
    info!("resolved configuration written to {}", path.display());
    Ok(())
}

fn search_mode(kind: SearchKind, k: usize) -> SearchMode {
    match kind {
        SearchKind::Rpn => SearchMode::Rpn(k),
        SearchKind::Kf => SearchMode::Kalman(k),
        SearchKind::Pf => SearchMode::Particle(k),
        SearchKind::Exhaustive => SearchMode::Exhaustive,
    }
}

/// Tracks every tracklet of `data`; tracklets run in parallel with
/// per-tracklet seeds so the output does not depend on scheduling.
pub fn track_dataset(nets: &Networks<f32>, data: &SequenceDataset, cfg: &TrackerConfig) -> Result<Vec<TrackletResult>> {
    data.tracklets
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i as u64);
            run_tracklet(nets, t, &c)
        })
        .collect()
}

/// OPE pooled over every frame of every tracklet.
pub fn dataset_ope(results: &[TrackletResult]) -> Result<crate::evalrep::OpeSummary> {
    let pred: Vec<Box3d> = results.iter().flat_map(|r| r.predictions()).collect();
    let gt: Vec<Box3d> = results.iter().flat_map(|r| r.ground_truth.iter().copied()).collect();
    ope_metrics(&pred, &gt)
}

/// Candidate counts reported on curves: powers of two up to `max`, plus `max`.
pub fn curve_counts(max: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = std::iter::successors(Some(1usize), |c| Some(c * 2)).take_while(|&c| c < max).collect();
    counts.push(max);
    counts
}

/// Runs `cfg` with proposal recording and returns its curve run.
pub fn curve_run(
    nets: &Networks<f32>,
    data: &SequenceDataset,
    cfg: &TrackerConfig,
    label: &str,
    counts: &[usize],
) -> Result<ReportRun> {
    let results = track_dataset(nets, data, cfg)?;
    let mut streams = StreamSet::default();
    for r in &results {
        for (rec, gt) in r.records.iter().zip(&r.ground_truth) {
            let s = rec.stream.as_ref().ok_or_else(|| Error::InvalidInput("run was not recorded".into()))?;
            streams.frames.push((s, gt));
        }
    }
    Ok(ReportRun {
        label: label.to_string(),
        summary: dataset_ope(&results)?,
        curve: Some(proposal_curve(&streams, counts)?),
    })
}

#[derive(Serialize)]
struct ResolvedTrain<'a> {
    command: &'a str,
    data: &'a Path,
    dataset_hash: &'a str,
    config: &'a TrainConfig,
}

#[derive(Serialize)]
struct ResolvedTrack<'a> {
    command: &'a str,
    data: &'a Path,
    ckpt: &'a Path,
    dataset_hash: &'a str,
    config: &'a TrackerConfig,
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SceneConfig {
        n_tracklets: a.tracklets,
        frames: a.frames,
        seed: a.seed,
        ..SceneConfig::default()
    };
    let m = generate_synthetic(&cfg, &a.out)?;
    info!("wrote {} tracklets to {} (hash {})", m.tracklets.len(), a.out.display(), m.content_hash);
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let data = load_sequence(&a.data, a.force)?;
    let mut cfg = TrainConfig {
        seed: a.seed,
        sigma: a.sigma,
        frame_stride: a.frame_stride,
        ..TrainConfig::default()
    };
    cfg.pretrain.epochs = a.pretrain_epochs;
    cfg.finetune.epochs = a.epochs;
    cfg.finetune.weights = LossWeights {
        cls: a.lambda_cls,
        reg: a.lambda_reg,
        tr: a.lambda_tr,
        comp: a.lambda_comp,
    };
    log_config(
        &a.out,
        "train_config.json",
        &ResolvedTrain {
            command: "train",
            data: &a.data,
            dataset_hash: &data.manifest.content_hash,
            config: &cfg,
        },
    )?;
    let res = fit(&data.tracklets, &cfg)?;
    write_loss_history(&a.out.join("loss_history.csv"), &res.history)?;
    res.nets.save(
        &a.out.join("model.bstk"),
        vec![
            ("seed".into(), a.seed.to_string()),
            ("dataset_hash".into(), data.manifest.content_hash.clone()),
        ],
    )?;
    info!("checkpoint written to {}", a.out.join("model.bstk").display());
    Ok(())
}

fn tracker_config(a: &TrackArgs) -> Result<TrackerConfig> {
    if a.topk == 0 {
        return Err(Error::InvalidParameter("--topk must be positive".into()));
    }
    Ok(TrackerConfig {
        search: search_mode(a.search, a.topk),
        aggregation: a.aggregation.into(),
        seed: a.seed,
        ..TrackerConfig::default()
    })
}

fn track(a: &TrackArgs, report: bool) -> Result<()> {
    let data = load_sequence(&a.data, a.force)?;
    let nets = Networks::load(&a.ckpt)?;
    let cfg = tracker_config(a)?;
    let (dir, csv) = if report {
        (a.out.clone(), a.out.join("results.csv"))
    } else {
        let dir = a.out.parent().map(Path::to_path_buf).unwrap_or_default();
        (dir, a.out.clone())
    };
    let stem = if report { "eval".to_string() } else { a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default() };
    log_config(
        &dir,
        &format!("{stem}_config.json"),
        &ResolvedTrack {
            command: if report { "eval" } else { "track" },
            data: &a.data,
            ckpt: &a.ckpt,
            dataset_hash: &data.manifest.content_hash,
            config: &cfg,
        },
    )?;
    let results = track_dataset(&nets, &data, &cfg)?;
    write_results_csv(&csv, &results)?;
    let summary = dataset_ope(&results)?;
    info!("OPE Success / Precision: {:.1} / {:.1}", summary.success, summary.precision);
    if report {
        let label = match cfg.search {
            SearchMode::Rpn(k) => format!("RPN (top-{k})"),
            SearchMode::Kalman(k) => format!("KF (top-{k})"),
            SearchMode::Particle(k) => format!("PF (top-{k})"),
            SearchMode::Exhaustive => "Exhaustive".into(),
        };
        emit_report(
            &a.out,
            &[ReportRun {
                label,
                summary,
                curve: None,
            }],
        )?;
    }
    Ok(())
}

fn compare(a: &CompareArgs) -> Result<()> {
    if a.topk == 0 || a.max_candidates == 0 {
        return Err(Error::InvalidParameter("candidate counts must be positive".into()));
    }
    let data = load_sequence(&a.data, a.force)?;
    let nets = Networks::load(&a.ckpt)?;
    let counts = curve_counts(a.max_candidates);
    let base = TrackerConfig {
        aggregation: a.aggregation.into(),
        record: a.max_candidates,
        seed: a.seed,
        ..TrackerConfig::default()
    };
    let mut runs = Vec::new();
    for (kind, name) in [(SearchKind::Rpn, "RPN"), (SearchKind::Kf, "KF"), (SearchKind::Pf, "PF")] {
        let cfg = TrackerConfig {
            search: search_mode(kind, a.topk),
            ..base.clone()
        };
        log_config(
            &a.out,
            &format!("compare_{}_config.json", name.to_lowercase()),
            &ResolvedTrack {
                command: "compare-search",
                data: &a.data,
                ckpt: &a.ckpt,
                dataset_hash: &data.manifest.content_hash,
                config: &cfg,
            },
        )?;
        runs.push(curve_run(&nets, &data, &cfg, &format!("{name} (top-{})", a.topk), &counts)?);
    }
    emit_report(&a.out, &runs)?;
    Ok(())
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns 0 on success, 1 on a usage error and 2 on a runtime error.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let res = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Track(a) => track(a, false),
        Command::Eval(a) => track(a, true),
        Command::CompareSearch(a) => compare(a),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
