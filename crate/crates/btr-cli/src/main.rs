//! btr: train an agent into a run directory, evaluate or analyze saved
//! checkpoints, and render SVG charts from run metrics.

use anyhow::{anyhow, Context, Result};
use btr::analysis;
use btr::checkpoint::{load_checkpoint, Checkpoint};
use btr::config::AgentConfig;
use btr::envs::NUM_ACTIONS;
use btr::learner::Learner;
use btr::network::NetworkSpec;
use btr::orchestrator::{evaluate, run_training_full, BOOTSTRAP_RESAMPLES, DORMANT_THRESHOLD, PROBE_STATES, SRANK_DELTA};
use btr::plot;
use btr::rng::{stream_rng, STREAM_ANALYSIS, STREAM_BOOTSTRAP};
use btr::run::{read_metrics, RunDir};
use clap::{Args, CommandFactory, Parser, Subcommand};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "btr", version, about = "train, eval, analyze, and plot runs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train into a fresh run directory (or resume an existing one).
    Train(TrainArgs),
    /// Evaluate a checkpoint greedily; writes scores and prints a summary.
    Eval(EvalArgs),
    /// Probe metrics of a checkpoint as one CSV record.
    Analyze(AnalyzeArgs),
    /// Render SVG charts from a run's metrics.csv.
    Plot(PlotArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of key = value lines; defaults fill whatever is absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Parent directory for new run dirs. Falls back to $BTR_RUN_ROOT, then ./runs.
    #[arg(long)]
    run_root: Option<PathBuf>,
    /// Existing run directory to continue from its newest checkpoint.
    #[arg(long, conflicts_with_all = ["config", "set", "run_root"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode count; the checkpoint's eval_episodes when omitted.
    #[arg(long)]
    episodes: Option<usize>,
    /// Exploration fraction during evaluation.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Seed for eval env and action streams; master_seed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Eval round, separating repeated evaluations of one checkpoint.
    #[arg(long, default_value_t = 0)]
    round: u64,
    /// Scores CSV destination (one row per episode).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Checkpoint to analyze.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Second checkpoint; churn is measured from it to --checkpoint.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Probe construction seed.
    #[arg(long, default_value_t = 0)]
    probe_seed: u64,
    /// Evaluation episodes behind the score columns.
    #[arg(long)]
    episodes: Option<usize>,
    /// Record CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directory holding metrics.csv (plots land in its plots/).
    #[arg(long, conflicts_with = "metrics")]
    run: Option<PathBuf>,
    /// Bare metrics CSV; requires --out-dir.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Output directory for the SVGs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Further run directories to overlay on a comparison chart.
    #[arg(long)]
    compare: Vec<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Plot(a) => cmd_plot(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// CLI-shape problems exit 2 with usage text; module errors exit 1.
fn usage_error(msg: &str) -> ExitCode {
    let mut cmd = Cli::command();
    eprintln!("error: {msg}");
    eprintln!("{}", cmd.render_usage());
    ExitCode::from(2)
}

fn build_config(args: &ConfigArgs) -> Result<Result<AgentConfig, ExitCode>> {
    let mut cfg = match &args.config {
        Some(path) => {
            if !path.is_file() {
                return Ok(Err(usage_error(&format!(
                    "config file {} does not exist",
                    path.display()
                ))));
            }
            AgentConfig::load(path).with_context(|| format!("loading {}", path.display()))?
        }
        None => AgentConfig::default(),
    };
    for pair in &args.set {
        let Some((key, value)) = pair.split_once('=') else {
            return Ok(Err(usage_error(&format!(
                "--set {pair:?} is not KEY=VALUE"
            ))));
        };
        cfg.set(key.trim(), value.trim())
            .with_context(|| format!("applying --set {pair}"))?;
    }
    cfg.validate().context("validating config")?;
    Ok(Ok(cfg))
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    if let Some(run_path) = &args.resume {
        let run = RunDir::open(run_path)
            .with_context(|| format!("opening run dir {}", run_path.display()))?;
        let (frame, ckpt_path) = run
            .latest_checkpoint()?
            .ok_or_else(|| anyhow!("{} has no checkpoint to resume", run_path.display()))?;
        log::info!("resuming from frame {frame} ({})", ckpt_path.display());
        let ckpt = load_checkpoint(&ckpt_path)
            .with_context(|| format!("loading {}", ckpt_path.display()))?;
        let cfg = ckpt.config.clone();
        let report = run_training_full(&cfg, &run, Some(&ckpt), &mut |_| false)?;
        log::info!(
            "trained to frame {} ({} gradient steps)",
            report.counters.frame_count,
            report.counters.grad_steps
        );
        println!("{}", run.path.display());
        return Ok(ExitCode::SUCCESS);
    }

    let cfg = match build_config(&args.config)? {
        Ok(cfg) => cfg,
        Err(code) => return Ok(code),
    };
    let root = args
        .run_root
        .or_else(|| std::env::var_os("BTR_RUN_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let run = RunDir::create(&root, &cfg)?;
    run.write_manifest(&cfg, cfg.master_seed)?;
    log::info!("run dir {}", run.path.display());
    let report = btr::orchestrator::run_training(&cfg, &run)?;
    log::info!(
        "finished at frame {} ({} gradient steps, {} eval rows)",
        report.counters.frame_count,
        report.counters.grad_steps,
        report.eval_rows
    );
    println!("{}", run.path.display());
    Ok(ExitCode::SUCCESS)
}

fn load_learner(path: &Path) -> Result<(Checkpoint, Learner<f32>)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let spec = NetworkSpec::from_config(&ckpt.config, NUM_ACTIONS);
    // init values are irrelevant, the checkpoint overwrites every tensor
    let mut scratch = stream_rng(0, STREAM_ANALYSIS, u64::MAX);
    let mut learner = Learner::new(spec, &ckpt.config, &mut scratch)?;
    ckpt.restore_learner(&mut learner)?;
    Ok((ckpt, learner))
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let (ckpt, mut learner) = load_learner(&args.checkpoint)?;
    let cfg = &ckpt.config;
    let episodes = args.episodes.unwrap_or(cfg.eval_episodes);
    let seed = args.seed.unwrap_or(cfg.master_seed);
    let scores = evaluate(
        &mut learner.online,
        cfg,
        episodes,
        args.epsilon,
        seed,
        args.round,
    )?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let iqm = analysis::iqm(&scores)?;
    let mut boot = stream_rng(seed, STREAM_BOOTSTRAP, args.round);
    let (ci_low, ci_high) = analysis::bootstrap_ci(&scores, BOOTSTRAP_RESAMPLES, 0.95, &mut boot)?;
    if let Some(out) = &args.out {
        let mut f = std::fs::File::create(out)
            .with_context(|| format!("creating {}", out.display()))?;
        writeln!(f, "episode,score")?;
        for (i, s) in scores.iter().enumerate() {
            writeln!(f, "{i},{s}")?;
        }
    }
    println!(
        "episodes {episodes} mean {mean} iqm {iqm} ci_low {ci_low} ci_high {ci_high}"
    );
    Ok(ExitCode::SUCCESS)
}

const RECORD_HEADER: &str =
    "frame,episodes,mean,iqm,ci_low,ci_high,action_gap,action_swap_pct,policy_churn_pct,dormant_pct,srank,l2_total";

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode> {
    let (ckpt, mut learner) = load_learner(&args.checkpoint)?;
    let cfg = &ckpt.config;
    let probe = analysis::collect_probe(cfg, PROBE_STATES, args.probe_seed)?;
    let episodes = args.episodes.unwrap_or(cfg.eval_episodes);
    let scores = evaluate(&mut learner.online, cfg, episodes, 0.0, args.probe_seed, 0)?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let iqm = analysis::iqm(&scores)?;
    let mut boot = stream_rng(args.probe_seed, STREAM_BOOTSTRAP, ckpt.counters.eval_count);
    let (ci_low, ci_high) = analysis::bootstrap_ci(&scores, BOOTSTRAP_RESAMPLES, 0.95, &mut boot)?;

    let churn = match &args.compare {
        Some(other) => {
            let (_, mut before) = load_learner(other)?;
            analysis::policy_churn(&mut before.online, &mut learner.online, &probe)?
        }
        None => 0.0,
    };
    let action_gap = analysis::action_gap(&mut learner.online, &probe)?;
    let swaps = analysis::action_swaps(&mut learner.online, &probe)?;
    let dormant = analysis::dormant_fraction(&mut learner.online, &probe, DORMANT_THRESHOLD)?;
    let features = analysis::feature_matrix(&mut learner.online, &probe);
    let srank = analysis::srank(&features, SRANK_DELTA);
    let (by_layer, l2_total) = analysis::weight_l2(&mut learner.online);
    for (name, l2) in &by_layer {
        log::info!("l2 {name} {l2:.6}");
    }

    let record = analysis::MetricsRecord {
        frame: ckpt.counters.frame_count,
        scores,
        iqm,
        ci_low,
        ci_high,
        action_gap,
        action_swap_pct: swaps,
        policy_churn_pct: churn,
        dormant_pct: 100.0 * dormant.fraction,
        srank,
        weight_l2_by_layer: by_layer,
        weight_l2_total: l2_total,
    };
    let row = format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        record.frame,
        record.scores.len(),
        mean,
        record.iqm,
        record.ci_low,
        record.ci_high,
        record.action_gap,
        record.action_swap_pct,
        record.policy_churn_pct,
        record.dormant_pct,
        record.srank,
        record.weight_l2_total,
    );
    match &args.out {
        Some(out) => {
            std::fs::write(out, format!("{RECORD_HEADER}\n{row}\n"))
                .with_context(|| format!("writing {}", out.display()))?;
        }
        None => {
            println!("{RECORD_HEADER}");
            println!("{row}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(args: PlotArgs) -> Result<ExitCode> {
    let (metrics_path, out_dir) = match (&args.run, &args.metrics) {
        (Some(run_path), None) => {
            let run = RunDir::open(run_path)?;
            let out = args.out_dir.clone().unwrap_or_else(|| run.plots_dir());
            (run.metrics_path(), out)
        }
        (None, Some(csv)) => match &args.out_dir {
            Some(out) => (csv.clone(), out.clone()),
            None => return Ok(usage_error("--metrics requires --out-dir")),
        },
        _ => return Ok(usage_error("pass exactly one of --run or --metrics")),
    };
    let rows = read_metrics(&metrics_path)?;
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    plot::write_svg(
        &out_dir.join("learning_curve.svg"),
        &plot::learning_curve(&rows)?,
    )?;
    for column in ["dormant_pct", "srank"] {
        plot::write_svg(
            &out_dir.join(format!("{column}.svg")),
            &plot::metric_curve(&rows, column)?,
        )?;
    }
    if !args.compare.is_empty() {
        let mut runs = vec![(label_for(&metrics_path), rows)];
        for other in &args.compare {
            let run = RunDir::open(other)?;
            runs.push((label_for(&run.path), read_metrics(&run.metrics_path())?));
        }
        plot::write_svg(
            &out_dir.join("comparison.svg"),
            &plot::comparison_chart(&runs)?,
        )?;
    }
    println!("{}", out_dir.display());
    Ok(ExitCode::SUCCESS)
}

fn label_for(path: &Path) -> String {
    let dir = if path.extension().is_some() {
        path.parent().unwrap_or(path)
    } else {
        path
    };
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}
