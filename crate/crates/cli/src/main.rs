//! `comet` command-line interface.
//!
//! ```text
//! comet synth  [--config spec.toml] [--seed N] --out DIR
//! comet train  --data train.csv --out model.ckpt [--config run.toml] [--preset NAME] [--seed N]
//! comet score  --checkpoint model.ckpt --data test.csv --out scores.csv [--tta on|off] [--config run.toml]
//! comet stream --checkpoint model.ckpt --data test.csv --out scores.csv [--config run.toml]
//! comet eval   --data scores.csv [--labels labels.csv] [--out report.json] [--grid N]
//! ```
//!
//! Every subcommand accepts `--threads N`. Log verbosity comes from the
//! `COMET_LOG` environment variable (`error`, `warn`, `info`, `debug`).
//!
//! Score files are comma-separated text. Lines starting with `#` carry the
//! resolved run config as JSON; the header is `t,s_mem,s_quant,score` plus
//! `label` when the input had a `label` column. Floats are printed in
//! shortest round-trip form.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, parse,
//! I/O, checkpoint format or undefined-metric error, 3 numeric or model
//! error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use comet::checkpoint::{load_checkpoint, save_checkpoint};
use comet::data::{load_csv, synthesize, write_csv, Standardizer, SyntheticSpec};
use comet::eval::{evaluate, MetricReport};
use comet::{CometError, RunConfig};

const LABEL_COLUMN: &str = "label";
const STANDARDIZE_EPS: f64 = 1e-8;

#[derive(Parser)]
#[command(name = "comet", version, about = "Multivariate time-series anomaly detection")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test corpus.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a series with a trained checkpoint.
    Score(ScoreArgs),
    /// Score a series with test-time adaptation (same as `score --tta on`).
    Stream(ScoreArgs),
    /// Compute detection metrics from a score file.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic spec (TOML); built-in default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training series (CSV with header).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// Dataset preset: psm, swat, smap, msl, wadi.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Series to score (CSV with header, optional `label` column).
    #[arg(long)]
    data: PathBuf,
    /// Score file to write.
    #[arg(long)]
    out: PathBuf,
    /// Test-time adaptation.
    #[arg(long, value_enum, default_value = "off")]
    tta: Switch,
    /// Run config whose [scoring] and [tta] tables replace the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset preset applied to the replacement config.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Score file written by `score`.
    #[arg(long)]
    data: PathBuf,
    /// CSV with a `label` column; defaults to the score file's own labels.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Metric report (JSON) to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evenly spaced thresholds instead of every unique score.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    scores: String,
    config: Option<serde_json::Value>,
    metrics: MetricReport,
}

fn exit_code(e: &CometError) -> u8 {
    match e {
        CometError::Config { .. } => 1,
        CometError::Data(_)
        | CometError::Parse { .. }
        | CometError::Io { .. }
        | CometError::WindowTooShort { .. }
        | CometError::UndefinedMetric(_)
        | CometError::Format(_)
        | CometError::Version { .. } => 2,
        CometError::Shape(_)
        | CometError::Degenerate(_)
        | CometError::Numeric(_)
        | CometError::Ordering(_)
        | CometError::Contract(_) => 3,
    }
}

fn read_text(path: &Path) -> comet::Result<String> {
    fs::read_to_string(path).map_err(|e| CometError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> comet::Result<()> {
    fs::write(path, text).map_err(|e| CometError::io(path, e))
}

fn synth(args: &SynthArgs) -> comet::Result<()> {
    let mut spec = match &args.config {
        Some(p) => SyntheticSpec::from_toml(&read_text(p)?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let ds = synthesize(&spec)?;
    fs::create_dir_all(&args.out).map_err(|e| CometError::io(&args.out, e))?;
    write_csv(&ds.train, args.out.join("train.csv"))?;
    write_csv(&ds.test, args.out.join("test.csv"))?;
    write_text(&args.out.join("spec.toml"), &spec.to_toml())?;
    println!(
        "wrote {} ({} train, {} test steps, {} variables)",
        args.out.display(),
        spec.train_length,
        spec.test_length,
        spec.variables
    );
    Ok(())
}

fn resolve_config(path: Option<&Path>, preset: Option<&str>, seed: Option<u64>) -> comet::Result<RunConfig> {
    let text = path.map(read_text).transpose()?;
    let mut cfg = RunConfig::resolve(text.as_deref(), preset)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train(args: &TrainArgs) -> comet::Result<()> {
    let cfg = resolve_config(args.config.as_deref(), args.preset.as_deref(), args.seed)?;
    let series = load_csv(&args.data, Some(LABEL_COLUMN))?;
    log::info!("training on {} steps x {} variables", series.len(), series.num_vars());
    let stats = Standardizer::fit(&series.values, STANDARDIZE_EPS)?;
    let values = stats.apply(&series.values)?;
    let out = comet::train(&values, &cfg, Some(stats), |e| println!("{}", e.log_line()))?;
    save_checkpoint(&out.checkpoint, &args.out)?;
    let det = &out.checkpoint.detector;
    println!(
        "checkpoint={} activated={} bank={}",
        args.out.display(),
        det.activations.len(),
        det.bank.total_entries()
    );
    Ok(())
}

fn fmt_row(out: &mut String, t: usize, m: f64, q: f64, s: f64, label: Option<u8>) {
    use std::fmt::Write as _;
    let _ = write!(out, "{t},{m},{q},{s}");
    if let Some(l) = label {
        let _ = write!(out, ",{l}");
    }
    out.push('\n');
}

fn score(args: &ScoreArgs, force_tta: bool) -> comet::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut det = ckpt.detector;
    if args.config.is_some() || args.preset.is_some() {
        let over = resolve_config(args.config.as_deref(), args.preset.as_deref(), args.seed)?;
        det.config.scoring = over.scoring;
        det.config.tta = over.tta;
        det.config.validate()?;
    }
    let tta = force_tta || args.tta == Switch::On;
    det.config.tta.enabled = tta;

    let series = load_csv(&args.data, Some(LABEL_COLUMN))?;
    if series.num_vars() != det.params.num_vars() {
        return Err(CometError::Data(format!(
            "{} has {} variables, the checkpoint was trained on {}",
            args.data.display(),
            series.num_vars(),
            det.params.num_vars()
        )));
    }
    let values = match &ckpt.stats {
        Some(st) => st.apply(&series.values)?,
        None => series.values.clone(),
    };
    let scores = if tta {
        let (s, reports) = det.score_stream(&values)?;
        log::info!(
            "adapted on {} batches ({} steps)",
            reports.len(),
            reports.iter().map(|r| r.steps_taken).sum::<usize>()
        );
        s
    } else {
        det.score(&values)?
    };

    let mut text = String::new();
    text.push_str("# comet scores\n");
    text.push_str(&format!("# tta={}\n", if tta { "on" } else { "off" }));
    text.push_str(&format!("# config={}\n", det.config.to_json()));
    text.push_str("t,s_mem,s_quant,score");
    text.push_str(if series.labels.is_some() { ",label\n" } else { "\n" });
    for t in 0..scores.len() {
        let label = series.labels.as_ref().map(|l| l[t]);
        fmt_row(&mut text, t, scores.mem[t], scores.quant[t], scores.score[t], label);
    }
    write_text(&args.out, &text)?;
    println!("scores={} steps={} tta={}", args.out.display(), scores.len(), if tta { "on" } else { "off" });
    Ok(())
}

struct ScoreFile {
    config: Option<serde_json::Value>,
    scores: Vec<f64>,
    labels: Option<Vec<u8>>,
}

fn read_score_file(path: &Path) -> comet::Result<ScoreFile> {
    let text = read_text(path)?;
    let config = text
        .lines()
        .filter_map(|l| l.strip_prefix("# config="))
        .next()
        .map(|j| serde_json::from_str(j).map_err(|e| CometError::Data(format!("config comment: {e}"))))
        .transpose()?;
    let table = comet::data::read_csv(text.as_bytes(), Some(LABEL_COLUMN))?;
    let col = table
        .names
        .iter()
        .position(|n| n == "score")
        .ok_or_else(|| CometError::Data(format!("{} has no `score` column", path.display())))?;
    let scores = (0..table.len()).map(|t| table.values.get(t, col)).collect();
    Ok(ScoreFile {
        config,
        scores,
        labels: table.labels,
    })
}

fn eval(args: &EvalArgs) -> comet::Result<()> {
    let file = read_score_file(&args.data)?;
    let labels = match &args.labels {
        Some(p) => load_csv(p, Some(LABEL_COLUMN))?
            .labels
            .ok_or_else(|| CometError::Data(format!("{} has no `{LABEL_COLUMN}` column", p.display())))?,
        None => file
            .labels
            .ok_or_else(|| CometError::Data("score file has no labels; pass --labels".into()))?,
    };
    if labels.len() != file.scores.len() {
        return Err(CometError::Data(format!(
            "{} scores but {} labels",
            file.scores.len(),
            labels.len()
        )));
    }
    let m = evaluate(&file.scores, &labels, args.grid)?;
    let lines = [
        ("f1_k0", m.f1_k0),
        ("threshold_k0", m.threshold_k0),
        ("f1_k100", m.f1_k100),
        ("threshold_k100", m.threshold_k100),
        ("auc_roc", m.auc_roc),
        ("auc_pr", m.auc_pr),
    ];
    let mut stdout = std::io::stdout().lock();
    for (k, v) in lines {
        let _ = writeln!(stdout, "{k}={v}");
    }
    if let Some(out) = &args.out {
        let report = ReportFile {
            scores: args.data.display().to_string(),
            config: file.config,
            metrics: m,
        };
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_text(out, &(json + "\n"))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> comet::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CometError::config("threads", "must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CometError::config("threads", e.to_string()))?;
    }
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a, false),
        Command::Stream(a) => score(a, true),
        Command::Eval(a) => eval(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("COMET_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
