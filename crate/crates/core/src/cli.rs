//! Command-line front end. Exit codes: 0 success, 1 usage or config error,
//! 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablate::{ablate, preset_variants, rows_csv, summarize, summary_csv, line_chart_svg, Preset};
use crate::annotations::{read_annotations, split_dirs, write_annotations};
use crate::checks::{format_table, run_checks, suite};
use crate::config::RunConfig;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::params::ParamStore;
use crate::synth::{generate_dataset, generate_test_set, imbalance, SceneRecord};
use crate::train::{init_rng, metrics_csv, train, TrainState};

#[derive(Debug, Parser)]
#[command(name = "crpn", version, about = "Cascade region proposal detector on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the scene seed (synth) or the training seed (train, ablate).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Omit the `# generated` line from CSV outputs.
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test scenes.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train from scratch or resume from a snapshot.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root holding `train/` (and `test/` for periodic eval).
        #[arg(long)]
        data: PathBuf,
        /// Snapshot to continue from; iteration numbering carries on.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a snapshot on a dataset's test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every preset variant for every seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Parses arguments, runs, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn stamp(common: &Common) -> Option<String> {
    if common.no_timestamp {
        return None;
    }
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    Some(format!("unix {secs}"))
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(common: &Common, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_split(dir: &Path, what: &str) -> Result<Vec<SceneRecord>> {
    let data = read_annotations(dir)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} split {} has no images", dir.display())));
    }
    Ok(data)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { common } => cmd_synth(common),
        Command::Train { common, data, resume } => cmd_train(common, data, resume.as_deref()),
        Command::Eval { common, data, snapshot } => cmd_eval(common, data, snapshot),
        Command::Gradcheck { common } => cmd_gradcheck(common),
        Command::Ablate { common, data } => cmd_ablate(common, data),
    }
}

pub fn cmd_synth(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.scene.seed = s;
    }
    let out = out_dir(common, &cfg)?;
    let (train_dir, test_dir) = split_dirs(&out);
    let train_set = generate_dataset(&cfg.scene)?;
    let test_set = generate_test_set(&cfg.scene)?;
    write_annotations(&train_set, &train_dir)?;
    write_annotations(&test_set, &test_dir)?;

    let mut store = ParamStore::new();
    let det = Detector::new(&cfg.model(), &mut store, &mut init_rng(0))?;
    let im = imbalance(&train_set, det.anchors(), &cfg.cascade);
    println!(
        "wrote {} train and {} test images to {}",
        train_set.len(),
        test_set.len(),
        out.display()
    );
    println!(
        "anchor labels over train: {} positive, {} negative, {} ignored; negative:positive = {:.1}:1",
        im.positives,
        im.negatives,
        im.ignored,
        im.ratio()
    );
    Ok(())
}

pub fn cmd_train(common: &Common, data: &Path, resume: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    let (train_dir, test_dir) = split_dirs(data);
    let train_set = load_split(&train_dir, "train")?;
    let test_set = if cfg.train.eval_every > 0 { Some(load_split(&test_dir, "test")?) } else { None };
    let out = out_dir(common, &cfg)?;

    let mut store = ParamStore::new();
    let det = Detector::new(&cfg.model(), &mut store, &mut init_rng(cfg.train.seed))?;
    let mut state = match resume {
        Some(p) => TrainState::load(p, store)?,
        None => TrainState::new(store),
    };
    let start = state.iteration;
    let boundaries = cfg.train.boundaries();
    let mut evals = String::from("iteration,map50\n");
    let mut eval_error = None;
    let rows = train(&det, &mut state, &train_set, &cfg.train, |row, st| {
        if boundaries.contains(&st.iteration) {
            st.save(&out.join(format!("checkpoint_{:06}.snap", st.iteration)))?;
        }
        if let Some(test) = &test_set {
            if st.iteration % cfg.train.eval_every == 0 {
                match evaluate_model(&det, &st.params, test) {
                    Ok(r) => {
                        evals.push_str(&format!("{},{}\n", st.iteration, r.map50));
                        println!("iteration {}: test mAP@0.5 {:.4}", st.iteration, r.map50);
                    }
                    Err(e) => eval_error = Some(e.to_string()),
                }
            }
        }
        if row.iteration % 100 == 0 {
            println!("iteration {} loss {:.5}", row.iteration, row.report.loss.detection_total);
        }
        Ok(())
    })?;
    if let Some(e) = eval_error {
        return Err(Error::InvalidArgument(format!("periodic evaluation failed: {e}")));
    }
    let ts = stamp(common);
    let metrics = out.join("metrics.csv");
    let csv = metrics_csv(&rows, cfg.cascade.stages, ts.as_deref());
    if start > 0 && metrics.is_file() {
        // Append to the log of the run being resumed.
        let body: String = csv.lines().skip(if ts.is_some() { 2 } else { 1 }).map(|l| format!("{l}\n")).collect();
        let mut old = fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
        old.push_str(&body);
        write(&metrics, &old)?;
    } else {
        write(&metrics, &csv)?;
    }
    if test_set.is_some() {
        write(&out.join("eval_log.csv"), &evals)?;
    }
    state.save(&out.join("final.snap"))?;
    println!(
        "trained iterations {start}..{} ; snapshot {}",
        state.iteration,
        out.join("final.snap").display()
    );
    Ok(())
}

pub fn cmd_eval(common: &Common, data: &Path, snapshot: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let (_, test_dir) = split_dirs(data);
    let dir = if test_dir.is_dir() { test_dir } else { data.to_path_buf() };
    let test = load_split(&dir, "test")?;
    let mut store = ParamStore::new();
    let det = Detector::new(&cfg.model(), &mut store, &mut init_rng(0))?;
    let state = TrainState::load(snapshot, store)?;
    let report = evaluate_model(&det, &state.params, &test)?;
    let out = out_dir(common, &cfg)?;
    write(&out.join("eval.csv"), &report.to_csv(stamp(common).as_deref()))?;
    println!("{}", report.summary());
    print_rejection(&report);
    Ok(())
}

fn print_rejection(r: &EvalReport) {
    let rates: Vec<String> = r.per_stage_rejection_rate.iter().map(|v| format!("{v:.3}")).collect();
    println!("per-stage rejection: [{}]", rates.join(", "));
}

pub fn cmd_gradcheck(common: &Common) -> Result<()> {
    let _ = load_config(common)?;
    let results = run_checks(&suite());
    print!("{}", format_table(&results));
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Error::Failed(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

pub fn cmd_ablate(common: &Common, data: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let (train_dir, test_dir) = split_dirs(data);
    let train_set = load_split(&train_dir, "train")?;
    let test_set = load_split(&test_dir, "test")?;
    let out = out_dir(common, &cfg)?;
    let seeds = match common.seed {
        Some(s) => vec![s],
        None => cfg.ablate.seeds.clone(),
    };
    let base = cfg.model();
    let ts = stamp(common);
    let mut all_rows = Vec::new();
    for &preset in &cfg.ablate.presets {
        let variants = preset_variants(&base, preset, &cfg.ablate);
        let rows = ablate(&variants, &cfg.train, &seeds, &train_set, &test_set, |r| {
            println!("{:<16} seed {:<4} mAP@0.5 {:.4}", r.variant, r.seed, r.report.map50);
        })?;
        let summary = summarize(&rows);
        let chart = |file: &str, title: &str, x: &str| {
            let pts: Vec<(String, f64)> = summary
                .iter()
                .map(|s| (s.variant.split_once('=').map_or(s.variant.clone(), |p| p.1.to_string()), s.mean))
                .collect();
            write(&out.join(file), &line_chart_svg(title, x, "mean mAP@0.5", &pts))
        };
        match preset {
            Preset::R => chart("ap_vs_r.svg", "mAP vs reject threshold", "reject threshold r")?,
            Preset::LambdaF => chart("ap_vs_lambda_f.svg", "mAP vs fusion rate", "lambda_f")?,
            _ => {}
        }
        for s in &summary {
            println!("{:<16} {:.4} ± {:.4} over {} runs", s.variant, s.mean, s.std, s.runs);
        }
        all_rows.extend(rows);
    }
    write(&out.join("ablation.csv"), &rows_csv(&all_rows, ts.as_deref()))?;
    write(&out.join("ablation_summary.csv"), &summary_csv(&summarize(&all_rows), ts.as_deref()))?;
    Ok(())
}
