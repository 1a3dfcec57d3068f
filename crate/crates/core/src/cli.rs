//! `dacs` command line: `generate`, `train`, `eval`, `ablate`.
//!
//! Exit codes: 0 success, 2 usage or I/O error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, ExperimentConfig};
use crate::error::{Error, Result};
use crate::grid::argmax_labels;
use crate::metrics::DEFAULT_CONFLATION_THRESHOLD;
use crate::mix::MixStrategy;
use crate::model::SegModel;
use crate::storage::{write_benchmark, write_json, write_label_ppm, DataDir, Manifest};
use crate::synthgen::{generate_benchmark, Split};
use crate::trainer::{self, evaluate, format_metrics, EvalMetrics, RunOptions, RunReport, TrainConfig, Variant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Worker threads for `ablate`; defaults to 1.
pub const WORKERS_ENV: &str = "DACS_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "dacs", version, about = "Cross-domain mixed sampling on a synthetic segmentation benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the source/target benchmark to disk.
    Generate(GenerateArgs),
    /// Train one variant.
    Train(TrainArgs),
    /// Score a checkpoint on the target evaluation split.
    Eval(EvalArgs),
    /// Run every ablation variant over a list of seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the final step's mixed images and labels under `<out>/mixed/`.
    #[arg(long)]
    pub dump_qualitative: bool,
    /// Also keep the checkpoint with the best evaluation mIoU.
    #[arg(long)]
    pub report_best_on_eval: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Only `train.conflation_threshold` is read.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Destination of prediction images.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write one prediction image per evaluation scene.
    #[arg(long)]
    pub dump_qualitative: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub seeds: Vec<u64>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Generate(a) => cmd_generate(a.config.as_deref(), &a.out).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(a).map(|_| EXIT_OK),
        Command::Eval(a) => cmd_eval(a).map(|m| {
            println!("{}", eval_header(m.per_class_iou.len()));
            println!("{}", format_metrics(&m));
            EXIT_OK
        }),
        Command::Ablate(a) => cmd_ablate(a).map(|s| s.exit_code()),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn eval_header(k: usize) -> String {
    let ious: Vec<String> = (0..k).map(|c| format!("iou_{c}")).collect();
    format!("{},miou,conflated", ious.join(","))
}

pub fn cmd_generate(config: Option<&Path>, out: &Path) -> Result<Manifest> {
    let cfg = ExperimentConfig::load_or_default(config)?;
    let bench = generate_benchmark(&cfg.benchmark)?;
    write_benchmark(out, &cfg.benchmark, &bench)
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunReport> {
    let mut cfg = ExperimentConfig::load_or_default(args.config.as_deref())?.train;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let data = DataDir::open(&args.data)?;
    let opts = RunOptions {
        dump_mixed: args.dump_qualitative,
        report_best_on_eval: args.report_best_on_eval,
    };
    trainer::run(&cfg, &data, &args.out, &opts)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalMetrics> {
    let threshold = match &args.config {
        Some(p) => ExperimentConfig::load(p)?.train.conflation_threshold,
        None => DEFAULT_CONFLATION_THRESHOLD,
    };
    let (model, _) = SegModel::load_checkpoint(&args.checkpoint)?;
    let data = DataDir::open(&args.data)?;
    let eval = data.load_dataset(Split::TargetEval)?;
    let arch = model.architecture();
    let m = data.manifest();
    if arch.in_channels != m.channels || arch.num_classes != m.num_classes {
        return Err(Error::shape(
            format!("C={} K={} (checkpoint)", arch.in_channels, arch.num_classes),
            format!("C={} K={} (data)", m.channels, m.num_classes),
        ));
    }
    let metrics = evaluate(&model, &eval, threshold)?;
    if args.dump_qualitative {
        let out = args
            .out
            .as_ref()
            .ok_or_else(|| Error::Config("--dump-qualitative needs --out".into()))?;
        let dir = out.join("predictions");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (h, w, k) = (eval.images.height(), eval.images.width(), arch.num_classes);
        for i in 0..eval.len() {
            let pred = argmax_labels(&model.forward(&eval.images.select(&[i])?)?);
            write_label_ppm(&dir.join(format!("pred_{i:04}.ppm")), pred.data(), k, h, w)?;
        }
    }
    Ok(metrics)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub variant: Variant,
    pub strategy: MixStrategy,
}

/// Ablation rows in reporting order: source only, naive mixing, plain
/// pseudo-labelling, cutmix, cowmix, distribution alignment, classmix.
pub fn ablation_cells() -> Vec<AblationCell> {
    let cell = |name: &str, variant, strategy| AblationCell {
        name: name.into(),
        variant,
        strategy,
    };
    vec![
        cell("source_only", Variant::SourceOnly, MixStrategy::ClassMix),
        cell("naive_mixing", Variant::NaiveMixing, MixStrategy::ClassMix),
        cell("pseudo_only", Variant::PseudoOnly, MixStrategy::ClassMix),
        cell("dacs_cutmix", Variant::Dacs, MixStrategy::default_cutmix()),
        cell("dacs_cowmix", Variant::Dacs, MixStrategy::default_cowmix()),
        cell("naive_mixing_distalign", Variant::NaiveMixingDistalign, MixStrategy::ClassMix),
        cell("dacs_classmix", Variant::Dacs, MixStrategy::ClassMix),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub cell: String,
    pub seed: u64,
    pub final_miou: Option<f64>,
    pub final_per_class_iou: Vec<Option<f64>>,
    pub conflation_count: usize,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationFailure {
    pub cell: String,
    pub seed: u64,
    pub error: String,
    pub exit_code: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub runs: usize,
    pub mean_per_class_iou: Vec<Option<f64>>,
    pub mean_miou: Option<f64>,
    pub mean_conflated: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
    pub failures: Vec<AblationFailure>,
}

impl AblationSummary {
    pub fn row(&self, cell: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell)
    }

    pub fn exit_code(&self) -> i32 {
        self.failures.iter().map(|f| f.exit_code).max().unwrap_or(EXIT_OK)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn aggregate(cells: &[AblationCell], runs: &[AblationRun], k: usize) -> Vec<AblationRow> {
    cells
        .iter()
        .map(|cell| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.cell == cell.name).collect();
            AblationRow {
                cell: cell.name.clone(),
                runs: mine.len(),
                mean_per_class_iou: (0..k)
                    .map(|c| mean(mine.iter().filter_map(|r| r.final_per_class_iou[c])))
                    .collect(),
                mean_miou: mean(mine.iter().filter_map(|r| r.final_miou)),
                mean_conflated: mean(mine.iter().map(|r| r.conflation_count as f64)),
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn ablation_csv(rows: &[AblationRow], k: usize) -> String {
    let ious: Vec<String> = (0..k).map(|c| format!("iou_{c}")).collect();
    let mut out = format!("variant,runs,{},miou,conflated\n", ious.join(","));
    for r in rows {
        let ious: Vec<String> = r.mean_per_class_iou.iter().map(|v| fmt_opt(*v)).collect();
        out += &format!(
            "{},{},{},{},{}\n",
            r.cell,
            r.runs,
            ious.join(","),
            fmt_opt(r.mean_miou),
            fmt_opt(r.mean_conflated)
        );
    }
    out
}

fn workers() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Runs every ablation cell for every seed into `<out>/<cell>/seed_<s>/`
/// and writes `ablation.csv` (per-cell means) and `summary.json`. Failed
/// cells are recorded in the summary; the remaining cells still run.
pub fn cmd_ablate(args: &AblateArgs) -> Result<AblationSummary> {
    let base = ExperimentConfig::load_or_default(args.config.as_deref())?.train;
    if args.seeds.is_empty() {
        return Err(Error::Config("--seeds must list at least one seed".into()));
    }
    // validate the data directory once before fanning out
    let k = DataDir::open(&args.data)?.manifest().num_classes;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let cells = ablation_cells();
    let jobs: Vec<(AblationCell, u64)> = cells
        .iter()
        .flat_map(|c| args.seeds.iter().map(move |&s| (c.clone(), s)))
        .collect();

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<std::result::Result<AblationRun, AblationFailure>>>> =
        Mutex::new(vec![None; jobs.len()]);
    let worker = || loop {
        let j = next.fetch_add(1, Ordering::SeqCst);
        let Some((cell, seed)) = jobs.get(j) else { break };
        let outcome = run_cell(&base, cell, *seed, &args.data, &args.out);
        if let Err(f) = &outcome {
            eprintln!("{} seed {} failed: {}", f.cell, f.seed, f.error);
        }
        results.lock().expect("no worker panics while holding the lock")[j] = Some(outcome);
    };
    std::thread::scope(|s| {
        for _ in 0..workers().min(jobs.len()) {
            s.spawn(worker);
        }
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for r in results.into_inner().expect("workers finished").into_iter().flatten() {
        match r {
            Ok(run) => runs.push(run),
            Err(f) => failures.push(f),
        }
    }
    let rows = aggregate(&cells, &runs, k);
    let csv_path = args.out.join("ablation.csv");
    fs::write(&csv_path, ablation_csv(&rows, k)).map_err(|e| Error::io(&csv_path, e))?;
    let summary = AblationSummary {
        config_hash: config_hash(&base),
        seeds: args.seeds.clone(),
        rows,
        runs,
        failures,
    };
    write_json(&args.out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn run_cell(
    base: &TrainConfig,
    cell: &AblationCell,
    seed: u64,
    data: &Path,
    out: &Path,
) -> std::result::Result<AblationRun, AblationFailure> {
    let cfg = TrainConfig {
        variant: cell.variant,
        strategy: cell.strategy.clone(),
        seed,
        ..base.clone()
    };
    let dir = out.join(&cell.name).join(format!("seed_{seed}"));
    let report = DataDir::open(data).and_then(|d| trainer::run(&cfg, &d, &dir, &RunOptions::default()));
    match report {
        Ok(r) => Ok(AblationRun {
            cell: cell.name.clone(),
            seed,
            final_miou: r.final_miou,
            final_per_class_iou: r.final_per_class_iou,
            conflation_count: r.conflation_count,
            wall_clock_seconds: r.wall_clock_seconds,
        }),
        Err(e) => Err(AblationFailure {
            cell: cell.name.clone(),
            seed,
            exit_code: exit_code(&e),
            error: e.to_string(),
        }),
    }
}
