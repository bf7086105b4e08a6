//! Command-line entry point: config handling, file plumbing and the four
//! subcommands (`synth`, `run`, `eval`, `grid`).
//!
//! A run is fully described by one JSON config document; CLI flags override
//! config keys, which override the built-in defaults. Every output file is
//! written atomically (temp file + rename) so an interrupted run never
//! leaves a corrupt artifact.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{repeated_runs, roc_auc, scatter_export, grid_search, Selection};
use crate::pipeline::{run_pipeline, ChangeResult, PipelineOptions};
use crate::raster::{
    normalize_channels, read_raster_file, subsample_mask, write_pgm, write_raster, Mask, Raster,
};
use crate::regress::{MethodSpec, RegressorSpec};
use crate::synth::{generate, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "hcd", version, about = "Heterogeneous change detection via two-way image regression")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic co-registered image pair with known change.
    Synth(CommonArgs),
    /// Run the full change-detection pipeline once.
    Run(CommonArgs),
    /// Repeat the pipeline over fresh training samples and aggregate.
    Eval(CommonArgs),
    /// Score every spec in the config's grid and report the best.
    Grid(CommonArgs),
}

#[derive(Debug, Args, Default, Clone)]
struct CommonArgs {
    /// JSON config file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Regression back-end, overriding the config.
    #[arg(long, value_parser = ["gp", "svr", "rf", "hpt"])]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Change-map threshold on the fused score.
    #[arg(long)]
    threshold: Option<f64>,
    /// Distance clip at mean + k sigma.
    #[arg(long)]
    clip_sigma: Option<f64>,
    /// Disable the 3x3 median filter on the fused score.
    #[arg(long)]
    no_median: bool,
    /// Number of repetitions for `eval`.
    #[arg(long)]
    runs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// The JSON config document. Every field has a default, so `{}` is valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub image_x: Option<PathBuf>,
    pub image_y: Option<PathBuf>,
    pub train_mask: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub regressor: RegressorSpec,
    pub clip_sigma: f64,
    pub threshold: f64,
    pub median_filter: bool,
    /// Repetitions for `eval`.
    pub n_runs: usize,
    /// Fraction of the training mask resampled per `eval` run.
    pub train_fraction: f64,
    /// Candidate specs for `grid`.
    pub grid: Vec<RegressorSpec>,
    pub selection: Selection,
    /// Scene description for `synth`.
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opts = PipelineOptions::default();
        RunConfig {
            image_x: None,
            image_y: None,
            train_mask: None,
            ground_truth: None,
            output_dir: PathBuf::from("out"),
            regressor: RegressorSpec {
                method: MethodSpec::Rf(Default::default()),
                seed: 0,
            },
            clip_sigma: opts.clip_sigma,
            threshold: opts.threshold,
            median_filter: opts.median_filter,
            n_runs: 10,
            train_fraction: 0.5,
            grid: Vec::new(),
            selection: Selection::CrossValidation,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    fn load(path: &Path) -> Result<RunConfig> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Config(format!("cannot open config {}: {e}", path.display())))?;
        serde_json::from_reader(std::io::BufReader::new(f))
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
    }

    /// Applies flag overrides: flags > config > defaults.
    fn apply(&mut self, args: &CommonArgs) {
        if let Some(name) = &args.method {
            if self.regressor.method.name() != name {
                self.regressor.method = match name.as_str() {
                    "gp" => MethodSpec::Gp(Default::default()),
                    "svr" => MethodSpec::Svr(Default::default()),
                    "rf" => MethodSpec::Rf(Default::default()),
                    _ => MethodSpec::Hpt(Default::default()),
                };
            }
        }
        if let Some(seed) = args.seed {
            self.regressor.seed = seed;
            self.synth.seed = seed;
        }
        if let Some(t) = args.threshold {
            self.threshold = t;
        }
        if let Some(k) = args.clip_sigma {
            self.clip_sigma = k;
        }
        if args.no_median {
            self.median_filter = false;
        }
        if let Some(r) = args.runs {
            self.n_runs = r;
        }
        if let Some(out) = &args.out {
            self.output_dir = out.clone();
        }
    }

    fn options(&self) -> PipelineOptions {
        PipelineOptions {
            clip_sigma: self.clip_sigma,
            threshold: self.threshold,
            median_filter: self.median_filter,
        }
    }
}

fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(args);
    Ok(cfg)
}

/// Caps the global rayon pool from `HCD_THREADS`. Parallel maps are
/// index-partitioned, so the cap changes speed only, never results.
fn configure_threads() -> Result<()> {
    if let Ok(raw) = std::env::var("HCD_THREADS") {
        let n: usize = raw
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("HCD_THREADS must be a positive integer, got {raw:?}")))?;
        // a second initialization (as in tests) keeps the earlier pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Writes through a temp file in the destination directory, then renames.
fn atomic_write(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))?;
    write(tmp.as_file_mut())?;
    tmp.as_file_mut().flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn write_raster_atomic(path: &Path, r: &Raster) -> Result<()> {
    atomic_write(path, |w| write_raster(r, w))
}

/// 8-bit preview of the first channel, min-max scaled to [0,1].
fn write_preview(path: &Path, r: &Raster) -> Result<()> {
    let n = normalize_channels(r);
    let first: Vec<f32> = n
        .data()
        .chunks_exact(n.channels())
        .map(|px| px[0])
        .collect();
    let single = Raster::new(n.height(), n.width(), 1, first)?;
    atomic_write(path, |w| write_pgm(&single, w))
}

fn load_mask(path: &Path) -> Result<Mask> {
    Mask::from_raster(&read_raster_file(path)?)
}

fn require<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    field
        .as_deref()
        .ok_or_else(|| Error::Config(format!("config key {name} is required for this subcommand")))
}

fn load_inputs(cfg: &RunConfig) -> Result<(Raster, Raster, Mask)> {
    let x = read_raster_file(require(&cfg.image_x, "image_x")?)?;
    let y = read_raster_file(require(&cfg.image_y, "image_y")?)?;
    let mask = load_mask(require(&cfg.train_mask, "train_mask")?)?;
    Ok((x, y, mask))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let (x, y, change, unchanged) = generate(&cfg.synth)?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    for (name, raster) in [
        ("x", &x),
        ("y", &y),
        ("change_mask", &change.to_raster()),
        ("unchanged_mask", &unchanged.to_raster()),
    ] {
        write_raster_atomic(&dir.join(format!("{name}.hcdr")), raster)?;
        write_preview(&dir.join(format!("{name}.pgm")), raster)?;
    }
    println!(
        "synth: wrote {}x{} pair ({} + {} channels, {:?}) to {}",
        cfg.synth.height,
        cfg.synth.width,
        x.channels(),
        y.channels(),
        cfg.synth.sensor_b_style,
        dir.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunReport<'a> {
    method: &'a str,
    auc: Option<f64>,
    threshold: f64,
    timings: crate::pipeline::Timings,
    config: &'a RunConfig,
}

fn write_result_artifacts(dir: &Path, result: &ChangeResult) -> Result<()> {
    for (name, raster) in [
        ("score", result.score.to_raster()),
        ("change_map", result.change_map.to_raster()),
        ("distance_x", result.distance_x.to_raster()),
        ("distance_y", result.distance_y.to_raster()),
        ("predicted_x", result.predicted_x.clone()),
        ("predicted_y", result.predicted_y.clone()),
    ] {
        write_raster_atomic(&dir.join(format!("{name}.hcdr")), &raster)?;
    }
    write_preview(&dir.join("score.pgm"), &result.score.to_raster())?;
    write_preview(&dir.join("change_map.pgm"), &result.change_map.to_raster())?;
    Ok(())
}

fn cmd_run(cfg: &RunConfig) -> Result<()> {
    let (x, y, mask) = load_inputs(cfg)?;
    let result = run_pipeline(&x, &y, &mask, &cfg.regressor, &cfg.options())?;
    let auc = match &cfg.ground_truth {
        Some(path) => Some(roc_auc(&result.score, &load_mask(path)?)?.auc),
        None => None,
    };
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    write_result_artifacts(dir, &result)?;
    let report = RunReport {
        method: cfg.regressor.method.name(),
        auc,
        threshold: cfg.threshold,
        timings: result.timings,
        config: cfg,
    };
    atomic_write(&dir.join("result.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)
            .map_err(|e| Error::Format(format!("result serialization: {e}")))?;
        writeln!(w)?;
        Ok(())
    })?;
    if let Some(auc) = auc {
        println!("auc {auc:.6}");
    }
    println!(
        "run: {} in {:.2}s, artifacts in {}",
        cfg.regressor.method.name(),
        result.timings.total(),
        dir.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let (x, y, mask) = load_inputs(cfg)?;
    let truth = load_mask(require(&cfg.ground_truth, "ground_truth")?)?;
    let fraction = cfg.train_fraction;
    let (record, runs) = repeated_runs(
        &x,
        &y,
        &truth,
        &cfg.regressor,
        cfg.n_runs,
        &cfg.options(),
        |seed| subsample_mask(&mask, fraction, seed),
    )?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    atomic_write(&dir.join("benchmark.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &record)
            .map_err(|e| Error::Format(format!("benchmark serialization: {e}")))?;
        writeln!(w)?;
        Ok(())
    })?;
    atomic_write(&dir.join("benchmark.csv"), |w| scatter_export(&runs, w))?;
    println!(
        "eval: {} auc {:.4} +- {:.4}, time {:.2}s +- {:.2}s over {} runs",
        record.method, record.auc_mean, record.auc_std, record.time_mean_s, record.time_std_s, record.runs
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct GridReport<'a> {
    best_index: usize,
    best: &'a RegressorSpec,
    selection: Selection,
    records: &'a [crate::eval::GridRecord],
}

fn cmd_grid(cfg: &RunConfig) -> Result<()> {
    if cfg.grid.is_empty() {
        return Err(Error::Config("config key grid must list candidate specs".into()));
    }
    let (x, y, mask) = load_inputs(cfg)?;
    let truth = match &cfg.ground_truth {
        Some(path) => Some(load_mask(path)?),
        None => None,
    };
    let (best, records) = grid_search(
        &x,
        &y,
        &mask,
        truth.as_ref(),
        &cfg.grid,
        cfg.selection,
        &cfg.options(),
    )?;
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    let report = GridReport {
        best_index: best,
        best: &cfg.grid[best],
        selection: cfg.selection,
        records: &records,
    };
    atomic_write(&dir.join("grid.json"), |w| {
        serde_json::to_writer_pretty(&mut *w, &report)
            .map_err(|e| Error::Format(format!("grid serialization: {e}")))?;
        writeln!(w)?;
        Ok(())
    })?;
    println!(
        "grid: best [{}] {} criterion {:.6}",
        best,
        records[best].method,
        records[best].criterion
    );
    Ok(())
}

/// Parses `argv` and executes; returns a process exit code. Failures print
/// a single `error:<category>: <message>` line to stderr.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version through this path with code 0
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error:{}: {}", e.category(), e);
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(args) => cmd_synth(&resolve(args)?),
        Command::Run(args) => cmd_run(&resolve(args)?),
        Command::Eval(args) => cmd_eval(&resolve(args)?),
        Command::Grid(args) => cmd_grid(&resolve(args)?),
    }
}
