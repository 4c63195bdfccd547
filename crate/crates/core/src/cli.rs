//! `abstain` command line.
//!
//! Every CSV written starts with a `#` comment line recording the tool
//! version, the effective parameters and the dataset metadata. The worker
//! count and output paths are left out of it since they never change results.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cascade::{self, CombinedInclusion};
use crate::dataset::{self, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::sim::{self, LatencyModel};
use crate::sweep::{self, Candidate, Grid, Metric};
use crate::window::{self, StageIndex, Window};
use crate::{CLOUD, PHONE};

pub const EXIT_OK: i32 = 0;
/// Unknown subcommand or bad flags (clap's own code).
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
/// The input dataset failed validation.
pub const EXIT_INVALID_DATA: i32 = 4;
/// Bad configuration or an evaluation precondition failed.
pub const EXIT_EVAL: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "abstain",
    version,
    about = "Abstaining phone/cloud/human cascade evaluation"
)]
pub struct Cli {
    /// Worker threads for sweeps (0 = all cores). Never affects output.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset file and print a summary.
    Validate(ValidateArgs),
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Sweep one stage over a threshold grid; write heatmaps and candidates.
    Sweep(SweepArgs),
    /// Combined phone/cloud/human MCC grid.
    Cascade(CascadeArgs),
    /// False-alarm curves for phone-only, cloud-only and combined deployments.
    Compare(CompareArgs),
    /// Simulate deployment latency for a phone/cloud window pair.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Line-delimited dataset file.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Reject confidences equal to 0 or 1.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long, default_value_t = 0.05)]
    pub step: f64,
    #[arg(long, default_value_t = 0.0)]
    pub min: f64,
    #[arg(long, default_value_t = 0.95)]
    pub max: f64,
}

impl GridArgs {
    fn grid(&self) -> Result<Grid> {
        sweep::make_grid(self.step, self.min, self.max)
    }

    fn describe(&self) -> String {
        format!("step={} min={} max={}", self.step, self.min, self.max)
    }
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Stage for the diagnostics export.
    #[arg(long, default_value = PHONE)]
    pub stage: String,
    /// Window `lower,upper` for the diagnostics export.
    #[arg(long, value_parser = parse_window)]
    pub window: Option<Window>,
    /// Write per-image `image_id,l,u,decision` rows here (needs --window).
    #[arg(long, requires = "window")]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_images: Option<usize>,
    /// TOML generator configuration; defaults mimic a 2093-image validation split.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value = PHONE)]
    pub stage: String,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CascadeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Cloud grid step (defaults to --step).
    #[arg(long)]
    pub cloud_step: Option<f64>,
    /// Display resolution of the abstention axes.
    #[arg(long, default_value_t = 0.05)]
    pub bucket: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InclusionArg {
    /// Abstentions filled downstream; every image counts.
    Downstream,
    /// Only images answered by the phone or the cloud.
    Machine,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long)]
    pub cloud_step: Option<f64>,
    /// Median smoothing width in abstention-fraction units.
    #[arg(long, default_value_t = 0.05)]
    pub smooth: f64,
    #[arg(long, value_enum, default_value_t = InclusionArg::Downstream)]
    pub combined_inclusion: InclusionArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Phone window `lower,upper`.
    #[arg(long, value_parser = parse_window)]
    pub phone_window: Window,
    /// Cloud window `lower,upper`; omit for a cloud that defers everything to review.
    #[arg(long, value_parser = parse_window)]
    pub cloud_window: Option<Window>,
    /// TOML latency model; defaults to the fitted field model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_window(s: &str) -> std::result::Result<Window, String> {
    let (lo, hi) = s.split_once(',').ok_or("expected `lower,upper`")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("lower: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("upper: {e}"))?;
    Window::new(lo, hi).map_err(|e| e.to_string())
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Malformed { .. }
        | Error::MissingField { .. }
        | Error::DuplicateId(_)
        | Error::ConfidenceOutOfRange { .. }
        | Error::MissingStage { .. } => EXIT_INVALID_DATA,
        _ => EXIT_EVAL,
    }
}

/// Parses `args` (program name first) and runs the command. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::Validate(a) => validate(a),
        Command::Synth(a) => synth(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Cascade(a) => run_cascade(a),
        Command::Compare(a) => run_compare(a),
        Command::Simulate(a) => run_simulate(a),
    })
}

fn header(command: &str, params: &str, dataset: &Dataset) -> String {
    let meta = serde_json::to_string(&dataset.metadata).expect("metadata serializes");
    format!(
        "# abstain {} | {command} {params} | records={} meta={meta}\n",
        env!("CARGO_PKG_VERSION"),
        dataset.len()
    )
}

fn input_params(a: &InputArgs) -> String {
    format!("input={} strict={}", a.input.display(), a.strict)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn validate(a: &ValidateArgs) -> Result<()> {
    let ds = dataset::load_dataset(&a.input.input, a.input.strict)?;
    let counts = dataset::class_counts(&ds);
    let mut report = header("validate", &input_params(&a.input), &ds);
    let _ = writeln!(report, "records,{}", ds.len());
    for (level, n) in &counts {
        let _ = writeln!(report, "truth_{level},{n}");
    }
    let stages: Vec<&str> = ds.stage_names().into_iter().collect();
    let _ = writeln!(report, "stages,{}", stages.join(";"));
    let complete = |s: &str| ds.require_stage(s).is_ok();
    let _ = writeln!(
        report,
        "cascade_ready,{}",
        complete(PHONE) && complete(CLOUD)
    );
    let boxes: usize = ds
        .records()
        .iter()
        .flat_map(|r| r.stage_detections.values())
        .map(Vec::len)
        .sum();
    let _ = writeln!(report, "boxes,{boxes}");

    if let (Some(path), Some(window)) = (&a.diagnostics, a.window) {
        let rows = window::diagnose_stage(&ds, &a.stage, &window)?;
        let params = format!(
            "{} stage={} window={}",
            input_params(&a.input),
            a.stage,
            window
        );
        let mut out = header("validate", &params, &ds);
        out.push_str("image_id,l,u,decision\n");
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.image_id, r.partition.l, r.partition.u, r.decision
            );
        }
        write_file(path, &out)?;
    }
    print!("{report}");
    std::io::stdout()
        .flush()
        .map_err(|e| Error::io("<stdout>", e))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<SynthConfig>(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?
        }
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(n) = a.n_images {
        config.n_images = n;
    }
    let mut ds = dataset::generate_synthetic(&config)?;
    ds.metadata.insert(
        "generator".into(),
        format!("abstain {} synth", env!("CARGO_PKG_VERSION")).into(),
    );
    ds.metadata.insert(
        "config".into(),
        serde_json::to_value(&config).expect("config serializes"),
    );
    ds.save(&a.out)
}

fn run_sweep(a: &SweepArgs) -> Result<()> {
    let ds = dataset::load_dataset(&a.input.input, a.input.strict)?;
    let grid = a.grid.grid()?;
    let candidates = sweep::sweep_stage(&ds, &a.stage, &grid)?;
    let params = format!(
        "{} stage={} {}",
        input_params(&a.input),
        a.stage,
        a.grid.describe()
    );
    let head = header("sweep", &params, &ds);

    ensure_dir(&a.out)?;
    write_file(
        &a.out.join("candidates.csv"),
        &(head.clone() + &sweep::export_candidates(&candidates)),
    )?;
    for metric in Metric::ALL {
        write_file(
            &a.out.join(format!("heatmap_{}.csv", metric.name())),
            &(head.clone() + &sweep::heatmap_csv(&candidates, metric)),
        )?;
    }
    Ok(())
}

fn cloud_grid(grid: &GridArgs, cloud_step: Option<f64>) -> Result<Grid> {
    sweep::make_grid(cloud_step.unwrap_or(grid.step), grid.min, grid.max)
}

fn run_cascade(a: &CascadeArgs) -> Result<()> {
    let ds = dataset::load_dataset(&a.input.input, a.input.strict)?;
    let phone_grid = a.grid.grid()?;
    let cloud = cloud_grid(&a.grid, a.cloud_step)?;
    let cells = cascade::combined_grid(&ds, &phone_grid, &cloud, a.bucket)?;
    let params = format!(
        "{} {} cloud_step={} bucket={}",
        input_params(&a.input),
        a.grid.describe(),
        cloud.step,
        a.bucket
    );
    let head = header("cascade", &params, &ds);
    ensure_dir(&a.out)?;
    write_file(
        &a.out.join("cascade_grid.csv"),
        &(head.clone() + &cascade::export_grid(&cells)),
    )?;
    write_file(
        &a.out.join("cascade_cells.csv"),
        &(head + &cascade::export_cells(&cells)),
    )
}

fn run_compare(a: &CompareArgs) -> Result<()> {
    let ds = dataset::load_dataset(&a.input.input, a.input.strict)?;
    let phone_grid = a.grid.grid()?;
    let cloud = cloud_grid(&a.grid, a.cloud_step)?;
    let inclusion = match a.combined_inclusion {
        InclusionArg::Downstream => CombinedInclusion::DownstreamFilled,
        InclusionArg::Machine => CombinedInclusion::MachineAnswered,
    };
    let curves = cascade::comparison_curves(&ds, &phone_grid, &cloud, a.smooth, inclusion)?;
    for c in curves.iter().filter(|c| c.is_empty()) {
        eprintln!("warning: {} curve has no points", c.family.name());
    }
    let params = format!(
        "{} {} cloud_step={} smooth={} combined_inclusion={:?}",
        input_params(&a.input),
        a.grid.describe(),
        cloud.step,
        a.smooth,
        a.combined_inclusion
    );
    ensure_dir(&a.out)?;
    write_file(
        &a.out.join("curves.csv"),
        &(header("compare", &params, &ds) + &cascade::export_curves(&curves)),
    )
}

fn candidate_at(
    ds: &Dataset,
    stage: &str,
    window: Window,
    scope: std::sync::Arc<[usize]>,
) -> Result<Candidate> {
    let index = StageIndex::build(ds, stage)?;
    Ok(Candidate::evaluate(
        &index,
        &ds.truth_alerts(),
        stage,
        window,
        scope,
    ))
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn run_simulate(a: &SimulateArgs) -> Result<()> {
    let ds = dataset::load_dataset(&a.input.input, a.input.strict)?;
    let model = match &a.model {
        Some(p) => LatencyModel::load(p)?,
        None => LatencyModel::default(),
    };
    let phone = candidate_at(&ds, PHONE, a.phone_window, sweep::full_scope(&ds))?;
    let cloud = match a.cloud_window {
        Some(w) => {
            ds.require_stage(CLOUD)?;
            Some(candidate_at(&ds, CLOUD, w, phone.abstained().into())?)
        }
        None => None,
    };
    let report = sim::simulate(&ds, &phone, cloud.as_ref(), &model, a.seed)?;

    let params = format!(
        "{} phone_window={} cloud_window={} model={} seed={}",
        input_params(&a.input),
        a.phone_window,
        a.cloud_window
            .map(|w| w.to_string())
            .unwrap_or_else(|| "none".into()),
        a.model
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "default".into()),
        a.seed
    );
    let head = header("simulate", &params, &ds);
    ensure_dir(&a.out)?;

    let mut lat = head.clone();
    lat.push_str("image_id,route,arrival_s,phone_s,cloud_s,queue_wait_s,review_s,latency_s\n");
    for ((r, p), (route, total)) in ds
        .records()
        .iter()
        .zip(&report.parts)
        .zip(report.routes.iter().zip(&report.latencies))
    {
        let route = serde_json::to_value(route).expect("route serializes");
        let _ = writeln!(
            lat,
            "{},{},{},{},{},{},{},{}",
            r.image_id,
            route.as_str().unwrap_or_default(),
            p.arrival,
            p.phone,
            opt_num(p.cloud),
            opt_num(p.queue_wait),
            opt_num(p.review),
            total
        );
    }
    write_file(&a.out.join("latencies.csv"), &lat)?;

    let s = &report.summary;
    let w = &report.workload;
    let days = w.reviews_per_day.len().max(1) as f64;
    let mut summary = head.clone();
    summary.push_str("statistic,value\n");
    for (k, v) in [
        ("mean_s", s.mean),
        ("median_s", s.median),
        ("mode_s", s.mode),
        ("p95_s", s.p95),
        ("cloud_mixture_mean_s", model.cloud_mean()),
        ("reviews_per_day_mean", w.left as f64 / days),
    ] {
        let _ = writeln!(summary, "{k},{v}");
    }
    for (k, v) in [
        ("images", report.latencies.len()),
        ("queue_entered", w.entered),
        ("queue_left", w.left),
        ("queue_final_depth", w.final_depth),
        ("queue_max_depth", w.max_depth),
    ] {
        let _ = writeln!(summary, "{k},{v}");
    }
    write_file(&a.out.join("summary.csv"), &summary)?;

    let mut queue = head;
    queue.push_str("time_s,depth\n");
    for (t, d) in &w.queue_depth {
        let _ = writeln!(queue, "{t},{d}");
    }
    write_file(&a.out.join("queue.csv"), &queue)
}
