//! Command-line front end: run scenarios, compare finished runs, export
//! domain slices and validate datasets.
//!
//! Exit codes: 0 success, 2 infeasible problem, 1 configuration or IO error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use fbmc_core::error::Error;
use fbmc_core::fbmc_params::fb_domain_slice;
use fbmc_core::grid::{build_lodf, build_ptdf, load_grid_data};
use fbmc_core::pipeline::{
    compare_scenarios, dataset_hash, emit_domain_slice, emit_reports, run_scenario,
    ScenarioConfig, ScenarioSummary,
};

#[derive(Parser)]
#[command(name = "fbmc", version, about = "Flow-based market coupling simulation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario end to end and write its report files.
    Run(RunArgs),
    /// Merge finished runs (summary.json paths) into a comparison table.
    Compare(CompareArgs),
    /// Export a 2D slice of the flow-based domain of one timestep.
    DomainSlice(DomainSliceArgs),
    /// Load a dataset directory, run all validation checks and print its shape.
    ValidateData(ValidateArgs),
}

#[derive(Args)]
struct CommonRunArgs {
    /// Scenario configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override any config key, e.g. --set market.minram=0.7 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for per-timestep and per-sample solves.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Output directory (defaults to the config's [output] dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte-Carlo seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Mode override (fbmc, fbmc_plus, fbmc_cc, ntc, nodal, uniform).
    #[arg(long)]
    mode: Option<String>,
    /// Monte-Carlo sample count override.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// summary.json files of the runs to compare.
    #[arg(required = true)]
    summaries: Vec<PathBuf>,
    /// Where to write comparison.csv; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DomainSliceArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Output directory for the slice tables.
    #[arg(long)]
    out: PathBuf,
    /// Timestep label (defaults to the first of the horizon).
    #[arg(long)]
    timestep: Option<String>,
    /// X axis as an exchange direction, e.g. Z1:Z2.
    #[arg(long, value_parser = parse_axis)]
    x: (String, String),
    /// Y axis as an exchange direction, e.g. Z1:Z3.
    #[arg(long, value_parser = parse_axis)]
    y: (String, String),
    /// Half-width of the clip window in MW.
    #[arg(long, default_value_t = 1000.0)]
    bounding_box: f64,
    /// Also render the slice as an SVG.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct ValidateArgs {
    /// Dataset directory with the five CSV files.
    #[arg(long)]
    data: PathBuf,
}

fn parse_axis(raw: &str) -> Result<(String, String), String> {
    match raw.split_once(':') {
        Some((a, b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
        _ => Err(format!("expected FROM:TO, got {raw:?}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e.root(), Error::Infeasible(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
        Command::DomainSlice(args) => domain_slice(args),
        Command::ValidateData(args) => validate_data(args),
    }
}

fn init_threads(threads: Option<usize>) -> Result<(), Error> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot set thread pool: {e}")))?;
    }
    Ok(())
}

fn load_config(common: &CommonRunArgs, extra: &[(String, String)]) -> Result<ScenarioConfig, Error> {
    let mut overrides = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    overrides.extend_from_slice(extra);
    ScenarioConfig::load(&common.config, &overrides)
}

fn run(args: RunArgs) -> Result<(), Error> {
    init_threads(args.common.threads)?;
    let mut extra = Vec::new();
    if let Some(seed) = args.seed {
        extra.push(("montecarlo.seed".to_string(), seed.to_string()));
    }
    if let Some(mode) = &args.mode {
        extra.push(("mode".to_string(), mode.clone()));
    }
    if let Some(samples) = args.samples {
        extra.push(("montecarlo.samples".to_string(), samples.to_string()));
    }
    let config = load_config(&args.common, &extra)?;
    let outdir = args
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set [output] dir".into()))?;

    let report = run_scenario(&config)?;
    let manifest = emit_reports(&report, &outdir)?;

    let summary = report.summary();
    println!("scenario {} (mode {}, config {})", summary.name, summary.mode, &summary.config_hash[..12]);
    for stage in &report.stages {
        println!("  stage {:<16} {:>8.3}s", stage.name, stage.seconds);
    }
    println!("  market total   {:>14.2}", summary.market.total);
    println!("  post-CM total  {:>14.2}", summary.total_post_cm);
    println!(
        "  CM volumes     C {:.2} MWh, R {:.2} MWh",
        summary.volumes.curtailment_mwh, summary.volumes.redispatch_mwh
    );
    if let Some(mc) = &summary.mc {
        println!(
            "  MC ({} samples, {} infeasible) mean CM cost {:.2}",
            mc.samples, mc.infeasible, mc.mean_cm_cost
        );
    }
    println!("{} files -> {}", manifest.files.len() + 1, outdir.display());
    Ok(())
}

fn compare(args: CompareArgs) -> Result<(), Error> {
    let mut summaries = Vec::new();
    for path in &args.summaries {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let summary: ScenarioSummary = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        summaries.push(summary);
    }
    let comparison = compare_scenarios(&summaries)?;
    let csv = comparison.to_csv()?;
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.display().to_string(),
                source: e,
            })?;
            let path = dir.join("comparison.csv");
            std::fs::write(&path, &csv).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            println!("comparison of {} runs -> {}", comparison.scenarios.len(), path.display());
        }
        None => {
            print!("{}", String::from_utf8_lossy(&csv));
        }
    }
    Ok(())
}

fn domain_slice(args: DomainSliceArgs) -> Result<(), Error> {
    init_threads(args.common.threads)?;
    let config = load_config(&args.common, &[])?;
    let report = run_scenario(&config)?;
    let fb = report.fb.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "mode {} has no flow-based domain; use fbmc, fbmc_plus or fbmc_cc",
            config.mode
        ))
    })?;
    let t = match &args.timestep {
        None => 0,
        Some(label) => report
            .timesteps
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Config(format!("unknown timestep {label:?}")))?,
    };
    let fixed = DVector::zeros(report.zones.len());
    let mut slice = fb_domain_slice(
        fb,
        t,
        (&args.x.0, &args.x.1),
        (&args.y.0, &args.y.1),
        &fixed,
        args.bounding_box,
    )?;
    if let Some(marker) = project_market_point(&report, t, &args.x, &args.y) {
        slice = slice.with_marker(marker);
    }
    let stem = format!("domain_{}", report.timesteps[t]);
    let entries = emit_domain_slice(&slice, &args.out, &stem, args.svg)?;
    println!(
        "domain slice at {} ({} vertices{}) -> {}",
        report.timesteps[t],
        slice.vertices.len(),
        if slice.truncated { ", clipped by bounding box" } else { "" },
        args.out.display()
    );
    for e in entries {
        println!("  {}", e.name);
    }
    Ok(())
}

/// Decompose the market net-position vector onto the two exchange axes;
/// the D-1 operating point appears as a marker when it is representable.
fn project_market_point(
    report: &fbmc_core::pipeline::ScenarioReport,
    t: usize,
    x: &(String, String),
    y: &(String, String),
) -> Option<(f64, f64)> {
    let zone = |id: &str| report.zones.iter().position(|z| z == id);
    let np = &report.market.timesteps[t].net_positions;
    let mut dx: DVector<f64> = DVector::zeros(np.len());
    dx[zone(&x.0)?] += 1.0;
    dx[zone(&x.1)?] -= 1.0;
    let mut dy: DVector<f64> = DVector::zeros(np.len());
    dy[zone(&y.0)?] += 1.0;
    dy[zone(&y.1)?] -= 1.0;
    // least-squares in the 2D span
    let a = dx.dot(&dx);
    let b = dx.dot(&dy);
    let d = dy.dot(&dy);
    let det = a * d - b * b;
    if det.abs() < 1e-12 {
        return None;
    }
    let rx = dx.dot(np);
    let ry = dy.dot(np);
    let px = (d * rx - b * ry) / det;
    let py = (a * ry - b * rx) / det;
    let residual = (np - (&dx * px + &dy * py)).norm();
    (residual < 1e-6).then_some((px, py))
}

fn validate_data(args: ValidateArgs) -> Result<(), Error> {
    let (case, fleet, series) = load_grid_data(&args.data)?;
    let ptdf = build_ptdf(&case)?;
    build_lodf(&case, &ptdf)?;
    let hash = dataset_hash(&args.data)?;
    println!("dataset {} is valid", args.data.display());
    println!("  nodes       {:>6}", case.n_nodes());
    println!("  lines       {:>6}", case.n_lines());
    println!("  zones       {:>6}  ({})", case.n_zones(), case.zones().join(", "));
    println!("  generators  {:>6}  ({} dispatchable, {} intermittent)",
        fleet.n_generators(),
        fleet.dispatchable().len(),
        fleet.intermittent().len()
    );
    println!("  timesteps   {:>6}", series.n_timesteps());
    println!("  slack node  {:>6}", case.nodes()[case.slack()].id);
    println!("  sha256      {hash}");
    Ok(())
}
