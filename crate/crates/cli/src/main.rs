use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use corridor_core::harness::{
    acceptance_checks, calibration_context, calibration_inputs, load_run, output_root, report,
    run_experiment, run_sweep, write_run_dir, ExperimentConfig, MetricsReport, Preset, SweepAxis,
};
use corridor_core::stations::{coverage_check, place_stations};
use corridor_core::store::{calibrate_lane_change, CalibrationGrid, RowFilter, Source};
use corridor_core::world::build_corridor;
use corridor_core::Error;

#[derive(Parser)]
#[command(
    name = "corridor",
    version,
    about = "Seeded corridor digital-twin experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment (or a sweep) and write its run directory.
    Run(RunArgs),
    /// Recompute the report of an existing run directory.
    Report {
        dir: PathBuf,
        /// Exit with status 3 when a threshold check fails.
        #[arg(long)]
        check: bool,
    },
    /// Export trajectory rows from a run directory as CSV.
    Extract {
        dir: PathBuf,
        #[arg(long, default_value = "ground_truth")]
        source: String,
        #[arg(long, value_delimiter = ',')]
        ids: Vec<u64>,
        #[arg(long)]
        from: Option<f64>,
        #[arg(long)]
        to: Option<f64>,
        /// Output file, stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit lane-change parameters to the ground truth of a run directory.
    Calibrate {
        dir: PathBuf,
        /// Only fit politeness; threshold and safe braking come from the run config.
        #[arg(long)]
        known: bool,
        #[arg(long, default_value_t = 20)]
        min_events: usize,
    },
    /// Check LiDAR coverage of a scenario's station layout.
    Coverage(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Override any config key, e.g. `demand.rate=0.3`.
    #[arg(long = "set")]
    sets: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    penetration: Option<f64>,
    #[arg(long)]
    replications: Option<u32>,
    /// Sweep axis `key=v1,v2`; repeat for a cartesian product.
    #[arg(long = "sweep")]
    sweeps: Vec<String>,
    /// Run directory (or sweep root). Defaults under $CORRIDOR_OUT or `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    check: bool,
}

fn load_config(args: &ConfigArgs) -> corridor_core::Result<ExperimentConfig> {
    let mut cfg = match (&args.config, args.preset) {
        (Some(_), Some(_)) => {
            return Err(Error::config(
                "--config and --preset are mutually exclusive",
            ))
        }
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(p)) => ExperimentConfig::preset(p),
        (None, None) => ExperimentConfig::default(),
    };
    for s in &args.sets {
        cfg.set_str(s)?;
    }
    Ok(cfg)
}

enum Failure {
    Config(String),
    Check,
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(m)) => Failure::Config(m.clone()),
            _ => Failure::Other(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::from(anyhow::Error::from(e))
    }
}

fn print_checks(rep: &MetricsReport) -> bool {
    let mut ok = true;
    for (name, pass) in acceptance_checks(rep) {
        eprintln!("{} {name}", if pass { "PASS" } else { "FAIL" });
        ok &= pass;
    }
    ok
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.cfg)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = args.duration {
        cfg.duration = d;
    }
    if let Some(p) = args.penetration {
        cfg.penetration = Some(p);
    }
    if let Some(r) = args.replications {
        cfg.replications = r;
    }
    for s in &args.sweeps {
        cfg.sweep.push(s.parse::<SweepAxis>()?);
    }
    cfg.validate()?;
    if !cfg.sweep.is_empty() || cfg.replications > 1 {
        let root = args
            .out
            .unwrap_or_else(|| output_root(None).join(format!("{}_sweep", cfg.scenario.name)));
        fs::create_dir_all(&root)
            .context("creating sweep root")
            .map_err(Failure::from)?;
        let rows = run_sweep(&cfg, &root)?;
        let mut ok = true;
        for r in &rows {
            println!(
                "{} seed={} delay={:?} stops/veh={:.3} -> {}",
                r.label,
                r.seed,
                r.report.mean_delay,
                r.report.stops_per_vehicle,
                r.dir.display()
            );
            if args.check {
                ok &= acceptance_checks(&r.report).iter().all(|c| c.1);
            }
        }
        return if ok { Ok(()) } else { Err(Failure::Check) };
    }
    let dir = args.out.unwrap_or_else(|| {
        output_root(None).join(format!("{}_seed{}", cfg.scenario.name, cfg.seed))
    });
    let data = run_experiment(&cfg)?;
    let rep = report(&data)?;
    write_run_dir(&dir, &data, &rep)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&rep).map_err(Error::from)?
    );
    eprintln!("run written to {}", dir.display());
    if args.check && !print_checks(&rep) {
        return Err(Failure::Check);
    }
    Ok(())
}

fn cmd_report(dir: &Path, check: bool) -> Result<(), Failure> {
    let data = load_run(dir)?;
    let rep = report(&data)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&rep).map_err(Error::from)?
    );
    if check && !print_checks(&rep) {
        return Err(Failure::Check);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Report { dir, check } => cmd_report(&dir, check),
        Cmd::Extract {
            dir,
            source,
            ids,
            from,
            to,
            out,
        } => {
            let data = load_run(&dir)?;
            let source: Source = source.parse()?;
            let window = match (from, to) {
                (None, None) => None,
                (a, b) => Some((a.unwrap_or(f64::NEG_INFINITY), b.unwrap_or(f64::INFINITY))),
            };
            let filter = RowFilter {
                source: Some(source),
                ids: (!ids.is_empty()).then(|| ids.into_iter().collect()),
                window,
            };
            let n = match out {
                Some(p) => data.store.export_csv(
                    &filter,
                    BufWriter::new(fs::File::create(&p).map_err(Error::from)?),
                )?,
                None => data
                    .store
                    .export_csv(&filter, BufWriter::new(std::io::stdout().lock()))?,
            };
            eprintln!("{n} rows");
            Ok(())
        }
        Cmd::Calibrate {
            dir,
            known,
            min_events,
        } => {
            let data = load_run(&dir)?;
            let (map, driver, interval) = calibration_inputs(&data.config)?;
            let mut ctx = calibration_context(&map, &driver, interval);
            ctx.min_events = min_events;
            let mut grid = CalibrationGrid::default();
            if known {
                grid.lc_threshold = vec![driver.lc_threshold];
                grid.b_safe = vec![driver.b_safe];
            }
            let rep = calibrate_lane_change(&data.store, &ctx, &grid)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&rep).map_err(Error::from)?
            );
            Ok(())
        }
        Cmd::Coverage(args) => {
            let cfg = load_config(&args)?;
            let map = build_corridor(&cfg.scenario.corridor)?;
            let stations =
                place_stations(&map, cfg.scenario.station_spacing, &cfg.scenario.sensors)?;
            let cov = coverage_check(&stations, map.length);
            println!(
                "stations={} covered={} redundancy={} gaps={:?}",
                stations.len(),
                cov.covered,
                cov.redundancy,
                cov.gaps
            );
            if cov.covered {
                Ok(())
            } else {
                Err(Failure::Check)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => {
            eprintln!("threshold check failed");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
