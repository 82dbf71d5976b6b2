use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geodual::config::{parse_config, RunConfig};
use geodual::io::write_json;
use geodual::pipeline;
use geodual::{Error, ErrorClass};
use log::{error, info};

#[derive(Parser)]
#[command(
    name = "geodual",
    version,
    about = "Semi-geostrophic flow in dual coordinates via optimal transport"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `output.dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the data-parallel sections. Results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides `cloud.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the dual flow and write snapshots, diagnostics and a manifest.
    Run(Common),
    /// Minimise the energy for a single cloud.
    EnergyMin {
        #[command(flatten)]
        common: Common,
        /// Cloud CSV; the configured generator is used otherwise.
        #[arg(long)]
        cloud: Option<PathBuf>,
    },
    /// One transport solve between a density and a cloud.
    OtSolve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cloud: Option<PathBuf>,
        /// Density CSV (`cell,x1,x2,x3,sigma`); uniform otherwise.
        #[arg(long)]
        sigma: Option<PathBuf>,
    },
    /// Physical trajectories and checks for a finished run.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Directory written by `run`; defaults to the configured output directory.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Hamiltonian structure checks.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        superdiff: bool,
        #[arg(long)]
        concavity: bool,
        #[arg(long)]
        conservation: bool,
        #[arg(long, default_value_t = 20)]
        probes: usize,
        /// Reads the trajectory for `--conservation` instead of integrating.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Replace the solver with one whose energy carries an extra convex term.
        #[arg(long, hide = true)]
        corrupt_oracle: Option<f64>,
    },
    /// Plot-ready CSV and a text summary of a run's diagnostics.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::Capacity => 4,
        ErrorClass::Other => 1,
    }
}

fn init_logging() {
    let level = std::env::var("SG_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn load(common: &Common) -> geodual::Result<RunConfig> {
    if let Some(n) = common.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Internal(e.to_string()))?;
    }
    let mut cfg = parse_config(&common.config)?;
    if let Some(dt) = common.dt {
        cfg.integrator.dt = dt;
    }
    if let Some(t) = common.t_end {
        cfg.integrator.t_end = t;
    }
    cfg.validate()?;
    if let Some(s) = common.seed {
        cfg.cloud.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output.dir.clone())
}

fn print_json<T: serde::Serialize>(v: &T) {
    match serde_json::to_string_pretty(v) {
        Ok(s) => println!("{s}"),
        Err(e) => error!("could not render summary: {e}"),
    }
}

fn check(ok: bool, what: &str) -> geodual::Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Check(format!("{what} check failed")))
    }
}

fn dispatch(cmd: Command) -> geodual::Result<()> {
    match cmd {
        Command::Run(common) => {
            let cfg = load(&common)?;
            let out = out_dir(&common, &cfg);
            let r = pipeline::execute_run(&cfg, &out, None)?;
            println!("{}", out.join(geodual::io::MANIFEST).display());
            info!("config hash {}", r.manifest.config_hash);
        }
        Command::EnergyMin { common, cloud } => {
            let cfg = load(&common)?;
            let r = pipeline::energy_min(&cfg, cloud.as_deref(), None, &out_dir(&common, &cfg))?;
            println!(
                "H = {:.15e}  EL residual {:e}  iterations {}",
                r.energy.total, r.el_residual, r.iterations
            );
        }
        Command::OtSolve { common, cloud, sigma } => {
            let cfg = load(&common)?;
            let r = pipeline::ot_solve(&cfg, cloud.as_deref(), sigma.as_deref(), None, &out_dir(&common, &cfg))?;
            println!(
                "cost = {:.15e}  dual = {:.15e}  marginal error {:e}",
                r.total_cost, r.dual_value, r.marginal_error
            );
        }
        Command::Reconstruct { common, run_dir } => {
            let cfg = load(&common)?;
            let dir = run_dir.unwrap_or_else(|| out_dir(&common, &cfg));
            let out = common.out.as_deref().unwrap_or(&dir);
            print_json(&pipeline::reconstruct_run(&dir, Some(out))?);
        }
        Command::Verify {
            common,
            superdiff,
            concavity,
            conservation,
            probes,
            run_dir,
            corrupt_oracle,
        } => {
            let cfg = load(&common)?;
            let all = !(superdiff || concavity || conservation);
            let out = out_dir(&common, &cfg);
            verify(
                &cfg,
                &out,
                superdiff || all,
                concavity || all,
                conservation,
                probes,
                run_dir.as_deref(),
                corrupt_oracle,
            )?;
        }
        Command::Report { common, run_dir } => {
            let cfg = load(&common)?;
            let dir = run_dir.unwrap_or_else(|| out_dir(&common, &cfg));
            let out = common.out.as_deref().unwrap_or(&dir);
            print_json(&pipeline::report(&dir, Some(out))?);
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn verify(
    cfg: &RunConfig,
    out: &Path,
    superdiff: bool,
    concavity: bool,
    conservation: bool,
    probes: usize,
    run_dir: Option<&Path>,
    corrupt: Option<f64>,
) -> geodual::Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.display().to_string(),
        source: e,
    })?;
    let mut failed = Vec::new();
    if superdiff {
        let r = pipeline::verify_superdiff(cfg, None)?;
        write_json(&out.join("superdiff.json"), &r)?;
        let ok = pipeline::superdiff_passes(&r);
        println!(
            "superdiff     {}  rel error {:?}  identity residual {:e}",
            if ok { "pass" } else { "FAIL" },
            r.smallest_step_rel_error(),
            r.identity_residual
        );
        if !ok {
            failed.push("superdifferential");
        }
    }
    if concavity {
        let reports = pipeline::verify_concavity(cfg, None, probes, corrupt)?;
        write_json(&out.join("concavity.json"), &reports)?;
        let bad = reports.iter().filter(|r| !r.holds).count();
        let need = reports.iter().filter_map(|r| r.lambda_required).reduce(f64::max);
        println!(
            "concavity     {}  {}/{} probes hold at lambda = {}  (largest lambda needed {:?})",
            if bad == 0 { "pass" } else { "FAIL" },
            reports.len() - bad,
            reports.len(),
            geodual::hamiltonian::CONCAVITY_LAMBDA,
            need
        );
        if bad > 0 {
            failed.push("concavity");
        }
    }
    if conservation {
        let a = pipeline::verify_conservation(cfg, run_dir, None)?;
        write_json(&out.join("conservation.json"), &a)?;
        println!(
            "conservation  max relative H drift {:e} over {} snapshots",
            a.max_drift, a.snapshots
        );
    }
    check(failed.is_empty(), &failed.join(", "))
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
