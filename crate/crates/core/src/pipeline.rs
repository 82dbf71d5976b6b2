//! End-to-end drivers behind the command-line subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{generate_initial_cloud, initial_cloud, RunConfig};
use crate::energy::{Minimizer, MinimizerReport};
use crate::error::{Error, Result};
use crate::flow::{
    conservation_report, horizon_advisory, max_h_drift, run, DiagnosticsLog, IntegratorConfig, TrajectoryStore,
};
use crate::geometry::{norm, second_moment, DualGrid, DualParticleCloud, GridDensity};
use crate::hamiltonian::{
    concavity_audit, concavity_check, conservation_audit, superdifferential_check, ConcavityProbe, ConcavityReport,
    ConservationAudit, CorruptedOracle, SuperdiffReport, TestDirection, CONCAVITY_LAMBDA,
};
use crate::io::{
    read_cloud_csv, read_json, read_run, read_sigma_csv, write_cloud_csv, write_json, write_plan_csv, write_sigma_csv,
    write_snapshot, RunManifest, StepMeta, MANIFEST,
};
use crate::ot::{assemble_cost, inverse_residual};
use crate::reconstruct::{
    all_fstar, f_continuity_modulus, pushforward_check, recover_velocity, round_trip_residual, velocity_consistency,
    weak_ode_residual, PhysicalPathSet, VelocityConsistency,
};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn minimizer_for(cfg: &RunConfig) -> Result<Minimizer> {
    Minimizer::new(
        cfg.physical_domain()?,
        cfg.constants.geopotential,
        cfg.constants()?,
        cfg.minimizer_options(),
    )
}

/// Admissible-horizon estimate for the initial cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Advisory {
    /// Observed growth constant `max |w| / (1 + |y|)`.
    pub c0: f64,
    pub r0: f64,
    pub m2: f64,
    pub tau: f64,
    pub dt: f64,
    pub shorter_than_dt: bool,
}

/// A finished in-memory run.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub cloud0: DualParticleCloud,
    pub integrator: IntegratorConfig,
    pub store: TrajectoryStore,
    pub wall_seconds: Vec<f64>,
    pub advisory: Option<Advisory>,
}

pub fn simulate(cfg: &RunConfig, seed: Option<u64>) -> Result<Simulation> {
    let cloud0 = initial_cloud(cfg, seed)?;
    let integrator = cfg.integrator_config(&cloud0)?;
    let mut m = minimizer_for(cfg)?;
    let mut advisory = None;
    let mut walls = Vec::new();
    let mut clock = Instant::now();
    let store = run(&cloud0, &integrator, &mut m, |s| {
        walls.push(clock.elapsed().as_secs_f64());
        clock = Instant::now();
        if advisory.is_none() {
            let c0 = s
                .cloud
                .positions()
                .iter()
                .zip(&s.velocity)
                .map(|(y, w)| norm(*w) / (1.0 + norm(*y)))
                .fold(0.0, f64::max);
            let r0 = integrator.clamp.radius;
            let m2 = second_moment(&s.cloud);
            advisory = if c0 > 0.0 {
                let tau = horizon_advisory(c0, r0, m2, integrator.dt)?;
                Some(Advisory {
                    c0,
                    r0,
                    m2,
                    tau,
                    dt: integrator.dt,
                    shorter_than_dt: tau < integrator.dt,
                })
            } else {
                None
            };
        }
        info!(
            "t = {:.6}, H = {:.12e}, outer iterations {}",
            s.t, s.minimizer.energy.total, s.minimizer.iterations
        );
        Ok(())
    })?;
    Ok(Simulation {
        cloud0,
        integrator,
        store,
        wall_seconds: walls,
        advisory,
    })
}

/// Conservation series plus the optional per-step checks the config asks for.
pub fn diagnostics(cfg: &RunConfig, sim: &Simulation) -> Result<DiagnosticsLog> {
    let grid = DualGrid::covering(&sim.integrator.clamp, cfg.diagnostics.dual_grid_for(sim.cloud0.len()))?;
    let mut log = conservation_report(&sim.store, &grid, &cfg.diagnostics.lr)?;
    let d = sim.store.domain();
    for (k, rec) in log.iter_mut().enumerate() {
        let s = sim.store.get(k)?;
        if cfg.diagnostics.inverse_residual {
            rec.inverse_residual = Some(inverse_residual(d, &s.cloud()?, &s.t_map, &s.s_map, &s.masses(d))?);
        }
        if cfg.diagnostics.pushforward {
            rec.pushforward = Some(pushforward_check(&sim.store, k)?);
        }
        if cfg.diagnostics.timing {
            rec.wall_seconds = sim.wall_seconds.get(k).copied();
        }
    }
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out: PathBuf,
    pub manifest: RunManifest,
    pub simulation: Simulation,
    pub log: DiagnosticsLog,
}

/// `run`: simulate, then write every snapshot, the diagnostics and the manifest.
pub fn execute_run(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<RunOutcome> {
    let sim = simulate(cfg, seed)?;
    let log = diagnostics(cfg, &sim)?;
    create_dir(out)?;
    let d = sim.store.domain();
    let mut files = Vec::new();
    for (k, (s, rec)) in sim.store.snapshots().iter().zip(&log).enumerate() {
        let meta = StepMeta {
            step: k,
            t: s.t,
            energy: s.energy,
            el_residual: s.el_residual,
            iterations: s.iterations,
            delta: sim.integrator.clamp.delta,
            dual_domain: Some(sim.integrator.clamp),
            grid_lo: d.lo(),
            grid_hi: d.hi(),
            diagnostics: Some(rec.clone()),
        };
        write_snapshot(out, k, s, d, &meta)?;
        files.push(format!("step_{k:06}/"));
    }
    write_json(&out.join("diagnostics.json"), &log)?;
    files.push("diagnostics.json".into());
    if let Some(a) = &sim.advisory {
        write_json(&out.join("advisory.json"), a)?;
        files.push("advisory.json".into());
    }
    let seed = seed.unwrap_or(cfg.cloud.seed);
    let mut echoed = cfg.clone();
    echoed.cloud.seed = seed;
    let manifest = RunManifest::new(&echoed, seed, sim.store.len(), files);
    write_json(&out.join(MANIFEST), &manifest)?;
    info!(
        "wrote {} snapshots to {}, max H drift {:e}",
        sim.store.len(),
        out.display(),
        max_h_drift(&log)
    );
    Ok(RunOutcome {
        out: out.to_path_buf(),
        manifest,
        simulation: sim,
        log,
    })
}

fn cloud_for(cfg: &RunConfig, cloud: Option<&Path>, seed: Option<u64>) -> Result<DualParticleCloud> {
    match cloud {
        Some(p) => read_cloud_csv(p),
        None => initial_cloud(cfg, seed),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyMinSummary {
    pub config_hash: String,
    pub energy: crate::energy::EnergyBreakdown,
    pub el_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub backtracks: usize,
    pub energy_history: Vec<f64>,
    pub inverse_residual: f64,
}

/// `energy-min`: report JSON plus `sigma.csv`, `plan.csv` and the maps.
pub fn energy_min(cfg: &RunConfig, cloud: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<MinimizerReport> {
    let c = cloud_for(cfg, cloud, seed)?;
    let mut m = minimizer_for(cfg)?;
    let r = m.minimize(&c, None)?;
    if !r.converged {
        return Err(Error::Convergence {
            iterations: r.iterations,
            residual: r.el_residual,
        });
    }
    create_dir(out)?;
    let d = m.domain();
    write_sigma_csv(&out.join("sigma.csv"), d, r.sigma.values())?;
    write_plan_csv(&out.join("plan.csv"), &r.solution.plan)?;
    crate::io::write_maps_csv(&out.join("maps.csv"), &r.t_map, &r.s_map)?;
    let summary = EnergyMinSummary {
        config_hash: cfg.hash(),
        energy: r.energy,
        el_residual: r.el_residual,
        iterations: r.iterations,
        converged: r.converged,
        backtracks: r.backtracks,
        energy_history: r.energy_history.clone(),
        inverse_residual: inverse_residual(d, &c, &r.t_map, &r.s_map, &r.sigma.masses())?,
    };
    write_json(&out.join("minimizer.json"), &summary)?;
    info!(
        "H = {:.12e} after {} outer iterations, written to {}",
        r.energy.total,
        r.iterations,
        out.display()
    );
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OtSummary {
    pub config_hash: String,
    pub total_cost: f64,
    pub dual_value: f64,
    pub marginal_error: f64,
    pub nnz: usize,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

/// `ot-solve`: one transport solve; uniform density unless `sigma` is given.
pub fn ot_solve(
    cfg: &RunConfig,
    cloud: Option<&Path>,
    sigma: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<OtSummary> {
    let c = cloud_for(cfg, cloud, seed)?;
    let d = cfg.physical_domain()?;
    let density = match sigma {
        Some(p) => GridDensity::new(d.clone(), read_sigma_csv(p, &d)?)?,
        None => GridDensity::uniform(d.clone()),
    };
    let masses = density.masses();
    let cost = assemble_cost(&d, &c, &cfg.constants.geopotential)?;
    let opts = cfg.minimizer_options();
    let sol = match opts.solver {
        crate::energy::SolverChoice::Exact => crate::ot::solve_exact(&masses, c.weights(), &cost, &opts.exact)?,
        crate::energy::SolverChoice::Entropic { epsilon } => {
            crate::ot::solve_entropic(&masses, c.weights(), &cost, epsilon, &opts.entropic)?
        }
        crate::energy::SolverChoice::Auto { epsilon } => {
            match crate::ot::solve_exact(&masses, c.weights(), &cost, &opts.exact) {
                Err(Error::Capacity { .. }) => {
                    crate::ot::solve_entropic(&masses, c.weights(), &cost, epsilon, &opts.entropic)?
                }
                other => other?,
            }
        }
    };
    create_dir(out)?;
    write_plan_csv(&out.join("plan.csv"), &sol.plan)?;
    let summary = OtSummary {
        config_hash: cfg.hash(),
        total_cost: sol.total_cost,
        dual_value: sol.potentials.dual_value(&masses, c.weights()),
        marginal_error: sol.plan.marginal_error(&masses, c.weights()),
        nnz: sol.plan.nnz(),
        f: sol.potentials.f.clone(),
        g: sol.potentials.g.clone(),
    };
    write_json(&out.join("ot.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructChecks {
    pub config_hash: String,
    pub snapshots: usize,
    pub weak_ode_residual: Option<f64>,
    pub pushforward_initial: f64,
    pub pushforward_final: f64,
    pub round_trip_final: f64,
    pub boundary_excess: f64,
    pub theta_path_drift: f64,
    pub f_continuity_l2: Vec<f64>,
    pub velocity_consistency: Vec<VelocityConsistency>,
}

#[derive(Serialize)]
struct PathRow {
    t: f64,
    cell: usize,
    f1: f64,
    f2: f64,
    f3: f64,
    z1: f64,
    z2: f64,
    z3: f64,
    u1: f64,
    u2: f64,
    u3: f64,
}

/// Physical-space checks on a trajectory.
pub fn reconstruction_checks(store: &TrajectoryStore, hash: &str) -> Result<(PhysicalPathSet, ReconstructChecks)> {
    let paths = PhysicalPathSet::build(store)?;
    let last = store.len() - 1;
    let z0 = &paths.z[0];
    let theta = paths
        .z
        .iter()
        .flat_map(|z| z.images().iter().zip(z0.images()).map(|(a, b)| (a[2] - b[2]).abs()))
        .fold(0.0, f64::max);
    let (weak, vc) = if store.len() >= 2 {
        let fs = all_fstar(store)?;
        let u = recover_velocity(store, &paths.f, &fs)?;
        (
            Some(weak_ode_residual(store, &paths.z, &paths.f)?),
            velocity_consistency(store, &u)?,
        )
    } else {
        (None, Vec::new())
    };
    let checks = ReconstructChecks {
        config_hash: hash.into(),
        snapshots: store.len(),
        weak_ode_residual: weak,
        pushforward_initial: pushforward_check(store, 0)?,
        pushforward_final: pushforward_check(store, last)?,
        round_trip_final: round_trip_residual(store, last)?,
        boundary_excess: paths.boundary_excess(store),
        theta_path_drift: theta,
        f_continuity_l2: f_continuity_modulus(store, &paths.f, 2.0)?,
        velocity_consistency: vc,
    };
    Ok((paths, checks))
}

/// `reconstruct`: reads a run directory, writes `physical_paths.csv` and
/// `checks.json` into `out` (the run directory by default).
pub fn reconstruct_run(run_dir: &Path, out: Option<&Path>) -> Result<ReconstructChecks> {
    let stored = read_run(run_dir)?;
    let (paths, checks) = reconstruction_checks(&stored.store, &stored.manifest.config_hash)?;
    let out = out.unwrap_or(run_dir);
    create_dir(out)?;
    let p = out.join("physical_paths.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
    for (k, t) in paths.times.iter().enumerate() {
        for i in 0..paths.f[k].len() {
            let (f, z) = (paths.f[k][i], paths.z[k][i]);
            let u = paths.u.get(k).map_or([0.0; 3], |u| u[i]);
            w.serialize(PathRow {
                t: *t,
                cell: i,
                f1: f[0],
                f2: f[1],
                f3: f[2],
                z1: z[0],
                z2: z[1],
                z3: z[2],
                u1: u[0],
                u2: u[1],
                u3: u[2],
            })
            .map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    write_json(&out.join("checks.json"), &checks)?;
    Ok(checks)
}

pub const SUPERDIFF_STEPS: [f64; 2] = [1e-3, 1e-4];

/// Relative error allowed at the smallest step.
pub const SUPERDIFF_TOL: f64 = 1e-2;
pub const IDENTITY_TOL: f64 = 1e-12;

pub fn verify_superdiff(cfg: &RunConfig, seed: Option<u64>) -> Result<SuperdiffReport> {
    let c = initial_cloud(cfg, seed)?;
    let dir = TestDirection::for_cloud(&c)?;
    let r = superdifferential_check(&c, &dir, &SUPERDIFF_STEPS, &minimizer_for(cfg)?)?;
    Ok(r)
}

pub fn superdiff_passes(r: &SuperdiffReport) -> bool {
    r.smallest_step_rel_error().is_some_and(|e| e <= SUPERDIFF_TOL) && r.identity_residual <= IDENTITY_TOL
}

/// Random probe pairs drawn from the configured generator with derived seeds.
pub fn concavity_probes(
    cfg: &RunConfig,
    seed: u64,
    count: usize,
    particles: usize,
    points: usize,
) -> Result<Vec<ConcavityProbe>> {
    let mut spec = cfg.cloud.clone();
    spec.n = particles;
    (0..count as u64)
        .map(|k| {
            let a = generate_initial_cloud(&spec, seed.wrapping_add(1000 + 2 * k))?;
            let b = generate_initial_cloud(&spec, seed.wrapping_add(1001 + 2 * k))?;
            ConcavityProbe::uniform_grid(a, b, points)
        })
        .collect()
}

/// With `corrupt`, the corrupted oracle of that strength replaces the solver.
pub fn verify_concavity(
    cfg: &RunConfig,
    seed: Option<u64>,
    count: usize,
    corrupt: Option<f64>,
) -> Result<Vec<ConcavityReport>> {
    let probes = concavity_probes(cfg, seed.unwrap_or(cfg.cloud.seed), count, cfg.cloud.n.min(16), 9)?;
    let m = minimizer_for(cfg)?;
    match corrupt {
        None => concavity_audit(&probes, &m, CONCAVITY_LAMBDA),
        Some(strength) => {
            let mut bad = CorruptedOracle {
                inner: m.exact_variant(),
                strength,
            };
            probes
                .iter()
                .map(|p| concavity_check(p, &mut bad, CONCAVITY_LAMBDA))
                .collect()
        }
    }
}

pub fn verify_conservation(cfg: &RunConfig, run_dir: Option<&Path>, seed: Option<u64>) -> Result<ConservationAudit> {
    let store = match run_dir {
        Some(d) => read_run(d)?.store,
        None => simulate(cfg, seed)?.store,
    };
    Ok(conservation_audit(&store))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub rows: usize,
    pub max_h_drift: f64,
    pub max_theta_drift: f64,
    pub max_weight_sum_drift: f64,
    pub max_el_residual: f64,
}

/// `report`: `report.csv` (one row per snapshot) and `summary.txt`.
pub fn report(run_dir: &Path, out: Option<&Path>) -> Result<ReportSummary> {
    let log: DiagnosticsLog = read_json(&run_dir.join("diagnostics.json"))?;
    let out = out.unwrap_or(run_dir);
    create_dir(out)?;
    let p = out.join("report.csv");
    let mut w = csv::Writer::from_path(&p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
    let mut header: Vec<String> = [
        "t",
        "h",
        "transport_term",
        "internal_term",
        "h_drift",
        "theta_drift",
        "weight_sum_drift",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if let Some(first) = log.first() {
        for l in &first.lr {
            header.push(format!("l{}_norm", l.r));
            header.push(format!("l{}_drift", l.r));
        }
    }
    header.extend(
        [
            "hist_min",
            "hist_max",
            "el_residual",
            "inverse_residual",
            "pushforward",
            "wall_seconds",
        ]
        .map(String::from),
    );
    let wr = |e: csv::Error| Error::Input(format!("{}: {e}", p.display()));
    w.write_record(&header).map_err(wr)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for r in &log {
        let mut row = vec![
            r.t.to_string(),
            r.h.to_string(),
            r.transport_term.to_string(),
            r.internal_term.to_string(),
            r.h_drift.to_string(),
            r.theta_drift.to_string(),
            r.weight_sum_drift.to_string(),
        ];
        for l in &r.lr {
            row.push(l.norm.to_string());
            row.push(l.drift.to_string());
        }
        row.extend([
            r.hist_min.to_string(),
            r.hist_max.to_string(),
            r.el_residual.to_string(),
            opt(r.inverse_residual),
            opt(r.pushforward),
            opt(r.wall_seconds),
        ]);
        w.write_record(&row).map_err(wr)?;
    }
    w.flush().map_err(|e| Error::io(&p, e))?;
    let fold = |f: &dyn Fn(&crate::flow::DiagnosticsRecord) -> f64| log.iter().map(f).fold(0.0, f64::max);
    let summary = ReportSummary {
        rows: log.len(),
        max_h_drift: max_h_drift(&log),
        max_theta_drift: fold(&|r| r.theta_drift),
        max_weight_sum_drift: fold(&|r| r.weight_sum_drift),
        max_el_residual: fold(&|r| r.el_residual),
    };
    let mut text = String::new();
    text.push_str(&format!("snapshots            {}\n", summary.rows));
    if let (Some(a), Some(b)) = (log.first(), log.last()) {
        text.push_str(&format!("time span            {} .. {}\n", a.t, b.t));
        text.push_str(&format!("H(0)                 {:.15e}\n", a.h));
    }
    text.push_str(&format!("max relative H drift {:.6e}\n", summary.max_h_drift));
    text.push_str(&format!("max theta drift      {:e}\n", summary.max_theta_drift));
    text.push_str(&format!("weight sum drift     {:e}\n", summary.max_weight_sum_drift));
    text.push_str(&format!("max EL residual      {:.6e}\n", summary.max_el_residual));
    if let Some(last) = log.last() {
        for l in &last.lr {
            text.push_str(&format!("final L{} drift       {:.6e}\n", l.r, l.drift));
        }
    }
    let sp = out.join("summary.txt");
    fs::write(&sp, text).map_err(|e| Error::io(&sp, e))?;
    Ok(summary)
}

/// Writes a generated cloud, for feeding `energy-min` and `ot-solve`.
pub fn write_initial_cloud(cfg: &RunConfig, seed: Option<u64>, path: &Path) -> Result<()> {
    write_cloud_csv(path, &initial_cloud(cfg, seed)?, None)
}
