// Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.
//
// Runs as a plain binary (harness = false). The exit status is nonzero when a
// criterion fails that is not listed in KNOWN_FAILURES; the known entries are
// still printed as FAIL, with the reason.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use geodual::config::RunConfig;
use geodual::energy::{Minimizer, MinimizerOptions, SolverChoice};
use geodual::geometry::{DualGrid, GridDensity, PhysicalDomain};
use geodual::hamiltonian::conservation_audit;
use geodual::ot::exact::{solve_exact, ExactOptions};
use geodual::ot::{inverse_residual, solve_entropic, CostMatrix, EntropicOptions};
use geodual::pipeline::{self, Simulation};
use geodual::reconstruct::{pushforward_check, weak_ode_residual, PhysicalPathSet};
use geodual::{config, flow};
use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C1_REL: f64 = 1e-12;
const C1_SECONDS: f64 = 5.0;
const C2_COST_REL: f64 = 1e-2;
const C2_MARGINAL: f64 = 1e-8;
const C2_SECONDS: f64 = 30.0;
const C3_RESIDUAL_PER_KAPPA_K1: f64 = 1e-6;
const C3_L1: f64 = 1e-5;
const C3_SECONDS: f64 = 120.0;
const C4_DRIFT: f64 = 5e-3;
const C4_RATIO: f64 = 3.0;
const C4_SECONDS: f64 = 600.0;
const C6_L2_DRIFT: f64 = 0.05;
const C7_SPACINGS: f64 = 2.0;
const C8_SPACINGS: f64 = 3.0;
const C10_REL: f64 = 1e-2;
const C10_IDENTITY: f64 = 1e-12;
const C10_SECONDS: f64 = 120.0;
const C11_PROBES: usize = 20;

/// Criteria expected to fail, with the reason. Kept in sync with README.md.
const KNOWN_FAILURES: &[(u32, &str)] = &[
    (
        7,
        "with the particle count fixed at 64, S(T(x)) is the barycentre of the whole transport cell of x's particle, \
         whose size is set by the particles (about 64^(-1/3) = 0.25) and not by the grid, so the residual sits near \
         0.13 at every resolution and grid refinement cannot drive it under 2 spacings",
    ),
    (
        11,
        "with lambda = -2 the inequality demands H(nu_t) exceed the chord by t(1-t)W2^2, i.e. strong concavity; \
     the transport term is convex in the horizontal particle positions for a fixed plan (Hessian 1/y3), so \
     it fails along every sampled interpolation; lambda_required reports the constant the data supports",
    ),
];

struct Line {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn criterion4_config(dt: f64) -> RunConfig {
    RunConfig::from_toml_str(&format!(
        r#"
[domain]
resolution = [12, 12, 12]

[cloud]
generator = "uniform-box"
n = 64
seed = 7
spread = [0.3, 0.3]
y3_range = [0.8, 1.3]

[constants]
kappa = 1.4
geopotential = {{ kind = "linear", g = 1.0 }}

[integrator]
dt = {dt}
scheme = "heun"
t_end = 1.0

[solver]
kind = "entropic"
epsilon = 1e-3
"#
    ))
    .expect("criterion 4 config")
}

fn medium_config(kind: &str, particles: usize) -> RunConfig {
    RunConfig::from_toml_str(&format!(
        r#"
[domain]
resolution = [12, 12, 12]

[cloud]
generator = "uniform-box"
n = {particles}
seed = 21
spread = [0.3, 0.3]
y3_range = [0.8, 1.3]

[solver]
kind = "{kind}"
"#
    ))
    .expect("medium config")
}

fn demo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml")
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn c1_exact_vs_permutations() -> Line {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let n = 1 + k % 5;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let c = CostMatrix::from_rows(&rows).unwrap();
        let sol = solve_exact(&uniform(n), &uniform(n), &c, &ExactOptions::default()).unwrap();
        let brute = (0..n)
            .permutations(n)
            .map(|p| p.iter().enumerate().map(|(i, &j)| rows[i][j]).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((sol.total_cost - brute).abs() / brute.abs().max(f64::MIN_POSITIVE));
    }
    let s = t0.elapsed().as_secs_f64();
    Line {
        id: 1,
        name: "exact LP vs permutation enumeration",
        pass: worst <= C1_REL && s < C1_SECONDS,
        detail: format!("max rel gap {worst:.2e} <= {C1_REL:e}; {s:.2} s < {C1_SECONDS} s"),
        seconds: s,
    }
}

fn c2_entropic_consistency() -> Line {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut gap, mut viol) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = 12;
        let xs: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let ys: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
            .collect();
        let rows: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| {
                ys.iter()
                    .map(|y| (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2))
                    .collect()
            })
            .collect();
        let c = CostMatrix::from_rows(&rows).unwrap();
        let normalize = |v: Vec<f64>| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let a = normalize((0..n).map(|_| rng.random_range(0.5..1.5)).collect());
        let b = normalize((0..n).map(|_| rng.random_range(0.5..1.5)).collect());
        let ex = solve_exact(&a, &b, &c, &ExactOptions::default()).unwrap();
        let en = solve_entropic(&a, &b, &c, 1e-3 * c.median(), &EntropicOptions::default()).unwrap();
        gap = gap.max((en.total_cost - ex.total_cost).abs() / ex.total_cost.abs());
        viol = viol.max(en.plan.marginal_violation_l1(&a, &b));
    }
    let s = t0.elapsed().as_secs_f64();
    Line {
        id: 2,
        name: "entropic vs exact on 12x12",
        pass: gap <= C2_COST_REL && viol <= C2_MARGINAL && s < C2_SECONDS,
        detail: format!(
            "max cost gap {gap:.2e} <= {C2_COST_REL:e}; marginal violation {viol:.2e} <= {C2_MARGINAL:e}; {s:.2} s"
        ),
        seconds: s,
    }
}

fn c3_minimizer_optimality() -> Line {
    let t0 = Instant::now();
    let cfg = medium_config("exact", 32);
    let cloud = config::initial_cloud(&cfg, None).unwrap();
    let mut m = pipeline::minimizer_for(&cfg).unwrap();
    let k = m.constants().kappa * m.constants().k1;
    let a = m.minimize(&cloud, None).unwrap();
    let d = m.domain().clone();
    // A lumpy positive start with the same mass as the uniform one.
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let raw: Vec<f64> = (0..d.num_cells()).map(|_| rng.random_range(0.2..2.0)).collect();
    let mass: f64 = raw.iter().zip(d.volumes()).map(|(s, v)| s * v).sum();
    let total = GridDensity::uniform(d.clone()).total_mass();
    let init = GridDensity::new(d.clone(), raw.iter().map(|s| s * total / mass).collect()).unwrap();
    let b = m.minimize(&cloud, Some(&init)).unwrap();
    let l1: f64 = a
        .sigma
        .values()
        .iter()
        .zip(b.sigma.values())
        .zip(d.volumes())
        .map(|((x, y), v)| (x - y).abs() * v)
        .sum();
    let res = a.el_residual.max(b.el_residual);
    let s = t0.elapsed().as_secs_f64();
    Line {
        id: 3,
        name: "energy minimizer optimality",
        pass: res <= C3_RESIDUAL_PER_KAPPA_K1 * k && l1 <= C3_L1 && s < C3_SECONDS,
        detail: format!(
            "EL residual {res:.2e} <= {:.2e}; L1 between starts {l1:.2e} <= {C3_L1:e}; {s:.1} s",
            C3_RESIDUAL_PER_KAPPA_K1 * k
        ),
        seconds: s,
    }
}

struct Criterion4 {
    runs: Vec<(f64, Simulation, f64)>,
}

impl Criterion4 {
    fn sim(&self, dt: f64) -> &Simulation {
        &self.runs.iter().find(|r| r.0 == dt).unwrap().1
    }

    fn seconds(&self, dt: f64) -> f64 {
        self.runs.iter().find(|r| r.0 == dt).unwrap().2
    }
}

fn criterion4_runs() -> Criterion4 {
    let runs = [0.01, 0.005, 0.02]
        .into_iter()
        .map(|dt| {
            let t0 = Instant::now();
            let sim = pipeline::simulate(&criterion4_config(dt), None).expect("criterion 4 run");
            (dt, sim, t0.elapsed().as_secs_f64())
        })
        .collect();
    Criterion4 { runs }
}

fn c4_energy(r: &Criterion4) -> Line {
    let d1 = conservation_audit(&r.sim(0.01).store).max_drift;
    let d2 = conservation_audit(&r.sim(0.005).store).max_drift;
    let ratio = d1 / d2;
    let s = r.seconds(0.01) + r.seconds(0.005);
    Line {
        id: 4,
        name: "energy conservation under dt halving",
        pass: d1 <= C4_DRIFT && ratio >= C4_RATIO && s < C4_SECONDS,
        detail: format!(
            "drift(dt=0.01) {d1:.3e} <= {C4_DRIFT:e}; drift(dt=0.005) {d2:.3e}; ratio {ratio:.2} >= {C4_RATIO}; {s:.0} s < {C4_SECONDS} s"
        ),
        seconds: s,
    }
}

fn c5_theta(sims: &[&Simulation]) -> Line {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut snaps = 0;
    for sim in sims {
        let first = sim.store.initial();
        for s in sim.store.snapshots() {
            snaps += 1;
            for (p, q) in s.positions.iter().zip(&first.positions) {
                worst = worst.max((p[2] - q[2]).abs());
            }
        }
    }
    Line {
        id: 5,
        name: "theta conservation",
        pass: worst == 0.0,
        detail: format!(
            "max |y3(t) - y3(0)| = {worst:e} over {} runs, {snaps} snapshots",
            sims.len()
        ),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn c6_lr(r: &Criterion4) -> Line {
    let t0 = Instant::now();
    let cfg = criterion4_config(0.01);
    let sim = r.sim(0.01);
    let log = pipeline::diagnostics(&cfg, sim).unwrap();
    let l2 = log.iter().map(|x| x.lr[0].drift).fold(0.0, f64::max);
    let wsum = log.iter().map(|x| x.weight_sum_drift).fold(0.0, f64::max);
    let res = cfg.diagnostics.dual_grid_for(sim.cloud0.len());
    // Same run binned finer, for the record.
    let fine = DualGrid::covering(&sim.integrator.clamp, [16; 3]).unwrap();
    let fine_l2 = flow::conservation_report(&sim.store, &fine, &[2.0])
        .unwrap()
        .iter()
        .map(|x| x.lr[0].drift)
        .fold(0.0, f64::max);
    Line {
        id: 6,
        name: "histogram L2 stability",
        pass: l2 <= C6_L2_DRIFT && wsum == 0.0,
        detail: format!(
            "L2 drift {l2:.3e} <= {C6_L2_DRIFT} on {res:?} bins; weight-sum drift {wsum:e}; (16^3 bins: {fine_l2:.3e})"
        ),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn c7_inverse_maps() -> Line {
    let t0 = Instant::now();
    let cfg = criterion4_config(0.01);
    let cloud = config::initial_cloud(&cfg, None).unwrap();
    let mut vals = Vec::new();
    let mut h = 0.0;
    for n in [8usize, 12, 16] {
        let d = Arc::new(PhysicalDomain::unit_cube(n).unwrap());
        h = d.spacing();
        let opts = MinimizerOptions {
            solver: SolverChoice::Exact,
            ..Default::default()
        };
        let mut m = Minimizer::new(d.clone(), cfg.constants.geopotential, cfg.constants().unwrap(), opts).unwrap();
        let r = m.minimize(&cloud, None).unwrap();
        vals.push(inverse_residual(&d, &cloud, &r.t_map, &r.s_map, &r.sigma.masses()).unwrap());
    }
    let monotone = vals.windows(2).all(|w| w[1] < w[0]);
    let last = *vals.last().unwrap();
    Line {
        id: 7,
        name: "S and T inverse under refinement",
        pass: monotone && last <= C7_SPACINGS * h,
        detail: format!(
            "residual on 8^3,12^3,16^3 = {:.4}, {:.4}, {:.4} (decreasing: {monotone}); final {last:.4} <= {:.4}",
            vals[0],
            vals[1],
            vals[2],
            C7_SPACINGS * h
        ),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn c8_pushforward(r: &Criterion4) -> Line {
    let t0 = Instant::now();
    let store = &r.sim(0.01).store;
    let times = store.times();
    let k = times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()))
        .unwrap()
        .0;
    let w = pushforward_check(store, k).unwrap();
    let h = store.domain().spacing();
    Line {
        id: 8,
        name: "physical push-forward at t = 0.5",
        pass: w <= C8_SPACINGS * h,
        detail: format!(
            "W2(F#sigma0, sigma) at t = {:.2}: {w:.4} <= {:.4}",
            times[k],
            C8_SPACINGS * h
        ),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn c9_weak_ode(r: &Criterion4) -> Line {
    let t0 = Instant::now();
    let vals: Vec<f64> = [0.02, 0.01, 0.005]
        .iter()
        .map(|&dt| {
            let store = &r.sim(dt).store;
            let p = PhysicalPathSet::build(store).unwrap();
            weak_ode_residual(store, &p.z, &p.f).unwrap()
        })
        .collect();
    let monotone = vals.windows(2).all(|w| w[1] < w[0]);
    Line {
        id: 9,
        name: "weak Lagrangian ODE under dt halving",
        pass: monotone,
        detail: format!(
            "residual at dt 0.02, 0.01, 0.005 = {:.3e}, {:.3e}, {:.3e}",
            vals[0], vals[1], vals[2]
        ),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn c10_superdiff() -> Line {
    let t0 = Instant::now();
    let cfg = medium_config("exact", 32);
    let r = pipeline::verify_superdiff(&cfg, None).unwrap();
    let rel = r.smallest_step_rel_error().unwrap_or(f64::INFINITY);
    let s = t0.elapsed().as_secs_f64();
    Line {
        id: 10,
        name: "superdifferential identity",
        pass: rel <= C10_REL && r.identity_residual <= C10_IDENTITY && s < C10_SECONDS,
        detail: format!(
            "|FD - analytic|/|analytic| at s = 1e-4: {rel:.2e} <= {C10_REL:e}; identity residual {:e} <= {C10_IDENTITY:e}; {s:.1} s",
            r.identity_residual
        ),
        seconds: s,
    }
}

fn c11_concavity() -> Line {
    let t0 = Instant::now();
    let cfg = medium_config("exact", 32);
    let reports = pipeline::verify_concavity(&cfg, None, C11_PROBES, None).unwrap();
    let held = reports.iter().filter(|r| r.holds).count();
    let need = reports
        .iter()
        .filter_map(|r| r.lambda_required)
        .fold(f64::NEG_INFINITY, f64::max);
    Line {
        id: 11,
        name: "(-2)-concavity along displacement interpolation",
        pass: held == reports.len(),
        detail: format!(
            "{held}/{} probes hold at lambda = -2; largest lambda the samples need {need:.3}",
            reports.len()
        ),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c12_determinism() -> Line {
    let t0 = Instant::now();
    let cfg = config::parse_config(&demo_config()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline::execute_run(&cfg, &a, None).unwrap();
    // Second run on a single worker: outputs must not depend on the pool size.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    pool.install(|| pipeline::execute_run(&cfg, &b, None)).unwrap();
    let (fa, fb) = (files_under(&a), files_under(&b));
    let same = fa == fb
        && fa
            .iter()
            .all(|f| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap());
    Line {
        id: 12,
        name: "determinism of the demo run",
        pass: same,
        detail: format!("{} files compared byte for byte (4 workers vs 1)", fa.len()),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn main() {
    let mut lines = vec![
        c1_exact_vs_permutations(),
        c2_entropic_consistency(),
        c3_minimizer_optimality(),
    ];
    let c4 = criterion4_runs();
    lines.push(c4_energy(&c4));
    let sims: Vec<&Simulation> = c4.runs.iter().map(|r| &r.1).collect();
    lines.push(c5_theta(&sims));
    lines.push(c6_lr(&c4));
    lines.push(c7_inverse_maps());
    lines.push(c8_pushforward(&c4));
    lines.push(c9_weak_ode(&c4));
    lines.push(c10_superdiff());
    lines.push(c11_concavity());
    lines.push(c12_determinism());
    lines.sort_by_key(|l| l.id);

    let mut unexpected = 0;
    for l in &lines {
        let known = KNOWN_FAILURES.iter().find(|k| k.0 == l.id);
        let tag = match (l.pass, known) {
            (true, _) => "PASS",
            (false, Some(_)) => "FAIL (known)",
            (false, None) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!(
            "criterion {:>2} {tag:<12} {:<48} {}  [{:.1} s]",
            l.id, l.name, l.detail, l.seconds
        );
        if let (false, Some(k)) = (l.pass, known) {
            println!("              reason: {}", k.1);
        }
    }
    let passed = lines.iter().filter(|l| l.pass).count();
    println!(
        "acceptance: {passed}/{} criteria pass, {unexpected} unexpected failure(s)",
        lines.len()
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}
