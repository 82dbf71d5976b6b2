//! Physical-space Lagrangian reconstruction from a dual trajectory.
//!
//! Everything here is a plan-weighted composition of stored per-particle
//! tables. Particles are labeled, so the inverse dual flow is the same table
//! read against the initial column.

use serde::{Deserialize, Serialize};

use crate::energy::{Minimizer, MinimizerReport};
use crate::error::{Error, Result};
use crate::flow::{Snapshot, TrajectoryStore};
use crate::geometry::{
    dist2, e3_cross, norm, sub, wasserstein2_points, DualParticleCloud, GridDensity, PointMap, Vec3,
};
use crate::ot::{barycentric_rows, TransportPlan};

/// `(sigma0, T0, S0)` with the plan and its column-sum residual.
#[derive(Debug, Clone)]
pub struct StableState {
    pub sigma0: GridDensity,
    pub t0: PointMap,
    pub s0: PointMap,
    pub plan: TransportPlan,
    /// `max_j |sum_i gamma_ij - nu_j|`
    pub pushforward_residual: f64,
    pub report: MinimizerReport,
}

pub fn init_stable_state(cloud0: &DualParticleCloud, minimizer: &mut Minimizer) -> Result<StableState> {
    let report = minimizer.minimize(cloud0, None)?;
    if !report.converged {
        return Err(Error::Convergence {
            iterations: report.iterations,
            residual: report.el_residual,
        });
    }
    let cols = report.solution.plan.col_sums();
    let res = cols
        .iter()
        .zip(cloud0.weights())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(StableState {
        sigma0: report.sigma.clone(),
        t0: report.t_map.clone(),
        s0: report.s_map.clone(),
        plan: report.solution.plan.clone(),
        pushforward_residual: res,
        report,
    })
}

fn initial_masses(store: &TrajectoryStore) -> Vec<f64> {
    store.initial().masses(store.domain())
}

/// `F(t_k, x_i) = S_k(Phi_k(T0(x_i)))`: the initial plan row of cell `i`
/// averages the current `S` of the particles it was assigned.
pub fn flow_f(store: &TrajectoryStore, k: usize) -> Result<PointMap> {
    let snap = store.get(k)?;
    let first = store.initial();
    Ok(barycentric_rows(&first.plan, snap.s_map.images(), store.domain(), &initial_masses(store))?.0)
}

/// `F*(t_k, x_i) = S0(Phi*_k(T_k(x_i)))`: the current plan row averages the
/// initial `S` of the particles, read back along their labels.
pub fn inverse_flow_fstar(store: &TrajectoryStore, k: usize) -> Result<PointMap> {
    let snap = store.get(k)?;
    let first = store.initial();
    Ok(barycentric_rows(
        &snap.plan,
        first.s_map.images(),
        store.domain(),
        &snap.masses(store.domain()),
    )?
    .0)
}

/// `Z(t_k, x_i) = Phi_k(T0(x_i))` for every stored time.
pub fn trajectory_z(store: &TrajectoryStore) -> Result<Vec<PointMap>> {
    let first = store.initial();
    let m0 = initial_masses(store);
    store
        .snapshots()
        .iter()
        .map(|s| Ok(barycentric_rows(&first.plan, &s.positions, store.domain(), &m0)?.0))
        .collect()
}

pub fn all_f(store: &TrajectoryStore) -> Result<Vec<PointMap>> {
    (0..store.len()).map(|k| flow_f(store, k)).collect()
}

pub fn all_fstar(store: &TrajectoryStore) -> Result<Vec<PointMap>> {
    (0..store.len()).map(|k| inverse_flow_fstar(store, k)).collect()
}

/// Per-cell samples of the reconstructed motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalPathSet {
    pub times: Vec<f64>,
    pub f: Vec<PointMap>,
    pub z: Vec<PointMap>,
    pub u: Vec<Vec<Vec3>>,
}

impl PhysicalPathSet {
    pub fn build(store: &TrajectoryStore) -> Result<Self> {
        let f = all_f(store)?;
        let fs = all_fstar(store)?;
        let z = trajectory_z(store)?;
        let u = if store.len() >= 2 {
            recover_velocity(store, &f, &fs)?
        } else {
            vec![vec![[0.0; 3]; store.domain().num_cells()]]
        };
        Ok(Self {
            times: store.times(),
            f,
            z,
            u,
        })
    }

    /// Largest distance of any `F` sample outside the closed domain.
    pub fn boundary_excess(&self, store: &TrajectoryStore) -> f64 {
        let (lo, hi) = (store.domain().lo(), store.domain().hi());
        let mut worst = 0.0f64;
        for m in &self.f {
            for p in m.images() {
                for a in 0..3 {
                    worst = worst.max(lo[a] - p[a]).max(p[a] - hi[a]);
                }
            }
        }
        worst
    }
}

/// `max |(Z_{k+1} - Z_k)/dt - e3 x (Z_mid - F_mid)|` over cells and intervals.
pub fn weak_ode_residual(store: &TrajectoryStore, z: &[PointMap], f: &[PointMap]) -> Result<f64> {
    let times = store.times();
    if times.len() < 2 {
        return Err(Error::Input("weak ODE residual needs two time levels".into()));
    }
    if z.len() != times.len() || f.len() != times.len() {
        return Err(Error::Input("path tables do not match the store".into()));
    }
    let mut worst = 0.0f64;
    for k in 0..times.len() - 1 {
        let dt = times[k + 1] - times[k];
        if dt <= 0.0 {
            continue;
        }
        for i in 0..z[k].len() {
            let (za, zb) = (z[k].images()[i], z[k + 1].images()[i]);
            let (fa, fb) = (f[k].images()[i], f[k + 1].images()[i]);
            let mid = [
                0.5 * (za[0] + zb[0]) - 0.5 * (fa[0] + fb[0]),
                0.5 * (za[1] + zb[1]) - 0.5 * (fa[1] + fb[1]),
                0.0,
            ];
            let rhs = e3_cross(mid);
            let lhs = [(zb[0] - za[0]) / dt, (zb[1] - za[1]) / dt, (zb[2] - za[2]) / dt];
            worst = worst.max(norm(sub(lhs, rhs)));
        }
    }
    Ok(worst)
}

/// W2 between `F_k # sigma0` and `sigma_k`, both as cell atoms.
pub fn pushforward_check(store: &TrajectoryStore, k: usize) -> Result<f64> {
    let snap = store.get(k)?;
    let f = flow_f(store, k)?;
    let d = store.domain();
    wasserstein2_points(f.images(), &initial_masses(store), d.centers(), &snap.masses(d))
}

/// Mass-weighted mean of `|F*_k(F_k(x)) - x|`, with `F*_k` looked up in the
/// cell containing `F_k(x)`.
pub fn round_trip_residual(store: &TrajectoryStore, k: usize) -> Result<f64> {
    let f = flow_f(store, k)?;
    let fs = inverse_flow_fstar(store, k)?;
    let d = store.domain();
    let m0 = initial_masses(store);
    let total: f64 = m0.iter().sum();
    let mut acc = 0.0;
    for (i, x) in d.centers().iter().enumerate() {
        if m0[i] == 0.0 {
            continue;
        }
        let back = fs.get(d.locate(f.get(i)?))?;
        acc += m0[i] * dist2(back, *x).sqrt();
    }
    Ok(acc / total)
}

fn time_derivative(times: &[f64], f: &[PointMap], k: usize) -> Vec<Vec3> {
    let (a, b) = if k == 0 {
        (0, 1)
    } else if k + 1 == times.len() {
        (k - 1, k)
    } else {
        (k - 1, k + 1)
    };
    let dt = times[b] - times[a];
    f[a].images()
        .iter()
        .zip(f[b].images())
        .map(|(p, q)| {
            if dt > 0.0 {
                [(q[0] - p[0]) / dt, (q[1] - p[1]) / dt, (q[2] - p[2]) / dt]
            } else {
                [0.0; 3]
            }
        })
        .collect()
}

/// `u(t_k, x) = dF/dt(t_k, F*_k(x))`: centered differences in time (one-sided
/// at the ends), evaluated in the cell containing `F*_k(x)`.
pub fn recover_velocity(store: &TrajectoryStore, f: &[PointMap], fstar: &[PointMap]) -> Result<Vec<Vec<Vec3>>> {
    let times = store.times();
    if times.len() < 2 {
        return Err(Error::Input("velocity recovery needs two time levels".into()));
    }
    if f.len() != times.len() || fstar.len() != times.len() {
        return Err(Error::Input("map tables do not match the store".into()));
    }
    let d = store.domain();
    (0..times.len())
        .map(|k| {
            let df = time_derivative(&times, f, k);
            fstar[k].images().iter().map(|p| Ok(df[d.locate(*p)])).collect()
        })
        .collect()
}

/// Mean of `u` under `sigma_k` against the weight-averaged time derivative
/// of `S`, which is what `u` should average to exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VelocityConsistency {
    pub t: f64,
    pub mean_u: Vec3,
    pub mean_ds: Vec3,
    pub gap: f64,
}

pub fn velocity_consistency(store: &TrajectoryStore, u: &[Vec<Vec3>]) -> Result<Vec<VelocityConsistency>> {
    let times = store.times();
    if u.len() != times.len() {
        return Err(Error::Input("velocity table does not match the store".into()));
    }
    let s: Vec<PointMap> = store.snapshots().iter().map(|s| s.s_map.clone()).collect();
    let d = store.domain();
    let mut out = Vec::new();
    for k in 0..times.len() {
        let snap: &Snapshot = store.get(k)?;
        let masses = snap.masses(d);
        let total: f64 = masses.iter().sum();
        let mut mu = [0.0; 3];
        for (m, v) in masses.iter().zip(&u[k]) {
            for a in 0..3 {
                mu[a] += m * v[a] / total;
            }
        }
        let ds = time_derivative(&times, &s, k);
        let wsum: f64 = snap.weights.iter().sum();
        let mut md = [0.0; 3];
        for (w, v) in snap.weights.iter().zip(&ds) {
            for a in 0..3 {
                md[a] += w * v[a] / wsum;
            }
        }
        out.push(VelocityConsistency {
            t: times[k],
            mean_u: mu,
            mean_ds: md,
            gap: norm(sub(mu, md)),
        });
    }
    Ok(out)
}

/// `||F(t_{k+1}) - F(t_k)||_q` under `sigma0`, reported only.
pub fn f_continuity_modulus(store: &TrajectoryStore, f: &[PointMap], q: f64) -> Result<Vec<f64>> {
    if !(q >= 1.0) {
        return Err(Error::Parameter(format!("q must be at least 1, got {q}")));
    }
    let m0 = initial_masses(store);
    Ok(f.windows(2)
        .map(|w| {
            w[0].images()
                .iter()
                .zip(w[1].images())
                .zip(&m0)
                .map(|((a, b), m)| m * dist2(*a, *b).sqrt().powf(q))
                .sum::<f64>()
                .powf(1.0 / q)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{Constants, Geopotential};
    use crate::energy::{EnergyBreakdown, MinimizerOptions, SolverChoice};
    use crate::flow::{run, ClampMode, IntegratorConfig, Scheme};
    use crate::geometry::{DualDomain, PhysicalDomain};
    use crate::ot::inverse_residual;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn minimizer(n: usize) -> Minimizer {
        let d = Arc::new(PhysicalDomain::unit_cube(n).unwrap());
        let o = MinimizerOptions {
            solver: SolverChoice::Exact,
            tol: 1e-10,
            max_outer: 500,
            ..Default::default()
        };
        Minimizer::new(d, Geopotential::default(), Constants::default(), o).unwrap()
    }

    fn random_cloud(seed: u64, n: usize) -> DualParticleCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DualParticleCloud::uniform(
            (0..n)
                .map(|_| {
                    [
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.8..1.3),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn short_run(seed: u64, n: usize, res: usize, dt: f64, t_end: f64) -> TrajectoryStore {
        let c0 = random_cloud(seed, n);
        let cfg = IntegratorConfig {
            dt,
            scheme: Scheme::Heun,
            t_end,
            clamp: DualDomain::from_cloud(&c0, 1.0, 1.0).unwrap(),
            clamp_mode: ClampMode::Off,
        };
        run(&c0, &cfg, &mut minimizer(res), |_| Ok(())).unwrap()
    }

    /// Two cells, two particles sitting on their cell centers, identity plan.
    fn synthetic(velocity: Vec3, steps: usize) -> TrajectoryStore {
        let d = Arc::new(PhysicalDomain::new([0.0; 3], [2.0, 1.0, 1.0], [2, 1, 1]).unwrap());
        let c = d.centers().to_vec();
        let plan = TransportPlan::from_triplets(2, 2, vec![(0, 0, 0.5), (1, 1, 0.5)]).unwrap();
        let snap = |t: f64| Snapshot {
            t,
            positions: c.clone(),
            weights: vec![0.5, 0.5],
            sigma: vec![0.5, 0.5],
            plan: plan.clone(),
            t_map: PointMap::new(c.clone()),
            s_map: PointMap::new(
                c.iter()
                    .map(|p| [p[0] + t * velocity[0], p[1] + t * velocity[1], p[2] + t * velocity[2]])
                    .collect(),
            ),
            velocity: vec![[0.0; 3]; 2],
            energy: EnergyBreakdown {
                transport_term: 0.0,
                internal_term: 0.0,
                total: 1.0,
                lagrange_lambda: 0.0,
            },
            el_residual: 0.0,
            iterations: 0,
        };
        let mut s = TrajectoryStore::new(d, snap(0.0)).unwrap();
        for k in 1..=steps {
            s.push(snap(0.1 * k as f64)).unwrap();
        }
        s
    }

    #[test]
    fn stable_state_single_particle_and_marginals() {
        let mut m = minimizer(4);
        let c = DualParticleCloud::uniform(vec![[0.4, 0.6, 1.2]]).unwrap();
        let st = init_stable_state(&c, &mut m).unwrap();
        let y = [0.4, 0.6, 1.2];
        assert!(st
            .t0
            .images()
            .iter()
            .all(|p| (0..3).all(|a| (p[a] - y[a]).abs() <= 1e-14)));
        assert!(st.pushforward_residual <= 1e-12);
        let c = random_cloud(11, 12);
        let st = init_stable_state(&c, &mut m).unwrap();
        assert!(st.pushforward_residual <= 1e-8);
    }

    #[test]
    fn stable_state_reflection_symmetry() {
        // reflection x1 -> 1 - x1 maps the grid to itself and swaps the particles
        let mut m = minimizer(4);
        let c = DualParticleCloud::uniform(vec![[0.3, 0.5, 1.0], [0.7, 0.5, 1.0]]).unwrap();
        let st = init_stable_state(&c, &mut m).unwrap();
        let [n0, n1, n2] = m.domain().resolution();
        let s = st.sigma0.values();
        for i in 0..n0 {
            for j in 0..n1 {
                for k in 0..n2 {
                    let a = s[(i * n1 + j) * n2 + k];
                    let b = s[((n0 - 1 - i) * n1 + j) * n2 + k];
                    assert!((a - b).abs() < 1e-9, "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn initial_reconstruction_is_near_identity() {
        let store = short_run(3, 16, 6, 0.05, 0.1);
        let d = store.domain().clone();
        let first = store.initial();
        let z = trajectory_z(&store).unwrap();
        assert_eq!(z[0], first.t_map);
        let f0 = flow_f(&store, 0).unwrap();
        let m0 = first.masses(&d);
        let mean: f64 = f0
            .images()
            .iter()
            .zip(d.centers())
            .zip(&m0)
            .map(|((a, b), m)| m * dist2(*a, *b).sqrt())
            .sum();
        let cloud = first.cloud().unwrap();
        let inv = inverse_residual(&d, &cloud, &first.t_map, &first.s_map, &m0).unwrap();
        assert!(mean <= inv + 1e-12, "{mean} vs {inv}");
        let fs0 = inverse_flow_fstar(&store, 0).unwrap();
        let fsm: f64 = fs0
            .images()
            .iter()
            .zip(d.centers())
            .zip(&m0)
            .map(|((a, b), m)| m * dist2(*a, *b).sqrt())
            .sum();
        assert!(fsm <= 2.0 * d.spacing());
        assert!(pushforward_check(&store, 0).unwrap() <= 2.0 * d.spacing());
        assert!(flow_f(&store, 99).is_err());
    }

    #[test]
    fn short_run_properties() {
        let store = short_run(5, 16, 6, 0.05, 0.2);
        let d = store.domain().clone();
        let paths = PhysicalPathSet::build(&store).unwrap();
        assert_eq!(paths.boundary_excess(&store), 0.0);
        for zk in &paths.z {
            for (a, b) in zk.images().iter().zip(paths.z[0].images()) {
                assert_eq!(a[2], b[2]);
            }
        }
        let last = store.len() - 1;
        assert!(round_trip_residual(&store, last).unwrap() <= 3.0 * d.spacing());
        assert!(pushforward_check(&store, last).unwrap() <= 3.0 * d.spacing());
        let r = weak_ode_residual(&store, &paths.z, &paths.f).unwrap();
        assert!(r.is_finite());
        let fs = all_fstar(&store).unwrap();
        let u = recover_velocity(&store, &paths.f, &fs).unwrap();
        let vc = velocity_consistency(&store, &u).unwrap();
        assert!(vc.iter().all(|v| v.gap.is_finite()));
    }

    #[test]
    fn frozen_store_is_constant() {
        let s = synthetic([0.0; 3], 3);
        let p = PhysicalPathSet::build(&s).unwrap();
        for k in 0..s.len() {
            assert_eq!(p.f[k], p.f[0]);
            assert_eq!(p.z[k], p.z[0]);
            assert_eq!(inverse_flow_fstar(&s, k).unwrap(), inverse_flow_fstar(&s, 0).unwrap());
            assert!(p.u[k].iter().all(|v| *v == [0.0; 3]));
        }
        // particles sit on S, so both sides of the ODE vanish
        assert_eq!(weak_ode_residual(&s, &p.z, &p.f).unwrap(), 0.0);
        let pf: Vec<f64> = (0..s.len()).map(|k| pushforward_check(&s, k).unwrap()).collect();
        assert!(pf.iter().all(|v| *v == pf[0]));
        assert!(f_continuity_modulus(&s, &p.f, 2.0).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn uniform_translation_recovers_its_velocity() {
        let v = [0.3, -0.2, 0.1];
        let s = synthetic(v, 4);
        let p = PhysicalPathSet::build(&s).unwrap();
        for uk in &p.u {
            for x in uk {
                for a in 0..3 {
                    assert!((x[a] - v[a]).abs() < 1e-12);
                }
            }
        }
        let vc = velocity_consistency(&s, &p.u).unwrap();
        assert!(vc.iter().all(|c| c.gap < 1e-12));
    }

    #[test]
    fn weak_residual_needs_two_levels() {
        let s = synthetic([0.0; 3], 0);
        let z = trajectory_z(&s).unwrap();
        assert!(weak_ode_residual(&s, &z, &all_f(&s).unwrap()).is_err());
    }
}
