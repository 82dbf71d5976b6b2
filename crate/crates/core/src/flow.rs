//! Particle advection in dual space with an energy minimization per stage.

use std::sync::Arc;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyBreakdown, Minimizer, MinimizerReport};
use crate::error::{Error, Result};
use crate::geometry::{
    density_estimate, e3_cross, lr_norm, sub, DualDomain, DualGrid, DualParticleCloud, PhysicalDomain, PointMap, Vec3,
};
use crate::ot::TransportPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Euler,
    Heun,
}

/// When the velocity cutoff is applied. `Auto` switches it on for the rest of
/// the run once a particle comes within two grid spacings of the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClampMode {
    Off,
    On,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub scheme: Scheme,
    pub t_end: f64,
    pub clamp: DualDomain,
    pub clamp_mode: ClampMode,
}

impl IntegratorConfig {
    /// `t_end = 0` is accepted and means "initial state only".
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Parameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end == 0.0 || self.t_end >= self.dt) || !self.t_end.is_finite() {
            return Err(Error::Parameter(format!(
                "t_end must be 0 or at least dt = {}, got {}",
                self.dt, self.t_end
            )));
        }
        Ok(())
    }

    /// Step count; the last step is shortened when `t_end` is not a multiple of `dt`.
    pub fn num_steps(&self) -> usize {
        if self.t_end == 0.0 {
            return 0;
        }
        ((self.t_end / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn time_at(&self, k: usize) -> f64 {
        if k >= self.num_steps() {
            self.t_end
        } else {
            k as f64 * self.dt
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub cloud: DualParticleCloud,
    pub minimizer: MinimizerReport,
    pub velocity: Vec<Vec3>,
    pub energy_history: Vec<(f64, f64)>,
    pub clamp_active: bool,
}

/// `w_j = e3 x (y_j - S(y_j))`.
pub fn velocity(cloud: &DualParticleCloud, s_map: &PointMap) -> Result<Vec<Vec3>> {
    if s_map.len() != cloud.len() {
        return Err(Error::UndefinedMap {
            index: s_map.len().min(cloud.len()),
            len: s_map.len(),
        });
    }
    cloud
        .positions()
        .iter()
        .enumerate()
        .map(|(j, y)| Ok(e3_cross(sub(*y, s_map.get(j)?))))
        .collect()
}

/// C-infinity step: 0 for `t <= 0`, 1 for `t >= 1`.
fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / t).exp();
    let b = (-1.0 / (1.0 - t)).exp();
    a / (a + b)
}

/// Horizontal profile: 1 up to `r`, 0 from `2r`.
fn zeta(s: f64, r: f64) -> f64 {
    1.0 - smooth_step((s - r) / r)
}

/// Vertical profile: 1 on `[delta, 1/delta]`, 0 below `delta/2` and above `2/delta`.
fn xi(y3: f64, delta: f64) -> f64 {
    let top = 1.0 / delta;
    smooth_step((y3 - 0.5 * delta) / (0.5 * delta)) * (1.0 - smooth_step((y3 - top) / top))
}

/// Taper factor applied to the velocity at `y`.
pub fn clamp_factor(y: Vec3, clamp: &DualDomain) -> f64 {
    zeta((y[0] - clamp.center[0]).abs(), clamp.radius)
        * zeta((y[1] - clamp.center[1]).abs(), clamp.radius)
        * xi(y[2], clamp.delta)
}

pub fn clamp_velocity(cloud: &DualParticleCloud, raw: &[Vec3], clamp: &DualDomain) -> Vec<Vec3> {
    cloud
        .positions()
        .iter()
        .zip(raw)
        .map(|(y, w)| {
            let k = clamp_factor(*y, clamp);
            if k == 1.0 {
                *w
            } else {
                [w[0] * k, w[1] * k, 0.0]
            }
        })
        .collect()
}

fn checked_minimize(
    minimizer: &mut Minimizer,
    cloud: &DualParticleCloud,
    warm: Option<&MinimizerReport>,
) -> Result<MinimizerReport> {
    let r = minimizer.minimize(cloud, warm.map(|w| &w.sigma))?;
    if !r.converged {
        return Err(Error::Convergence {
            iterations: r.iterations,
            residual: r.el_residual,
        });
    }
    Ok(r)
}

fn effective_velocity(
    cloud: &DualParticleCloud,
    report: &MinimizerReport,
    cfg: &IntegratorConfig,
    active: &mut bool,
    spacing: f64,
) -> Result<Vec<Vec3>> {
    let raw = velocity(cloud, &report.s_map)?;
    match cfg.clamp_mode {
        ClampMode::Off => return Ok(raw),
        ClampMode::On => *active = true,
        ClampMode::Auto => {
            if !*active
                && cloud
                    .positions()
                    .iter()
                    .any(|y| cfg.clamp.boundary_distance(*y) < 2.0 * spacing)
            {
                debug!("velocity cutoff switched on");
                *active = true;
            }
        }
    }
    Ok(if *active {
        clamp_velocity(cloud, &raw, &cfg.clamp)
    } else {
        raw
    })
}

/// Moves the horizontal coordinates only, so `y3` is untouched bit for bit.
fn advect(cloud: &DualParticleCloud, w: &[Vec3], dt: f64) -> Result<DualParticleCloud> {
    let pos = cloud
        .positions()
        .iter()
        .zip(w)
        .map(|(y, v)| [y[0] + dt * v[0], y[1] + dt * v[1], y[2]])
        .collect();
    cloud.with_positions(pos)
}

pub fn initial_state(
    cloud: &DualParticleCloud,
    cfg: &IntegratorConfig,
    minimizer: &mut Minimizer,
) -> Result<FlowState> {
    cfg.validate()?;
    let report = checked_minimize(minimizer, cloud, None)?;
    let mut active = false;
    let spacing = minimizer.domain().spacing();
    let v = effective_velocity(cloud, &report, cfg, &mut active, spacing)?;
    Ok(FlowState {
        t: 0.0,
        cloud: cloud.clone(),
        energy_history: vec![(0.0, report.energy.total)],
        minimizer: report,
        velocity: v,
        clamp_active: active,
    })
}

/// One step from `state` to time `t_next`. The input state is left intact, so
/// on error the caller still holds the last good state.
pub fn step(state: &FlowState, t_next: f64, cfg: &IntegratorConfig, minimizer: &mut Minimizer) -> Result<FlowState> {
    let dt = t_next - state.t;
    let wrap = |e: Error| Error::Step {
        t: t_next,
        source: Box::new(e),
    };
    let spacing = minimizer.domain().spacing();
    let mut active = state.clamp_active;
    let moved = match cfg.scheme {
        Scheme::Euler => advect(&state.cloud, &state.velocity, dt).map_err(wrap)?,
        Scheme::Heun => {
            let pred = advect(&state.cloud, &state.velocity, dt).map_err(wrap)?;
            let rp = checked_minimize(minimizer, &pred, Some(&state.minimizer)).map_err(wrap)?;
            let wp = effective_velocity(&pred, &rp, cfg, &mut active, spacing).map_err(wrap)?;
            let avg: Vec<Vec3> = state
                .velocity
                .iter()
                .zip(&wp)
                .map(|(a, b)| [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), 0.0])
                .collect();
            advect(&state.cloud, &avg, dt).map_err(wrap)?
        }
    };
    let report = checked_minimize(minimizer, &moved, Some(&state.minimizer)).map_err(wrap)?;
    let v = effective_velocity(&moved, &report, cfg, &mut active, spacing).map_err(wrap)?;
    let mut history = state.energy_history.clone();
    history.push((t_next, report.energy.total));
    Ok(FlowState {
        t: t_next,
        cloud: moved,
        minimizer: report,
        velocity: v,
        energy_history: history,
        clamp_active: active,
    })
}

/// Everything the reconstruction needs from one time level.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub positions: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub sigma: Vec<f64>,
    pub plan: TransportPlan,
    pub t_map: PointMap,
    pub s_map: PointMap,
    pub velocity: Vec<Vec3>,
    pub energy: EnergyBreakdown,
    pub el_residual: f64,
    pub iterations: usize,
}

impl Snapshot {
    pub fn from_state(s: &FlowState) -> Self {
        Self {
            t: s.t,
            positions: s.cloud.positions().to_vec(),
            weights: s.cloud.weights().to_vec(),
            sigma: s.minimizer.sigma.values().to_vec(),
            plan: s.minimizer.solution.plan.clone(),
            t_map: s.minimizer.t_map.clone(),
            s_map: s.minimizer.s_map.clone(),
            velocity: s.velocity.clone(),
            energy: s.minimizer.energy,
            el_residual: s.minimizer.el_residual,
            iterations: s.minimizer.iterations,
        }
    }

    pub fn cloud(&self) -> Result<DualParticleCloud> {
        DualParticleCloud::new(self.positions.clone(), self.weights.clone())
    }

    pub fn masses(&self, domain: &PhysicalDomain) -> Vec<f64> {
        self.sigma.iter().zip(domain.volumes()).map(|(s, v)| s * v).collect()
    }
}

/// Append-only record of a run. Particle labels are fixed, so the table of
/// positions doubles as the dual flow map keyed to the initial particles.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStore {
    domain: Arc<PhysicalDomain>,
    snapshots: Vec<Snapshot>,
}

impl TrajectoryStore {
    pub fn new(domain: Arc<PhysicalDomain>, first: Snapshot) -> Result<Self> {
        if first.sigma.len() != domain.num_cells() {
            return Err(Error::Input("snapshot does not match the domain".into()));
        }
        Ok(Self {
            domain,
            snapshots: vec![first],
        })
    }

    pub fn push(&mut self, s: Snapshot) -> Result<()> {
        let last = self.snapshots.last().unwrap();
        if s.positions.len() != last.positions.len() || s.sigma.len() != last.sigma.len() {
            return Err(Error::Input("snapshot index sets differ from the store".into()));
        }
        if !(s.t >= last.t) {
            return Err(Error::Input(format!("snapshot time {} precedes {}", s.t, last.t)));
        }
        self.snapshots.push(s);
        Ok(())
    }

    pub fn domain(&self) -> &Arc<PhysicalDomain> {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn get(&self, k: usize) -> Result<&Snapshot> {
        self.snapshots.get(k).ok_or(Error::UndefinedMap {
            index: k,
            len: self.snapshots.len(),
        })
    }

    pub fn initial(&self) -> &Snapshot {
        &self.snapshots[0]
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.t).collect()
    }
}

/// Integrates to `cfg.t_end`; `observe` sees every state including the first.
pub fn run(
    cloud0: &DualParticleCloud,
    cfg: &IntegratorConfig,
    minimizer: &mut Minimizer,
    mut observe: impl FnMut(&FlowState) -> Result<()>,
) -> Result<TrajectoryStore> {
    let mut state = initial_state(cloud0, cfg, minimizer)?;
    observe(&state)?;
    let mut store = TrajectoryStore::new(minimizer.domain().clone(), Snapshot::from_state(&state))?;
    for k in 1..=cfg.num_steps() {
        let next = step(&state, cfg.time_at(k), cfg, minimizer)?;
        observe(&next)?;
        store.push(Snapshot::from_state(&next))?;
        state = next;
    }
    Ok(store)
}

fn horizon_lhs(c0: f64, m2: f64, tau: f64) -> f64 {
    c0 * tau * (24.0 * (1.0 + ((25.0 * c0 * c0 + 1.0) * tau).exp() * (1.0 + m2))).sqrt()
}

/// Largest `tau` with `C0 tau sqrt(24 (1 + exp((25 C0^2 + 1) tau) (1 + M2))) < R0`.
pub fn horizon_bound(c0: f64, r0: f64, m2: f64) -> Result<f64> {
    if !(c0 > 0.0 && r0 > 0.0 && m2 >= 0.0) || !(c0.is_finite() && r0.is_finite() && m2.is_finite()) {
        return Err(Error::Parameter(format!(
            "horizon bound needs C0 > 0, R0 > 0, M2 >= 0; got {c0}, {r0}, {m2}"
        )));
    }
    let mut hi = 1.0;
    while horizon_lhs(c0, m2, hi) < r0 {
        hi *= 2.0;
        if hi > 1e300 {
            return Ok(f64::INFINITY);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if horizon_lhs(c0, m2, mid) < r0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Logs and returns the bound; falling short of `dt` is only a warning.
pub fn horizon_advisory(c0: f64, r0: f64, m2: f64, dt: f64) -> Result<f64> {
    let tau = horizon_bound(c0, r0, m2)?;
    if tau < dt {
        warn!("admissible horizon {tau:e} is shorter than one step dt = {dt}");
    }
    Ok(tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrRecord {
    pub r: f64,
    pub norm: f64,
    pub drift: f64,
}

/// One row of the diagnostics time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub h: f64,
    pub transport_term: f64,
    pub internal_term: f64,
    pub h_drift: f64,
    pub theta_drift: f64,
    pub weight_sum_drift: f64,
    pub lr: Vec<LrRecord>,
    pub hist_min: f64,
    pub hist_max: f64,
    pub el_residual: f64,
    pub inverse_residual: Option<f64>,
    pub pushforward: Option<f64>,
    pub wall_seconds: Option<f64>,
}

pub type DiagnosticsLog = Vec<DiagnosticsRecord>;

/// Drift series against the first snapshot. The histogram lives on `grid`.
pub fn conservation_report(store: &TrajectoryStore, grid: &DualGrid, rs: &[f64]) -> Result<DiagnosticsLog> {
    let first = store.initial();
    let vols = vec![grid.cell_volume(); grid.num_cells()];
    let norms = |s: &Snapshot| -> Result<(Vec<f64>, f64, f64)> {
        let hist = density_estimate(&s.cloud()?, grid)?;
        let n = rs
            .iter()
            .map(|r| lr_norm(&hist, &vols, *r))
            .collect::<Result<Vec<_>>>()?;
        let lo = hist.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = hist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok((n, lo, hi))
    };
    let (n0, _, _) = norms(first)?;
    let h0 = first.energy.total;
    let w0: f64 = first.weights.iter().sum();
    let mut log = Vec::with_capacity(store.len());
    for s in store.snapshots() {
        let (n, lo, hi) = norms(s)?;
        let theta = s
            .positions
            .iter()
            .zip(&first.positions)
            .map(|(a, b)| (a[2] - b[2]).abs())
            .fold(0.0, f64::max);
        let w: f64 = s.weights.iter().sum();
        log.push(DiagnosticsRecord {
            t: s.t,
            h: s.energy.total,
            transport_term: s.energy.transport_term,
            internal_term: s.energy.internal_term,
            h_drift: (s.energy.total - h0).abs() / h0.abs().max(f64::MIN_POSITIVE),
            theta_drift: theta,
            weight_sum_drift: (w - w0).abs(),
            lr: rs
                .iter()
                .zip(n.iter().zip(&n0))
                .map(|(r, (a, b))| LrRecord {
                    r: *r,
                    norm: *a,
                    drift: (a - b).abs() / b.abs().max(f64::MIN_POSITIVE),
                })
                .collect(),
            hist_min: lo,
            hist_max: hi,
            el_residual: s.el_residual,
            inverse_residual: None,
            pushforward: None,
            wall_seconds: None,
        });
    }
    Ok(log)
}

/// Largest `|h(t) - h(0)| / |h(0)|` in a log.
pub fn max_h_drift(log: &DiagnosticsLog) -> f64 {
    log.iter().map(|r| r.h_drift).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{Constants, Geopotential};
    use crate::energy::{MinimizerOptions, SolverChoice};
    use crate::geometry::norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    fn cloud(rng: &mut ChaCha8Rng, n: usize) -> DualParticleCloud {
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

    fn cfg(dt: f64, t_end: f64, scheme: Scheme, c: &DualParticleCloud) -> IntegratorConfig {
        IntegratorConfig {
            dt,
            scheme,
            t_end,
            clamp: DualDomain::from_cloud(c, 1.0, t_end.max(dt)).unwrap(),
            clamp_mode: ClampMode::Off,
        }
    }

    #[test]
    fn velocity_is_rotated_offset() {
        let c = DualParticleCloud::uniform(vec![[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [0.3, 0.4, 2.0]]).unwrap();
        let s = PointMap::new(vec![[0.0, 0.0, 0.5], [0.0, 0.0, 0.7], [0.3, 0.4, 0.1]]);
        let w = velocity(&c, &s).unwrap();
        assert_eq!(w[0], [0.0, 1.0, 0.0]);
        assert_eq!(w[1], [-1.0, 0.0, 0.0]);
        assert_eq!(w[2], [0.0, 0.0, 0.0]);
        assert!(w.iter().all(|v| v[2] == 0.0));
        assert!(velocity(&c, &PointMap::new(vec![[0.0; 3]])).is_err());
    }

    #[test]
    fn cutoff_profiles() {
        let clamp = DualDomain::new([0.0, 0.0], 1.0, 0.5).unwrap();
        let inside = DualParticleCloud::uniform(vec![[0.2, -0.3, 1.0], [0.0, 0.0, 1.9]]).unwrap();
        let raw = vec![[0.3, -0.2, 0.0], [1.0, 1.0, 0.0]];
        assert_eq!(clamp_velocity(&inside, &raw, &clamp), raw);
        let low = DualParticleCloud::uniform(vec![[0.0, 0.0, 0.25], [0.0, 0.0, 0.1]]).unwrap();
        assert!(clamp_velocity(&low, &raw, &clamp).iter().all(|v| *v == [0.0; 3]));
        // along a ray leaving the square the factor falls monotonically to 0
        let mut prev = f64::INFINITY;
        for k in 0..=400 {
            let y = [k as f64 * 0.01, 0.3, 1.0];
            let f = clamp_factor(y, &clamp);
            assert!(f <= prev && (0.0..=1.0).contains(&f));
            prev = f;
        }
        assert_eq!(prev, 0.0);
        assert!(clamp_factor([1.5, 0.0, 1.0], &clamp) > 0.0);
    }

    #[test]
    fn frozen_particles_only_advance_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c0 = cloud(&mut rng, 4);
        let mut m = minimizer(3);
        let mut c = cfg(0.1, 0.3, Scheme::Heun, &c0);
        // every particle sits below half the band floor
        c.clamp = DualDomain::new([0.5, 0.5], 1.0, 0.9).unwrap();
        let low = c0
            .with_positions(c0.positions().iter().map(|p| [p[0], p[1], 0.4]).collect())
            .unwrap();
        c.clamp_mode = ClampMode::On;
        let store = run(&low, &c, &mut m, |_| Ok(())).unwrap();
        assert_eq!(store.len(), 4);
        for s in store.snapshots() {
            assert_eq!(s.positions, store.initial().positions);
            assert_eq!(s.sigma, store.initial().sigma);
        }
        assert_eq!(store.times(), vec![0.0, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn single_particle_euler_step_by_hand() {
        let c0 = DualParticleCloud::uniform(vec![[0.9, 0.2, 1.1]]).unwrap();
        let mut m = minimizer(4);
        let c = cfg(0.05, 0.05, Scheme::Euler, &c0);
        let s0 = initial_state(&c0, &c, &mut m).unwrap();
        let d = m.domain().clone();
        let masses = s0.minimizer.sigma.masses();
        let mut bar = [0.0; 3];
        for (x, w) in d.centers().iter().zip(&masses) {
            for a in 0..3 {
                bar[a] += w * x[a];
            }
        }
        let sy = s0.minimizer.s_map.get(0).unwrap();
        for a in 0..3 {
            assert!((sy[a] - bar[a]).abs() < 1e-14);
        }
        let y = c0.positions()[0];
        let want = [y[0] - 0.05 * (y[1] - sy[1]), y[1] + 0.05 * (y[0] - sy[0]), y[2]];
        let s1 = step(&s0, 0.05, &c, &mut m).unwrap();
        assert_eq!(s1.cloud.positions()[0], want);
        assert_eq!(s1.t, 0.05);
    }

    #[test]
    fn vertical_coordinate_and_weights_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c0 = cloud(&mut rng, 6);
        let mut m = minimizer(4);
        for scheme in [Scheme::Euler, Scheme::Heun] {
            let c = cfg(0.05, 0.2, scheme, &c0);
            let store = run(&c0, &c, &mut m, |_| Ok(())).unwrap();
            for s in store.snapshots() {
                for (a, b) in s.positions.iter().zip(c0.positions()) {
                    assert_eq!(a[2].to_bits(), b[2].to_bits());
                }
                assert_eq!(s.weights, c0.weights());
                assert!(s.velocity.iter().all(|v| v[2] == 0.0));
            }
            let log = conservation_report(&store, &DualGrid::covering(&c.clamp, [8, 8, 8]).unwrap(), &[2.0]).unwrap();
            assert!(log.iter().all(|r| r.theta_drift == 0.0 && r.weight_sum_drift == 0.0));
        }
    }

    #[test]
    fn heun_against_two_half_euler_steps_is_second_order() {
        // The exact plan changes by discrete cell exchanges, which makes the
        // velocity field jump; the entropic plan depends smoothly on y.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c0 = cloud(&mut rng, 16);
        let d = Arc::new(PhysicalDomain::unit_cube(6).unwrap());
        let o = MinimizerOptions {
            solver: SolverChoice::Entropic { epsilon: 1e-2 },
            tol: 1e-9,
            max_outer: 500,
            ..Default::default()
        };
        let mut m = Minimizer::new(d, Geopotential::default(), Constants::default(), o).unwrap();
        let base = cfg(0.1, 0.1, Scheme::Heun, &c0);
        let s0 = initial_state(&c0, &base, &mut m).unwrap();
        let mut diffs = Vec::new();
        for dt in [0.08, 0.04, 0.02] {
            let heun = step(
                &s0,
                dt,
                &IntegratorConfig {
                    scheme: Scheme::Heun,
                    ..base
                },
                &mut m,
            )
            .unwrap();
            let eul = IntegratorConfig {
                scheme: Scheme::Euler,
                ..base
            };
            let half = step(&s0, 0.5 * dt, &eul, &mut m).unwrap();
            let two = step(&half, dt, &eul, &mut m).unwrap();
            let d = heun
                .cloud
                .positions()
                .iter()
                .zip(two.cloud.positions())
                .map(|(a, b)| norm(sub(*a, *b)))
                .fold(0.0, f64::max);
            diffs.push(d);
        }
        for k in 0..2 {
            let order = (diffs[k] / diffs[k + 1]).log2();
            assert!(order >= 1.8, "order {order} from {diffs:?}");
        }
    }

    #[test]
    fn zero_horizon_keeps_initial_state_and_runs_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c0 = cloud(&mut rng, 5);
        let mut m = minimizer(4);
        let c = IntegratorConfig {
            t_end: 0.0,
            ..cfg(0.1, 0.1, Scheme::Heun, &c0)
        };
        assert_eq!(run(&c0, &c, &mut m, |_| Ok(())).unwrap().len(), 1);
        let c = cfg(0.05, 0.15, Scheme::Heun, &c0);
        let a = run(&c0, &c, &mut minimizer(4), |_| Ok(())).unwrap();
        let b = run(&c0, &c, &mut minimizer(4), |_| Ok(())).unwrap();
        assert_eq!(a, b);
        let log = conservation_report(&a, &DualGrid::covering(&c.clamp, [6, 6, 6]).unwrap(), &[2.0]).unwrap();
        assert_eq!(log[0].h_drift, 0.0);
        assert_eq!(log[0].lr[0].drift, 0.0);
        assert!(max_h_drift(&log) < 1e-2);
    }

    #[test]
    fn config_validation() {
        let c0 = DualParticleCloud::uniform(vec![[0.5, 0.5, 1.0]]).unwrap();
        let ok = cfg(0.1, 1.0, Scheme::Heun, &c0);
        assert!(ok.validate().is_ok());
        assert_eq!(ok.num_steps(), 10);
        assert_eq!(ok.time_at(10), 1.0);
        assert!(IntegratorConfig { dt: 0.0, ..ok }.validate().is_err());
        assert!(IntegratorConfig { t_end: 0.05, ..ok }.validate().is_err());
        assert_eq!(IntegratorConfig { t_end: 0.25, ..ok }.num_steps(), 3);
    }

    #[test]
    fn horizon_bound_properties() {
        let tau = horizon_bound(1.0, 10.0, 1.0).unwrap();
        // dense scan oracle
        let mut best = 0.0;
        let mut t = 0.0;
        while t < 1.0 {
            if horizon_lhs(1.0, 1.0, t) < 10.0 {
                best = t;
            }
            t += 1e-5;
        }
        assert!((tau - best).abs() < 2e-5, "{tau} vs {best}");
        assert!(horizon_lhs(1.0, 1.0, tau) < 10.0);
        assert!(horizon_bound(1.0, 1e-9, 1.0).unwrap() > 0.0);
        let mut prev = 0.0;
        for r in [0.1, 0.2, 0.4, 0.8, 1.6, 3.2, 6.4] {
            let t = horizon_bound(0.7, r, 2.0).unwrap();
            assert!(t >= prev);
            prev = t;
        }
        assert!(horizon_bound(0.0, 1.0, 1.0).is_err());
    }
}
