//! Checks of the Hamiltonian structure: the superdifferential identity, the
//! concavity inequality along displacement interpolations, and conservation
//! along computed flows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::grad_y_cost;
use crate::energy::Minimizer;
use crate::error::{Error, Result};
use crate::flow::{velocity, TrajectoryStore};
use crate::geometry::{dist2, dot, norm, second_moment, sub, DualParticleCloud, Vec3};
use crate::ot::exact;

/// `y3 * (-v2, v1, 0)`
pub fn jtilde(v: Vec3, y: Vec3) -> Vec3 {
    [-y[2] * v[1], y[2] * v[0], 0.0]
}

/// Bump `A exp(1/((r/rho)^2 - 1))` in the horizontal plane, zero for `r >= rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestDirection {
    pub center: [f64; 2],
    pub radius: f64,
    pub amplitude: f64,
}

impl TestDirection {
    pub fn new(center: [f64; 2], radius: f64, amplitude: f64) -> Result<Self> {
        if !(radius > 0.0) || !amplitude.is_finite() || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::Parameter(format!(
                "invalid test direction: radius {radius}, amplitude {amplitude}"
            )));
        }
        Ok(Self {
            center,
            radius,
            amplitude,
        })
    }

    pub fn zero() -> Self {
        Self {
            center: [0.0; 2],
            radius: 1.0,
            amplitude: 0.0,
        }
    }

    /// Centered on the horizontal centroid; radius three quarters of the cloud's
    /// horizontal radius about it.
    pub fn for_cloud(cloud: &DualParticleCloud) -> Result<Self> {
        let total: f64 = cloud.weights().iter().sum();
        let mut c = [0.0; 2];
        for (p, w) in cloud.positions().iter().zip(cloud.weights()) {
            c[0] += w * p[0] / total;
            c[1] += w * p[1] / total;
        }
        let r = cloud
            .positions()
            .iter()
            .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        if r == 0.0 {
            return Err(Error::Input("cloud has no horizontal extent".into()));
        }
        Self::new(c, 0.75 * r, 0.1)
    }

    fn q(&self, y: Vec3) -> (f64, f64, f64) {
        let (dx, dy) = (y[0] - self.center[0], y[1] - self.center[1]);
        ((dx * dx + dy * dy) / (self.radius * self.radius), dx, dy)
    }

    pub fn value(&self, y: Vec3) -> f64 {
        let (q, _, _) = self.q(y);
        if q >= 1.0 || self.amplitude == 0.0 {
            return 0.0;
        }
        self.amplitude * (1.0 / (q - 1.0)).exp()
    }

    pub fn gradient(&self, y: Vec3) -> Vec3 {
        let (q, dx, dy) = self.q(y);
        if q >= 1.0 || self.amplitude == 0.0 {
            return [0.0; 3];
        }
        let h = (1.0 / (q - 1.0)).exp();
        // d/dq exp(1/(q-1)) = -h/(q-1)^2, dq/dy = 2 (y - c)/rho^2
        let s = -self.amplitude * h / (q - 1.0).powi(2) * 2.0 / (self.radius * self.radius);
        [s * dx, s * dy, 0.0]
    }

    /// Spectral norm of the horizontal Hessian.
    pub fn hessian_norm(&self, y: Vec3) -> f64 {
        let (q, dx, dy) = self.q(y);
        if q >= 1.0 || self.amplitude == 0.0 {
            return 0.0;
        }
        let h = (1.0 / (q - 1.0)).exp();
        let d = q - 1.0;
        let h1 = -h / (d * d);
        let h2 = h * (1.0 / d.powi(4) + 2.0 / d.powi(3));
        let k = 2.0 / (self.radius * self.radius);
        // A (h1 k I + h2 k^2 d d^T): eigenvalues h1 k and h1 k + h2 k^2 |d|^2
        let r2 = dx * dx + dy * dy;
        let a = (self.amplitude * h1 * k).abs();
        let b = (self.amplitude * (h1 * k + h2 * k * k * r2)).abs();
        a.max(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuperdiffEntry {
    pub s: f64,
    pub h: f64,
    pub difference_quotient: f64,
    pub abs_error: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperdiffReport {
    pub h: f64,
    pub analytic: f64,
    pub entries: Vec<SuperdiffEntry>,
    /// From the two smallest steps, assuming an `O(s)` remainder.
    pub extrapolated: Option<f64>,
    pub extrapolated_error: Option<f64>,
    /// `max_j |jtilde(grad c(S(y_j), y_j)) - w(y_j)|`
    pub identity_residual: f64,
}

impl SuperdiffReport {
    pub fn smallest_step_rel_error(&self) -> Option<f64> {
        self.entries
            .iter()
            .min_by(|a, b| a.s.abs().total_cmp(&b.s.abs()))
            .map(|e| e.rel_error)
    }
}

/// Compares `(H((id + s grad phi)#nu) - H(nu))/s` to
/// `sum_j nu_j grad_y c(S(y_j), y_j) . grad phi(y_j)`, always with the exact
/// transport solver.
pub fn superdifferential_check(
    cloud: &DualParticleCloud,
    dir: &TestDirection,
    s_ladder: &[f64],
    minimizer: &Minimizer,
) -> Result<SuperdiffReport> {
    if s_ladder.is_empty() || s_ladder.iter().any(|s| *s == 0.0 || !s.is_finite()) {
        return Err(Error::Parameter("step ladder must hold finite nonzero steps".into()));
    }
    let hess = cloud
        .positions()
        .iter()
        .map(|y| dir.hessian_norm(*y))
        .fold(0.0, f64::max);
    for s in s_ladder {
        if s.abs() * hess >= 1.0 {
            return Err(Error::Parameter(format!(
                "step {s} breaks monotonicity of the perturbation (|s| * |D^2 phi| = {})",
                s.abs() * hess
            )));
        }
    }
    let mut m = minimizer.exact_variant();
    let base = m.minimize(cloud, None)?;
    if !base.converged {
        return Err(Error::Convergence {
            iterations: base.iterations,
            residual: base.el_residual,
        });
    }
    let h = base.energy.total;
    let w = velocity(cloud, &base.s_map)?;
    let mut analytic = 0.0;
    let mut identity = 0.0f64;
    for (j, (y, nu)) in cloud.positions().iter().zip(cloud.weights()).enumerate() {
        let gc = grad_y_cost(base.s_map[j], *y, m.phi())?;
        analytic += nu * dot(gc, dir.gradient(*y));
        identity = identity.max(norm(sub(jtilde(gc, *y), w[j])));
    }
    let mut entries = Vec::new();
    for &s in s_ladder {
        let moved: Vec<Vec3> = cloud
            .positions()
            .iter()
            .map(|y| {
                let g = dir.gradient(*y);
                [y[0] + s * g[0], y[1] + s * g[1], y[2]]
            })
            .collect();
        let pert = cloud.with_positions(moved)?;
        let r = m.minimize(&pert, Some(&base.sigma))?;
        if !r.converged {
            return Err(Error::Convergence {
                iterations: r.iterations,
                residual: r.el_residual,
            });
        }
        let dq = (r.energy.total - h) / s;
        let abs_error = (dq - analytic).abs();
        entries.push(SuperdiffEntry {
            s,
            h: r.energy.total,
            difference_quotient: dq,
            abs_error,
            rel_error: if analytic != 0.0 {
                abs_error / analytic.abs()
            } else {
                abs_error
            },
        });
    }
    let mut sorted = entries.clone();
    sorted.sort_by(|a, b| a.s.abs().total_cmp(&b.s.abs()));
    let (extrapolated, extrapolated_error) = match sorted.as_slice() {
        [fine, coarse, ..] if fine.s != coarse.s => {
            let q = coarse.s / fine.s;
            let e = (q * fine.difference_quotient - coarse.difference_quotient) / (q - 1.0);
            (Some(e), Some((e - analytic).abs()))
        }
        _ => (None, None),
    };
    Ok(SuperdiffReport {
        h,
        analytic,
        entries,
        extrapolated,
        extrapolated_error,
        identity_residual: identity,
    })
}

/// Anything that can evaluate `H` on a cloud.
pub trait EnergyOracle {
    fn energy(&mut self, cloud: &DualParticleCloud) -> Result<f64>;
}

impl EnergyOracle for Minimizer {
    fn energy(&mut self, cloud: &DualParticleCloud) -> Result<f64> {
        let r = self.minimize(cloud, None)?;
        if !r.converged {
            return Err(Error::Convergence {
                iterations: r.iterations,
                residual: r.el_residual,
            });
        }
        Ok(r.energy.total)
    }
}

/// Deliberately broken oracle: adds a convex second-moment term, which the
/// concavity check must catch.
#[derive(Debug, Clone)]
pub struct CorruptedOracle {
    pub inner: Minimizer,
    pub strength: f64,
}

impl EnergyOracle for CorruptedOracle {
    fn energy(&mut self, cloud: &DualParticleCloud) -> Result<f64> {
        Ok(self.inner.energy(cloud)? + self.strength * second_moment(cloud))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavityProbe {
    pub nu1: DualParticleCloud,
    pub nu2: DualParticleCloud,
    pub ts: Vec<f64>,
}

impl ConcavityProbe {
    pub fn new(nu1: DualParticleCloud, nu2: DualParticleCloud, ts: Vec<f64>) -> Result<Self> {
        if nu1.len() != nu2.len() {
            return Err(Error::Input(format!(
                "probe clouds have {} and {} particles",
                nu1.len(),
                nu2.len()
            )));
        }
        if nu1.weights() != nu2.weights() {
            return Err(Error::Input("probe clouds must carry matching weights".into()));
        }
        if ts.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Input("interpolation parameters must lie in [0, 1]".into()));
        }
        Ok(Self { nu1, nu2, ts })
    }

    pub fn uniform_grid(nu1: DualParticleCloud, nu2: DualParticleCloud, points: usize) -> Result<Self> {
        let k = points.max(2) - 1;
        Self::new(nu1, nu2, (0..=k).map(|i| i as f64 / k as f64).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcavityRow {
    pub t: f64,
    pub h: f64,
    pub bound: f64,
    /// `h - bound`; the inequality asks for `margin >= -slack`.
    pub margin: f64,
    pub slack: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcavityReport {
    pub lambda: f64,
    pub h1: f64,
    pub h2: f64,
    pub w2_squared: f64,
    pub rows: Vec<ConcavityRow>,
    pub holds: bool,
    /// Smallest `lambda` for which the sampled inequality would hold.
    pub lambda_required: Option<f64>,
}

pub const CONCAVITY_LAMBDA: f64 = -2.0;

/// Checks `H(nu_t) >= (1-t) H(nu1) + t H(nu2) - (lambda/2) t (1-t) W2^2`
/// along the displacement interpolation of the optimal quadratic coupling.
pub fn concavity_check(probe: &ConcavityProbe, oracle: &mut dyn EnergyOracle, lambda: f64) -> Result<ConcavityReport> {
    let (a, b) = (&probe.nu1, &probe.nu2);
    let mut cost = Vec::with_capacity(a.len() * b.len());
    for p in a.positions() {
        for q in b.positions() {
            cost.push(dist2(*p, *q));
        }
    }
    let sol = exact::solve_transport(a.weights(), b.weights(), &cost)?;
    let w2sq = sol.total_cost.max(0.0);
    let pairs: Vec<(usize, usize, f64)> = sol.plan.entries().filter(|e| e.2 > 0.0).collect();
    let h1 = oracle.energy(a)?;
    let h2 = oracle.energy(b)?;
    let mut rows = Vec::new();
    for &t in &probe.ts {
        let h = if t == 0.0 {
            h1
        } else if t == 1.0 {
            h2
        } else {
            let pos: Vec<Vec3> = pairs
                .iter()
                .map(|&(i, j, _)| {
                    let (p, q) = (a.positions()[i], b.positions()[j]);
                    [
                        (1.0 - t) * p[0] + t * q[0],
                        (1.0 - t) * p[1] + t * q[1],
                        (1.0 - t) * p[2] + t * q[2],
                    ]
                })
                .collect();
            let w: Vec<f64> = pairs.iter().map(|e| e.2).collect();
            oracle.energy(&DualParticleCloud::new(pos, w)?)?
        };
        let bound = (1.0 - t) * h1 + t * h2 - 0.5 * lambda * t * (1.0 - t) * w2sq;
        let slack = 1e-8 * (1.0 + h.abs());
        let margin = h - bound;
        rows.push(ConcavityRow {
            t,
            h,
            bound,
            margin,
            slack,
            holds: margin >= -slack,
        });
    }
    let holds = rows.iter().all(|r| r.holds);
    let lambda_required = rows
        .iter()
        .filter(|r| r.t > 0.0 && r.t < 1.0 && w2sq > 0.0)
        .map(|r| 2.0 * ((1.0 - r.t) * h1 + r.t * h2 - r.h) / (r.t * (1.0 - r.t) * w2sq))
        .reduce(f64::max);
    Ok(ConcavityReport {
        lambda,
        h1,
        h2,
        w2_squared: w2sq,
        rows,
        holds,
        lambda_required,
    })
}

/// Independent probes in parallel, each on its own copy of the minimizer.
/// Results come back in probe order.
pub fn concavity_audit(probes: &[ConcavityProbe], minimizer: &Minimizer, lambda: f64) -> Result<Vec<ConcavityReport>> {
    let base = minimizer.exact_variant();
    probes
        .par_iter()
        .map(|p| concavity_check(p, &mut base.clone(), lambda))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConservationAudit {
    pub snapshots: usize,
    pub dt: Option<f64>,
    pub h0: f64,
    pub max_drift: f64,
    pub final_drift: f64,
}

/// Relative drift of `H` over a stored trajectory.
pub fn conservation_audit(store: &TrajectoryStore) -> ConservationAudit {
    let snaps = store.snapshots();
    let h0 = snaps[0].energy.total;
    let rel = |h: f64| (h - h0).abs() / h0.abs().max(f64::MIN_POSITIVE);
    let times = store.times();
    ConservationAudit {
        snapshots: snaps.len(),
        dt: (times.len() >= 2).then(|| times[1] - times[0]),
        h0,
        max_drift: snaps.iter().map(|s| rel(s.energy.total)).fold(0.0, f64::max),
        final_drift: rel(snaps[snaps.len() - 1].energy.total),
    }
}

/// Ratios of successive maximal drifts for runs ordered coarse to fine.
pub fn drift_ratios(audits: &[ConservationAudit]) -> Vec<f64> {
    audits
        .windows(2)
        .map(|w| {
            if w[1].max_drift > 0.0 {
                w[0].max_drift / w[1].max_drift
            } else {
                f64::INFINITY
            }
        })
        .collect()
}
