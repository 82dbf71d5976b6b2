//! Geostrophic energy in dual form and its minimization over `sigma`.
//!
//! For fixed particles the energy `E(sigma) = OT_c(sigma, nu) + K1 sum sigma^kappa vol`
//! is strictly convex in `sigma`. The minimizer is computed by a damped fixed
//! point: solve the transport problem, apply the closed-form first-order
//! update, blend. An iterate is accepted only if it does not raise the
//! energy; otherwise the blend factor is halved.

use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::cost::{Constants, Geopotential};
use crate::error::{Error, Result};
use crate::geometry::{DualParticleCloud, GridDensity, PhysicalDomain, PointMap};
use crate::ot::{
    assemble_cost, barycentric_map_S, barycentric_map_T, solve_entropic_from, CostMatrix, EntropicOptions,
    ExactOptions, ExactSolver, KantorovichPotentials, OtSolution,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub transport_term: f64,
    pub internal_term: f64,
    pub total: f64,
    pub lagrange_lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SolverChoice {
    Exact,
    Entropic {
        epsilon: f64,
    },
    /// Exact within the size cap, entropic beyond it.
    Auto {
        epsilon: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinimizerOptions {
    pub damping: f64,
    pub tol: f64,
    pub max_outer: usize,
    pub solver: SolverChoice,
    pub exact: ExactOptions,
    pub entropic: EntropicOptions,
}

impl Default for MinimizerOptions {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-7,
            max_outer: 200,
            solver: SolverChoice::Auto { epsilon: 1e-3 },
            exact: ExactOptions::default(),
            entropic: EntropicOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizerReport {
    pub sigma: GridDensity,
    pub solution: OtSolution,
    pub t_map: PointMap,
    /// Cells whose `T` image was borrowed from a neighbour with mass.
    pub t_borrowed: Vec<bool>,
    pub s_map: PointMap,
    pub energy: EnergyBreakdown,
    pub el_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Energies of the accepted iterates.
    pub energy_history: Vec<f64>,
    pub backtracks: usize,
}

/// Energy comparisons are made up to this relative slack; below it the
/// change is indistinguishable from summation noise.
pub const ROUNDOFF: f64 = 1e-14;

/// `x^p` with cheap paths for the exponents met at kappa = 1.4 and 2.
#[inline]
fn pow_p(x: f64, p: f64) -> f64 {
    if p == 1.0 {
        x
    } else if p == 2.5 {
        x * x * x.sqrt()
    } else if p == 2.0 {
        x * x
    } else {
        x.powf(p)
    }
}

pub fn internal_energy(sigma: &[f64], volumes: &[f64], constants: &Constants) -> f64 {
    constants.k1
        * sigma
            .iter()
            .zip(volumes)
            .map(|(s, v)| s.powf(constants.kappa) * v)
            .sum::<f64>()
}

/// Closed-form density `[(lambda - f)_+ / (kappa K1)]^(1/(kappa-1))` with
/// `lambda` chosen by bisection so that the mass is one.
pub fn closed_form_update(f: &[f64], volumes: &[f64], constants: &Constants) -> Result<(Vec<f64>, f64)> {
    let k = constants.kappa;
    let kk = k * constants.k1;
    let p = 1.0 / (k - 1.0);
    let mass = |lambda: f64| -> f64 {
        f.iter()
            .zip(volumes)
            .map(|(fi, v)| {
                let d = lambda - fi;
                if d > 0.0 {
                    v * pow_p(d / kk, p)
                } else {
                    0.0
                }
            })
            .sum()
    };
    let fmin = f.iter().copied().fold(f64::INFINITY, f64::min);
    let fmax = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vmin = volumes.iter().copied().fold(f64::INFINITY, f64::min);
    if !(fmin.is_finite() && fmax.is_finite() && vmin > 0.0) {
        return Err(Error::Numerical("non-finite potential in density update".into()));
    }
    let mut lo = fmin;
    let mut hi = fmax + kk * (1.0 / vmin).powf(k - 1.0);
    if !(mass(lo) <= 1.0 && mass(hi) >= 1.0) {
        return Err(Error::Numerical(format!(
            "mass multiplier bracket [{lo}, {hi}] does not enclose unit mass"
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mass(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = hi;
    let mut sigma: Vec<f64> = f
        .iter()
        .map(|fi| {
            let d = lambda - fi;
            if d > 0.0 {
                pow_p(d / kk, p)
            } else {
                0.0
            }
        })
        .collect();
    let m: f64 = sigma.iter().zip(volumes).map(|(s, v)| s * v).sum();
    sigma.iter_mut().for_each(|s| *s /= m);
    Ok((sigma, lambda))
}

/// `max |f_i + kappa K1 sigma_i^(kappa-1) - lambda|` over cells above the
/// support floor `1e-12 * mean(sigma)`.
pub fn euler_lagrange_residual(sigma: &[f64], f: &[f64], lambda: f64, constants: &Constants) -> f64 {
    let mean = sigma.iter().sum::<f64>() / sigma.len().max(1) as f64;
    let floor = 1e-12 * mean;
    let kk = constants.kappa * constants.k1;
    sigma
        .iter()
        .zip(f)
        .filter(|(s, _)| **s > floor)
        .map(|(s, fi)| (fi + kk * s.powf(constants.kappa - 1.0) - lambda).abs())
        .fold(0.0, f64::max)
}

/// Largest difference quotient of `sigma` between face-adjacent cells.
pub fn lipschitz_estimate(sigma: &GridDensity) -> f64 {
    let d = sigma.domain();
    let [n0, n1, n2] = d.resolution();
    let h = d.cell_size();
    let v = sigma.values();
    let idx = |i: usize, j: usize, k: usize| (i * n1 + j) * n2 + k;
    let mut best = 0.0f64;
    for i in 0..n0 {
        for j in 0..n1 {
            for k in 0..n2 {
                let here = v[idx(i, j, k)];
                if i + 1 < n0 {
                    best = best.max((v[idx(i + 1, j, k)] - here).abs() / h[0]);
                }
                if j + 1 < n1 {
                    best = best.max((v[idx(i, j + 1, k)] - here).abs() / h[1]);
                }
                if k + 1 < n2 {
                    best = best.max((v[idx(i, j, k + 1)] - here).abs() / h[2]);
                }
            }
        }
    }
    best
}

/// Flows below this fraction of their cell's mass do not link components in
/// [`canonical_potentials`]. Near the minimizer the simplex keeps slivers of
/// split mass whose potentials belong to the neighbouring linear piece.
pub const SUPPORT_FLOOR: f64 = 1e-6;

/// Picks, among the optimal potentials of `sol`, the ones the density update
/// should see.
///
/// When the plan's support splits into several connected components the
/// potentials are only determined up to one constant per component, and an
/// arbitrary choice leaves the fixed point stuck. Each component is shifted so
/// that the closed-form density with a shared multiplier carries exactly the
/// component's mass. When two shifts would break dual feasibility on an
/// off-support pair, that pair is tight at the optimum: the two components are
/// merged with their relative shift pinned there and share one mass target.
/// Returns `None` if the c-transform still finds the result infeasible.
/// Sub-floor flows are ignored, so the result is optimal up to their mass.
pub fn canonical_potentials(
    c: &CostMatrix,
    sol: &OtSolution,
    masses: &[f64],
    volumes: &[f64],
    constants: &Constants,
) -> Option<KantorovichPotentials> {
    let (m, n) = (c.rows(), c.cols());
    let mut parent: Vec<usize> = (0..m + n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (i, j, v) in sol.plan.entries() {
        if v > SUPPORT_FLOOR * masses[i] {
            let (a, b) = (find(&mut parent, i), find(&mut parent, m + j));
            if a != b {
                parent[a] = b;
            }
        }
    }
    let f0 = &sol.potentials.f;
    let g0 = &sol.potentials.g;
    // components that own at least one cell with mass, densely numbered
    let mut comp_of = vec![usize::MAX; m + n];
    let mut cells: Vec<Vec<usize>> = Vec::new();
    let mut root_id: std::collections::HashMap<usize, usize> = Default::default();
    for i in (0..m).filter(|&i| masses[i] > 0.0) {
        let r = find(&mut parent, i);
        let k = *root_id.entry(r).or_insert_with(|| {
            cells.push(Vec::new());
            cells.len() - 1
        });
        cells[k].push(i);
        comp_of[i] = k;
    }
    for j in 0..n {
        let r = find(&mut parent, m + j);
        if let Some(&k) = root_id.get(&r) {
            comp_of[m + j] = k;
        }
    }
    let nc = cells.len();
    let kk = constants.kappa * constants.k1;
    let p = 1.0 / (constants.kappa - 1.0);
    let cmax = c.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-12 * (1.0 + cmax);

    // group[k]: merged group of component k; offset[k]: its shift relative to
    // the group's common shift
    let mut group: Vec<usize> = (0..nc).collect();
    let mut offset = vec![0.0; nc];
    let mut shift = vec![0.0; nc];
    for _ in 0..=nc {
        let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for k in 0..nc {
            members.entry(group[k]).or_default().push(k);
        }
        for comps in members.values() {
            let list: Vec<(usize, f64)> = comps
                .iter()
                .flat_map(|&k| cells[k].iter().map(move |&i| (i, k)))
                .map(|(i, k)| (i, f0[i] - offset[k]))
                .collect();
            let target: f64 = list.iter().map(|&(i, _)| masses[i]).sum();
            let mass = |u: f64| -> f64 {
                list.iter()
                    .map(|&(i, fi)| {
                        let d = u - fi;
                        if d > 0.0 {
                            volumes[i] * pow_p(d / kk, p)
                        } else {
                            0.0
                        }
                    })
                    .sum()
            };
            let fmin = list.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
            let fmax = list.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
            let vmin = list.iter().map(|&(i, _)| volumes[i]).fold(f64::INFINITY, f64::min);
            let (mut lo, mut hi) = (fmin, fmax + kk * (target / vmin).powf(constants.kappa - 1.0));
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if mass(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            for &k in comps {
                shift[k] = hi + offset[k];
            }
        }
        // most violated pair across groups: shift_b - shift_a <= C_ij - f_i - g_j
        let mut worst: Option<(f64, usize, usize, f64)> = None;
        for i in (0..m).filter(|&i| masses[i] > 0.0) {
            let a = comp_of[i];
            let row = c.row(i);
            for j in 0..n {
                let b = comp_of[m + j];
                if b == usize::MAX || group[b] == group[a] {
                    continue;
                }
                let r = row[j] - f0[i] - g0[j];
                let v = shift[b] - shift[a] - r;
                if v > tol && worst.is_none_or(|w| v > w.0) {
                    worst = Some((v, a, b, r));
                }
            }
        }
        let Some((_, a, b, r)) = worst else { break };
        let (ga, gb) = (group[a], group[b]);
        // pin shift_b - shift_a = r, measured against a's group
        let base = shift[a];
        let delta = shift[a] + r - shift[b];
        for k in 0..nc {
            if group[k] == ga {
                offset[k] = shift[k] - base;
            } else if group[k] == gb {
                offset[k] = shift[k] + delta - base;
                group[k] = ga;
            }
        }
    }

    let mut f = f0.clone();
    let mut g = g0.clone();
    for i in (0..m).filter(|&i| masses[i] > 0.0) {
        f[i] -= shift[comp_of[i]];
    }
    for j in 0..n {
        let k = comp_of[m + j];
        if k != usize::MAX {
            g[j] += shift[k];
        }
    }
    // particles whose only flows were slivers: tightest feasible value
    for j in (0..n).filter(|&j| comp_of[m + j] == usize::MAX) {
        g[j] = (0..m)
            .filter(|&i| masses[i] > 0.0)
            .map(|i| c.get(i, j) - f[i])
            .fold(f64::INFINITY, f64::min);
    }
    for i in 0..m {
        let ct = c
            .row(i)
            .iter()
            .zip(&g)
            .map(|(cij, gj)| cij - gj)
            .fold(f64::INFINITY, f64::min);
        if masses[i] > 0.0 && f[i] - ct > tol {
            return None;
        }
        f[i] = ct;
    }
    Some(KantorovichPotentials::gauged(f, g, masses))
}

/// Transport term the minimizer works with: the regularized value for
/// entropic solves, whose gradient is the soft potential.
pub fn transport_value(sol: &OtSolution) -> f64 {
    sol.smooth.as_ref().map_or(sol.total_cost, |s| s.value)
}

fn update_potential(sol: &OtSolution) -> &[f64] {
    sol.smooth.as_ref().map_or(&sol.potentials.f, |s| &s.f)
}

/// Energy minimizer bound to one domain, geopotential and constants set.
/// Keeps the exact solver's basis between calls.
#[derive(Debug, Clone)]
pub struct Minimizer {
    domain: Arc<PhysicalDomain>,
    phi: Geopotential,
    constants: Constants,
    pub options: MinimizerOptions,
    exact: ExactSolver,
    /// Last entropic `g`, reused as the Newton starting point.
    entropic_warm: Option<Vec<f64>>,
}

impl Minimizer {
    pub fn new(
        domain: Arc<PhysicalDomain>,
        phi: Geopotential,
        constants: Constants,
        options: MinimizerOptions,
    ) -> Result<Self> {
        phi.validate_on(&domain)?;
        if !(constants.kappa > 1.0) {
            return Err(Error::Parameter(format!(
                "kappa must exceed 1, got {}",
                constants.kappa
            )));
        }
        if !(options.damping > 0.0 && options.damping <= 1.0) {
            return Err(Error::Parameter(format!(
                "damping must lie in (0, 1], got {}",
                options.damping
            )));
        }
        if !(options.tol > 0.0) {
            return Err(Error::Parameter("minimizer tolerance must be positive".into()));
        }
        Ok(Self {
            domain,
            phi,
            constants,
            exact: ExactSolver::new(options.exact),
            options,
            entropic_warm: None,
        })
    }

    pub fn domain(&self) -> &Arc<PhysicalDomain> {
        &self.domain
    }

    pub fn phi(&self) -> &Geopotential {
        &self.phi
    }

    pub fn constants(&self) -> &Constants {
        &self.constants
    }

    /// Same problem, exact solver forced.
    pub fn exact_variant(&self) -> Self {
        let mut m = self.clone();
        m.options.solver = SolverChoice::Exact;
        m
    }

    pub fn solver_stats(&self) -> (usize, usize) {
        self.exact.stats()
    }

    /// OT solve with the potentials replaced by their canonical choice.
    fn transport_canonical(&mut self, masses: &[f64], weights: &[f64], c: &CostMatrix) -> Result<OtSolution> {
        let mut sol = self.transport(masses, weights, c)?;
        if sol.smooth.is_some() {
            return Ok(sol);
        }
        if let Some(p) = canonical_potentials(c, &sol, masses, self.domain.volumes(), &self.constants) {
            sol.potentials = p;
        }
        Ok(sol)
    }

    fn transport(&mut self, masses: &[f64], weights: &[f64], c: &CostMatrix) -> Result<OtSolution> {
        match self.options.solver {
            SolverChoice::Exact => self.exact.solve(masses, weights, c),
            SolverChoice::Entropic { epsilon } => self.entropic(masses, weights, c, epsilon),
            SolverChoice::Auto { epsilon } => {
                if self.exact.check_capacity(c.rows(), c.cols()).is_ok() {
                    self.exact.solve(masses, weights, c)
                } else {
                    self.entropic(masses, weights, c, epsilon)
                }
            }
        }
    }

    fn entropic(&mut self, masses: &[f64], weights: &[f64], c: &CostMatrix, epsilon: f64) -> Result<OtSolution> {
        let warm = self.entropic_warm.as_deref();
        let sol = solve_entropic_from(masses, weights, c, epsilon, &self.options.entropic, warm)?;
        self.entropic_warm = Some(sol.potentials.g.clone());
        Ok(sol)
    }

    /// Transport plus internal energy of a given density.
    pub fn energy_of(&mut self, sigma: &GridDensity, cloud: &DualParticleCloud) -> Result<f64> {
        let c = assemble_cost(&self.domain, cloud, &self.phi)?;
        let masses = sigma.masses();
        let sol = self.transport(&masses, cloud.weights(), &c)?;
        Ok(transport_value(&sol) + internal_energy(sigma.values(), self.domain.volumes(), &self.constants))
    }

    pub fn minimize(&mut self, cloud: &DualParticleCloud, init: Option<&GridDensity>) -> Result<MinimizerReport> {
        let c = assemble_cost(&self.domain, cloud, &self.phi)?;
        self.minimize_with_cost(&c, cloud, init)
    }

    /// Fixed-point minimization against an explicit cost table. Exposed so
    /// tests can substitute artificial costs.
    pub fn minimize_with_cost(
        &mut self,
        c: &CostMatrix,
        cloud: &DualParticleCloud,
        init: Option<&GridDensity>,
    ) -> Result<MinimizerReport> {
        let ncell = self.domain.num_cells();
        if c.rows() != ncell || c.cols() != cloud.len() {
            return Err(Error::Input("cost table does not match the domain and cloud".into()));
        }
        let vols = self.domain.volumes().to_vec();
        let weights = cloud.weights();
        let mut sigma: Vec<f64> = match init {
            Some(s) if s.values().len() == ncell => s.values().to_vec(),
            Some(_) => return Err(Error::Input("initial density has the wrong size".into())),
            None => GridDensity::uniform(self.domain.clone()).values().to_vec(),
        };
        let masses_of = |s: &[f64]| -> Vec<f64> { s.iter().zip(&vols).map(|(a, v)| a * v).collect() };

        let mut sol = self.transport_canonical(&masses_of(&sigma), weights, c)?;
        let mut energy = transport_value(&sol) + internal_energy(&sigma, &vols, &self.constants);
        let mut history = vec![energy];
        let mut last_decrease = 0.0;
        let mut backtracks = 0usize;
        let mut converged = false;
        let mut iterations = 0usize;
        let (mut lambda, mut residual);
        let mut step = self.options.damping;
        loop {
            let (target, lam) = closed_form_update(update_potential(&sol), &vols, &self.constants)?;
            lambda = lam;
            residual = euler_lagrange_residual(&sigma, update_potential(&sol), lambda, &self.constants);
            if residual <= self.options.tol && last_decrease <= self.options.tol * energy.abs() {
                converged = true;
                break;
            }
            if iterations >= self.options.max_outer {
                break;
            }
            iterations += 1;
            // after a backtrack, retry from twice the last accepted step
            // rather than from the full damping
            let mut alpha = step.min(self.options.damping);
            let mut accepted = None;
            while alpha >= 1e-12 {
                let mut trial: Vec<f64> = sigma
                    .iter()
                    .zip(&target)
                    .map(|(s, t)| (1.0 - alpha) * s + alpha * t)
                    .collect();
                let m: f64 = trial.iter().zip(&vols).map(|(s, v)| s * v).sum();
                trial.iter_mut().for_each(|s| *s /= m);
                let tsol = self.transport_canonical(&masses_of(&trial), weights, c)?;
                let te = transport_value(&tsol) + internal_energy(&trial, &vols, &self.constants);
                if te <= energy + ROUNDOFF * energy.abs() {
                    accepted = Some((trial, tsol, te));
                    break;
                }
                alpha *= 0.5;
                backtracks += 1;
            }
            let Some((trial, tsol, te)) = accepted else {
                debug!("energy minimizer stalled at residual {residual:e}");
                break;
            };
            step = 2.0 * alpha;
            last_decrease = (energy - te).max(0.0);
            if !(te <= energy + ROUNDOFF * energy.abs()) {
                return Err(Error::Internal("accepted iterate raised the energy".into()));
            }
            sigma = trial;
            sol = tsol;
            energy = te;
            history.push(energy);
        }
        debug!("energy minimizer: {iterations} iterations, residual {residual:e}, converged {converged}");

        let masses = masses_of(&sigma);
        let sigma = GridDensity::new(self.domain.clone(), sigma)?;
        let (t_map, t_borrowed) = barycentric_map_T(&sol.plan, cloud, &self.domain, &masses)?;
        let s_map = barycentric_map_S(&sol.plan, &self.domain, weights)?;
        let internal = internal_energy(sigma.values(), &vols, &self.constants);
        Ok(MinimizerReport {
            sigma,
            t_map,
            t_borrowed,
            s_map,
            energy: EnergyBreakdown {
                transport_term: transport_value(&sol),
                internal_term: internal,
                total: transport_value(&sol) + internal,
                lagrange_lambda: lambda,
            },
            solution: sol,
            el_residual: residual,
            iterations,
            converged,
            energy_history: history,
            backtracks,
        })
    }
}

/// One-shot minimization with a fresh solver.
pub fn minimize_sigma(
    cloud: &DualParticleCloud,
    domain: Arc<PhysicalDomain>,
    phi: &Geopotential,
    constants: &Constants,
    options: &MinimizerOptions,
) -> Result<MinimizerReport> {
    Minimizer::new(domain, *phi, *constants, *options)?.minimize(cloud, None)
}

/// `H(nu)`: the minimal energy over densities on the given grid.
pub fn hamiltonian(
    cloud: &DualParticleCloud,
    domain: Arc<PhysicalDomain>,
    phi: &Geopotential,
    constants: &Constants,
    options: &MinimizerOptions,
) -> Result<EnergyBreakdown> {
    Ok(minimize_sigma(cloud, domain, phi, constants, options)?.energy)
}
