//! Discrete optimal transport from grid cells to dual particles.

pub mod exact;
pub mod sinkhorn;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{cost_unchecked, Geopotential};
use crate::error::{Error, Result};
use crate::geometry::{dist2, DualParticleCloud, PhysicalDomain, PointMap, Vec3};

pub use exact::{solve_exact, ExactOptions, ExactSolver};
pub use sinkhorn::{solve_entropic, solve_entropic_from, EntropicOptions};

/// Dense row-major cost table, rows are cells and columns particles.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Input(format!(
                "cost table has {} entries for a {rows}x{cols} problem",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|c| !c.is_finite()) {
            return Err(Error::Input(format!(
                "cost entry ({}, {}) is not finite",
                k / cols.max(1),
                k % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        if rows.iter().any(|v| v.len() != c) {
            return Err(Error::Input("ragged cost rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn median(&self) -> f64 {
        let mut v = self.data.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return 0.0;
        }
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

/// `C[i][j] = c(center_i, y_j)`.
pub fn assemble_cost(domain: &PhysicalDomain, cloud: &DualParticleCloud, phi: &Geopotential) -> Result<CostMatrix> {
    if let Some(j) = cloud.positions().iter().position(|y| !(y[2] > 0.0)) {
        return Err(Error::Domain(format!("particle {j} has non-positive y3")));
    }
    let n = cloud.len();
    let m = domain.num_cells();
    let ys = cloud.positions();
    let mut data = vec![0.0; m * n];
    data.par_chunks_mut(n)
        .zip(domain.centers().par_iter())
        .for_each(|(row, x)| {
            for (c, y) in row.iter_mut().zip(ys) {
                *c = cost_unchecked(*x, *y, phi);
            }
        });
    CostMatrix::new(m, n, data)
}

/// Sparse coupling in compressed-row form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl TransportPlan {
    /// Builds a plan from `(i, j, mass)` triplets; duplicates are summed and
    /// zero entries dropped.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(i, j, v)) = entries
            .iter()
            .find(|(i, j, v)| *i >= rows || *j >= cols || !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Input(format!("invalid plan entry ({i}, {j}, {v})")));
        }
        entries.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut vals: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in entries {
            if v == 0.0 {
                continue;
            }
            if last == Some((i, j)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            row_ptr[i + 1] += 1;
            col_idx.push(j);
            vals.push(v);
            last = Some((i, j));
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            vals,
        })
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut e = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                e.push((i, j, *v));
            }
        }
        Self::from_triplets(r, c, e)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Nonzero entries `(j, mass)` of row `i`, ascending in `j`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.vals[r].iter().copied())
    }

    /// All nonzero entries in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for (_, j, v) in self.entries() {
            s[j] += v;
        }
        s
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (i, j, v) in self.entries() {
            d[i][j] = v;
        }
        d
    }

    /// `sum gamma_ij C_ij`, summed in row-major order.
    pub fn cost(&self, c: &CostMatrix) -> f64 {
        self.entries().map(|(i, j, v)| v * c.get(i, j)).sum()
    }

    /// Largest absolute deviation of the row and column sums from the marginals.
    pub fn marginal_error(&self, masses: &[f64], weights: &[f64]) -> f64 {
        let r = self.row_sums();
        let c = self.col_sums();
        let er = r.iter().zip(masses).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let ec = c.iter().zip(weights).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        er.max(ec)
    }

    /// Sum of absolute marginal deviations over rows and columns.
    pub fn marginal_violation_l1(&self, masses: &[f64], weights: &[f64]) -> f64 {
        let r = self.row_sums();
        let c = self.col_sums();
        r.iter().zip(masses).map(|(a, b)| (a - b).abs()).sum::<f64>()
            + c.iter().zip(weights).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

/// Potentials in the gauge "mass-weighted mean of f is zero".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KantorovichPotentials {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl KantorovichPotentials {
    /// Shifts `f` down and `g` up by the mass-weighted mean of `f`.
    pub fn gauged(mut f: Vec<f64>, mut g: Vec<f64>, masses: &[f64]) -> Self {
        let total: f64 = masses.iter().sum();
        if total > 0.0 {
            let s: f64 = f.iter().zip(masses).map(|(a, m)| a * m).sum::<f64>() / total;
            f.iter_mut().for_each(|v| *v -= s);
            g.iter_mut().for_each(|v| *v += s);
        }
        Self { f, g }
    }

    pub fn dual_value(&self, masses: &[f64], weights: &[f64]) -> f64 {
        let a: f64 = self.f.iter().zip(masses).map(|(f, m)| f * m).sum();
        let b: f64 = self.g.iter().zip(weights).map(|(g, w)| g * w).sum();
        a + b
    }

    /// `max_ij (f_i + g_j - C_ij)`, positive when the pair constraint is violated.
    pub fn max_infeasibility(&self, c: &CostMatrix) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..c.rows() {
            for (j, cij) in c.row(i).iter().enumerate() {
                worst = worst.max(self.f[i] + self.g[j] - cij);
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtSolution {
    pub plan: TransportPlan,
    pub potentials: KantorovichPotentials,
    pub total_cost: f64,
    /// Regularized solves only.
    pub smooth: Option<SmoothDual>,
}

/// Soft cell potential and value of the entropic problem. `f` is the
/// gradient of the regularized cost in the cell masses, up to a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothDual {
    pub f: Vec<f64>,
    pub value: f64,
}

pub(crate) fn check_marginals(masses: &[f64], weights: &[f64], rows: usize, cols: usize) -> Result<()> {
    if masses.len() != rows || weights.len() != cols {
        return Err(Error::Input(format!(
            "marginals of length {}x{} for a {rows}x{cols} cost table",
            masses.len(),
            weights.len()
        )));
    }
    if rows == 0 || cols == 0 {
        return Err(Error::Input("empty transport problem".into()));
    }
    if masses.iter().chain(weights).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Input("marginals must be finite and nonnegative".into()));
    }
    let a: f64 = masses.iter().sum();
    let b: f64 = weights.iter().sum();
    if (a - b).abs() > 1e-10 * a.max(b).max(1.0) {
        return Err(Error::Input(format!("unbalanced marginals: {a} vs {b}")));
    }
    if !(a > 0.0) {
        return Err(Error::Input("marginals carry no mass".into()));
    }
    Ok(())
}

/// `sum gamma C - (sum f m + sum g w)`.
pub fn dual_gap(
    plan: &TransportPlan,
    potentials: &KantorovichPotentials,
    c: &CostMatrix,
    masses: &[f64],
    weights: &[f64],
) -> f64 {
    plan.cost(c) - potentials.dual_value(masses, weights)
}

pub(crate) fn row_barycenter(plan: &TransportPlan, i: usize, points: &[Vec3]) -> Option<Vec3> {
    let mut acc = [0.0; 3];
    let mut mass = 0.0;
    for (j, v) in plan.row(i) {
        let p = points[j];
        acc[0] += v * p[0];
        acc[1] += v * p[1];
        acc[2] += v * p[2];
        mass += v;
    }
    if mass > 0.0 {
        Some([acc[0] / mass, acc[1] / mass, acc[2] / mass])
    } else {
        None
    }
}

/// For every cell, the cell whose plan row stands in for it: itself when its
/// row carries mass, otherwise the nearest cell (by center distance, lowest
/// index on ties) that does.
pub fn row_donors(plan: &TransportPlan, domain: &PhysicalDomain, masses: &[f64]) -> Result<Vec<usize>> {
    let sums = plan.row_sums();
    let centers = domain.centers();
    let live: Vec<usize> = (0..plan.rows()).filter(|&i| sums[i] > 0.0).collect();
    if live.is_empty() {
        return Err(Error::Internal("transport plan is empty".into()));
    }
    // Roundoff-sized supplies can leave through the simplex's artificial arcs.
    let negligible = 1e-13 * masses.iter().sum::<f64>();
    let mut donors = Vec::with_capacity(plan.rows());
    for i in 0..plan.rows() {
        if sums[i] > 0.0 {
            donors.push(i);
            continue;
        }
        if masses[i] > negligible {
            return Err(Error::Internal(format!(
                "cell {i} has mass {} but an empty plan row",
                masses[i]
            )));
        }
        let mut best = live[0];
        let mut bd = f64::INFINITY;
        for &k in &live {
            let d = dist2(centers[i], centers[k]);
            if d < bd {
                bd = d;
                best = k;
            }
        }
        donors.push(best);
    }
    Ok(donors)
}

/// Barycentric cell map. The flag vector marks cells whose image was borrowed
/// from the nearest cell with mass.
#[allow(non_snake_case)]
pub fn barycentric_map_T(
    plan: &TransportPlan,
    cloud: &DualParticleCloud,
    domain: &PhysicalDomain,
    masses: &[f64],
) -> Result<(PointMap, Vec<bool>)> {
    if plan.rows() != domain.num_cells() || plan.cols() != cloud.len() || masses.len() != plan.rows() {
        return Err(Error::Input("plan shape does not match the domain and cloud".into()));
    }
    barycentric_rows(plan, cloud.positions(), domain, masses)
}

/// Plan-weighted average of arbitrary per-particle points for every cell,
/// with the same donor rule as [`barycentric_map_T`].
pub fn barycentric_rows(
    plan: &TransportPlan,
    points: &[Vec3],
    domain: &PhysicalDomain,
    masses: &[f64],
) -> Result<(PointMap, Vec<bool>)> {
    if points.len() != plan.cols() {
        return Err(Error::Input("point table does not match the plan".into()));
    }
    let donors = row_donors(plan, domain, masses)?;
    let own: Vec<Option<Vec3>> = (0..plan.rows()).map(|i| row_barycenter(plan, i, points)).collect();
    let images = donors.iter().map(|&d| own[d].unwrap()).collect();
    let flags = donors.iter().enumerate().map(|(i, &d)| i != d).collect();
    Ok((PointMap::new(images), flags))
}

/// Barycentric particle map `S(y_j) = sum_i gamma_ij x_i / weight_j`.
#[allow(non_snake_case)]
pub fn barycentric_map_S(plan: &TransportPlan, domain: &PhysicalDomain, weights: &[f64]) -> Result<PointMap> {
    if plan.rows() != domain.num_cells() || plan.cols() != weights.len() {
        return Err(Error::Input("plan shape does not match the domain and weights".into()));
    }
    if let Some(j) = weights.iter().position(|w| !(*w > 0.0)) {
        return Err(Error::Input(format!("particle {j} has zero weight")));
    }
    let mut acc = vec![[0.0; 3]; plan.cols()];
    let centers = domain.centers();
    for (i, j, v) in plan.entries() {
        let x = centers[i];
        acc[j][0] += v * x[0];
        acc[j][1] += v * x[1];
        acc[j][2] += v * x[2];
    }
    Ok(PointMap::new(
        acc.into_iter()
            .zip(weights)
            .map(|(a, w)| [a[0] / w, a[1] / w, a[2] / w])
            .collect(),
    ))
}

/// Index of the particle nearest to `y`, lowest index on ties.
pub fn nearest_particle(positions: &[Vec3], y: Vec3) -> usize {
    let mut best = 0;
    let mut bd = f64::INFINITY;
    for (j, p) in positions.iter().enumerate() {
        let d = dist2(*p, y);
        if d < bd {
            bd = d;
            best = j;
        }
    }
    best
}

/// Mass-weighted mean of `|S(T(x_i)) - x_i|` with `S` looked up at the
/// particle nearest to `T(x_i)`.
pub fn inverse_residual(
    domain: &PhysicalDomain,
    cloud: &DualParticleCloud,
    t_map: &PointMap,
    s_map: &PointMap,
    masses: &[f64],
) -> Result<f64> {
    let total: f64 = masses.iter().sum();
    let mut acc = 0.0;
    for (i, (x, m)) in domain.centers().iter().zip(masses).enumerate() {
        if *m == 0.0 {
            continue;
        }
        let j = nearest_particle(cloud.positions(), t_map.get(i)?);
        acc += m * dist2(s_map.get(j)?, *x).sqrt();
    }
    Ok(acc / total)
}
