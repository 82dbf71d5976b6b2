//! Domains, discretizations and discrete measures.
//!
//! Physical space is an axis-aligned box split into a regular grid of cells;
//! dual space carries the potential density as a cloud of weighted particles.
//! Every measure is an exact discrete object, so statements that hold
//! "almost everywhere" in the continuum are checked for every sample index.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::exact;

pub type Vec3 = [f64; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// `e3 x v`, the rotation by a quarter turn in the horizontal plane.
#[inline]
pub fn e3_cross(v: Vec3) -> Vec3 {
    [-v[1], v[0], 0.0]
}

/// Axis-aligned box in physical space with a regular cell partition.
///
/// Cells are stored in row-major order: `index = (i * n1 + j) * n2 + k`
/// where `(i, j, k)` index the first, second and third axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalDomain {
    lo: Vec3,
    hi: Vec3,
    resolution: [usize; 3],
    centers: Vec<Vec3>,
    volumes: Vec<f64>,
}

impl PhysicalDomain {
    pub fn new(lo: Vec3, hi: Vec3, resolution: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(lo[a].is_finite() && hi[a].is_finite()) || hi[a] <= lo[a] {
                return Err(Error::Parameter(format!(
                    "box axis {a} is empty: [{}, {}]",
                    lo[a], hi[a]
                )));
            }
            if resolution[a] == 0 {
                return Err(Error::Parameter(format!("resolution on axis {a} is zero")));
            }
        }
        let h = [
            (hi[0] - lo[0]) / resolution[0] as f64,
            (hi[1] - lo[1]) / resolution[1] as f64,
            (hi[2] - lo[2]) / resolution[2] as f64,
        ];
        let n = resolution[0] * resolution[1] * resolution[2];
        let mut centers = Vec::with_capacity(n);
        for i in 0..resolution[0] {
            for j in 0..resolution[1] {
                for k in 0..resolution[2] {
                    centers.push([
                        lo[0] + (i as f64 + 0.5) * h[0],
                        lo[1] + (j as f64 + 0.5) * h[1],
                        lo[2] + (k as f64 + 0.5) * h[2],
                    ]);
                }
            }
        }
        let vol = h[0] * h[1] * h[2];
        Ok(Self {
            lo,
            hi,
            resolution,
            centers,
            volumes: vec![vol; n],
        })
    }

    /// The unit box `[0,1]^3` with `n` cells per axis.
    pub fn unit_cube(n: usize) -> Result<Self> {
        Self::new([0.0; 3], [1.0; 3], [n, n, n])
    }

    pub fn lo(&self) -> Vec3 {
        self.lo
    }

    pub fn hi(&self) -> Vec3 {
        self.hi
    }

    pub fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    pub fn num_cells(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[Vec3] {
        &self.centers
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.hi[a] - self.lo[a]).product()
    }

    /// Edge lengths of one cell.
    pub fn cell_size(&self) -> Vec3 {
        [
            (self.hi[0] - self.lo[0]) / self.resolution[0] as f64,
            (self.hi[1] - self.lo[1]) / self.resolution[1] as f64,
            (self.hi[2] - self.lo[2]) / self.resolution[2] as f64,
        ]
    }

    /// Largest cell edge; the "grid spacing" used by all refinement-scaled checks.
    pub fn spacing(&self) -> f64 {
        let h = self.cell_size();
        h[0].max(h[1]).max(h[2])
    }

    /// Membership in the closed box.
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }

    /// Index of the cell containing `p`, clamping points outside the box to
    /// the nearest boundary cell.
    pub fn locate(&self, p: Vec3) -> usize {
        let h = self.cell_size();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = ((p[a] - self.lo[a]) / h[a]).floor();
            let max = (self.resolution[a] - 1) as f64;
            idx[a] = r.clamp(0.0, max) as usize;
        }
        (idx[0] * self.resolution[1] + idx[1]) * self.resolution[2] + idx[2]
    }
}

/// Dual-space region tracked during a run: a horizontal square of half-width
/// `radius` around `center` times the vertical band `[delta, 1/delta]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualDomain {
    pub center: [f64; 2],
    pub radius: f64,
    pub delta: f64,
}

impl DualDomain {
    pub fn new(center: [f64; 2], radius: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Parameter(format!("delta must lie in (0,1), got {delta}")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Parameter(format!("radius must be positive, got {radius}")));
        }
        Ok(Self { center, radius, delta })
    }

    /// Bounding square of the cloud inflated by `speed_bound * horizon`, with
    /// the vertical band taken from the cloud's `y3` range.
    pub fn from_cloud(cloud: &DualParticleCloud, speed_bound: f64, horizon: f64) -> Result<Self> {
        let pos = cloud.positions();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in pos {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        if lo[2] <= 0.0 {
            return Err(Error::Domain(format!(
                "particle potential temperature must be positive, found {}",
                lo[2]
            )));
        }
        let center = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let half = (0.5 * (hi[0] - lo[0])).max(0.5 * (hi[1] - lo[1]));
        let inflate = (speed_bound * horizon).max(0.0);
        let radius = (half + inflate).max(1e-6);
        // 0.95 keeps every particle strictly inside the band.
        let delta = 0.95 * lo[2].min(1.0 / hi[2]);
        Self::new(center, radius, delta.min(0.95))
    }

    pub fn band(&self) -> (f64, f64) {
        (self.delta, 1.0 / self.delta)
    }

    pub fn contains(&self, y: Vec3) -> bool {
        (y[0] - self.center[0]).abs() <= self.radius
            && (y[1] - self.center[1]).abs() <= self.radius
            && y[2] >= self.delta
            && y[2] <= 1.0 / self.delta
    }

    /// Distance from `y` to the boundary of the region (negative outside).
    pub fn boundary_distance(&self, y: Vec3) -> f64 {
        let dh = self.radius - (y[0] - self.center[0]).abs().max((y[1] - self.center[1]).abs());
        let dv = (y[2] - self.delta).min(1.0 / self.delta - y[2]);
        dh.min(dv)
    }
}

/// Density `sigma = rho * theta` sampled per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    domain: Arc<PhysicalDomain>,
    values: Vec<f64>,
}

impl GridDensity {
    pub fn new(domain: Arc<PhysicalDomain>, values: Vec<f64>) -> Result<Self> {
        if values.len() != domain.num_cells() {
            return Err(Error::Input(format!(
                "density has {} values for {} cells",
                values.len(),
                domain.num_cells()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Input(format!(
                "density value {} at cell {i} is not a finite nonnegative number",
                values[i]
            )));
        }
        let mass: f64 = values.iter().zip(domain.volumes()).map(|(v, w)| v * w).sum();
        if (mass - 1.0).abs() > 1e-10 {
            return Err(Error::Input(format!("density has total mass {mass}, expected 1")));
        }
        Ok(Self { domain, values })
    }

    pub fn uniform(domain: Arc<PhysicalDomain>) -> Self {
        let v = 1.0 / domain.volume();
        let values = vec![v; domain.num_cells()];
        Self { domain, values }
    }

    pub fn domain(&self) -> &Arc<PhysicalDomain> {
        &self.domain
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Per-cell mass `value * volume`.
    pub fn masses(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(self.domain.volumes())
            .map(|(v, w)| v * w)
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses().iter().sum()
    }
}

/// Weighted particles representing the potential density in dual space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualParticleCloud {
    positions: Vec<Vec3>,
    weights: Vec<f64>,
}

impl DualParticleCloud {
    pub fn new(positions: Vec<Vec3>, weights: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Input("cloud has no particles".into()));
        }
        if positions.len() != weights.len() {
            return Err(Error::Input(format!(
                "{} positions but {} weights",
                positions.len(),
                weights.len()
            )));
        }
        if let Some(j) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Input(format!("particle {j} has a non-finite coordinate")));
        }
        if let Some(j) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Input(format!(
                "particle {j} has non-positive weight {}",
                weights[j]
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!("weights sum to {total}, expected 1")));
        }
        Ok(Self { positions, weights })
    }

    /// Equal weights `1/n`.
    pub fn uniform(positions: Vec<Vec3>) -> Result<Self> {
        let n = positions.len();
        Self::new(positions, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same weights, new positions. Used by the integrators, which never
    /// touch the weight vector.
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<Self> {
        if positions.len() != self.weights.len() {
            return Err(Error::Input("position count changed".into()));
        }
        if let Some(j) = positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Numerical(format!("particle {j} left the finite range")));
        }
        Ok(Self {
            positions,
            weights: self.weights.clone(),
        })
    }

    /// Checks every particle's third coordinate against the band `[delta, 1/delta]`.
    pub fn check_band(&self, delta: f64) -> Result<()> {
        for (j, p) in self.positions.iter().enumerate() {
            if p[2] < delta || p[2] > 1.0 / delta {
                return Err(Error::Domain(format!(
                    "particle {j} has y3 = {} outside [{delta}, {}]",
                    p[2],
                    1.0 / delta
                )));
            }
        }
        Ok(())
    }
}

/// Tabulated map from sample indices to points in 3-space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMap {
    images: Vec<Vec3>,
}

impl PointMap {
    pub fn new(images: Vec<Vec3>) -> Self {
        Self { images }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<Vec3> {
        self.images.get(index).copied().ok_or(Error::UndefinedMap {
            index,
            len: self.images.len(),
        })
    }

    pub fn images(&self) -> &[Vec3] {
        &self.images
    }
}

impl std::ops::Index<usize> for PointMap {
    type Output = Vec3;

    fn index(&self, i: usize) -> &Vec3 {
        &self.images[i]
    }
}

/// Relocates every particle through `map`; weights are carried over untouched.
pub fn push_forward(cloud: &DualParticleCloud, map: &PointMap) -> Result<DualParticleCloud> {
    let positions = (0..cloud.len()).map(|j| map.get(j)).collect::<Result<Vec<_>>>()?;
    Ok(DualParticleCloud {
        positions,
        weights: cloud.weights.clone(),
    })
}

pub fn second_moment(cloud: &DualParticleCloud) -> f64 {
    cloud
        .positions
        .iter()
        .zip(&cloud.weights)
        .map(|(p, w)| w * dot(*p, *p))
        .sum()
}

/// Wasserstein-2 distance between two clouds.
pub fn wasserstein2(a: &DualParticleCloud, b: &DualParticleCloud) -> Result<f64> {
    wasserstein2_points(&a.positions, &a.weights, &b.positions, &b.weights)
}

/// Wasserstein-2 distance between two weighted point sets, solved exactly.
///
/// Zero-weight points are dropped and coincident points merged before the
/// transport problem is assembled.
pub fn wasserstein2_points(pa: &[Vec3], wa: &[f64], pb: &[Vec3], wb: &[f64]) -> Result<f64> {
    let (pa, wa) = merge_atoms(pa, wa);
    let (pb, wb) = merge_atoms(pb, wb);
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::Input("empty measure in Wasserstein distance".into()));
    }
    let ma: f64 = wa.iter().sum();
    let mb: f64 = wb.iter().sum();
    if (ma - mb).abs() > 1e-10 * ma.max(mb).max(1.0) {
        return Err(Error::Input(format!("unequal masses {ma} and {mb}")));
    }
    let mut cost = Vec::with_capacity(pa.len() * pb.len());
    for p in &pa {
        for q in &pb {
            cost.push(dist2(*p, *q));
        }
    }
    let sol =
        exact::solve_transport(&wa, &wb, &cost).map_err(|e| Error::Internal(format!("Wasserstein LP failed: {e}")))?;
    Ok(sol.total_cost.max(0.0).sqrt())
}

fn merge_atoms(points: &[Vec3], weights: &[f64]) -> (Vec<Vec3>, Vec<f64>) {
    let mut order: Vec<usize> = (0..points.len()).filter(|&i| weights[i] > 0.0).collect();
    let key = |p: &Vec3| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()];
    order.sort_by(|&i, &j| key(&points[i]).cmp(&key(&points[j])).then(i.cmp(&j)));
    let mut out_p: Vec<Vec3> = Vec::new();
    let mut out_w: Vec<f64> = Vec::new();
    for i in order {
        match out_p.last() {
            Some(last) if key(last) == key(&points[i]) => {
                *out_w.last_mut().unwrap() += weights[i];
            }
            _ => {
                out_p.push(points[i]);
                out_w.push(weights[i]);
            }
        }
    }
    (out_p, out_w)
}

/// Regular box partition of dual space used for histogram densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualGrid {
    pub lo: Vec3,
    pub hi: Vec3,
    pub resolution: [usize; 3],
}

impl DualGrid {
    pub fn new(lo: Vec3, hi: Vec3, resolution: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(hi[a] > lo[a]) || resolution[a] == 0 {
                return Err(Error::Parameter(format!("dual grid axis {a} is degenerate")));
            }
        }
        Ok(Self { lo, hi, resolution })
    }

    /// Grid covering the region of a [`DualDomain`].
    pub fn covering(domain: &DualDomain, resolution: [usize; 3]) -> Result<Self> {
        let (lo3, hi3) = domain.band();
        Self::new(
            [domain.center[0] - domain.radius, domain.center[1] - domain.radius, lo3],
            [domain.center[0] + domain.radius, domain.center[1] + domain.radius, hi3],
            resolution,
        )
    }

    pub fn num_cells(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..3)
            .map(|a| (self.hi[a] - self.lo[a]) / self.resolution[a] as f64)
            .product()
    }

    /// Cell index of `y`, or `None` outside the closed grid box.
    pub fn locate(&self, y: Vec3) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if !(y[a] >= self.lo[a] && y[a] <= self.hi[a]) {
                return None;
            }
            let h = (self.hi[a] - self.lo[a]) / self.resolution[a] as f64;
            idx[a] = (((y[a] - self.lo[a]) / h) as usize).min(self.resolution[a] - 1);
        }
        Some((idx[0] * self.resolution[1] + idx[1]) * self.resolution[2] + idx[2])
    }
}

/// Histogram density of the cloud: cell weight divided by cell volume.
pub fn density_estimate(cloud: &DualParticleCloud, grid: &DualGrid) -> Result<Vec<f64>> {
    let mut mass = vec![0.0; grid.num_cells()];
    for (j, (p, w)) in cloud.positions.iter().zip(&cloud.weights).enumerate() {
        let c = grid.locate(*p).ok_or(Error::Coverage { index: j })?;
        mass[c] += w;
    }
    let vol = grid.cell_volume();
    Ok(mass.into_iter().map(|m| m / vol).collect())
}

/// `(sum |v_i|^r vol_i)^(1/r)`.
pub fn lr_norm(density: &[f64], volumes: &[f64], r: f64) -> Result<f64> {
    if !(r > 1.0 && r.is_finite()) {
        return Err(Error::Parameter(format!("L^r exponent must lie in (1, inf), got {r}")));
    }
    if density.len() != volumes.len() {
        return Err(Error::Input("density and volume lengths differ".into()));
    }
    let s: f64 = density.iter().zip(volumes).map(|(v, w)| v.abs().powf(r) * w).sum();
    Ok(s.powf(1.0 / r))
}
