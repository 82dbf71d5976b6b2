//! Snapshot persistence: columnar CSV for arrays, JSON for metadata.
//!
//! Floats are written in shortest round-trip form, so reading a run back
//! reproduces the stored trajectory bit for bit.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::energy::EnergyBreakdown;
use crate::error::{Error, Result};
use crate::flow::{DiagnosticsRecord, Snapshot, TrajectoryStore};
use crate::geometry::{DualDomain, DualParticleCloud, PhysicalDomain, PointMap, Vec3};
use crate::ot::TransportPlan;

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = writer(path)?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct CloudRow {
    particle: usize,
    y1: f64,
    y2: f64,
    y3: f64,
    weight: f64,
    #[serde(default)]
    w1: Option<f64>,
    #[serde(default)]
    w2: Option<f64>,
    #[serde(default)]
    w3: Option<f64>,
}

/// One row per particle; the velocity columns are left empty when absent.
pub fn write_cloud_csv(path: &Path, cloud: &DualParticleCloud, velocity: Option<&[Vec3]>) -> Result<()> {
    write_rows(
        path,
        cloud
            .positions()
            .iter()
            .zip(cloud.weights())
            .enumerate()
            .map(|(j, (p, w))| {
                let v = velocity.map(|v| v[j]);
                CloudRow {
                    particle: j,
                    y1: p[0],
                    y2: p[1],
                    y3: p[2],
                    weight: *w,
                    w1: v.map(|v| v[0]),
                    w2: v.map(|v| v[1]),
                    w3: v.map(|v| v[2]),
                }
            }),
    )
}

fn read_cloud_rows(path: &Path) -> Result<Vec<CloudRow>> {
    let rows: Vec<CloudRow> = read_rows(path)?;
    for (k, r) in rows.iter().enumerate() {
        if r.particle != k {
            return Err(Error::Input(format!(
                "{}: particle column out of order at row {k}",
                path.display()
            )));
        }
    }
    Ok(rows)
}

pub fn read_cloud_csv(path: &Path) -> Result<DualParticleCloud> {
    let rows = read_cloud_rows(path)?;
    DualParticleCloud::new(
        rows.iter().map(|r| [r.y1, r.y2, r.y3]).collect(),
        rows.iter().map(|r| r.weight).collect(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct SigmaRow {
    cell: usize,
    x1: f64,
    x2: f64,
    x3: f64,
    sigma: f64,
}

pub fn write_sigma_csv(path: &Path, domain: &PhysicalDomain, sigma: &[f64]) -> Result<()> {
    write_rows(
        path,
        domain
            .centers()
            .iter()
            .zip(sigma)
            .enumerate()
            .map(|(i, (x, s))| SigmaRow {
                cell: i,
                x1: x[0],
                x2: x[1],
                x3: x[2],
                sigma: *s,
            }),
    )
}

pub fn read_sigma_csv(path: &Path, domain: &PhysicalDomain) -> Result<Vec<f64>> {
    let rows: Vec<SigmaRow> = read_rows(path)?;
    if rows.len() != domain.num_cells() || rows.iter().enumerate().any(|(k, r)| r.cell != k) {
        return Err(Error::Input(format!("{} does not match the grid", path.display())));
    }
    Ok(rows.into_iter().map(|r| r.sigma).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct MapRow {
    map: String,
    index: usize,
    v1: f64,
    v2: f64,
    v3: f64,
}

/// `T` rows keyed by cell, then `S` rows keyed by particle.
pub fn write_maps_csv(path: &Path, t_map: &PointMap, s_map: &PointMap) -> Result<()> {
    fn rows<'a>(name: &'static str, m: &'a PointMap) -> impl Iterator<Item = MapRow> + 'a {
        m.images().iter().enumerate().map(move |(k, v)| MapRow {
            map: name.into(),
            index: k,
            v1: v[0],
            v2: v[1],
            v3: v[2],
        })
    }
    write_rows(path, rows("T", t_map).chain(rows("S", s_map)))
}

pub fn read_maps_csv(path: &Path) -> Result<(PointMap, PointMap)> {
    let rows: Vec<MapRow> = read_rows(path)?;
    let (mut t, mut s) = (Vec::new(), Vec::new());
    for r in rows {
        let dst = match r.map.as_str() {
            "T" => &mut t,
            "S" => &mut s,
            other => return Err(Error::Input(format!("{}: unknown map {other}", path.display()))),
        };
        if r.index != dst.len() {
            return Err(Error::Input(format!("{}: map rows out of order", path.display())));
        }
        dst.push([r.v1, r.v2, r.v3]);
    }
    Ok((PointMap::new(t), PointMap::new(s)))
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanRow {
    cell: usize,
    particle: usize,
    mass: f64,
}

/// Sparse plan, one row per support entry.
pub fn write_plan_csv(path: &Path, plan: &TransportPlan) -> Result<()> {
    write_rows(
        path,
        plan.entries().map(|(i, j, v)| PlanRow {
            cell: i,
            particle: j,
            mass: v,
        }),
    )
}

pub fn read_plan_csv(path: &Path, rows: usize, cols: usize) -> Result<TransportPlan> {
    let r: Vec<PlanRow> = read_rows(path)?;
    TransportPlan::from_triplets(
        rows,
        cols,
        r.into_iter().map(|p| (p.cell, p.particle, p.mass)).collect(),
    )
}

/// Per-step sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMeta {
    pub step: usize,
    pub t: f64,
    pub energy: EnergyBreakdown,
    pub el_residual: f64,
    pub iterations: usize,
    pub delta: f64,
    pub dual_domain: Option<DualDomain>,
    pub grid_lo: Vec3,
    pub grid_hi: Vec3,
    pub diagnostics: Option<DiagnosticsRecord>,
}

/// Enough to re-run the experiment: the configuration echo, its hash and
/// the tool version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub steps: usize,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, seed: u64, steps: usize, files: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            config: serde_json::from_str(&cfg.canonical_json()).expect("canonical config is json"),
            seed,
            steps,
            files,
        }
    }

    pub fn config(&self) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(self.config.clone()).map_err(|e| Error::Input(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub const MANIFEST: &str = "run_manifest.json";

pub fn step_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("step_{k:06}"))
}

pub fn write_snapshot(root: &Path, k: usize, snap: &Snapshot, domain: &PhysicalDomain, meta: &StepMeta) -> Result<()> {
    let dir = step_dir(root, k);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cloud = snap.cloud()?;
    write_cloud_csv(&dir.join("cloud.csv"), &cloud, Some(&snap.velocity))?;
    write_sigma_csv(&dir.join("sigma.csv"), domain, &snap.sigma)?;
    write_maps_csv(&dir.join("maps.csv"), &snap.t_map, &snap.s_map)?;
    write_plan_csv(&dir.join("plan.csv"), &snap.plan)?;
    write_json(&dir.join("diag.json"), meta)
}

pub fn read_snapshot(root: &Path, k: usize, domain: &PhysicalDomain) -> Result<(Snapshot, StepMeta)> {
    let dir = step_dir(root, k);
    let rows = read_cloud_rows(&dir.join("cloud.csv"))?;
    let meta: StepMeta = read_json(&dir.join("diag.json"))?;
    let sigma = read_sigma_csv(&dir.join("sigma.csv"), domain)?;
    let (t_map, s_map) = read_maps_csv(&dir.join("maps.csv"))?;
    let plan = read_plan_csv(&dir.join("plan.csv"), domain.num_cells(), rows.len())?;
    let velocity = rows
        .iter()
        .map(|r| match (r.w1, r.w2, r.w3) {
            (Some(a), Some(b), Some(c)) => Ok([a, b, c]),
            _ => Err(Error::Input(format!("{}: missing velocity", dir.display()))),
        })
        .collect::<Result<Vec<_>>>()?;
    let snap = Snapshot {
        t: meta.t,
        positions: rows.iter().map(|r| [r.y1, r.y2, r.y3]).collect(),
        weights: rows.iter().map(|r| r.weight).collect(),
        sigma,
        plan,
        t_map,
        s_map,
        velocity,
        energy: meta.energy,
        el_residual: meta.el_residual,
        iterations: meta.iterations,
    };
    Ok((snap, meta))
}

/// A run directory read back into memory.
#[derive(Debug, Clone)]
pub struct StoredRun {
    pub manifest: RunManifest,
    pub config: RunConfig,
    pub store: TrajectoryStore,
    pub meta: Vec<StepMeta>,
}

pub fn read_run(root: &Path) -> Result<StoredRun> {
    let manifest: RunManifest = read_json(&root.join(MANIFEST))?;
    let config = manifest.config()?;
    let domain: Arc<PhysicalDomain> = config.physical_domain()?;
    if manifest.steps == 0 {
        return Err(Error::Input(format!("{} holds no snapshots", root.display())));
    }
    let (first, m0) = read_snapshot(root, 0, &domain)?;
    let mut store = TrajectoryStore::new(domain.clone(), first)?;
    let mut meta = vec![m0];
    for k in 1..manifest.steps {
        let (s, m) = read_snapshot(root, k, &domain)?;
        store.push(s)?;
        meta.push(m);
    }
    Ok(StoredRun {
        manifest,
        config,
        store,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cloud_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let c = DualParticleCloud::new(vec![[0.1, 1.0 / 3.0, 1.2], [0.7, 0.2, 0.9]], vec![0.25, 0.75]).unwrap();
        write_cloud_csv(&p, &c, None).unwrap();
        assert_eq!(read_cloud_csv(&p).unwrap(), c);
    }

    #[test]
    fn plan_and_maps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let plan = TransportPlan::from_triplets(3, 2, vec![(0, 1, 0.1), (2, 0, 0.9)]).unwrap();
        write_plan_csv(&dir.path().join("p.csv"), &plan).unwrap();
        assert_eq!(read_plan_csv(&dir.path().join("p.csv"), 3, 2).unwrap(), plan);
        let t = PointMap::new(vec![[0.1, 0.2, 0.3]; 3]);
        let s = PointMap::new(vec![[1.0 / 7.0, 2.0, 3.0]; 2]);
        write_maps_csv(&dir.path().join("m.csv"), &t, &s).unwrap();
        assert_eq!(read_maps_csv(&dir.path().join("m.csv")).unwrap(), (t, s));
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = read_cloud_csv(Path::new("/nonexistent/cloud.csv")).unwrap_err();
        assert!(matches!(e, Error::Io { .. }), "{e}");
    }
}
