//! Run configuration: TOML schema, validation, hashing and initial clouds.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{Constants, GasConstants, Geopotential, KAPPA_AIR};
use crate::energy::{MinimizerOptions, SolverChoice};
use crate::error::{Error, Result};
use crate::flow::{ClampMode, IntegratorConfig, Scheme};
use crate::geometry::{DualDomain, DualParticleCloud, PhysicalDomain};
use crate::ot::exact::ExactOptions;
use crate::ot::sinkhorn::EntropicOptions;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    #[serde(default = "zero3")]
    pub lo: [f64; 3],
    #[serde(default = "one3")]
    pub hi: [f64; 3],
    pub resolution: [usize; 3],
}

fn zero3() -> [f64; 3] {
    [0.0; 3]
}

fn one3() -> [f64; 3] {
    [1.0; 3]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    UniformBox,
    GaussianBlob,
    TwoBlob,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSpec {
    /// CSV with columns `y1,y2,y3,weight`; overrides the generator.
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default = "default_generator")]
    pub generator: Generator,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "half2")]
    pub center: [f64; 2],
    /// Box half-widths, blob standard deviations.
    #[serde(default = "default_spread")]
    pub spread: [f64; 2],
    /// Distance between the blob centers along the first axis.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Vertical band parameter: `y3` must stay in `[delta, 1/delta]`.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Range of generated `y3`; defaults to the whole band.
    #[serde(default)]
    pub y3_range: Option<[f64; 2]>,
}

fn default_generator() -> Generator {
    Generator::UniformBox
}
fn default_n() -> usize {
    64
}
fn half2() -> [f64; 2] {
    [0.5, 0.5]
}
fn default_spread() -> [f64; 2] {
    [0.3, 0.3]
}
fn default_separation() -> f64 {
    0.3
}
fn default_delta() -> f64 {
    0.75
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsSpec {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default)]
    pub k1: Option<f64>,
    #[serde(default)]
    pub gas: Option<GasConstants>,
    #[serde(default)]
    pub geopotential: Geopotential,
}

fn default_kappa() -> f64 {
    KAPPA_AIR
}

impl Default for ConstantsSpec {
    fn default() -> Self {
        Self {
            kappa: KAPPA_AIR,
            k1: None,
            gas: None,
            geopotential: Geopotential::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSpec {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default = "default_clamp")]
    pub clamp: ClampMode,
    /// Speed bound used to inflate the dual domain over the horizon.
    #[serde(default = "default_speed")]
    pub speed_bound: f64,
}

fn default_dt() -> f64 {
    0.01
}
fn default_scheme() -> Scheme {
    Scheme::Heun
}
fn default_t_end() -> f64 {
    0.1
}
fn default_clamp() -> ClampMode {
    ClampMode::Auto
}
fn default_speed() -> f64 {
    1.0
}

impl Default for IntegratorSpec {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            scheme: default_scheme(),
            t_end: default_t_end(),
            clamp: default_clamp(),
            speed_bound: default_speed(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Exact,
    Entropic,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_kind")]
    pub kind: SolverKind,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_max_cells")]
    pub max_cells: usize,
    #[serde(default = "default_max_particles")]
    pub max_particles: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_entropic_tol")]
    pub entropic_tol: f64,
}

fn default_kind() -> SolverKind {
    SolverKind::Auto
}
fn default_eps() -> f64 {
    1e-3
}
fn default_max_cells() -> usize {
    ExactOptions::default().max_cells
}
fn default_max_particles() -> usize {
    ExactOptions::default().max_particles
}
fn default_tol() -> f64 {
    MinimizerOptions::default().tol
}
fn default_max_outer() -> usize {
    MinimizerOptions::default().max_outer
}
fn default_damping() -> f64 {
    MinimizerOptions::default().damping
}
fn default_entropic_tol() -> f64 {
    EntropicOptions::default().tol
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            epsilon: default_eps(),
            max_cells: default_max_cells(),
            max_particles: default_max_particles(),
            tol: default_tol(),
            max_outer: default_max_outer(),
            damping: default_damping(),
            entropic_tol: default_entropic_tol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSpec {
    /// Exponents of the histogram `L^r` norms.
    #[serde(default = "default_lr")]
    pub lr: Vec<f64>,
    /// Histogram bins per axis; by default `ceil(n^(1/3))` per axis, so
    /// there are about as many bins as particles.
    #[serde(default)]
    pub dual_grid: Option<[usize; 3]>,
    #[serde(default = "yes")]
    pub inverse_residual: bool,
    #[serde(default)]
    pub pushforward: bool,
    /// Wall-clock seconds per step; off by default since it breaks
    /// byte-identical outputs.
    #[serde(default)]
    pub timing: bool,
}

fn default_lr() -> Vec<f64> {
    vec![2.0]
}
fn yes() -> bool {
    true
}

impl DiagnosticsSpec {
    pub fn dual_grid_for(&self, particles: usize) -> [usize; 3] {
        self.dual_grid.unwrap_or_else(|| {
            let mut k = 1;
            while k * k * k < particles {
                k += 1;
            }
            [k; 3]
        })
    }
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            dual_grid: None,
            inverse_residual: true,
            pushforward: false,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    #[serde(default = "default_cloud")]
    pub cloud: CloudSpec,
    #[serde(default)]
    pub constants: ConstantsSpec,
    #[serde(default)]
    pub integrator: IntegratorSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_cloud() -> CloudSpec {
    toml::from_str("").expect("cloud defaults")
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every violation is listed in one error.
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        let d = &self.domain;
        if d.resolution.contains(&0) {
            p.push("domain.resolution entries must be positive".to_string());
        }
        if (0..3).any(|a| !(d.hi[a] > d.lo[a])) {
            p.push("domain.hi must exceed domain.lo in every coordinate".into());
        }
        let c = &self.cloud;
        if !(c.delta > 0.0 && c.delta < 1.0) {
            p.push(format!("cloud.delta must lie in (0, 1), got {}", c.delta));
        } else if let Some([a, b]) = c.y3_range {
            if !(a >= c.delta && b <= 1.0 / c.delta && a <= b) {
                p.push(format!(
                    "cloud.y3_range [{a}, {b}] must sit inside [{}, {}]",
                    c.delta,
                    1.0 / c.delta
                ));
            }
        }
        if c.file.is_none() && c.n == 0 {
            p.push("cloud.n must be positive".into());
        }
        if c.spread.iter().any(|s| !(*s >= 0.0)) {
            p.push("cloud.spread must be nonnegative".into());
        }
        if let Err(e) = self.constants() {
            p.push(e.to_string());
        }
        let i = &self.integrator;
        if !(i.dt > 0.0 && i.dt.is_finite()) {
            p.push(format!("integrator.dt must be positive, got {}", i.dt));
        }
        if !(i.t_end >= 0.0 && i.t_end.is_finite()) {
            p.push(format!("integrator.t_end must be nonnegative, got {}", i.t_end));
        }
        if !(i.speed_bound >= 0.0) {
            p.push("integrator.speed_bound must be nonnegative".into());
        }
        let s = &self.solver;
        if !(s.epsilon > 0.0) {
            p.push("solver.epsilon must be positive".into());
        }
        if !(s.tol > 0.0) || !(s.entropic_tol > 0.0) {
            p.push("solver tolerances must be positive".into());
        }
        if !(s.damping > 0.0 && s.damping <= 1.0) {
            p.push(format!("solver.damping must lie in (0, 1], got {}", s.damping));
        }
        let g = &self.diagnostics;
        if g.lr.iter().any(|r| !(*r >= 1.0)) {
            p.push("diagnostics.lr exponents must be at least 1".into());
        }
        if g.dual_grid.is_some_and(|r| r.contains(&0)) {
            p.push("diagnostics.dual_grid entries must be positive".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    /// Sorted-key JSON of the (defaults-filled) configuration.
    pub fn canonical_json(&self) -> String {
        // serde_json maps are ordered, so the output is independent of the
        // order keys appeared in the file
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn constants(&self) -> Result<Constants> {
        let c = &self.constants;
        Constants::new(c.kappa, c.k1, c.gas)
    }

    pub fn physical_domain(&self) -> Result<Arc<PhysicalDomain>> {
        Ok(Arc::new(PhysicalDomain::new(
            self.domain.lo,
            self.domain.hi,
            self.domain.resolution,
        )?))
    }

    pub fn minimizer_options(&self) -> MinimizerOptions {
        let s = &self.solver;
        MinimizerOptions {
            damping: s.damping,
            tol: s.tol,
            max_outer: s.max_outer,
            solver: match s.kind {
                SolverKind::Exact => SolverChoice::Exact,
                SolverKind::Entropic => SolverChoice::Entropic { epsilon: s.epsilon },
                SolverKind::Auto => SolverChoice::Auto { epsilon: s.epsilon },
            },
            exact: ExactOptions {
                max_cells: s.max_cells,
                max_particles: s.max_particles,
            },
            entropic: EntropicOptions {
                tol: s.entropic_tol,
                ..Default::default()
            },
        }
    }

    pub fn integrator_config(&self, cloud0: &DualParticleCloud) -> Result<IntegratorConfig> {
        let i = &self.integrator;
        let mut clamp = DualDomain::from_cloud(cloud0, i.speed_bound, i.t_end)?;
        // the configured band is the one particles are promised to respect
        clamp.delta = clamp.delta.min(self.cloud.delta);
        let cfg = IntegratorConfig {
            dt: i.dt,
            scheme: i.scheme,
            t_end: i.t_end,
            clamp,
            clamp_mode: i.clamp,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_toml_str(&text)?;
    if let (Some(f), Some(dir)) = (&cfg.cloud.file, path.parent()) {
        if f.is_relative() {
            cfg.cloud.file = Some(dir.join(f));
        }
    }
    Ok(cfg)
}

/// Reproducible initial cloud; uniform weights.
pub fn generate_initial_cloud(spec: &CloudSpec, seed: u64) -> Result<DualParticleCloud> {
    if !(spec.delta > 0.0 && spec.delta < 1.0) {
        return Err(Error::Parameter(format!(
            "band parameter delta must lie in (0, 1), got {}",
            spec.delta
        )));
    }
    let [y3lo, y3hi] = spec.y3_range.unwrap_or([spec.delta, 1.0 / spec.delta]);
    if !(y3lo >= spec.delta && y3hi <= 1.0 / spec.delta && y3lo <= y3hi) {
        return Err(Error::Parameter(format!("y3 range [{y3lo}, {y3hi}] leaves the band")));
    }
    if spec.n == 0 {
        return Err(Error::Parameter("particle count must be positive".into()));
    }
    let mid = 0.5 * (y3lo + y3hi);
    if spec.n == 1 {
        return DualParticleCloud::uniform(vec![[spec.center[0], spec.center[1], mid]]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y3 = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let normal = |s: f64| Normal::new(0.0, s).map_err(|e| Error::Parameter(e.to_string()));
    let [sx, sy] = spec.spread;
    let positions = match spec.generator {
        Generator::UniformBox => (0..spec.n)
            .map(|_| {
                let x = spec.center[0] + if sx > 0.0 { rng.random_range(-sx..=sx) } else { 0.0 };
                let y = spec.center[1] + if sy > 0.0 { rng.random_range(-sy..=sy) } else { 0.0 };
                [x, y, y3(&mut rng, y3lo, y3hi)]
            })
            .collect(),
        Generator::GaussianBlob => {
            let (nx, ny) = (normal(sx)?, normal(sy)?);
            (0..spec.n)
                .map(|_| {
                    let x = spec.center[0] + nx.sample(&mut rng);
                    let y = spec.center[1] + ny.sample(&mut rng);
                    [x, y, y3(&mut rng, y3lo, y3hi)]
                })
                .collect()
        }
        Generator::TwoBlob => {
            // cold blob low in the band on the left, warm blob high on the right
            let (nx, ny) = (normal(sx)?, normal(sy)?);
            (0..spec.n)
                .map(|k| {
                    let side = if k % 2 == 0 { -0.5 } else { 0.5 };
                    let x = spec.center[0] + side * spec.separation + nx.sample(&mut rng);
                    let y = spec.center[1] + ny.sample(&mut rng);
                    let z = if side < 0.0 {
                        y3(&mut rng, y3lo, mid)
                    } else {
                        y3(&mut rng, mid, y3hi)
                    };
                    [x, y, z]
                })
                .collect()
        }
    };
    DualParticleCloud::uniform(positions)
}

/// The configured cloud: the file when given, otherwise the generator.
pub fn initial_cloud(cfg: &RunConfig, seed_override: Option<u64>) -> Result<DualParticleCloud> {
    let cloud = match &cfg.cloud.file {
        Some(path) => crate::io::read_cloud_csv(path)?,
        None => generate_initial_cloud(&cfg.cloud, seed_override.unwrap_or(cfg.cloud.seed))?,
    };
    cloud.check_band(cfg.cloud.delta)?;
    Ok(cloud)
}
