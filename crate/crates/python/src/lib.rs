//! Python bindings: single solves, minimization, full runs and the checks.
//!
//! Arrays cross the boundary as nested lists of floats.

use std::path::PathBuf;
use std::sync::Arc;

use geodual_core::config::{parse_config, RunConfig};
use geodual_core::cost::{self, Constants, Geopotential};
use geodual_core::energy::{Minimizer, MinimizerOptions, SolverChoice};
use geodual_core::geometry::{DualParticleCloud, PhysicalDomain, Vec3};
use geodual_core::ot::exact::{solve_exact, ExactOptions};
use geodual_core::ot::{solve_entropic, CostMatrix, EntropicOptions};
use geodual_core::{hamiltonian, pipeline, Error, ErrorClass};
use pyo3::exceptions::{PyMemoryError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Config => PyValueError::new_err(e.to_string()),
        ErrorClass::Capacity => PyMemoryError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn cloud(positions: Vec<Vec3>, weights: Option<Vec<f64>>) -> PyResult<DualParticleCloud> {
    match weights {
        Some(w) => DualParticleCloud::new(positions, w),
        None => DualParticleCloud::uniform(positions),
    }
    .map_err(err)
}

fn load(config: PathBuf, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut cfg = parse_config(&config).map_err(err)?;
    if let Some(s) = seed {
        cfg.cloud.seed = s;
    }
    Ok(cfg)
}

/// `c(x, y) = (|x_h - y_h|^2 / 2 + g x3) / y3`
#[pyfunction]
#[pyo3(signature = (x, y, g = 1.0))]
fn transport_cost(x: Vec3, y: Vec3, g: f64) -> PyResult<f64> {
    cost::cost(x, y, &Geopotential::Linear { g }).map_err(err)
}

#[pyfunction]
fn jtilde(v: Vec3, y: Vec3) -> Vec3 {
    hamiltonian::jtilde(v, y)
}

/// Validates a TOML config and returns its hash.
#[pyfunction]
fn config_hash(text: &str) -> PyResult<String> {
    Ok(RunConfig::from_toml_str(text).map_err(err)?.hash())
}

/// Balanced transport between `masses` and `weights`; exact unless `epsilon` is given.
#[pyfunction]
#[pyo3(signature = (masses, weights, cost_rows, epsilon = None))]
fn solve_ot<'py>(
    py: Python<'py>,
    masses: Vec<f64>,
    weights: Vec<f64>,
    cost_rows: Vec<Vec<f64>>,
    epsilon: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let c = CostMatrix::from_rows(&cost_rows).map_err(err)?;
    let sol = py
        .detach(|| match epsilon {
            None => solve_exact(&masses, &weights, &c, &ExactOptions::default()),
            Some(eps) => solve_entropic(&masses, &weights, &c, eps, &EntropicOptions::default()),
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("plan", sol.plan.to_dense())?;
    d.set_item("f", sol.potentials.f.clone())?;
    d.set_item("g", sol.potentials.g.clone())?;
    d.set_item("total_cost", sol.total_cost)?;
    d.set_item("dual_value", sol.potentials.dual_value(&masses, &weights))?;
    Ok(d)
}

/// Minimal-energy density on the unit cube split into `resolution^3` cells.
#[pyfunction]
#[pyo3(signature = (positions, weights = None, resolution = 8, kappa = 1.4, epsilon = None))]
fn minimize<'py>(
    py: Python<'py>,
    positions: Vec<Vec3>,
    weights: Option<Vec<f64>>,
    resolution: usize,
    kappa: f64,
    epsilon: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let c = cloud(positions, weights)?;
    let solver = match epsilon {
        None => SolverChoice::Exact,
        Some(epsilon) => SolverChoice::Entropic { epsilon },
    };
    let report = py
        .detach(|| {
            let domain = Arc::new(PhysicalDomain::unit_cube(resolution)?);
            let constants = Constants::new(kappa, None, None)?;
            let opts = MinimizerOptions {
                solver,
                ..Default::default()
            };
            Minimizer::new(domain, Geopotential::default(), constants, opts)?.minimize(&c, None)
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("energy", report.energy.total)?;
    d.set_item("transport_term", report.energy.transport_term)?;
    d.set_item("internal_term", report.energy.internal_term)?;
    d.set_item("sigma", report.sigma.values().to_vec())?;
    d.set_item("s_map", report.s_map.images().to_vec())?;
    d.set_item("el_residual", report.el_residual)?;
    d.set_item("iterations", report.iterations)?;
    d.set_item("converged", report.converged)?;
    Ok(d)
}

/// Full run from a config file; returns the manifest fields and the largest H drift.
#[pyfunction]
#[pyo3(signature = (config, out, seed = None))]
fn run<'py>(py: Python<'py>, config: PathBuf, out: PathBuf, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = load(config, seed)?;
    let r = py.detach(|| pipeline::execute_run(&cfg, &out, None)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("config_hash", r.manifest.config_hash.clone())?;
    d.set_item("steps", r.manifest.steps)?;
    d.set_item("times", r.simulation.store.times())?;
    d.set_item("energy", r.log.iter().map(|x| x.h).collect::<Vec<_>>())?;
    d.set_item("max_h_drift", geodual_core::flow::max_h_drift(&r.log))?;
    Ok(d)
}

/// Finite-difference check of the superdifferential on the configured cloud.
#[pyfunction]
#[pyo3(signature = (config, seed = None))]
fn verify_superdiff<'py>(py: Python<'py>, config: PathBuf, seed: Option<u64>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = load(config, seed)?;
    let r = py.detach(|| pipeline::verify_superdiff(&cfg, None)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("analytic", r.analytic)?;
    d.set_item("relative_error", r.smallest_step_rel_error())?;
    d.set_item("identity_residual", r.identity_residual)?;
    d.set_item("passes", pipeline::superdiff_passes(&r))?;
    Ok(d)
}

#[pymodule]
fn geodual(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(transport_cost, m)?)?;
    m.add_function(wrap_pyfunction!(jtilde, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(solve_ot, m)?)?;
    m.add_function(wrap_pyfunction!(minimize, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(verify_superdiff, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
