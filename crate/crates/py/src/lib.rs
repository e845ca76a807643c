//! Python bindings: plant model, equilibrium solver, estimator, simulation
//! and the main verification checks.

use std::path::PathBuf;

use fcpbc::sim::{FloatFormat, SimTrace as CoreTrace, TRACE_COLUMNS};
use fcpbc::verify;
use fcpbc::{ControlInput, ControllerMode, Integrator, SetpointSpec, SimConfig};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyKeyError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(fcpbc_py, FcpbcError, PyException);
create_exception!(fcpbc_py, NoRootError, FcpbcError);
create_exception!(fcpbc_py, InfeasibleInputError, FcpbcError);
create_exception!(fcpbc_py, NumericalBlowupError, FcpbcError);

fn to_py(e: fcpbc::Error) -> PyErr {
    use fcpbc::Error as E;
    let msg = e.to_string();
    match e {
        E::NoRoot { .. } => NoRootError::new_err(msg),
        E::InfeasibleInput { .. } => InfeasibleInputError::new_err(msg),
        E::NumericalBlowup { .. } => NumericalBlowupError::new_err(msg),
        E::InvalidParameter(_) | E::Domain { .. } => PyValueError::new_err(msg),
        _ => FcpbcError::new_err(msg),
    }
}

fn state(x: (f64, f64, f64)) -> fcpbc::PlantState {
    fcpbc::PlantState::new(x.0, x.1, x.2)
}

/// Fuel-cell polarization curve `I = ((E - v)/θ_s1)^(1/θ_s2)`.
#[pyclass(name = "FcCurve", from_py_object)]
#[derive(Clone)]
pub struct PyFcCurve {
    inner: fcpbc::FcCurve,
}

#[pymethods]
impl PyFcCurve {
    #[new]
    #[pyo3(signature = (e_oc = 38.84, theta_s1 = 0.984, theta_s2 = 0.865))]
    fn new(e_oc: f64, theta_s1: f64, theta_s2: f64) -> PyResult<Self> {
        Ok(PyFcCurve { inner: fcpbc::FcCurve::new(e_oc, theta_s1, theta_s2).map_err(to_py)? })
    }

    #[getter]
    fn e_oc(&self) -> f64 {
        self.inner.e_oc
    }
    #[getter]
    fn theta_s1(&self) -> f64 {
        self.inner.theta_s1
    }
    #[getter]
    fn theta_s2(&self) -> f64 {
        self.inner.theta_s2
    }

    fn current(&self, v_fc: f64) -> PyResult<f64> {
        self.inner.current(v_fc).map_err(to_py)
    }

    fn slope(&self, v_fc: f64) -> PyResult<f64> {
        self.inner.slope(v_fc).map_err(to_py)
    }

    fn voltage(&self, i_fc: f64) -> f64 {
        self.inner.voltage(i_fc)
    }

    fn monotonicity_constant(&self, v_lo: f64, v_hi: f64) -> PyResult<f64> {
        self.inner.monotonicity_constant(v_lo, v_hi).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("FcCurve(e_oc={}, theta_s1={}, theta_s2={})", self.inner.e_oc, self.inner.theta_s1, self.inner.theta_s2)
    }
}

#[pyclass(name = "PlantParams", from_py_object)]
#[derive(Clone)]
pub struct PyPlantParams {
    inner: fcpbc::PlantParams,
}

#[pymethods]
impl PyPlantParams {
    #[new]
    #[pyo3(signature = (c_fc, l, c, theta_r1, theta_r2, curve = None))]
    fn new(c_fc: f64, l: f64, c: f64, theta_r1: f64, theta_r2: f64, curve: Option<PyFcCurve>) -> PyResult<Self> {
        let curve = curve.map_or_else(fcpbc::FcCurve::bench, |c| c.inner);
        Ok(PyPlantParams { inner: fcpbc::PlantParams::new(c_fc, l, c, theta_r1, theta_r2, curve).map_err(to_py)? })
    }

    /// Table I converter with the parasitic resistance only.
    #[staticmethod]
    fn nominal(theta_r2: f64) -> Self {
        PyPlantParams { inner: fcpbc::PlantParams::nominal(theta_r2) }
    }

    /// Table I converter with the lumped resistance of the experiments.
    #[staticmethod]
    fn lumped(theta_r2: f64) -> Self {
        PyPlantParams { inner: fcpbc::PlantParams::lumped(theta_r2) }
    }

    #[getter]
    fn c_fc(&self) -> f64 {
        self.inner.c_fc
    }
    #[getter]
    fn l(&self) -> f64 {
        self.inner.l
    }
    #[getter]
    fn c(&self) -> f64 {
        self.inner.c
    }
    #[getter]
    fn theta_r1(&self) -> f64 {
        self.inner.theta_r1
    }
    #[getter]
    fn theta_r2(&self) -> f64 {
        self.inner.theta_r2
    }
    #[getter]
    fn curve(&self) -> PyFcCurve {
        PyFcCurve { inner: self.inner.curve }
    }

    /// `ẋ` at state `(x1, x2, x3)` under input `u`.
    fn derivative(&self, x: (f64, f64, f64), u: f64) -> PyResult<(f64, f64, f64)> {
        let u = ControlInput::new(u).map_err(to_py)?;
        let d = fcpbc::model::plant_derivative(&self.inner, &state(x), u).map_err(to_py)?;
        Ok((d.x1, d.x2, d.x3))
    }

    fn storage(&self, x: (f64, f64, f64)) -> f64 {
        self.inner.storage(&state(x))
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!("PlantParams(c_fc={}, l={}, c={}, theta_r1={}, theta_r2={})", p.c_fc, p.l, p.c, p.theta_r1, p.theta_r2)
    }
}

#[pyclass(name = "EquilibriumPoint", skip_from_py_object)]
#[derive(Clone)]
pub struct PyEquilibrium {
    inner: fcpbc::EquilibriumPoint,
}

#[pymethods]
impl PyEquilibrium {
    #[getter]
    fn x_star(&self) -> (f64, f64, f64) {
        let x = self.inner.x_star;
        (x.x1, x.x2, x.x3)
    }
    #[getter]
    fn u_star(&self) -> f64 {
        self.inner.u_star.value()
    }
    #[getter]
    fn residual(&self) -> f64 {
        self.inner.residual
    }
    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }
    #[getter]
    fn multiple_roots(&self) -> bool {
        self.inner.diagnostics.multiple_roots
    }
    #[getter]
    fn degenerate(&self) -> bool {
        self.inner.diagnostics.degenerate
    }

    fn __repr__(&self) -> String {
        let x = self.inner.x_star;
        format!("EquilibriumPoint(x1={}, x2={}, x3={}, u={})", x.x1, x.x2, x.x3, self.inner.u_star.value())
    }
}

/// Smallest positive equilibrium for the given parameter vector.
#[pyfunction]
#[pyo3(signature = (theta_r1, theta_r2, x3_ref, theta_s1 = 0.984, theta_s2 = 0.865, e_oc = 38.84, guess = None))]
fn solve_equilibrium(
    theta_r1: f64,
    theta_r2: f64,
    x3_ref: f64,
    theta_s1: f64,
    theta_s2: f64,
    e_oc: f64,
    guess: Option<f64>,
) -> PyResult<PyEquilibrium> {
    let theta = fcpbc::Theta::new(theta_r1, theta_r2, theta_s1, theta_s2, e_oc);
    let spec = SetpointSpec::new(x3_ref).map_err(to_py)?;
    Ok(PyEquilibrium { inner: fcpbc::solve_equilibrium(&theta, spec, guess).map_err(to_py)? })
}

/// Online estimator with the default configuration for a plant.
#[pyclass(name = "Estimator", skip_from_py_object)]
pub struct PyEstimator {
    inner: fcpbc::Estimator,
    state: Option<fcpbc::EstimatorState>,
}

#[pymethods]
impl PyEstimator {
    #[new]
    #[pyo3(signature = (gamma = None, k1 = None, k2 = None, lambda_ = None))]
    fn new(gamma: Option<f64>, k1: Option<f64>, k2: Option<f64>, lambda_: Option<f64>) -> PyResult<Self> {
        let mut cfg = fcpbc::EstimatorConfig::default();
        let g = &mut cfg.gains;
        g.gamma = gamma.unwrap_or(g.gamma);
        g.k1 = k1.unwrap_or(g.k1);
        g.k2 = k2.unwrap_or(g.k2);
        g.lambda = lambda_.unwrap_or(g.lambda);
        Ok(PyEstimator { inner: fcpbc::Estimator::new(cfg).map_err(to_py)?, state: None })
    }

    /// Starts from the prior at the first measurement.
    fn reset(&mut self, x: (f64, f64, f64), i_fc: f64) {
        self.state = Some(self.inner.init(&state(x), i_fc));
    }

    /// One step with the current measurement and the previously applied input.
    /// Returns `(theta_r1, theta_r2, theta_s1, theta_s2)`.
    fn step(&mut self, x: (f64, f64, f64), i_fc: f64, u_prev: f64, dt: f64) -> PyResult<(f64, f64, f64, f64)> {
        let es = self.state.ok_or_else(|| PyValueError::new_err("call reset() first"))?;
        let (step, next) = self.inner.step(&es, &state(x), i_fc, ControlInput::unchecked(u_prev), dt);
        self.state = Some(next);
        let e = step.estimate;
        Ok((e.theta_r1, e.theta_r2, e.theta_s1, e.theta_s2))
    }

    #[getter]
    fn estimate(&self) -> Option<(f64, f64, f64, f64)> {
        self.state.map(|s| (s.estimate.theta_r1, s.estimate.theta_r2, s.estimate.theta_s1, s.estimate.theta_s2))
    }
}

/// Simulation trace with named columns.
#[pyclass(name = "SimTrace", skip_from_py_object)]
pub struct PySimTrace {
    inner: CoreTrace,
    /// Error text when the run stopped early.
    #[pyo3(get)]
    error: Option<String>,
}

fn column_of(t: &CoreTrace, name: &str) -> Option<Vec<f64>> {
    let f: fn(&fcpbc::sim::TraceRecord) -> f64 = match name {
        "t" => |r| r.t,
        "x1" => |r| r.x1,
        "x2" => |r| r.x2,
        "x3" => |r| r.x3,
        "i_fc" => |r| r.i_fc,
        "u_unsat" => |r| r.u_unsat,
        "u" => |r| r.u,
        "x_c" => |r| r.x_c,
        "x3_ref" => |r| r.x3_ref,
        "x2_ref" => |r| r.x2_ref,
        "x1_ref" => |r| r.x1_ref,
        "theta_r1_hat" => |r| r.theta_r1_hat,
        "theta_r2_hat" => |r| r.theta_r2_hat,
        "theta_s1_hat" => |r| r.theta_s1_hat,
        "theta_s2_hat" => |r| r.theta_s2_hat,
        "Y" => |r| r.y,
        "phi" => |r| r.phi,
        "solver_iterations" => |r| r.solver_iterations as f64,
        "flags" => |r| r.flags.bits() as f64,
        _ => return None,
    };
    Some(t.records.iter().map(f).collect())
}

#[pymethods]
impl PySimTrace {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[staticmethod]
    fn columns() -> Vec<&'static str> {
        TRACE_COLUMNS.to_vec()
    }

    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        column_of(&self.inner, name).ok_or_else(|| PyKeyError::new_err(name.to_string()))
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for c in TRACE_COLUMNS {
            d.set_item(c, column_of(&self.inner, c).expect("known column"))?;
        }
        Ok(d)
    }

    #[pyo3(signature = (path, exact = false))]
    fn write_csv(&self, path: PathBuf, exact: bool) -> PyResult<()> {
        let fmt = if exact { FloatFormat::RoundTrip } else { FloatFormat::Significant9 };
        self.inner.write_csv_file(&path, fmt).map_err(to_py)
    }

    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        let f = std::fs::File::open(&path).map_err(|e| to_py(e.into()))?;
        Ok(PySimTrace { inner: CoreTrace::read_csv(std::io::BufReader::new(f)).map_err(to_py)?, error: None })
    }
}

fn parse_mode(s: &str) -> PyResult<ControllerMode> {
    match s {
        "full-info" => Ok(ControllerMode::FullInfo),
        "adaptive" => Ok(ControllerMode::Adaptive),
        "open-loop" => Ok(ControllerMode::OpenLoop),
        _ => Err(PyValueError::new_err(format!("unknown controller {s:?}"))),
    }
}

/// Closed-loop simulation of a preset scenario on the lumped plant.
///
/// A numerical blowup raises `NumericalBlowupError` unless `allow_failure`
/// is set, in which case the partial trace is returned with `error` filled.
#[pyfunction]
#[pyo3(signature = (scenario = "load-pulse", controller = "adaptive", dt = 1e-4, duration = 5.0, plant_substeps = 100, rk4 = false, saturate = true, allow_failure = false))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    py: Python<'_>,
    scenario: &str,
    controller: &str,
    dt: f64,
    duration: f64,
    plant_substeps: usize,
    rk4: bool,
    saturate: bool,
    allow_failure: bool,
) -> PyResult<PySimTrace> {
    let sc = fcpbc::ScenarioSpec::preset(scenario, duration)
        .ok_or_else(|| PyValueError::new_err(format!("unknown scenario {scenario:?}")))?;
    let mut cfg = SimConfig {
        dt,
        duration,
        plant_substeps,
        integrator: if rk4 { Integrator::Rk4Reference } else { Integrator::Euler },
        mode: parse_mode(controller)?,
        plant: fcpbc::PlantParams::lumped(sc.load.points[0].1),
        ..SimConfig::default()
    };
    if !saturate {
        cfg.saturation = None;
    }
    let result = py.detach(|| fcpbc::run_simulation(&cfg, &sc));
    match result {
        Ok(t) => Ok(PySimTrace { inner: t, error: None }),
        Err(f) if allow_failure => Ok(PySimTrace { inner: f.partial, error: Some(f.error.to_string()) }),
        Err(f) => Err(to_py(f.error)),
    }
}

/// Monte Carlo strong-monotonicity check. Returns `(alpha, violations, worst_ratio)`.
#[pyfunction]
#[pyo3(signature = (curve, lo, hi, pairs = 100_000, seed = 2024))]
fn check_monotonicity(curve: PyFcCurve, lo: f64, hi: f64, pairs: usize, seed: u64) -> PyResult<(f64, usize, f64)> {
    let r = verify::check_monotonicity(&curve.inner, lo, hi, pairs, seed).map_err(to_py)?;
    Ok((r.alpha, r.violations, r.worst_ratio))
}

/// Largest certificate ε on the search grid, or `None` when none exists.
#[pyfunction]
#[pyo3(signature = (plant, x3_ref = 48.0, u_min = 0.05, u_max = 0.95, kp = 19e-6, ki = 0.28))]
fn find_epsilon_certificate(plant: PyPlantParams, x3_ref: f64, u_min: f64, u_max: f64, kp: f64, ki: f64) -> PyResult<Option<f64>> {
    let p = plant.inner;
    let theta = fcpbc::Theta::from_plant(&p);
    let eq = fcpbc::solve_equilibrium(&theta, SetpointSpec::new(x3_ref).map_err(to_py)?, None).map_err(to_py)?;
    let gains = fcpbc::ControllerGains::new(kp, ki).map_err(to_py)?;
    let alpha = p.curve.monotonicity_constant(0.5 * eq.x_star.x1, 0.99 * p.curve.e_oc).map_err(to_py)?;
    match verify::find_epsilon_certificate(&eq, &p, &gains, alpha, (u_min, u_max), 19) {
        Ok(c) => Ok(c.epsilon_found),
        Err(fcpbc::Error::NoCertificate) => Ok(None),
        Err(e) => Err(to_py(e)),
    }
}

#[pymodule]
pub fn fcpbc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", fcpbc::VERSION)?;
    m.add("FcpbcError", m.py().get_type::<FcpbcError>())?;
    m.add("NoRootError", m.py().get_type::<NoRootError>())?;
    m.add("InfeasibleInputError", m.py().get_type::<InfeasibleInputError>())?;
    m.add("NumericalBlowupError", m.py().get_type::<NumericalBlowupError>())?;
    m.add_class::<PyFcCurve>()?;
    m.add_class::<PyPlantParams>()?;
    m.add_class::<PyEquilibrium>()?;
    m.add_class::<PyEstimator>()?;
    m.add_class::<PySimTrace>()?;
    m.add_function(wrap_pyfunction!(solve_equilibrium, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(check_monotonicity, m)?)?;
    m.add_function(wrap_pyfunction!(find_epsilon_certificate, m)?)?;
    Ok(())
}
