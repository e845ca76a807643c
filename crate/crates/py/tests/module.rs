use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyDict>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = wrap_pymodule!(fcpbc_py::fcpbc_py)(py);
        let g = PyDict::new(py);
        g.set_item("fcpbc_py", m).unwrap();
        f(py, &g);
    });
}

fn run(py: Python<'_>, g: &Bound<'_, PyDict>, code: &std::ffi::CStr) {
    if let Err(e) = py.run(code, Some(g), None) {
        e.print(py);
        panic!("python code failed");
    }
}

#[test]
fn equilibrium_and_errors_through_python() {
    with_module(|py, g| {
        run(
            py,
            g,
            c"
eq = fcpbc_py.solve_equilibrium(0.54231, 0.09085, 48.0)
x1, x2, x3 = eq.x_star
assert abs(x2 - 7.11) / 7.11 < 0.015, x2
assert abs(eq.u_star - (x1 - 0.54231 * x2) / x3) < 1e-9
try:
    fcpbc_py.solve_equilibrium(0.5, 2.0, 48.0)
    raise AssertionError('expected NoRootError')
except fcpbc_py.NoRootError:
    pass
try:
    fcpbc_py.FcCurve(38.84, -1.0, 0.865)
    raise AssertionError('expected ValueError')
except ValueError:
    pass
",
        );
    });
}

#[test]
fn simulation_and_checks_through_python() {
    with_module(|py, g| {
        run(
            py,
            g,
            c"
tr = fcpbc_py.simulate('vref-pulse', 'adaptive', duration=0.6)
assert len(tr) == 6001
x3 = tr.column('x3')
assert abs(x3[-1] - 38.0) / 38.0 < 0.01, x3[-1]
d = tr.to_dict()
assert list(d.keys()) == fcpbc_py.SimTrace.columns()
alpha, violations, worst = fcpbc_py.check_monotonicity(fcpbc_py.FcCurve(), 17.0, 38.4, 2000)
assert violations == 0 and worst >= 1.0
eps = fcpbc_py.find_epsilon_certificate(fcpbc_py.PlantParams.nominal(0.09015))
assert eps is not None and eps > 0
est = fcpbc_py.Estimator()
est.reset((33.5, 7.0, 48.0), 7.0)
for _ in range(10):
    th = est.step((33.5, 7.0, 48.0), 7.0, 0.6, 1e-4)
assert est.estimate == th
",
        );
    });
}
