//! Averaged fuel-cell + boost converter plant.
//!
//! State `x = (v_fc, i_L, v_o)`, input `u = 1 - D`. The fuel cell enters
//! through its polarization curve `i_fc = ((E_oc - v_fc) / θ_s1)^(1/θ_s2)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::presets;

/// Floor applied to the curve argument so the log-domain evaluation never
/// sees 0.
const CURVE_ARG_FLOOR: f64 = 1e-12;

/// Power-function polarization curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FcCurve {
    pub e_oc: f64,
    pub theta_s1: f64,
    pub theta_s2: f64,
}

impl FcCurve {
    pub fn new(e_oc: f64, theta_s1: f64, theta_s2: f64) -> Result<Self> {
        let curve = FcCurve { e_oc, theta_s1, theta_s2 };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("e_oc", self.e_oc), ("theta_s1", self.theta_s1), ("theta_s2", self.theta_s2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Curve averaged from the bench reference-pulsing run.
    pub fn bench() -> Self {
        FcCurve { e_oc: presets::E_OC, theta_s1: presets::THETA_S1, theta_s2: presets::THETA_S2 }
    }

    fn check_domain(&self, v_fc: f64) -> Result<()> {
        if !(v_fc >= 0.0 && v_fc <= self.e_oc) {
            return Err(Error::Domain { v_fc, e_oc: self.e_oc });
        }
        Ok(())
    }

    /// Fuel-cell current `I_fc(v_fc)`. Exactly 0 at `v_fc = E_oc`.
    pub fn current(&self, v_fc: f64) -> Result<f64> {
        self.check_domain(v_fc)?;
        if v_fc == self.e_oc {
            return Ok(0.0);
        }
        let arg = ((self.e_oc - v_fc) / self.theta_s1).max(CURVE_ARG_FLOOR);
        Ok((arg.ln() / self.theta_s2).exp())
    }

    /// `d(-I_fc)/dv_fc`, strictly positive inside the domain.
    pub fn slope(&self, v_fc: f64) -> Result<f64> {
        self.check_domain(v_fc)?;
        if v_fc == self.e_oc {
            return Err(Error::Domain { v_fc, e_oc: self.e_oc });
        }
        let arg = ((self.e_oc - v_fc) / self.theta_s1).max(CURVE_ARG_FLOOR);
        let exponent = 1.0 / self.theta_s2 - 1.0;
        Ok((exponent * arg.ln()).exp() / (self.theta_s1 * self.theta_s2))
    }

    /// Fuel-cell voltage delivering current `i_fc`: `E_oc - θ_s1 i_fc^θ_s2`.
    pub fn voltage(&self, i_fc: f64) -> f64 {
        self.e_oc - self.theta_s1 * i_fc.max(0.0).powf(self.theta_s2)
    }

    /// Strong-monotonicity constant of `-I_fc` on `[v_lo, v_hi]`.
    ///
    /// The slope is a power of `E_oc - v` with exponent `1/θ_s2 - 1`, so it is
    /// monotone in `v` and the minimum sits at one of the endpoints.
    pub fn monotonicity_constant(&self, v_lo: f64, v_hi: f64) -> Result<f64> {
        if !(v_lo >= 0.0 && v_lo < v_hi && v_hi < self.e_oc) {
            return Err(Error::InvalidParameter(format!(
                "monotonicity interval [{v_lo}, {v_hi}] must satisfy 0 <= lo < hi < E_oc = {}",
                self.e_oc
            )));
        }
        let alpha = self.slope(v_lo)?.min(self.slope(v_hi)?);
        #[cfg(debug_assertions)]
        {
            let n = 1000;
            for k in 0..=n {
                let v = v_lo + (v_hi - v_lo) * k as f64 / n as f64;
                let s = self.slope(v)?;
                debug_assert!(s >= alpha * (1.0 - 1e-12), "slope {s} below endpoint minimum {alpha} at {v}");
            }
        }
        Ok(alpha)
    }
}

/// Physical constants of the plant. `theta_r1` is the series loss resistance
/// `R_p`, `theta_r2` the load conductance `1/R_L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub c_fc: f64,
    pub l: f64,
    pub c: f64,
    pub theta_r1: f64,
    pub theta_r2: f64,
    pub curve: FcCurve,
}

impl PlantParams {
    pub fn new(c_fc: f64, l: f64, c: f64, theta_r1: f64, theta_r2: f64, curve: FcCurve) -> Result<Self> {
        let p = PlantParams { c_fc, l, c, theta_r1, theta_r2, curve };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_fc", self.c_fc),
            ("l", self.l),
            ("c", self.c),
            ("theta_r1", self.theta_r1),
            ("theta_r2", self.theta_r2),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        self.curve.validate()
    }

    /// Nominal table values with the given load conductance.
    pub fn nominal(theta_r2: f64) -> Self {
        PlantParams {
            c_fc: presets::C_FC,
            l: presets::L,
            c: presets::C,
            theta_r1: presets::THETA_R1,
            theta_r2,
            curve: FcCurve::bench(),
        }
    }

    /// Plant used by the scenario presets: nominal passives with the lumped
    /// series loss resistance identified on the bench.
    pub fn lumped(theta_r2: f64) -> Self {
        PlantParams { theta_r1: presets::THETA_R1_LUMPED, ..Self::nominal(theta_r2) }
    }

    pub fn with_load(mut self, theta_r2: f64) -> Self {
        self.theta_r2 = theta_r2;
        self
    }

    pub fn q_diag(&self) -> [f64; 3] {
        [self.c_fc, self.l, self.c]
    }

    /// Stored energy `½ xᵀ Q x`.
    pub fn storage(&self, x: &PlantState) -> f64 {
        0.5 * (self.c_fc * x.x1 * x.x1 + self.l * x.x2 * x.x2 + self.c * x.x3 * x.x3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
}

impl PlantState {
    pub const fn new(x1: f64, x2: f64, x3: f64) -> Self {
        PlantState { x1, x2, x3 }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x1, self.x2, self.x3]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        PlantState { x1: a[0], x2: a[1], x3: a[2] }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x1, self.x2, self.x3)
    }

    /// `self + h * d`.
    pub fn add_scaled(&self, d: &PlantState, h: f64) -> PlantState {
        PlantState { x1: self.x1 + h * d.x1, x2: self.x2 + h * d.x2, x3: self.x3 + h * d.x3 }
    }

    pub fn sub(&self, other: &PlantState) -> PlantState {
        PlantState { x1: self.x1 - other.x1, x2: self.x2 - other.x2, x3: self.x3 - other.x3 }
    }

    pub fn norm(&self) -> f64 {
        (self.x1 * self.x1 + self.x2 * self.x2 + self.x3 * self.x3).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite() && self.x3.is_finite()
    }

    /// Standing physical assumptions: `0 <= v_fc < E_oc` and `v_o >= 0`.
    pub fn is_physical(&self, curve: &FcCurve) -> bool {
        self.x1 >= 0.0 && self.x1 < curve.e_oc && self.x3 >= 0.0
    }
}

/// Converter input `u = 1 - D`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ControlInput(f64);

impl ControlInput {
    /// Checked constructor, `u ∈ (0, 1)`.
    pub fn new(u: f64) -> Result<Self> {
        if u > 0.0 && u < 1.0 {
            Ok(ControlInput(u))
        } else {
            Err(Error::InvalidParameter(format!("control input u = {u} outside (0, 1)")))
        }
    }

    /// Unchecked input, used by the unsaturated law under verification.
    pub const fn unchecked(u: f64) -> Self {
        ControlInput(u)
    }

    pub const fn value(self) -> f64 {
        self.0
    }

    pub fn duty_cycle(self) -> f64 {
        1.0 - self.0
    }
}

/// Component form of the averaged dynamics.
pub fn plant_derivative(p: &PlantParams, x: &PlantState, u: ControlInput) -> Result<PlantState> {
    let u = u.value();
    let i_fc = p.curve.current(x.x1)?;
    Ok(PlantState {
        x1: (i_fc - x.x2) / p.c_fc,
        x2: (-p.theta_r1 * x.x2 + x.x1 - u * x.x3) / p.l,
        x3: (-p.theta_r2 * x.x3 + u * x.x2) / p.c,
    })
}

pub fn q_matrix(p: &PlantParams) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(p.c_fc, p.l, p.c))
}

pub fn j0_matrix() -> Matrix3<f64> {
    Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
}

pub fn j1_matrix() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)
}

pub fn r_matrix(theta_r1: f64, theta_r2: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(0.0, theta_r1, theta_r2))
}

/// Matrix form `Q ẋ = [J0 + J1 u - R] x + v1 I_fc(x1)`, solved for `ẋ`.
pub fn plant_derivative_matrix_form(p: &PlantParams, x: &PlantState, u: ControlInput) -> Result<PlantState> {
    let i_fc = p.curve.current(x.x1)?;
    let a = j0_matrix() + j1_matrix() * u.value() - r_matrix(p.theta_r1, p.theta_r2);
    let rhs = a * x.to_vector() + Vector3::new(i_fc, 0.0, 0.0);
    let q_inv = q_matrix(p).try_inverse().ok_or_else(|| Error::InvalidParameter("singular Q".into()))?;
    let d = q_inv * rhs;
    Ok(PlantState::new(d[0], d[1], d[2]))
}

/// Input vector field at `x`: `g(x) = J1 x = (0, -x3, x2)`.
pub fn input_vector(x: &PlantState) -> Vector3<f64> {
    j1_matrix() * x.to_vector()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn linear() -> FcCurve {
        FcCurve::new(1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn current_is_zero_at_open_circuit() {
        assert_eq!(FcCurve::bench().current(38.84).unwrap(), 0.0);
    }

    #[test]
    fn current_at_bench_operating_point() {
        // ((38.84 - 33.47) / 0.984)^(1 / 0.865)
        let i = FcCurve::bench().current(33.47).unwrap();
        assert_relative_eq!(i, 7.112_12, max_relative = 1e-5);
    }

    #[test]
    fn current_linear_curve() {
        assert_relative_eq!(linear().current(0.5).unwrap(), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn current_rejects_out_of_domain() {
        let c = FcCurve::bench();
        assert!(matches!(c.current(38.85), Err(Error::Domain { .. })));
        assert!(matches!(c.current(-0.1), Err(Error::Domain { .. })));
        assert!(c.slope(38.84).is_err());
    }

    #[test]
    fn slope_hand_values() {
        assert_relative_eq!(linear().slope(0.3).unwrap(), 1.0, max_relative = 1e-15);
        // θ_s2 = 0.5: -I = -(E - v)^2, slope 2 (E - v).
        let sq = FcCurve::new(1.0, 1.0, 0.5).unwrap();
        assert_relative_eq!(sq.slope(0.5).unwrap(), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn slope_matches_central_difference() {
        let c = FcCurve::bench();
        for k in 1..100 {
            let v = 38.0 * k as f64 / 100.0;
            let h = 1e-5;
            let fd = -(c.current(v + h).unwrap() - c.current(v - h).unwrap()) / (2.0 * h);
            assert_relative_eq!(c.slope(v).unwrap(), fd, max_relative = 1e-6);
        }
    }

    /// Brute-force grid minimum of the slope, independent of the endpoint rule.
    fn grid_min_slope(c: &FcCurve, lo: f64, hi: f64) -> f64 {
        (0..=10_000)
            .map(|k| c.slope(lo + (hi - lo) * k as f64 / 10_000.0).unwrap())
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn monotonicity_constant_matches_grid_scan() {
        assert_relative_eq!(linear().monotonicity_constant(0.0, 0.9).unwrap(), 1.0, max_relative = 1e-15);
        for s2 in [0.5, 0.865, 1.0, 1.4, 2.5] {
            let c = FcCurve::new(38.84, 0.984, s2).unwrap();
            let alpha = c.monotonicity_constant(17.0, 38.4).unwrap();
            assert_relative_eq!(alpha, grid_min_slope(&c, 17.0, 38.4), max_relative = 1e-12);
        }
    }

    #[test]
    fn monotonicity_constant_rejects_bad_interval() {
        let c = FcCurve::bench();
        assert!(c.monotonicity_constant(30.0, 20.0).is_err());
        assert!(c.monotonicity_constant(30.0, 38.84).is_err());
        assert!(c.monotonicity_constant(-1.0, 20.0).is_err());
    }

    #[test]
    fn derivative_with_zero_current_and_output() {
        let p = PlantParams::nominal(presets::VREF_PULSE_LOAD);
        let x = PlantState::new(30.0, 0.0, 0.0);
        let d = plant_derivative(&p, &x, ControlInput::new(0.37).unwrap()).unwrap();
        let i_fc = p.curve.current(30.0).unwrap();
        assert_relative_eq!(d.x1, i_fc / p.c_fc, max_relative = 1e-15);
        assert_relative_eq!(d.x2, 30.0 / p.l, max_relative = 1e-15);
        assert_eq!(d.x3, 0.0);
    }

    #[test]
    fn derivative_hand_fixture() {
        // Hand evaluation at x = (33, 7, 48), u = 0.6 with nominal values and a
        // 90.15 mS load: I_fc(33) = (5.84 / 0.984)^(1/0.865) = 7.8365438...
        let p = PlantParams::nominal(90.15e-3);
        let x = PlantState::new(33.0, 7.0, 48.0);
        let d = plant_derivative(&p, &x, ControlInput::new(0.6).unwrap()).unwrap();
        let i_fc = ((38.84f64 - 33.0) / 0.984).powf(1.0 / 0.865);
        assert_relative_eq!(i_fc, 7.836_544, max_relative = 1e-6);
        assert_relative_eq!(d.x1, (i_fc - 7.0) / 5.19e-3, max_relative = 1e-12);
        // (-0.0083 * 7 + 33 - 28.8) / 38.6e-6 = 4.1419 / 38.6e-6
        assert_relative_eq!(d.x2, 107_303.108_808_29, max_relative = 1e-10);
        // (-0.09015 * 48 + 4.2) / 136e-6 = -0.1272 / 136e-6
        assert_relative_eq!(d.x3, -935.294_117_647_058_8, max_relative = 1e-10);
    }

    #[test]
    fn control_input_bounds() {
        assert!(ControlInput::new(0.0).is_err());
        assert!(ControlInput::new(1.0).is_err());
        assert_relative_eq!(ControlInput::new(0.25).unwrap().duty_cycle(), 0.75);
    }

    #[test]
    fn invalid_plant_rejected() {
        assert!(PlantParams::new(0.0, 1.0, 1.0, 1.0, 1.0, FcCurve::bench()).is_err());
        assert!(FcCurve::new(38.0, -1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn component_and_matrix_forms_agree(
            x1 in 0.0..38.8f64, x2 in -20.0..20.0f64, x3 in 0.0..80.0f64, u in 0.01..0.99f64,
            r1 in 1e-3..2.0f64, r2 in 1e-3..0.2f64,
        ) {
            let p = PlantParams { theta_r1: r1, theta_r2: r2, ..PlantParams::nominal(0.09) };
            let x = PlantState::new(x1, x2, x3);
            let u = ControlInput::new(u).unwrap();
            let a = plant_derivative(&p, &x, u).unwrap();
            let b = plant_derivative_matrix_form(&p, &x, u).unwrap();
            for (da, db) in a.to_array().iter().zip(b.to_array()) {
                prop_assert!((da - db).abs() <= 1e-12 * da.abs().max(db.abs()).max(1e-300) + 1e-9,
                    "{da} vs {db}");
            }
        }

        #[test]
        fn negative_current_is_strictly_increasing(a in 0.0..38.83f64, b in 0.0..38.83f64) {
            prop_assume!((a - b).abs() > 1e-9);
            let c = FcCurve::bench();
            let lhs = (a - b) * (c.current(b).unwrap() - c.current(a).unwrap());
            prop_assert!(lhs > 0.0);
        }
    }
}
