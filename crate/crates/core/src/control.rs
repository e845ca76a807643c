//! PI passivity-based control on the output `y_N = x2_ref x3 - x3_ref x2`.

use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_equilibrium_with, EquilibriumPoint, SetpointSpec, SolverOptions, Theta};
use crate::error::{Error, Result};
use crate::model::{ControlInput, PlantState};
use crate::presets;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub kp: f64,
    pub ki: f64,
}

impl ControllerGains {
    pub fn new(kp: f64, ki: f64) -> Result<Self> {
        if !(kp.is_finite() && kp > 0.0 && ki.is_finite() && ki > 0.0) {
            return Err(Error::InvalidParameter(format!("PI gains must be positive, got kp={kp}, ki={ki}")));
        }
        Ok(ControllerGains { kp, ki })
    }

    pub fn bench() -> Self {
        ControllerGains { kp: presets::KP, ki: presets::KI }
    }
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self::bench()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub u_min: f64,
    pub u_max: f64,
}

impl Saturation {
    pub fn new(u_min: f64, u_max: f64) -> Result<Self> {
        if !(u_min > 0.0 && u_min < u_max && u_max < 1.0) {
            return Err(Error::InvalidParameter(format!("saturation [{u_min}, {u_max}] must lie inside (0, 1)")));
        }
        Ok(Saturation { u_min, u_max })
    }
}

impl Default for Saturation {
    fn default() -> Self {
        Saturation { u_min: 0.05, u_max: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControllerState {
    pub xc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlOutput {
    pub u: ControlInput,
    pub u_unsat: f64,
    pub saturated: bool,
    pub integrator_frozen: bool,
}

pub fn passive_output(x: &PlantState, x2_ref: f64, x3_ref: f64) -> f64 {
    x2_ref * x.x3 - x3_ref * x.x2
}

/// `u = -K_P y_N - K_I x_c`, then `x_c += dt y_N` (explicit Euler).
///
/// With saturation the integrator is frozen while `u` is clipped and `y_N`
/// drives it further into the limit. Without saturation the law is applied
/// as is, which is what the stability analysis assumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiPbc {
    pub gains: ControllerGains,
    pub saturation: Option<Saturation>,
}

impl PiPbc {
    pub fn new(gains: ControllerGains, saturation: Option<Saturation>) -> Self {
        PiPbc { gains, saturation }
    }

    pub fn step(&self, cs: ControllerState, y_n: f64, dt: f64) -> (ControlOutput, ControllerState) {
        debug_assert!(dt > 0.0);
        let u_unsat = -self.gains.kp * y_n - self.gains.ki * cs.xc;
        let (u, saturated, frozen) = match self.saturation {
            None => (u_unsat, false, false),
            Some(s) => {
                let u = u_unsat.clamp(s.u_min, s.u_max);
                let high = u_unsat > s.u_max;
                let low = u_unsat < s.u_min;
                // dU/dx_c = -K_I < 0, so y_N < 0 pushes u upward.
                let frozen = (high && y_n < 0.0) || (low && y_n > 0.0);
                (u, high || low, frozen)
            }
        };
        let next = if frozen { cs } else { ControllerState { xc: cs.xc + dt * y_n } };
        let out = ControlOutput { u: ControlInput::unchecked(u), u_unsat, saturated, integrator_frozen: frozen };
        (out, next)
    }
}

/// PI-PBC with references taken from an equilibrium computed with the true
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullInfoController {
    pub law: PiPbc,
    pub x2_ref: f64,
    pub x3_ref: f64,
}

impl FullInfoController {
    pub fn new(law: PiPbc, eq: &EquilibriumPoint) -> Self {
        FullInfoController { law, x2_ref: eq.x_star.x2, x3_ref: eq.x_star.x3 }
    }

    pub fn step(&self, x: &PlantState, cs: ControllerState, dt: f64) -> (ControlOutput, ControllerState) {
        self.law.step(cs, passive_output(x, self.x2_ref, self.x3_ref), dt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveStep {
    pub output: ControlOutput,
    pub state: ControllerState,
    pub x2_ref: f64,
    pub x1_ref: f64,
    pub iterations: usize,
    /// The solver failed this step and the previous reference was held.
    pub solver_failed: bool,
    /// The reference came from a cached solution (failure or decimation).
    pub held: bool,
    pub multiple_roots: bool,
    pub degenerate: bool,
}

/// Certainty-equivalence PI-PBC: the current reference is recomputed from
/// the parameter estimate at each (decimated) step, warm-started from the
/// previous root.
#[derive(Debug, Clone)]
pub struct AdaptiveController {
    pub law: PiPbc,
    pub solver: SolverOptions,
    /// Recompute the reference every `decimation` steps.
    pub decimation: usize,
    last: Option<EquilibriumPoint>,
    counter: usize,
}

impl AdaptiveController {
    pub fn new(law: PiPbc, solver: SolverOptions, decimation: usize) -> Self {
        AdaptiveController { law, solver, decimation: decimation.max(1), last: None, counter: 0 }
    }

    pub fn last_reference(&self) -> Option<&EquilibriumPoint> {
        self.last.as_ref()
    }

    pub fn step(
        &mut self,
        x: &PlantState,
        theta_hat: &Theta,
        x3_ref: f64,
        cs: ControllerState,
        dt: f64,
    ) -> AdaptiveStep {
        let due = self.counter.is_multiple_of(self.decimation)
            || self.last.is_none_or(|eq| eq.x_star.x3 != x3_ref);
        self.counter += 1;

        let mut solver_failed = false;
        let mut iterations = 0;
        let mut held = !due;
        if due {
            let solved = SetpointSpec::new(x3_ref).and_then(|spec| {
                solve_equilibrium_with(theta_hat, spec, self.last.map(|eq| eq.x_star.x2), &self.solver)
            });
            match solved {
                Ok(eq) => {
                    iterations = eq.iterations;
                    self.last = Some(eq);
                }
                Err(_) => {
                    solver_failed = true;
                    held = true;
                }
            }
        }

        let (x2_ref, x1_ref, multiple_roots, degenerate) = match &self.last {
            Some(eq) => (eq.x_star.x2, eq.x_star.x1, eq.diagnostics.multiple_roots, eq.diagnostics.degenerate),
            // Nothing valid yet: lossless power-balance current.
            None => (theta_hat.theta_r2 * x3_ref * x3_ref / theta_hat.e_oc, theta_hat.e_oc, false, false),
        };
        let (output, state) = self.law.step(cs, passive_output(x, x2_ref, x3_ref), dt);
        AdaptiveStep { output, state, x2_ref, x1_ref, iterations, solver_failed, held, multiple_roots, degenerate }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_equilibrium, Theta};
    use crate::model::PlantParams;
    use approx::assert_relative_eq;

    fn law() -> PiPbc {
        PiPbc::new(ControllerGains::bench(), Some(Saturation::default()))
    }

    #[test]
    fn passive_output_values() {
        let x = PlantState::new(33.0, 7.11, 48.0);
        assert_eq!(passive_output(&x, 7.11, 48.0), 0.0);
        let x = PlantState::new(33.0, 8.0, 47.0);
        assert_relative_eq!(passive_output(&x, 7.11, 48.0), -49.83, max_relative = 1e-12);
    }

    #[test]
    fn zero_output_saturates_low() {
        let (out, next) = law().step(ControllerState { xc: 0.0 }, 0.0, 1e-4);
        assert_eq!(out.u_unsat, 0.0);
        assert_eq!(out.u.value(), 0.05);
        assert!(out.saturated);
        assert_eq!(next.xc, 0.0);
    }

    #[test]
    fn hand_computed_step() {
        let (out, next) = law().step(ControllerState { xc: -2.0 }, -49.83, 1e-4);
        assert_relative_eq!(out.u_unsat, 0.560_946_77, max_relative = 1e-12);
        assert_relative_eq!(out.u.value(), 0.560_946_77, max_relative = 1e-12);
        assert!(!out.saturated);
        assert_relative_eq!(next.xc, -2.0 - 1e-4 * 49.83, max_relative = 1e-15);
    }

    #[test]
    fn steady_integrator_holds_u_star() {
        let u_star = 0.62;
        let xc = -u_star / presets::KI;
        let (out, next) = law().step(ControllerState { xc }, 0.0, 1e-4);
        assert_relative_eq!(out.u.value(), u_star, max_relative = 1e-15);
        assert_eq!(next.xc, xc);
    }

    #[test]
    fn gains_must_be_positive() {
        assert!(ControllerGains::new(0.0, 0.28).is_err());
        assert!(ControllerGains::new(19e-6, -1.0).is_err());
        assert!(Saturation::new(0.5, 0.4).is_err());
    }

    #[test]
    fn anti_windup_freezes_integrator() {
        // Deep in upper saturation with y_N < 0: integration would push further.
        let cs = ControllerState { xc: -10.0 };
        let (out, next) = law().step(cs, -100.0, 1e-4);
        assert!(out.saturated && out.integrator_frozen);
        assert_eq!(next.xc, cs.xc);
        // Same limit but y_N > 0 pulls back out: integrate.
        let (out, next) = law().step(cs, 100.0, 1e-4);
        assert!(out.saturated && !out.integrator_frozen);
        assert!(next.xc > cs.xc);
        // Sustained saturation never winds the integrator up.
        let mut cs = ControllerState { xc: -3.0 };
        for _ in 0..100_000 {
            cs = law().step(cs, -50.0, 1e-4).1;
        }
        assert!(cs.xc > -3.5, "xc = {}", cs.xc);
    }

    #[test]
    fn unsaturated_law_passes_raw_value() {
        let pbc = PiPbc::new(ControllerGains::bench(), None);
        let (out, _) = pbc.step(ControllerState { xc: -5.0 }, 0.0, 1e-4);
        assert_relative_eq!(out.u.value(), 1.4, max_relative = 1e-15);
        assert!(!out.saturated);
    }

    #[test]
    fn full_info_fixed_point() {
        let plant = PlantParams::lumped(0.09087);
        let eq = solve_equilibrium(&Theta::from_plant(&plant), SetpointSpec::new(48.0).unwrap(), None).unwrap();
        let ctl = FullInfoController::new(law(), &eq);
        let cs = ControllerState { xc: eq.integrator_state(presets::KI) };
        let (out, next) = ctl.step(&eq.x_star, cs, 1e-4);
        assert_relative_eq!(out.u.value(), eq.u_star.value(), max_relative = 1e-14);
        assert_eq!(next, cs);
    }

    #[test]
    fn adaptive_with_true_theta_matches_full_info() {
        let plant = PlantParams::lumped(0.09087);
        let theta = Theta::from_plant(&plant);
        let eq = solve_equilibrium(&theta, SetpointSpec::new(48.0).unwrap(), None).unwrap();
        let full = FullInfoController::new(law(), &eq);
        let mut adaptive = AdaptiveController::new(law(), SolverOptions::default(), 1);
        let x = PlantState::new(33.0, 6.5, 47.0);
        let cs = ControllerState { xc: -2.2 };
        let a = adaptive.step(&x, &theta, 48.0, cs, 1e-4);
        let (out, next) = full.step(&x, cs, 1e-4);
        assert_relative_eq!(a.x2_ref, eq.x_star.x2, max_relative = 1e-12);
        assert_relative_eq!(a.output.u.value(), out.u.value(), max_relative = 1e-12);
        assert_relative_eq!(a.state.xc, next.xc, max_relative = 1e-12);
    }

    #[test]
    fn adaptive_holds_reference_on_solver_failure() {
        let plant = PlantParams::lumped(0.09087);
        let theta = Theta::from_plant(&plant);
        let mut adaptive = AdaptiveController::new(law(), SolverOptions::default(), 1);
        let x = PlantState::new(33.0, 7.0, 48.0);
        let good = adaptive.step(&x, &theta, 48.0, ControllerState { xc: -2.2 }, 1e-4);
        assert!(!good.solver_failed);
        // Load far beyond the source capability: no root.
        let bad_theta = Theta { theta_r2: 2.0, ..theta };
        let bad = adaptive.step(&x, &bad_theta, 48.0, good.state, 1e-4);
        assert!(bad.solver_failed && bad.held);
        assert_eq!(bad.x2_ref, good.x2_ref);
    }

    #[test]
    fn adaptive_decimation_reuses_reference() {
        let theta = Theta::from_plant(&PlantParams::lumped(0.09087));
        let mut adaptive = AdaptiveController::new(law(), SolverOptions::default(), 10);
        let x = PlantState::new(33.0, 7.0, 48.0);
        let first = adaptive.step(&x, &theta, 48.0, ControllerState::default(), 1e-4);
        assert!(!first.held);
        let shifted = Theta { theta_r2: theta.theta_r2 * 1.05, ..theta };
        let second = adaptive.step(&x, &shifted, 48.0, first.state, 1e-4);
        assert!(second.held && !second.solver_failed);
        assert_eq!(second.x2_ref, first.x2_ref);
    }
}
