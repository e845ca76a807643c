//! Assignable equilibria `(x*, u*)` for a voltage setpoint.
//!
//! The equilibrium current is a root of
//! `p(x2) = θ_r1 x2² + θ_r2 x3*² - x2 (E_oc - θ_s1 x2^θ_s2)`.
//! For positive parameters `p'' = 2θ_r1 + θ_s1 θ_s2 (1 + θ_s2) x2^(θ_s2 - 1) > 0`,
//! so `p` is strictly convex on `x2 > 0`, `p(0) > 0` and there are at most two
//! positive roots. The smallest one (the down-crossing, `p' < 0`) is returned.
//! Newton started anywhere with `p' < 0` lands left of that root after at most
//! one step and then increases monotonically towards it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ControlInput, FcCurve, PlantParams, PlantState};

/// Parameter vector used to compute an equilibrium (true or estimated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub theta_r1: f64,
    pub theta_r2: f64,
    pub theta_s1: f64,
    pub theta_s2: f64,
    pub e_oc: f64,
}

impl Theta {
    pub fn new(theta_r1: f64, theta_r2: f64, theta_s1: f64, theta_s2: f64, e_oc: f64) -> Self {
        Theta { theta_r1, theta_r2, theta_s1, theta_s2, e_oc }
    }

    pub fn from_plant(p: &PlantParams) -> Self {
        Theta {
            theta_r1: p.theta_r1,
            theta_r2: p.theta_r2,
            theta_s1: p.curve.theta_s1,
            theta_s2: p.curve.theta_s2,
            e_oc: p.curve.e_oc,
        }
    }

    pub fn curve(&self) -> FcCurve {
        FcCurve { e_oc: self.e_oc, theta_s1: self.theta_s1, theta_s2: self.theta_s2 }
    }

    /// Solver preconditions. `θ_r1` may be any finite value (estimates can go
    /// transiently negative) and `θ_s1 = 0` is the ideal-source limit.
    fn validate(&self) -> Result<()> {
        let finite = [self.theta_r1, self.theta_r2, self.theta_s1, self.theta_s2, self.e_oc]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParameter(format!("non-finite parameter vector {self:?}")));
        }
        if self.theta_r2 <= 0.0 || self.theta_s2 <= 0.0 || self.e_oc <= 0.0 || self.theta_s1 < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "need theta_r2 > 0, theta_s2 > 0, e_oc > 0, theta_s1 >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetpointSpec {
    pub x3_star: f64,
}

impl SetpointSpec {
    pub fn new(x3_star: f64) -> Result<Self> {
        if !(x3_star.is_finite() && x3_star > 0.0) {
            return Err(Error::InvalidParameter(format!("setpoint must be > 0, got {x3_star}")));
        }
        Ok(SetpointSpec { x3_star })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// `|p| <= rel_tolerance * max(1, θ_r2 x3*²)`.
    pub rel_tolerance: f64,
    /// Grid resolution of the bracketing fallback.
    pub scan_points: usize,
    /// `|assignability_condition|` below this flags a degenerate root.
    pub degeneracy_margin: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iterations: 50, rel_tolerance: 1e-9, scan_points: 4096, degeneracy_margin: 1e-2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    /// A second, larger positive root exists; the smaller one was selected.
    pub multiple_roots: bool,
    pub used_bracketing: bool,
    /// Assignability condition close to 0 (near-tangent root).
    pub degenerate: bool,
    pub assignability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub x_star: PlantState,
    pub u_star: ControlInput,
    pub theta_used: Theta,
    pub residual: f64,
    pub iterations: usize,
    pub diagnostics: SolverDiagnostics,
}

impl EquilibriumPoint {
    /// Integrator value holding `u*` under the PI law: `-u*/K_I`.
    pub fn integrator_state(&self, ki: f64) -> f64 {
        -self.u_star.value() / ki
    }
}

pub fn equilibrium_polynomial(theta: &Theta, x2: f64, x3_star: f64) -> f64 {
    theta.theta_r1 * x2 * x2 + theta.theta_r2 * x3_star * x3_star
        - x2 * (theta.e_oc - theta.theta_s1 * x2.powf(theta.theta_s2))
}

/// `dp/dx2`. Evaluated at a root it equals the assignability condition.
pub fn polynomial_slope(theta: &Theta, x2: f64) -> f64 {
    2.0 * theta.theta_r1 * x2 + (theta.theta_s2 + 1.0) * theta.theta_s1 * x2.powf(theta.theta_s2) - theta.e_oc
}

/// `2θ_r1 x2* + (θ_s2 + 1) θ_s1 x2*^θ_s2 - E_oc`; nonzero means the root
/// persists under small parameter perturbations.
pub fn assignability_condition(theta: &Theta, x2_star: f64) -> f64 {
    polynomial_slope(theta, x2_star)
}

/// `u* = x3* ((θ_r2 - θ_r1) x2 + x1) / (x2² + x3*²)`, the pseudo-inverse form.
pub fn equilibrium_input(theta: &Theta, x1: f64, x2: f64, x3_star: f64) -> f64 {
    x3_star * ((theta.theta_r2 - theta.theta_r1) * x2 + x1) / (x2 * x2 + x3_star * x3_star)
}

/// The three closed forms of `u*` that coincide at a root:
/// inductor balance, capacitor balance, pseudo-inverse.
pub fn equilibrium_input_variants(theta: &Theta, x: &PlantState) -> [f64; 3] {
    [
        (x.x1 - theta.theta_r1 * x.x2) / x.x3,
        theta.theta_r2 * x.x3 / x.x2,
        equilibrium_input(theta, x.x1, x.x2, x.x3),
    ]
}

/// Annihilator projection `g⊥(x) f(x)`; both rows vanish at an equilibrium.
pub fn equilibrium_relations(theta: &Theta, x: &PlantState) -> Result<[f64; 2]> {
    let i_fc = theta.curve().current(x.x1)?;
    Ok([
        i_fc - x.x2,
        -theta.theta_r1 * x.x2 * x.x2 - theta.theta_r2 * x.x3 * x.x3 + x.x2 * x.x1,
    ])
}

fn diverges_upward(theta: &Theta) -> bool {
    theta.theta_r1 > 0.0 || (theta.theta_s1 > 0.0 && (theta.theta_s2 > 1.0 || theta.theta_r1 == 0.0))
}

/// Largest current compatible with the physical domain: `x1 >= 0` bounds it
/// by `(E_oc/θ_s1)^(1/θ_s2)`, the resistive drop by `E_oc/θ_r1`.
fn current_bound(theta: &Theta) -> f64 {
    let mut bound = f64::INFINITY;
    if theta.theta_s1 > 0.0 {
        bound = bound.min((theta.e_oc / theta.theta_s1).powf(1.0 / theta.theta_s2));
    }
    if theta.theta_r1 > 0.0 {
        bound = bound.min(theta.e_oc / theta.theta_r1);
    }
    if !bound.is_finite() {
        bound = 10.0 * theta.theta_r2 / theta.e_oc + 1.0;
    }
    bound
}

pub fn solve_equilibrium(theta: &Theta, spec: SetpointSpec, guess: Option<f64>) -> Result<EquilibriumPoint> {
    solve_equilibrium_with(theta, spec, guess, &SolverOptions::default())
}

pub fn solve_equilibrium_with(
    theta: &Theta,
    spec: SetpointSpec,
    guess: Option<f64>,
    opts: &SolverOptions,
) -> Result<EquilibriumPoint> {
    theta.validate()?;
    let x3 = spec.x3_star;
    let p = |x: f64| equilibrium_polynomial(theta, x, x3);
    let dp = |x: f64| polynomial_slope(theta, x);

    let power = theta.theta_r2 * x3 * x3;
    let tol = opts.rel_tolerance * power.max(1.0);
    let lossless = power / theta.e_oc;

    let mut x = match guess {
        Some(g) if g.is_finite() && g > 0.0 && dp(g) < 0.0 => g,
        _ => lossless,
    };
    let mut iterations = 0;
    let mut root = None;
    while iterations < opts.max_iterations {
        let pv = p(x);
        let d = dp(x);
        if pv.abs() <= tol {
            if d < 0.0 || d.abs() < opts.degeneracy_margin {
                root = Some(x);
            }
            break;
        }
        if !(d < 0.0) {
            break;
        }
        let next = x - pv / d;
        x = if next > 0.0 { next } else { 0.5 * x };
        iterations += 1;
    }

    let mut used_bracketing = false;
    let x2 = match root {
        Some(r) => r,
        None => {
            used_bracketing = true;
            let (r, its) = bracket_smallest_root(&p, current_bound(theta), tol, opts)?;
            iterations += its;
            r
        }
    };

    let x1 = theta.e_oc - theta.theta_s1 * x2.powf(theta.theta_s2);
    let u = equilibrium_input(theta, x1, x2, x3);
    let residual = p(x2);
    let assignability = assignability_condition(theta, x2);
    let diagnostics = SolverDiagnostics {
        multiple_roots: assignability < 0.0 && diverges_upward(theta),
        used_bracketing,
        degenerate: assignability.abs() < opts.degeneracy_margin,
        assignability,
    };
    if !(u > 0.0 && u < 1.0) || x1 < 0.0 {
        return Err(Error::InfeasibleInput { u_star: u, x2_star: x2 });
    }
    Ok(EquilibriumPoint {
        x_star: PlantState::new(x1, x2, x3),
        u_star: ControlInput::new(u)?,
        theta_used: *theta,
        residual,
        iterations,
        diagnostics,
    })
}

/// Uniform scan of `(0, upper]` for the first sign change of `p`, refined by
/// bisection.
fn bracket_smallest_root(
    p: &impl Fn(f64) -> f64,
    upper: f64,
    tol: f64,
    opts: &SolverOptions,
) -> Result<(f64, usize)> {
    let n = opts.scan_points.max(2);
    let mut lo = 0.0;
    let mut min_value = p(0.0);
    let mut hi = None;
    for k in 1..=n {
        let x = upper * k as f64 / n as f64;
        let v = p(x);
        min_value = min_value.min(v);
        if v <= 0.0 {
            hi = Some(x);
            break;
        }
        lo = x;
    }
    let Some(mut hi) = hi else {
        return Err(Error::NoRoot { min_value });
    };
    let mut its = 0;
    loop {
        let mid = 0.5 * (lo + hi);
        let v = p(mid);
        its += 1;
        if v.abs() <= tol || (hi - lo) <= 1e-15 * hi.max(1.0) || its >= 200 {
            return Ok((mid, its));
        }
        if v > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}
