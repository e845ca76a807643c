//! Hybrid online estimator.
//!
//! The polarization parameters come from a filtered linear regression
//! `Y = φ θ_s2` with `Y = F{ln(E_oc - x1)}`, `φ = F{ln i_fc}` and
//! `F = λp/(p+λ)`, followed by a projected gradient descent on `θ_s2` and the
//! algebraic map `θ_s1 = (E_oc - x1) i_fc^(-θ_s2)`.
//!
//! The resistive parameters use immersion and invariance:
//!
//! ```text
//! ξ̇1 = -k1 x2 (-x1 - (k1/2) L x2³ + ξ1 x2 + x3 u),   θ̂_r1 = -(k1/2) L x2² + ξ1
//! ξ̇2 = -k2 x3 (-x2 u - (k2/2) C x3³ + ξ2 x3),         θ̂_r2 = -(k2/2) C x3² + ξ2
//! ```
//!
//! Differentiating `e_r1 = θ̂_r1 - θ_r1` along the plant and substituting
//! `L ẋ2 = -θ_r1 x2 + x1 - u x3` cancels every term except
//! `ė_r1 = -k1 x2² e_r1` (likewise `ė_r2 = -k2 x3² e_r2`). This only works if
//! the auxiliary states appear inside the brackets, which fixes the reading
//! of the update law.

use serde::{Deserialize, Serialize};

use crate::equilibrium::Theta;
use crate::error::{Error, Result};
use crate::model::{ControlInput, PlantState};
use crate::presets;

/// Log-domain clamp for `ln(i_fc)` and `ln(E_oc - x1)`.
pub const EPS_LOG: f64 = 1e-9;

/// One explicit-Euler step of `λs/(s+λ)`: returns `(λ(f - z), z + dt λ (f - z))`.
pub fn filter_step(z: f64, lambda: f64, f_in: f64, dt: f64) -> (f64, f64) {
    let e = f_in - z;
    (lambda * e, z + dt * lambda * e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub z_y: f64,
    pub z_phi: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSample {
    pub y: f64,
    pub phi: f64,
    /// One of the log arguments hit the clamp; the sample carries no curve
    /// information.
    pub clamped: bool,
}

fn log_channels(x1: f64, i_fc: f64, e_oc: f64) -> (f64, f64, bool) {
    let dv = e_oc - x1;
    let clamped = !(dv > EPS_LOG && i_fc > EPS_LOG);
    (dv.max(EPS_LOG).ln(), i_fc.max(EPS_LOG).ln(), clamped)
}

impl FilterState {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidParameter(format!("filter lambda must be > 0, got {lambda}")));
        }
        Ok(FilterState { z_y: 0.0, z_phi: 0.0, lambda })
    }

    /// Filter states set to the current channel values, so the first outputs
    /// are zero and the constant `ln θ_s1` offset is rejected exactly.
    pub fn primed(lambda: f64, x1: f64, i_fc: f64, e_oc: f64) -> Result<Self> {
        let mut fs = Self::new(lambda)?;
        let (ly, lphi, _) = log_channels(x1, i_fc, e_oc);
        fs.z_y = ly;
        fs.z_phi = lphi;
        Ok(fs)
    }

    pub fn regression_sample(&self, x1: f64, i_fc: f64, e_oc: f64, dt: f64) -> (RegressionSample, FilterState) {
        let (ly, lphi, clamped) = log_channels(x1, i_fc, e_oc);
        let (y, z_y) = filter_step(self.z_y, self.lambda, ly, dt);
        let (phi, z_phi) = filter_step(self.z_phi, self.lambda, lphi, dt);
        (RegressionSample { y, phi, clamped }, FilterState { z_y, z_phi, lambda: self.lambda })
    }
}

/// `θ̂_s2 + dt γ φ (Y - φ θ̂_s2)` projected onto `bounds`. Second value is
/// true when the projection was active.
pub fn gradient_step(theta_s2: f64, sample: &RegressionSample, gamma: f64, bounds: (f64, f64), dt: f64) -> (f64, bool) {
    let raw = theta_s2 + dt * gamma * sample.phi * (sample.y - sample.phi * theta_s2);
    let projected = raw.clamp(bounds.0, bounds.1);
    (projected, projected != raw)
}

/// `θ_s1 = (E_oc - x1) i_fc^(-θ_s2)`, `None` when the sample is clamped.
pub fn theta_s1_from_curve(x1: f64, i_fc: f64, e_oc: f64, theta_s2: f64) -> Option<f64> {
    let dv = e_oc - x1;
    (dv > EPS_LOG && i_fc > EPS_LOG).then(|| dv * i_fc.powf(-theta_s2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorGains {
    pub gamma: f64,
    pub k1: f64,
    pub k2: f64,
    pub lambda: f64,
}

impl EstimatorGains {
    pub fn new(gamma: f64, k1: f64, k2: f64, lambda: f64) -> Result<Self> {
        let g = EstimatorGains { gamma, k1, k2, lambda };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("k1", self.k1), ("k2", self.k2), ("lambda", self.lambda)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("estimator gain {name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

impl Default for EstimatorGains {
    fn default() -> Self {
        EstimatorGains { gamma: presets::GAMMA, k1: presets::K1, k2: presets::K2, lambda: presets::LAMBDA }
    }
}

/// I&I auxiliary update, one explicit-Euler step.
#[allow(clippy::too_many_arguments)]
pub fn iandi_step(xi: [f64; 2], x: &PlantState, u: ControlInput, l: f64, c: f64, k1: f64, k2: f64, dt: f64) -> [f64; 2] {
    let u = u.value();
    let (x1, x2, x3) = (x.x1, x.x2, x.x3);
    let d1 = -k1 * x2 * (-x1 - 0.5 * k1 * l * x2.powi(3) + xi[0] * x2 + x3 * u);
    let d2 = -k2 * x3 * (-x2 * u - 0.5 * k2 * c * x3.powi(3) + xi[1] * x3);
    [xi[0] + dt * d1, xi[1] + dt * d2]
}

/// Output maps `θ̂_r = -(k/2) Q_i x_i² + ξ`.
pub fn iandi_output(xi: [f64; 2], x: &PlantState, l: f64, c: f64, k1: f64, k2: f64) -> (f64, f64) {
    (-0.5 * k1 * l * x.x2 * x.x2 + xi[0], -0.5 * k2 * c * x.x3 * x.x3 + xi[1])
}

/// Inverse of the output maps: the `ξ` that reproduces the given estimates at `x`.
pub fn iandi_init(theta_r: (f64, f64), x: &PlantState, l: f64, c: f64, k1: f64, k2: f64) -> [f64; 2] {
    [theta_r.0 + 0.5 * k1 * l * x.x2 * x.x2, theta_r.1 + 0.5 * k2 * c * x.x3 * x.x3]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterEstimate {
    pub theta_r1: f64,
    pub theta_r2: f64,
    pub theta_s1: f64,
    pub theta_s2: f64,
}

impl ParameterEstimate {
    pub fn to_theta(&self, e_oc: f64) -> Theta {
        Theta::new(self.theta_r1, self.theta_r2, self.theta_s1, self.theta_s2, e_oc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub gains: EstimatorGains,
    pub e_oc: f64,
    /// Converter passives, assumed known.
    pub l: f64,
    pub c: f64,
    pub theta_s2_bounds: (f64, f64),
    pub prior: ParameterEstimate,
    /// Time constant of an optional first-order smoother on `θ̂_s1`.
    pub theta_s1_smoothing: Option<f64>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            gains: EstimatorGains::default(),
            e_oc: presets::E_OC,
            l: presets::L,
            c: presets::C,
            theta_s2_bounds: (0.05, 5.0),
            prior: ParameterEstimate { theta_r1: 10e-3, theta_r2: 50e-3, theta_s1: 1.0, theta_s2: 1.0 },
            theta_s1_smoothing: None,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.gains.validate()?;
        let (lo, hi) = self.theta_s2_bounds;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidParameter(format!("theta_s2 bounds ({lo}, {hi}) invalid")));
        }
        if !(self.e_oc > 0.0 && self.l > 0.0 && self.c > 0.0) {
            return Err(Error::InvalidParameter("estimator needs e_oc, l, c > 0".into()));
        }
        if !(self.prior.theta_s2 >= lo && self.prior.theta_s2 <= hi && self.prior.theta_s1 > 0.0) {
            return Err(Error::InvalidParameter("estimator prior outside its admissible set".into()));
        }
        if let Some(tau) = self.theta_s1_smoothing {
            if !(tau > 0.0) {
                return Err(Error::InvalidParameter(format!("theta_s1 smoothing constant must be > 0, got {tau}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub xi: [f64; 2],
    pub theta_s2: f64,
    pub theta_s1: f64,
    pub filter: FilterState,
    /// Latest estimate, assembled from the state and the last measurement.
    pub estimate: ParameterEstimate,
    pub steps: u64,
    pub projections: u64,
    pub clamped_samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorStep {
    pub estimate: ParameterEstimate,
    pub sample: RegressionSample,
    pub projected: bool,
    /// A resistive estimate is non-positive.
    pub negative_resistive: bool,
}

/// Estimator with fixed configuration. The state is threaded through `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimator {
    pub config: EstimatorConfig,
}

impl Estimator {
    pub fn new(config: EstimatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Estimator { config })
    }

    /// State at the first sample: `ξ` reproduces the resistive priors, the
    /// filters are primed, `θ̂_s1` follows from the curve map when possible.
    pub fn init(&self, x: &PlantState, i_fc: f64) -> EstimatorState {
        let cfg = &self.config;
        let g = &cfg.gains;
        let xi = iandi_init((cfg.prior.theta_r1, cfg.prior.theta_r2), x, cfg.l, cfg.c, g.k1, g.k2);
        let (_, _, clamped) = log_channels(x.x1, i_fc, cfg.e_oc);
        let filter = FilterState::primed(g.lambda, x.x1, i_fc, cfg.e_oc).expect("validated lambda");
        let theta_s2 = cfg.prior.theta_s2;
        let theta_s1 = theta_s1_from_curve(x.x1, i_fc, cfg.e_oc, theta_s2).unwrap_or(cfg.prior.theta_s1);
        let estimate = ParameterEstimate { theta_r1: cfg.prior.theta_r1, theta_r2: cfg.prior.theta_r2, theta_s1, theta_s2 };
        EstimatorState {
            xi,
            theta_s2,
            theta_s1,
            filter,
            estimate,
            steps: 0,
            projections: 0,
            clamped_samples: clamped as u64,
        }
    }

    /// One sample: measurement `x`, `i_fc` and the input applied over the
    /// preceding interval.
    pub fn step(&self, es: &EstimatorState, x: &PlantState, i_fc: f64, u_prev: ControlInput, dt: f64) -> (EstimatorStep, EstimatorState) {
        let cfg = &self.config;
        let g = &cfg.gains;
        let mut next = *es;

        next.xi = iandi_step(es.xi, x, u_prev, cfg.l, cfg.c, g.k1, g.k2, dt);
        let (theta_r1, theta_r2) = iandi_output(next.xi, x, cfg.l, cfg.c, g.k1, g.k2);

        let (sample, filter) = es.filter.regression_sample(x.x1, i_fc, cfg.e_oc, dt);
        next.filter = filter;
        let mut projected = false;
        if sample.clamped {
            next.clamped_samples += 1;
        } else {
            let (s2, p) = gradient_step(es.theta_s2, &sample, g.gamma, cfg.theta_s2_bounds, dt);
            next.theta_s2 = s2;
            projected = p;
            next.projections += p as u64;
            if let Some(raw) = theta_s1_from_curve(x.x1, i_fc, cfg.e_oc, s2) {
                next.theta_s1 = match cfg.theta_s1_smoothing {
                    None => raw,
                    Some(tau) => es.theta_s1 + (dt / tau).min(1.0) * (raw - es.theta_s1),
                };
            }
        }
        next.steps += 1;
        next.estimate = ParameterEstimate { theta_r1, theta_r2, theta_s1: next.theta_s1, theta_s2: next.theta_s2 };
        let step = EstimatorStep {
            estimate: next.estimate,
            sample,
            projected,
            negative_resistive: theta_r1 <= 0.0 || theta_r2 <= 0.0,
        };
        (step, next)
    }

    pub fn estimate(&self, es: &EstimatorState) -> ParameterEstimate {
        es.estimate
    }
}
