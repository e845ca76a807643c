//! Numerical checks of the closed-loop stability and estimator properties.

use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::ControllerGains;
use crate::equilibrium::{EquilibriumPoint, Theta};
use crate::error::{Error, Result};
use crate::estimation::EstimatorConfig;
use crate::model::{j0_matrix, j1_matrix, q_matrix, r_matrix, FcCurve, PlantParams, PlantState};
use crate::sim::{ScenarioSpec, SimConfig, SimTrace, StepLookup};

/// `κ = min(α, θ_r1, θ_r2)`.
pub fn kappa(alpha: f64, theta_r1: f64, theta_r2: f64) -> f64 {
    alpha.min(theta_r1).min(theta_r2)
}

/// `g* = J1 x* = (0, -x3*, x2*)`.
pub fn g_star(x_star: &PlantState) -> Vector3<f64> {
    j1_matrix() * x_star.to_vector()
}

fn min_eigenvalue(m: Matrix3<f64>) -> f64 {
    let sym = 0.5 * (m + m.transpose());
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// `α` over the band visited by `x1` in the trace, widened to contain `x1*`.
pub fn trace_alpha(trace: &SimTrace, curve: &FcCurve, x1_star: f64) -> Result<f64> {
    let (mut lo, mut hi) = (x1_star, x1_star);
    for r in &trace.records {
        lo = lo.min(r.x1);
        hi = hi.max(r.x1);
    }
    if hi <= lo {
        hi = lo + 1e-9;
    }
    curve.monotonicity_constant(lo.max(0.0), hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovOptions {
    /// `tol_n = c dt (V_n + v_floor)`.
    pub tol_constant: f64,
    pub v_floor: f64,
    /// ε used for `W`; when absent `W` is not evaluated.
    pub epsilon: Option<f64>,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        LyapunovOptions { tol_constant: 1e4, v_floor: 1e-12, epsilon: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovReport {
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub epsilon: Option<f64>,
    /// `(t, ΔV/dt - bound)` for every step over tolerance.
    pub violations: Vec<(f64, f64)>,
    pub kappa: f64,
    /// Samples where `W < 0`.
    pub w_negative: usize,
    /// Largest `(ΔV/dt - bound) / (dt (V + v_floor))` seen, a calibration aid.
    pub worst_scaled_residual: f64,
}

impl LyapunovReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.w_negative == 0
    }
}

/// Storage `V = ½ x̃ᵀQx̃ + (K_I/2) x̃_c²` relative to `eq`.
pub fn lyapunov_v(plant: &PlantParams, eq: &EquilibriumPoint, ki: f64, x: &PlantState, xc: f64) -> f64 {
    let e = x.sub(&eq.x_star);
    let ec = xc - eq.integrator_state(ki);
    plant.storage(&e) + 0.5 * ki * ec * ec
}

/// Discrete form of `V̇ <= -κ|x̃|² - K_P (x̃ᵀg*)²`.
///
/// The difference quotient of `V` is compared against the trapezoidal mean
/// of the bound at both ends of each step.
pub fn check_lyapunov_decrease(
    trace: &SimTrace,
    plant: &PlantParams,
    eq: &EquilibriumPoint,
    gains: &ControllerGains,
    alpha: f64,
    opts: &LyapunovOptions,
) -> LyapunovReport {
    let theta = eq.theta_used;
    let k = kappa(alpha, theta.theta_r1, theta.theta_r2);
    let g = g_star(&eq.x_star);
    let xc_star = eq.integrator_state(gains.ki);
    let dt = trace.dt;

    let mut v = Vec::with_capacity(trace.len());
    let mut w = Vec::new();
    let mut bound = Vec::with_capacity(trace.len());
    let mut w_negative = 0;
    for r in &trace.records {
        let e = r.state().sub(&eq.x_star);
        let ec = r.x_c - xc_star;
        let vn = lyapunov_v(plant, eq, gains.ki, &r.state(), r.x_c);
        let y = g.dot(&e.to_vector());
        v.push(vn);
        bound.push(-k * e.norm().powi(2) - gains.kp * y * y);
        if let Some(eps) = opts.epsilon {
            let wn = vn + eps * gains.ki * y * ec;
            if wn < 0.0 {
                w_negative += 1;
            }
            w.push(wn);
        }
    }

    let mut violations = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for n in 0..v.len().saturating_sub(1) {
        let rate = (v[n + 1] - v[n]) / dt;
        let residual = rate - 0.5 * (bound[n] + bound[n + 1]);
        let scale = dt * (v[n] + opts.v_floor);
        worst = worst.max(residual / scale);
        if residual > opts.tol_constant * scale {
            violations.push((trace.records[n].t, residual));
        }
    }
    LyapunovReport { v, w, epsilon: opts.epsilon, violations, kappa: k, w_negative, worst_scaled_residual: worst }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateSearchResult {
    pub epsilon_found: Option<f64>,
    pub con1_margin: f64,
    pub con2_margin: f64,
    pub s_vector: Vector3<f64>,
    /// Input at which the con2 margin is smallest.
    pub worst_u: f64,
    pub kappa: f64,
}

/// `sᵀ = -K_I g*ᵀQ⁻¹[J0 + J1 u - R] + K_I K_P (g*ᵀQ⁻¹g*) g*ᵀ`.
pub fn s_vector(plant: &PlantParams, theta: &Theta, g: &Vector3<f64>, gains: &ControllerGains, u: f64) -> Vector3<f64> {
    let q_inv = q_matrix(plant).try_inverse().expect("Q is diagonal positive");
    let a = j0_matrix() + j1_matrix() * u - r_matrix(theta.theta_r1, theta.theta_r2);
    let qg = q_inv * g;
    let gqg = g.dot(&qg);
    -gains.ki * (a.transpose() * qg) + gains.ki * gains.kp * gqg * g
}

fn con_margins(
    plant: &PlantParams,
    theta: &Theta,
    g: &Vector3<f64>,
    gains: &ControllerGains,
    kappa: f64,
    eps: f64,
    u: f64,
) -> (f64, f64, Vector3<f64>) {
    let q = q_matrix(plant);
    let ggt = g * g.transpose();
    let con1 = min_eigenvalue(q - eps * eps * gains.ki * ggt);
    let s = s_vector(plant, theta, g, gains, u);
    let gqg = g.dot(&(q.try_inverse().expect("Q invertible") * g));
    let m = if gqg > 0.0 {
        Matrix3::identity() * kappa + gains.kp * ggt
            - eps * (gains.ki * ggt + (s * s.transpose()) / (4.0 * gains.ki * gains.ki * gqg))
    } else {
        Matrix3::identity() * kappa
    };
    (con1, min_eigenvalue(m), s)
}

/// Largest ε on a log grid over `[1e-9, 1]` for which both positivity
/// conditions hold, con2 taken at the worst `u` of a grid over `u_range`.
pub fn find_epsilon_certificate(
    eq: &EquilibriumPoint,
    plant: &PlantParams,
    gains: &ControllerGains,
    alpha: f64,
    u_range: (f64, f64),
    u_points: usize,
) -> Result<CertificateSearchResult> {
    if !(u_range.0 > 0.0 && u_range.0 <= u_range.1 && u_range.1 < 1.0) {
        return Err(Error::InvalidParameter(format!("u range {u_range:?} must lie in (0, 1)")));
    }
    let theta = eq.theta_used;
    let k = kappa(alpha, theta.theta_r1, theta.theta_r2);
    let g = g_star(&eq.x_star);
    let n_u = u_points.max(2);
    let us: Vec<f64> = (0..n_u).map(|i| u_range.0 + (u_range.1 - u_range.0) * i as f64 / (n_u - 1) as f64).collect();

    const PER_DECADE: usize = 20;
    let n_eps = 9 * PER_DECADE;
    for i in (0..=n_eps).rev() {
        let eps = 10f64.powf(-9.0 + i as f64 / PER_DECADE as f64);
        let mut worst = (f64::INFINITY, f64::INFINITY, Vector3::zeros(), us[0]);
        for &u in &us {
            let (c1, c2, s) = con_margins(plant, &theta, &g, gains, k, eps, u);
            if c2 < worst.1 {
                worst = (c1, c2, s, u);
            }
        }
        if worst.0 > 0.0 && worst.1 > 0.0 {
            return Ok(CertificateSearchResult {
                epsilon_found: Some(eps),
                con1_margin: worst.0,
                con2_margin: worst.1,
                s_vector: worst.2,
                worst_u: worst.3,
                kappa: k,
            });
        }
    }
    Err(Error::NoCertificate)
}

/// `max |g*ᵀ Q⁻¹ v1 (I_fc(x1) - I_fc(x1*))|` over the samples for an
/// arbitrary input direction `g`.
pub fn orthogonality_residual(g: &Vector3<f64>, plant: &PlantParams, x1_star: f64, samples: &[PlantState]) -> Result<f64> {
    let i_star = plant.curve.current(x1_star)?;
    let weight = g[0] / plant.c_fc;
    let mut worst = 0.0f64;
    for x in samples {
        let di = plant.curve.current(x.x1)? - i_star;
        worst = worst.max((weight * di).abs());
    }
    Ok(worst)
}

pub fn check_orthogonality(eq: &EquilibriumPoint, plant: &PlantParams, samples: &[PlantState]) -> Result<f64> {
    orthogonality_residual(&g_star(&eq.x_star), plant, eq.x_star.x1, samples)
}

/// Exponential envelope `|x̃(t)| <= c e^(-ρ t) |x̃(0)|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeFit {
    pub rho: f64,
    pub c: f64,
    pub samples: usize,
}

/// Least-squares decay rate of `ln|x̃|`, then the smallest `c` that makes the
/// envelope hold on every sample. Samples below `floor * |x̃(0)|` are dropped
/// (rounding noise).
pub fn fit_exponential_envelope(times: &[f64], norms: &[f64], floor: f64) -> Option<EnvelopeFit> {
    let n0 = *norms.first()?;
    if !(n0 > 0.0) {
        return None;
    }
    let cut = norms.iter().position(|&v| v < floor * n0).unwrap_or(norms.len());
    if cut < 3 {
        return None;
    }
    let (t, y): (Vec<f64>, Vec<f64>) = times[..cut].iter().zip(&norms[..cut]).map(|(&t, &v)| (t - times[0], (v / n0).ln())).unzip();
    let m = t.len() as f64;
    let tm = t.iter().sum::<f64>() / m;
    let ym = y.iter().sum::<f64>() / m;
    let cov: f64 = t.iter().zip(&y).map(|(a, b)| (a - tm) * (b - ym)).sum();
    let var: f64 = t.iter().map(|a| (a - tm).powi(2)).sum();
    if var == 0.0 {
        return None;
    }
    let rho = -cov / var;
    let c = t.iter().zip(&y).map(|(a, b)| (b + rho * a).exp()).fold(1.0f64, f64::max);
    Some(EnvelopeFit { rho, c, samples: cut })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityReport {
    pub alpha: f64,
    pub pairs: usize,
    pub violations: usize,
    /// Smallest `(a-b)(I(b)-I(a)) / (α (a-b)²)` over the pairs; >= 1 passes.
    pub worst_ratio: f64,
}

/// Monte Carlo check of strong monotonicity of `-I_fc` on `[lo, hi]`.
pub fn check_monotonicity(curve: &FcCurve, lo: f64, hi: f64, pairs: usize, seed: u64) -> Result<MonotonicityReport> {
    let alpha = curve.monotonicity_constant(lo, hi)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    let mut done = 0;
    while done < pairs {
        let a = rng.random_range(lo..=hi);
        let b = rng.random_range(lo..=hi);
        let d = a - b;
        if d.abs() < 1e-6 * (hi - lo) {
            continue;
        }
        done += 1;
        let lhs = d * (curve.current(b)? - curve.current(a)?);
        let rhs = alpha * d * d;
        worst = worst.min(lhs / rhs);
        // Relative slack for rounding in the current difference.
        if lhs < rhs * (1.0 - 1e-9) {
            violations += 1;
        }
    }
    Ok(MonotonicityReport { alpha, pairs, violations, worst_ratio: worst })
}

/// Largest relative gap between the closed-form slope and a central finite
/// difference at `points` evenly spaced voltages in `[lo, hi]`.
pub fn check_slope_finite_difference(curve: &FcCurve, lo: f64, hi: f64, points: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for k in 0..points {
        let v = lo + (hi - lo) * k as f64 / (points.max(2) - 1) as f64;
        let h = 1e-4 * (curve.e_oc - v);
        let fd = (curve.current(v - h)? - curve.current(v + h)?) / (2.0 * h);
        let s = curve.slope(v)?;
        worst = worst.max(((fd - s) / s).abs());
    }
    Ok(worst)
}

/// Running integrals of the excitation signals `x2²`, `x3²`, `φ²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExcitationReport {
    pub integrals: [f64; 3],
    /// Smallest growth per unit time over consecutive windows.
    pub min_growth: [f64; 3],
    pub threshold: f64,
}

impl ExcitationReport {
    pub fn sufficient(&self, which: usize) -> bool {
        self.min_growth[which] > self.threshold
    }
}

pub fn excitation_report(trace: &SimTrace, window: f64, threshold: f64) -> ExcitationReport {
    let dt = trace.dt;
    let per = ((window / dt).round() as usize).max(1);
    let mut integrals = [0.0; 3];
    let mut min_growth = [f64::INFINITY; 3];
    for chunk in trace.records.chunks(per) {
        let mut acc = [0.0; 3];
        for r in chunk {
            acc[0] += r.x2 * r.x2 * dt;
            acc[1] += r.x3 * r.x3 * dt;
            acc[2] += r.phi * r.phi * dt;
        }
        if chunk.len() == per {
            for k in 0..3 {
                min_growth[k] = min_growth[k].min(acc[k] / window);
            }
        }
        for k in 0..3 {
            integrals[k] += acc[k];
        }
    }
    for g in &mut min_growth {
        if !g.is_finite() {
            *g = 0.0;
        }
    }
    ExcitationReport { integrals, min_growth, threshold }
}

/// True parameter values at every record of a simulated scenario.
pub fn scenario_truth(cfg: &SimConfig, scenario: &ScenarioSpec, len: usize) -> Vec<Theta> {
    let mut loads = StepLookup::new(&scenario.load, cfg.dt);
    (0..len).map(|n| Theta::from_plant(&cfg.plant.with_load(loads.at(n)))).collect()
}

/// Decay-rate fit of one estimation error over one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    pub window_start: f64,
    pub window_end: f64,
    /// `-ln(|e_end| / |e_start|) / T`.
    pub fitted: f64,
    /// Mean of `k x²` over the window.
    pub predicted_continuous: f64,
    /// `-Σ ln(1 - dt k x²) / T`, the rate the Euler recursion produces.
    pub predicted_discrete: f64,
    /// Largest `dt k x²` in the window. Near 1 the sampled update no longer
    /// behaves like a rate and the fit is only indicative.
    pub max_step_decay: f64,
}

impl RateFit {
    /// The fit is meaningful when each step removes at most this fraction.
    pub const RESOLVED_STEP_DECAY: f64 = 0.1;

    pub fn resolved(&self) -> bool {
        self.max_step_decay <= Self::RESOLVED_STEP_DECAY
    }

    pub fn relative_error(&self) -> f64 {
        ((self.fitted - self.predicted_discrete) / self.predicted_discrete).abs()
    }

    pub fn relative_error_continuous(&self) -> f64 {
        ((self.fitted - self.predicted_continuous) / self.predicted_continuous).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorRateReport {
    pub r1: Vec<RateFit>,
    pub r2: Vec<RateFit>,
    pub s2: Vec<RateFit>,
    /// Channels `[r1, r2, s2]` whose every window had too little excitation.
    pub starved: [bool; 3],
}

impl EstimatorRateReport {
    pub fn worst_relative_error(&self) -> f64 {
        self.r1.iter().chain(&self.r2).chain(&self.s2).map(RateFit::relative_error).fold(0.0, f64::max)
    }

    /// Worst error over the windows that pass [`RateFit::resolved`].
    pub fn worst_resolved_error(&self) -> Option<f64> {
        self.r1.iter().chain(&self.r2).chain(&self.s2).filter(|f| f.resolved()).map(RateFit::relative_error).reduce(f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateOptions {
    /// Window ends when `|e| < rel_floor * |θ|`.
    pub rel_floor: f64,
    /// Window also ends once `|e|` has fallen to this fraction of its starting
    /// value. Keeps the fit clear of the O(dt) bias left by the sampled update.
    pub decay_span: f64,
    /// Windows with a predicted log-decrease below this are skipped.
    pub min_log_decrease: f64,
    pub min_samples: usize,
}

impl Default for RateOptions {
    fn default() -> Self {
        RateOptions { rel_floor: 1e-7, decay_span: 1e-2, min_log_decrease: 1.0, min_samples: 2 }
    }
}

fn fit_windows(
    times: &[f64],
    err: &[f64],
    truth: &[f64],
    excitation: &[f64],
    dt: f64,
    opts: &RateOptions,
) -> (Vec<RateFit>, bool) {
    let n = err.len();
    let mut starts = vec![0];
    starts.extend((1..n).filter(|&i| truth[i] != truth[i - 1]));
    let mut fits = Vec::new();
    let mut starved = false;
    for (w, &s) in starts.iter().enumerate() {
        let stop = starts.get(w + 1).copied().unwrap_or(n);
        let abs_floor = opts.rel_floor * truth[s].abs().max(1e-12);
        if err[s].abs() <= abs_floor {
            continue;
        }
        let floor = abs_floor.max(opts.decay_span * err[s].abs());
        let mut end = s;
        while end + 1 < stop && err[end + 1].abs() > floor && err[end + 1].signum() == err[s].signum() {
            end += 1;
        }
        let mut log_cont = 0.0;
        let mut log_disc = 0.0;
        let mut max_step = 0.0f64;
        for &kx in &excitation[s + 1..=end] {
            log_cont += kx * dt;
            log_disc -= (1.0 - dt * kx).ln();
            max_step = max_step.max(dt * kx);
        }
        if end - s + 1 < opts.min_samples || log_disc < opts.min_log_decrease {
            starved = true;
            continue;
        }
        let span = times[end] - times[s];
        fits.push(RateFit {
            window_start: times[s],
            window_end: times[end],
            fitted: -(err[end].abs() / err[s].abs()).ln() / span,
            predicted_continuous: log_cont / span,
            predicted_discrete: log_disc / span,
            max_step_decay: max_step,
        });
    }
    let starved = starved && fits.is_empty();
    (fits, starved)
}

/// Fits the error decay of `θ̂_r1`, `θ̂_r2`, `θ̂_s2` in windows starting at
/// each change of the true value and compares against the excitation.
pub fn check_estimator_rates(
    trace: &SimTrace,
    truth: &[Theta],
    cfg: &EstimatorConfig,
    opts: &RateOptions,
) -> Result<EstimatorRateReport> {
    if truth.len() != trace.len() {
        return Err(Error::InvalidParameter("truth length must match the trace".into()));
    }
    let g = &cfg.gains;
    let times: Vec<f64> = trace.records.iter().map(|r| r.t).collect();
    let col = |f: &dyn Fn(&crate::sim::TraceRecord, &Theta) -> f64| -> Vec<f64> {
        trace.records.iter().zip(truth).map(|(r, th)| f(r, th)).collect()
    };
    let e_r1 = col(&|r, th| r.theta_r1_hat - th.theta_r1);
    let e_r2 = col(&|r, th| r.theta_r2_hat - th.theta_r2);
    let e_s2 = col(&|r, th| r.theta_s2_hat - th.theta_s2);
    let t_r1 = col(&|_, th| th.theta_r1);
    let t_r2 = col(&|_, th| th.theta_r2);
    let t_s2 = col(&|_, th| th.theta_s2);
    let x_r1 = col(&|r, _| g.k1 * r.x2 * r.x2);
    let x_r2 = col(&|r, _| g.k2 * r.x3 * r.x3);
    let x_s2 = col(&|r, _| g.gamma * r.phi * r.phi);

    let (r1, s1) = fit_windows(&times, &e_r1, &t_r1, &x_r1, trace.dt, opts);
    let (r2, s2_) = fit_windows(&times, &e_r2, &t_r2, &x_r2, trace.dt, opts);
    let (s2, s3) = fit_windows(&times, &e_s2, &t_s2, &x_s2, trace.dt, opts);
    Ok(EstimatorRateReport { r1, r2, s2, starved: [s1, s2_, s3] })
}

/// Verdict of a verification run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Verdict {
    Pass,
    Violation,
    InsufficientExcitation,
}

impl Verdict {
    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Violation => 1,
            Verdict::InsufficientExcitation => 2,
        }
    }
}

/// `key = value` report accumulating a verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, String)>,
    pub verdict: Verdict,
}

impl Default for Report {
    fn default() -> Self {
        Report { entries: Vec::new(), verdict: Verdict::Pass }
    }
}

impl Report {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    /// Records a named check. A violation never overrides an excitation failure.
    pub fn check(&mut self, key: &str, ok: bool) {
        self.push(key, if ok { "pass" } else { "fail" });
        if !ok && self.verdict == Verdict::Pass {
            self.verdict = Verdict::Violation;
        }
    }

    pub fn excitation_failure(&mut self, key: &str, detail: &str) {
        self.push(key, format!("insufficient-excitation ({detail})"));
        self.verdict = Verdict::InsufficientExcitation;
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "verdict = {:?}", self.verdict);
        s
    }
}
