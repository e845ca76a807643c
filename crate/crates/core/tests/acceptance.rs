//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use fcpbc::control::Saturation;
use fcpbc::estimation::{filter_step, gradient_step, iandi_init, iandi_output, iandi_step, FilterState, RegressionSample};
use fcpbc::model::plant_derivative;
use fcpbc::presets::{self, reported};
use fcpbc::sim::{edge_metrics, run_simulation, ControllerMode, Integrator, ScenarioSpec, SimConfig, SimTrace};
use fcpbc::verify::{
    check_estimator_rates, check_lyapunov_decrease, check_monotonicity, check_slope_finite_difference,
    find_epsilon_certificate, fit_exponential_envelope, scenario_truth, trace_alpha, LyapunovOptions, RateOptions,
};
use fcpbc::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn preset(name: &str, duration: f64) -> (SimConfig, ScenarioSpec) {
    let sc = ScenarioSpec::preset(name, duration).expect("known preset");
    let cfg = SimConfig { duration, plant: PlantParams::lumped(sc.load.points[0].1), ..SimConfig::default() };
    (cfg, sc)
}

fn c1_equilibria() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, (r1, r2, x3, x1_rep, x2_rep)) in
        [("48V", reported::VREF_48), ("38V", reported::VREF_38), ("load-low", reported::LOAD_LOW)]
    {
        let theta = Theta::new(r1, r2, presets::THETA_S1, presets::THETA_S2, presets::E_OC);
        match solve_equilibrium(&theta, SetpointSpec::new(x3).unwrap(), None) {
            Ok(eq) => {
                let e2 = (eq.x_star.x2 - x2_rep).abs() / x2_rep;
                let e1 = (eq.x_star.x1 - x1_rep).abs() / x1_rep;
                pass &= e2 <= 0.05 && e1 <= 0.02;
                parts.push(format!(
                    "{label}: x2*={:.4} A ({:+.2}%), x1*={:.3} V ({:+.2}%)",
                    eq.x_star.x2,
                    100.0 * (eq.x_star.x2 - x2_rep) / x2_rep,
                    eq.x_star.x1,
                    100.0 * (eq.x_star.x1 - x1_rep) / x1_rep
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{label}: {e}"));
            }
        }
    }
    outcome(pass, parts.join("; "))
}

fn regulation(name: &str, steady_tol: Option<f64>) -> (Outcome, Option<SimTrace>) {
    let (cfg, sc) = preset(name, 5.0);
    let t0 = Instant::now();
    let trace = match run_simulation(&cfg, &sc) {
        Ok(t) => t,
        Err(f) => return (outcome(false, format!("simulation failed: {f}")), None),
    };
    let elapsed = t0.elapsed().as_secs_f64();
    let metrics = edge_metrics(&trace, &sc, 0.01);
    let edges: Vec<_> = metrics.iter().filter(|m| m.edge > 0.0).collect();
    let worst_settle = edges.iter().map(|m| m.settling).fold(0.0, f64::max);
    let worst_final = edges.iter().map(|m| m.final_error).fold(0.0, f64::max);
    let mut pass = edges.len() == 9 && worst_settle <= 0.200 && elapsed < 30.0;
    let mut detail = format!(
        "{} edges, worst re-entry into the 1% band {:.1} ms (limit 200), run time {:.2} s",
        edges.len(),
        worst_settle * 1e3,
        elapsed
    );
    if let Some(tol) = steady_tol {
        pass &= worst_final < tol;
        detail.push_str(&format!(", worst steady-state error {:.2e} (limit {tol:.0e})", worst_final));
    }
    (outcome(pass, detail), Some(trace))
}

/// Closed-form decay checks with constant excitation.
fn closed_form_rates() -> (bool, String) {
    // I&I on a clamped state that is an equilibrium of the true plant.
    let (k1, k2) = (presets::K1, presets::K2);
    let base = PlantParams::lumped(0.05);
    let (x2, x3) = (6.0, 40.0);
    let x1 = base.curve.voltage(x2);
    let u = (x1 - base.theta_r1 * x2) / x3;
    let p = base.with_load(u * x2 / x3);
    let x = PlantState::new(x1, x2, x3);
    let u = ControlInput::new(u).unwrap();
    let d = plant_derivative(&p, &x, u).unwrap();
    let stationary = d.x2.abs() < 1e-9 && d.x3.abs() < 1e-9;
    let dt = 2e-6;
    let mut xi = iandi_init((0.1, 0.2), &x, p.l, p.c, k1, k2);
    let (mut e1, mut e2) = (Vec::new(), Vec::new());
    for _ in 0..=35_000 {
        let (r1, r2) = iandi_output(xi, &x, p.l, p.c, k1, k2);
        e1.push(r1 - p.theta_r1);
        e2.push(r2 - p.theta_r2);
        xi = iandi_step(xi, &x, u, p.l, p.c, k1, k2, dt);
    }
    let rate = |e: &[f64], dt: f64| -(e[e.len() - 1].abs() / e[0].abs()).ln() / ((e.len() - 1) as f64 * dt);
    let q1 = rate(&e1, dt) / (k1 * x2 * x2) - 1.0;
    let q2 = rate(&e2[..800], dt) / (k2 * x3 * x3) - 1.0;

    // Gradient with constant regressor at the control rate.
    let (gamma, c, s2) = (presets::GAMMA, 0.8, 0.865);
    let mut th = 1.5;
    let mut es = vec![th - s2];
    for _ in 0..20_000 {
        let s = RegressionSample { y: c * s2, phi: c, clamped: false };
        th = gradient_step(th, &s, gamma, (0.05, 5.0), presets::DT).0;
        es.push(th - s2);
    }
    let q3 = rate(&es, presets::DT) / (gamma * c * c) - 1.0;
    let ok = stationary && q1.abs() < 0.02 && q2.abs() < 0.02 && q3.abs() < 0.02;
    (ok, format!("closed-form rate gaps r1 {:+.2}%, r2 {:+.2}%, s2 {:+.2}%", 100.0 * q1, 100.0 * q2, 100.0 * q3))
}

fn on_curve_s2() -> (bool, String) {
    let est = Estimator::new(EstimatorConfig::default()).unwrap();
    let curve = FcCurve::bench();
    let i_at = |t: f64| 5.0 + 2.5 * (2.0 * std::f64::consts::PI * 0.7 * t).sin();
    let x_at = |t: f64| PlantState::new(curve.voltage(i_at(t)), i_at(t), 48.0);
    let mut es = est.init(&x_at(0.0), i_at(0.0));
    let mut entered = None;
    let n = (10.0 / presets::DT).round() as usize;
    for k in 1..=n {
        let t = k as f64 * presets::DT;
        es = est.step(&es, &x_at(t), i_at(t), ControlInput::new(0.6).unwrap(), presets::DT).1;
        let inside = (es.theta_s2 - curve.theta_s2).abs() < 0.01 * curve.theta_s2;
        match (inside, entered) {
            (true, None) => entered = Some(t),
            (false, Some(_)) => entered = None,
            _ => {}
        }
    }
    match entered {
        Some(t) => (true, format!("theta_s2 within 1% from t = {t:.2} s on on-curve data")),
        None => (false, format!("theta_s2 = {:.4} not within 1% at 10 s", es.theta_s2)),
    }
}

fn c4_estimator(load_trace: Option<&SimTrace>) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    let (cfg, sc) = preset("load-pulse", 5.0);
    match load_trace {
        Some(trace) => {
            let truth = scenario_truth(&cfg, &sc, trace.len());
            let mut worst = 0.0f64;
            let mut starts = vec![0usize];
            starts.extend((1..truth.len()).filter(|&i| truth[i].theta_r2 != truth[i - 1].theta_r2));
            for (w, &s) in starts.iter().enumerate().skip(1) {
                let stop = starts.get(w + 1).copied().unwrap_or(truth.len());
                let rel = |i: usize| (trace.records[i].theta_r2_hat - truth[i].theta_r2).abs() / truth[i].theta_r2;
                // Last sample of the window outside 1%; convergence time is the one after.
                let last_out = (s..stop).rev().find(|&i| rel(i) >= 0.01);
                let t_conv = last_out.map_or(0.0, |i| trace.records[i].t + trace.dt - trace.records[s].t);
                worst = worst.max(t_conv);
            }
            let ok = worst <= 2.0 && starts.len() == 10;
            pass &= ok;
            parts.push(format!("theta_r2 within 1% {:.1} ms after the worst load step", worst * 1e3));
            match check_estimator_rates(trace, &truth, &cfg.estimator, &RateOptions::default()) {
                Ok(rep) => {
                    // Informational: at 100 µs a step removes about half the r2 error,
                    // so a first-order rate is only indicative for that channel.
                    let worst = |fits: &[fcpbc::verify::RateFit]| fits.iter().map(|f| f.relative_error()).fold(0.0, f64::max);
                    parts.push(format!(
                        "closed-loop fitted rates vs discrete prediction (info): r1 {:.1}%, r2 {:.1}%, s2 {:.1}%",
                        100.0 * worst(&rep.r1),
                        100.0 * worst(&rep.r2),
                        100.0 * worst(&rep.s2)
                    ));
                }
                Err(e) => {
                    pass = false;
                    parts.push(format!("rate fit: {e}"));
                }
            }
        }
        None => {
            pass = false;
            parts.push("no load-pulse trace".into());
        }
    }
    let (ok, d) = on_curve_s2();
    pass &= ok;
    parts.push(d);
    let (ok, d) = closed_form_rates();
    pass &= ok;
    parts.push(d);
    outcome(pass, parts.join("; "))
}

fn c5_lyapunov() -> Outcome {
    let plant = PlantParams::nominal(presets::VREF_PULSE_LOAD);
    let theta = Theta::from_plant(&plant);
    let eq = solve_equilibrium(&theta, SetpointSpec::new(48.0).unwrap(), None).unwrap();
    let gains = ControllerGains::bench();
    let sat = Saturation::default();
    let band_alpha = plant.curve.monotonicity_constant(0.5 * eq.x_star.x1, 0.99 * plant.curve.e_oc).unwrap();
    let cert = find_epsilon_certificate(&eq, &plant, &gains, band_alpha, (sat.u_min, sat.u_max), 19);
    let eps = cert.as_ref().ok().and_then(|c| c.epsilon_found);

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x1_up = ((0.99 * plant.curve.e_oc - eq.x_star.x1) / eq.x_star.x1).min(0.2);
    let mut violations = 0;
    let mut w_negative = 0;
    let mut min_rho = f64::INFINITY;
    let mut worst_ratio = 0.0f64;
    let mut failures = 0;
    for _ in 0..10 {
        let f1 = rng.random_range(-0.2..=x1_up);
        let f2 = rng.random_range(-0.2..=0.2);
        let f3 = rng.random_range(-0.2..=0.2);
        let x0 = PlantState::new(eq.x_star.x1 * (1.0 + f1), eq.x_star.x2 * (1.0 + f2), eq.x_star.x3 * (1.0 + f3));
        let cfg = SimConfig {
            dt: 1e-6,
            duration: 0.3,
            plant_substeps: 1,
            integrator: Integrator::Rk4Reference,
            mode: ControllerMode::FullInfo,
            plant,
            initial_state: Some(x0),
            saturation: None,
            ..SimConfig::default()
        };
        let trace = match run_simulation(&cfg, &ScenarioSpec::constant(48.0, plant.theta_r2)) {
            Ok(t) => t,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let alpha = trace_alpha(&trace, &plant.curve, eq.x_star.x1).unwrap();
        let rep = check_lyapunov_decrease(
            &trace,
            &plant,
            &eq,
            &gains,
            alpha,
            &LyapunovOptions { epsilon: eps, ..LyapunovOptions::default() },
        );
        violations += rep.violations.len();
        w_negative += rep.w_negative;
        worst_ratio = worst_ratio.max(rep.v.last().unwrap() / rep.v[0]);
        let times: Vec<f64> = trace.records.iter().map(|r| r.t).collect();
        let norms: Vec<f64> = trace.records.iter().map(|r| r.state().sub(&eq.x_star).norm()).collect();
        min_rho = min_rho.min(fit_exponential_envelope(&times, &norms, 1e-9).map_or(f64::NEG_INFINITY, |f| f.rho));
    }
    let pass = failures == 0 && violations == 0 && w_negative == 0 && min_rho > 0.0 && worst_ratio < 1e-6 && eps.is_some();
    let cert_txt = match &cert {
        Ok(c) => format!("certificate eps = {:.3e} (con1 {:.3e}, con2 {:.3e})", c.epsilon_found.unwrap(), c.con1_margin, c.con2_margin),
        Err(e) => format!("certificate: {e}"),
    };
    outcome(
        pass,
        format!(
            "10 runs, {failures} failed, {violations} dV violations, {w_negative} negative W, min rho {:.1} 1/s, worst V_end/V_0 {:.1e}; {cert_txt}",
            min_rho, worst_ratio
        ),
    )
}

fn c6_monotonicity() -> Outcome {
    let curve = FcCurve::bench();
    let (r1, r2, x3, ..) = reported::VREF_48;
    let theta = Theta::new(r1, r2, curve.theta_s1, curve.theta_s2, curve.e_oc);
    let x1_star = solve_equilibrium(&theta, SetpointSpec::new(x3).unwrap(), None).unwrap().x_star.x1;
    let (lo, hi) = (0.5 * x1_star, 0.99 * curve.e_oc);
    let mc = check_monotonicity(&curve, lo, hi, 100_000, 7).unwrap();
    let fd = check_slope_finite_difference(&curve, lo, hi, 1000).unwrap();
    outcome(
        mc.violations == 0 && fd < 1e-6,
        format!(
            "alpha = {:.4e} on [{lo:.2}, {hi:.2}] V, {} pairs, {} violations, worst ratio {:.4}; slope vs central difference max rel gap {:.1e}",
            mc.alpha, mc.pairs, mc.violations, mc.worst_ratio, fd
        ),
    )
}

/// `max_i max_t |a_i - b_i| / range(b_i)` over the three states.
fn relative_deviation(a: &SimTrace, b: &SimTrace) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..3 {
        let get = |r: &fcpbc::sim::TraceRecord| [r.x1, r.x2, r.x3][k];
        let (lo, hi) = b.records.iter().map(get).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        let dev = a.records.iter().zip(&b.records).map(|(p, q)| (get(p) - get(q)).abs()).fold(0.0, f64::max);
        worst = worst.max(dev / (hi - lo));
    }
    worst
}

fn c7_scheme() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["vref-pulse", "load-pulse"] {
        let (cfg, sc) = preset(name, 5.0);
        let run = |substeps: usize, integrator: Integrator, duration: f64| {
            run_simulation(&SimConfig { plant_substeps: substeps, integrator, duration, ..cfg }, &sc)
        };
        let (Ok(euler), Ok(rk4)) = (run(100, Integrator::Euler, 5.0), run(10, Integrator::Rk4Reference, 5.0)) else {
            pass = false;
            parts.push(format!("{name}: simulation failed"));
            continue;
        };
        let dev = relative_deviation(&euler, &rk4);
        let (Ok(h1), Ok(h2)) = (run(200, Integrator::Euler, 2.0), run(400, Integrator::Euler, 2.0)) else {
            pass = false;
            parts.push(format!("{name}: refinement failed"));
            continue;
        };
        let h0 = SimTrace { dt: euler.dt, records: euler.records[..h1.len()].to_vec() };
        let ratio = relative_deviation(&h0, &h1) / relative_deviation(&h1, &h2);
        pass &= dev < 0.005 && (1.8..=2.2).contains(&ratio);
        parts.push(format!("{name}: Euler vs RK4 max deviation {:.3}% of range, halving ratio {:.3}", 100.0 * dev, ratio));
    }
    outcome(pass, parts.join("; "))
}

fn c8_lre() -> Outcome {
    let dt = presets::DT;
    let lambda = presets::LAMBDA;
    let curve = FcCurve::bench();
    let mut fs: Option<FilterState> = None;
    let mut worst = 0.0f64;
    for n in 0..((12.0 / lambda / dt) as usize) {
        let t = n as f64 * dt;
        let i_fc = 5.0 + 2.0 * (2.0 * std::f64::consts::PI * 1.3 * t).sin();
        let x1 = curve.voltage(i_fc);
        let f = *fs.get_or_insert_with(|| FilterState::primed(lambda, x1, i_fc, curve.e_oc).unwrap());
        let (s, nf) = f.regression_sample(x1, i_fc, curve.e_oc, dt);
        fs = Some(nf);
        if t >= 10.0 / lambda {
            worst = worst.max((s.y - s.phi * curve.theta_s2).abs());
        }
    }

    let mut z = 0.0;
    let mut step_gap = 0.0f64;
    for n in 0..((1.0 / lambda / dt) as usize) {
        let (y, nz) = filter_step(z, lambda, 1.0, dt);
        let exact = lambda * (-lambda * n as f64 * dt).exp();
        step_gap = step_gap.max(((y - exact) / exact).abs());
        z = nz;
    }
    let (m, mut z, mut y) = (2.5, 0.0, 0.0);
    for n in 0..=((20.0 / lambda / dt) as usize) {
        (y, z) = filter_step(z, lambda, m * n as f64 * dt, dt);
    }
    let ramp_gap = ((y - m) / m).abs();
    let mut z = 3.7;
    let mut dc = 0.0f64;
    for _ in 0..10_000 {
        let (y, nz) = filter_step(z, lambda, 3.7, dt);
        dc = dc.max(y.abs());
        z = nz;
    }
    outcome(
        worst < 1e-6 && step_gap < 1e-3 && ramp_gap < 1e-3 && dc == 0.0,
        format!(
            "LRE residual after 10/lambda {:.1e}; filter step gap {:.3}%, ramp gap {:.3}%, DC output {:.1e}",
            worst,
            100.0 * step_gap,
            100.0 * ramp_gap,
            dc
        ),
    )
}

fn main() -> ExitCode {
    let t0 = Instant::now();
    let (results, load_trace) = std::thread::scope(|s| {
        let h1 = s.spawn(c1_equilibria);
        let h2 = s.spawn(|| regulation("load-pulse", None));
        let h3 = s.spawn(|| regulation("vref-pulse", Some(1e-3)));
        let h5 = s.spawn(c5_lyapunov);
        let h6 = s.spawn(c6_monotonicity);
        let h7 = s.spawn(c7_scheme);
        let h8 = s.spawn(c8_lre);
        let (o2, load_trace) = h2.join().unwrap();
        let o4 = c4_estimator(load_trace.as_ref());
        let results = vec![
            (1, "equilibrium reproduction", h1.join().unwrap()),
            (2, "adaptive regulation, load pulsing", o2),
            (3, "adaptive regulation, reference pulsing", h3.join().unwrap().0),
            (4, "estimator convergence", o4),
            (5, "Lyapunov suite", h5.join().unwrap()),
            (6, "monotonicity suite", h6.join().unwrap()),
            (7, "numerical-scheme oracle", h7.join().unwrap()),
            (8, "LRE correctness", h8.join().unwrap()),
        ];
        (results, load_trace)
    });
    drop(load_trace);
    let mut all = true;
    for (n, name, o) in &results {
        all &= o.pass;
        println!("criterion {n} [{name}]: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {} in {:.1} s", if all { "all criteria pass" } else { "FAILURES" }, t0.elapsed().as_secs_f64());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
