use std::fmt::Write as _;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fcpbc::equilibrium::SolverOptions;
use fcpbc::sim::{
    edge_metrics, read_measurements, replay_estimator, true_equilibrium, write_replay_csv, FloatFormat, SimFailure,
    TraceFlags,
};
use fcpbc::verify::{
    check_estimator_rates, check_lyapunov_decrease, check_monotonicity, check_orthogonality,
    check_slope_finite_difference, excitation_report, fit_exponential_envelope, find_epsilon_certificate,
    scenario_truth, trace_alpha, LyapunovOptions, RateOptions, Report,
};
use fcpbc::{run_batch, run_simulation, ControllerMode, SetpointSpec, SimTrace, Theta};

use crate::config::{load_or_default, FileConfig, Overrides, Resolved};
use crate::exit::{self, CliError};
use crate::manifest::{ensure_dir, RunManifest};

pub const REGULATION_BAND: f64 = 0.01;

fn mode_name(m: ControllerMode) -> &'static str {
    match m {
        ControllerMode::FullInfo => "full-info",
        ControllerMode::Adaptive => "adaptive",
        ControllerMode::OpenLoop => "open-loop",
    }
}

fn fmt_float(v: f64, format: FloatFormat) -> String {
    match format {
        FloatFormat::Significant9 => fcpbc::sim::format_significant(v, 9),
        FloatFormat::RoundTrip => format!("{v}"),
    }
}

fn num(v: f64) -> String {
    fcpbc::sim::format_significant(v, 6)
}

fn count(trace: &SimTrace, flag: TraceFlags) -> usize {
    trace.records.iter().filter(|r| r.flags.contains(flag)).count()
}

/// `key = value` summary of a simulation.
pub fn simulation_report(r: &Resolved, trace: &SimTrace, failure: Option<&SimFailure>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scenario = {}", r.scenario.name);
    let _ = writeln!(s, "controller = {}", mode_name(r.sim.mode));
    let _ = writeln!(s, "dt = {}", r.sim.dt);
    let _ = writeln!(s, "duration = {}", r.sim.duration);
    let _ = writeln!(s, "plant_substeps = {}", r.sim.plant_substeps);
    let _ = writeln!(s, "records = {}", trace.len());
    match failure {
        None => {
            let _ = writeln!(s, "status = ok");
        }
        Some(f) => {
            let _ = writeln!(s, "status = failed ({})", f.error);
        }
    }
    let metrics = edge_metrics(trace, &r.scenario, REGULATION_BAND);
    let mut worst = 0.0f64;
    for (k, m) in metrics.iter().enumerate() {
        worst = worst.max(m.settling);
        let _ = writeln!(
            s,
            "edge_{k} = t={} target={} settling_ms={:.2} final_error={:.3e} max_deviation={:.4}",
            m.edge,
            m.target,
            m.settling * 1e3,
            m.final_error,
            m.max_deviation
        );
    }
    let _ = writeln!(s, "worst_settling_ms = {:.2}", worst * 1e3);
    if let Some(last) = trace.records.last() {
        let _ = writeln!(s, "final_x1 = {}", last.x1);
        let _ = writeln!(s, "final_x2 = {}", last.x2);
        let _ = writeln!(s, "final_x3 = {}", last.x3);
        let _ = writeln!(s, "final_theta_r1_hat = {}", last.theta_r1_hat);
        let _ = writeln!(s, "final_theta_r2_hat = {}", last.theta_r2_hat);
        let _ = writeln!(s, "final_theta_s1_hat = {}", last.theta_s1_hat);
        let _ = writeln!(s, "final_theta_s2_hat = {}", last.theta_s2_hat);
    }
    for (key, flag) in [
        ("saturated_samples", TraceFlags::SATURATED),
        ("solver_failures", TraceFlags::SOLVER_FAILED),
        ("reference_held_samples", TraceFlags::REFERENCE_HELD),
        ("degenerate_root_samples", TraceFlags::DEGENERATE_ROOT),
        ("clamped_samples", TraceFlags::SAMPLE_CLAMPED),
        ("projected_samples", TraceFlags::PROJECTED),
        ("negative_estimate_samples", TraceFlags::NEGATIVE_ESTIMATE),
    ] {
        let _ = writeln!(s, "{key} = {}", count(trace, flag));
    }
    s
}

/// Simulates and fills `dir` with trace.csv, report.txt and manifest.txt.
/// Returns the exit code of the run.
pub fn simulate_into(
    r: &Resolved,
    result: Result<SimTrace, SimFailure>,
    dir: &Path,
    config: Option<&Path>,
    started: Instant,
) -> Result<i32, CliError> {
    ensure_dir(dir)?;
    let (trace, failure) = match result {
        Ok(t) => (t, None),
        Err(f) => (f.partial.clone(), Some(f)),
    };
    let code = failure.as_ref().map_or(exit::OK, |f| CliError::from(f.error.clone()).code);
    trace.write_csv_file(&dir.join("trace.csv"), r.format)?;
    let report = simulation_report(r, &trace, failure.as_ref());
    let report_path = dir.join("report.txt");
    std::fs::write(&report_path, report).map_err(|e| CliError::io(&report_path, e))?;
    let mut manifest = RunManifest {
        command: "simulate".into(),
        config: config.map(Path::to_path_buf),
        scenario: r.scenario.name.clone(),
        out_dir: dir.to_path_buf(),
        files: vec!["trace.csv".into(), "report.txt".into()],
        wall_clock: started.elapsed(),
        exit_code: code,
    };
    manifest.write()?;
    Ok(code)
}

pub fn simulate(config: Option<&Path>, ov: &Overrides, out: &Path, quiet: bool) -> Result<i32, CliError> {
    let started = Instant::now();
    let r = load_or_default(config)?.resolve(ov)?;
    let result = run_simulation(&r.sim, &r.scenario);
    if let Err(f) = &result {
        eprintln!("simulation failed: {f}");
    }
    let code = simulate_into(&r, result, out, config, started)?;
    if !quiet {
        println!("wrote {}", out.join("trace.csv").display());
        let report = std::fs::read_to_string(out.join("report.txt")).unwrap_or_default();
        for line in report.lines().filter(|l| l.starts_with("status") || l.starts_with("worst_settling")) {
            println!("{line}");
        }
    }
    Ok(code)
}

/// Parameters for the equilibrium subcommand; unset values come from the config.
#[derive(Debug, Clone, Default)]
pub struct EquilibriumArgs {
    pub theta_r1: Option<f64>,
    pub theta_r2: Option<f64>,
    pub theta_s1: Option<f64>,
    pub theta_s2: Option<f64>,
    pub e_oc: Option<f64>,
    pub x3_ref: Option<f64>,
    pub guess: Option<f64>,
}

pub fn equilibrium(config: Option<&Path>, ov: &Overrides, args: &EquilibriumArgs, quiet: bool) -> Result<i32, CliError> {
    let r = load_or_default(config)?.resolve(ov)?;
    let base = Theta::from_plant(&r.sim.plant);
    let theta = Theta::new(
        args.theta_r1.unwrap_or(base.theta_r1),
        args.theta_r2.unwrap_or(base.theta_r2),
        args.theta_s1.unwrap_or(base.theta_s1),
        args.theta_s2.unwrap_or(base.theta_s2),
        args.e_oc.unwrap_or(base.e_oc),
    );
    let x3 = args.x3_ref.unwrap_or(r.scenario.reference.points[0].1);
    let spec = SetpointSpec::new(x3).map_err(|e| CliError::config(e.to_string()))?;
    let eq = fcpbc::solve_equilibrium_with(&theta, spec, args.guess, &r.sim.solver)?;
    let x = eq.x_star;
    if !quiet {
        println!("equilibrium for x3* = {x3} V");
        println!("  x1* = {:.6} V", x.x1);
        println!("  x2* = {:.6} A", x.x2);
        println!("  x3* = {:.6} V", x.x3);
        println!("  u*  = {:.6}", eq.u_star.value());
        println!("  residual {:.3e} after {} iterations", eq.residual, eq.iterations);
        if eq.diagnostics.multiple_roots {
            println!("  note: a second, larger root exists; the smaller one is reported");
        }
        if eq.diagnostics.degenerate {
            println!("  warning: near-tangent root (assignability {:.3e})", eq.diagnostics.assignability);
        }
    }
    println!("x1_star={}", x.x1);
    println!("x2_star={}", x.x2);
    println!("x3_star={}", x.x3);
    println!("u_star={}", eq.u_star.value());
    println!("residual={:e}", eq.residual);
    println!("iterations={}", eq.iterations);
    println!("multiple_roots={}", eq.diagnostics.multiple_roots);
    println!("degenerate={}", eq.diagnostics.degenerate);
    Ok(exit::OK)
}

/// Options of the verification suite.
#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub trace: Option<PathBuf>,
    pub pairs: usize,
    pub excitation_threshold: f64,
    pub excitation_window: f64,
    pub rate_tolerance: f64,
}

impl Default for VerifyArgs {
    fn default() -> Self {
        VerifyArgs { trace: None, pairs: 100_000, excitation_threshold: 1e-3, excitation_window: 0.01, rate_tolerance: 0.2 }
    }
}

/// Ranges of records over which reference and true load are both constant.
fn constant_segments(trace: &SimTrace, truth: &[Theta]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=trace.len() {
        let boundary = i == trace.len()
            || trace.records[i].x3_ref != trace.records[i - 1].x3_ref
            || truth[i].theta_r2 != truth[i - 1].theta_r2;
        if boundary {
            out.push((start, i));
            start = i;
        }
    }
    out
}

pub fn verify_report(r: &Resolved, trace: &SimTrace, failure: Option<&SimFailure>, args: &VerifyArgs) -> Report {
    let mut rep = Report::default();
    let plant = &r.sim.plant;
    rep.push("scenario", &r.scenario.name);
    rep.push("controller", mode_name(r.sim.mode));
    rep.push("records", trace.len());
    if let Some(f) = failure {
        rep.push("simulation_error", &f.error);
    }
    rep.check("simulation_completed", failure.is_none());
    if trace.len() < 2 {
        rep.check("trace_nonempty", false);
        return rep;
    }

    let first = &trace.records[0];
    let solver = SolverOptions::default();
    let eq = match true_equilibrium(plant, first.x3_ref, plant.theta_r2, &solver, None) {
        Ok(eq) => eq,
        Err(e) => {
            rep.push("equilibrium_error", e);
            rep.check("equilibrium", false);
            return rep;
        }
    };
    let x1s = eq.x_star.x1;
    let (lo, hi) = (0.5 * x1s, 0.99 * plant.curve.e_oc);

    // Polarization curve.
    match check_monotonicity(&plant.curve, lo, hi, args.pairs, 2024) {
        Ok(m) => {
            rep.push("monotonicity_alpha", num(m.alpha));
            rep.push("monotonicity_pairs", m.pairs);
            rep.push("monotonicity_worst_ratio", num(m.worst_ratio));
            rep.check("monotonicity", m.violations == 0);
        }
        Err(e) => {
            rep.push("monotonicity_error", e);
            rep.check("monotonicity", false);
        }
    }
    match check_slope_finite_difference(&plant.curve, lo, hi, 1000) {
        Ok(gap) => {
            rep.push("slope_fd_max_rel_gap", num(gap));
            rep.check("slope_finite_difference", gap < 1e-6);
        }
        Err(e) => {
            rep.push("slope_fd_error", e);
            rep.check("slope_finite_difference", false);
        }
    }

    // Structure at the initial equilibrium.
    let samples: Vec<_> = trace.records.iter().step_by((trace.len() / 1000).max(1)).map(|r| r.state()).collect();
    match check_orthogonality(&eq, plant, &samples) {
        Ok(res) => {
            rep.push("orthogonality_residual", num(res));
            rep.check("orthogonality", res.abs() < 1e-9);
        }
        Err(e) => {
            rep.push("orthogonality_error", e);
            rep.check("orthogonality", false);
        }
    }
    let band_alpha = plant.curve.monotonicity_constant(lo, hi).unwrap_or(f64::NAN);
    let u_range = r.sim.saturation.map_or((0.01, 0.99), |s| (s.u_min, s.u_max));
    let epsilon = match find_epsilon_certificate(&eq, plant, &r.sim.gains, band_alpha, u_range, 19) {
        Ok(c) => {
            rep.push("certificate_epsilon", num(c.epsilon_found.unwrap_or(f64::NAN)));
            rep.push("certificate_con1_margin", num(c.con1_margin));
            rep.push("certificate_con2_margin", num(c.con2_margin));
            rep.check("certificate", true);
            c.epsilon_found
        }
        Err(e) => {
            rep.push("certificate_error", e);
            rep.check("certificate", false);
            None
        }
    };

    let truth = scenario_truth(&r.sim, &r.scenario, trace.len());

    // Storage decrease: full information, unsaturated segments only.
    if r.sim.mode != ControllerMode::FullInfo {
        rep.push("lyapunov", "skipped (needs full-info controller)");
    } else {
        let opts = LyapunovOptions { epsilon, ..LyapunovOptions::default() };
        let (mut checked, mut skipped, mut violations, mut w_negative) = (0, 0, 0, 0);
        let mut worst_scaled = f64::NEG_INFINITY;
        let mut min_rho = f64::INFINITY;
        for (a, b) in constant_segments(trace, &truth) {
            let seg = SimTrace { dt: trace.dt, records: trace.records[a..b].to_vec() };
            if seg.len() < 3 || seg.records.iter().any(|x| x.flags.contains(TraceFlags::SATURATED)) {
                skipped += 1;
                continue;
            }
            let seg_plant = plant.with_load(truth[a].theta_r2);
            let Ok(seq) = true_equilibrium(&seg_plant, seg.records[0].x3_ref, truth[a].theta_r2, &solver, None) else {
                skipped += 1;
                continue;
            };
            let Ok(alpha) = trace_alpha(&seg, &seg_plant.curve, seq.x_star.x1) else {
                skipped += 1;
                continue;
            };
            let l = check_lyapunov_decrease(&seg, &seg_plant, &seq, &r.sim.gains, alpha, &opts);
            checked += 1;
            violations += l.violations.len();
            w_negative += l.w_negative;
            worst_scaled = worst_scaled.max(l.worst_scaled_residual);
            let times: Vec<f64> = seg.records.iter().map(|x| x.t - seg.records[0].t).collect();
            let norms: Vec<f64> = seg.records.iter().map(|x| x.state().sub(&seq.x_star).norm()).collect();
            if let Some(fit) = fit_exponential_envelope(&times, &norms, 1e-9 * seq.x_star.norm()) {
                min_rho = min_rho.min(fit.rho);
            }
        }
        rep.push("lyapunov_segments_checked", checked);
        rep.push("lyapunov_segments_skipped_saturated", skipped);
        if checked == 0 {
            rep.push("lyapunov", "skipped (no unsaturated segment)");
        } else {
            rep.push("lyapunov_violations", violations);
            rep.push("lyapunov_w_negative", w_negative);
            rep.push("lyapunov_worst_scaled_residual", num(worst_scaled));
            rep.check("lyapunov", violations == 0 && w_negative == 0);
            if min_rho.is_finite() {
                rep.push("envelope_min_rho", num(min_rho));
            }
        }
    }

    // Estimator: excitation first, then rates.
    let window = args.excitation_window.min(0.5 * trace.records.last().map_or(0.0, |x| x.t)).max(trace.dt);
    let ex = excitation_report(trace, window, args.excitation_threshold);
    rep.push("excitation_min_growth_x2sq", num(ex.min_growth[0]));
    rep.push("excitation_min_growth_x3sq", num(ex.min_growth[1]));
    rep.push("excitation_min_growth_phisq", num(ex.min_growth[2]));
    if !(ex.sufficient(0) && ex.sufficient(1)) {
        rep.excitation_failure("estimator_excitation", "x2 or x3 in L2 over the trace");
        return rep;
    }
    match check_estimator_rates(trace, &truth, &r.sim.estimator, &RateOptions::default()) {
        Ok(rates) => {
            let worst = |f: &[fcpbc::verify::RateFit]| f.iter().map(|x| x.relative_error()).fold(0.0, f64::max);
            rep.push("rate_windows", rates.r1.len() + rates.r2.len() + rates.s2.len());
            rep.push("rate_worst_gap_r1", num(worst(&rates.r1)));
            rep.push("rate_worst_gap_r2", num(worst(&rates.r2)));
            rep.push("rate_worst_gap_s2", num(worst(&rates.s2)));
            for (name, starved) in ["r1", "r2", "s2"].iter().zip(rates.starved) {
                if starved {
                    rep.push(format!("rate_{name}"), "not asserted (insufficient excitation)");
                }
            }
            match rates.worst_resolved_error() {
                Some(g) => rep.check("estimator_rates", g <= args.rate_tolerance),
                None => rep.push("estimator_rates", "no resolved windows"),
            }
        }
        Err(e) => {
            rep.push("estimator_rates_error", e);
            rep.check("estimator_rates", false);
        }
    }
    if !ex.sufficient(2) {
        rep.push("phi_excitation", "insufficient; theta_s2 convergence not asserted");
    }
    rep
}

pub fn verify(
    config: Option<&Path>,
    ov: &Overrides,
    args: &VerifyArgs,
    out: Option<&Path>,
    quiet: bool,
) -> Result<i32, CliError> {
    let started = Instant::now();
    let mut r = load_or_default(config)?.resolve(ov)?;
    let (trace, failure) = match &args.trace {
        Some(path) => {
            let f = File::open(path).map_err(|e| CliError::io(path, e))?;
            let t = SimTrace::read_csv(std::io::BufReader::new(f))?;
            r.sim.dt = t.dt;
            (t, None)
        }
        None => match run_simulation(&r.sim, &r.scenario) {
            Ok(t) => (t, None),
            Err(f) => (f.partial.clone(), Some(f)),
        },
    };
    let rep = verify_report(&r, &trace, failure.as_ref(), args);
    let text = rep.render();
    if !quiet {
        print!("{text}");
    }
    let code = rep.verdict.exit_code();
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let path = dir.join("report.txt");
        std::fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
        let mut files = vec!["report.txt".to_string()];
        if args.trace.is_none() {
            trace.write_csv_file(&dir.join("trace.csv"), r.format)?;
            files.push("trace.csv".into());
        }
        let mut m = RunManifest {
            command: "verify".into(),
            config: config.map(Path::to_path_buf),
            scenario: r.scenario.name.clone(),
            out_dir: dir.to_path_buf(),
            files,
            wall_clock: started.elapsed(),
            exit_code: code,
        };
        m.write()?;
    }
    Ok(code)
}

pub fn replay(
    input: &Path,
    config: Option<&Path>,
    ov: &Overrides,
    dt: Option<f64>,
    out: &Path,
    quiet: bool,
) -> Result<i32, CliError> {
    let started = Instant::now();
    let r = load_or_default(config)?.resolve(ov)?;
    let f = File::open(input).map_err(|e| CliError::io(input, e))?;
    let rows = read_measurements(std::io::BufReader::new(f))?;
    let dt = match dt.or(ov.dt) {
        Some(d) => d,
        None if config.is_some() => r.sim.dt,
        None if rows.len() >= 2 => rows[1].t - rows[0].t,
        None => r.sim.dt,
    };
    let records = replay_estimator(&r.sim.estimator, &rows, dt)?;
    let clamped = records.iter().filter(|x| x.clamped).count();
    if clamped > 0 {
        eprintln!("replay: {clamped} samples outside the regression domain were skipped");
    }
    ensure_dir(out)?;
    let path = out.join("estimates.csv");
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_replay_csv(&records, BufWriter::new(file), r.format)?;
    let last = records.last().expect("at least one row");
    let mut report = String::new();
    let _ = writeln!(report, "input = {}", input.display());
    let _ = writeln!(report, "rows = {}", records.len());
    let _ = writeln!(report, "dt = {dt}");
    let _ = writeln!(report, "clamped_samples = {clamped}");
    for (k, v) in [
        ("final_theta_r1_hat", last.theta_r1_hat),
        ("final_theta_r2_hat", last.theta_r2_hat),
        ("final_theta_s1_hat", last.theta_s1_hat),
        ("final_theta_s2_hat", last.theta_s2_hat),
    ] {
        let _ = writeln!(report, "{k} = {}", fmt_float(v, r.format));
    }
    let rpath = out.join("report.txt");
    std::fs::write(&rpath, &report).map_err(|e| CliError::io(&rpath, e))?;
    let mut m = RunManifest {
        command: "replay-estimator".into(),
        config: config.map(Path::to_path_buf),
        scenario: format!("replay of {}", input.display()),
        out_dir: out.to_path_buf(),
        files: vec!["estimates.csv".into(), "report.txt".into()],
        wall_clock: started.elapsed(),
        exit_code: exit::OK,
    };
    m.write()?;
    if !quiet {
        println!("wrote {}", path.display());
    }
    Ok(exit::OK)
}

/// Thread cap from `FCPBC_THREADS`; unset or invalid means all cores.
pub fn thread_cap() -> Option<usize> {
    std::env::var("FCPBC_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|&n| n > 0)
}

fn unique_name(base: String, taken: &mut Vec<String>) -> String {
    let mut name = base.clone();
    let mut k = 2;
    while taken.contains(&name) {
        name = format!("{base}-{k}");
        k += 1;
    }
    taken.push(name.clone());
    name
}

/// Runs every config (crossed with every `--scenario` given) in parallel,
/// one output directory each. Returns the worst exit code.
pub fn batch(configs: &[PathBuf], scenarios: &[String], ov: &Overrides, out: &Path, quiet: bool) -> Result<i32, CliError> {
    let started = Instant::now();
    let mut jobs: Vec<(String, Option<PathBuf>, Resolved)> = Vec::new();
    let mut taken = Vec::new();
    let sources: Vec<(Option<PathBuf>, FileConfig)> = if configs.is_empty() {
        vec![(None, FileConfig::default())]
    } else {
        configs.iter().map(|p| FileConfig::load(p).map(|c| (Some(p.clone()), c))).collect::<Result<_, _>>()?
    };
    let scen: Vec<Option<String>> =
        if scenarios.is_empty() { vec![ov.scenario.clone()] } else { scenarios.iter().cloned().map(Some).collect() };
    for (path, cfg) in &sources {
        for sc in &scen {
            let o = Overrides { scenario: sc.clone(), ..ov.clone() };
            let r = cfg.resolve(&o)?;
            let stem = path.as_ref().and_then(|p| p.file_stem()).map(|s| s.to_string_lossy().into_owned());
            let base = match (stem, scenarios.is_empty()) {
                (Some(s), true) => s,
                (Some(s), false) => format!("{s}-{}", r.scenario.name),
                (None, _) => r.scenario.name.clone(),
            };
            jobs.push((unique_name(base, &mut taken), path.clone(), r));
        }
    }
    let entries: Vec<_> = jobs.iter().map(|(_, _, r)| (r.sim, r.scenario.clone())).collect();
    let results = run_batch(&entries, thread_cap());
    ensure_dir(out)?;
    let mut worst = exit::OK;
    let mut summary = String::new();
    for ((name, path, r), result) in jobs.iter().zip(results) {
        let code = simulate_into(r, result, &out.join(name), path.as_deref(), started)?;
        worst = worst.max(code);
        let _ = writeln!(summary, "{name} = exit {code}");
        if !quiet {
            println!("{name}: exit {code}");
        }
    }
    let spath = out.join("report.txt");
    std::fs::write(&spath, &summary).map_err(|e| CliError::io(&spath, e))?;
    let mut files: Vec<String> = jobs.iter().flat_map(|(n, _, _)| [format!("{n}/trace.csv"), format!("{n}/manifest.txt")]).collect();
    files.push("report.txt".into());
    let mut m = RunManifest {
        command: "batch".into(),
        config: None,
        scenario: format!("{} runs", jobs.len()),
        out_dir: out.to_path_buf(),
        files,
        wall_clock: started.elapsed(),
        exit_code: worst,
    };
    m.write()?;
    Ok(worst)
}
