//! Run configuration: a TOML file overlaid on preset defaults, then CLI flags.

use std::path::Path;

use fcpbc::sim::{FloatFormat, NoiseConfig, Schedule};
use fcpbc::{ControllerMode, FcCurve, Integrator, PlantParams, PlantState, Saturation, ScenarioSpec, SimConfig};
use serde::Deserialize;

use crate::exit::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub plant: PlantSection,
    #[serde(default)]
    pub controller: ControllerSection,
    #[serde(default)]
    pub estimator: EstimatorSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub initial: InitialSection,
    pub noise: Option<NoiseSection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub dt: Option<f64>,
    pub duration: Option<f64>,
    pub plant_substeps: Option<usize>,
    pub integrator: Option<Integrator>,
    pub controller: Option<ControllerMode>,
    pub decimation: Option<usize>,
    pub open_loop_u: Option<f64>,
    pub seed: Option<u64>,
    pub fault_flip_output: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    /// `vref-pulse`, `load-pulse` or `constant`.
    pub preset: Option<String>,
    pub name: Option<String>,
    /// `[[t, x3_ref], ...]`
    pub reference: Option<Vec<(f64, f64)>>,
    /// `[[t, theta_r2], ...]`
    pub load: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantBase {
    /// Table I with the lumped series resistance identified in the experiments.
    #[default]
    Lumped,
    /// Table I parasitic resistance only.
    Nominal,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub base: Option<PlantBase>,
    pub c_fc: Option<f64>,
    pub l: Option<f64>,
    pub c: Option<f64>,
    pub theta_r1: Option<f64>,
    pub e_oc: Option<f64>,
    pub theta_s1: Option<f64>,
    pub theta_s2: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub kp: Option<f64>,
    pub ki: Option<f64>,
    pub saturation: Option<bool>,
    pub u_min: Option<f64>,
    pub u_max: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub gamma: Option<f64>,
    pub k1: Option<f64>,
    pub k2: Option<f64>,
    pub lambda: Option<f64>,
    pub theta_r1_prior: Option<f64>,
    pub theta_r2_prior: Option<f64>,
    pub theta_s1_prior: Option<f64>,
    pub theta_s2_prior: Option<f64>,
    pub theta_s2_min: Option<f64>,
    pub theta_s2_max: Option<f64>,
    pub theta_s1_smoothing: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub max_iterations: Option<usize>,
    pub rel_tolerance: Option<f64>,
    pub degeneracy_margin: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub x1: Option<f64>,
    pub x2: Option<f64>,
    pub x3: Option<f64>,
    pub xc: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub voltage_sigma: f64,
    #[serde(default)]
    pub current_sigma: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FloatFormatName {
    #[default]
    Significant9,
    RoundTrip,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub float_format: Option<FloatFormatName>,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scenario: Option<String>,
    pub controller: Option<ControllerMode>,
    pub dt: Option<f64>,
    pub duration: Option<f64>,
    pub seed: Option<u64>,
    pub exact: bool,
    pub fault_flip_output: bool,
}

/// A fully resolved run.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub sim: SimConfig,
    pub scenario: ScenarioSpec,
    pub format: FloatFormat,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(e.to_string()))
    }

    pub fn resolve(&self, ov: &Overrides) -> Result<Resolved, CliError> {
        let mut sim = SimConfig::default();
        let run = &self.run;
        sim.dt = ov.dt.or(run.dt).unwrap_or(sim.dt);
        sim.duration = ov.duration.or(run.duration).unwrap_or(sim.duration);
        sim.plant_substeps = run.plant_substeps.unwrap_or(sim.plant_substeps);
        sim.integrator = run.integrator.unwrap_or(sim.integrator);
        sim.mode = ov.controller.or(run.controller).unwrap_or(sim.mode);
        sim.decimation = run.decimation.unwrap_or(sim.decimation);
        sim.open_loop_u = run.open_loop_u;
        sim.fault_flip_output = ov.fault_flip_output || run.fault_flip_output.unwrap_or(false);

        let scenario = self.scenario(ov.scenario.as_deref(), sim.duration)?;
        sim.plant = self.plant(scenario.load.points[0].1)?;

        let c = &self.controller;
        sim.gains.kp = c.kp.unwrap_or(sim.gains.kp);
        sim.gains.ki = c.ki.unwrap_or(sim.gains.ki);
        sim.saturation = match c.saturation {
            Some(false) => None,
            _ => {
                let d = Saturation::default();
                Some(Saturation { u_min: c.u_min.unwrap_or(d.u_min), u_max: c.u_max.unwrap_or(d.u_max) })
            }
        };

        let e = &self.estimator;
        let est = &mut sim.estimator;
        est.e_oc = sim.plant.curve.e_oc;
        est.l = sim.plant.l;
        est.c = sim.plant.c;
        est.gains.gamma = e.gamma.unwrap_or(est.gains.gamma);
        est.gains.k1 = e.k1.unwrap_or(est.gains.k1);
        est.gains.k2 = e.k2.unwrap_or(est.gains.k2);
        est.gains.lambda = e.lambda.unwrap_or(est.gains.lambda);
        est.prior.theta_r1 = e.theta_r1_prior.unwrap_or(est.prior.theta_r1);
        est.prior.theta_r2 = e.theta_r2_prior.unwrap_or(est.prior.theta_r2);
        est.prior.theta_s1 = e.theta_s1_prior.unwrap_or(est.prior.theta_s1);
        est.prior.theta_s2 = e.theta_s2_prior.unwrap_or(est.prior.theta_s2);
        est.theta_s2_bounds =
            (e.theta_s2_min.unwrap_or(est.theta_s2_bounds.0), e.theta_s2_max.unwrap_or(est.theta_s2_bounds.1));
        est.theta_s1_smoothing = e.theta_s1_smoothing;

        let s = &self.solver;
        sim.solver.max_iterations = s.max_iterations.unwrap_or(sim.solver.max_iterations);
        sim.solver.rel_tolerance = s.rel_tolerance.unwrap_or(sim.solver.rel_tolerance);
        sim.solver.degeneracy_margin = s.degeneracy_margin.unwrap_or(sim.solver.degeneracy_margin);

        let i = &self.initial;
        sim.initial_state = match (i.x1, i.x2, i.x3) {
            (Some(a), Some(b), Some(c)) => Some(PlantState::new(a, b, c)),
            (None, None, None) => None,
            _ => return Err(CliError::config("[initial] needs all of x1, x2, x3 or none")),
        };
        sim.initial_xc = i.xc;

        let seed = ov.seed.or(run.seed).unwrap_or(0);
        sim.noise = self
            .noise
            .as_ref()
            .filter(|n| n.voltage_sigma > 0.0 || n.current_sigma > 0.0)
            .map(|n| NoiseConfig { voltage_sigma: n.voltage_sigma, current_sigma: n.current_sigma, seed });

        let format = if ov.exact {
            FloatFormat::RoundTrip
        } else {
            match self.output.float_format.unwrap_or_default() {
                FloatFormatName::Significant9 => FloatFormat::Significant9,
                FloatFormatName::RoundTrip => FloatFormat::RoundTrip,
            }
        };

        sim.validate().map_err(|e| CliError::config(e.to_string()))?;
        scenario.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(Resolved { sim, scenario, format })
    }

    fn scenario(&self, flag: Option<&str>, duration: f64) -> Result<ScenarioSpec, CliError> {
        let sc = &self.scenario;
        let name = flag.or(sc.preset.as_deref());
        let mut spec = match name {
            Some(n) => preset_scenario(n, duration)?,
            None => match (&sc.reference, &sc.load) {
                (Some(_), Some(_)) => ScenarioSpec::constant(48.0, 0.09),
                _ => preset_scenario("load-pulse", duration)?,
            },
        };
        // An explicit flag replaces the file's scenario entirely.
        if flag.is_none() {
            if let Some(r) = &sc.reference {
                spec.reference = Schedule { points: r.clone() };
                spec.name = "custom".into();
            }
            if let Some(l) = &sc.load {
                spec.load = Schedule { points: l.clone() };
                spec.name = "custom".into();
            }
            if let Some(n) = &sc.name {
                spec.name = n.clone();
            }
        }
        Ok(spec)
    }

    fn plant(&self, load: f64) -> Result<PlantParams, CliError> {
        let p = &self.plant;
        let mut plant = match p.base.unwrap_or_default() {
            PlantBase::Lumped => PlantParams::lumped(load),
            PlantBase::Nominal => PlantParams::nominal(load),
        };
        plant.c_fc = p.c_fc.unwrap_or(plant.c_fc);
        plant.l = p.l.unwrap_or(plant.l);
        plant.c = p.c.unwrap_or(plant.c);
        plant.theta_r1 = p.theta_r1.unwrap_or(plant.theta_r1);
        plant.curve = FcCurve::new(
            p.e_oc.unwrap_or(plant.curve.e_oc),
            p.theta_s1.unwrap_or(plant.curve.theta_s1),
            p.theta_s2.unwrap_or(plant.curve.theta_s2),
        )
        .map_err(|e| CliError::config(e.to_string()))?;
        plant.validate().map_err(|e| CliError::config(e.to_string()))?;
        Ok(plant)
    }
}

pub fn preset_scenario(name: &str, duration: f64) -> Result<ScenarioSpec, CliError> {
    if name == "constant" {
        return Ok(ScenarioSpec::constant(fcpbc::presets::LOAD_PULSE_VREF, fcpbc::presets::LOAD_PULSE_HIGH));
    }
    ScenarioSpec::preset(name, duration)
        .ok_or_else(|| CliError::config(format!("unknown scenario {name:?} (expected vref-pulse, load-pulse or constant)")))
}

pub fn load_or_default(path: Option<&Path>) -> Result<FileConfig, CliError> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}
