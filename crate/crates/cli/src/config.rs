//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment, list values are comma separated.
//! Unset keys fall back to the scenario preset. Layers merge as
//! defaults < config file < command-line flags.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use homotopy_da::experiments::{Method, ScenarioOverrides};
use homotopy_da::integrators::Scheme;

use crate::error::{CliError, Result};

/// Every setting a run can take. `None` means "use the preset".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub scenario: Option<String>,
    pub methods: Option<Vec<Method>>,
    pub particles: Option<Vec<usize>>,
    pub cycles: Option<usize>,
    pub dt: Option<f64>,
    /// Window length `T` of single-window scenarios.
    pub horizon: Option<f64>,
    /// Observation interval of cycled scenarios.
    pub dtobs: Option<Vec<f64>>,
    pub inflation: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub scheme: Option<Scheme>,
    pub sigma: Option<f64>,
    /// Observation noise variance.
    pub obs_var: Option<f64>,
    /// Observed value.
    pub obs_value: Option<f64>,
    pub initial_var: Option<f64>,
    /// Homotopy times at which particles are written.
    pub snapshots: Option<Vec<f64>>,
    pub out: Option<PathBuf>,
    pub emit_plot_script: Option<bool>,
}

const KEYS: [&str; 17] = [
    "scenario",
    "method",
    "particles",
    "cycles",
    "dt",
    "horizon",
    "dtobs",
    "inflation",
    "seed",
    "scheme",
    "sigma",
    "obs_var",
    "obs_value",
    "initial_var",
    "snapshots",
    "out",
    "emit_plot_script",
];

fn parse_one<T: FromStr>(key: &str, raw: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse()
        .map_err(|e| CliError::config(format!("bad value '{raw}' for {key}: {e}")))
}

fn parse_float(key: &str, raw: &str) -> Result<f64> {
    let v: f64 = parse_one(key, raw)?;
    if !v.is_finite() {
        return Err(CliError::config(format!("{key} must be finite, got {raw}")));
    }
    Ok(v)
}

fn parse_list<T>(key: &str, raw: &str, item: impl Fn(&str, &str) -> Result<T>) -> Result<Vec<T>> {
    let items = raw
        .split(',')
        .map(str::trim)
        .map(|s| item(key, s))
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(CliError::config(format!("{key} needs at least one value")));
    }
    Ok(items)
}

fn join<T>(values: &[T], fmt: impl Fn(&T) -> String) -> String {
    values.iter().map(fmt).collect::<Vec<_>>().join(", ")
}

/// `{:?}` prints the shortest decimal that parses back to the same `f64`.
fn float(v: &f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Parses the file format. Unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(CliError::config(format!("line {}: {key} given twice", n + 1)));
            }
            seen.push(key);
            cfg.set(key, value)
                .map_err(|e| CliError::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scenario" => self.scenario = Some(value.to_string()),
            "method" => self.methods = Some(parse_list(key, value, parse_one)?),
            "particles" => self.particles = Some(parse_list(key, value, parse_one)?),
            "cycles" => self.cycles = Some(parse_one(key, value)?),
            "dt" => self.dt = Some(parse_float(key, value)?),
            "horizon" => self.horizon = Some(parse_float(key, value)?),
            "dtobs" => self.dtobs = Some(parse_list(key, value, parse_float)?),
            "inflation" => self.inflation = Some(parse_list(key, value, parse_float)?),
            "seed" => self.seed = Some(parse_one(key, value)?),
            "scheme" => self.scheme = Some(parse_one(key, value)?),
            "sigma" => self.sigma = Some(parse_float(key, value)?),
            "obs_var" => self.obs_var = Some(parse_float(key, value)?),
            "obs_value" => self.obs_value = Some(parse_float(key, value)?),
            "initial_var" => self.initial_var = Some(parse_float(key, value)?),
            "snapshots" => self.snapshots = Some(parse_list(key, value, parse_float)?),
            "out" => self.out = Some(PathBuf::from(value)),
            "emit_plot_script" => self.emit_plot_script = Some(parse_one(key, value)?),
            _ => {
                return Err(CliError::config(format!(
                    "unknown key '{key}' (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Writes the set keys in the file format. Fails for text values the
    /// format cannot carry (comment markers, line breaks, edge whitespace).
    pub fn to_config_string(&self) -> Result<String> {
        let text_value = |key: &str, v: &str| -> Result<String> {
            if v.is_empty() || v.contains(['#', '\n', '\r']) || v.trim() != v {
                return Err(CliError::config(format!("{key} value '{v}' cannot be written to a config file")));
            }
            Ok(v.to_string())
        };
        let mut lines: Vec<(&str, String)> = Vec::new();
        if let Some(v) = &self.scenario {
            lines.push(("scenario", text_value("scenario", v)?));
        }
        if let Some(v) = &self.methods {
            lines.push(("method", join(v, |m| m.to_string())));
        }
        if let Some(v) = &self.particles {
            lines.push(("particles", join(v, usize::to_string)));
        }
        if let Some(v) = self.cycles {
            lines.push(("cycles", v.to_string()));
        }
        if let Some(v) = &self.dt {
            lines.push(("dt", float(v)));
        }
        if let Some(v) = &self.horizon {
            lines.push(("horizon", float(v)));
        }
        if let Some(v) = &self.dtobs {
            lines.push(("dtobs", join(v, float)));
        }
        if let Some(v) = &self.inflation {
            lines.push(("inflation", join(v, float)));
        }
        if let Some(v) = self.seed {
            lines.push(("seed", v.to_string()));
        }
        if let Some(v) = self.scheme {
            lines.push(("scheme", v.to_string()));
        }
        if let Some(v) = &self.sigma {
            lines.push(("sigma", float(v)));
        }
        if let Some(v) = &self.obs_var {
            lines.push(("obs_var", float(v)));
        }
        if let Some(v) = &self.obs_value {
            lines.push(("obs_value", float(v)));
        }
        if let Some(v) = &self.initial_var {
            lines.push(("initial_var", float(v)));
        }
        if let Some(v) = &self.snapshots {
            lines.push(("snapshots", join(v, float)));
        }
        if let Some(v) = &self.out {
            let s = v
                .to_str()
                .ok_or_else(|| CliError::config("output path is not valid UTF-8"))?;
            lines.push(("out", text_value("out", s)?));
        }
        if let Some(v) = self.emit_plot_script {
            lines.push(("emit_plot_script", v.to_string()));
        }
        let mut text = String::new();
        for (key, value) in lines {
            let _ = writeln!(text, "{key} = {value}");
        }
        Ok(text)
    }

    /// Values set in `over` replace those in `self`.
    pub fn merged(self, over: Self) -> Self {
        Self {
            scenario: over.scenario.or(self.scenario),
            methods: over.methods.or(self.methods),
            particles: over.particles.or(self.particles),
            cycles: over.cycles.or(self.cycles),
            dt: over.dt.or(self.dt),
            horizon: over.horizon.or(self.horizon),
            dtobs: over.dtobs.or(self.dtobs),
            inflation: over.inflation.or(self.inflation),
            seed: over.seed.or(self.seed),
            scheme: over.scheme.or(self.scheme),
            sigma: over.sigma.or(self.sigma),
            obs_var: over.obs_var.or(self.obs_var),
            obs_value: over.obs_value.or(self.obs_value),
            initial_var: over.initial_var.or(self.initial_var),
            snapshots: over.snapshots.or(self.snapshots),
            out: over.out.or(self.out),
            emit_plot_script: over.emit_plot_script.or(self.emit_plot_script),
        }
    }

    pub fn scenario_name(&self) -> Result<&str> {
        self.scenario
            .as_deref()
            .ok_or_else(|| CliError::config("no scenario given (use --scenario or a config file)"))
    }

    /// Overrides for one run; list-valued keys must hold a single value.
    /// `cycled` routes `dtobs` to the window length.
    pub fn single_run_overrides(&self, cycled: bool) -> Result<ScenarioOverrides> {
        fn single<T: Copy>(key: &str, v: &Option<Vec<T>>) -> Result<Option<T>> {
            match v.as_deref() {
                None => Ok(None),
                Some([x]) => Ok(Some(*x)),
                Some(_) => Err(CliError::config(format!("{key} takes a single value for this command"))),
            }
        }
        let dtobs = single("dtobs", &self.dtobs)?;
        if dtobs.is_some() && !cycled {
            return Err(CliError::config("dtobs applies to cycled scenarios only; use horizon"));
        }
        if self.horizon.is_some() && cycled {
            return Err(CliError::config("cycled scenarios take dtobs, not horizon"));
        }
        Ok(ScenarioOverrides {
            sigma: self.sigma,
            r: self.obs_var,
            y: self.obs_value,
            horizon: self.horizon.or(dtobs),
            particles: single("particles", &self.particles)?,
            dt: self.dt,
            scheme: self.scheme,
            law: None,
            method: single("method", &self.methods)?,
            inflation: single("inflation", &self.inflation)?,
            cycles: self.cycles,
            seed: self.seed,
            initial_var: self.initial_var,
        })
    }
}
