//! Flat `key = value` run configuration.
//!
//! Config files are UTF-8 text, one assignment per line, `#` starting a
//! comment anywhere. Later assignments win, so command-line overrides are
//! just assignments applied after the file. Every key maps onto one field of
//! [`RunConfig`]; unknown keys are errors, not warnings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conormal::{ConormalConfig, PhiChoice};
use crate::dynamics::{DtMode, SolverConfig};
use crate::error::MhdError;
use crate::experiments::{
    DecayStudyConfig, InitialDataSpec, LimitStudyConfig, Spectrum, UniformStudyConfig,
};
use crate::grid::{plan_grid, GridSpec};
use crate::Result;

/// Everything a run needs: grid, solver, functional, data recipe, study
/// knobs, and output paths. One seed in `data` drives all randomness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub grid: GridSpec,
    pub solver: SolverConfig,
    pub conormal: ConormalConfig,
    pub data: InitialDataSpec,
    /// Viscosity ratio for single-run commands and the decay study.
    pub eps: f64,
    /// Strictly decreasing sweep for the uniform-bound and limit studies.
    pub eps_list: Vec<f64>,
    pub samples: usize,
    pub first_sample: f64,
    pub fit_window: (f64, f64),
    pub exponent_max: f64,
    pub peak_factor_max: f64,
    pub integral_growth_max: f64,
    pub sample_every: usize,
    pub spread_max: f64,
    pub l2_slope_min: f64,
    pub linf_slope_min: f64,
    pub cfl_margin: f64,
    pub ledger_csv: Option<PathBuf>,
    pub report_json: Option<PathBuf>,
    pub save_checkpoint: Option<PathBuf>,
    pub load_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pi = std::f64::consts::PI;
        RunConfig {
            grid: GridSpec::new(64, 64, 17, 16.0 * pi, 16.0 * pi, 2.0 * pi),
            solver: SolverConfig {
                t_end: 50.0,
                ..SolverConfig::default()
            },
            conormal: ConormalConfig::default(),
            data: InitialDataSpec::default(),
            eps: 0.0,
            eps_list: vec![1e-2, 1e-3, 1e-4],
            samples: 48,
            first_sample: 0.25,
            fit_window: (5.0, 50.0),
            exponent_max: -0.9,
            peak_factor_max: 3.0,
            integral_growth_max: 1.5,
            sample_every: 4,
            spread_max: 1.25,
            l2_slope_min: 0.20,
            linf_slope_min: 0.075,
            cfl_margin: 0.5,
            ledger_csv: None,
            report_json: None,
            save_checkpoint: None,
            load_checkpoint: None,
        }
    }
}

fn num<T: std::str::FromStr>(kind: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("expected {kind}, got '{v}'"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got '{v}'")),
    }
}

fn float_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',')
        .map(|s| num::<f64>("a number", s.trim()))
        .collect()
}

fn pair(v: &str) -> std::result::Result<(f64, f64), String> {
    let xs = float_list(v)?;
    if xs.len() != 2 {
        return Err(format!("expected two comma-separated numbers, got '{v}'"));
    }
    Ok((xs[0], xs[1]))
}

fn spectrum(v: &str) -> std::result::Result<Spectrum, String> {
    let (kind, args) = v.split_once(':').unwrap_or((v, ""));
    match kind.trim() {
        "low-band" => Ok(Spectrum::LowBand {
            max_index: num("an index", args.trim())?,
        }),
        "ring" => {
            let (r_min, r_max) = pair(args)?;
            Ok(Spectrum::Ring { r_min, r_max })
        }
        "custom" => {
            let xs = float_list(args)?;
            if xs.len() != 3 {
                return Err(format!("custom spectrum needs k_min,k_max,slope, got '{v}'"));
            }
            Ok(Spectrum::Custom {
                k_min: xs[0],
                k_max: xs[1],
                slope: xs[2],
            })
        }
        other => Err(format!(
            "unknown spectrum '{other}' (low-band:N, ring:R0,R1, custom:K0,K1,SLOPE)"
        )),
    }
}

impl RunConfig {
    /// Apply one assignment. Key names mirror the config file syntax.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.set_kv(key, value).map_err(MhdError::Config)
    }

    fn set_kv(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "n1" => self.grid.n1 = num("an integer", v)?,
            "n2" => self.grid.n2 = num("an integer", v)?,
            "n3" => self.grid.n3 = num("an integer", v)?,
            "l1" => self.grid.l1 = num("a number", v)?,
            "l2" => self.grid.l2 = num("a number", v)?,
            "l3" => self.grid.l3 = num("a number", v)?,
            "dealias_fraction" => self.grid.dealias_fraction = num("a number", v)?,
            "dt" => {
                self.solver.dt = if v == "auto" {
                    DtMode::Auto
                } else {
                    DtMode::Fixed(num("a number or 'auto'", v)?)
                }
            }
            "cfl" => self.solver.cfl = num("a number", v)?,
            "t_end" => self.solver.t_end = num("a number", v)?,
            "rk_order" => self.solver.rk_order = num("an integer", v)?,
            "zero_horizontal_mean" => self.solver.zero_horizontal_mean = boolean(v)?,
            "linear_only" => self.solver.linear_only = boolean(v)?,
            "m" => self.conormal.m = num("an integer", v)?,
            "s" => self.conormal.s = num("a number", v)?,
            "sigma" => self.conormal.sigma = num("a number", v)?,
            "phi" => {
                self.conormal.phi = match v {
                    "slab-sine" => PhiChoice::SlabSine,
                    "half-line" => PhiChoice::HalfLine,
                    _ => return Err(format!("expected slab-sine or half-line, got '{v}'")),
                }
            }
            "allow_underresolved" => self.conormal.allow_underresolved = boolean(v)?,
            "seed" => self.data.seed = num("an integer", v)?,
            "amplitude" => self.data.amplitude = num("a number", v)?,
            "spectrum" => self.data.spectrum = spectrum(v)?,
            "concentration" => self.data.concentration = num("a number", v)?,
            "eps" => self.eps = num("a number", v)?,
            "eps_list" => self.eps_list = float_list(v)?,
            "samples" => self.samples = num("an integer", v)?,
            "first_sample" => self.first_sample = num("a number", v)?,
            "fit_window" => self.fit_window = pair(v)?,
            "exponent_max" => self.exponent_max = num("a number", v)?,
            "peak_factor_max" => self.peak_factor_max = num("a number", v)?,
            "integral_growth_max" => self.integral_growth_max = num("a number", v)?,
            "sample_every" => self.sample_every = num("an integer", v)?,
            "spread_max" => self.spread_max = num("a number", v)?,
            "l2_slope_min" => self.l2_slope_min = num("a number", v)?,
            "linf_slope_min" => self.linf_slope_min = num("a number", v)?,
            "cfl_margin" => self.cfl_margin = num("a number", v)?,
            "ledger_csv" => self.ledger_csv = Some(PathBuf::from(v)),
            "report_json" => self.report_json = Some(PathBuf::from(v)),
            "save_checkpoint" => self.save_checkpoint = Some(PathBuf::from(v)),
            "load_checkpoint" => self.load_checkpoint = Some(PathBuf::from(v)),
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// Cross-field validation. Grid, solver, functional, and data recipe are
    /// checked through their own validators first.
    pub fn validate(&self) -> Result<()> {
        let grid = plan_grid(self.grid)?;
        self.solver.validate()?;
        self.conormal.validate()?;
        self.data.validate(&grid)?;
        let m = self.conormal.m;
        // The tangential ladder applies up to m horizontal derivatives; the
        // top rung needs at least one resolvable octave above it.
        if 2 * (m + 1) > self.grid.n1.min(self.grid.n2) || m + 1 > self.grid.n3.saturating_sub(2) {
            return Err(MhdError::Config(format!(
                "order m = {m} is not resolvable on a {} x {} x {} grid: need min(n1, n2) >= 2(m+1) and n3 >= m+3",
                self.grid.n1, self.grid.n2, self.grid.n3
            )));
        }
        if !(self.eps.is_finite() && self.eps >= 0.0) {
            return Err(MhdError::Config(format!("eps = {} must be >= 0", self.eps)));
        }
        if self.eps_list.is_empty()
            || self.eps_list.iter().any(|e| !e.is_finite() || *e < 0.0)
            || !self.eps_list.windows(2).all(|w| w[1] < w[0])
        {
            return Err(MhdError::Config(format!(
                "eps_list {:?} must be finite, nonnegative, strictly decreasing",
                self.eps_list
            )));
        }
        if self.samples < 4 {
            return Err(MhdError::Config("samples must be at least 4".into()));
        }
        if !(self.first_sample > 0.0 && self.first_sample.is_finite()) {
            return Err(MhdError::Config(format!(
                "first_sample = {} must be > 0",
                self.first_sample
            )));
        }
        if !(self.fit_window.0 >= 0.0 && self.fit_window.0 < self.fit_window.1) {
            return Err(MhdError::Config(format!(
                "fit_window ({}, {}) must satisfy 0 <= lo < hi",
                self.fit_window.0, self.fit_window.1
            )));
        }
        if self.sample_every == 0 {
            return Err(MhdError::Config("sample_every must be >= 1".into()));
        }
        if !(self.spread_max >= 1.0) {
            return Err(MhdError::Config(format!(
                "spread_max = {} must be >= 1",
                self.spread_max
            )));
        }
        if !(self.cfl_margin > 0.0 && self.cfl_margin <= 1.0) {
            return Err(MhdError::Config(format!(
                "cfl_margin = {} outside (0, 1]",
                self.cfl_margin
            )));
        }
        for (name, x) in [
            ("exponent_max", self.exponent_max),
            ("peak_factor_max", self.peak_factor_max),
            ("integral_growth_max", self.integral_growth_max),
            ("l2_slope_min", self.l2_slope_min),
            ("linf_slope_min", self.linf_slope_min),
        ] {
            if !x.is_finite() {
                return Err(MhdError::Config(format!("{name} = {x} must be finite")));
            }
        }
        Ok(())
    }

    pub fn decay_config(&self) -> DecayStudyConfig {
        DecayStudyConfig {
            solver: self.solver,
            conormal: self.conormal,
            eps: self.eps,
            samples: self.samples,
            first_sample: self.first_sample,
            fit_window: self.fit_window,
            exponent_max: self.exponent_max,
            peak_factor_max: self.peak_factor_max,
            integral_growth_max: self.integral_growth_max,
        }
    }

    pub fn uniform_config(&self) -> UniformStudyConfig {
        UniformStudyConfig {
            solver: self.solver,
            conormal: self.conormal,
            eps_list: self.eps_list.clone(),
            sample_every: self.sample_every,
            spread_max: self.spread_max,
        }
    }

    pub fn limit_config(&self) -> LimitStudyConfig {
        LimitStudyConfig {
            solver: self.solver,
            conormal: self.conormal,
            eps_list: self.eps_list.clone(),
            sample_every: self.sample_every,
            l2_slope_min: self.l2_slope_min,
            linf_slope_min: self.linf_slope_min,
            cfl_margin: self.cfl_margin,
        }
    }
}

/// Apply config text onto an existing config; errors carry the line number.
pub fn apply_config_text(cfg: &mut RunConfig, text: &str) -> Result<()> {
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(MhdError::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                idx + 1
            )));
        };
        cfg.set_kv(key.trim(), value.trim())
            .map_err(|e| MhdError::Config(format!("line {}: {e}", idx + 1)))?;
    }
    Ok(())
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    apply_config_text(&mut cfg, text)?;
    Ok(cfg)
}

pub fn load_config<P: AsRef<Path>>(path: P) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
