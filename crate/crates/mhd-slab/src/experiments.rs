//! Initial-data generation, the three headline studies, and power-law fitting.
//!
//! The studies are pure functions of their inputs: a seeded generator fills a
//! prescribed spectral band, every solver and sampling parameter lives in the
//! study config, and reports serialize without timestamps, so repeated runs
//! produce byte-identical output.
//!
//! * the decay study tracks the tangential energy `E_tan^{m-1}` against the
//!   algebraic envelope `(1+t)^{-s}` and the weighted dissipation integral
//!   `int (1+tau)^sigma D_tan^{m-1} dtau`,
//! * the uniform-bound study compares `R(eps) = sup_t [E + int D] / E(0)`
//!   across a list of `eps` values,
//! * the vanishing-dissipation study co-evolves each `eps` run against the
//!   `eps = 0` baseline on one shared fixed-step schedule and fits the decay
//!   of the sup-in-time `L2` and `Linf` differences in `eps`.

use ndarray::Axis;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::conormal::{
    compute_ledger, curl, h2_horizontal_grad_norm_sq_vector, h2_norm_sq_vector,
    tan_norm_sq_vector, ConormalConfig, EnergyLedger,
};
use crate::dynamics::{
    advective_dt_limit, evolve, rhs_nonlinear, DtMode, FixedStepper, SolverConfig, State,
};
use crate::error::MhdError;
use crate::field::SpectralVectorField;
use crate::grid::{Grid, GridSpec};
use crate::ops::{
    dealias_vector, l2_norm_sq_vector, leray_project, max_vector_magnitude,
    zero_horizontal_mean_vector,
};
use crate::transform::{to_physical, to_spectral};
use crate::Result;

/// Spectral band the seeded generator fills. Radii are in integer mode units
/// `r = sqrt(n1^2 + n2^2 + j^2)`; the whole band must sit inside the dealias
/// mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Spectrum {
    /// Every mode with `|n1|, |n2|, j <= max_index`.
    LowBand { max_index: usize },
    /// Modes with `r_min <= r <= r_max`, flat amplitude.
    Ring { r_min: f64, r_max: f64 },
    /// Modes with `k_min <= r <= k_max`, amplitude `r^slope`.
    Custom { k_min: f64, k_max: f64, slope: f64 },
}

/// Deterministic recipe for well-prepared initial data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialDataSpec {
    pub seed: u64,
    /// Target value of the full energy functional `E` at `t = 0`.
    pub amplitude: f64,
    pub spectrum: Spectrum,
    /// Width parameter of the vertical envelope
    /// `psi(x3) = exp(-(x3 / (concentration L3))^4)`, which keeps the data
    /// away from the top wall `x3 = L3`.
    pub concentration: f64,
}

impl Default for InitialDataSpec {
    fn default() -> Self {
        InitialDataSpec {
            seed: 7,
            amplitude: 1e-3,
            spectrum: Spectrum::LowBand { max_index: 2 },
            concentration: 0.35,
        }
    }
}

impl InitialDataSpec {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(MhdError::InvalidSpec(format!(
                "amplitude = {} must be >= 0",
                self.amplitude
            )));
        }
        if !(self.concentration > 0.0 && self.concentration <= 1.0) {
            return Err(MhdError::InvalidSpec(format!(
                "concentration = {} outside (0, 1]",
                self.concentration
            )));
        }
        let (c1, c2, c3) = grid.dealias_cutoffs();
        let cap = c1.min(c2).min(c3) as f64;
        let inside = match self.spectrum {
            Spectrum::LowBand { max_index } => max_index as f64 <= cap,
            Spectrum::Ring { r_min, r_max } => 0.0 <= r_min && r_min <= r_max && r_max <= cap,
            Spectrum::Custom { k_min, k_max, slope } => {
                slope.is_finite() && 0.0 <= k_min && k_min <= k_max && k_max <= cap
            }
        };
        if !inside {
            return Err(MhdError::InvalidSpec(format!(
                "spectrum band {:?} does not fit inside the dealias cutoffs ({c1}, {c2}, {c3})",
                self.spectrum
            )));
        }
        Ok(())
    }
}

fn band_weight(spectrum: &Spectrum, n1: i64, n2: i64, j: usize) -> Option<f64> {
    let r = ((n1 * n1 + n2 * n2) as f64 + (j * j) as f64).sqrt();
    match *spectrum {
        Spectrum::LowBand { max_index } => {
            let m = max_index as i64;
            (n1.abs() <= m && n2.abs() <= m && j <= max_index).then_some(1.0)
        }
        Spectrum::Ring { r_min, r_max } => (r_min <= r && r <= r_max).then_some(1.0),
        // The zero mode is excluded: its weight r^slope is ill-defined and the
        // mode is removed by mean-zeroing anyway.
        Spectrum::Custom { k_min, k_max, slope } => {
            (k_min <= r && r <= k_max && r > 0.0).then(|| r.powf(slope))
        }
    }
}

fn mode_slot(n: i64, len: usize) -> usize {
    if n >= 0 {
        n as usize
    } else {
        (len as i64 + n) as usize
    }
}

/// Draw divergence-free, horizontally mean-free initial data with
/// `E(u_0, b_0) = amplitude` under the given conormal functional.
///
/// The draw order is pinned: conjugate-representative modes in lexicographic
/// order, two uniform reals per component of `u` then `b`, so a seed fully
/// determines the state. The envelope multiplication happens in physical
/// space and is followed by dealiasing, projection, mean removal, and a
/// bisection rescale to `|E / amplitude - 1| <= 1e-8`. The returned state
/// carries `eps = 0`; studies override it per run.
pub fn gen_initial_data(
    spec: &InitialDataSpec,
    grid: &Arc<Grid>,
    conormal: &ConormalConfig,
) -> Result<State> {
    spec.validate(grid)?;
    conormal.validate()?;
    let mut u = SpectralVectorField::zeros_velocity(grid);
    let mut b = SpectralVectorField::zeros_velocity(grid);
    if spec.amplitude == 0.0 {
        return State::new(u, b, 0.0, 0.0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c1, c2, c3) = grid.dealias_cutoffs();
    let (n1, n2, _) = grid.shape();
    let mut filled = 0usize;
    for m1 in 0..=(c1 as i64) {
        let lo2 = if m1 == 0 { 0 } else { -(c2 as i64) };
        for m2 in lo2..=(c2 as i64) {
            for j in 0..=c3 {
                let Some(w) = band_weight(&spec.spectrum, m1, m2, j) else {
                    continue;
                };
                let i1 = mode_slot(m1, n1);
                let i2 = mode_slot(m2, n2);
                let mi1 = mode_slot(-m1, n1);
                let mi2 = mode_slot(-m2, n2);
                let self_conjugate = m1 == 0 && m2 == 0;
                for field in [&mut u, &mut b] {
                    for comp in 0..3 {
                        // The sine ladder has no j = 0 mode.
                        if comp == 2 && j == 0 {
                            continue;
                        }
                        let re: f64 = rng.gen_range(-1.0..1.0);
                        let im: f64 = rng.gen_range(-1.0..1.0);
                        let val = Complex64::new(re, if self_conjugate { 0.0 } else { im }) * w;
                        field.c[comp].coeff[[i1, i2, j]] = val;
                        if !self_conjugate {
                            field.c[comp].coeff[[mi1, mi2, j]] = val.conj();
                        }
                        filled += 1;
                    }
                }
            }
        }
    }
    if filled == 0 {
        return Err(MhdError::EmptyBand(format!(
            "{:?} selects no modes inside cutoffs ({c1}, {c2}, {c3})",
            spec.spectrum
        )));
    }

    let l3 = grid.spec.l3;
    let psi: Vec<f64> = grid
        .x3
        .iter()
        .map(|&x| (-(x / (spec.concentration * l3)).powi(4)).exp())
        .collect();
    for field in [&mut u, &mut b] {
        for comp in 0..3 {
            let basis = field.c[comp].basis();
            let mut phys = to_physical(&field.c[comp]);
            for (mut lane, &p) in phys.axis_iter_mut(Axis(2)).zip(&psi) {
                lane.map_inplace(|v| *v *= p);
            }
            field.c[comp] = to_spectral(grid, &phys, basis);
        }
    }
    dealias_vector(&mut u);
    dealias_vector(&mut b);
    let mut u = leray_project(&u);
    let mut b = leray_project(&b);
    zero_horizontal_mean_vector(&mut u);
    zero_horizontal_mean_vector(&mut b);

    // Normalization must not trip the resolution guard: the tail content is
    // about to be scaled, not trusted as a dynamical diagnostic.
    let norm_cfg = ConormalConfig {
        allow_underresolved: true,
        ..*conormal
    };
    let e_of = |c: f64, u: &SpectralVectorField, b: &SpectralVectorField| -> Result<f64> {
        let mut uu = u.clone();
        let mut bb = b.clone();
        uu.scale(c);
        bb.scale(c);
        Ok(compute_ledger(&uu, &bb, 0.0, 0.0, &norm_cfg)?.e_full)
    };
    let e_base = e_of(1.0, &u, &b)?;
    if !(e_base > 0.0) {
        return Err(MhdError::EmptyBand(
            "band content vanishes under projection and mean removal".into(),
        ));
    }
    // E is homogeneous of degree two in the state, so sqrt(amplitude / E(1))
    // sits inside any bracket around it; bisection then certifies the
    // tolerance against the ledger itself.
    let c_star = (spec.amplitude / e_base).sqrt();
    let mut lo = 0.5 * c_star;
    let mut hi = 1.5 * c_star;
    for _ in 0..200 {
        if e_of(hi, &u, &b)? >= spec.amplitude {
            break;
        }
        hi *= 2.0;
    }
    let mut scale = None;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let e = e_of(mid, &u, &b)?;
        if (e / spec.amplitude - 1.0).abs() <= 1e-8 {
            scale = Some(mid);
            break;
        }
        if e < spec.amplitude {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = scale.ok_or_else(|| {
        MhdError::StudyRejected("bisection failed to normalize the initial energy".into())
    })?;
    u.scale(c);
    b.scale(c);
    State::new(u, b, 0.0, 0.0)
}

/// Least-squares power law through `(x, y)` pairs with `x` inside `window`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    /// Value of `ln y` extrapolated to `ln x = 0`.
    pub intercept: f64,
    /// Largest `|ln y - fit|` over the fitted points.
    pub max_residual: f64,
    pub points: usize,
}

pub fn fit_power_law(series: &[(f64, f64)], window: (f64, f64)) -> Result<PowerLawFit> {
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(x, _)| *x >= window.0 && *x <= window.1)
        .copied()
        .collect();
    if pts.len() < 3 {
        return Err(MhdError::InsufficientSamples {
            need: 3,
            got: pts.len(),
        });
    }
    if pts.iter().any(|&(x, y)| !(x > 0.0) || !(y > 0.0)) {
        return Err(MhdError::FitRejected(
            "series contains nonpositive values inside the window".into(),
        ));
    }
    let n = pts.len() as f64;
    let lx: Vec<f64> = pts.iter().map(|&(x, _)| x.ln()).collect();
    let ly: Vec<f64> = pts.iter().map(|&(_, y)| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|&x| (x - mx) * (x - mx)).sum();
    if sxx <= 1e-24 {
        return Err(MhdError::FitRejected(
            "abscissa range is degenerate, slope undetermined".into(),
        ));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(&x, &y)| (x - mx) * (y - my)).sum();
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let max_residual = lx
        .iter()
        .zip(&ly)
        .map(|(&x, &y)| (y - exponent * x - intercept).abs())
        .fold(0.0, f64::max);
    Ok(PowerLawFit {
        exponent,
        intercept,
        max_residual,
        points: pts.len(),
    })
}

/// Cumulative trapezoid of `(1 + t)^sigma * d` over the sample times.
pub fn weighted_dissipation_integral(ts: &[f64], ds: &[f64], sigma: f64) -> Vec<f64> {
    assert_eq!(ts.len(), ds.len());
    let w = |i: usize| (1.0 + ts[i]).powf(sigma) * ds[i];
    let mut out = Vec::with_capacity(ts.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..ts.len() {
        acc += 0.5 * (ts[i] - ts[i - 1]) * (w(i) + w(i - 1));
        out.push(acc);
    }
    out
}

/// One named pass/fail line of a study verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub pass: bool,
}

fn check_le(name: &str, value: f64, bound: f64) -> Check {
    Check {
        name: name.into(),
        value,
        bound,
        pass: value.is_finite() && value <= bound,
    }
}

fn check_ge(name: &str, value: f64, bound: f64) -> Check {
    Check {
        name: name.into(),
        value,
        bound,
        pass: value.is_finite() && value >= bound,
    }
}

// ---------------------------------------------------------------------------
// decay study

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecayStudyConfig {
    pub solver: SolverConfig,
    pub conormal: ConormalConfig,
    pub eps: f64,
    /// Target number of ledger rows; actual rows land on accepted steps.
    pub samples: usize,
    /// First nonzero sample time of the geometric grid.
    pub first_sample: f64,
    /// Window in `t` for the `log E_tan^{m-1}` vs `log(1+t)` fit.
    pub fit_window: (f64, f64),
    pub exponent_max: f64,
    pub peak_factor_max: f64,
    pub integral_growth_max: f64,
}

impl Default for DecayStudyConfig {
    fn default() -> Self {
        DecayStudyConfig {
            solver: SolverConfig {
                t_end: 50.0,
                ..SolverConfig::default()
            },
            conormal: ConormalConfig::default(),
            eps: 0.0,
            samples: 48,
            first_sample: 0.25,
            fit_window: (5.0, 50.0),
            exponent_max: -0.9,
            peak_factor_max: 3.0,
            integral_growth_max: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DecaySample {
    pub t: f64,
    pub e_tan_m1: f64,
    /// `(1 + t)^s E_tan^{m-1}(t)`.
    pub weighted_e: f64,
    /// `int_0^t (1 + tau)^sigma D_tan^{m-1} dtau`, trapezoid on the rows.
    pub weighted_d_integral: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayStudyReport {
    pub grid: GridSpec,
    pub data: Option<InitialDataSpec>,
    pub config: DecayStudyConfig,
    pub e_full_initial: f64,
    pub samples: Vec<DecaySample>,
    pub ledgers: Vec<EnergyLedger>,
    pub fit: Option<PowerLawFit>,
    /// `sup_t (1 + t)^s E_tan^{m-1} / E(0)`, the measured envelope constant.
    pub c_emp: f64,
    pub degenerate: bool,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Geometric sample times: `0`, then `first * ratio^k` up to `t_end` exactly.
fn geometric_targets(first: f64, t_end: f64, count: usize) -> Vec<f64> {
    if t_end <= 0.0 {
        return vec![0.0];
    }
    let first = first.min(t_end).max(t_end * 1e-6);
    let k = count.max(4) - 1;
    let ratio = (t_end / first).powf(1.0 / (k as f64 - 1.0));
    let mut ts = vec![0.0];
    let mut t = first;
    for _ in 0..k {
        ts.push(t.min(t_end));
        t *= ratio;
    }
    *ts.last_mut().unwrap() = t_end;
    ts
}

pub fn run_decay_study(
    spec: &InitialDataSpec,
    grid: &Arc<Grid>,
    cfg: &DecayStudyConfig,
) -> Result<DecayStudyReport> {
    let mut state = gen_initial_data(spec, grid, &cfg.conormal)?;
    state.eps = cfg.eps;
    let mut report = run_decay_study_from(state, cfg)?;
    report.data = Some(*spec);
    Ok(report)
}

/// Decay study on caller-supplied initial data (`state.eps` is honored).
pub fn run_decay_study_from(state: State, cfg: &DecayStudyConfig) -> Result<DecayStudyReport> {
    cfg.conormal.validate()?;
    cfg.solver.validate()?;
    let grid_spec = state.grid().spec;
    let eps = state.eps;
    let conormal = cfg.conormal;
    let targets = geometric_targets(cfg.first_sample, cfg.solver.t_end, cfg.samples);

    let mut rows: Vec<EnergyLedger> = Vec::new();
    let mut next = 0usize;
    evolve(state, &cfg.solver, 1, |s| {
        if next < targets.len() && s.t >= targets[next] - 1e-9 {
            while next < targets.len() && targets[next] <= s.t + 1e-9 {
                next += 1;
            }
            if rows.last().map_or(true, |r| s.t > r.t + 1e-12) {
                rows.push(compute_ledger(&s.u, &s.b, s.t, eps, &conormal)?);
            }
        }
        Ok(())
    })?;
    assert!(rows.windows(2).all(|w| w[1].t > w[0].t));

    let e_full_initial = rows[0].e_full;
    let ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let ds: Vec<f64> = rows.iter().map(|r| r.d_tan_m1).collect();
    let integrals = weighted_dissipation_integral(&ts, &ds, conormal.sigma);
    let samples: Vec<DecaySample> = rows
        .iter()
        .zip(&integrals)
        .map(|(r, &i)| DecaySample {
            t: r.t,
            e_tan_m1: r.e_tan_m1,
            weighted_e: (1.0 + r.t).powf(conormal.s) * r.e_tan_m1,
            weighted_d_integral: i,
        })
        .collect();

    if e_full_initial == 0.0 {
        return Ok(DecayStudyReport {
            grid: grid_spec,
            data: None,
            config: *cfg,
            e_full_initial,
            samples,
            ledgers: rows,
            fit: None,
            c_emp: 0.0,
            degenerate: true,
            checks: vec![Check {
                name: "degenerate_zero_data".into(),
                value: 0.0,
                bound: 0.0,
                pass: true,
            }],
            pass: true,
        });
    }

    let pairs: Vec<(f64, f64)> = samples.iter().map(|s| (1.0 + s.t, s.e_tan_m1)).collect();
    let fit = fit_power_law(&pairs, (1.0 + cfg.fit_window.0 - 1e-9, 1.0 + cfg.fit_window.1 + 1e-9))?;

    let overall_peak = samples.iter().map(|s| s.weighted_e).fold(0.0, f64::max);
    let early_peak = samples
        .iter()
        .filter(|s| s.t <= cfg.fit_window.0)
        .map(|s| s.weighted_e)
        .fold(0.0, f64::max);
    let peak_ratio = overall_peak / early_peak.max(f64::MIN_POSITIVE);
    let c_emp = overall_peak / e_full_initial;

    let i_final = *integrals.last().unwrap();
    let mid_t = 0.5 * cfg.solver.t_end;
    let i_mid = rows
        .iter()
        .zip(&integrals)
        .min_by(|(a, _), (b, _)| {
            (a.t - mid_t).abs().partial_cmp(&(b.t - mid_t).abs()).unwrap()
        })
        .map(|(_, &i)| i)
        .unwrap();
    let integral_ratio = if i_final == 0.0 && i_mid == 0.0 {
        1.0
    } else {
        i_final / i_mid.max(f64::MIN_POSITIVE)
    };

    let checks = vec![
        check_le("fitted_exponent", fit.exponent, cfg.exponent_max),
        check_le("weighted_energy_peak_ratio", peak_ratio, cfg.peak_factor_max),
        check_le(
            "weighted_integral_growth",
            integral_ratio,
            cfg.integral_growth_max,
        ),
    ];
    let pass = checks.iter().all(|c| c.pass);
    Ok(DecayStudyReport {
        grid: grid_spec,
        data: None,
        config: *cfg,
        e_full_initial,
        samples,
        ledgers: rows,
        fit: Some(fit),
        c_emp,
        degenerate: false,
        checks,
        pass,
    })
}

// ---------------------------------------------------------------------------
// uniform-bound study

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformStudyConfig {
    pub solver: SolverConfig,
    pub conormal: ConormalConfig,
    /// Strictly decreasing viscosity ratios; every run shares the data.
    pub eps_list: Vec<f64>,
    /// Ledger every this many accepted steps.
    pub sample_every: usize,
    pub spread_max: f64,
}

impl Default for UniformStudyConfig {
    fn default() -> Self {
        UniformStudyConfig {
            solver: SolverConfig {
                t_end: 20.0,
                ..SolverConfig::default()
            },
            conormal: ConormalConfig::default(),
            eps_list: vec![1e-2, 1e-3, 1e-4],
            sample_every: 4,
            spread_max: 1.25,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct UniformSample {
    pub t: f64,
    pub e_full: f64,
    pub d_full: f64,
    /// `(E(t) + int_0^t D) / E(0)`.
    pub bound_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformRun {
    pub eps: f64,
    pub r_value: f64,
    pub samples: Vec<UniformSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniformStudyReport {
    pub grid: GridSpec,
    pub data: Option<InitialDataSpec>,
    pub config: UniformStudyConfig,
    pub runs: Vec<UniformRun>,
    /// `max_eps R / min_eps R`.
    pub spread: f64,
    pub checks: Vec<Check>,
    pub pass: bool,
}

fn validate_eps_list(eps_list: &[f64], require_positive: bool) -> Result<()> {
    if eps_list.is_empty() {
        return Err(MhdError::StudyRejected("eps list is empty".into()));
    }
    if eps_list
        .iter()
        .any(|e| !e.is_finite() || *e < 0.0 || (require_positive && *e == 0.0))
    {
        return Err(MhdError::StudyRejected(format!(
            "eps list {eps_list:?} must be finite and {}",
            if require_positive { "> 0" } else { ">= 0" }
        )));
    }
    if !eps_list.windows(2).all(|w| w[1] < w[0]) {
        return Err(MhdError::StudyRejected(format!(
            "eps list {eps_list:?} must be strictly decreasing"
        )));
    }
    Ok(())
}

pub fn run_uniform_bound_study(
    spec: &InitialDataSpec,
    grid: &Arc<Grid>,
    cfg: &UniformStudyConfig,
) -> Result<UniformStudyReport> {
    if spec.amplitude == 0.0 {
        return Err(MhdError::StudyRejected(
            "uniform bound R = sup[E + int D]/E(0) is undefined for zero data".into(),
        ));
    }
    let data = gen_initial_data(spec, grid, &cfg.conormal)?;
    let mut report = run_uniform_bound_study_from(data, cfg)?;
    report.data = Some(*spec);
    Ok(report)
}

/// Uniform-bound study on caller-supplied data; `state.eps` is overridden per
/// sweep member.
pub fn run_uniform_bound_study_from(
    data: State,
    cfg: &UniformStudyConfig,
) -> Result<UniformStudyReport> {
    cfg.conormal.validate()?;
    cfg.solver.validate()?;
    validate_eps_list(&cfg.eps_list, false)?;
    let grid_spec = data.grid().spec;
    let conormal = cfg.conormal;
    let every = cfg.sample_every.max(1);

    let runs: Vec<UniformRun> = cfg
        .eps_list
        .par_iter()
        .map(|&eps| -> Result<UniformRun> {
            let mut state = data.clone();
            state.eps = eps;
            let mut rows: Vec<EnergyLedger> = Vec::new();
            evolve(state, &cfg.solver, every, |s| {
                rows.push(compute_ledger(&s.u, &s.b, s.t, eps, &conormal)?);
                Ok(())
            })?;
            let e0 = rows[0].e_full;
            if !(e0 > 0.0) {
                return Err(MhdError::StudyRejected(
                    "initial energy vanished; R is undefined".into(),
                ));
            }
            let ts: Vec<f64> = rows.iter().map(|r| r.t).collect();
            let ds: Vec<f64> = rows.iter().map(|r| r.d_full).collect();
            let integrals = weighted_dissipation_integral(&ts, &ds, 0.0);
            let samples: Vec<UniformSample> = rows
                .iter()
                .zip(&integrals)
                .map(|(r, &i)| UniformSample {
                    t: r.t,
                    e_full: r.e_full,
                    d_full: r.d_full,
                    bound_ratio: (r.e_full + i) / e0,
                })
                .collect();
            let r_value = samples.iter().map(|s| s.bound_ratio).fold(0.0, f64::max);
            Ok(UniformRun {
                eps,
                r_value,
                samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let r_max = runs.iter().map(|r| r.r_value).fold(0.0, f64::max);
    let r_min = runs.iter().map(|r| r.r_value).fold(f64::INFINITY, f64::min);
    let spread = r_max / r_min.max(f64::MIN_POSITIVE);
    let mut checks = vec![check_le("r_spread", spread, cfg.spread_max)];
    checks.push(Check {
        name: "all_r_finite".into(),
        value: r_max,
        bound: f64::MAX,
        pass: runs.iter().all(|r| r.r_value.is_finite()),
    });
    let pass = checks.iter().all(|c| c.pass);
    Ok(UniformStudyReport {
        grid: grid_spec,
        data: None,
        config: cfg.clone(),
        runs,
        spread,
        checks,
        pass,
    })
}

// ---------------------------------------------------------------------------
// vanishing-dissipation limit study

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitStudyConfig {
    pub solver: SolverConfig,
    /// Needs `m >= 5`; the regime where the limit estimates hold.
    pub conormal: ConormalConfig,
    /// Strictly decreasing, all positive, at least two entries.
    pub eps_list: Vec<f64>,
    pub sample_every: usize,
    pub l2_slope_min: f64,
    pub linf_slope_min: f64,
    /// Derived fixed step: this fraction of the initial advective limit.
    pub cfl_margin: f64,
}

impl Default for LimitStudyConfig {
    fn default() -> Self {
        LimitStudyConfig {
            solver: SolverConfig {
                t_end: 4.0,
                ..SolverConfig::default()
            },
            conormal: ConormalConfig {
                m: 5,
                ..ConormalConfig::default()
            },
            eps_list: vec![1e-1, 1e-2, 1e-3, 1e-4],
            sample_every: 5,
            l2_slope_min: 0.20,
            linf_slope_min: 0.075,
            cfl_margin: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitRunSeries {
    pub eps: f64,
    /// `||(u^eps - u^0, b^eps - b^0)(t)||_{L2}` at the shared sample times.
    pub l2_diff: Vec<f64>,
    /// Discrete max over the collocation grid, larger of the two fields.
    pub linf_diff: Vec<f64>,
    /// `||(ubar, bbar)||^2_{H1_tan} + ||(wbar^u, wbar^b)||^2_{L2}`.
    pub ebar: Vec<f64>,
    /// `||(u^0, b^0, u^eps, b^eps)||_{H2}`.
    pub b_norm: Vec<f64>,
    /// Same with the horizontal gradient inside the `H2` norm.
    pub b_h_norm: Vec<f64>,
    pub sup_l2: f64,
    pub sup_linf: f64,
    /// Worst relative defect of the bilinear tendency-difference identity.
    pub max_rhs_identity_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitStudyReport {
    pub grid: GridSpec,
    pub data: Option<InitialDataSpec>,
    pub config: LimitStudyConfig,
    /// Shared fixed step; every run takes identical times.
    pub dt: f64,
    pub times: Vec<f64>,
    pub runs: Vec<LimitRunSeries>,
    pub l2_fit: Option<PowerLawFit>,
    pub linf_fit: Option<PowerLawFit>,
    pub monotone_l2: bool,
    pub monotone_linf: bool,
    pub degenerate: bool,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Relative defect between two assemblies of the tendency difference: the
/// divergence-form tendencies of the two states, subtracted, against the
/// bilinear cross-term expansion in the difference fields. Both equal the
/// Galerkin projection of the same quadratic form, so the defect is rounding.
pub fn difference_system_residual(run: &State, base: &State) -> f64 {
    let (nu_e, nb_e) = rhs_nonlinear(run, false);
    let (nu_0, nb_0) = rhs_nonlinear(base, false);
    let mut direct_u = nu_e;
    direct_u.axpy(-1.0, &nu_0);
    let mut direct_b = nb_e;
    direct_b.axpy(-1.0, &nb_0);

    let mut du = run.u.clone();
    du.axpy(-1.0, &base.u);
    let mut db = run.b.clone();
    db.axpy(-1.0, &base.b);
    let advect = crate::conormal::advect;
    let mut cross_u = advect(&du, &run.u);
    cross_u.axpy(1.0, &advect(&base.u, &du));
    cross_u.scale(-1.0);
    cross_u.axpy(1.0, &advect(&db, &run.b));
    cross_u.axpy(1.0, &advect(&base.b, &db));
    let cross_u = leray_project(&cross_u);
    let mut cross_b = advect(&du, &run.b);
    cross_b.axpy(1.0, &advect(&base.u, &db));
    cross_b.scale(-1.0);
    cross_b.axpy(1.0, &advect(&db, &run.u));
    cross_b.axpy(1.0, &advect(&base.b, &du));
    let cross_b = leray_project(&cross_b);

    let scale = direct_u
        .max_coeff()
        .max(direct_b.max_coeff())
        .max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for (d, c) in [(&direct_u, &cross_u), (&direct_b, &cross_b)] {
        for i in 0..3 {
            for (x, y) in d.c[i].coeff.iter().zip(c.c[i].coeff.iter()) {
                worst = worst.max((x - y).norm());
            }
        }
    }
    worst / scale
}

pub fn run_limit_study(
    spec: &InitialDataSpec,
    grid: &Arc<Grid>,
    cfg: &LimitStudyConfig,
) -> Result<LimitStudyReport> {
    if spec.amplitude == 0.0 {
        return Err(MhdError::StudyRejected(
            "limit differences of zero data are identically zero".into(),
        ));
    }
    let data = gen_initial_data(spec, grid, &cfg.conormal)?;
    let mut report = run_limit_study_from(data, cfg)?;
    report.data = Some(*spec);
    Ok(report)
}

/// Limit study on caller-supplied data. All runs, including the `eps = 0`
/// baseline, march on one fixed-step schedule so samples align exactly.
pub fn run_limit_study_from(data: State, cfg: &LimitStudyConfig) -> Result<LimitStudyReport> {
    cfg.conormal.validate()?;
    cfg.solver.validate()?;
    if cfg.conormal.m < 5 {
        return Err(MhdError::InvalidConormalConfig(format!(
            "limit study requires m >= 5, got m = {}",
            cfg.conormal.m
        )));
    }
    if cfg.eps_list.len() < 2 {
        return Err(MhdError::StudyRejected(
            "limit study needs at least two eps values".into(),
        ));
    }
    validate_eps_list(&cfg.eps_list, true)?;
    if !(cfg.cfl_margin > 0.0 && cfg.cfl_margin <= 1.0) {
        return Err(MhdError::StudyRejected(format!(
            "cfl margin {} outside (0, 1]",
            cfg.cfl_margin
        )));
    }

    let grid = data.grid().clone();
    let t_end = cfg.solver.t_end;
    let dt_raw = match cfg.solver.dt {
        DtMode::Fixed(dt) => dt,
        DtMode::Auto => cfg.cfl_margin * advective_dt_limit(&data, &cfg.solver),
    };
    // One shared schedule that lands on t_end exactly.
    let steps = (t_end / dt_raw).round().max(1.0) as usize;
    let dt = t_end / steps as f64;

    let mut base = data.clone();
    base.eps = 0.0;
    let base_stepper = FixedStepper::new(&grid, 0.0, &cfg.solver, dt)?;
    let mut states: Vec<State> = cfg
        .eps_list
        .iter()
        .map(|&eps| {
            let mut s = data.clone();
            s.eps = eps;
            s
        })
        .collect();
    let steppers: Vec<FixedStepper> = cfg
        .eps_list
        .iter()
        .map(|&eps| FixedStepper::new(&grid, eps, &cfg.solver, dt))
        .collect::<Result<Vec<_>>>()?;

    let n_runs = cfg.eps_list.len();
    let mut times: Vec<f64> = Vec::new();
    let mut series: Vec<LimitRunSeries> = cfg
        .eps_list
        .iter()
        .map(|&eps| LimitRunSeries {
            eps,
            l2_diff: Vec::new(),
            linf_diff: Vec::new(),
            ebar: Vec::new(),
            b_norm: Vec::new(),
            b_h_norm: Vec::new(),
            sup_l2: 0.0,
            sup_linf: 0.0,
            max_rhs_identity_residual: 0.0,
        })
        .collect();

    let record = |base: &State, states: &[State], series: &mut [LimitRunSeries], times: &mut Vec<f64>| {
        times.push(base.t);
        let h2_base = h2_norm_sq_vector(&base.u) + h2_norm_sq_vector(&base.b);
        let h2h_base =
            h2_horizontal_grad_norm_sq_vector(&base.u) + h2_horizontal_grad_norm_sq_vector(&base.b);
        for (run, row) in states.iter().zip(series.iter_mut()) {
            let mut du = run.u.clone();
            du.axpy(-1.0, &base.u);
            let mut db = run.b.clone();
            db.axpy(-1.0, &base.b);
            let l2 = (l2_norm_sq_vector(&du) + l2_norm_sq_vector(&db)).sqrt();
            let linf = max_vector_magnitude(&du).max(max_vector_magnitude(&db));
            let ebar = tan_norm_sq_vector(&du, 1)
                + tan_norm_sq_vector(&db, 1)
                + l2_norm_sq_vector(&curl(&du))
                + l2_norm_sq_vector(&curl(&db));
            let b_norm =
                (h2_base + h2_norm_sq_vector(&run.u) + h2_norm_sq_vector(&run.b)).sqrt();
            let b_h_norm = (h2h_base
                + h2_horizontal_grad_norm_sq_vector(&run.u)
                + h2_horizontal_grad_norm_sq_vector(&run.b))
            .sqrt();
            let residual = difference_system_residual(run, base);
            row.l2_diff.push(l2);
            row.linf_diff.push(linf);
            row.ebar.push(ebar);
            row.b_norm.push(b_norm);
            row.b_h_norm.push(b_h_norm);
            row.sup_l2 = row.sup_l2.max(l2);
            row.sup_linf = row.sup_linf.max(linf);
            row.max_rhs_identity_residual = row.max_rhs_identity_residual.max(residual);
        }
    };

    record(&base, &states, &mut series, &mut times);
    let every = cfg.sample_every.max(1);
    for step in 1..=steps {
        base_stepper.step(&mut base)?;
        states
            .par_iter_mut()
            .zip(steppers.par_iter())
            .map(|(s, st)| st.step(s))
            .collect::<Result<()>>()?;
        if step % every == 0 || step == steps {
            record(&base, &states, &mut series, &mut times);
        }
    }
    debug_assert_eq!(series.len(), n_runs);

    let sup_l2: Vec<f64> = series.iter().map(|r| r.sup_l2).collect();
    let sup_linf: Vec<f64> = series.iter().map(|r| r.sup_linf).collect();
    let degenerate = sup_l2.iter().all(|&v| v == 0.0);
    let slack = 1e-12;
    let monotone_l2 = sup_l2
        .windows(2)
        .all(|w| w[1] <= w[0] * (1.0 + slack) + f64::MIN_POSITIVE);
    let monotone_linf = sup_linf
        .windows(2)
        .all(|w| w[1] <= w[0] * (1.0 + slack) + f64::MIN_POSITIVE);

    let fit_of = |sup: &[f64]| -> Option<PowerLawFit> {
        let pairs: Vec<(f64, f64)> = cfg.eps_list.iter().copied().zip(sup.iter().copied()).collect();
        fit_power_law(&pairs, (0.0, f64::MAX)).ok()
    };
    let (l2_fit, linf_fit) = if degenerate {
        (None, None)
    } else {
        (fit_of(&sup_l2), fit_of(&sup_linf))
    };

    let mut checks = Vec::new();
    checks.push(check_ge(
        "l2_slope",
        l2_fit.map_or(f64::NAN, |f| f.exponent),
        cfg.l2_slope_min,
    ));
    checks.push(check_ge(
        "linf_slope",
        linf_fit.map_or(f64::NAN, |f| f.exponent),
        cfg.linf_slope_min,
    ));
    checks.push(Check {
        name: "sup_l2_monotone_in_eps".into(),
        value: if monotone_l2 { 1.0 } else { 0.0 },
        bound: 1.0,
        pass: monotone_l2,
    });
    checks.push(Check {
        name: "sup_linf_monotone_in_eps".into(),
        value: if monotone_linf { 1.0 } else { 0.0 },
        bound: 1.0,
        pass: monotone_linf,
    });
    let pass = !degenerate && checks.iter().all(|c| c.pass);

    Ok(LimitStudyReport {
        grid: grid.spec,
        data: None,
        config: cfg.clone(),
        dt,
        times,
        runs: series,
        l2_fit,
        linf_fit,
        monotone_l2,
        monotone_linf,
        degenerate,
        checks,
        pass,
    })
}
