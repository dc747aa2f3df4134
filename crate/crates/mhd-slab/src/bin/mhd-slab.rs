//! Command-line surface: simulation, studies, oracles, and format emission.
//!
//! Configuration precedence, lowest to highest: built-in defaults, the
//! `--config` file, repeated `--set key=value` overrides, then the dedicated
//! shorthand flags. Study verdicts print one PASS/FAIL line per check on
//! stderr; machine-readable output (CSV, JSON) goes to the configured path
//! or stdout. Exit codes: 0 success or study PASS, 2 study FAIL, 1 error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use serde::Serialize;

use mhd_slab::conormal::{compute_ledger, sobolev_probe, random_divfree_field};
use mhd_slab::dynamics::{evolve, linear_eigenvalues, propagator_entries, viscosities};
use mhd_slab::experiments::{
    gen_initial_data, run_decay_study, run_limit_study, run_uniform_bound_study, Check,
};
use mhd_slab::io::{
    apply_config_text, read_checkpoint, read_checkpoint_on, report_string, write_checkpoint,
    write_json_report, write_ledger_csv, write_ledger_csv_to, RunConfig,
};
use mhd_slab::ops::{l2_norm_sq, lambda_h_pow, derivative, zero_horizontal_mean};
use mhd_slab::{plan_grid, MhdError, Result};

fn long_help() -> String {
    format!(
        "CONFIG KEYS (flat `key = value` lines; `#` starts a comment; later lines win):\n\
         \x20 grid:       n1, n2, n3, l1, l2, l3, dealias_fraction\n\
         \x20 solver:     dt (number | auto), cfl, t_end, rk_order (2 | 3),\n\
         \x20             zero_horizontal_mean, linear_only (true | false)\n\
         \x20 functional: m, s, sigma, phi (slab-sine | half-line), allow_underresolved\n\
         \x20 data:       seed, amplitude, concentration,\n\
         \x20             spectrum (low-band:N | ring:R0,R1 | custom:K0,K1,SLOPE)\n\
         \x20 studies:    eps, eps_list (comma separated, strictly decreasing),\n\
         \x20             samples, first_sample, fit_window (LO,HI), exponent_max,\n\
         \x20             peak_factor_max, integral_growth_max, sample_every,\n\
         \x20             spread_max, l2_slope_min, linf_slope_min, cfl_margin\n\
         \x20 outputs:    ledger_csv, report_json, save_checkpoint, load_checkpoint\n\
         \n\
         LEDGER CSV COLUMNS (fixed order):\n\
         \x20 {}\n\
         \n\
         EXIT CODES: 0 success or study PASS, 2 study FAIL, 1 error.\n\
         ENVIRONMENT: MHD_THREADS caps the worker thread count.",
        mhd_slab::io::LEDGER_COLUMNS.join(", ")
    )
}

#[derive(Parser)]
#[command(
    name = "mhd-slab",
    version,
    about = "Pseudo-spectral solver and conormal-energy verification harness \
             for anisotropic incompressible MHD in a slip slab",
    after_long_help = long_help()
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// Config file applied over the defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Inline override `key=value`; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for t_end.
    #[arg(long = "t-end", value_name = "T")]
    t_end: Option<f64>,
    /// Viscosity ratio: a single value, or a comma list for sweep studies.
    #[arg(long, value_name = "EPS[,EPS...]")]
    eps: Option<String>,
    /// Shorthand for the data seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report path (default: stdout).
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Ledger CSV path (default for `simulate`: stdout).
    #[arg(long, value_name = "FILE")]
    ledger: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate the perturbation system; emit the ledger time series.
    Simulate {
        #[command(flatten)]
        common: ConfigArgs,
        /// Write the final state as a checkpoint.
        #[arg(long, value_name = "FILE")]
        save: Option<PathBuf>,
        /// Resume from a checkpoint instead of generating initial data.
        #[arg(long, value_name = "FILE")]
        load: Option<PathBuf>,
        /// Ledger row every N accepted steps.
        #[arg(long, value_name = "N")]
        sample_every: Option<usize>,
    },
    /// Fit the decay rate of the tangential energy against (1+t)^-s.
    DecayStudy {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Compare R(eps) = sup_t [E + int D] / E(0) across the eps list.
    UniformStudy {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Co-evolve each eps against the eps = 0 baseline; fit difference decay.
    LimitStudy {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Check the anisotropic interpolation inequality on random fields.
    ProbeInequalities {
        #[command(flatten)]
        common: ConfigArgs,
        /// Number of random fields.
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Largest mode index of the random fields.
        #[arg(long, default_value_t = 3)]
        max_mode: usize,
    },
    /// Compare the per-mode propagator against an independent 2x2 exponential.
    VerifyLinear {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Recompute the energy ledger of a stored checkpoint.
    Ledger {
        #[command(flatten)]
        common: ConfigArgs,
        /// Checkpoint to read.
        #[arg(value_name = "CHECKPOINT")]
        path: PathBuf,
    },
}

/// Assemble the run configuration from all layers, then validate.
fn build_config(args: &ConfigArgs, eps_is_list: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        apply_config_text(&mut cfg, &text)?;
    }
    for kv in &args.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(MhdError::Config(format!(
                "--set expects KEY=VALUE, got '{kv}'"
            )));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(t) = args.t_end {
        cfg.solver.t_end = t;
    }
    if let Some(e) = &args.eps {
        let key = if eps_is_list || e.contains(',') {
            "eps_list"
        } else {
            "eps"
        };
        cfg.set(key, e)?;
    }
    if let Some(s) = args.seed {
        cfg.data.seed = s;
    }
    if let Some(p) = &args.report {
        cfg.report_json = Some(p.clone());
    }
    if let Some(p) = &args.ledger {
        cfg.ledger_csv = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit_report<T: Serialize>(cfg: &RunConfig, report: &T) -> Result<()> {
    match &cfg.report_json {
        Some(path) => write_json_report(path, report),
        None => {
            print!("{}", report_string(report)?);
            Ok(())
        }
    }
}

fn print_checks(cmd: &str, checks: &[Check], pass: bool) {
    for c in checks {
        eprintln!(
            "{}  {:<28} value {:>13.6e}  bound {:>13.6e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.bound
        );
    }
    eprintln!("{cmd}: {}", if pass { "PASS" } else { "FAIL" });
}

fn cmd_simulate(
    common: &ConfigArgs,
    save: Option<PathBuf>,
    load: Option<PathBuf>,
    sample_every: Option<usize>,
) -> Result<bool> {
    let mut cfg = build_config(common, false)?;
    if let Some(p) = save {
        cfg.save_checkpoint = Some(p);
    }
    if let Some(p) = load {
        cfg.load_checkpoint = Some(p);
    }
    if let Some(n) = sample_every {
        cfg.sample_every = n.max(1);
    }
    let grid = plan_grid(cfg.grid)?;
    let mut state = match &cfg.load_checkpoint {
        Some(path) => {
            let st = read_checkpoint_on(path, &grid)?;
            if st.eps != cfg.eps {
                eprintln!(
                    "simulate: running at eps = {} (checkpoint stored eps = {})",
                    cfg.eps, st.eps
                );
            }
            st
        }
        None => gen_initial_data(&cfg.data, &grid, &cfg.conormal)?,
    };
    state.eps = cfg.eps;
    let conormal = cfg.conormal;
    let eps = cfg.eps;
    let mut rows = Vec::new();
    let final_state = evolve(state, &cfg.solver, cfg.sample_every, |s| {
        rows.push(compute_ledger(&s.u, &s.b, s.t, eps, &conormal)?);
        Ok(())
    })?;
    match &cfg.ledger_csv {
        Some(path) => write_ledger_csv(path, &rows)?,
        None => write_ledger_csv_to(std::io::stdout().lock(), &rows)?,
    }
    if let Some(path) = &cfg.save_checkpoint {
        write_checkpoint(&final_state, path)?;
    }
    let last = rows.last().expect("evolve always observes at least once");
    eprintln!(
        "simulate: {} ledger rows, final t = {:.6}, E_full = {:.6e}, D_full = {:.6e}",
        rows.len(),
        final_state.t,
        last.e_full,
        last.d_full
    );
    Ok(true)
}

fn cmd_decay(common: &ConfigArgs) -> Result<bool> {
    let cfg = build_config(common, false)?;
    let grid = plan_grid(cfg.grid)?;
    let report = run_decay_study(&cfg.data, &grid, &cfg.decay_config())?;
    if let Some(path) = &cfg.ledger_csv {
        write_ledger_csv(path, &report.ledgers)?;
    }
    if let Some(fit) = &report.fit {
        eprintln!(
            "decay-study: exponent {:.4} over t in [{}, {}] ({} points, max log residual {:.3e})",
            fit.exponent, cfg.fit_window.0, cfg.fit_window.1, fit.points, fit.max_residual
        );
    }
    print_checks("decay-study", &report.checks, report.pass);
    emit_report(&cfg, &report)?;
    Ok(report.pass)
}

fn cmd_uniform(common: &ConfigArgs) -> Result<bool> {
    let cfg = build_config(common, true)?;
    let grid = plan_grid(cfg.grid)?;
    let report = run_uniform_bound_study(&cfg.data, &grid, &cfg.uniform_config())?;
    for run in &report.runs {
        eprintln!("uniform-study: eps = {:9.3e}  R = {:.6}", run.eps, run.r_value);
    }
    print_checks("uniform-study", &report.checks, report.pass);
    emit_report(&cfg, &report)?;
    Ok(report.pass)
}

fn cmd_limit(common: &ConfigArgs) -> Result<bool> {
    let cfg = build_config(common, true)?;
    let grid = plan_grid(cfg.grid)?;
    let report = run_limit_study(&cfg.data, &grid, &cfg.limit_config())?;
    for run in &report.runs {
        eprintln!(
            "limit-study: eps = {:9.3e}  sup L2 = {:.6e}  sup Linf = {:.6e}",
            run.eps, run.sup_l2, run.sup_linf
        );
    }
    if let (Some(l2), Some(linf)) = (&report.l2_fit, &report.linf_fit) {
        eprintln!(
            "limit-study: slopes L2 {:.4}, Linf {:.4} over {} eps values (dt = {:.6e})",
            l2.exponent,
            linf.exponent,
            report.runs.len(),
            report.dt
        );
    }
    print_checks("limit-study", &report.checks, report.pass);
    emit_report(&cfg, &report)?;
    Ok(report.pass)
}

#[derive(Serialize)]
struct ProbeSummary {
    name: String,
    max_ratio: Option<f64>,
    degenerate_fields: usize,
}

#[derive(Serialize)]
struct ProbeReport {
    count: usize,
    s: f64,
    max_mode: usize,
    violations: usize,
    /// Worst `lhs / rhs - 1` of the exact interpolation inequality.
    worst_margin: f64,
    probes: Vec<ProbeSummary>,
}

fn cmd_probe(common: &ConfigArgs, count: usize, max_mode: usize) -> Result<bool> {
    let cfg = build_config(common, false)?;
    let grid = plan_grid(cfg.grid)?;
    let s = cfg.conormal.s;
    let mut violations = 0usize;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut summaries: Vec<ProbeSummary> = Vec::new();

    for i in 0..count {
        let v = random_divfree_field(&grid, cfg.data.seed.wrapping_add(i as u64), max_mode);

        // Exact interpolation inequality on each mean-free component:
        // ||f|| <= ||Lambda_h^{-s} f||^{1/(1+s)} ||grad_h f||^{s/(1+s)}.
        for f in &v.c {
            let mut f = f.clone();
            zero_horizontal_mean(&mut f);
            let nf = l2_norm_sq(&f).sqrt();
            if nf == 0.0 {
                continue;
            }
            let nneg = l2_norm_sq(&lambda_h_pow(&f, -s)).sqrt();
            let ngrad =
                (l2_norm_sq(&derivative(&f, 1)) + l2_norm_sq(&derivative(&f, 2))).sqrt();
            let rhs = nneg.powf(1.0 / (1.0 + s)) * ngrad.powf(s / (1.0 + s));
            let margin = nf / rhs - 1.0;
            worst_margin = worst_margin.max(margin);
            if margin > 1e-12 {
                violations += 1;
            }
        }

        let rep = sobolev_probe(&v.c[0], &v.c[1], &v.c[2], &cfg.conormal);
        if summaries.is_empty() {
            summaries = rep
                .probes
                .iter()
                .map(|p| ProbeSummary {
                    name: p.name.clone(),
                    max_ratio: None,
                    degenerate_fields: 0,
                })
                .collect();
        }
        for (sum, p) in summaries.iter_mut().zip(&rep.probes) {
            if let Some(r) = p.ratio {
                sum.max_ratio = Some(sum.max_ratio.map_or(r, |m| m.max(r)));
            }
            if p.degenerate {
                sum.degenerate_fields += 1;
            }
        }
    }

    let report = ProbeReport {
        count,
        s,
        max_mode,
        violations,
        worst_margin,
        probes: summaries,
    };
    let pass = violations == 0;
    eprintln!(
        "{}  interpolation_inequality     {} fields, {} violations, worst margin {:+.3e}",
        if pass { "PASS" } else { "FAIL" },
        count,
        violations,
        worst_margin
    );
    for p in &report.probes {
        eprintln!(
            "info  {:<28} max ratio {}",
            p.name,
            p.max_ratio.map_or("n/a".into(), |r| format!("{r:.4}"))
        );
    }
    emit_report(&cfg, &report)?;
    Ok(pass)
}

/// Independent 2x2 matrix exponential: scaling and squaring over a Taylor
/// series, no shared code with the propagator construction.
fn expm2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let norm = m.iter().flatten().fold(0.0f64, |a, &x| a.max(x.abs())) * 2.0;
    let k = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let s = 0.5f64.powi(k);
    let a = [[m[0][0] * s, m[0][1] * s], [m[1][0] * s, m[1][1] * s]];
    let mul = |x: [[f64; 2]; 2], y: [[f64; 2]; 2]| {
        [
            [
                x[0][0] * y[0][0] + x[0][1] * y[1][0],
                x[0][0] * y[0][1] + x[0][1] * y[1][1],
            ],
            [
                x[1][0] * y[0][0] + x[1][1] * y[1][0],
                x[1][0] * y[0][1] + x[1][1] * y[1][1],
            ],
        ]
    };
    let mut sum = [[1.0, 0.0], [0.0, 1.0]];
    let mut term = sum;
    for j in 1..=24 {
        term = mul(term, a);
        let inv = 1.0 / j as f64;
        for row in &mut term {
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        for r in 0..2 {
            for c in 0..2 {
                sum[r][c] += term[r][c];
            }
        }
    }
    for _ in 0..k {
        sum = mul(sum, sum);
    }
    sum
}

fn cmd_verify_linear(common: &ConfigArgs) -> Result<bool> {
    let cfg = build_config(common, false)?;
    let grid = plan_grid(cfg.grid)?;
    let eps = cfg.eps;
    let horizons = [0.02, 0.1, 0.5, 1.0];
    let mut worst_prop = 0.0f64;
    let mut worst_eig = 0.0f64;
    let mut modes = 0usize;
    let (n1, n2, n3) = grid.shape();
    for i1 in 0..n1 {
        if !grid.keep1[i1] {
            continue;
        }
        for i2 in 0..n2 {
            if !grid.keep2[i2] {
                continue;
            }
            for j in 0..n3 {
                if !grid.keep3[j] {
                    continue;
                }
                let (k1, k2, kappa) = (grid.k1[i1], grid.k2[i2], grid.kappa[j]);
                let (nu_u, nu_b) = viscosities(k1, k2, kappa, eps);
                modes += 1;
                for &dt in &horizons {
                    let (p11, p22, q) = propagator_entries(nu_u, nu_b, k2, dt);
                    // Real form of the generator: substituting w = i b-hat
                    // turns the i k2 coupling into an antisymmetric block.
                    let exact = expm2([[-nu_u * dt, k2 * dt], [-k2 * dt, -nu_b * dt]]);
                    let scale = exact
                        .iter()
                        .flatten()
                        .fold(0.0f64, |a, &x| a.max(x.abs()))
                        .max(1e-300);
                    let err = (p11 - exact[0][0])
                        .abs()
                        .max((p22 - exact[1][1]).abs())
                        .max((q - exact[0][1]).abs())
                        / scale;
                    worst_prop = worst_prop.max(err);
                }
                // Eigenvalues must satisfy the characteristic polynomial.
                let (l1, l2) = linear_eigenvalues(k1, k2, kappa, eps);
                let scale = (nu_u + nu_b).max(nu_u * nu_b + k2 * k2).max(1.0);
                for lam in [l1, l2] {
                    let chi = lam * lam
                        + Complex64::new(nu_u + nu_b, 0.0) * lam
                        + Complex64::new(nu_u * nu_b + k2 * k2, 0.0);
                    worst_eig = worst_eig.max(chi.norm() / scale);
                }
            }
        }
    }
    let tol = 1e-12;
    let pass = worst_prop <= tol && worst_eig <= tol;
    eprintln!(
        "{}  propagator_vs_exponential    max relative error {:.3e} over {} modes x {} horizons (tolerance {:.0e})",
        if worst_prop <= tol { "PASS" } else { "FAIL" },
        worst_prop,
        modes,
        horizons.len(),
        tol
    );
    eprintln!(
        "{}  eigenvalue_characteristic    max residual {:.3e} (tolerance {:.0e})",
        if worst_eig <= tol { "PASS" } else { "FAIL" },
        worst_eig,
        tol
    );
    eprintln!("verify-linear: {}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}

fn cmd_ledger(common: &ConfigArgs, path: &PathBuf) -> Result<bool> {
    let cfg = build_config(common, false)?;
    let state = read_checkpoint(path)?;
    let row = compute_ledger(&state.u, &state.b, state.t, state.eps, &cfg.conormal)?;
    match &cfg.ledger_csv {
        Some(p) => write_ledger_csv(p, &[row])?,
        None => write_ledger_csv_to(std::io::stdout().lock(), &[row])?,
    }
    eprintln!(
        "ledger: t = {:.6}, eps = {:.3e}, E_full = {:.6e}",
        state.t, state.eps, row.e_full
    );
    Ok(true)
}

fn run(cli: &Cli) -> Result<bool> {
    if let Ok(v) = std::env::var("MHD_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| MhdError::Config(format!("MHD_THREADS = '{v}' is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| MhdError::Config(format!("thread pool: {e}")))?;
    }
    match &cli.cmd {
        Cmd::Simulate {
            common,
            save,
            load,
            sample_every,
        } => cmd_simulate(common, save.clone(), load.clone(), *sample_every),
        Cmd::DecayStudy { common } => cmd_decay(common),
        Cmd::UniformStudy { common } => cmd_uniform(common),
        Cmd::LimitStudy { common } => cmd_limit(common),
        Cmd::ProbeInequalities {
            common,
            count,
            max_mode,
        } => cmd_probe(common, *count, *max_mode),
        Cmd::VerifyLinear { common } => cmd_verify_linear(common),
        Cmd::Ledger { common, path } => cmd_ledger(common, path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
