use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use ckequant_core::config::{legendre_field, ExperimentConfig, SolverMode};
use ckequant_core::continuum::{
    almost_balanced, assemble_p_operator, bergman_table, inverse_ma_flow, loglog_slope, p_spectrum, BergmanRow,
    RadialGrid, RadialState,
};
use ckequant_core::coupled_solver::{
    balancing_flow, fixed_point_gap, iterate_to_balance, normalize, CoupledState, FlowTrace,
};
use ckequant_core::geometry::{Testbed, TestbedSpec};
use ckequant_core::hermitian::{parse_gram_list, GramJson};
use ckequant_core::obstructions::{self, lattice_dims_and_weights};
use ckequant_core::potential::PotentialField;
use ckequant_core::{functionals, Error};
use clap::ValueEnum;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::artifacts::ArtifactWriter;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subcommand {
    Balance,
    Flow,
    Bergman,
    Spectrum,
    Cflow,
    Obstruction,
    Almost,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Balance => "balance",
            Subcommand::Flow => "flow",
            Subcommand::Bergman => "bergman",
            Subcommand::Spectrum => "spectrum",
            Subcommand::Cflow => "cflow",
            Subcommand::Obstruction => "obstruction",
            Subcommand::Almost => "almost",
        }
    }
}

/// Runs one subcommand. Artifacts are written before a non-convergence
/// error is reported.
pub fn run(sub: Subcommand, cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    match sub {
        Subcommand::Balance => balance(cfg, cfg.solver.mode, out),
        Subcommand::Flow => balance(cfg, SolverMode::Flow, out),
        Subcommand::Bergman => bergman(cfg, out),
        Subcommand::Spectrum => spectrum(cfg, out),
        Subcommand::Cflow => cflow(cfg, out),
        Subcommand::Obstruction => obstruction(cfg, out),
        Subcommand::Almost => almost(cfg, out),
    }
}

fn testbed(cfg: &ExperimentConfig) -> Result<Arc<Testbed>, CliError> {
    Ok(Testbed::new(cfg.testbed.clone(), &cfg.resolution())?)
}

fn start_state(cfg: &ExperimentConfig, tb: Arc<Testbed>) -> Result<CoupledState, CliError> {
    let st = &cfg.start;
    if let Some(path) = &st.grams_file {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(Path::new(path), e))?;
        return Ok(CoupledState::new(tb, parse_gram_list(&text)?)?);
    }
    if st.perturb {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        return Ok(CoupledState::perturbed_reference(tb, &mut rng, st.lo, st.hi)?);
    }
    Ok(CoupledState::reference(tb)?)
}

fn balance(cfg: &ExperimentConfig, mode: SolverMode, out: &mut ArtifactWriter) -> Result<(), CliError> {
    let state = start_state(cfg, testbed(cfg)?)?;
    let result = match mode {
        SolverMode::TIterate => iterate_to_balance(state, &cfg.iterate_options()),
        SolverMode::Flow => balancing_flow(state, &cfg.flow_options()),
    };
    let (state, trace) = match result {
        Ok(r) => r,
        Err(Error::NotConverged { iterations, residual, trace }) => {
            out.csv(&trace.to_csv())?;
            return Err(Error::NotConverged { iterations, residual, trace }.into());
        }
        Err(e) => return Err(e.into()),
    };
    out.csv(&trace.to_csv())?;
    let converged = state.residual < cfg.solver.tol_res;
    let normalized = normalize(&state, cfg.normalize_mode())?;
    let grams: Vec<GramJson> = normalized.grams.iter().map(|g| g.to_json_value()).collect();
    out.json(&json!({
        "mode": mode,
        "converged": converged,
        "steps": trace.rows.len().saturating_sub(1),
        "residual": state.residual,
        "fixed_point_gap": fixed_point_gap(&state)?,
        "functionals": functionals::report(&normalized)?,
        "grams": grams,
    }))?;
    if !converged {
        return Err(not_converged(&state, trace).into());
    }
    Ok(())
}

fn not_converged(state: &CoupledState, trace: FlowTrace) -> Error {
    Error::NotConverged { iterations: trace.rows.len().saturating_sub(1), residual: state.residual, trace: Box::new(trace) }
}

fn require_p1(spec: &TestbedSpec) -> Result<(), CliError> {
    if spec.n != 1 {
        return Err(Error::SpecInvalid("continuum subcommands run on P^1 only".into()).into());
    }
    Ok(())
}

fn sample_series(grid: &RadialGrid, series: &[Vec<f64>], n_factors: usize) -> Vec<Vec<f64>> {
    (0..n_factors).map(|i| grid.sample(|u| legendre_field(series, i, u))).collect()
}

#[derive(Serialize)]
struct SlopeFit {
    factor: usize,
    slope_bar: f64,
    slope_leading: f64,
    /// `b_0` from the last two levels, assuming `B/k = b_0 + c/k`.
    b0_richardson: f64,
}

fn bergman(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    require_p1(&cfg.testbed)?;
    let b = &cfg.bergman;
    let grid = RadialGrid::new(cfg.continuum.n)?;
    let psi = |i: usize, u: f64| legendre_field(&b.psi, i, u);
    let rows = bergman_table(&cfg.testbed.degrees, &b.k_list, Some(&psi), &grid, b.gl_nodes)?;
    let mut csv = format!("{}\n", BergmanRow::csv_header());
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    out.csv(&csv)?;
    let mut fits = Vec::new();
    for i in 0..cfg.testbed.n_factors() {
        let mine: Vec<&BergmanRow> = rows.iter().filter(|r| r.factor == i).collect();
        let ks: Vec<f64> = mine.iter().map(|r| r.k as f64).collect();
        let bar: Vec<f64> = mine.iter().map(|r| r.sup_bar_dev).collect();
        let lead: Vec<f64> = mine.iter().map(|r| r.sup_leading_dev).collect();
        let fit = |ys: &[f64]| if ks.len() >= 2 && ys.iter().all(|y| *y > 0.0) { loglog_slope(&ks, ys) } else { f64::NAN };
        let b0 = match mine.len() {
            0 | 1 => f64::NAN,
            n => {
                let (a, z) = (mine[n - 2], mine[n - 1]);
                let (ka, kz) = (a.k as f64, z.k as f64);
                (kz * z.b_over_kn - ka * a.b_over_kn) / (kz - ka)
            }
        };
        fits.push(SlopeFit { factor: i + 1, slope_bar: fit(&bar), slope_leading: fit(&lead), b0_richardson: b0 });
    }
    out.json(&json!({ "degrees": cfg.testbed.degrees, "k_list": b.k_list, "fits": fits }))?;
    Ok(())
}

fn spectrum(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    require_p1(&cfg.testbed)?;
    let grid = RadialGrid::new(cfg.continuum.n)?;
    let phi = sample_series(&grid, &cfg.continuum.phi, cfg.testbed.n_factors());
    let state = RadialState::new(&grid, &cfg.testbed.degrees, cfg.testbed.lambda(), phi)?;
    let op = assemble_p_operator(&state)?;
    let mut ev = p_spectrum(&op)?;
    ev.reverse();
    let mut csv = String::from("eig_index,eigenvalue\n");
    for (j, e) in ev.iter().enumerate() {
        writeln!(csv, "{j},{e}").unwrap();
    }
    out.csv(&csv)?;
    let zeros = ev.iter().filter(|x| x.abs() < 1e-6).count();
    let gap = ev.iter().copied().find(|x| *x <= -1e-6);
    out.json(&json!({
        "n": grid.n,
        "asymmetry": op.asymmetry(),
        "max_eigenvalue": ev.first(),
        "zero_count": zeros,
        "first_negative": gap,
        "top": &ev[..ev.len().min(8)],
    }))?;
    Ok(())
}

fn cflow(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    require_p1(&cfg.testbed)?;
    let grid = RadialGrid::new(cfg.continuum.n)?;
    let phi0 = sample_series(&grid, &cfg.cflow.phi0, cfg.testbed.n_factors());
    let trace = inverse_ma_flow(&grid, &cfg.testbed.degrees, phi0, &cfg.cflow.options())?;
    out.csv(&trace.to_csv())?;
    let first = trace.rows.first().map(|r| r.sup_phi);
    let last = trace.rows.last().map(|r| r.sup_phi);
    out.json(&json!({
        "dt": trace.dt,
        "steps": trace.steps,
        "ding_increases": trace.ding_increases,
        "sup_phi_initial": first,
        "sup_phi_final": last,
        "max_mass_err": trace.rows.iter().map(|r| r.mass_err).fold(0.0, f64::max),
    }))?;
    Ok(())
}

fn obstruction(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    let tb = testbed(cfg)?;
    let o = &cfg.obstruction;
    let fields = vec![PotentialField::zero(&tb); tb.n_factors()];
    let default: Vec<u32> = (1..=cfg.testbed.n as u32 + 4).collect();
    let ms = o.m_samples.as_deref().unwrap_or(&default);
    let (report, _, _) = obstructions::compute(&tb, &o.action, Some(ms), &fields)?;
    let mut csv = String::from("factor,m,x,dim,weight\n");
    for i in 0..tb.n_factors() {
        for (m, (x, dim, w)) in ms.iter().zip(lattice_dims_and_weights(&cfg.testbed, &o.action, i, ms)?) {
            writeln!(csv, "{},{m},{x},{dim},{w}", i + 1).unwrap();
        }
    }
    out.csv(&csv)?;
    out.json(&report)?;
    Ok(())
}

#[derive(Serialize)]
struct AlmostFit {
    factor: usize,
    slope_base: f64,
    slope_corrected: f64,
}

fn almost(cfg: &ExperimentConfig, out: &mut ArtifactWriter) -> Result<(), CliError> {
    require_p1(&cfg.testbed)?;
    let a = &cfg.almost;
    let grid = RadialGrid::new(cfg.continuum.n)?;
    let psi = |i: usize, u: f64| legendre_field(&a.psi, i, u);
    let res = almost_balanced(&cfg.testbed.degrees, &a.k_extract, &a.k_eval, Some(&psi), &grid, a.gl_nodes, &a.poisson())?;
    let mut csv = format!("{}\n", ckequant_core::continuum::AlmostRow::csv_header());
    for r in &res.rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    out.csv(&csv)?;
    let ks: Vec<f64> = a.k_eval.iter().map(|k| *k as f64).collect();
    let fits: Vec<AlmostFit> = (0..cfg.testbed.n_factors())
        .map(|i| {
            let pick = |f: fn(&ckequant_core::continuum::AlmostRow) -> f64| -> Vec<f64> {
                res.rows.iter().filter(|r| r.factor == i).map(f).collect()
            };
            let fit = |ys: Vec<f64>| if ks.len() >= 2 { loglog_slope(&ks, &ys) } else { f64::NAN };
            AlmostFit { factor: i + 1, slope_base: fit(pick(|r| r.base_dev)), slope_corrected: fit(pick(|r| r.corrected_dev)) }
        })
        .collect();
    out.json(&json!({
        "fits": fits,
        "constants": res.poisson.constants,
        "kernel_component": res.poisson.kernel_component,
        "poisson_residual": res.poisson.residual,
        "extraction_drop_diff": res.extraction.drop_diff,
        "extraction_norm": res.extraction.norm,
    }))?;
    Ok(())
}
