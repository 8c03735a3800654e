use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{RadialGrid, RadialState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImfOptions {
    /// Time step; `None` picks `0.2/stiffness`.
    pub dt: Option<f64>,
    pub t_end: f64,
    /// Trace sampling interval in time.
    pub record_every: f64,
}

impl Default for ImfOptions {
    fn default() -> Self {
        ImfOptions { dt: None, t_end: 10.0, record_every: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImfRow {
    pub t: f64,
    pub sup_phi: f64,
    pub ding: f64,
    pub mass_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImfTrace {
    pub dt: f64,
    pub steps: usize,
    pub rows: Vec<ImfRow>,
    /// Accepted steps along which the discrete Ding functional rose by more than 1e-12.
    pub ding_increases: usize,
    pub final_phi: Vec<Vec<f64>>,
}

impl ImfTrace {
    /// CSV `t,sup_phi,ding,mass_err`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,sup_phi,ding,mass_err\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.t, r.sup_phi, r.ding, r.mass_err).unwrap();
        }
        s
    }
}

/// Gershgorin bound for the linearization of `φ ↦ 1 - μ/MA(φ)`.
fn stiffness(state: &RadialState) -> f64 {
    let g = &state.grid;
    let nf = state.n_factors() as f64;
    let mut worst: f64 = 0.0;
    for (i, m) in state.ma.iter().enumerate() {
        for j in 0..g.n {
            let q = g.face_q(j as isize) + g.face_q(j as isize - 1);
            let r = state.mu[j] / m[j];
            worst = worst.max(r * (2.0 * q / (g.h * g.h * state.degrees[i] * m[j]) + 2.0 * nf));
        }
    }
    worst
}

fn sup(phi: &[Vec<f64>]) -> f64 {
    phi.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Explicit Euler for `∂_t φ_i = 1 - e^{ρ_i}` on S¹-invariant potentials.
pub fn inverse_ma_flow(grid: &RadialGrid, degrees: &[u32], phi0: Vec<Vec<f64>>, opts: &ImfOptions) -> Result<ImfTrace> {
    if !(opts.t_end >= 0.0 && opts.t_end.is_finite()) || !(opts.record_every > 0.0) {
        return Err(Error::SpecInvalid("t_end must be finite and nonnegative, record_every positive".into()));
    }
    let mut state = RadialState::new(grid, degrees, 1.0, phi0)?;
    let stiff = stiffness(&state);
    let dt = opts.dt.unwrap_or(0.2 / stiff);
    if !(dt > 0.0) || dt * stiff >= 1.0 {
        return Err(Error::SpecInvalid(format!("dt = {dt} violates dt * stiffness < 1 (stiffness {stiff})")));
    }
    let row = |s: &RadialState, t: f64| ImfRow { t, sup_phi: sup(&s.phi), ding: s.ding(), mass_err: s.mass_error() };
    let mut rows = vec![row(&state, 0.0)];
    let mut ding = state.ding();
    let mut ding_increases = 0;
    let steps = (opts.t_end / dt).ceil() as usize;
    let mut next_record = opts.record_every;
    let mut t = 0.0;
    for step in 1..=steps {
        let h = dt.min(opts.t_end - t);
        let phi: Vec<Vec<f64>> = state
            .phi
            .iter()
            .zip(&state.ma)
            .map(|(p, m)| p.iter().zip(m.iter().zip(&state.mu)).map(|(p, (m, mu))| p + h * (1.0 - mu / m)).collect())
            .collect();
        t = if step == steps { opts.t_end } else { t + h };
        state = match RadialState::new(grid, degrees, 1.0, phi) {
            Ok(s) => s,
            Err(Error::DegenerateMetric(_)) | Err(Error::NormalizationFailure) => return Err(Error::Blowup { t }),
            Err(e) => return Err(e),
        };
        let d = state.ding();
        if d > ding + 1e-12 {
            ding_increases += 1;
        }
        ding = d;
        if t + 1e-12 >= next_record || step == steps {
            rows.push(row(&state, t));
            while next_record <= t + 1e-12 {
                next_record += opts.record_every;
            }
        }
    }
    Ok(ImfTrace { dt, steps, rows, ding_increases, final_phi: state.phi })
}

#[cfg(test)]
mod tests {
    use super::super::shifted_legendre;
    use super::*;

    #[test]
    fn cke_is_stationary() {
        let g = RadialGrid::new(128).unwrap();
        let tr = inverse_ma_flow(&g, &[1, 1], vec![vec![0.0; g.n]; 2], &ImfOptions { t_end: 0.5, ..Default::default() })
            .unwrap();
        assert!(tr.rows.iter().all(|r| r.sup_phi < 1e-8));
        assert!((tr.rows.last().unwrap().t - 0.5).abs() < 1e-12);
    }

    #[test]
    fn perturbation_decays_and_ding_descends() {
        let g = RadialGrid::new(128).unwrap();
        let eps = 0.05;
        let phi0 = vec![g.sample(|u| eps * shifted_legendre(2, u)), g.sample(|u| eps * shifted_legendre(3, u))];
        let tr = inverse_ma_flow(&g, &[1, 1], phi0, &ImfOptions { t_end: 1.0, ..Default::default() }).unwrap();
        assert_eq!(tr.ding_increases, 0);
        assert!(tr.rows.iter().all(|r| r.mass_err < 1e-8));
        let first = tr.rows[0].sup_phi;
        let last = tr.rows.last().unwrap().sup_phi;
        assert!(last < 0.5 * first, "{first} -> {last}");
        for w in tr.rows.windows(2) {
            assert!(w[1].ding <= w[0].ding + 1e-12);
        }
        assert!(tr.to_csv().starts_with("t,sup_phi,ding,mass_err\n"));
    }

    #[test]
    fn rejects_unstable_step() {
        let g = RadialGrid::new(128).unwrap();
        let r = inverse_ma_flow(&g, &[1, 1], vec![vec![0.0; g.n]; 2], &ImfOptions { dt: Some(0.1), ..Default::default() });
        assert!(matches!(r, Err(Error::SpecInvalid(_))));
    }
}
