//! Continuum and quantized energy functionals.
//!
//! Gauge: `Ω_i^n` is normalized to one, so `AM(φ + c) = AM(φ) + c`, and
//! the quantized functionals are measured against the reference Gram
//! matrices `Ĝ_i`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::coupled_solver::CoupledState;
use crate::error::Result;
use crate::geometry::Testbed;
use crate::hermitian::{self, GramForm, Herm};
use crate::potential::PotentialField;

/// `AM(φ) = (1/(n+1)) Σ_j ∫ φ ω_φ^j ∧ ω̂^{n-j}`.
pub fn aubin_mabuchi(tb: &Testbed, i: usize, phi: &PotentialField) -> Result<f64> {
    let ratios = phi.ma_ratios(tb, i)?;
    let n1 = ratios.len() as f64;
    Ok(ratios.iter().map(|r| tb.grid.integrate2(&phi.values, r)).sum::<f64>() / n1)
}

/// `L̂(φ) = ∫ φ MA(0)`.
pub fn l_hat(tb: &Testbed, values: &[f64]) -> f64 {
    tb.grid.integrate(values)
}

/// `J(φ) = -AM(φ) + L̂(φ)`.
pub fn j_functional(tb: &Testbed, i: usize, phi: &PotentialField) -> Result<f64> {
    Ok(-aubin_mabuchi(tb, i, phi)? + l_hat(tb, &phi.values))
}

/// `ℒ(φ) = -λ log ∫ exp(-λ Σ_i φ_i) θ₀ⁿ`.
pub fn coupled_l(tb: &Testbed, fields: &[&[f64]]) -> f64 {
    let lambda = tb.spec.lambda();
    let m = tb.grid.len();
    let expo: Vec<f64> = (0..m).map(|q| -lambda * fields.iter().map(|f| f[q]).sum::<f64>()).collect();
    let top = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = tb.grid.mass.iter().zip(&expo).map(|(w, e)| w * (e - top).exp()).sum();
    -lambda * (top + s.ln())
}

/// `AM^{(k)}(G) = -(1/(kD)) log det(G Ĝ⁻¹)`.
pub fn am_quantized(g: &GramForm, reference: &GramForm, k: f64) -> Result<f64> {
    let ld = g.factor()?.log_det() - reference.factor()?.log_det();
    Ok(-ld / (k * g.dim() as f64))
}

/// `J^{(k)} = -AM^{(k)} + L̂∘FS`.
pub fn j_quantized(tb: &Testbed, i: usize, g: &GramForm) -> Result<f64> {
    let fs = hermitian::fs_potential(tb, i, g)?;
    Ok(-am_quantized(g, &tb.references[i], tb.k())? + l_hat(tb, &fs))
}

/// `𝒟 = -Σ AM_i(φ_i) + ℒ(φ)`.
pub fn ding_fields(tb: &Testbed, fields: &[PotentialField]) -> Result<f64> {
    let mut am = 0.0;
    for (i, f) in fields.iter().enumerate() {
        am += aubin_mabuchi(tb, i, f)?;
    }
    let vals: Vec<&[f64]> = fields.iter().map(|f| f.values.as_slice()).collect();
    Ok(-am + coupled_l(tb, &vals))
}

/// `𝒟∘FS` at the state.
pub fn ding(state: &CoupledState) -> Result<f64> {
    ding_fields(state.testbed(), &state.fs_fields()?)
}

/// `𝒟^{(k)} = -Σ AM_i^{(k)} + ℒ∘FS`, computing only what it needs.
pub fn ding_quantized_grams(tb: &Testbed, grams: &[GramForm]) -> Result<f64> {
    let mut am = 0.0;
    let mut fs = Vec::with_capacity(grams.len());
    for (i, g) in grams.iter().enumerate() {
        am += am_quantized(g, &tb.references[i], tb.k())?;
        fs.push(hermitian::fs_potential(tb, i, g)?);
    }
    let vals: Vec<&[f64]> = fs.iter().map(|f| f.as_slice()).collect();
    Ok(-am + coupled_l(tb, &vals))
}

pub fn ding_quantized(state: &CoupledState) -> Result<f64> {
    let tb = state.testbed();
    let mut am = 0.0;
    for (i, g) in state.grams.iter().enumerate() {
        am += am_quantized(g, &tb.references[i], tb.k())?;
    }
    let vals: Vec<&[f64]> = state.fs.iter().map(|f| f.as_slice()).collect();
    Ok(-am + coupled_l(tb, &vals))
}

/// `Z_i = AM_i∘FS_i - AM_i^{(k)}`.
pub fn z_gap(state: &CoupledState, i: usize) -> Result<f64> {
    let tb = state.testbed();
    let field = PotentialField::from_gram(tb, i, &state.grams[i])?;
    Ok(aubin_mabuchi(tb, i, &field)? - am_quantized(&state.grams[i], &tb.references[i], tb.k())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalReport {
    pub am: Vec<f64>,
    pub am_q: Vec<f64>,
    /// `Σ_i L̂_i(FS_i)`.
    pub l_hat: f64,
    pub l_coupled: f64,
    /// `𝒥∘FS`.
    pub j: f64,
    pub j_q: f64,
    /// `𝒟∘FS`.
    pub ding: f64,
    pub ding_q: f64,
    pub z: Vec<f64>,
}

impl FunctionalReport {
    /// `|𝒟^{(k)} - Σ Z_i - 𝒟∘FS|`.
    pub fn decomposition_residue(&self) -> f64 {
        (self.ding_q - self.z.iter().sum::<f64>() - self.ding).abs()
    }
}

pub fn report(state: &CoupledState) -> Result<FunctionalReport> {
    let tb = state.testbed();
    let fields = state.fs_fields()?;
    let mut am = Vec::new();
    let mut am_q = Vec::new();
    let mut l_hat_sum = 0.0;
    for (i, f) in fields.iter().enumerate() {
        am.push(aubin_mabuchi(tb, i, f)?);
        am_q.push(am_quantized(&state.grams[i], &tb.references[i], tb.k())?);
        l_hat_sum += l_hat(tb, &f.values);
    }
    let vals: Vec<&[f64]> = state.fs.iter().map(|f| f.as_slice()).collect();
    let l_coupled = coupled_l(tb, &vals);
    let z: Vec<f64> = am.iter().zip(&am_q).map(|(a, b)| a - b).collect();
    Ok(FunctionalReport {
        j: l_hat_sum - am.iter().sum::<f64>(),
        j_q: l_hat_sum - am_q.iter().sum::<f64>(),
        ding: -am.iter().sum::<f64>() + l_coupled,
        ding_q: -am_q.iter().sum::<f64>() + l_coupled,
        am,
        am_q,
        l_hat: l_hat_sum,
        l_coupled,
        z,
    })
}

/// Analytic derivative of `𝒟^{(k)}` along `t ↦ L_i exp(-tA_i) L_i†`:
/// `Σ_i Tr(A_i (D_i M̄_i - Id))/(k D_i)`, i.e. `k⟨A, D M̄ - Id⟩`.
pub fn ding_gradient(state: &CoupledState, dirs: &[Herm]) -> f64 {
    let tb = state.testbed();
    dirs.iter()
        .zip(&state.scaled_moments)
        .enumerate()
        .map(|(i, (a, dm))| a.trace_product(&dm.minus_identity()) / (tb.k() * tb.dim(i) as f64))
        .sum()
}

/// `𝒟^{(k)}` at `L_i exp(-tA_i) L_i†`.
pub fn ding_along(tb: &Testbed, grams: &[GramForm], dirs: &[Herm], t: f64) -> Result<f64> {
    let moved = grams
        .iter()
        .zip(dirs)
        .map(|(g, a)| hermitian::geodesic(g, a, t))
        .collect::<Result<Vec<_>>>()?;
    ding_quantized_grams(tb, &moved)
}

/// Centered second difference of `𝒟^{(k)}` along a Bergman geodesic.
pub fn second_difference(tb: &Testbed, grams: &[GramForm], dirs: &[Herm], delta: f64) -> Result<f64> {
    let p = ding_along(tb, grams, dirs, delta)?;
    let z = ding_quantized_grams(tb, grams)?;
    let m = ding_along(tb, grams, dirs, -delta)?;
    Ok((p - 2.0 * z + m) / (delta * delta))
}

/// Random direction of unit norm `Σ_i Tr(A_i²)/(k² D_i) = 1`; diagonal on
/// torus-reduced grids, full Hermitian otherwise.
pub fn random_direction(tb: &Testbed, rng: &mut impl Rng) -> Vec<Herm> {
    let general = tb.grid.is_general();
    let mut dirs: Vec<Herm> = (0..tb.n_factors())
        .map(|i| {
            let n = tb.dim(i);
            if general {
                let mut m = DMatrix::<Complex64>::zeros(n, n);
                for a in 0..n {
                    m[(a, a)] = Complex64::new(rng.random_range(-1.0..1.0), 0.0);
                    for b in (a + 1)..n {
                        let z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                        m[(a, b)] = z;
                        m[(b, a)] = z.conj();
                    }
                }
                Herm::from_dense(m)
            } else {
                Herm::from_diagonal((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            }
        })
        .collect();
    let norm: f64 = dirs
        .iter()
        .map(|a| hermitian::frame_norm(a, tb.k()).powi(2))
        .sum::<f64>()
        .sqrt();
    for a in dirs.iter_mut() {
        *a = a.scale(1.0 / norm);
    }
    dirs
}

/// Second differences (step `1e-2`) of `𝒟^{(k)}` along `trials` random
/// unit geodesic directions.
pub fn convexity_probe(state: &CoupledState, trials: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let tb = state.testbed();
    (0..trials)
        .map(|_| {
            let dirs = random_direction(tb, rng);
            second_difference(tb, &state.grams, &dirs, 1e-2)
        })
        .collect()
}
