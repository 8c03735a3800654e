//! Finite-difference companion on S¹-invariant data on ℙ¹.
//!
//! Invariant functions are functions of `u = |z|²/(1+|z|²) ∈ (0,1)`, on
//! which θ₀ is `du`. With `Q(u) = u(1-u)`, `i∂∂̄v/θ₀ = (Q v')'`, so
//! `MA(φ_i)/θ₀ = 1 + (Qφ_i')'/d_i` and the weighted Laplacian is
//! `(e^{ρ_i} Q v')'/(d_i μ)`.
//!
//! Discretization: `n` cells of width `h = 1/n`, unknowns at cell centres,
//! conservative fluxes on faces. `Q` vanishes at `u ∈ {0,1}`, so the
//! boundary fluxes are zero and no ghost nodes are needed: a smooth field on
//! ℙ¹ is smooth in `u` up to the boundary and the zero flux is its exact
//! regularity condition.

mod bergman;
mod imf;
mod operator;
mod poisson;

pub use bergman::{
    almost_balanced, bergman_functions, bergman_table, extract_b1, loglog_slope, neville, AlmostBalanced, AlmostRow,
    B1Extraction, BergmanRow, RadialPotential,
};
pub use imf::{inverse_ma_flow, ImfOptions, ImfRow, ImfTrace};
pub use operator::{assemble_p_operator, p_spectrum, DiscreteOperator};
pub use poisson::{solve_coupled_poisson, PoissonOptions, PoissonSolution};

use crate::error::{Error, Result};

pub const MIN_NODES: usize = 128;
pub const MAX_NODES: usize = 4096;

/// Uniform cell-centred grid on `(0, 1)` in `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialGrid {
    pub n: usize,
    pub h: f64,
    pub nodes: Vec<f64>,
}

impl RadialGrid {
    pub fn new(n: usize) -> Result<Self> {
        if !(MIN_NODES..=MAX_NODES).contains(&n) {
            return Err(Error::SpecInvalid(format!("radial grid needs {MIN_NODES}..={MAX_NODES} nodes, got {n}")));
        }
        let h = 1.0 / n as f64;
        Ok(RadialGrid { n, h, nodes: (0..n).map(|j| (j as f64 + 0.5) * h).collect() })
    }

    /// `Q` at face `j + 1/2`, zero on the boundary faces.
    pub fn face_q(&self, face: isize) -> f64 {
        if face < 0 || face as usize >= self.n - 1 {
            return 0.0;
        }
        let u = (face as f64 + 1.0) * self.h;
        u * (1.0 - u)
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.nodes.iter().map(|&u| f(u)).collect()
    }

    /// `∫ f g du` by the midpoint rule.
    pub fn integrate2(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() * self.h
    }

    /// Four-point Lagrange interpolation (extrapolation near the ends).
    pub fn interpolate(&self, values: &[f64], u: f64) -> f64 {
        let pos = u / self.h - 0.5;
        let base = (pos.floor() as isize - 1).clamp(0, self.n as isize - 4) as usize;
        let mut out = 0.0;
        for a in 0..4 {
            let xa = (base + a) as f64;
            let mut w = 1.0;
            for b in 0..4 {
                if a != b {
                    let xb = (base + b) as f64;
                    w *= (pos - xb) / (xa - xb);
                }
            }
            out += w * values[base + a];
        }
        out
    }

    /// `(Q v')'` with zero boundary flux, optionally with face weights.
    pub fn flux_divergence(&self, v: &[f64], face_weight: Option<&[f64]>) -> Vec<f64> {
        let n = self.n;
        let h2 = self.h * self.h;
        let flux: Vec<f64> = (0..n - 1)
            .map(|f| self.face_q(f as isize) * face_weight.map_or(1.0, |w| w[f]) * (v[f + 1] - v[f]))
            .collect();
        (0..n)
            .map(|j| {
                let right = if j + 1 < n { flux[j] } else { 0.0 };
                let left = if j > 0 { flux[j - 1] } else { 0.0 };
                (right - left) / h2
            })
            .collect()
    }
}

/// Shifted Legendre polynomial `P_l(2u - 1)`.
pub fn shifted_legendre(l: usize, u: f64) -> f64 {
    let x = 2.0 * u - 1.0;
    let (mut p0, mut p1) = (1.0, x);
    if l == 0 {
        return 1.0;
    }
    for j in 2..=l {
        let jf = j as f64;
        let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Potentials on the radial grid with their discrete MA densities, the
/// canonical measure and the coupled Ricci potentials.
#[derive(Clone, Debug)]
pub struct RadialState {
    pub grid: RadialGrid,
    pub degrees: Vec<f64>,
    pub lambda: f64,
    pub phi: Vec<Vec<f64>>,
    /// `MA(φ_i)/du`, summing to one against `h`.
    pub ma: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    /// `ℒ(φ) = -λ log ∫ e^{-λΣφ} du`.
    pub l_coupled: f64,
}

impl RadialState {
    pub fn new(grid: &RadialGrid, degrees: &[u32], lambda: f64, phi: Vec<Vec<f64>>) -> Result<Self> {
        if phi.len() != degrees.len() || phi.iter().any(|p| p.len() != grid.n) {
            return Err(Error::SpecInvalid("potential shape does not match the grid".into()));
        }
        let degrees: Vec<f64> = degrees.iter().map(|&d| d as f64).collect();
        let mut ma = Vec::with_capacity(phi.len());
        for (i, p) in phi.iter().enumerate() {
            let m: Vec<f64> = grid.flux_divergence(p, None).iter().map(|x| 1.0 + x / degrees[i]).collect();
            if let Some(j) = m.iter().position(|x| !(*x > 0.0)) {
                return Err(Error::DegenerateMetric(format!("factor {i}: MA density {} at u = {}", m[j], grid.nodes[j])));
            }
            ma.push(m);
        }
        let expo: Vec<f64> = (0..grid.n).map(|j| -lambda * phi.iter().map(|p| p[j]).sum::<f64>()).collect();
        let top = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::NormalizationFailure);
        }
        let raw: Vec<f64> = expo.iter().map(|e| (e - top).exp()).collect();
        let mass: f64 = raw.iter().sum::<f64>() * grid.h;
        let mu: Vec<f64> = raw.iter().map(|r| r / mass).collect();
        let rho = ma.iter().map(|m| mu.iter().zip(m).map(|(a, b)| (a / b).ln()).collect()).collect();
        Ok(RadialState {
            grid: grid.clone(),
            degrees,
            lambda,
            phi,
            ma,
            mu,
            rho,
            l_coupled: -lambda * (top + mass.ln()),
        })
    }

    pub fn cke(grid: &RadialGrid, degrees: &[u32]) -> Result<Self> {
        Self::new(grid, degrees, 1.0, vec![vec![0.0; grid.n]; degrees.len()])
    }

    pub fn n_factors(&self) -> usize {
        self.phi.len()
    }

    /// Discrete `AM = ½ Σ h φ (m + 1)`, whose gradient is exactly `h·m`.
    pub fn aubin_mabuchi(&self, i: usize) -> f64 {
        0.5 * self.phi[i].iter().zip(&self.ma[i]).map(|(p, m)| p * (m + 1.0)).sum::<f64>() * self.grid.h
    }

    pub fn ding(&self) -> f64 {
        -(0..self.n_factors()).map(|i| self.aubin_mabuchi(i)).sum::<f64>() + self.l_coupled
    }

    /// `max_i |∫ e^{ρ_i} MA(φ_i) - 1|`.
    pub fn mass_error(&self) -> f64 {
        self.rho
            .iter()
            .zip(&self.ma)
            .map(|(r, m)| (r.iter().zip(m).map(|(r, m)| r.exp() * m).sum::<f64>() * self.grid.h - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation_and_nodes() {
        assert!(RadialGrid::new(64).is_err());
        let g = RadialGrid::new(128).unwrap();
        assert!((g.nodes[0] - 0.5 / 128.0).abs() < 1e-16);
        assert!((g.nodes.iter().sum::<f64>() * g.h - 0.5).abs() < 1e-14);
    }

    #[test]
    fn interpolation_is_exact_on_cubics() {
        let g = RadialGrid::new(128).unwrap();
        let f = |u: f64| 1.0 - 2.0 * u + 3.0 * u * u - 0.7 * u * u * u;
        let v = g.sample(f);
        for u in [0.0, 0.001, 0.3, 0.5, 0.77, 0.999, 1.0] {
            assert!((g.interpolate(&v, u) - f(u)).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_laplacian_of_legendre_modes() {
        // (Q P_l')' = -l(l+1) P_l; exact for l = 1, second order otherwise.
        let g = RadialGrid::new(256).unwrap();
        let v = g.sample(|u| shifted_legendre(1, u));
        let lv = g.flux_divergence(&v, None);
        for (a, b) in lv.iter().zip(&v) {
            assert!((a + 2.0 * b).abs() < 1e-10);
        }
        let v = g.sample(|u| shifted_legendre(3, u));
        let lv = g.flux_divergence(&v, None);
        let err = lv.iter().zip(&v).map(|(a, b)| (a + 12.0 * b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-2, "{err}");
    }

    #[test]
    fn cke_state_is_trivial() {
        let g = RadialGrid::new(128).unwrap();
        let s = RadialState::cke(&g, &[1, 1]).unwrap();
        assert!(s.rho.iter().flatten().all(|r| r.abs() < 1e-14));
        assert!(s.ding().abs() < 1e-14);
        assert!(s.mass_error() < 1e-14);
    }

    #[test]
    fn measure_variation_formula() {
        // δμ = μ(-λΣδφ + λΣ∫δφ μ).
        let g = RadialGrid::new(256).unwrap();
        let phi = vec![g.sample(|u| 0.2 * u * u), g.sample(|u| 0.1 * (3.0 * u).sin())];
        let dphi = vec![g.sample(|u| u.cos()), g.sample(|u| u * u * u)];
        let base = RadialState::new(&g, &[1, 1], 1.0, phi.clone()).unwrap();
        let eps = 1e-6;
        let moved: Vec<Vec<f64>> = phi.iter().zip(&dphi).map(|(p, d)| p.iter().zip(d).map(|(a, b)| a + eps * b).collect()).collect();
        let next = RadialState::new(&g, &[1, 1], 1.0, moved).unwrap();
        let sum: Vec<f64> = (0..g.n).map(|j| dphi[0][j] + dphi[1][j]).collect();
        let mean = g.integrate2(&sum, &base.mu);
        for j in 0..g.n {
            let fd = (next.mu[j] - base.mu[j]) / eps;
            let exact = base.mu[j] * (-sum[j] + mean);
            assert!((fd - exact).abs() < 1e-6);
        }
        for i in 0..2 {
            for j in 0..g.n {
                assert!((base.rho[i][j].exp() * base.ma[i][j] - base.mu[j]).abs() < 1e-12);
            }
        }
        assert!(base.mass_error() < 1e-12);
    }

    #[test]
    fn discrete_am_gradient_and_shift() {
        let g = RadialGrid::new(128).unwrap();
        let phi = g.sample(|u| 0.3 * u * u * (1.0 - u));
        let psi = g.sample(|u| (2.0 * u).sin());
        let s = RadialState::new(&g, &[1, 1], 1.0, vec![phi.clone(), phi.clone()]).unwrap();
        let t = 1e-6;
        let plus: Vec<f64> = phi.iter().zip(&psi).map(|(a, b)| a + t * b).collect();
        let sp = RadialState::new(&g, &[1, 1], 1.0, vec![plus, phi.clone()]).unwrap();
        let fd = (sp.aubin_mabuchi(0) - s.aubin_mabuchi(0)) / t;
        assert!((fd - g.integrate2(&psi, &s.ma[0])).abs() < 1e-6);
        let shifted: Vec<f64> = phi.iter().map(|x| x + 0.4).collect();
        let ss = RadialState::new(&g, &[1, 1], 1.0, vec![shifted, phi]).unwrap();
        assert!((ss.aubin_mabuchi(0) - s.aubin_mabuchi(0) - 0.4).abs() < 1e-12);
        assert!((ss.ding() - s.ding()).abs() < 1e-12);
    }
}
