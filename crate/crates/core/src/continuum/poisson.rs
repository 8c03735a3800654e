use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::DiscreteOperator;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoissonOptions {
    /// Eigenvalues with `|λ|` below this span the numerical kernel.
    pub kernel_eig: f64,
    /// Largest admissible kernel component of `c - F`, relative to the larger
    /// of the μ-norms of `c - F` and `F`.
    pub kernel_component: f64,
}

impl Default for PoissonOptions {
    fn default() -> Self {
        PoissonOptions { kernel_eig: 1e-6, kernel_component: 1e-6 }
    }
}

impl PoissonOptions {
    /// Tolerances for right-hand sides obtained by extrapolation, whose
    /// kernel component is dominated by extraction noise (about 1e-4).
    pub fn almost() -> Self {
        PoissonOptions { kernel_component: 1e-3, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoissonSolution {
    /// Per-factor solution, orthogonal to the numerical kernel.
    pub eta: Vec<Vec<f64>>,
    /// `c_i = ∫ F_i μ`.
    pub constants: Vec<f64>,
    /// Relative kernel component of the right-hand side that was dropped.
    pub kernel_component: f64,
    /// `‖𝒫η - (c - F)_⊥‖_μ`.
    pub residual: f64,
}

/// Solves `𝒫η = c - F` with `c_i = ∫F_i μ`, in the least-squares sense on
/// the orthogonal complement of the kernel.
pub fn solve_coupled_poisson(op: &DiscreteOperator, rhs: &[Vec<f64>], opts: &PoissonOptions) -> Result<PoissonSolution> {
    let n = op.n_nodes;
    if rhs.len() != op.n_factors || rhs.iter().any(|f| f.len() != n) {
        return Err(Error::SpecInvalid("right-hand side shape does not match the operator".into()));
    }
    if rhs.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::SpecInvalid("right-hand side is not finite".into()));
    }
    let constants: Vec<f64> = rhs
        .iter()
        .map(|f| f.iter().zip(&op.weights).map(|(a, w)| a * w).sum())
        .collect();
    let b: Vec<f64> = rhs
        .iter()
        .zip(&constants)
        .flat_map(|(f, c)| f.iter().map(move |x| c - x))
        .collect();
    let sqrt_w: Vec<f64> = (0..op.dim()).map(|r| op.weights[r % n].sqrt()).collect();
    let eig = op.eigen()?;
    let bt = DVector::from_iterator(op.dim(), b.iter().zip(&sqrt_w).map(|(x, s)| x * s));
    let total = bt.norm();
    let mut y = DVector::zeros(op.dim());
    let mut kernel_sq = 0.0;
    for (idx, lam) in eig.eigenvalues.iter().enumerate() {
        let q = eig.eigenvectors.column(idx);
        let coef = q.dot(&bt);
        if lam.abs() < opts.kernel_eig {
            kernel_sq += coef * coef;
        } else {
            y += q * (coef / lam);
        }
    }
    let data = rhs.iter().flatten().zip((0..op.dim()).map(|r| op.weights[r % n])).map(|(f, w)| w * f * f).sum::<f64>().sqrt();
    let scale = total.max(data);
    let kernel_component = if scale > 0.0 { kernel_sq.sqrt() / scale } else { 0.0 };
    if kernel_component > opts.kernel_component {
        return Err(Error::IllPosed { component: kernel_component });
    }
    let x: Vec<f64> = y.iter().zip(&sqrt_w).map(|(a, s)| a / s).collect();
    // Residual against the kernel-free part of the right-hand side.
    let px = op.apply(&x);
    let mut proj = bt.clone();
    for (idx, lam) in eig.eigenvalues.iter().enumerate() {
        if lam.abs() < opts.kernel_eig {
            let q = eig.eigenvectors.column(idx);
            proj -= q * q.dot(&bt);
        }
    }
    let diff: Vec<f64> = px.iter().zip(proj.iter().zip(&sqrt_w)).map(|(p, (r, s))| p - r / s).collect();
    let residual = op.norm(&diff);
    Ok(PoissonSolution { eta: x.chunks(n).map(|c| c.to_vec()).collect(), constants, kernel_component, residual })
}
