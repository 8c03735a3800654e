use nalgebra::{DMatrix, SymmetricEigen};

use super::RadialState;
use crate::error::{Error, Result};

/// Discrete `𝒫` acting on stacked N-tuples `v = (v_1, …, v_N)` (factor-major),
/// together with the μ-product weights `W_j = h μ_j`.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    pub n_nodes: usize,
    pub n_factors: usize,
    pub matrix: DMatrix<f64>,
    pub weights: Vec<f64>,
}

/// `(𝒫v)_i = (e^{ρ_i} Q v_i')'/(d_i μ) + λ Σ_j v_j - λ Σ_j ∫ v_j μ`.
pub fn assemble_p_operator(state: &RadialState) -> Result<DiscreteOperator> {
    let grid = &state.grid;
    let n = grid.n;
    let nf = state.n_factors();
    let lambda = state.lambda;
    let weights: Vec<f64> = state.mu.iter().map(|m| m * grid.h).collect();
    let mut a = DMatrix::<f64>::zeros(n * nf, n * nf);
    let h2 = grid.h * grid.h;
    for i in 0..nf {
        let er: Vec<f64> = state.rho[i].iter().map(|r| r.exp()).collect();
        let face = |f: isize| -> f64 {
            if f < 0 || f as usize >= n - 1 {
                0.0
            } else {
                let f = f as usize;
                0.5 * (er[f] + er[f + 1]) * grid.face_q(f as isize)
            }
        };
        for j in 0..n {
            let coef = 1.0 / (h2 * state.degrees[i] * state.mu[j]);
            let (ap, am) = (face(j as isize), face(j as isize - 1));
            let row = i * n + j;
            if j + 1 < n {
                a[(row, row + 1)] += ap * coef;
            }
            if j > 0 {
                a[(row, row - 1)] += am * coef;
            }
            a[(row, row)] -= (ap + am) * coef;
            for k in 0..nf {
                a[(row, k * n + j)] += lambda;
                for l in 0..n {
                    a[(row, k * n + l)] -= lambda * weights[l];
                }
            }
        }
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::DegenerateMetric("non-finite operator entry".into()));
    }
    Ok(DiscreteOperator { n_nodes: n, n_factors: nf, matrix: a, weights })
}

impl DiscreteOperator {
    pub fn dim(&self) -> usize {
        self.n_nodes * self.n_factors
    }

    fn weight(&self, row: usize) -> f64 {
        self.weights[row % self.n_nodes]
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let x = nalgebra::DVector::from_column_slice(v);
        (&self.matrix * x).iter().copied().collect()
    }

    /// `Σ_i ∫ v_i w_i μ`.
    pub fn inner(&self, v: &[f64], w: &[f64]) -> f64 {
        v.iter().zip(w).enumerate().map(|(r, (a, b))| self.weight(r) * a * b).sum()
    }

    pub fn norm(&self, v: &[f64]) -> f64 {
        self.inner(v, v).sqrt()
    }

    /// `max|W A - (W A)ᵀ| / max|W A|`.
    pub fn asymmetry(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for r in 0..d {
            for c in 0..d {
                let x = self.weight(r) * self.matrix[(r, c)];
                let y = self.weight(c) * self.matrix[(c, r)];
                worst = worst.max((x - y).abs());
                scale = scale.max(x.abs());
            }
        }
        worst / scale
    }

    /// `W^{1/2} A W^{-1/2}`, explicitly symmetrized.
    pub fn symmetrized(&self) -> DMatrix<f64> {
        let d = self.dim();
        let s = DMatrix::from_fn(d, d, |r, c| self.matrix[(r, c)] * (self.weight(r) / self.weight(c)).sqrt());
        (&s + s.transpose()) * 0.5
    }

    pub fn eigen(&self) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
        let s = self.symmetrized();
        let e = s.try_symmetric_eigen(1e-14, 10_000).ok_or_else(|| Error::EigenFailure("no convergence".into()))?;
        if e.eigenvalues.iter().any(|x| !x.is_finite()) {
            return Err(Error::EigenFailure("non-finite eigenvalue".into()));
        }
        Ok(e)
    }
}

/// Eigenvalues of `𝒫`, ascending.
pub fn p_spectrum(op: &DiscreteOperator) -> Result<Vec<f64>> {
    if op.asymmetry() > 1e-8 {
        return Err(Error::EigenFailure(format!("operator not self-adjoint: asymmetry {}", op.asymmetry())));
    }
    let mut ev: Vec<f64> = op.eigen()?.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}
