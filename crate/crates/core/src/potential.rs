//! Kähler potentials on the grid together with the derivatives needed for
//! Monge-Ampère densities and Hamiltonians.
//!
//! Derivatives are taken in logarithmic torus coordinates
//! `x_j = log(|z_j|²/|z_0|²)`. In these coordinates the reference potential
//! `d·log(1 + Σe^{x_j})` has gradient `d·p` and Hessian `d·(diag p - p pᵀ)`,
//! and for invariant data `ω_φ^n/ω̂^n = det(dQ + Hess φ)/det(dQ)`.
//!
//! In general mode on ℙ¹ the "Hessian" slot stores `|z|² ∂_z∂_z̄ φ` and the
//! gradient slot `Re(z ∂_z φ)`, which reduce to the same quantities on
//! invariant functions.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::Testbed;
use crate::hermitian::GramForm;

/// Step in log coordinates for finite differences of closures.
const FD_STEP: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialField {
    pub values: Vec<f64>,
    /// Log-coordinate gradient; only the first `n` slots are used.
    pub grad: Vec<[f64; 2]>,
    /// Log-coordinate Hessian `(xx, xy, yy)`; on ℙ¹ only `xx` is used.
    pub hess: Vec<[f64; 3]>,
}

impl PotentialField {
    pub fn zero(tb: &Testbed) -> Self {
        let m = tb.grid.len();
        PotentialField { values: vec![0.0; m], grad: vec![[0.0; 2]; m], hess: vec![[0.0; 3]; m] }
    }

    /// `FS^{(k)}(G)` with analytic derivatives.
    pub fn from_gram(tb: &Testbed, i: usize, g: &GramForm) -> Result<Self> {
        let grid = &tb.grid;
        let cache = tb.cache(i);
        let k = tb.k();
        let d = tb.degree(i);
        let dim = cache.dim() as f64;
        let f = g.factor()?;
        let m = grid.len();
        let mut out = PotentialField { values: vec![0.0; m], grad: vec![[0.0; 2]; m], hess: vec![[0.0; 3]; m] };
        if grid.is_general() {
            let exps: Vec<f64> = cache.basis.exponents.iter().map(|a| a[1] as f64).collect();
            for q in 0..m {
                let v = cache.values_row(q).expect("general grid");
                let dv: Vec<Complex64> = v.iter().zip(&exps).map(|(v, a)| v * *a).collect();
                let s = f.solve(v);
                let ds = f.solve(&dv);
                let s0 = s.norm_squared();
                let s1 = ds.dotc(&s);
                let s2 = ds.norm_squared();
                let p = &grid.points[q].p;
                out.values[q] = (s0 / dim).ln() / k;
                out.grad[q][0] = s1.conj().re / s0 / k - d * p[1];
                out.hess[q][0] = (s2 * s0 - s1.norm_sqr()) / (s0 * s0) / k - d * p[0] * p[1];
            }
        } else {
            let inv: Vec<f64> = g.diagonal_values().ok_or_else(|| {
                Error::SymmetryMismatch("dense Gram matrix on a torus-reduced grid".into())
            })?;
            let inv: Vec<f64> = inv.iter().map(|x| 1.0 / x).collect();
            let n = tb.spec.n;
            for q in 0..m {
                let row = cache.row(q);
                let mut b = 0.0;
                let mut e = [0.0; 2];
                let mut c = [0.0; 3];
                for (j, a) in cache.basis.exponents.iter().enumerate() {
                    let w = row[j] * inv[j];
                    let (a1, a2) = (a[1] as f64, if n == 2 { a[2] as f64 } else { 0.0 });
                    b += w;
                    e[0] += w * a1;
                    e[1] += w * a2;
                    c[0] += w * a1 * a1;
                    c[1] += w * a1 * a2;
                    c[2] += w * a2 * a2;
                }
                let (e0, e1) = (e[0] / b, e[1] / b);
                let cov = [c[0] / b - e0 * e0, c[1] / b - e0 * e1, c[2] / b - e1 * e1];
                let p = &grid.points[q].p;
                let rq = reference_hessian(p, d);
                out.values[q] = (b / dim).ln() / k;
                out.grad[q][0] = e0 / k - d * p[1];
                out.hess[q][0] = cov[0] / k - rq[0];
                if n == 2 {
                    out.grad[q][1] = e1 / k - d * p[2];
                    out.hess[q][1] = cov[1] / k - rq[1];
                    out.hess[q][2] = cov[2] / k - rq[2];
                }
            }
        }
        Ok(out)
    }

    /// Invariant potential given as a function of the moment coordinates
    /// `p = (p_0, …, p_n)`. Derivatives by fourth-order finite differences in
    /// log coordinates.
    pub fn from_fn(tb: &Testbed, f: impl Fn(&[f64]) -> f64) -> Self {
        let n = tb.spec.n;
        let m = tb.grid.len();
        let mut out = PotentialField { values: vec![0.0; m], grad: vec![[0.0; 2]; m], hess: vec![[0.0; 3]; m] };
        let h = FD_STEP;
        for q in 0..m {
            let p = &tb.grid.points[q].p;
            let x: Vec<f64> = (1..=n).map(|j| (p[j] / p[0]).ln()).collect();
            let eval = |dx: &[f64]| {
                let xs: Vec<f64> = x.iter().zip(dx).map(|(x, d)| x + d).collect();
                f(&moment_from_log(&xs))
            };
            let f0 = f(p);
            out.values[q] = f0;
            for j in 0..n {
                let mut s = vec![0.0; n];
                let mut at = |t: f64| {
                    s.iter_mut().for_each(|v| *v = 0.0);
                    s[j] = t;
                    eval(&s)
                };
                let (fp1, fm1, fp2, fm2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
                out.grad[q][j] = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h);
                let d2 = (-fp2 + 16.0 * fp1 - 30.0 * f0 + 16.0 * fm1 - fm2) / (12.0 * h * h);
                out.hess[q][if j == 0 { 0 } else { 2 }] = d2;
            }
            if n == 2 {
                let mixed = |h: f64| {
                    (eval(&[h, h]) - eval(&[h, -h]) - eval(&[-h, h]) + eval(&[-h, -h])) / (4.0 * h * h)
                };
                out.hess[q][1] = (4.0 * mixed(h / 2.0) - mixed(h)) / 3.0;
            }
        }
        out
    }

    /// `φ + c`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v += c);
        out
    }

    /// `s·φ`.
    pub fn scaled(&self, s: f64) -> Self {
        PotentialField {
            values: self.values.iter().map(|v| v * s).collect(),
            grad: self.grad.iter().map(|g| [g[0] * s, g[1] * s]).collect(),
            hess: self.hess.iter().map(|h| [h[0] * s, h[1] * s, h[2] * s]).collect(),
        }
    }

    /// Mixed Monge-Ampère ratios `ω_φ^j ∧ ω̂^{n-j} / ω̂^n` for `j = 0..=n`,
    /// indexed `[j][node]`. Fails if `ω_φ` is not positive at some node.
    pub fn ma_ratios(&self, tb: &Testbed, i: usize) -> Result<Vec<Vec<f64>>> {
        let n = tb.spec.n;
        let d = tb.degree(i);
        let m = tb.grid.len();
        let mut out = vec![vec![1.0; m]; n + 1];
        for q in 0..m {
            let p = &tb.grid.points[q].p;
            let k = self.hess[q];
            if n == 1 {
                let qd = d * p[0] * p[1];
                let r = 1.0 + k[0] / qd;
                if !(r > 0.0) {
                    return Err(Error::DegenerateMetric(format!("MA ratio {r} at node {q}")));
                }
                out[1][q] = r;
            } else {
                let b = reference_hessian(p, d);
                let det_b = b[0] * b[2] - b[1] * b[1];
                let mixed = 0.5 * (k[0] * b[2] + k[2] * b[0] - 2.0 * k[1] * b[1]);
                let s = [b[0] + k[0], b[1] + k[1], b[2] + k[2]];
                let det_s = s[0] * s[2] - s[1] * s[1];
                if !(det_s > 0.0 && s[0] + s[2] > 0.0) {
                    return Err(Error::DegenerateMetric(format!("metric not positive at node {q}")));
                }
                out[1][q] = 1.0 + mixed / det_b;
                out[2][q] = det_s / det_b;
            }
        }
        Ok(out)
    }

    /// Probability density of `MA(φ)` with respect to θ₀ⁿ.
    pub fn ma_density(&self, tb: &Testbed, i: usize) -> Result<Vec<f64>> {
        Ok(self.ma_ratios(tb, i)?.pop().expect("n >= 1"))
    }
}

/// `d·(diag p' - p' p'ᵀ)` as `(xx, xy, yy)`, with `p' = (p_1, …, p_n)`.
pub fn reference_hessian(p: &[f64], d: f64) -> [f64; 3] {
    if p.len() == 2 {
        [d * p[0] * p[1], 0.0, 0.0]
    } else {
        [d * p[1] * (1.0 - p[1]), -d * p[1] * p[2], d * p[2] * (1.0 - p[2])]
    }
}

/// Moment coordinates from log coordinates.
pub fn moment_from_log(x: &[f64]) -> Vec<f64> {
    // Stable softmax over (0, x_1, …, x_n).
    let top = x.iter().copied().fold(0.0, f64::max);
    let mut e: Vec<f64> = std::iter::once(-top).chain(x.iter().map(|x| x - top)).map(f64::exp).collect();
    let s: f64 = e.iter().sum();
    e.iter_mut().for_each(|v| *v /= s);
    e
}
