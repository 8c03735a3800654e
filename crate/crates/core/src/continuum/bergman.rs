//! Bergman functions of invariant potentials on ℙ¹, extraction of the
//! first expansion coefficient, and the order-one almost-balanced correction.
//!
//! `B_{[i],μ}^{(k)}(φ)(u) = e^{-kφ_i(u)} Σ_α p^α / T_{αα}` with
//! `T = Hilb_{[i],μ(φ)}(φ_i)` computed by Gauss-Legendre quadrature and
//! `p = (1-u, u)`. On ℙ¹, `b_0 = d_i`.

use serde::{Deserialize, Serialize};

use super::{assemble_p_operator, solve_coupled_poisson, PoissonOptions, PoissonSolution, RadialGrid, RadialState};
use crate::coupled_solver::canonical_measure;
use crate::error::{Error, Result};
use crate::geometry::{Symmetry, Testbed, TestbedSpec};
use crate::hermitian;

/// Invariant potential as a function of `(factor, u)`.
pub type RadialPotential<'a> = &'a dyn Fn(usize, f64) -> f64;

/// `B_i(u)` for every factor at the points `eval_u`.
pub fn bergman_functions(degrees: &[u32], k: u32, phi: RadialPotential, eval_u: &[f64], gl_nodes: usize) -> Result<Vec<Vec<f64>>> {
    let spec = TestbedSpec::new(1, degrees.to_vec(), k, Symmetry::TorusInvariant)?;
    let tb = Testbed::new(spec, &[gl_nodes])?;
    let values: Vec<Vec<f64>> = (0..degrees.len())
        .map(|i| tb.grid.points.iter().map(|pt| phi(i, pt.p[1])).collect())
        .collect();
    let mu = canonical_measure(&tb, &values)?;
    let kf = k as f64;
    let mut out = Vec::with_capacity(degrees.len());
    for (i, vals) in values.iter().enumerate() {
        let t = hermitian::hilb(&tb, i, vals, &mu)?;
        let diag = t.diagonal_values().ok_or(Error::SingularGram)?;
        let exps = &tb.cache(i).basis.exponents;
        let b: Vec<f64> = eval_u
            .iter()
            .map(|&u| {
                let s: f64 = exps
                    .iter()
                    .zip(&diag)
                    .map(|(a, g)| (1.0 - u).powi(a[0] as i32) * u.powi(a[1] as i32) / g)
                    .sum();
                s * (-kf * phi(i, u)).exp()
            })
            .collect();
        out.push(b);
    }
    Ok(out)
}

/// Value at 0 of the interpolating polynomial through `(xs, ys)`.
pub fn neville(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let n = xs.len();
    for level in 1..n {
        for i in 0..n - level {
            let (xi, xj) = (xs[i], xs[i + level]);
            p[i] = (xj * p[i] - xi * p[i + 1]) / (xj - xi);
        }
    }
    p[0]
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct B1Extraction {
    pub k_list: Vec<u32>,
    /// Extrapolated `lim_k k (B/(b_0 k) - 1)` per factor at the radial nodes.
    pub fields: Vec<Vec<f64>>,
    /// Sup difference between the all-points and drop-smallest-k extrapolations.
    pub drop_diff: f64,
    pub norm: f64,
}

/// Extrapolates `k (B_i^{(k)}(ψ/k)/(b_0 k) - 1)` to `k = ∞` in `1/k`.
///
/// With `ψ = 0` this is `b_1/b_0` at the Fubini-Study point; otherwise the
/// limit also carries the linearized term `(𝒫ψ)_i`.
pub fn extract_b1(
    degrees: &[u32],
    k_list: &[u32],
    psi: Option<RadialPotential>,
    grid: &RadialGrid,
    gl_nodes: usize,
) -> Result<B1Extraction> {
    if k_list.len() < 3 {
        return Err(Error::SpecInvalid("extract_b1 needs at least 3 values of k".into()));
    }
    let mut ks = k_list.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.len() != k_list.len() || ks[0] == 0 {
        return Err(Error::SpecInvalid("k values must be distinct and positive".into()));
    }
    let zero = |_: usize, _: f64| 0.0;
    let psi: RadialPotential = psi.unwrap_or(&zero);
    let mut samples: Vec<Vec<Vec<f64>>> = Vec::new();
    for &k in &ks {
        let kf = k as f64;
        let phi = |i: usize, u: f64| psi(i, u) / kf;
        let b = bergman_functions(degrees, k, &phi, &grid.nodes, gl_nodes)?;
        samples.push(
            b.iter()
                .enumerate()
                .map(|(i, bi)| bi.iter().map(|x| kf * (x / (degrees[i] as f64 * kf) - 1.0)).collect())
                .collect(),
        );
    }
    let xs: Vec<f64> = ks.iter().map(|k| 1.0 / *k as f64).collect();
    let mut fields = Vec::new();
    let mut drop_diff: f64 = 0.0;
    let mut norm: f64 = 0.0;
    for i in 0..degrees.len() {
        let mut f = Vec::with_capacity(grid.n);
        for j in 0..grid.n {
            let ys: Vec<f64> = samples.iter().map(|s| s[i][j]).collect();
            let all = neville(&xs, &ys);
            let dropped = neville(&xs[1..], &ys[1..]);
            drop_diff = drop_diff.max((all - dropped).abs());
            norm = norm.max(all.abs());
            f.push(all);
        }
        fields.push(f);
    }
    if drop_diff > 0.1 * norm {
        return Err(Error::FitFailure { residual: drop_diff, norm });
    }
    Ok(B1Extraction { k_list: ks, fields, drop_diff, norm })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BergmanRow {
    pub k: u32,
    pub factor: usize,
    /// `sup |B/D - 1|`.
    pub sup_bar_dev: f64,
    /// `sup |B/(b_0 k) - 1|`.
    pub sup_leading_dev: f64,
    /// `sup B / k`.
    pub b_over_kn: f64,
}

impl BergmanRow {
    pub fn csv_header() -> &'static str {
        "k,factor,sup_bar_dev,sup_leading_dev,b_over_kn"
    }

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.k, self.factor + 1, self.sup_bar_dev, self.sup_leading_dev, self.b_over_kn)
    }
}

/// Bergman deviations at `ψ/k` (the Fubini-Study point for `ψ = 0`).
pub fn bergman_table(
    degrees: &[u32],
    k_list: &[u32],
    psi: Option<RadialPotential>,
    grid: &RadialGrid,
    gl_nodes: usize,
) -> Result<Vec<BergmanRow>> {
    let zero = |_: usize, _: f64| 0.0;
    let psi: RadialPotential = psi.unwrap_or(&zero);
    let mut rows = Vec::new();
    for &k in k_list {
        let kf = k as f64;
        let phi = |i: usize, u: f64| psi(i, u) / kf;
        let b = bergman_functions(degrees, k, &phi, &grid.nodes, gl_nodes)?;
        for (i, bi) in b.iter().enumerate() {
            let d = degrees[i] as f64;
            let dim = d * kf + 1.0;
            rows.push(BergmanRow {
                k,
                factor: i,
                sup_bar_dev: bi.iter().map(|x| (x / dim - 1.0).abs()).fold(0.0, f64::max),
                sup_leading_dev: bi.iter().map(|x| (x / (d * kf) - 1.0).abs()).fold(0.0, f64::max),
                b_over_kn: bi.iter().copied().fold(0.0, f64::max) / kf,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlmostRow {
    pub k: u32,
    pub factor: usize,
    /// `sup |B̄(ψ/k) - 1|`.
    pub base_dev: f64,
    /// `sup |B̄((ψ + η)/k) - 1|`.
    pub corrected_dev: f64,
}

impl AlmostRow {
    pub fn csv_header() -> &'static str {
        "k,factor,base_dev,corrected_dev"
    }

    pub fn csv_line(&self) -> String {
        format!("{},{},{},{}", self.k, self.factor + 1, self.base_dev, self.corrected_dev)
    }
}

/// Output of the order-one almost-balanced pipeline.
#[derive(Clone, Debug)]
pub struct AlmostBalanced {
    pub rows: Vec<AlmostRow>,
    pub extraction: B1Extraction,
    pub poisson: PoissonSolution,
}

/// Order-one correction around the base `φ_0 = ψ/k`:
/// `F = extract_b1(ψ)`, `𝒫η = c - F` at the Fubini-Study point, and
/// `φ_1 = (ψ + η)/k`. Both `B̄(φ_0)` and `B̄(φ_1)` are evaluated over `k_eval`.
#[allow(clippy::too_many_arguments)]
pub fn almost_balanced(
    degrees: &[u32],
    k_extract: &[u32],
    k_eval: &[u32],
    psi: Option<RadialPotential>,
    grid: &RadialGrid,
    gl_nodes: usize,
    poisson: &PoissonOptions,
) -> Result<AlmostBalanced> {
    let zero = |_: usize, _: f64| 0.0;
    let psi: RadialPotential = psi.unwrap_or(&zero);
    let extraction = extract_b1(degrees, k_extract, Some(psi), grid, gl_nodes)?;
    let op = assemble_p_operator(&RadialState::cke(grid, degrees)?)?;
    let sol = solve_coupled_poisson(&op, &extraction.fields, poisson)?;
    let eta = |i: usize, u: f64| grid.interpolate(&sol.eta[i], u);
    let mut rows = Vec::new();
    for &k in k_eval {
        let kf = k as f64;
        let base = |i: usize, u: f64| psi(i, u) / kf;
        let corrected = |i: usize, u: f64| (psi(i, u) + eta(i, u)) / kf;
        let b0 = bergman_functions(degrees, k, &base, &grid.nodes, gl_nodes)?;
        let b1 = bergman_functions(degrees, k, &corrected, &grid.nodes, gl_nodes)?;
        for i in 0..degrees.len() {
            let dim = degrees[i] as f64 * kf + 1.0;
            let dev = |b: &[f64]| b.iter().map(|x| (x / dim - 1.0).abs()).fold(0.0, f64::max);
            rows.push(AlmostRow { k, factor: i, base_dev: dev(&b0[i]), corrected_dev: dev(&b1[i]) });
        }
    }
    Ok(AlmostBalanced { rows, extraction, poisson: sol })
}

#[cfg(test)]
mod tests {
    use super::super::shifted_legendre;
    use super::*;

    #[test]
    fn neville_and_slope() {
        let xs = [0.5, 0.25, 0.125];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 + 2.0 * x - x * x).collect();
        assert!((neville(&xs, &ys) - 3.0).abs() < 1e-13);
        let ks = [4.0, 8.0, 16.0];
        let dev: Vec<f64> = ks.iter().map(|k: &f64| 5.0 * k.powf(-1.5)).collect();
        assert!((loglog_slope(&ks, &dev) + 1.5).abs() < 1e-12);
    }

    #[test]
    fn fubini_study_bergman_is_exact() {
        // B = D = dk + 1 at the Fubini-Study point.
        let g = RadialGrid::new(128).unwrap();
        let zero = |_: usize, _: f64| 0.0;
        for k in [2, 8, 32] {
            let b = bergman_functions(&[1, 1], k, &zero, &g.nodes, 96).unwrap();
            for x in b.iter().flatten() {
                assert!((x / (k as f64 + 1.0) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn b1_at_fubini_study_is_constant() {
        let g = RadialGrid::new(128).unwrap();
        let e = extract_b1(&[1, 1], &[8, 16, 32], None, &g, 96).unwrap();
        for f in &e.fields {
            let (lo, hi) = f.iter().fold((f64::MAX, f64::MIN), |(a, b), x| (a.min(*x), b.max(*x)));
            assert!((hi - lo) / hi.abs() < 1e-3);
            assert!((hi - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn almost_balanced_gains_an_order() {
        // The (P_1, P_1) component lies in the kernel of 𝒫 and keeps the
        // second-order term from vanishing identically.
        let g = RadialGrid::new(256).unwrap();
        let psi = |i: usize, u: f64| {
            0.6 * shifted_legendre(1, u) + if i == 0 { 0.5 * shifted_legendre(2, u) } else { 0.3 * shifted_legendre(3, u) }
        };
        let out = almost_balanced(&[1, 1], &[16, 32, 64], &[8, 16, 32], Some(&psi), &g, 160, &PoissonOptions::almost())
            .unwrap();
        let ks = [8.0, 16.0, 32.0];
        for i in 0..2 {
            let base: Vec<f64> = out.rows.iter().filter(|r| r.factor == i).map(|r| r.base_dev).collect();
            let corr: Vec<f64> = out.rows.iter().filter(|r| r.factor == i).map(|r| r.corrected_dev).collect();
            let sb = loglog_slope(&ks, &base);
            let sc = loglog_slope(&ks, &corr);
            assert!(sb > -1.3 && sb < -0.5, "base slope {sb}");
            assert!((sc + 2.0).abs() < 0.3, "corrected slope {sc} {corr:?}");
            assert!(corr.iter().zip(&base).all(|(c, b)| c < &(0.05 * b)));
        }
    }
}
