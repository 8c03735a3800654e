//! Projective testbeds, monomial section bases and quadrature over X.
//!
//! Points of ℙⁿ are described by moment coordinates `p = (p_0, …, p_n)` with
//! `p_j = |z_j|² / Σ|z_l|²` (so `p_0 = 1/(1+|z|²)` in the affine chart
//! `z_0 = 1`). The normalized Fubini-Study volume pushes forward to the
//! uniform measure on the simplex, which is what θ₀ⁿ is here, and the squared
//! pointwise norm of a monomial section under the reference fiber metric is
//! simply `p^α`.

use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hermitian::{self, GramForm};
use crate::quadrature::gauss_legendre_unit;

/// Largest homogeneous degree `d·k` accepted on ℙ¹ and on ℙ².
pub const MAX_DEGREE_P1: u32 = 256;
pub const MAX_DEGREE_P2: u32 = 40;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    #[default]
    TorusInvariant,
    General,
}

fn default_lambda() -> i32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestbedSpec {
    pub n: usize,
    pub degrees: Vec<u32>,
    pub k: u32,
    #[serde(default = "default_lambda")]
    pub lambda: i32,
    #[serde(default)]
    pub symmetry: Symmetry,
}

impl TestbedSpec {
    pub fn new(n: usize, degrees: Vec<u32>, k: u32, symmetry: Symmetry) -> Result<Self> {
        let spec = TestbedSpec { n, degrees, k, lambda: 1, symmetry };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n) {
            return Err(Error::SpecInvalid(format!("n = {} (only 1 or 2)", self.n)));
        }
        if self.degrees.is_empty() {
            return Err(Error::SpecInvalid("no polarizations".into()));
        }
        if self.degrees.contains(&0) {
            return Err(Error::SpecInvalid("degrees must be positive".into()));
        }
        let total: u64 = self.degrees.iter().map(|&d| d as u64).sum();
        if total != self.n as u64 + 1 {
            return Err(Error::SpecInvalid(format!(
                "sum of degrees is {total}, must equal n+1 = {}",
                self.n + 1
            )));
        }
        if self.k == 0 {
            return Err(Error::SpecInvalid("k must be at least 1".into()));
        }
        if self.lambda != 1 {
            return Err(Error::SpecInvalid(format!(
                "lambda = {} (only +1 testbeds exist on P^n)",
                self.lambda
            )));
        }
        let cap = if self.n == 1 { MAX_DEGREE_P1 } else { MAX_DEGREE_P2 };
        for &d in &self.degrees {
            if d.checked_mul(self.k).is_none_or(|dk| dk > cap) {
                return Err(Error::SpecInvalid(format!("degree d*k exceeds {cap}")));
            }
        }
        if self.symmetry == Symmetry::General && self.n != 1 {
            return Err(Error::UnsupportedSymmetry);
        }
        Ok(())
    }

    pub fn n_factors(&self) -> usize {
        self.degrees.len()
    }

    /// The same testbed at a different level.
    pub fn with_k(&self, k: u32) -> Result<Self> {
        let s = TestbedSpec { k, ..self.clone() };
        s.validate()?;
        Ok(s)
    }

    /// `D_i^{(k)} = binom(d_i k + n, n)`.
    pub fn dim(&self, i: usize) -> usize {
        let m = (self.degrees[i] * self.k) as usize;
        match self.n {
            1 => m + 1,
            _ => (m + 1) * (m + 2) / 2,
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda as f64
    }
}

/// Monomial basis of `H⁰(ℙⁿ, O(m))`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionBasis {
    pub n: usize,
    pub degree: u32,
    /// Exponent vectors `(α_0, …, α_n)`, descending lexicographic order.
    pub exponents: Vec<Vec<u32>>,
}

impl SectionBasis {
    pub fn new(n: usize, degree: u32) -> Self {
        let mut exponents = Vec::new();
        let mut cur = vec![0u32; n + 1];
        fill_exponents(&mut cur, 0, degree, &mut exponents);
        SectionBasis { n, degree, exponents }
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    pub fn tag(&self) -> String {
        format!("P{}-deg{}", self.n, self.degree)
    }

    /// Mean exponent vector, which is `degree/(n+1)` in every slot.
    pub fn mean_exponent(&self) -> f64 {
        self.degree as f64 / (self.n as f64 + 1.0)
    }
}

fn fill_exponents(cur: &mut Vec<u32>, slot: usize, left: u32, out: &mut Vec<Vec<u32>>) {
    if slot + 1 == cur.len() {
        cur[slot] = left;
        out.push(cur.clone());
        return;
    }
    for a in (0..=left).rev() {
        cur[slot] = a;
        fill_exponents(cur, slot + 1, left - a, out);
    }
}

pub fn build_basis(spec: &TestbedSpec, i: usize) -> SectionBasis {
    SectionBasis::new(spec.n, spec.degrees[i] * spec.k)
}

/// A quadrature node.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    /// Moment coordinates `p_0, …, p_n` (positive, summing to one).
    pub p: Vec<f64>,
    /// Argument of `z_1` (general mode only).
    pub angle: Option<f64>,
}

impl GridPoint {
    /// `t = |z_1|²` on ℙ¹.
    pub fn t(&self) -> f64 {
        self.p[1] / self.p[0]
    }

    /// Affine coordinate `z_1` on ℙ¹ (general mode).
    pub fn z(&self) -> Complex64 {
        Complex64::from_polar(self.t().sqrt(), self.angle.unwrap_or(0.0))
    }
}

/// Per-polarization node caches.
#[derive(Clone, Debug)]
pub struct PolarizationCache {
    pub basis: SectionBasis,
    pub degree: u32,
    /// Node-major `|z^α|²·(1+|z|²)^{-dk} = p^α`, shape nodes × dim.
    pub fiber_sq: Vec<f64>,
    /// Node-major `z^α·(1+|z|²)^{-dk/2}` (general mode only).
    pub values: Option<Vec<Complex64>>,
}

impl PolarizationCache {
    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn row(&self, node: usize) -> &[f64] {
        let d = self.dim();
        &self.fiber_sq[node * d..(node + 1) * d]
    }

    pub fn values_row(&self, node: usize) -> Option<&[Complex64]> {
        let d = self.dim();
        self.values.as_ref().map(|v| &v[node * d..(node + 1) * d])
    }
}

#[derive(Clone, Debug)]
pub struct QuadratureGrid {
    pub n: usize,
    pub symmetry: Symmetry,
    pub resolution: Vec<usize>,
    pub points: Vec<GridPoint>,
    /// Quadrature weights for the coordinate measure.
    pub weights: Vec<f64>,
    /// θ₀ⁿ density with respect to the coordinate measure.
    pub density: Vec<f64>,
    /// `weights · density`: θ₀ⁿ mass carried by each node.
    pub mass: Vec<f64>,
    pub polarizations: Vec<PolarizationCache>,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `∫_X f θ₀ⁿ`.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.mass.iter().zip(f).map(|(m, f)| m * f).sum()
    }

    /// `∫_X f g θ₀ⁿ`.
    pub fn integrate2(&self, f: &[f64], g: &[f64]) -> f64 {
        self.mass.iter().zip(f).zip(g).map(|((m, f), g)| m * f * g).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// True when nodes carry an angle (non-invariant integrands allowed).
    pub fn is_general(&self) -> bool {
        self.symmetry == Symmetry::General
    }
}

/// Builds the quadrature grid. `resolution` is `[n_u]` on ℙ¹ in torus mode,
/// `[n_u, n_theta]` in general mode, and `[n_s, n_r]` on ℙ².
pub fn build_grid(spec: &TestbedSpec, resolution: &[usize]) -> Result<QuadratureGrid> {
    spec.validate()?;
    let expected = match (spec.n, spec.symmetry) {
        (1, Symmetry::TorusInvariant) => 1,
        (1, Symmetry::General) => 2,
        (2, Symmetry::TorusInvariant) => 2,
        _ => return Err(Error::UnsupportedSymmetry),
    };
    if resolution.len() != expected {
        return Err(Error::SpecInvalid(format!(
            "resolution needs {expected} node counts, got {}",
            resolution.len()
        )));
    }
    if resolution.iter().any(|&r| !(8..=4096).contains(&r)) {
        return Err(Error::SpecInvalid("resolution must be between 8 and 4096 per axis".into()));
    }
    if spec.symmetry == Symmetry::General {
        // The trapezoid rule in θ must resolve every e^{i(a-b)θ} of a Gram entry.
        let top = spec.degrees.iter().max().copied().unwrap_or(1) * spec.k;
        if resolution[1] as u32 <= top {
            return Err(Error::SpecInvalid(format!(
                "angular resolution must exceed the largest degree {top}"
            )));
        }
    }
    let (points, weights, density) = match (spec.n, spec.symmetry) {
        (1, Symmetry::TorusInvariant) => {
            let (u, w) = gauss_legendre_unit(resolution[0]);
            let pts = u.iter().map(|&u| GridPoint { p: vec![1.0 - u, u], angle: None }).collect();
            let dens = vec![1.0; u.len()];
            (pts, w, dens)
        }
        (1, Symmetry::General) => {
            let (u, wu) = gauss_legendre_unit(resolution[0]);
            let m = resolution[1];
            let dtheta = 2.0 * std::f64::consts::PI / m as f64;
            let mut pts = Vec::with_capacity(u.len() * m);
            let mut w = Vec::with_capacity(u.len() * m);
            for (&u, &wu) in u.iter().zip(&wu) {
                for r in 0..m {
                    pts.push(GridPoint { p: vec![1.0 - u, u], angle: Some(r as f64 * dtheta) });
                    w.push(wu * dtheta);
                }
            }
            let dens = vec![1.0 / (2.0 * std::f64::consts::PI); pts.len()];
            (pts, w, dens)
        }
        _ => {
            // Collapsed coordinates on the simplex: p1 = s, p2 = (1-s) r.
            let (s, ws) = gauss_legendre_unit(resolution[0]);
            let (r, wr) = gauss_legendre_unit(resolution[1]);
            let mut pts = Vec::with_capacity(s.len() * r.len());
            let mut w = Vec::with_capacity(s.len() * r.len());
            for (&s, &ws) in s.iter().zip(&ws) {
                for (&r, &wr) in r.iter().zip(&wr) {
                    let p1 = s;
                    let p2 = (1.0 - s) * r;
                    let p0 = (1.0 - s) * (1.0 - r);
                    pts.push(GridPoint { p: vec![p0, p1, p2], angle: None });
                    w.push(ws * wr * (1.0 - s));
                }
            }
            let dens = vec![2.0; pts.len()];
            (pts, w, dens)
        }
    };
    let mass: Vec<f64> = weights.iter().zip(&density).map(|(w, d)| w * d).collect();
    let polarizations = (0..spec.n_factors())
        .map(|i| fill_cache(spec, i, &points))
        .collect();
    Ok(QuadratureGrid {
        n: spec.n,
        symmetry: spec.symmetry,
        resolution: resolution.to_vec(),
        points,
        weights,
        density,
        mass,
        polarizations,
    })
}

fn fill_cache(spec: &TestbedSpec, i: usize, points: &[GridPoint]) -> PolarizationCache {
    let basis = build_basis(spec, i);
    let dim = basis.dim();
    let mut fiber_sq = Vec::with_capacity(points.len() * dim);
    for pt in points {
        for a in &basis.exponents {
            fiber_sq.push(monomial_sq(&pt.p, a));
        }
    }
    let values = (spec.symmetry == Symmetry::General).then(|| {
        let mut v = Vec::with_capacity(points.len() * dim);
        for (node, pt) in points.iter().enumerate() {
            let theta = pt.angle.unwrap_or(0.0);
            for (j, a) in basis.exponents.iter().enumerate() {
                let modulus = fiber_sq[node * dim + j].sqrt();
                v.push(Complex64::from_polar(modulus, a[1] as f64 * theta));
            }
        }
        v
    });
    PolarizationCache { basis, degree: spec.degrees[i] * spec.k, fiber_sq, values }
}

/// `p^α = Π p_j^{α_j}`.
pub fn monomial_sq(p: &[f64], alpha: &[u32]) -> f64 {
    p.iter().zip(alpha).map(|(&p, &a)| p.powi(a as i32)).product()
}

/// A testbed with its grid and reference Gram forms, shared by all states.
#[derive(Clone, Debug)]
pub struct Testbed {
    pub spec: TestbedSpec,
    pub grid: QuadratureGrid,
    pub references: Vec<GramForm>,
}

impl Testbed {
    pub fn new(spec: TestbedSpec, resolution: &[usize]) -> Result<Arc<Self>> {
        let grid = build_grid(&spec, resolution)?;
        let references = (0..spec.n_factors())
            .map(|i| reference_gram(&spec, i, &grid))
            .collect::<Result<Vec<_>>>()?;
        Ok(Arc::new(Testbed { spec, grid, references }))
    }

    pub fn k(&self) -> f64 {
        self.spec.k as f64
    }

    pub fn n_factors(&self) -> usize {
        self.spec.n_factors()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.grid.polarizations[i].dim()
    }

    pub fn degree(&self, i: usize) -> f64 {
        self.spec.degrees[i] as f64
    }

    pub fn cache(&self, i: usize) -> &PolarizationCache {
        &self.grid.polarizations[i]
    }
}

/// Gram matrix of the monomial basis for potential 0 and measure MA(0) = θ₀ⁿ.
pub fn reference_gram(spec: &TestbedSpec, i: usize, grid: &QuadratureGrid) -> Result<GramForm> {
    let zero = vec![0.0; grid.len()];
    let one = vec![1.0; grid.len()];
    hermitian::hilb_raw(grid, i, spec.k as f64, &zero, &one)
}

/// Closed form of the reference Gram diagonal: `n! α! / (|α| + n)!`.
pub fn reference_entry(n: usize, alpha: &[u32]) -> f64 {
    let total: u32 = alpha.iter().sum();
    // Accumulate as a product of ratios to stay in range.
    let mut num: Vec<f64> = Vec::new();
    for &a in alpha {
        num.extend((1..=a).map(|j| j as f64));
    }
    let mut den: Vec<f64> = ((n as u32 + 1)..=(total + n as u32)).map(|j| j as f64).collect();
    num.sort_by(|a, b| b.total_cmp(a));
    den.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 1.0;
    let len = num.len().max(den.len());
    for j in 0..len {
        if let Some(x) = num.get(j) {
            acc *= x;
        }
        if let Some(y) = den.get(j) {
            acc /= y;
        }
    }
    acc
}
