//! Chow weights, coupled Futaki invariants and higher-order coupled Futaki
//! invariants of product test configurations generated by diagonal
//! ℂ*-actions on ℙⁿ.
//!
//! Lattice data is exact: the action weight of `z^α ∈ H⁰(O(d k m))` is
//! `⟨w, α⟩ + m·c`, where `c` is the lift on `L^k`. Dimensions and total
//! weights are fitted as polynomials in `x = km` with rational coefficients.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::coupled_solver::canonical_measure;
use crate::error::{Error, Result};
use crate::geometry::{Testbed, TestbedSpec};
use crate::potential::PotentialField;

/// Diagonal ℂ*-action `z_j ↦ t^{w_j} z_j` with per-polarization lifts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeActionSpec {
    pub weights: Vec<i64>,
    #[serde(default)]
    pub lift_shift: Vec<i64>,
}

impl LatticeActionSpec {
    pub fn validate(&self, spec: &TestbedSpec) -> Result<()> {
        if self.weights.len() != spec.n + 1 {
            return Err(Error::SpecInvalid(format!(
                "action needs {} weights, got {}",
                spec.n + 1,
                self.weights.len()
            )));
        }
        if !self.lift_shift.is_empty() && self.lift_shift.len() != spec.n_factors() {
            return Err(Error::SpecInvalid(format!(
                "lift_shift needs {} entries, got {}",
                spec.n_factors(),
                self.lift_shift.len()
            )));
        }
        if self.weights.iter().chain(&self.lift_shift).any(|w| w.unsigned_abs() > 1 << 20) {
            return Err(Error::SpecInvalid("action weights must satisfy |w| <= 2^20".into()));
        }
        Ok(())
    }

    pub fn shift(&self, i: usize) -> i64 {
        self.lift_shift.get(i).copied().unwrap_or(0)
    }

    pub fn is_trivial(&self) -> bool {
        self.weights.iter().all(|w| *w == self.weights[0])
    }
}

/// Exact `(D^{(km)}, w^{(km)})` for factor `i` at each sampled `m`.
pub fn lattice_dims_and_weights(
    spec: &TestbedSpec,
    action: &LatticeActionSpec,
    i: usize,
    m_samples: &[u32],
) -> Result<Vec<(u64, BigInt, BigInt)>> {
    spec.validate()?;
    action.validate(spec)?;
    let mut out = Vec::with_capacity(m_samples.len());
    for &m in m_samples {
        if m == 0 {
            return Err(Error::SpecInvalid("m samples must be positive".into()));
        }
        let x = spec.k as u64 * m as u64;
        let degree = spec.degrees[i] as u64 * x;
        if degree > 4096 {
            return Err(Error::SpecInvalid(format!("lattice degree {degree} exceeds 4096")));
        }
        let (count, weight) = enumerate(spec.n, degree, &action.weights);
        let shift = BigInt::from(action.shift(i)) * BigInt::from(m) * &count;
        out.push((x, count, weight + shift));
    }
    Ok(out)
}

/// Count and total `⟨w, α⟩` over all `α ∈ ℕ^{n+1}` with `|α| = degree`.
fn enumerate(n: usize, degree: u64, w: &[i64]) -> (BigInt, BigInt) {
    fn rec(slot: usize, left: u64, acc: i128, w: &[i64], count: &mut i128, total: &mut i128) {
        if slot + 1 == w.len() {
            *count += 1;
            *total += acc + left as i128 * w[slot] as i128;
            return;
        }
        for a in 0..=left {
            rec(slot + 1, left - a, acc + a as i128 * w[slot] as i128, w, count, total);
        }
    }
    let (mut count, mut total) = (0i128, 0i128);
    debug_assert_eq!(w.len(), n + 1);
    rec(0, degree, 0, w, &mut count, &mut total);
    (BigInt::from(count), BigInt::from(total))
}

/// `D(x) = Σ a_j x^{n-j}`, `w(x) = Σ e_j x^{n+1-j}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeightPolynomials {
    pub a: Vec<BigRational>,
    pub e: Vec<BigRational>,
}

impl WeightPolynomials {
    pub fn dim_at(&self, x: &BigRational) -> BigRational {
        horner(&self.a, x)
    }

    pub fn weight_at(&self, x: &BigRational) -> BigRational {
        horner(&self.e, x)
    }

    /// `a` as ascending coefficients.
    fn dim_poly(&self) -> Vec<BigRational> {
        self.a.iter().rev().cloned().collect()
    }

    /// `R(x) = w(x) - x D(x) e_0/a_0`, ascending.
    fn chow_numerator(&self) -> Vec<BigRational> {
        let ratio = &self.e[0] / &self.a[0];
        let mut r: Vec<BigRational> = self.e.iter().rev().cloned().collect();
        for (j, a) in self.dim_poly().iter().enumerate() {
            r[j + 1] -= a * &ratio;
        }
        r
    }
}

fn horner(desc: &[BigRational], x: &BigRational) -> BigRational {
    desc.iter().fold(BigRational::zero(), |acc, c| acc * x + c)
}

fn rat(v: impl Into<BigInt>) -> BigRational {
    BigRational::from_integer(v.into())
}

/// Exact Gaussian elimination. `None` when the system is singular.
fn solve_rational(mut a: Vec<Vec<BigRational>>, mut b: Vec<BigRational>) -> Option<Vec<BigRational>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).find(|&r| !a[r][col].is_zero())?;
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col && !a[r][col].is_zero() {
                let f = &a[r][col] / &a[col][col];
                for c in col..n {
                    let t = &f * &a[col][c];
                    a[r][c] -= t;
                }
                let t = &f * &b[col];
                b[r] -= t;
            }
        }
    }
    Some((0..n).map(|r| &b[r] / &a[r][r]).collect())
}

/// Interpolates `values` at `xs` by a polynomial of degree `deg`, using the
/// first `deg + 1` samples and checking the rest. Returns descending
/// coefficients.
fn fit(xs: &[BigRational], values: &[BigRational], deg: usize, what: &str) -> Result<Vec<BigRational>> {
    let unknowns = deg + 1;
    if xs.len() < unknowns {
        return Err(Error::SingularFit(format!("{what}: {} samples for degree {deg}", xs.len())));
    }
    let rows: Vec<Vec<BigRational>> = xs[..unknowns]
        .iter()
        .map(|x| (0..unknowns).map(|p| num_traits::pow(x.clone(), deg - p)).collect())
        .collect();
    let coeffs = solve_rational(rows, values[..unknowns].to_vec())
        .ok_or_else(|| Error::SingularFit(format!("{what}: repeated sample points")))?;
    for (x, v) in xs.iter().zip(values).skip(unknowns) {
        if horner(&coeffs, x) != *v {
            return Err(Error::SingularFit(format!("{what}: held-out sample at x = {x} not reproduced")));
        }
    }
    Ok(coeffs)
}

/// Exact polynomial fit of the lattice data; needs at least `n + 2` samples.
pub fn fit_weight_polynomials(n: usize, degree: u32, pairs: &[(u64, BigInt, BigInt)]) -> Result<WeightPolynomials> {
    let xs: Vec<BigRational> = pairs.iter().map(|p| rat(p.0)).collect();
    let mut seen = xs.clone();
    seen.sort();
    seen.dedup();
    if seen.len() != xs.len() {
        return Err(Error::SingularFit("duplicate m samples".into()));
    }
    let dims: Vec<BigRational> = pairs.iter().map(|p| BigRational::from_integer(p.1.clone())).collect();
    let weights: Vec<BigRational> = pairs.iter().map(|p| BigRational::from_integer(p.2.clone())).collect();
    let a = fit(&xs, &dims, n, "dimension polynomial")?;
    let e = fit(&xs, &weights, n + 1, "weight polynomial")?;
    let expected = BigRational::new(BigInt::from(degree).pow(n as u32), factorial(n));
    if a[0] != expected {
        return Err(Error::SingularFit(format!("leading dimension coefficient {} != {}", a[0], expected)));
    }
    Ok(WeightPolynomials { a, e })
}

fn factorial(n: usize) -> BigInt {
    (1..=n).fold(BigInt::one(), |acc, j| acc * BigInt::from(j))
}

/// `Chow^{(x)} = e_0/a_0 - w(x)/(x D(x))` at `x = km`.
pub fn chow_at(polys: &WeightPolynomials, x: u64) -> BigRational {
    let xr = rat(x);
    &polys.e[0] / &polys.a[0] - polys.weight_at(&xr) / (&xr * polys.dim_at(&xr))
}

/// `Chow^{(k)}`.
pub fn chow_weight(polys: &WeightPolynomials, k: u32) -> BigRational {
    chow_at(polys, k as u64)
}

/// Single-polarization higher Futaki invariants `ℱ_1..ℱ_n` from
/// `w(x) - x D(x) e_0/a_0 = Σ_p x^{n+1-p}/(n+1-p)! ℱ_p`.
pub fn higher_futaki_single(n: usize, polys: &WeightPolynomials) -> Result<Vec<BigRational>> {
    let r = polys.chow_numerator();
    if !r[0].is_zero() || !r[n + 1].is_zero() {
        return Err(Error::SingularFit("Chow numerator is not spanned by x..x^n".into()));
    }
    let rows: Vec<Vec<BigRational>> = (1..=n)
        .map(|power| {
            (1..=n)
                .map(|p| if n + 1 - p == power { BigRational::new(BigInt::one(), factorial(n + 1 - p)) } else { BigRational::zero() })
                .collect()
        })
        .collect();
    let rhs: Vec<BigRational> = (1..=n).map(|power| r[power].clone()).collect();
    solve_rational(rows, rhs).ok_or_else(|| Error::SingularFit("higher Futaki system".into()))
}

/// Exact `Fut_c` at the Fubini-Study point, where `ω_i^n/V_i` and
/// `μ(ω)` are both the uniform measure on the moment simplex. The Hamiltonian
/// of the diagonal field for `ω_i = d_i ω_FS` is `d_i Σ_j w_j p_j` plus the
/// lift, and simplex averages of `p_j` are `1/(n+1)`.
pub fn coupled_futaki_exact(spec: &TestbedSpec, action: &LatticeActionSpec) -> Result<BigRational> {
    action.validate(spec)?;
    let n1 = rat(spec.n as i64 + 1);
    let mut fut = BigRational::zero();
    for (i, d) in spec.degrees.iter().enumerate() {
        let mean_p = BigRational::new(BigInt::one(), n1.to_integer());
        let theta_avg: BigRational = action.weights.iter().map(|w| rat(*w * *d as i64) * &mean_p).sum::<BigRational>()
            + BigRational::new(BigInt::from(action.shift(i)), BigInt::from(spec.k));
        // Probability average against ω_i^n/V_i, then against μ(ω).
        let against_volume = theta_avg.clone();
        let against_mu = theta_avg;
        fut += against_mu - against_volume;
    }
    Ok(fut)
}

/// `Fut_c(V) = -Σ_i ∫θ_V(ω_i) ω_i^n/V_i + Σ_i ∫θ_V(ω_i) μ(ω)` by quadrature
/// for torus-invariant potentials `φ_i`, with
/// `θ_V(ω_φ) = Σ_{j≥1} (w_j - w_0)(d p_j + ∂_{x_j} φ)`.
pub fn coupled_futaki(tb: &Testbed, action: &LatticeActionSpec, fields: &[PotentialField]) -> Result<f64> {
    action.validate(&tb.spec)?;
    let n = tb.spec.n;
    let values: Vec<Vec<f64>> = fields.iter().map(|f| f.values.clone()).collect();
    let mu = canonical_measure(tb, &values)?;
    let mut fut = 0.0;
    for (i, f) in fields.iter().enumerate() {
        let d = tb.degree(i);
        let theta: Vec<f64> = tb
            .grid
            .points
            .iter()
            .zip(&f.grad)
            .map(|(pt, g)| (1..=n).map(|j| (action.weights[j] - action.weights[0]) as f64 * (d * pt.p[j] + g[j - 1])).sum())
            .collect();
        let ma = f.ma_density(tb, i)?;
        fut += -tb.grid.integrate2(&theta, &ma) + tb.grid.integrate2(&theta, &mu);
    }
    Ok(fut)
}

/// Coupled higher invariants `ℱ_{c,1..nN+1}`: coefficients of `x^{nN+2-j}` in
/// `f(x) = x ΠD_i(x) Fut_c - Σ_i Π_{j≠i} D_j(x) R_i(x)`.
pub fn higher_coupled_futaki(polys: &[WeightPolynomials], fut_c: &BigRational, n: usize) -> Result<Vec<BigRational>> {
    let f = coupled_polynomial(polys, fut_c);
    let top = n * polys.len() + 1;
    if f.len() > top + 1 || !f[0].is_zero() {
        return Err(Error::SingularFit("coupled polynomial has unexpected support".into()));
    }
    Ok((1..=top).map(|j| f.get(top + 1 - j).cloned().unwrap_or_else(BigRational::zero)).collect())
}

/// `f(x)` as ascending coefficients.
fn coupled_polynomial(polys: &[WeightPolynomials], fut_c: &BigRational) -> Vec<BigRational> {
    let dims: Vec<Vec<BigRational>> = polys.iter().map(|p| p.dim_poly()).collect();
    let mut prod = vec![BigRational::one()];
    for d in &dims {
        prod = poly_mul(&prod, d);
    }
    let mut f: Vec<BigRational> = std::iter::once(BigRational::zero()).chain(prod.iter().map(|c| c * fut_c)).collect();
    for (i, p) in polys.iter().enumerate() {
        let mut term = p.chow_numerator();
        for (j, d) in dims.iter().enumerate() {
            if j != i {
                term = poly_mul(&term, d);
            }
        }
        if term.len() > f.len() {
            f.resize(term.len(), BigRational::zero());
        }
        for (c, t) in f.iter_mut().zip(&term) {
            *c -= t;
        }
    }
    while f.len() > 1 && f.last().is_some_and(|c| c.is_zero()) {
        f.pop();
    }
    f
}

fn poly_mul(a: &[BigRational], b: &[BigRational]) -> Vec<BigRational> {
    let mut out = vec![BigRational::zero(); a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `x ΠD_i(x) DF^{(x)}` straight from lattice data, with
/// `DF^{(x)} = Σ_i Chow_i^{(x)} + Fut_c`.
pub fn scaled_quantized_df(polys: &[WeightPolynomials], fut_c: &BigRational, x: u64) -> BigRational {
    let xr = rat(x);
    let dims: Vec<BigRational> = polys.iter().map(|p| p.dim_at(&xr)).collect();
    let prod: BigRational = dims.iter().fold(BigRational::one(), |acc, d| acc * d);
    let df = polys.iter().map(|p| chow_at(p, x)).sum::<BigRational>() + fut_c;
    xr * prod * df
}

/// `Σ_j ℱ_{c,j} x^{nN+2-j}`.
pub fn eval_higher(fc: &[BigRational], x: u64) -> BigRational {
    let xr = rat(x);
    let top = fc.len();
    fc.iter().enumerate().map(|(j, c)| c * num_traits::pow(xr.clone(), top - j)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObstructionReport {
    /// Per factor, `a_0..a_n` as "p/q".
    pub a: Vec<Vec<String>>,
    /// Per factor, `e_0..e_{n+1}`.
    pub e: Vec<Vec<String>>,
    /// `Σ_i Chow^{(k)}_i`.
    pub chow: String,
    /// Per factor `Chow^{(k)}`.
    pub chow_factors: Vec<String>,
    /// Quadrature value at the supplied metric.
    pub fut_c: f64,
    pub fut_c_exact: String,
    pub fut_c_vanishing: bool,
    /// Per factor `ℱ_{[i],1..n}`.
    pub f_single: Vec<Vec<String>>,
    #[serde(rename = "F_c")]
    pub f_c: Vec<String>,
}

/// Full obstruction computation for one action. `m_samples` defaults to
/// `1..=n+4` (two held-out checks).
pub fn compute(
    tb: &Testbed,
    action: &LatticeActionSpec,
    m_samples: Option<&[u32]>,
    fields: &[PotentialField],
) -> Result<(ObstructionReport, Vec<WeightPolynomials>, Vec<BigRational>)> {
    let spec = &tb.spec;
    action.validate(spec)?;
    let default: Vec<u32> = (1..=spec.n as u32 + 4).collect();
    let ms = m_samples.unwrap_or(&default);
    let mut polys = Vec::new();
    for i in 0..spec.n_factors() {
        let pairs = lattice_dims_and_weights(spec, action, i, ms)?;
        polys.push(fit_weight_polynomials(spec.n, spec.degrees[i], &pairs)?);
    }
    let fut_exact = coupled_futaki_exact(spec, action)?;
    let fut_c = coupled_futaki(tb, action, fields)?;
    let f_c = higher_coupled_futaki(&polys, &fut_exact, spec.n)?;
    let f_single = polys
        .iter()
        .map(|p| higher_futaki_single(spec.n, p).map(|v| v.iter().map(format_rational).collect()))
        .collect::<Result<Vec<_>>>()?;
    let chows: Vec<BigRational> = polys.iter().map(|p| chow_weight(p, spec.k)).collect();
    let total = chows.iter().fold(BigRational::zero(), |a, c| a + c);
    let report = ObstructionReport {
        a: polys.iter().map(|p| p.a.iter().map(format_rational).collect()).collect(),
        e: polys.iter().map(|p| p.e.iter().map(format_rational).collect()).collect(),
        chow: format_rational(&total),
        chow_factors: chows.iter().map(format_rational).collect(),
        fut_c,
        fut_c_exact: format_rational(&fut_exact),
        fut_c_vanishing: fut_c.abs() < 1e-8,
        f_single,
        f_c: f_c.iter().map(format_rational).collect(),
    };
    Ok((report, polys, f_c))
}

/// Always `"p/q"` with `q > 0`, e.g. `"0/1"`, `"-3/2"`.
pub fn format_rational(r: &BigRational) -> String {
    format!("{}/{}", r.numer(), r.denom())
}

/// Parses `"p/q"` or a bare integer `"p"`.
pub fn parse_rational(s: &str) -> Result<BigRational> {
    let bad = || Error::Parse(format!("invalid rational {s:?}"));
    if s.is_empty() || s.len() > 4096 {
        return Err(bad());
    }
    let int = |t: &str| -> Result<BigInt> {
        let digits = t.strip_prefix('-').unwrap_or(t);
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        t.parse::<BigInt>().map_err(|_| bad())
    };
    match s.split_once('/') {
        None => Ok(BigRational::from_integer(int(s)?)),
        Some((p, q)) => {
            let q = int(q)?;
            if q.is_zero() || q.is_negative() {
                return Err(bad());
            }
            Ok(BigRational::new(int(p)?, q))
        }
    }
}

/// Lossy conversion for printing.
pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}
