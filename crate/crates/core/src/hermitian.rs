//! Bergman metrics of a single polarization.
//!
//! A point `H ∈ ℋ^{(k)}` is stored as its Gram matrix `G` in the fixed
//! monomial basis. H-orthonormal frames only exist transiently through the
//! Cholesky factor `G = LL†`: the frame is `s = L⁻¹e`, and every matrix
//! "in the H-ONB frame" (directions `A`, moment matrices) is a plain
//! Hermitian matrix in that frame.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{QuadratureGrid, Testbed};

/// Largest Gram dimension accepted by the JSON decoder.
pub const MAX_JSON_DIM: usize = 4096;

/// A Hermitian matrix, kept diagonal whenever the torus symmetry allows it.
#[derive(Clone, Debug, PartialEq)]
pub enum Herm {
    Diagonal(DVector<f64>),
    Dense(DMatrix<Complex64>),
}

impl Herm {
    pub fn identity(dim: usize, diagonal: bool) -> Herm {
        if diagonal {
            Herm::Diagonal(DVector::from_element(dim, 1.0))
        } else {
            Herm::Dense(DMatrix::identity(dim, dim))
        }
    }

    pub fn from_diagonal(values: Vec<f64>) -> Herm {
        Herm::Diagonal(DVector::from_vec(values))
    }

    /// Dense Hermitian matrix; the stored matrix is exactly Hermitian.
    pub fn from_dense(m: DMatrix<Complex64>) -> Herm {
        Herm::Dense(hermitize(m))
    }

    pub fn dim(&self) -> usize {
        match self {
            Herm::Diagonal(d) => d.len(),
            Herm::Dense(m) => m.nrows(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, Herm::Diagonal(_))
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        match self {
            Herm::Diagonal(d) => DMatrix::from_diagonal(&d.map(|x| Complex64::new(x, 0.0))),
            Herm::Dense(m) => m.clone(),
        }
    }

    pub fn diagonal_entries(&self) -> Vec<f64> {
        match self {
            Herm::Diagonal(d) => d.iter().copied().collect(),
            Herm::Dense(m) => (0..m.nrows()).map(|j| m[(j, j)].re).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        self.diagonal_entries().iter().sum()
    }

    /// `Tr(A B)` for Hermitian `A`, `B` (real).
    pub fn trace_product(&self, other: &Herm) -> f64 {
        match (self, other) {
            (Herm::Diagonal(a), Herm::Diagonal(b)) => a.dot(b),
            (Herm::Diagonal(a), Herm::Dense(b)) | (Herm::Dense(b), Herm::Diagonal(a)) => {
                a.iter().enumerate().map(|(j, x)| x * b[(j, j)].re).sum()
            }
            (Herm::Dense(a), Herm::Dense(b)) => {
                let mut s = 0.0;
                for r in 0..a.nrows() {
                    for c in 0..a.ncols() {
                        s += (a[(r, c)] * b[(c, r)]).re;
                    }
                }
                s
            }
        }
    }

    /// `Tr(A²)`.
    pub fn trace_sq(&self) -> f64 {
        self.trace_product(self)
    }

    pub fn scale(&self, c: f64) -> Herm {
        match self {
            Herm::Diagonal(d) => Herm::Diagonal(d * c),
            Herm::Dense(m) => Herm::Dense(m * Complex64::new(c, 0.0)),
        }
    }

    /// `self + c·other`.
    pub fn add_scaled(&self, c: f64, other: &Herm) -> Herm {
        match (self, other) {
            (Herm::Diagonal(a), Herm::Diagonal(b)) => Herm::Diagonal(a + b * c),
            _ => Herm::Dense(self.to_dense() + other.to_dense() * Complex64::new(c, 0.0)),
        }
    }

    /// `self - Id`.
    pub fn minus_identity(&self) -> Herm {
        match self {
            Herm::Diagonal(d) => Herm::Diagonal(d.map(|x| x - 1.0)),
            Herm::Dense(m) => {
                let mut m = m.clone();
                for j in 0..m.nrows() {
                    m[(j, j)] -= Complex64::new(1.0, 0.0);
                }
                Herm::Dense(m)
            }
        }
    }

    /// Largest entry modulus.
    pub fn max_abs(&self) -> f64 {
        match self {
            Herm::Diagonal(d) => d.amax(),
            Herm::Dense(m) => m.iter().map(|z| z.norm()).fold(0.0, f64::max),
        }
    }

    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let mut ev = match self {
            Herm::Diagonal(d) => d.iter().copied().collect::<Vec<_>>(),
            Herm::Dense(m) => {
                check_finite(m)?;
                let eig = nalgebra::SymmetricEigen::new(m.clone());
                eig.eigenvalues.iter().copied().collect()
            }
        };
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }

    /// `f(A)` through the spectral decomposition. Diagonal input stays exact.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Result<Herm> {
        match self {
            Herm::Diagonal(d) => Ok(Herm::Diagonal(d.map(f))),
            Herm::Dense(m) => {
                check_finite(m)?;
                let eig = nalgebra::SymmetricEigen::new(m.clone());
                let q = &eig.eigenvectors;
                let fd = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| Complex64::new(f(x), 0.0)));
                Ok(Herm::from_dense(q * fd * q.adjoint()))
            }
        }
    }

    pub fn exp(&self) -> Result<Herm> {
        self.map_spectrum(f64::exp)
    }
}

fn check_finite(m: &DMatrix<Complex64>) -> Result<()> {
    if m.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::EigenFailure("non-finite matrix entry".into()))
    }
}

fn hermitize(m: DMatrix<Complex64>) -> DMatrix<Complex64> {
    let mut h = (&m + m.adjoint()) * Complex64::new(0.5, 0.0);
    for j in 0..h.nrows() {
        h[(j, j)].im = 0.0;
    }
    h
}

/// Positive-definite Gram matrix of a monomial basis.
#[derive(Clone, Debug, PartialEq)]
pub struct GramForm {
    pub basis_tag: String,
    matrix: Herm,
}

/// Cholesky factor `G = LL†`.
#[derive(Clone, Debug)]
pub enum Factor {
    Diagonal(DVector<f64>),
    Dense(DMatrix<Complex64>),
}

impl GramForm {
    pub fn new(basis_tag: impl Into<String>, matrix: Herm) -> Result<Self> {
        let g = GramForm { basis_tag: basis_tag.into(), matrix };
        g.factor()?;
        Ok(g)
    }

    pub fn diagonal(basis_tag: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        Self::new(basis_tag, Herm::from_diagonal(values))
    }

    pub fn matrix(&self) -> &Herm {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn is_diagonal(&self) -> bool {
        self.matrix.is_diagonal()
    }

    pub fn diagonal_values(&self) -> Option<Vec<f64>> {
        match &self.matrix {
            Herm::Diagonal(d) => Some(d.iter().copied().collect()),
            Herm::Dense(_) => None,
        }
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        self.matrix.to_dense()
    }

    pub fn factor(&self) -> Result<Factor> {
        match &self.matrix {
            Herm::Diagonal(d) => {
                if d.iter().all(|&x| x > 0.0 && x.is_finite()) {
                    Ok(Factor::Diagonal(d.map(f64::sqrt)))
                } else {
                    Err(Error::SingularGram)
                }
            }
            Herm::Dense(m) => {
                if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                    return Err(Error::SingularGram);
                }
                let ch = m.clone().cholesky().ok_or(Error::SingularGram)?;
                let l = ch.l();
                if (0..l.nrows()).any(|j| !(l[(j, j)].re > 0.0)) {
                    return Err(Error::SingularGram);
                }
                Ok(Factor::Dense(l))
            }
        }
    }

    /// `c·G`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.basis_tag.clone(), self.matrix.scale(c))
    }

    /// Max-entry relative difference `‖G - G'‖_∞ / ‖G‖_∞`.
    pub fn rel_diff(&self, other: &GramForm) -> f64 {
        let diff = self.matrix.add_scaled(-1.0, &other.matrix);
        diff.max_abs() / self.matrix.max_abs()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_json_value()).expect("gram serializes")
    }

    pub fn to_json_value(&self) -> GramJson {
        let entries = match &self.matrix {
            Herm::Diagonal(d) => GramEntries::Diagonal(d.iter().copied().collect()),
            Herm::Dense(m) => {
                let n = m.nrows();
                let mut e = Vec::with_capacity(n * n);
                for r in 0..n {
                    for c in 0..n {
                        e.push([m[(r, c)].re, m[(r, c)].im]);
                    }
                }
                GramEntries::Dense(e)
            }
        };
        GramJson { basis_tag: self.basis_tag.clone(), dim: self.dim(), entries }
    }

    /// Decodes and validates the JSON form: dimensions must match, entries
    /// must be finite, the dense form exactly Hermitian, and the matrix
    /// positive definite.
    pub fn from_json(s: &str) -> Result<Self> {
        let raw: GramJson = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_json_value(raw)
    }

    pub fn from_json_value(raw: GramJson) -> Result<Self> {
        let n = raw.dim;
        if n == 0 || n > MAX_JSON_DIM {
            return Err(Error::Parse(format!("dim {n} out of range")));
        }
        if raw.basis_tag.is_empty() || raw.basis_tag.len() > 64 {
            return Err(Error::Parse("basis_tag must have 1..=64 bytes".into()));
        }
        let matrix = match raw.entries {
            GramEntries::Diagonal(d) => {
                if d.len() != n {
                    return Err(Error::Parse(format!("expected {n} diagonal entries, got {}", d.len())));
                }
                if d.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Parse("non-finite entry".into()));
                }
                Herm::from_diagonal(d)
            }
            GramEntries::Dense(e) => {
                if n.checked_mul(n) != Some(e.len()) {
                    return Err(Error::Parse(format!("expected {} entries, got {}", n * n, e.len())));
                }
                if e.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::Parse("non-finite entry".into()));
                }
                let m = DMatrix::from_fn(n, n, |r, c| {
                    let [re, im] = e[r * n + c];
                    Complex64::new(re, im)
                });
                for r in 0..n {
                    for c in 0..n {
                        if m[(r, c)] != m[(c, r)].conj() {
                            return Err(Error::Parse("matrix is not Hermitian".into()));
                        }
                    }
                }
                Herm::Dense(m)
            }
        };
        GramForm::new(raw.basis_tag, matrix)
    }
}

/// Decodes a JSON array of Gram matrices, one per polarization.
pub fn parse_gram_list(s: &str) -> Result<Vec<GramForm>> {
    let raw: Vec<GramJson> = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
    if raw.is_empty() {
        return Err(Error::Parse("empty Gram list".into()));
    }
    raw.into_iter().map(GramForm::from_json_value).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramJson {
    pub basis_tag: String,
    pub dim: usize,
    pub entries: GramEntries,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GramEntries {
    Diagonal(Vec<f64>),
    Dense(Vec<[f64; 2]>),
}

impl Factor {
    pub fn dim(&self) -> usize {
        match self {
            Factor::Diagonal(d) => d.len(),
            Factor::Dense(l) => l.nrows(),
        }
    }

    /// `log det G`.
    pub fn log_det(&self) -> f64 {
        match self {
            Factor::Diagonal(d) => 2.0 * d.iter().map(|x| x.ln()).sum::<f64>(),
            Factor::Dense(l) => 2.0 * (0..l.nrows()).map(|j| l[(j, j)].re.ln()).sum::<f64>(),
        }
    }

    /// `L⁻¹ X L⁻†`: expresses a Hermitian form in the H-ONB frame.
    pub fn to_frame(&self, x: &Herm) -> Herm {
        match (self, x) {
            (Factor::Diagonal(l), Herm::Diagonal(x)) => {
                Herm::Diagonal(x.zip_map(l, |x, l| x / (l * l)))
            }
            (Factor::Diagonal(l), Herm::Dense(x)) => {
                let n = l.len();
                Herm::from_dense(DMatrix::from_fn(n, n, |r, c| x[(r, c)] / (l[r] * l[c])))
            }
            (Factor::Dense(l), x) => {
                let y = l.solve_lower_triangular(&x.to_dense()).expect("nonsingular factor");
                let z = l.solve_lower_triangular(&y.adjoint()).expect("nonsingular factor");
                Herm::from_dense(z)
            }
        }
    }

    /// `L A L†`: maps a frame matrix back to the monomial basis.
    pub fn from_frame(&self, a: &Herm) -> Herm {
        match (self, a) {
            (Factor::Diagonal(l), Herm::Diagonal(a)) => Herm::Diagonal(a.zip_map(l, |a, l| a * l * l)),
            (Factor::Diagonal(l), Herm::Dense(a)) => {
                let n = l.len();
                Herm::from_dense(DMatrix::from_fn(n, n, |r, c| a[(r, c)] * (l[r] * l[c])))
            }
            (Factor::Dense(l), a) => Herm::from_dense(l * a.to_dense() * l.adjoint()),
        }
    }

    /// `‖L⁻¹ v‖²` for a complex vector.
    pub fn inv_norm_sq(&self, v: &[Complex64]) -> f64 {
        match self {
            Factor::Diagonal(l) => v.iter().zip(l.iter()).map(|(v, l)| v.norm_sqr() / (l * l)).sum(),
            Factor::Dense(l) => {
                let y = l
                    .solve_lower_triangular(&DVector::from_column_slice(v))
                    .expect("nonsingular factor");
                y.norm_squared()
            }
        }
    }

    /// `L⁻¹ v`.
    pub fn solve(&self, v: &[Complex64]) -> DVector<Complex64> {
        match self {
            Factor::Diagonal(l) => DVector::from_iterator(
                v.len(),
                v.iter().zip(l.iter()).map(|(v, l)| v / *l),
            ),
            Factor::Dense(l) => l
                .solve_lower_triangular(&DVector::from_column_slice(v))
                .expect("nonsingular factor"),
        }
    }
}

/// Whether a Gram matrix can be evaluated pointwise on this grid.
fn check_mode(grid: &QuadratureGrid, g: &GramForm) -> Result<()> {
    if !g.is_diagonal() && !grid.is_general() {
        return Err(Error::SymmetryMismatch(
            "dense Gram matrix on a torus-reduced grid".into(),
        ));
    }
    Ok(())
}

/// Bergman sum `β(x) = v(x)† G⁻¹ v(x) · ŵ(x)` at every node.
pub fn bergman_sum(tb: &Testbed, i: usize, g: &GramForm) -> Result<Vec<f64>> {
    bergman_sum_on(&tb.grid, i, g)
}

pub fn bergman_sum_on(grid: &QuadratureGrid, i: usize, g: &GramForm) -> Result<Vec<f64>> {
    check_mode(grid, g)?;
    let cache = &grid.polarizations[i];
    if g.dim() != cache.dim() {
        return Err(Error::SymmetryMismatch(format!(
            "Gram dimension {} does not match basis dimension {}",
            g.dim(),
            cache.dim()
        )));
    }
    let f = g.factor()?;
    let out = match &f {
        Factor::Diagonal(l) => {
            let inv: Vec<f64> = l.iter().map(|l| 1.0 / (l * l)).collect();
            (0..grid.len())
                .map(|q| cache.row(q).iter().zip(&inv).map(|(s, w)| s * w).sum())
                .collect()
        }
        Factor::Dense(_) => (0..grid.len())
            .map(|q| f.inv_norm_sq(cache.values_row(q).expect("general grid")))
            .collect(),
    };
    Ok(out)
}

/// `FS^{(k)}(H) = (1/k) log(β/D)`.
pub fn fs_potential(tb: &Testbed, i: usize, g: &GramForm) -> Result<Vec<f64>> {
    let beta = bergman_sum(tb, i, g)?;
    Ok(fs_from_beta(&beta, tb.k(), tb.dim(i)))
}

pub fn fs_from_beta(beta: &[f64], k: f64, dim: usize) -> Vec<f64> {
    let d = dim as f64;
    beta.iter().map(|b| (b / d).ln() / k).collect()
}

/// `Hilb_ν(φ)`: Gram matrix `∫ e_α ē_β ŵ e^{-kφ} ν θ₀ⁿ`; `ν` is a density
/// relative to θ₀ⁿ.
pub fn hilb(tb: &Testbed, i: usize, phi: &[f64], nu: &[f64]) -> Result<GramForm> {
    hilb_raw(&tb.grid, i, tb.k(), phi, nu)
}

pub fn hilb_raw(grid: &QuadratureGrid, i: usize, k: f64, phi: &[f64], nu: &[f64]) -> Result<GramForm> {
    let omega: Vec<f64> = (0..grid.len())
        .map(|q| grid.mass[q] * (-k * phi[q]).exp() * nu[q])
        .collect();
    hilb_weighted(grid, i, &omega)
}

/// Gram matrix for explicit per-node weights `ω_q` (mass already included).
pub fn hilb_weighted(grid: &QuadratureGrid, i: usize, omega: &[f64]) -> Result<GramForm> {
    let cache = &grid.polarizations[i];
    let dim = cache.dim();
    let tag = cache.basis.tag();
    if omega.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::QuadratureFailure("non-finite or negative integrand".into()));
    }
    let g = if grid.is_general() {
        let w = DMatrix::from_fn(grid.len(), dim, |q, a| {
            cache.values_row(q).unwrap()[a] * omega[q].sqrt()
        });
        let m = w.transpose() * w.conjugate();
        GramForm::new(tag, Herm::from_dense(m))
    } else {
        let mut d = vec![0.0; dim];
        for (q, w) in omega.iter().enumerate() {
            for (acc, s) in d.iter_mut().zip(cache.row(q)) {
                *acc += w * s;
            }
        }
        GramForm::new(tag, Herm::from_diagonal(d))
    };
    g.map_err(|_| Error::QuadratureFailure("Hilb matrix is not positive definite".into()))
}

/// `M̄_ν(H) = L⁻¹ Hilb_ν(FS(H)) L⁻† / D`.
pub fn moment_bar(tb: &Testbed, i: usize, g: &GramForm, nu: &[f64]) -> Result<Herm> {
    let fs = fs_potential(tb, i, g)?;
    let h = hilb(tb, i, &fs, nu)?;
    let f = g.factor()?;
    Ok(f.to_frame(h.matrix()).scale(1.0 / tb.dim(i) as f64))
}

/// Riemannian distance in `ℋ^{(k)}` under `⟨A,B⟩ = Tr(AB)/(k²D)`.
pub fn dist(g1: &GramForm, g2: &GramForm, k: f64) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::SymmetryMismatch("Gram dimensions differ".into()));
    }
    let f = g1.factor()?;
    g2.factor()?;
    let ev = f.to_frame(g2.matrix()).eigenvalues()?;
    if ev.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::SingularGram);
    }
    let s: f64 = ev.iter().map(|x| x.ln().powi(2)).sum();
    Ok(s.sqrt() / (k * (g1.dim() as f64).sqrt()))
}

/// `‖A‖_H = sqrt(Tr A² / (k² D))`.
pub fn frame_norm(a: &Herm, k: f64) -> f64 {
    (a.trace_sq() / (k * k * a.dim() as f64)).sqrt()
}

/// Bergman geodesic `L exp(-tA) L†`.
pub fn geodesic(g: &GramForm, a: &Herm, t: f64) -> Result<GramForm> {
    if a.dim() != g.dim() {
        return Err(Error::SymmetryMismatch("direction has wrong dimension".into()));
    }
    let f = g.factor()?;
    let e = a.scale(-t).exp()?;
    GramForm::new(g.basis_tag.clone(), f.from_frame(&e))
}

/// Pointwise Hamiltonian `Tr(A∘M(H))(x) = Σ_{αβ} A_{αβ} (s_β, s_α)/Σ|s_γ|²`,
/// kept for diagnostics.
pub fn hamiltonian(tb: &Testbed, i: usize, g: &GramForm, a: &Herm) -> Result<Vec<f64>> {
    check_mode(&tb.grid, g)?;
    let f = g.factor()?;
    let cache = tb.cache(i);
    let out = (0..tb.grid.len())
        .map(|q| {
            let s = match cache.values_row(q) {
                Some(v) => f.solve(v),
                None => f.solve(
                    &cache.row(q).iter().map(|x| Complex64::new(x.sqrt(), 0.0)).collect::<Vec<_>>(),
                ),
            };
            let num = match a {
                Herm::Diagonal(d) => s.iter().zip(d.iter()).map(|(s, a)| a * s.norm_sqr()).sum(),
                Herm::Dense(m) => (s.adjoint() * m * &s)[(0, 0)].re,
            };
            num / s.norm_squared()
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Symmetry, TestbedSpec};
    use std::sync::Arc;

    fn tb(k: u32, res: usize) -> Arc<Testbed> {
        Testbed::new(TestbedSpec::new(1, vec![1, 1], k, Symmetry::TorusInvariant).unwrap(), &[res]).unwrap()
    }

    fn general(k: u32) -> Arc<Testbed> {
        Testbed::new(TestbedSpec::new(1, vec![1, 1], k, Symmetry::General).unwrap(), &[32, 4 * k as usize + 8])
            .unwrap()
    }

    fn random_hermitian(n: usize, seed: u64) -> DMatrix<Complex64> {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let m = DMatrix::from_fn(n, n, |_, _| Complex64::new(next(), next()));
        (&m + m.adjoint()) * Complex64::new(0.5, 0.0)
    }

    fn random_pd(n: usize, seed: u64) -> GramForm {
        let a = random_hermitian(n, seed);
        let m = &a * a.adjoint() + DMatrix::identity(n, n) * Complex64::new(0.5, 0.0);
        GramForm::new(format!("P1-deg{}", n - 1), Herm::from_dense(m)).unwrap()
    }

    #[test]
    fn bergman_sum_is_constant_at_beta_diagonal() {
        let t = tb(2, 32);
        let g = GramForm::diagonal("P1-deg2", vec![1.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0]).unwrap();
        let b = bergman_sum(&t, 0, &g).unwrap();
        assert!(b.iter().all(|x| (x - 3.0).abs() < 1e-13));
        let fs = fs_potential(&t, 0, &g).unwrap();
        assert!(fs.iter().all(|x| x.abs() < 1e-14));
        let b2 = bergman_sum(&t, 0, &g.scaled(4.0).unwrap()).unwrap();
        assert!(b.iter().zip(&b2).all(|(x, y)| (x / 4.0 - y).abs() < 1e-13));
        let fs2 = fs_potential(&t, 0, &g.scaled(4.0).unwrap()).unwrap();
        assert!(fs.iter().zip(&fs2).all(|(x, y)| (x - 4f64.ln() / 2.0 - y).abs() < 1e-13));
    }

    #[test]
    fn bergman_sum_at_origin_for_identity() {
        // k = 1, G = Id: β(z) = (1 + |z|²)/(1 + |z|²) = 1 everywhere; at z = 0 in particular.
        let t = tb(1, 16);
        let g = GramForm::diagonal("P1-deg1", vec![1.0, 1.0]).unwrap();
        let b = bergman_sum(&t, 0, &g).unwrap();
        assert!(b.iter().all(|x| (x - 1.0).abs() < 1e-15));
    }

    #[test]
    fn hilb_reference_and_scaling() {
        let t = tb(2, 32);
        let n = t.grid.len();
        let g = hilb(&t, 0, &vec![0.0; n], &vec![1.0; n]).unwrap();
        let d = g.diagonal_values().unwrap();
        for (x, e) in d.iter().zip([1.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0]) {
            assert!((x - e).abs() < 1e-14);
        }
        let c = 0.3;
        let g2 = hilb(&t, 0, &vec![c; n], &vec![1.0; n]).unwrap();
        let d2 = g2.diagonal_values().unwrap();
        for (x, y) in d.iter().zip(&d2) {
            assert!((x * (-2.0 * c).exp() - y).abs() < 1e-14);
        }
    }

    #[test]
    fn moment_bar_trace_and_scale_invariance() {
        let t = tb(4, 48);
        let n = t.grid.len();
        let g = GramForm::diagonal("P1-deg4", vec![0.3, 0.1, 0.05, 0.07, 0.4]).unwrap();
        let nu: Vec<f64> = t.grid.points.iter().map(|p| 0.5 + p.p[1]).collect();
        let m = moment_bar(&t, 0, &g, &nu).unwrap();
        assert!((m.trace() - 1.0).abs() < 1e-10);
        let m2 = moment_bar(&t, 0, &g.scaled(7.0).unwrap(), &nu).unwrap();
        assert!(m.add_scaled(-1.0, &m2).max_abs() < 1e-14);
        assert!(m.is_diagonal());
        let _ = n;
    }

    #[test]
    fn hilb_trace_identity() {
        let t = general(3);
        let g = random_pd(4, 7);
        let nu: Vec<f64> = t.grid.points.iter().map(|p| 1.0 + 0.5 * (p.angle.unwrap()).cos() * p.p[1]).collect();
        let fs = fs_potential(&t, 0, &g).unwrap();
        let h = hilb(&t, 0, &fs, &nu).unwrap();
        let tr = g.factor().unwrap().to_frame(h.matrix()).trace();
        assert!((tr - 4.0).abs() < 1e-10, "{tr}");
    }

    #[test]
    fn onb_independence_dense() {
        let t = general(3);
        let g = random_pd(4, 3);
        let beta = bergman_sum(&t, 0, &g).unwrap();
        let ginv = g.to_dense().try_inverse().unwrap();
        for q in (0..t.grid.len()).step_by(37) {
            let v = DVector::from_column_slice(t.cache(0).values_row(q).unwrap());
            let direct = (v.adjoint() * &ginv * &v)[(0, 0)].re;
            assert!((direct - beta[q]).abs() < 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn distance_properties() {
        let g = random_pd(5, 11);
        let h = random_pd(5, 12);
        let k = 4.0;
        assert!(dist(&g, &g, k).unwrap() < 1e-12);
        let c: f64 = 3.0;
        assert!((dist(&g, &g.scaled(c).unwrap(), k).unwrap() - c.ln() / k).abs() < 1e-12);
        assert!((dist(&g, &h, k).unwrap() - dist(&h, &g, k).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn geodesic_group_law() {
        let g = random_pd(4, 5);
        let a = Herm::from_dense(random_hermitian(4, 9));
        let g0 = geodesic(&g, &a, 0.0).unwrap();
        assert!(g.rel_diff(&g0) < 1e-13);
        let gi = geodesic(&g, &Herm::identity(4, false), 0.7).unwrap();
        assert!(g.scaled((-0.7f64).exp()).unwrap().rel_diff(&gi) < 1e-13);
        // Distances add along the geodesic.
        let k = 3.0;
        let s = geodesic(&g, &a, 0.3).unwrap();
        let st = geodesic(&g, &a, 0.7).unwrap();
        let d = dist(&g, &st, k).unwrap();
        assert!((d - 0.7 * frame_norm(&a, k)).abs() < 1e-10);
        assert!((dist(&s, &st, k).unwrap() - 0.4 * frame_norm(&a, k)).abs() < 1e-10);
        // Diagonal data: the Cholesky frame moves with the geodesic, so steps compose.
        let gd = GramForm::diagonal("P1-deg3", vec![0.3, 1.2, 0.7, 2.0]).unwrap();
        let ad = Herm::from_diagonal(vec![0.5, -1.0, 0.2, 0.9]);
        let two = geodesic(&geodesic(&gd, &ad, 0.3).unwrap(), &ad, 0.4).unwrap();
        assert!(two.rel_diff(&geodesic(&gd, &ad, 0.7).unwrap()) < 1e-13);
    }

    #[test]
    fn json_round_trip() {
        let g = random_pd(3, 1);
        let s = g.to_json();
        let back = GramForm::from_json(&s).unwrap();
        assert_eq!(g, back);
        let d = GramForm::diagonal("P1-deg1", vec![0.5, 0.25]).unwrap();
        assert_eq!(d.to_json(), r#"{"basis_tag":"P1-deg1","dim":2,"entries":[0.5,0.25]}"#);
        assert_eq!(GramForm::from_json(&d.to_json()).unwrap(), d);
    }

    #[test]
    fn json_rejects_bad_input() {
        for bad in [
            r#"{"basis_tag":"x","dim":2,"entries":[1.0]}"#,
            r#"{"basis_tag":"x","dim":2,"entries":[1.0,-1.0]}"#,
            r#"{"basis_tag":"x","dim":1,"entries":[[1.0,0.5]]}"#,
            r#"{"basis_tag":"x","dim":2,"entries":[[1,0],[0,1],[0,0],[1,0]]}"#,
            r#"{"basis_tag":"","dim":1,"entries":[1.0]}"#,
            r#"{"basis_tag":"x","dim":0,"entries":[]}"#,
            r#"{"basis_tag":"x","dim":1,"entries":[1.0],"extra":1}"#,
            "nonsense",
        ] {
            assert!(GramForm::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn singular_gram_is_rejected() {
        assert!(matches!(GramForm::diagonal("x", vec![1.0, 0.0]), Err(Error::SingularGram)));
        let m = DMatrix::from_element(2, 2, Complex64::new(1.0, 0.0));
        assert!(matches!(GramForm::new("x", Herm::Dense(m)), Err(Error::SingularGram)));
    }

    #[test]
    fn dense_on_torus_grid_is_a_mode_error() {
        let t = tb(1, 16);
        let g = random_pd(2, 4);
        assert!(matches!(bergman_sum(&t, 0, &g), Err(Error::SymmetryMismatch(_))));
    }

    #[test]
    fn hamiltonian_of_identity_is_one() {
        let t = general(2);
        let g = random_pd(3, 21);
        let h = hamiltonian(&t, 0, &g, &Herm::identity(3, false)).unwrap();
        assert!(h.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }
}
