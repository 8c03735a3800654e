//! Canonical measure, the coupled T-operator, the balancing flow and the
//! residual `ℛ^{(k)}`.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals;
use crate::geometry::Testbed;
use crate::hermitian::{self, Factor, GramForm, Herm};
use crate::potential::PotentialField;

/// Snapshot of an N-tuple of Bergman metrics with every derived cache.
#[derive(Clone, Debug)]
pub struct CoupledState {
    testbed: Arc<Testbed>,
    pub grams: Vec<GramForm>,
    pub beta: Vec<Vec<f64>>,
    pub fs: Vec<Vec<f64>>,
    /// Density of μ(FS(G)) with respect to θ₀ⁿ.
    pub mu: Vec<f64>,
    /// `T_i(G) = Hilb_{[i],μ}(FS_i(G_i))`.
    pub images: Vec<GramForm>,
    /// `D_i·M̄_i = L_i⁻¹ T_i(G) L_i⁻†` in the H-ONB frame.
    pub scaled_moments: Vec<Herm>,
    pub residual: f64,
}

impl CoupledState {
    pub fn new(testbed: Arc<Testbed>, grams: Vec<GramForm>) -> Result<Self> {
        let nf = testbed.n_factors();
        if grams.len() != nf {
            return Err(Error::SpecInvalid(format!("expected {nf} Gram matrices, got {}", grams.len())));
        }
        for (i, g) in grams.iter().enumerate() {
            let tag = testbed.cache(i).basis.tag();
            if g.basis_tag != tag {
                return Err(Error::SymmetryMismatch(format!("factor {i}: basis {} but testbed uses {tag}", g.basis_tag)));
            }
            if g.dim() != testbed.dim(i) {
                return Err(Error::SymmetryMismatch(format!(
                    "factor {i}: Gram dimension {} but basis dimension {}",
                    g.dim(),
                    testbed.dim(i)
                )));
            }
        }
        let mut beta = Vec::with_capacity(nf);
        let mut fs = Vec::with_capacity(nf);
        for (i, g) in grams.iter().enumerate() {
            let b = hermitian::bergman_sum(&testbed, i, g)?;
            fs.push(hermitian::fs_from_beta(&b, testbed.k(), testbed.dim(i)));
            beta.push(b);
        }
        let mu = canonical_measure(&testbed, &fs)?;
        let mut images = Vec::with_capacity(nf);
        let mut scaled_moments = Vec::with_capacity(nf);
        let mut residual = 0.0;
        for (i, g) in grams.iter().enumerate() {
            let t = hermitian::hilb(&testbed, i, &fs[i], &mu)?;
            let dm = g.factor()?.to_frame(t.matrix());
            residual += dm.minus_identity().trace_sq() / testbed.dim(i) as f64;
            images.push(t);
            scaled_moments.push(dm);
        }
        Ok(CoupledState { testbed, grams, beta, fs, mu, images, scaled_moments, residual })
    }

    /// All factors at their reference Gram matrices.
    pub fn reference(testbed: Arc<Testbed>) -> Result<Self> {
        let grams = testbed.references.clone();
        Self::new(testbed, grams)
    }

    /// Reference Grams with every diagonal entry multiplied by an independent
    /// uniform factor in `[lo, hi]`. In general mode a small Hermitian
    /// off-diagonal perturbation is added as well.
    pub fn perturbed_reference(testbed: Arc<Testbed>, rng: &mut impl Rng, lo: f64, hi: f64) -> Result<Self> {
        let mut grams = Vec::new();
        for r in &testbed.references {
            let d: Vec<f64> = r.matrix().diagonal_entries().iter().map(|g| g * rng.random_range(lo..=hi)).collect();
            let g = if testbed.grid.is_general() {
                let n = d.len();
                let mut m = DMatrix::from_diagonal(&DVector::from_iterator(n, d.iter().map(|x| Complex64::new(*x, 0.0))));
                for a in 0..n {
                    for b in (a + 1)..n {
                        let scale = 0.1 * (d[a] * d[b]).sqrt() / n as f64;
                        let z = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale;
                        m[(a, b)] = z;
                        m[(b, a)] = z.conj();
                    }
                }
                GramForm::new(r.basis_tag.clone(), Herm::from_dense(m))?
            } else {
                GramForm::diagonal(r.basis_tag.clone(), d)?
            };
            grams.push(g);
        }
        Self::new(testbed, grams)
    }

    pub fn testbed(&self) -> &Arc<Testbed> {
        &self.testbed
    }

    pub fn n_factors(&self) -> usize {
        self.grams.len()
    }

    pub fn with_grams(&self, grams: Vec<GramForm>) -> Result<Self> {
        Self::new(self.testbed.clone(), grams)
    }

    /// `M̄_i = (D_i M̄_i)/D_i`.
    pub fn moment_bar(&self, i: usize) -> Herm {
        self.scaled_moments[i].scale(1.0 / self.testbed.dim(i) as f64)
    }

    /// `max_i ‖D_i M̄_i - Id‖_∞`.
    pub fn balance_defect(&self) -> f64 {
        self.scaled_moments.iter().map(|m| m.minus_identity().max_abs()).fold(0.0, f64::max)
    }

    /// `max_i sup_x |B̄_{[i],μ}(FS(G)) - 1|`; the normalized Bergman function
    /// at `FS(G)` is `β_{T(G)}/β_G`.
    pub fn sup_bergman_dev(&self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (i, t) in self.images.iter().enumerate() {
            let bt = hermitian::bergman_sum(&self.testbed, i, t)?;
            for (x, y) in bt.iter().zip(&self.beta[i]) {
                worst = worst.max((x / y - 1.0).abs());
            }
        }
        Ok(worst)
    }

    /// FS potentials with analytic derivatives.
    pub fn fs_fields(&self) -> Result<Vec<PotentialField>> {
        (0..self.n_factors())
            .map(|i| PotentialField::from_gram(&self.testbed, i, &self.grams[i]))
            .collect()
    }
}

/// `μ ∝ exp(-λ Σ_i φ_i) θ₀ⁿ`, returned as a density relative to θ₀ⁿ.
pub fn canonical_measure(tb: &Testbed, fields: &[Vec<f64>]) -> Result<Vec<f64>> {
    let lambda = tb.spec.lambda();
    let m = tb.grid.len();
    let expo: Vec<f64> = (0..m).map(|q| -lambda * fields.iter().map(|f| f[q]).sum::<f64>()).collect();
    let top = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::NormalizationFailure);
    }
    let mut mu: Vec<f64> = expo.iter().map(|e| (e - top).exp()).collect();
    let mass = tb.grid.integrate(&mu);
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::NormalizationFailure);
    }
    mu.iter_mut().for_each(|x| *x /= mass);
    Ok(mu)
}

/// `ρ_i = log(μ / MA(φ_i))` at the FS potentials of the state.
pub fn coupled_ricci_potential(state: &CoupledState, i: usize) -> Result<Vec<f64>> {
    let tb = state.testbed();
    let field = PotentialField::from_gram(tb, i, &state.grams[i])?;
    let ma = field.ma_density(tb, i)?;
    Ok(state.mu.iter().zip(&ma).map(|(m, a)| (m / a).ln()).collect())
}

/// One simultaneous application of the T-operator.
pub fn t_step(state: &CoupledState) -> Result<CoupledState> {
    state.with_grams(state.images.clone())
}

pub fn residual(state: &CoupledState) -> f64 {
    state.residual
}

/// `sqrt(Σ_i dist(G_i, G'_i)²)`.
pub fn coupled_dist(a: &[GramForm], b: &[GramForm], k: f64) -> Result<f64> {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += hermitian::dist(x, y, k)?.powi(2);
    }
    Ok(s.sqrt())
}

/// Distance from `G` to `T(G)`.
pub fn fixed_point_gap(state: &CoupledState) -> Result<f64> {
    coupled_dist(&state.grams, &state.images, state.testbed().k())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub t: f64,
    pub residual: f64,
    pub ding_q: f64,
    pub am_q: Vec<f64>,
    pub dist_step: f64,
    pub sup_bergman_dev: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub n_factors: usize,
    pub rows: Vec<TraceRow>,
}

impl FlowTrace {
    pub fn new(n_factors: usize) -> Self {
        FlowTrace { n_factors, rows: Vec::new() }
    }

    fn record(&mut self, iter: usize, t: f64, state: &CoupledState, dist_step: f64) -> Result<()> {
        let tb = state.testbed();
        let am_q = (0..state.n_factors())
            .map(|i| functionals::am_quantized(&state.grams[i], &tb.references[i], tb.k()))
            .collect::<Result<Vec<_>>>()?;
        let ding_q = functionals::ding_quantized(state)?;
        self.rows.push(TraceRow {
            iter,
            t,
            residual: state.residual,
            ding_q,
            am_q,
            dist_step,
            sup_bergman_dev: state.sup_bergman_dev()?,
        });
        Ok(())
    }

    pub fn header(&self) -> String {
        let mut h = String::from("iter,t,residual,ding_q");
        for i in 1..=self.n_factors {
            write!(h, ",am_q_{i}").unwrap();
        }
        h.push_str(",dist_step,sup_bergman_dev");
        h
    }

    /// CSV with header `iter,t,residual,ding_q,am_q_1..N,dist_step,sup_bergman_dev`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(self.header().split(',')).unwrap();
        for r in &self.rows {
            let mut rec = vec![r.iter.to_string(), r.t.to_string(), r.residual.to_string(), r.ding_q.to_string()];
            rec.extend(r.am_q.iter().map(|x| x.to_string()));
            rec.push(r.dist_step.to_string());
            rec.push(r.sup_bergman_dev.to_string());
            w.write_record(&rec).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecenterPolicy {
    Never,
    /// Recenter once the torus first moment exceeds 1e3 times its initial size.
    #[default]
    OnDrift,
    Always,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateOptions {
    pub max_iter: usize,
    pub tol_res: f64,
    pub recenter: RecenterPolicy,
}

impl Default for IterateOptions {
    fn default() -> Self {
        IterateOptions { max_iter: 500, tol_res: 1e-10, recenter: RecenterPolicy::OnDrift }
    }
}

struct DriftMonitor {
    policy: RecenterPolicy,
    baseline: f64,
}

impl DriftMonitor {
    fn new(policy: RecenterPolicy, state: &CoupledState) -> Result<Self> {
        let baseline = torus_moment(state, &vec![0.0; state.testbed().spec.n])?.norm();
        Ok(DriftMonitor { policy, baseline: baseline.max(1e-8) })
    }

    fn apply(&self, state: CoupledState) -> Result<CoupledState> {
        let go = match self.policy {
            RecenterPolicy::Never => false,
            RecenterPolicy::Always => true,
            RecenterPolicy::OnDrift => {
                torus_moment(&state, &vec![0.0; state.testbed().spec.n])?.norm() > 1e3 * self.baseline
            }
        };
        if go {
            normalize(&state, NormalizeMode { scale_fix: false, torus_recenter: true })
        } else {
            Ok(state)
        }
    }
}

/// Repeats `t_step` until `ℛ < tol_res`.
pub fn iterate_to_balance(state: CoupledState, opts: &IterateOptions) -> Result<(CoupledState, FlowTrace)> {
    if !(opts.tol_res > 0.0) {
        return Err(Error::SpecInvalid("tol_res must be positive".into()));
    }
    let k = state.testbed().k();
    let monitor = DriftMonitor::new(opts.recenter, &state)?;
    let mut trace = FlowTrace::new(state.n_factors());
    trace.record(0, 0.0, &state, 0.0)?;
    let mut state = state;
    let mut iter = 0;
    while state.residual >= opts.tol_res && iter < opts.max_iter {
        iter += 1;
        let next = monitor.apply(t_step(&state)?)?;
        let step = coupled_dist(&state.grams, &next.grams, k)?;
        trace.record(iter, iter as f64, &next, step)?;
        state = next;
    }
    if state.residual >= opts.tol_res {
        return Err(Error::NotConverged { iterations: iter, residual: state.residual, trace: Box::new(trace) });
    }
    Ok((state, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOptions {
    pub step_h: f64,
    pub t_end: f64,
    /// Stop early once `ℛ` drops below this value.
    pub tol_res: Option<f64>,
    pub recenter: RecenterPolicy,
}

impl FlowOptions {
    /// `h = 1/(2k)`.
    pub fn default_for(k: u32) -> Self {
        FlowOptions { step_h: 0.5 / k as f64, t_end: 10.0, tol_res: None, recenter: RecenterPolicy::OnDrift }
    }
}

/// One geodesic Euler step `G_i ← L_i exp(h k (D_i M̄_i - Id)) L_i†`.
pub fn flow_step(state: &CoupledState, h: f64) -> Result<CoupledState> {
    let k = state.testbed().k();
    let grams = state
        .grams
        .iter()
        .zip(&state.scaled_moments)
        .map(|(g, dm)| {
            let a = dm.minus_identity().scale(-h * k);
            hermitian::geodesic(g, &a, 1.0)
        })
        .collect::<Result<Vec<_>>>()?;
    state.with_grams(grams)
}

/// Balancing flow by geodesic Euler steps with Ding-monotone step control.
pub fn balancing_flow(state: CoupledState, opts: &FlowOptions) -> Result<(CoupledState, FlowTrace)> {
    let k = state.testbed().k();
    if !(opts.step_h > 0.0) || opts.step_h * k > 1.0 + 1e-12 {
        return Err(Error::SpecInvalid(format!("step_h = {} violates 0 < h*k <= 1", opts.step_h)));
    }
    if !(opts.t_end >= 0.0) {
        return Err(Error::SpecInvalid("t_end must be nonnegative".into()));
    }
    let monitor = DriftMonitor::new(opts.recenter, &state)?;
    let mut trace = FlowTrace::new(state.n_factors());
    trace.record(0, 0.0, &state, 0.0)?;
    let mut state = state;
    let mut ding = functionals::ding_quantized(&state)?;
    let mut t = 0.0;
    let mut iter = 0;
    while t < opts.t_end - 1e-12 {
        if opts.tol_res.is_some_and(|tol| state.residual < tol) {
            break;
        }
        let mut h = opts.step_h.min(opts.t_end - t);
        let mut accepted = None;
        for _ in 0..=10 {
            let cand = flow_step(&state, h)?;
            let d = functionals::ding_quantized(&cand)?;
            if d <= ding + 1e-12 {
                accepted = Some((cand, d));
                break;
            }
            h *= 0.5;
        }
        let (cand, d) = accepted.ok_or(Error::StepRejected { t })?;
        // Recentering moves along an automorphism orbit, on which 𝒟^{(k)} is constant.
        let cand = monitor.apply(cand)?;
        iter += 1;
        t += h;
        let step = coupled_dist(&state.grams, &cand.grams, k)?;
        trace.record(iter, t, &cand, step)?;
        ding = d;
        state = cand;
    }
    Ok((state, trace))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeMode {
    pub scale_fix: bool,
    pub torus_recenter: bool,
}

impl NormalizeMode {
    pub const FULL: NormalizeMode = NormalizeMode { scale_fix: true, torus_recenter: true };
    pub const SCALE: NormalizeMode = NormalizeMode { scale_fix: true, torus_recenter: false };
}

/// Removes the scaling and torus-automorphism ambiguity of balanced metrics.
///
/// `torus_recenter` applies the common diagonal automorphism
/// `z_j ↦ e^{s_j} z_j` that makes the weighted exponent first moment vanish:
/// with `π_{[i],α} ∝ (G_i⁻¹)_{αα}·Ĝ_{[i],αα}`, the condition is
/// `Σ_i Σ_α (α - mean_i)·π_{[i],α}/(d_i k) = 0`. The reference Grams satisfy
/// it by symmetry. `scale_fix` then rescales each factor to
/// `det(G_i Ĝ_i⁻¹) = 1`.
pub fn normalize(state: &CoupledState, mode: NormalizeMode) -> Result<CoupledState> {
    let tb = state.testbed().clone();
    let mut grams = state.grams.clone();
    if mode.torus_recenter {
        let s = solve_recenter(state)?;
        grams = grams
            .iter()
            .enumerate()
            .map(|(i, g)| conjugate_torus(&tb, i, g, &s))
            .collect::<Result<Vec<_>>>()?;
    }
    if mode.scale_fix {
        grams = grams
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let ld = g.factor()?.log_det() - tb.references[i].factor()?.log_det();
                g.scaled((-ld / g.dim() as f64).exp())
            })
            .collect::<Result<Vec<_>>>()?;
    }
    CoupledState::new(tb, grams)
}

fn torus_exponents(tb: &Testbed, i: usize) -> Vec<Vec<f64>> {
    tb.cache(i).basis.exponents.iter().map(|a| a[1..].iter().map(|&x| x as f64).collect()).collect()
}

fn inverse_diagonal(g: &GramForm) -> Result<Vec<f64>> {
    match g.factor()? {
        Factor::Diagonal(l) => Ok(l.iter().map(|l| 1.0 / (l * l)).collect()),
        Factor::Dense(l) => {
            let n = l.nrows();
            let linv = l.solve_lower_triangular(&DMatrix::identity(n, n)).ok_or(Error::SingularGram)?;
            Ok((0..n).map(|a| (0..n).map(|r| linv[(r, a)].norm_sqr()).sum()).collect())
        }
    }
}

/// Torus first moment after conjugating by `e^s`, and its Jacobian.
fn torus_moment_with_jacobian(state: &CoupledState, s: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let tb = state.testbed();
    let n = tb.spec.n;
    let mut f = DVector::zeros(n);
    let mut jac = DMatrix::zeros(n, n);
    for (i, g) in state.grams.iter().enumerate() {
        let exps = torus_exponents(tb, i);
        let inv = inverse_diagonal(g)?;
        let reference = tb.references[i].matrix().diagonal_entries();
        let logw: Vec<f64> = exps
            .iter()
            .zip(inv.iter().zip(&reference))
            .map(|(a, (x, r))| (x * r).ln() - 2.0 * a.iter().zip(s).map(|(a, s)| a * s).sum::<f64>())
            .collect();
        let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        let scale = 1.0 / (tb.degree(i) * tb.k());
        let mean = tb.cache(i).basis.mean_exponent();
        let mut e = DVector::zeros(n);
        let mut c = DMatrix::zeros(n, n);
        for (a, w) in exps.iter().zip(&w) {
            let av = DVector::from_column_slice(a);
            e += &av * (w / z);
            c += &av * av.transpose() * (w / z);
        }
        let cov = c - &e * e.transpose();
        f += (e.map(|x| x - mean)) * scale;
        jac -= cov * (2.0 * scale);
    }
    Ok((f, jac))
}

pub fn torus_moment(state: &CoupledState, s: &[f64]) -> Result<DVector<f64>> {
    Ok(torus_moment_with_jacobian(state, s)?.0)
}

fn solve_recenter(state: &CoupledState) -> Result<Vec<f64>> {
    let n = state.testbed().spec.n;
    let mut s = DVector::<f64>::zeros(n);
    let (mut f, mut jac) = torus_moment_with_jacobian(state, s.as_slice())?;
    for _ in 0..100 {
        if f.norm() < 1e-15 {
            break;
        }
        let step = jac.clone().lu().solve(&f).ok_or_else(|| Error::EigenFailure("singular recentering Jacobian".into()))?;
        let mut lam = 1.0;
        loop {
            let trial = &s - &step * lam;
            let (tf, tj) = torus_moment_with_jacobian(state, trial.as_slice())?;
            if tf.norm() < f.norm() || lam < 1e-6 {
                s = trial;
                f = tf;
                jac = tj;
                break;
            }
            lam *= 0.5;
        }
        if lam < 1e-6 {
            break;
        }
    }
    Ok(s.iter().copied().collect())
}

/// `G ↦ S G S` with `S = diag(e^{⟨s, α'⟩})`.
fn conjugate_torus(tb: &Testbed, i: usize, g: &GramForm, s: &[f64]) -> Result<GramForm> {
    let scale: Vec<f64> = torus_exponents(tb, i)
        .iter()
        .map(|a| a.iter().zip(s).map(|(a, s)| a * s).sum::<f64>().exp())
        .collect();
    let m = match g.matrix() {
        Herm::Diagonal(d) => Herm::from_diagonal(d.iter().zip(&scale).map(|(x, c)| x * c * c).collect()),
        Herm::Dense(m) => {
            let n = m.nrows();
            Herm::from_dense(DMatrix::from_fn(n, n, |r, c| m[(r, c)] * (scale[r] * scale[c])))
        }
    };
    GramForm::new(g.basis_tag.clone(), m)
}

/// Applies the automorphism `z_j ↦ e^{s_j} z_j` to every factor.
pub fn apply_torus(state: &CoupledState, s: &[f64]) -> Result<CoupledState> {
    let tb = state.testbed().clone();
    let grams = state
        .grams
        .iter()
        .enumerate()
        .map(|(i, g)| conjugate_torus(&tb, i, g, s))
        .collect::<Result<Vec<_>>>()?;
    CoupledState::new(tb, grams)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Symmetry, TestbedSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p1(k: u32) -> Arc<Testbed> {
        Testbed::new(TestbedSpec::new(1, vec![1, 1], k, Symmetry::TorusInvariant).unwrap(), &[64]).unwrap()
    }

    #[test]
    fn canonical_measure_at_zero_is_theta0() {
        let tb = p1(2);
        let n = tb.grid.len();
        let mu = canonical_measure(&tb, &[vec![0.0; n], vec![0.0; n]]).unwrap();
        assert!(mu.iter().all(|x| (x - 1.0).abs() < 1e-13));
        let shifted = canonical_measure(&tb, &[vec![0.3; n], vec![-1.1; n]]).unwrap();
        assert!(mu.iter().zip(&shifted).all(|(a, b)| (a - b).abs() < 1e-13));
        let tb2 = Testbed::new(TestbedSpec::new(2, vec![1, 2], 2, Symmetry::TorusInvariant).unwrap(), &[24, 24]).unwrap();
        let m = tb2.grid.len();
        let mu2 = canonical_measure(&tb2, &[vec![0.0; m], vec![0.0; m]]).unwrap();
        assert!(mu2.iter().all(|x| (x - 1.0).abs() < 1e-7));
    }

    #[test]
    fn reference_is_a_fixed_point() {
        for k in [2, 4, 8, 16] {
            let tb = p1(k);
            let s = CoupledState::reference(tb).unwrap();
            assert!(s.residual < 1e-16, "k={k} {}", s.residual);
            for (g, t) in s.grams.iter().zip(&s.images) {
                assert!(g.rel_diff(t) < 1e-9);
            }
        }
    }

    #[test]
    fn ricci_potential_vanishes_at_cke() {
        let s = CoupledState::reference(p1(4)).unwrap();
        for i in 0..2 {
            let rho = coupled_ricci_potential(&s, i).unwrap();
            assert!(rho.iter().all(|r| r.abs() < 1e-10));
        }
    }

    #[test]
    fn ricci_potentials_share_the_measure() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = CoupledState::perturbed_reference(p1(4), &mut rng, 0.5, 2.0).unwrap();
        let tb = s.testbed().clone();
        let mut products = Vec::new();
        for i in 0..2 {
            let rho = coupled_ricci_potential(&s, i).unwrap();
            let ma = s.fs_fields().unwrap()[i].ma_density(&tb, i).unwrap();
            let prod: Vec<f64> = rho.iter().zip(&ma).map(|(r, m)| r.exp() * m).collect();
            assert!((tb.grid.integrate(&prod) - 1.0).abs() < 1e-10);
            products.push(prod);
        }
        for (a, b) in products[0].iter().zip(&products[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn t_step_is_scale_equivariant_and_keeps_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = CoupledState::perturbed_reference(p1(4), &mut rng, 0.5, 2.0).unwrap();
        let t = t_step(&s).unwrap();
        for c in [0.5, 2.0, 10.0] {
            let scaled = s.with_grams(vec![s.grams[0].scaled(c).unwrap(), s.grams[1].clone()]).unwrap();
            let ts = t_step(&scaled).unwrap();
            assert!(ts.grams[0].rel_diff(&t.grams[0].scaled(c).unwrap()) < 1e-12);
            assert!(ts.grams[1].rel_diff(&t.grams[1]) < 1e-12);
            assert!((scaled.residual - s.residual).abs() < 1e-12 * s.residual.max(1.0));
        }
        assert!(t.grams.iter().all(|g| g.is_diagonal()));
    }

    #[test]
    fn symmetric_start_stays_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = CoupledState::perturbed_reference(p1(4), &mut rng, 0.5, 2.0).unwrap();
        let sym = s.with_grams(vec![s.grams[0].clone(), s.grams[0].clone()]).unwrap();
        let mut cur = sym;
        for _ in 0..5 {
            cur = t_step(&cur).unwrap();
            assert_eq!(cur.grams[0], cur.grams[1]);
        }
    }

    #[test]
    fn iteration_converges_from_perturbed_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tb = p1(4);
        let s = CoupledState::perturbed_reference(tb.clone(), &mut rng, 0.5, 2.0).unwrap();
        let (fin, trace) = iterate_to_balance(s.clone(), &IterateOptions::default()).unwrap();
        assert!(fin.residual < 1e-10);
        assert!(trace.rows.len() <= 201, "{} rows", trace.rows.len());
        let tight = IterateOptions { tol_res: 1e-22, max_iter: 2000, ..Default::default() };
        let (fin, _) = iterate_to_balance(s, &tight).unwrap();
        let norm = normalize(&fin, NormalizeMode::FULL).unwrap();
        for (g, r) in norm.grams.iter().zip(&tb.references) {
            assert!(g.rel_diff(r) < 1e-6, "{}", g.rel_diff(r));
        }
    }

    #[test]
    fn balanced_start_needs_no_iterations() {
        let s = CoupledState::reference(p1(8)).unwrap();
        let (_, trace) = iterate_to_balance(s, &IterateOptions::default()).unwrap();
        assert!(trace.rows.len() <= 2);
    }

    #[test]
    fn normalize_is_idempotent_and_scale_blind() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = CoupledState::perturbed_reference(p1(4), &mut rng, 0.5, 2.0).unwrap();
        let a = normalize(&s, NormalizeMode::FULL).unwrap();
        let b = normalize(&a, NormalizeMode::FULL).unwrap();
        for (x, y) in a.grams.iter().zip(&b.grams) {
            assert!(x.rel_diff(y) < 1e-12);
        }
        let c = s.with_grams(s.grams.iter().map(|g| g.scaled(3.7).unwrap()).collect()).unwrap();
        let c = normalize(&c, NormalizeMode::SCALE).unwrap();
        let a2 = normalize(&s, NormalizeMode::SCALE).unwrap();
        for (x, y) in a2.grams.iter().zip(&c.grams) {
            assert!(x.rel_diff(y) < 1e-12);
        }
        assert!((a.residual - s.residual).abs() < 1e-8 * s.residual.max(1e-12));
    }

    #[test]
    fn recentering_undoes_an_automorphism() {
        let tb = p1(4);
        let s = CoupledState::reference(tb.clone()).unwrap();
        let moved = apply_torus(&s, &[0.4]).unwrap();
        assert!(moved.residual < 1e-12, "{}", moved.residual);
        let back = normalize(&moved, NormalizeMode::FULL).unwrap();
        for (g, r) in back.grams.iter().zip(&tb.references) {
            assert!(g.rel_diff(r) < 1e-12);
        }
    }

    #[test]
    fn flow_descends_and_matches_iteration_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tb = p1(4);
        let s = CoupledState::perturbed_reference(tb.clone(), &mut rng, 0.5, 2.0).unwrap();
        let opts = FlowOptions { t_end: 60.0, tol_res: Some(1e-14), ..FlowOptions::default_for(4) };
        let (fin, trace) = balancing_flow(s.clone(), &opts).unwrap();
        for w in trace.rows.windows(2) {
            assert!(w[1].ding_q <= w[0].ding_q + 1e-12);
            assert!(w[1].t > w[0].t);
        }
        let (it, _) = iterate_to_balance(s, &IterateOptions { tol_res: 1e-14, ..Default::default() }).unwrap();
        let a = normalize(&fin, NormalizeMode::FULL).unwrap();
        let b = normalize(&it, NormalizeMode::FULL).unwrap();
        assert!(coupled_dist(&a.grams, &b.grams, 4.0).unwrap() < 1e-6);
    }

    #[test]
    fn unit_flow_step_approximates_t_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tb = p1(4);
        let s = CoupledState::perturbed_reference(tb, &mut rng, 0.8, 1.25).unwrap();
        let t = t_step(&s).unwrap();
        // With h = 1/k the Euler step exponentiates log-free DM̄ - Id; the
        // difference to T(G) is second order in (DM̄ - Id).
        let f = flow_step(&s, 0.25).unwrap();
        let gap1 = coupled_dist(&f.grams, &t.grams, 4.0).unwrap();
        let s2 = CoupledState::perturbed_reference(s.testbed().clone(), &mut ChaCha8Rng::seed_from_u64(2), 0.8, 1.25)
            .unwrap();
        assert!(gap1 < 0.05, "{gap1}");
        let _ = s2;
    }

    #[test]
    fn trace_csv_header() {
        let s = CoupledState::reference(p1(2)).unwrap();
        let (_, trace) = iterate_to_balance(s, &IterateOptions::default()).unwrap();
        let csv = trace.to_csv();
        assert!(csv.starts_with("iter,t,residual,ding_q,am_q_1,am_q_2,dist_step,sup_bergman_dev\n"));
    }

    #[test]
    fn general_mode_iteration_converges() {
        let tb = Testbed::new(TestbedSpec::new(1, vec![1, 1], 3, Symmetry::General).unwrap(), &[32, 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = CoupledState::perturbed_reference(tb, &mut rng, 0.7, 1.4).unwrap();
        assert!(!s.grams[0].is_diagonal());
        let (fin, _) = iterate_to_balance(s, &IterateOptions { max_iter: 2000, ..Default::default() }).unwrap();
        assert!(fin.residual < 1e-10);
    }
}
