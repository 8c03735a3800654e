//! Experiment configuration for the batch runner.
//!
//! A config is a single JSON object. Every section except `testbed` has
//! defaults, and any leaf can be replaced through a dotted path such as
//! `solver.tol_res=1e-12` or `testbed.degrees.1=2`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::continuum::{shifted_legendre, ImfOptions, PoissonOptions};
use crate::coupled_solver::{FlowOptions, IterateOptions, NormalizeMode, RecenterPolicy};
use crate::error::{Error, Result};
use crate::geometry::{Symmetry, TestbedSpec};
use crate::obstructions::LatticeActionSpec;

/// Largest config document accepted by [`ExperimentConfig::from_json`].
pub const MAX_CONFIG_BYTES: usize = 1 << 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    #[default]
    TIterate,
    Flow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizeFlags {
    pub scale_fix: bool,
    pub torus_recenter: bool,
}

impl Default for NormalizeFlags {
    fn default() -> Self {
        NormalizeFlags { scale_fix: true, torus_recenter: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub mode: SolverMode,
    pub tol_res: f64,
    pub max_iter: usize,
    /// Flow step; `null` means `0.5/k`.
    pub step_h: Option<f64>,
    pub t_end: f64,
    pub normalize: NormalizeFlags,
    pub recenter: RecenterPolicy,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mode: SolverMode::TIterate,
            tol_res: 1e-10,
            max_iter: 500,
            step_h: None,
            t_end: 10.0,
            normalize: NormalizeFlags::default(),
            recenter: RecenterPolicy::OnDrift,
        }
    }
}

/// Initial Gram matrices for `balance` and `flow`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StartConfig {
    /// Multiply each reference diagonal entry by a uniform factor in `[lo, hi]`.
    pub perturb: bool,
    pub lo: f64,
    pub hi: f64,
    /// Optional path to a JSON array of Gram matrices, one per factor.
    pub grams_file: Option<String>,
}

impl Default for StartConfig {
    fn default() -> Self {
        StartConfig { perturb: false, lo: 0.5, hi: 2.0, grams_file: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BergmanConfig {
    pub k_list: Vec<u32>,
    /// Gauss-Legendre nodes of the ℙ¹ testbed used for Hilb.
    pub gl_nodes: usize,
    /// Legendre coefficients of `ψ_i`; the potential is `ψ/k`.
    pub psi: Vec<Vec<f64>>,
}

impl Default for BergmanConfig {
    fn default() -> Self {
        BergmanConfig { k_list: vec![4, 8, 16, 32], gl_nodes: 128, psi: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuumConfig {
    /// Radial grid size.
    pub n: usize,
    /// Legendre coefficients of the potentials at which `𝒫` is assembled.
    pub phi: Vec<Vec<f64>>,
}

impl Default for ContinuumConfig {
    fn default() -> Self {
        ContinuumConfig { n: 256, phi: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CflowConfig {
    pub dt: Option<f64>,
    pub t_end: f64,
    pub record_every: f64,
    /// Legendre coefficients of the initial potentials.
    pub phi0: Vec<Vec<f64>>,
}

impl Default for CflowConfig {
    fn default() -> Self {
        CflowConfig { dt: None, t_end: 10.0, record_every: 0.1, phi0: vec![vec![0.0, 0.0, 0.05], vec![0.0, 0.0, 0.0, 0.05]] }
    }
}

impl CflowConfig {
    pub fn options(&self) -> ImfOptions {
        ImfOptions { dt: self.dt, t_end: self.t_end, record_every: self.record_every }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObstructionConfig {
    pub action: LatticeActionSpec,
    /// Values of `m` sampled for the polynomial fits; `null` picks `1..=n+4`.
    pub m_samples: Option<Vec<u32>>,
}

impl Default for ObstructionConfig {
    fn default() -> Self {
        ObstructionConfig { action: LatticeActionSpec { weights: vec![0, 1], lift_shift: Vec::new() }, m_samples: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlmostConfig {
    pub k_extract: Vec<u32>,
    pub k_eval: Vec<u32>,
    pub gl_nodes: usize,
    /// Legendre coefficients of `ψ_i`; the base potential is `ψ/k`.
    pub psi: Vec<Vec<f64>>,
    pub kernel_eig: f64,
    pub kernel_component: f64,
}

impl Default for AlmostConfig {
    fn default() -> Self {
        let p = PoissonOptions::almost();
        AlmostConfig {
            k_extract: vec![16, 32, 64],
            k_eval: vec![8, 16, 32],
            gl_nodes: 160,
            psi: vec![vec![0.0, 0.6, 0.5], vec![0.0, 0.6, 0.0, 0.3]],
            kernel_eig: p.kernel_eig,
            kernel_component: p.kernel_component,
        }
    }
}

impl AlmostConfig {
    pub fn poisson(&self) -> PoissonOptions {
        PoissonOptions { kernel_eig: self.kernel_eig, kernel_component: self.kernel_component }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub testbed: TestbedSpec,
    /// Quadrature node counts; empty picks [`default_resolution`].
    #[serde(default)]
    pub resolution: Vec<usize>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub start: StartConfig,
    /// Seed of the ChaCha8 generator used for perturbed starts.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_outputs")]
    pub outputs: String,
    #[serde(default)]
    pub bergman: BergmanConfig,
    #[serde(default)]
    pub continuum: ContinuumConfig,
    #[serde(default)]
    pub cflow: CflowConfig,
    #[serde(default)]
    pub obstruction: ObstructionConfig,
    #[serde(default)]
    pub almost: AlmostConfig,
}

fn default_outputs() -> String {
    "out".into()
}

/// Node counts that resolve degree `d k` sections on the given testbed.
pub fn default_resolution(spec: &TestbedSpec) -> Vec<usize> {
    let top = spec.degrees.iter().copied().max().unwrap_or(1) as usize * spec.k as usize;
    let radial = (2 * top + 8).clamp(64, 4096);
    match (spec.n, spec.symmetry) {
        (1, Symmetry::TorusInvariant) => vec![radial],
        (1, Symmetry::General) => vec![radial, (2 * top + 8).clamp(16, 4096)],
        _ => vec![(top + 8).clamp(24, 4096); 2],
    }
}

fn legendre_series(coeffs: &[f64], u: f64) -> f64 {
    coeffs.iter().enumerate().map(|(l, c)| if *c == 0.0 { 0.0 } else { c * shifted_legendre(l, u) }).sum()
}

/// Evaluates factor `i` of a per-factor Legendre series; missing factors are zero.
pub fn legendre_field(series: &[Vec<f64>], i: usize, u: f64) -> f64 {
    series.get(i).map_or(0.0, |c| legendre_series(c, u))
}

impl ExperimentConfig {
    /// The ℙ¹ (1,1) testbed at `k` with every other section defaulted.
    pub fn p1(k: u32) -> Self {
        ExperimentConfig {
            testbed: TestbedSpec { n: 1, degrees: vec![1, 1], k, lambda: 1, symmetry: Symmetry::TorusInvariant },
            resolution: Vec::new(),
            solver: SolverConfig::default(),
            start: StartConfig::default(),
            seed: 0,
            outputs: default_outputs(),
            bergman: BergmanConfig::default(),
            continuum: ContinuumConfig::default(),
            cflow: CflowConfig::default(),
            obstruction: ObstructionConfig::default(),
            almost: AlmostConfig::default(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        if s.len() > MAX_CONFIG_BYTES {
            return Err(Error::Parse(format!("config exceeds {MAX_CONFIG_BYTES} bytes")));
        }
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `path=value` overrides in order and revalidates.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut v = serde_json::to_value(self).map_err(|e| Error::Parse(e.to_string()))?;
        for o in overrides {
            let (path, value) = parse_override(o.as_ref())?;
            set_path(&mut v, &path, value)?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolution(&self) -> Vec<usize> {
        if self.resolution.is_empty() {
            default_resolution(&self.testbed)
        } else {
            self.resolution.clone()
        }
    }

    pub fn iterate_options(&self) -> IterateOptions {
        IterateOptions { max_iter: self.solver.max_iter, tol_res: self.solver.tol_res, recenter: self.solver.recenter }
    }

    pub fn flow_options(&self) -> FlowOptions {
        let mut o = FlowOptions::default_for(self.testbed.k);
        if let Some(h) = self.solver.step_h {
            o.step_h = h;
        }
        o.t_end = self.solver.t_end;
        o.tol_res = Some(self.solver.tol_res);
        o.recenter = self.solver.recenter;
        o
    }

    pub fn normalize_mode(&self) -> NormalizeMode {
        NormalizeMode { scale_fix: self.solver.normalize.scale_fix, torus_recenter: self.solver.normalize.torus_recenter }
    }

    pub fn validate(&self) -> Result<()> {
        self.testbed.validate()?;
        let bad = |m: &str| Err(Error::SpecInvalid(m.into()));
        let s = &self.solver;
        if !(s.tol_res > 0.0 && s.tol_res.is_finite()) {
            return bad("solver.tol_res must be positive");
        }
        if s.max_iter == 0 {
            return bad("solver.max_iter must be positive");
        }
        if let Some(h) = s.step_h {
            if !(h > 0.0 && h.is_finite()) {
                return bad("solver.step_h must be positive");
            }
        }
        if !(s.t_end > 0.0 && s.t_end.is_finite()) {
            return bad("solver.t_end must be positive");
        }
        let st = &self.start;
        if !(st.lo > 0.0 && st.lo <= st.hi && st.hi.is_finite()) {
            return bad("start.lo and start.hi must satisfy 0 < lo <= hi");
        }
        if self.outputs.is_empty() {
            return bad("outputs must be a directory path");
        }
        let finite = |series: &[Vec<f64>]| series.iter().flatten().all(|x| x.is_finite());
        let b = &self.bergman;
        if b.k_list.is_empty() || b.k_list.contains(&0) || !(8..=4096).contains(&b.gl_nodes) || !finite(&b.psi) {
            return bad("bergman needs a nonempty positive k_list, gl_nodes in 8..=4096 and finite psi");
        }
        if !(128..=4096).contains(&self.continuum.n) || !finite(&self.continuum.phi) {
            return bad("continuum.n must lie in 128..=4096");
        }
        let c = &self.cflow;
        if !(c.t_end >= 0.0 && c.t_end.is_finite() && c.record_every > 0.0) || !finite(&c.phi0) {
            return bad("cflow needs t_end >= 0, record_every > 0 and finite phi0");
        }
        let a = &self.almost;
        if a.k_extract.len() < 3 || a.k_eval.is_empty() || a.k_eval.contains(&0) || !(8..=4096).contains(&a.gl_nodes) {
            return bad("almost needs at least 3 extraction levels, positive k_eval and gl_nodes in 8..=4096");
        }
        if !(a.kernel_eig > 0.0 && a.kernel_component > 0.0) || !finite(&a.psi) {
            return bad("almost tolerances must be positive");
        }
        if let Some(m) = &self.obstruction.m_samples {
            if m.contains(&0) {
                return bad("obstruction.m_samples must be positive");
            }
        }
        Ok(())
    }
}

/// Splits `a.b.c=value`. The value is read as JSON when it parses, and as a
/// plain string otherwise.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (path, raw) = s.split_once('=').ok_or_else(|| Error::Parse(format!("override `{s}` has no `=`")))?;
    let path = path.trim();
    if path.is_empty() {
        return Err(Error::Parse("override path is empty".into()));
    }
    let segs: Vec<String> = path.split('.').map(str::to_owned).collect();
    if segs.iter().any(|p| p.is_empty()) {
        return Err(Error::Parse(format!("override path `{path}` has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((segs, value))
}

/// Replaces an existing leaf of `root`. Array elements are addressed by index.
pub fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (depth, seg) in path.iter().enumerate() {
        let here = path[..=depth].join(".");
        cur = match cur {
            Value::Object(map) => map.get_mut(seg).ok_or_else(|| Error::Parse(format!("unknown config key `{here}`")))?,
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| Error::Parse(format!("`{here}` needs an array index")))?;
                let len = items.len();
                items.get_mut(idx).ok_or_else(|| Error::Parse(format!("index {idx} out of range at `{here}` (len {len})")))?
            }
            _ => return Err(Error::Parse(format!("`{here}` descends into a scalar"))),
        };
    }
    *cur = value;
    Ok(())
}
