//! Quantization of coupled Kähler-Einstein metrics on projective testbeds.
//!
//! The crate computes balanced metrics at level `k` on ℙ¹ and ℙ² with the
//! anticanonical bundle split into `N` multiples of the hyperplane bundle,
//! tracks the energy functionals along the T-iteration and the balancing
//! flow, checks Bergman kernel asymptotics, and evaluates the algebraic
//! obstructions in exact arithmetic.
//!
//! Module map:
//! - [`geometry`]: testbeds, monomial bases, quadrature over X.
//! - [`hermitian`]: Gram matrices, Bergman sums, Hilb/FS maps, geodesics.
//! - [`potential`]: potentials with log-coordinate derivatives and Monge-Ampère densities.
//! - [`coupled_solver`]: canonical measure, T-operator, balancing flow.
//! - [`functionals`]: AM, J, L, Ding and their quantizations.
//! - [`obstructions`]: Chow weights and higher coupled Futaki invariants.
//! - [`continuum`]: the weighted Laplacian, coupled Poisson problems, inverse MA flow.
//! - [`config`]: experiment configuration and dotted-path overrides.

// NaN-rejecting guards are written as `!(x > 0.0)`; index loops mirror the formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod continuum;
pub mod coupled_solver;
pub mod error;
pub mod functionals;
pub mod geometry;
pub mod hermitian;
pub mod obstructions;
pub mod potential;
pub mod quadrature;

pub use error::{Error, Result};
