//! Learned mirror descent toolkit.
//!
//! Mirror descent replaces the Euclidean geometry of gradient descent with the
//! geometry induced by a strongly convex potential ψ: iterates are pushed
//! through the mirror map ∇ψ into the dual space, stepped against the
//! gradient, and pulled back through the exact inverse ∇ψ*. This crate
//! implements that machinery end to end:
//!
//! - [`mirror_maps`] — potentials with exact forward/inverse gradient pairs
//!   (euclidean, diagonal quadratic, monotonic elementwise spline), Bregman
//!   divergences, and the prox-mapping.
//! - [`problems`] — objective families: TV denoising/inpainting, SVM hinge,
//!   MLP/CNN cross-entropy, synthetic quadratics, with deterministic and
//!   stochastic gradient oracles.
//! - [`optimizers`] — MD in primal and dual form, accelerated (LAMD) and
//!   stochastic (LSMD/LASMD) variants, minibatched LAMD*, classical baselines,
//!   and learned step-size schedules with extension rules.
//! - [`tape`] — a small reverse-mode differentiation tape used to
//!   differentiate through unrolled optimizer iterations.
//! - [`meta_training`] — unrolled-loss meta-training of map parameters and
//!   step-sizes over problem families, with a finite-difference oracle.
//! - [`equivariance`] — permutation-symmetry tying schemas for network
//!   parameters and numerical equivariance checks.
//! - [`diagnostics`] — energy functions, convergence-bound evaluation, empirical
//!   rate fitting, reference minima, and baseline grid search.
//! - [`cli`] — the `mirror-opt` command-line harness.

pub mod cli;
pub mod diagnostics;
pub mod equivariance;
pub mod error;
pub mod io;
pub mod meta_training;
pub mod mirror_maps;
pub mod optimizers;
pub mod problems;
pub mod tape;

pub use error::Error;
