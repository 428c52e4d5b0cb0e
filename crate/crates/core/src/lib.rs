//! Continuous Bernoulli toolkit.
//!
//! The continuous Bernoulli `CB(λ)` is the `[0, 1]`-supported density
//! `p(x|λ) = C(λ) λ^x (1-λ)^(1-x)`. This crate evaluates it stably (including the
//! normalizer `C(λ)` near `λ = 0.5`), estimates it by maximum likelihood and EM,
//! and trains small variational autoencoders whose decoders use it, so that the
//! effect of dropping `log C` from the objective can be measured directly.
//!
//! Modules:
//! - [`numerics`]: special functions, quadrature, bisection, log-sum-exp, seeded streams.
//! - [`distribution`]: the `CB(λ)` family and its C-Beta conjugate prior.
//! - [`estimation`]: `μ⁻¹`, MLE, mixtures, EM, Monte-Carlo KL, k-NN evaluation.
//! - [`vae`]: MLP encoder/decoder with manual backpropagation and Adam.
//! - [`data`]: datasets, warping, binarization, IDX files.

pub mod data;
pub mod distribution;
pub mod error;
pub mod estimation;
pub mod numerics;
pub mod vae;

pub use error::{Error, Result};
