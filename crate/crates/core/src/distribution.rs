//! The continuous Bernoulli family `CB(λ)` on `[0, 1]`.
//!
//! Density `p(x|λ) = C(λ) λ^x (1−λ)^(1−x)` with normalizer
//! `C(λ) = 2·artanh(1−2λ)/(1−2λ)` (and `C(½) = 2`). Writing `a = logit(λ)`,
//! `2·artanh(1−2λ) = −a`, which is how the closed forms below are evaluated away
//! from `λ = ½`. Inside the window `|λ − ½| < τ` every quantity whose closed form
//! is a `0/0` limit is evaluated from its Taylor series in `t = 1 − 2λ`.
//!
//! The CDF is `F(x) = expm1(a·x)/expm1(a)`, an exact rewrite of
//! `(λ^x (1−λ)^(1−x) + λ − 1)/(2λ − 1)` that stays accurate as `a → 0`.

use crate::numerics::RandomStream;
use crate::{Error, Result};

/// Clamp applied to every `λ`: parameters live in `[ε, 1−ε]`.
pub const LAMBDA_EPS: f64 = 1e-6;
/// Half-width of the Taylor window around `λ = ½`.
pub const TAYLOR_WINDOW: f64 = 0.01;

const LN_2: f64 = std::f64::consts::LN_2;
// `|λ − ½| < τ` ⇔ `|t| < 2τ`.
const T_WINDOW: f64 = 2.0 * TAYLOR_WINDOW;
// Pathwise icdf derivative switches to its cumulant series below this |logit|.
const ICDF_SERIES_LOGIT: f64 = 1e-3;

fn check_unit(x: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must lie in [0, 1], got {x}")))
    }
}

fn logit(lambda: f64) -> f64 {
    lambda.ln() - (-lambda).ln_1p()
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// A validated `λ ∈ [ε, 1−ε]` together with its logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CBParam {
    lambda: f64,
    logit: f64,
}

impl CBParam {
    /// Clamps into `[ε, 1−ε]`; rejects values outside `[0, 1]` and NaN.
    pub fn new(lambda: f64) -> Result<Self> {
        check_unit(lambda, "lambda")?;
        Ok(Self::clamped(lambda))
    }

    /// Clamps any non-NaN value into `[ε, 1−ε]`.
    pub fn clamped(lambda: f64) -> Self {
        let lambda = lambda.clamp(LAMBDA_EPS, 1.0 - LAMBDA_EPS);
        Self { lambda, logit: logit(lambda) }
    }

    /// Parameter from its natural parameter (the logit), clamped like [`CBParam::new`].
    pub fn from_logit(eta: f64) -> Self {
        let lambda = sigmoid(eta);
        if (LAMBDA_EPS..=1.0 - LAMBDA_EPS).contains(&lambda) {
            Self { lambda, logit: eta }
        } else {
            Self::clamped(lambda)
        }
    }

    /// Whether a sigmoid output was moved by the clamp (its derivative is then zero).
    pub fn is_clamped_logit(eta: f64) -> bool {
        let lambda = sigmoid(eta);
        !(LAMBDA_EPS..=1.0 - LAMBDA_EPS).contains(&lambda)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn logit(&self) -> f64 {
        self.logit
    }

    fn t(&self) -> f64 {
        1.0 - 2.0 * self.lambda
    }

    /// `log C(λ)`.
    pub fn log_norm_const(&self) -> f64 {
        // Reflect to λ ≤ ½ so that t ≥ 0 and the logit is nonpositive.
        let (lambda, a) = if self.lambda <= 0.5 { (self.lambda, self.logit) } else { (1.0 - self.lambda, -self.logit) };
        let t = 1.0 - 2.0 * lambda;
        if t < T_WINDOW {
            log_c_series(t)
        } else {
            log_c_direct(t, a)
        }
    }

    /// `d log C / dλ`.
    pub fn log_norm_const_dlambda(&self) -> f64 {
        let t = self.t();
        if t.abs() < T_WINDOW {
            let t2 = t * t;
            -2.0 * t * (2.0 / 3.0 + t2 * (26.0 / 45.0 + t2 * (502.0 / 945.0 + t2 * 7102.0 / 14175.0)))
        } else {
            let l = self.lambda;
            1.0 / (self.logit * l * (1.0 - l)) + 2.0 / t
        }
    }

    /// Unnormalized `log λ^x (1−λ)^(1−x)`; the Bernoulli-VAE reconstruction term.
    pub fn log_ptilde(&self, x: f64) -> Result<f64> {
        check_unit(x, "x")?;
        Ok(self.log_ptilde_unchecked(x))
    }

    pub(crate) fn log_ptilde_unchecked(&self, x: f64) -> f64 {
        x * self.lambda.ln() + (1.0 - x) * (-self.lambda).ln_1p()
    }

    pub fn log_pdf(&self, x: f64) -> Result<f64> {
        Ok(self.log_ptilde(x)? + self.log_norm_const())
    }

    pub fn pdf(&self, x: f64) -> Result<f64> {
        Ok(self.log_pdf(x)?.exp())
    }

    /// `E[X]`, strictly increasing in `λ`.
    pub fn mean(&self) -> f64 {
        let t = self.t();
        if t.abs() < T_WINDOW {
            let t2 = t * t;
            0.5 - t * (1.0 / 6.0 + t2 * (2.0 / 45.0 + t2 * (22.0 / 945.0 + t2 * 214.0 / 14175.0)))
        } else {
            self.lambda / (2.0 * self.lambda - 1.0) - 1.0 / self.logit
        }
    }

    pub fn variance(&self) -> f64 {
        let t = self.t();
        if t.abs() < T_WINDOW {
            let t2 = t * t;
            1.0 / 12.0 - t2 * (1.0 / 60.0 + t2 * (8.0 / 945.0 + t2 * 76.0 / 14175.0))
        } else {
            let l = self.lambda;
            1.0 / (self.logit * self.logit) - l * (1.0 - l) / (t * t)
        }
    }

    pub fn cdf(&self, x: f64) -> Result<f64> {
        check_unit(x, "x")?;
        let a = self.logit;
        if a == 0.0 {
            return Ok(x);
        }
        Ok(((a * x).exp_m1() / a.exp_m1()).clamp(0.0, 1.0))
    }

    /// Inverse CDF; the reparameterizable sampler.
    pub fn icdf(&self, u: f64) -> Result<f64> {
        check_unit(u, "u")?;
        Ok(self.icdf_unchecked(u))
    }

    fn icdf_unchecked(&self, u: f64) -> f64 {
        let a = self.logit;
        if a == 0.0 {
            return u;
        }
        ((u * a.exp_m1()).ln_1p() / a).clamp(0.0, 1.0)
    }

    /// `∂ icdf(u; λ) / ∂λ` at fixed `u`.
    pub fn icdf_dlambda(&self, u: f64) -> Result<f64> {
        check_unit(u, "u")?;
        if u == 0.0 || u == 1.0 {
            return Ok(0.0);
        }
        let a = self.logit;
        let dx_da = if a.abs() < ICDF_SERIES_LOGIT {
            // x(a) = g(a)/a where g is the Bernoulli(u) cumulant generating function.
            let pq = u * (1.0 - u);
            let k2 = pq;
            let k3 = pq * (1.0 - 2.0 * u);
            let k4 = pq * (1.0 - 6.0 * pq);
            let k5 = k3 * (1.0 - 12.0 * pq);
            k2 / 2.0 + a * (k3 / 3.0 + a * (k4 / 8.0 + a * k5 / 30.0))
        } else {
            let em1 = a.exp_m1();
            let x = (u * em1).ln_1p() / a;
            (u * a.exp() / (1.0 + u * em1) - x) / a
        };
        Ok(dx_da / (self.lambda * (1.0 - self.lambda)))
    }

    pub fn sample(&self, stream: &mut RandomStream) -> f64 {
        self.icdf_unchecked(stream.uniform())
    }

    /// Differential entropy.
    pub fn entropy(&self) -> f64 {
        let m = self.mean();
        -self.log_norm_const() - m * self.lambda.ln() - (1.0 - m) * (-self.lambda).ln_1p()
    }

    /// `KL(CB(self) ‖ CB(other))`.
    pub fn kl(&self, other: &CBParam) -> f64 {
        let kl = self.log_norm_const() - other.log_norm_const() + self.mean() * (self.logit - other.logit) + (-self.lambda).ln_1p()
            - (-other.lambda).ln_1p();
        kl.max(0.0)
    }

    /// Moment generating function `E[e^{tX}]`.
    pub fn mgf(&self, t: f64) -> f64 {
        let s = self.logit + t;
        let ratio = if s == 0.0 { 1.0 } else { s.exp_m1() / s };
        (self.log_norm_const() + (-self.lambda).ln_1p()).exp() * ratio
    }

    /// Natural parameter `η = logit(λ)`.
    pub fn natural_param(&self) -> f64 {
        self.logit
    }

    pub fn from_natural(eta: f64) -> Self {
        Self::from_logit(eta)
    }
}

/// Log-partition `A(η) = −log C(σ(η)) − log(1 − σ(η))` of the exponential-family view.
pub fn log_partition(eta: f64) -> f64 {
    let p = CBParam::from_natural(eta);
    -p.log_norm_const() - (-p.lambda).ln_1p()
}

/// `log C` from the closed form, `t = 1 − 2λ ∈ (0, 1)` and `a = logit(λ) = −2·artanh(t)`.
pub(crate) fn log_c_direct(t: f64, a: f64) -> f64 {
    (-a / t).ln()
}

/// `log C` from its even Taylor series in `t = 1 − 2λ`.
pub(crate) fn log_c_series(t: f64) -> f64 {
    let t2 = t * t;
    LN_2 + t2 * (1.0 / 3.0 + t2 * (13.0 / 90.0 + t2 * 251.0 / 2835.0))
}

/// Product of `D` independent continuous Bernoullis.
#[derive(Debug, Clone, PartialEq)]
pub struct CBVec {
    params: Vec<CBParam>,
}

impl CBVec {
    pub fn new(params: Vec<CBParam>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::Empty("CBVec needs at least one coordinate"));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[CBParam] {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), got: x.len() });
        }
        x.iter().zip(&self.params).map(|(x, p)| p.log_pdf(*x)).sum()
    }

    pub fn sample(&self, stream: &mut RandomStream) -> Vec<f64> {
        self.params.iter().map(|p| p.sample(stream)).collect()
    }
}

/// Parameters of the C-Beta prior, kernel `λ^(α−1) (1−λ)^(β−1) C(λ)^ν`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CBetaParams {
    pub alpha: f64,
    pub beta: f64,
    pub nu: f64,
}

impl CBetaParams {
    pub fn new(alpha: f64, beta: f64, nu: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && nu >= 0.0) || !(alpha.is_finite() && beta.is_finite() && nu.is_finite()) {
            return Err(Error::Domain(format!("C-Beta needs α > 0, β > 0, ν ≥ 0; got ({alpha}, {beta}, {nu})")));
        }
        Ok(Self { alpha, beta, nu })
    }
}

/// Unnormalized C-Beta log density at `λ`.
pub fn cbeta_log_unnorm(lambda: f64, prior: &CBetaParams) -> Result<f64> {
    let p = CBParam::new(lambda)?;
    let l = p.lambda();
    Ok((prior.alpha - 1.0) * l.ln() + (prior.beta - 1.0) * (-l).ln_1p() + prior.nu * p.log_norm_const())
}

/// Conjugate update: `n` observations with sum `s` give `(α + s, β + n − s, ν + n)`.
pub fn cbeta_posterior(prior: &CBetaParams, data: &[f64]) -> Result<CBetaParams> {
    for x in data {
        check_unit(*x, "observation")?;
    }
    let n = data.len() as f64;
    let s: f64 = data.iter().sum();
    Ok(CBetaParams { alpha: prior.alpha + s, beta: prior.beta + n - s, nu: prior.nu + n })
}
