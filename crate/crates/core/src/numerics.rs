//! Low-level numerics shared by every other module.

use std::sync::OnceLock;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::{Error, Result};

/// Default absolute tolerance for [`quadrature`].
pub const QUAD_TOL: f64 = 1e-10;
/// Maximum bisection depth of the adaptive quadrature.
pub const QUAD_MAX_DEPTH: u32 = 40;

const GL_POINTS: usize = 64;

/// Inverse hyperbolic tangent, `½·log((1+x)/(1−x))`.
pub fn artanh(x: f64) -> Result<f64> {
    if x.is_nan() || x.abs() >= 1.0 {
        return Err(Error::Domain(format!("artanh requires |x| < 1, got {x}")));
    }
    // Odd symmetry: log1p near −1 would lose digits for x close to −1.
    let ax = x.abs();
    Ok((0.5 * (2.0 * ax / (1.0 - ax)).ln_1p()).copysign(x))
}

fn gauss_legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GL_POINTS;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            // Chebyshev initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let k = k as f64;
                    let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        (nodes, weights)
    })
}

fn gl_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let (nodes, weights) = gauss_legendre();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    nodes.iter().zip(weights).map(|(x, w)| w * f(mid + half * x)).sum::<f64>() * half
}

/// Adaptive composite 64-point Gauss–Legendre integration of `f` over `[a, b]`.
///
/// A panel is accepted when it agrees with the sum of its two halves to within
/// its share of `tol`; otherwise both halves are refined, up to
/// [`QUAD_MAX_DEPTH`] levels.
pub fn quadrature<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Domain(format!("quadrature tolerance must be positive, got {tol}")));
    }
    let whole = gl_panel(&f, a, b);
    adapt(&f, a, b, whole, tol, 0)
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> Result<f64> {
    let mid = 0.5 * (a + b);
    let left = gl_panel(f, a, mid);
    let right = gl_panel(f, mid, b);
    let refined = left + right;
    if !refined.is_finite() {
        return Err(Error::Domain(format!("integrand not finite on [{a}, {b}]")));
    }
    if (refined - whole).abs() <= tol {
        return Ok(refined);
    }
    if depth >= QUAD_MAX_DEPTH {
        return Err(Error::NoConvergence { a, b, depth });
    }
    Ok(adapt(f, a, mid, left, 0.5 * tol, depth + 1)? + adapt(f, mid, b, right, 0.5 * tol, depth + 1)?)
}

/// Bisection for `f(x) = target` with `f` strictly increasing on `[lo, hi]`.
///
/// Stops once `|f(x) − target| ≤ tol` or the bracket is narrower than `tol`.
pub fn bisect_monotone<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, target: f64, tol: f64) -> Result<f64> {
    let (f_lo, f_hi) = (f(lo), f(hi));
    if !(f_lo <= target && target <= f_hi) {
        return Err(Error::Bracket { target, f_lo, f_hi });
    }
    if (f_lo - target).abs() <= tol {
        return Ok(lo);
    }
    if (f_hi - target).abs() <= tol {
        return Ok(hi);
    }
    let (mut lo, mut hi) = (lo, hi);
    loop {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if (fm - target).abs() <= tol || hi - lo <= tol || mid <= lo || mid >= hi {
            return Ok(mid);
        }
        if fm < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// `log Σ exp(vᵢ)`, shifted by the maximum.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values.iter().copied().fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |m| m.max(v)))).ok_or(Error::Empty("log_sum_exp"))?;
    if values.len() == 1 || max == f64::INFINITY || max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded, reproducible random stream.
///
/// Backed by ChaCha8. Normals come from the Box–Muller transform, which consumes
/// uniforms in pairs and caches the second variate, so a given seed yields the
/// same sequence on every platform with a correctly rounded `ln`/`sin`/`cos`.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed), spare_normal: None }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `hash(seed, index)`; does not advance `self`.
    pub fn substream(&self, index: u64) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(index.wrapping_add(0x632b_e59b_d9b4_e019))))
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Index drawn by inverse CDF over the cumulative (normalized) weights.
    pub fn categorical(&mut self, weights: &[f64]) -> Result<usize> {
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|w| w.is_nan() || *w < 0.0) || total.is_nan() || total <= 0.0 || !total.is_finite() {
            return Err(Error::Domain("categorical weights are not normalizable".into()));
        }
        let u = self.uniform() * total;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return Ok(i);
            }
        }
        // Rounding can leave u just above the final partial sum.
        Ok(weights.iter().rposition(|w| *w > 0.0).unwrap_or(0))
    }
}
