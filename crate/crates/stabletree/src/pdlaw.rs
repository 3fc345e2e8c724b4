//! Poisson-Dirichlet sampling and exact-moment toolkit.
//!
//! The family is parametrised by `(a, theta)` with stick-breaking sticks
//! `W_i ~ Beta(1-a, theta + i*a)`; the instance of interest downstream is
//! `(a, theta) = (1/alpha, 1 - 1/alpha)` for `alpha` in `(1, 2)`, which is the
//! law of the ranked mass split of a measured tree along its spine.

use crate::quad::{self, QuadError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("stick-breaking residual {residual} still above tolerance {tol} after {sticks} sticks")]
    TruncationFailure { residual: f64, tol: f64, sticks: usize },
    #[error("quadrature failure: {0}")]
    Quad(#[from] QuadError),
}

/// Parameters of the two-parameter Poisson-Dirichlet family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdParams {
    pub a: f64,
    pub theta: f64,
}

impl PdParams {
    pub fn new(a: f64, theta: f64) -> Result<Self, PdError> {
        if !(a > 0.0 && a < 1.0) {
            return Err(PdError::InvalidParams(format!("a = {a} not in (0,1)")));
        }
        if !(theta + a > 0.0) {
            return Err(PdError::InvalidParams(format!(
                "theta + a = {} not positive",
                theta + a
            )));
        }
        Ok(Self { a, theta })
    }

    /// The spinal-split instance `(1/alpha, 1 - 1/alpha)`.
    pub fn spinal(alpha: f64) -> Result<Self, PdError> {
        if !(alpha > 1.0 && alpha < 2.0 + 1e-12) {
            return Err(PdError::InvalidParams(format!("alpha = {alpha} not in (1,2]")));
        }
        Self::new(1.0 / alpha, 1.0 - 1.0 / alpha)
    }
}

/// Exponents attached to a stability index `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableParams {
    pub alpha: f64,
    /// Leading counting exponent `alpha / (2 alpha - 1)`.
    pub gamma: f64,
    /// Gap exponent `(alpha - 1) / (2 alpha - 1)`.
    pub beta: f64,
}

impl StableParams {
    pub fn new(alpha: f64) -> Result<Self, PdError> {
        if !(alpha > 1.0 && alpha <= 2.0) {
            return Err(PdError::InvalidParams(format!("alpha = {alpha} not in (1,2]")));
        }
        Ok(Self {
            alpha,
            gamma: alpha / (2.0 * alpha - 1.0),
            beta: (alpha - 1.0) / (2.0 * alpha - 1.0),
        })
    }

    /// Expected sum of x-th powers of the split masses:
    /// `(alpha-1)/(alpha x - 1)` for `x > 1/alpha`, infinite otherwise.
    pub fn psi(&self, x: f64) -> f64 {
        assert!(x >= 0.0, "psi requires x >= 0");
        if x <= 1.0 / self.alpha {
            f64::INFINITY
        } else {
            (self.alpha - 1.0) / (self.alpha * x - 1.0)
        }
    }

    /// Analytic derivative of `psi` (finite branch only).
    pub fn psi_prime(&self, x: f64) -> f64 {
        let d = self.alpha * x - 1.0;
        -self.alpha * (self.alpha - 1.0) / (d * d)
    }

    /// Mean of the discounted split measure, `(2 alpha - 1)/(alpha - 1)`.
    pub fn renewal_mean(&self) -> f64 {
        1.0 / self.beta
    }
}

/// A truncated sample of ranked Poisson-Dirichlet masses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PdWeights {
    /// Non-increasing masses in (0,1).
    pub weights: Vec<f64>,
    /// Mass of the truncated stick-breaking tail.
    pub remainder: f64,
    pub seed: u64,
}

impl PdWeights {
    /// `sum_i w_i^x` over the retained masses.
    pub fn power_sum(&self, x: f64) -> f64 {
        self.weights.iter().map(|w| w.powf(x)).sum()
    }

    /// `sum_i f(w_i)` over the retained masses.
    pub fn sum_f<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.weights.iter().map(|&w| f(w)).sum()
    }

    /// The residual mass after `k` broken sticks splits as an independent
    /// `remainder x PD(a, theta + k a)`, so truncated estimators can be
    /// completed with the closed-form tail expectation; this returns the
    /// parameters of that conditional tail law.
    fn tail_params(&self, params: &PdParams) -> PdParams {
        // every stick contributes a strictly positive mass w.p. 1, so the
        // retained count equals the number of sticks broken
        PdParams {
            a: params.a,
            theta: params.theta + self.weights.len() as f64 * params.a,
        }
    }

    /// Unbiased estimator of `sum_i V_i^x` over the full (untruncated) split:
    /// retained power sum plus the exact conditional tail expectation.
    pub fn power_sum_completed(&self, params: &PdParams, x: f64) -> f64 {
        self.power_sum(x)
            + self.remainder.powf(x) * pd_power_sum_exact(&self.tail_params(params), x)
    }

    /// Unbiased estimator of `sum_{i != j} V_i^p V_j^q` over the full split,
    /// completing head-tail cross terms and the tail-tail double sum with
    /// their exact conditional expectations.
    pub fn double_power_sum_completed(&self, params: &PdParams, p: f64, q: f64) -> f64 {
        let tp = self.tail_params(params);
        let r = self.remainder;
        let hp = self.power_sum(p);
        let hq = self.power_sum(q);
        let tail_p = r.powf(p) * pd_power_sum_exact(&tp, p);
        let tail_q = r.powf(q) * pd_power_sum_exact(&tp, q);
        (hp * hq - self.power_sum(p + q))
            + hp * tail_q
            + hq * tail_p
            + r.powf(p + q) * pd_power_double_sum_exact(&tp, p, q)
    }

    /// A size-biased pick among the retained masses.  The remainder is treated
    /// as unpickable, which biases the pick by at most `remainder`.
    pub fn size_biased_pick<R: Rng>(&self, rng: &mut R) -> f64 {
        let total: f64 = 1.0 - self.remainder;
        let mut u = rng.gen::<f64>() * total;
        for &w in &self.weights {
            if u < w {
                return w;
            }
            u -= w;
        }
        *self.weights.last().expect("non-empty weights")
    }
}

pub const DEFAULT_MAX_STICKS: usize = 400_000;

/// Stick-breaking sampler for `PD(a, theta)`, truncated once the residual
/// mass drops below `trunc_tol`, then size-ranked.
pub fn sample_pd(params: &PdParams, trunc_tol: f64, seed: u64) -> Result<PdWeights, PdError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = sample_pd_with(params, trunc_tol, DEFAULT_MAX_STICKS, &mut rng)?;
    w.seed = seed;
    Ok(w)
}

/// As [`sample_pd`] but drawing from a caller-owned RNG stream.
pub fn sample_pd_with<R: Rng>(
    params: &PdParams,
    trunc_tol: f64,
    max_sticks: usize,
    rng: &mut R,
) -> Result<PdWeights, PdError> {
    assert!(
        trunc_tol > 0.0 && trunc_tol < 0.5,
        "trunc_tol must lie in (0, 0.5)"
    );
    let mut weights = Vec::with_capacity(64);
    let mut residual = 1.0f64;
    let mut i = 1usize;
    while residual >= trunc_tol {
        if i > max_sticks {
            return Err(PdError::TruncationFailure {
                residual,
                tol: trunc_tol,
                sticks: max_sticks,
            });
        }
        let stick = Beta::new(1.0 - params.a, params.theta + i as f64 * params.a)
            .map_err(|e| PdError::InvalidParams(e.to_string()))?
            .sample(rng);
        let delta = stick * residual;
        if delta > 0.0 {
            weights.push(delta);
        }
        residual *= 1.0 - stick;
        i += 1;
    }
    weights.sort_unstable_by(|x, y| y.partial_cmp(x).unwrap());
    // Kahan sum so that sum + remainder = 1 to full precision.
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for &w in &weights {
        let y = w - c;
        let t = s + y;
        c = (t - s) - y;
        s = t;
    }
    let remainder = (1.0 - s).max(0.0);
    Ok(PdWeights {
        weights,
        remainder,
        seed: 0,
    })
}

fn ln_beta(p: f64, q: f64) -> f64 {
    ln_gamma(p) + ln_gamma(q) - ln_gamma(p + q)
}

/// Closed form `E sum_i V_i^x` over `PD(a, theta)`:
/// `Gamma(theta+1) Gamma(x-a) / (Gamma(theta+x) Gamma(1-a))`.
///
/// Reduces to `(alpha-1)/(alpha x - 1)` in the spinal instance.  Infinite
/// for `x <= a`.
pub fn pd_power_sum_exact(params: &PdParams, x: f64) -> f64 {
    if x <= params.a {
        return f64::INFINITY;
    }
    (ln_gamma(params.theta + 1.0) + ln_gamma(x - params.a)
        - ln_gamma(params.theta + x)
        - ln_gamma(1.0 - params.a))
        .exp()
}

/// Closed form `E sum_{i != j} V_i^p V_j^q` over `PD(a, theta)`:
/// `(theta+a) Gamma(theta+1) Gamma(p-a) Gamma(q-a) / (Gamma(1-a)^2 Gamma(theta+p+q))`.
pub fn pd_power_double_sum_exact(params: &PdParams, p: f64, q: f64) -> f64 {
    if p <= params.a || q <= params.a {
        return f64::INFINITY;
    }
    (params.theta + params.a)
        * (ln_gamma(params.theta + 1.0) + ln_gamma(p - params.a) + ln_gamma(q - params.a)
            - 2.0 * ln_gamma(1.0 - params.a)
            - ln_gamma(params.theta + p + q))
            .exp()
}

/// One-pick intensity: `E sum_i f(Delta_i)`, evaluated as
/// `int_0^1 f(v) v^{-1-a} (1-v)^{theta+a-1} dv / B(1-a, theta+a)`.
///
/// For the spinal instance the kernel reduces to
/// `((alpha-1)/alpha) v^{-1-1/alpha}`.  The integrable singularity at zero is
/// removed by the substitution `v = w^p`, `p = 4/(1-a)`.
pub fn pd_intensity<F: Fn(f64) -> f64>(
    params: &PdParams,
    f: F,
    tol: f64,
) -> Result<f64, PdError> {
    let a = params.a;
    let theta = params.theta;
    let p = 4.0 / (1.0 - a);
    let norm = (-ln_beta(1.0 - a, theta + a)).exp();
    let end_exp = theta + a - 1.0;
    let upper = if end_exp < 0.0 { 1.0 - 1e-14 } else { 1.0 };
    let integrand = |w: f64| {
        let v = w.powf(p);
        // rounding can push a quadrature node past 1; clamp the base
        let tail = if end_exp == 0.0 {
            1.0
        } else {
            (1.0 - v).max(0.0).powf(end_exp)
        };
        p * f(v) * w.powf(-p * a - 1.0 + p) * v.powf(-1.0) * tail
    };
    // w^{p(-1-a)} * p w^{p-1} = p w^{-pa-1}; folded above as w^{p-pa-1} * v^{-1}.
    let val = quad::integrate(integrand, 1e-12, upper, tol)?;
    Ok(norm * val)
}

/// Two-pick expectation `E sum_{i != j} f(V_i) g(V_j)` by 2-D quadrature of
/// the size-biased double-pick kernel with constant
/// `C = Gamma(theta+1)Gamma(theta+a+1) / (Gamma(1-a)^2 Gamma(theta+a) Gamma(theta+2a))`.
pub fn two_pick_expectation<F, G>(
    params: &PdParams,
    f: F,
    g: G,
    tol: f64,
) -> Result<f64, PdError>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let a = params.a;
    let th = params.theta;
    let ln_c = ln_gamma(th + 1.0) + ln_gamma(th + a + 1.0)
        - 2.0 * ln_gamma(1.0 - a)
        - ln_gamma(th + a)
        - ln_gamma(th + 2.0 * a);
    let c = ln_c.exp();
    let p = 4.0 / (1.0 - a);
    let ex_x = th + a - 1.0;
    let ex_y = th + 2.0 * a - 1.0;
    let upper_x = if ex_x < 0.0 { 1.0 - 1e-14 } else { 1.0 };
    let upper_y = if ex_y < 0.0 { 1.0 - 1e-14 } else { 1.0 };
    let inner_tol = tol * 0.2;
    let outer = |wx: f64| -> f64 {
        let x = wx.powf(p).min(1.0);
        let wtx = p * wx.powf(-p * a - 1.0 + p) * x.powf(-1.0)
            * if ex_x == 0.0 { 1.0 } else { (1.0 - x).max(0.0).powf(ex_x) };
        let fx = f(x);
        if fx == 0.0 || wtx == 0.0 {
            return 0.0;
        }
        let inner = quad::integrate(
            |wy: f64| {
                let y = wy.powf(p).min(1.0);
                let wty = p * wy.powf(-p * a - 1.0 + p) * y.powf(-1.0)
                    * if ex_y == 0.0 { 1.0 } else { (1.0 - y).max(0.0).powf(ex_y) };
                g((1.0 - x) * y) * wty
            },
            1e-12,
            upper_y,
            inner_tol,
        )
        .unwrap_or(f64::NAN);
        fx * wtx * inner
    };
    let val = quad::integrate(outer, 1e-12, upper_x, tol)?;
    if !val.is_finite() {
        return Err(PdError::Quad(QuadError::Divergent(val)));
    }
    Ok(c * val)
}
