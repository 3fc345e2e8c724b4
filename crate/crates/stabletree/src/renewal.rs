//! Renewal-equation layer: the discounted split-time measure, its Laplace
//! identity, the renewal solution for the discounted mean, and the plateau
//! estimator for the leading counting constant.
//!
//! Writing each mass fraction as `Delta = e^{-gamma t}`, the intensity of
//! split times weighted by `e^{-gamma t}` works out to the Exponential(beta)
//! density.  That closed form is re-validated against quadrature of the
//! defining stick intensity on every construction.

use crate::pdlaw::{pd_intensity, PdParams, StableParams};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenewalError {
    #[error("derivation failure: {0}")]
    DerivationFailure(String),
    #[error("divergent input: {0}")]
    Divergent(String),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// The discounted split-time measure: Exponential(beta) on `[0, infinity)`.
#[derive(Debug, Clone, Copy)]
pub struct RenewalMeasure {
    pub params: StableParams,
}

/// Build the measure for `alpha`, validating the exponential closed form
/// against quadrature of the defining one-pick intensity (Laplace transforms
/// at several points must agree to 1e-8).
pub fn nu_gamma(params: StableParams) -> Result<RenewalMeasure, RenewalError> {
    let alpha = params.alpha;
    if !(alpha > 1.0 && alpha < 2.0) {
        return Err(RenewalError::InvalidParams(format!(
            "alpha = {alpha} not in (1,2)"
        )));
    }
    let pd = PdParams::spinal(alpha)
        .map_err(|e| RenewalError::InvalidParams(e.to_string()))?;
    let m = RenewalMeasure { params };
    for lambda in [0.5, 2.0, 5.0] {
        let exponent = 1.0 + lambda / params.gamma;
        let via_sticks = pd_intensity(&pd, |v| v.powf(exponent), 1e-11)
            .map_err(|e| RenewalError::DerivationFailure(e.to_string()))?;
        let closed = m.laplace(lambda);
        if (via_sticks - closed).abs() > 1e-8 {
            return Err(RenewalError::DerivationFailure(format!(
                "Laplace transform at {lambda}: quadrature {via_sticks} vs closed form {closed}"
            )));
        }
    }
    Ok(m)
}

impl RenewalMeasure {
    /// Density `beta e^{-beta t}` for `t >= 0`.
    pub fn density(&self, t: f64) -> f64 {
        if t < 0.0 {
            0.0
        } else {
            self.params.beta * (-self.params.beta * t).exp()
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        if t < 0.0 {
            0.0
        } else {
            1.0 - (-self.params.beta * t).exp()
        }
    }

    /// `int_0^inf t nu_gamma(dt) = 1/beta = (2 alpha - 1)/(alpha - 1)`.
    pub fn mean(&self) -> f64 {
        1.0 / self.params.beta
    }

    /// `int_0^inf e^{-lambda t} nu_gamma(dt) = beta/(beta + lambda)`.
    pub fn laplace(&self, lambda: f64) -> f64 {
        self.params.beta / (self.params.beta + lambda)
    }
}

/// `1 / (1 - psi(1 + lambda/gamma))`, the Laplace transform of the renewal
/// measure driving the discounted mean.
pub fn laplace_renewal_kernel(params: &StableParams, lambda: f64) -> f64 {
    assert!(lambda > 0.0);
    1.0 / (1.0 - params.psi(1.0 + lambda / params.gamma))
}

/// Discounted mean solved on a grid.
#[derive(Debug, Clone, Serialize)]
pub struct DiscountedMean {
    pub grid: Vec<f64>,
    pub u_values: Vec<f64>,
    pub m_values: Vec<f64>,
    pub m_infinity: f64,
}

/// Solve the renewal equation for the discounted mean `m` given samples of
/// the one-generation term `u` on an increasing grid.
///
/// Because the renewal measure of an Exponential(beta) step law is
/// `delta_0 + M Lebesgue` with `M = beta`, the solution reduces to
/// `m(t) = m(inf) - M int_t^inf u + u(t)` with `m(inf) = M int u`.
pub fn renewal_solve(
    grid: &[f64],
    u_values: &[f64],
    params: &StableParams,
) -> Result<DiscountedMean, RenewalError> {
    if grid.len() != u_values.len() || grid.len() < 2 {
        return Err(RenewalError::InvalidParams(
            "grid and u must have equal length >= 2".into(),
        ));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RenewalError::InvalidParams("grid must be increasing".into()));
    }
    if u_values.iter().any(|u| !u.is_finite()) {
        return Err(RenewalError::Divergent("u is not finite".into()));
    }
    let peak = u_values.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
    let edge = u_values[0].abs().max(u_values[u_values.len() - 1].abs());
    if peak > 0.0 && edge > 1e-6 * peak {
        return Err(RenewalError::Divergent(format!(
            "u does not vanish at the grid ends (edge {edge:.3e} vs peak {peak:.3e}); \
             extend the grid"
        )));
    }
    let beta = params.beta;
    let n = grid.len();
    // tail integrals int_{t_j}^{t_max} u by trapezoid from the right
    let mut tail = vec![0.0; n];
    for j in (0..n - 1).rev() {
        tail[j] = tail[j + 1] + 0.5 * (u_values[j] + u_values[j + 1]) * (grid[j + 1] - grid[j]);
    }
    let total = tail[0];
    let m_infinity = beta * total;
    let m_values: Vec<f64> = (0..n)
        .map(|j| m_infinity - beta * tail[j] + u_values[j])
        .collect();
    Ok(DiscountedMean {
        grid: grid.to_vec(),
        u_values: u_values.to_vec(),
        m_values,
        m_infinity,
    })
}

/// Plateau estimate of the leading counting constant with a bootstrap CI.
#[derive(Debug, Clone, Serialize)]
pub struct MInfEstimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Relative spread of the plateau values over the top decade.
    pub plateau_spread: f64,
    pub warning: Option<String>,
}

/// Estimate `m(inf)` as the plateau average of `lambda^{-gamma} mean N^D`
/// over the top decade of the grid.  `counts` holds one Dirichlet counting
/// row per tree, aligned with `lambdas`.
pub fn m_infinity_estimate(
    lambdas: &[f64],
    counts: &[Vec<usize>],
    params: &StableParams,
    seed: u64,
) -> Result<MInfEstimate, RenewalError> {
    if counts.is_empty() || lambdas.is_empty() {
        return Err(RenewalError::InvalidParams("empty ensemble".into()));
    }
    if counts.iter().any(|c| c.len() != lambdas.len()) {
        return Err(RenewalError::InvalidParams(
            "count rows disagree with the lambda grid".into(),
        ));
    }
    let gamma = params.gamma;
    let lam_max = lambdas.iter().cloned().fold(f64::MIN, f64::max);
    let in_plateau: Vec<usize> = (0..lambdas.len())
        .filter(|&j| lambdas[j] >= lam_max / 10.0)
        .collect();
    if in_plateau.len() < 2 {
        return Err(RenewalError::InvalidParams(
            "fewer than 2 grid points in the top decade".into(),
        ));
    }
    let estimate_on = |tree_idx: &[usize]| -> (f64, f64) {
        // returns (plateau mean, relative spread)
        let mut vals = Vec::with_capacity(in_plateau.len());
        for &j in &in_plateau {
            let mean_count = tree_idx
                .iter()
                .map(|&i| counts[i][j] as f64)
                .sum::<f64>()
                / tree_idx.len() as f64;
            vals.push(lambdas[j].powf(-gamma) * mean_count);
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let lo = vals.iter().cloned().fold(f64::MAX, f64::min);
        let hi = vals.iter().cloned().fold(f64::MIN, f64::max);
        let spread = if m != 0.0 { (hi - lo) / m.abs() } else { f64::INFINITY };
        (m, spread)
    };
    let all: Vec<usize> = (0..counts.len()).collect();
    let (value, plateau_spread) = estimate_on(&all);
    // case-resampling bootstrap over trees
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reps = 400;
    let mut boots = Vec::with_capacity(reps);
    let mut idx = vec![0usize; counts.len()];
    for _ in 0..reps {
        for slot in idx.iter_mut() {
            *slot = rng.gen_range(0..counts.len());
        }
        boots.push(estimate_on(&idx).0);
    }
    boots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let ci_low = boots[(reps as f64 * 0.025) as usize];
    let ci_high = boots[(reps as f64 * 0.975) as usize];
    let warning = if plateau_spread > 0.25 {
        Some(format!(
            "plateau spread {plateau_spread:.3} exceeds 25%: the counting curve has not flattened"
        ))
    } else {
        None
    };
    Ok(MInfEstimate {
        value,
        ci_low,
        ci_high,
        plateau_spread,
        warning,
    })
}

/// JSON report of the constants layer.
#[derive(Debug, Clone, Serialize)]
pub struct RenewalReport {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub m_inv: f64,
    pub m_infinity: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub diagnostics: String,
}

pub fn constants_report(params: &StableParams) -> Result<RenewalReport, RenewalError> {
    let nu = nu_gamma(*params)?;
    Ok(RenewalReport {
        alpha: params.alpha,
        gamma: params.gamma,
        beta: params.beta,
        m_inv: nu.mean(),
        m_infinity: None,
        ci_low: None,
        ci_high: None,
        diagnostics: "closed form validated against stick-intensity quadrature".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pdlaw::{sample_pd_with, StableParams};
    use crate::quad::integrate;
    use crate::stats;
    use statrs::function::gamma::ln_gamma;

    #[test]
    fn measure_is_a_probability_law_with_the_right_mean() {
        for alpha in [1.2, 1.5, 1.9] {
            let p = StableParams::new(alpha).unwrap();
            let m = nu_gamma(p).unwrap();
            let total = integrate(|t| m.density(t), 0.0, 200.0 / p.beta, 1e-12).unwrap();
            assert!((total - 1.0).abs() < 1e-10, "alpha {alpha}: mass {total}");
            let mean = integrate(|t| t * m.density(t), 0.0, 400.0 / p.beta, 1e-12).unwrap();
            let want = (2.0 * alpha - 1.0) / (alpha - 1.0);
            assert!((mean - want).abs() < 1e-10, "alpha {alpha}: mean {mean}");
            // psi'(1) anchor by central difference
            let h = 1e-6;
            let dnum = (p.psi(1.0 + h) - p.psi(1.0 - h)) / (2.0 * h);
            assert!((dnum + alpha / (alpha - 1.0)).abs() < 1e-5);
            assert!((-dnum / p.gamma - want).abs() < 1e-5);
        }
    }

    #[test]
    fn mean_is_four_at_three_halves() {
        let p = StableParams::new(1.5).unwrap();
        assert!((nu_gamma(p).unwrap().mean() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn laplace_matches_psi_by_quadrature() {
        for alpha in [1.2, 1.5, 1.9] {
            let p = StableParams::new(alpha).unwrap();
            let m = nu_gamma(p).unwrap();
            for lambda in [0.1, 1.0, 10.0] {
                let quad = integrate(
                    |t| (-lambda * t).exp() * m.density(t),
                    0.0,
                    40.0 / (lambda + p.beta),
                    1e-12,
                )
                .unwrap();
                let psi_val = p.psi(1.0 + lambda / p.gamma);
                assert!(
                    (quad - psi_val).abs() < 1e-8,
                    "alpha {alpha}, lambda {lambda}: {quad} vs {psi_val}"
                );
                let kernel = laplace_renewal_kernel(&p, lambda);
                assert!((kernel - 1.0 / (1.0 - psi_val)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernel_special_values() {
        let p = StableParams::new(1.5).unwrap();
        // at lambda = gamma: 1/(1 - psi(2)) = 1/(1 - 1/4) = 4/3
        assert!((laplace_renewal_kernel(&p, p.gamma) - 4.0 / 3.0).abs() < 1e-12);
        // lambda -> 0+: kernel - 1/(lambda mean) -> 1
        for lambda in [1e-3, 1e-5] {
            let k = laplace_renewal_kernel(&p, lambda);
            let excess = k - 1.0 / (lambda * nu_gamma(p).unwrap().mean());
            assert!((excess - 1.0).abs() < 10.0 * lambda, "excess {excess} at {lambda}");
        }
        // lambda -> infinity: kernel -> 1
        assert!((laplace_renewal_kernel(&p, 1e9) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn monte_carlo_split_times_match_exponential() {
        // nu_gamma-hat from stick samples: each weight V contributes mass
        // V (= e^{-gamma t} discount) at t = -ln(V)/gamma.
        let alpha = 1.5;
        let p = StableParams::new(alpha).unwrap();
        let pd = PdParams::spinal(alpha).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps = 12_000usize;
        // cumulative discounted mass per time threshold, averaged over reps
        let thresholds = [0.5f64, 1.0, 2.0, 4.0, 6.0];
        let mut emp = [0.0f64; 5];
        for _ in 0..reps {
            let w = sample_pd_with(&pd, 0.01, crate::pdlaw::DEFAULT_MAX_STICKS, &mut rng).unwrap();
            for &v in &w.weights {
                let t = -v.ln() / p.gamma;
                for (j, &thr) in thresholds.iter().enumerate() {
                    if t <= thr {
                        emp[j] += v;
                    }
                }
            }
        }
        let mut worst: f64 = 0.0;
        for (j, &t) in thresholds.iter().enumerate() {
            let got = emp[j] / reps as f64;
            let want = 1.0 - (-p.beta * t).exp();
            worst = worst.max((got - want).abs());
        }
        assert!(worst < 0.012, "sup CDF distance {worst}");
    }

    #[test]
    fn renewal_solve_exponential_example() {
        let p = StableParams::new(1.5).unwrap();
        let grid: Vec<f64> = (0..=40_000).map(|i| i as f64 * 1e-3).collect();
        let u: Vec<f64> = grid.iter().map(|&t| (-t).exp()).collect();
        // u(0) = 1 does not vanish at the left end, but the solver only
        // requires decay; shift the grid to start at a tiny negative time
        // where u = 0 wouldn't be right either -- instead test the identity
        // directly with the documented closed form on t >= 0.
        let dm = {
            // prepend a fast ramp below zero so that u vanishes at the ends
            let mut g2 = vec![-0.2, -0.1];
            g2.extend_from_slice(&grid);
            let mut u2 = vec![0.0, 0.0];
            u2.extend_from_slice(&u);
            renewal_solve(&g2, &u2, &p).unwrap()
        };
        // m(inf) = beta * int u = 0.25 * (1 + ramp area)
        let ramp = 0.05; // trapezoid of the two ramp cells: 0.5*0.1*(0+0) + 0.5*0.1*(0+1)
        assert!(
            (dm.m_infinity - 0.25 * (1.0 + ramp)).abs() < 1e-4,
            "m_inf {}",
            dm.m_infinity
        );
        // interior values: m(t) ~ m_inf + (1 - beta) e^{-t}
        for (j, &t) in dm.grid.iter().enumerate() {
            if t < 1.0 || t > 10.0 {
                continue;
            }
            let want = dm.m_infinity + 0.75 * (-t).exp();
            assert!(
                (dm.m_values[j] - want).abs() < 1e-6,
                "t = {t}: {} vs {want}",
                dm.m_values[j]
            );
        }
    }

    #[test]
    fn renewal_solve_zero_and_errors() {
        let p = StableParams::new(1.5).unwrap();
        let grid: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let zeros = vec![0.0; 100];
        let dm = renewal_solve(&grid, &zeros, &p).unwrap();
        assert!(dm.m_values.iter().all(|&m| m == 0.0));
        assert_eq!(dm.m_infinity, 0.0);
        // non-vanishing tail is refused
        let ones = vec![1.0; 100];
        assert!(matches!(
            renewal_solve(&grid, &ones, &p),
            Err(RenewalError::Divergent(_))
        ));
    }

    #[test]
    fn renewal_solve_decay_rate() {
        // u = e^{-(beta - eps) t}: |m - m_inf| decays at rate beta - eps.
        let p = StableParams::new(1.5).unwrap();
        let rate = p.beta - 0.05;
        let mut grid = vec![-0.2, -0.1];
        grid.extend((0..=120_000).map(|i| i as f64 * 1e-3));
        let u: Vec<f64> = grid
            .iter()
            .map(|&t| if t >= 0.0 { (-rate * t).exp() } else { 0.0 })
            .collect();
        let dm = renewal_solve(&grid, &u, &p).unwrap();
        let gap: Vec<f64> = dm
            .grid
            .iter()
            .zip(&dm.m_values)
            .filter(|(&t, _)| (5.0..60.0).contains(&t))
            .map(|(_, &m)| (m - dm.m_infinity).abs())
            .collect();
        let ts: Vec<f64> = dm
            .grid
            .iter()
            .cloned()
            .filter(|&t| (5.0..60.0).contains(&t))
            .collect();
        // fit log gap vs t
        let lx: Vec<f64> = ts.clone();
        let ly: Vec<f64> = gap.iter().map(|g| g.ln()).collect();
        let fit = stats::ols(&lx, &ly);
        assert!(
            (fit.slope + rate).abs() < 0.05 * rate,
            "decay rate {} vs {rate}",
            -fit.slope
        );
    }

    #[test]
    fn renewal_solve_matches_series_oracle() {
        // Independent oracle: m = sum_k u * nu_gamma^{*k}, with
        // nu_gamma^{*k} = Gamma(k, beta), truncated when the term < 1e-12.
        let p = StableParams::new(1.5).unwrap();
        let beta = p.beta;
        // compactly supported triangular u on [2, 4]
        let tri = |t: f64| (1.0 - (t - 3.0).abs()).max(0.0);
        let mut grid = Vec::new();
        let mut t = 0.0;
        while t <= 120.0 {
            grid.push(t);
            t += 0.01;
        }
        let u: Vec<f64> = grid.iter().map(|&s| tri(s)).collect();
        let dm = renewal_solve(&grid, &u, &p).unwrap();
        for &t in &[1.0f64, 3.0, 6.0, 15.0, 40.0] {
            let mut oracle = tri(t);
            for k in 1..200 {
                let kf = k as f64;
                let term = integrate(
                    |s| {
                        tri(t - s)
                            * (kf * beta.ln() + (kf - 1.0) * s.ln() - beta * s - ln_gamma(kf))
                                .exp()
                    },
                    1e-12,
                    t.max(1e-9),
                    1e-13,
                )
                .unwrap_or(0.0);
                oracle += term;
                if k > (beta * t) as usize + 12 && term < 1e-13 {
                    break;
                }
            }
            let j = grid.iter().position(|&g| (g - t).abs() < 1e-9).unwrap();
            assert!(
                (dm.m_values[j] - oracle).abs() < 1e-4,
                "t = {t}: solver {} vs series {oracle}",
                dm.m_values[j]
            );
        }
    }

    #[test]
    fn plateau_estimator_recovers_synthetic_constant() {
        let p = StableParams::new(1.5).unwrap();
        let lambdas: Vec<f64> = (0..60).map(|i| 10f64.powf(i as f64 / 20.0)).collect();
        let counts: Vec<Vec<usize>> = (0..50)
            .map(|_| {
                lambdas
                    .iter()
                    .map(|&l| (7.0 * l.powf(p.gamma)).round() as usize)
                    .collect()
            })
            .collect();
        let est = m_infinity_estimate(&lambdas, &counts, &p, 1).unwrap();
        assert!(
            (est.value - 7.0).abs() < 0.14,
            "estimate {} not within 2% of 7",
            est.value
        );
        assert!(est.warning.is_none(), "{:?}", est.warning);
        assert!(est.ci_low <= est.value && est.value <= est.ci_high);
    }

    #[test]
    fn plateau_estimator_warns_on_drift() {
        let p = StableParams::new(1.5).unwrap();
        let lambdas: Vec<f64> = (0..40).map(|i| 10f64.powf(i as f64 / 10.0)).collect();
        // wrong exponent: lambda^(gamma + 0.4) keeps drifting
        let counts = vec![lambdas
            .iter()
            .map(|&l| l.powf(p.gamma + 0.4) as usize)
            .collect::<Vec<_>>()];
        let est = m_infinity_estimate(&lambdas, &counts, &p, 2).unwrap();
        assert!(est.warning.is_some());
    }
}
