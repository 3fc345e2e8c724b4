//! Small statistical helpers: Kolmogorov-Smirnov tests against analytic
//! distribution functions, log-log least-squares slopes with bootstrap
//! standard errors, and mean/standard-error summaries.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One-sample Kolmogorov-Smirnov statistic against the CDF `cdf`.
/// Sorts `sample` in place.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &mut [f64], cdf: F) -> f64 {
    assert!(!sample.is_empty());
    sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sample.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// Asymptotic Kolmogorov p-value `P(D_n > d)` via the alternating series
/// `2 sum_k (-1)^{k-1} exp(-2 k^2 n d^2)`.
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let x = d * (n as f64).sqrt();
    if x < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-2.0 * (k as f64) * (k as f64) * x * x).exp();
        p += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// Critical value of the one-sample KS statistic at the 1% level
/// (asymptotic: `1.628 / sqrt(n)`).
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Ordinary least-squares fit of `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Bootstrap standard error of the slope (0 when not requested).
    pub slope_se: f64,
}

pub fn ols(x: &[f64], y: &[f64]) -> LineFit {
    assert!(x.len() == y.len() && x.len() >= 2);
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LineFit {
        slope,
        intercept,
        r_squared,
        slope_se: 0.0,
    }
}

/// OLS on `(log10 x, log10 y)` with a case-resampling bootstrap standard
/// error for the slope.
pub fn log_log_fit(x: &[f64], y: &[f64], bootstrap: usize, seed: u64) -> LineFit {
    let lx: Vec<f64> = x.iter().map(|v| v.log10()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.log10()).collect();
    let mut fit = ols(&lx, &ly);
    if bootstrap > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = lx.len();
        let mut slopes = Vec::with_capacity(bootstrap);
        let mut bx = vec![0.0; n];
        let mut by = vec![0.0; n];
        for _ in 0..bootstrap {
            for i in 0..n {
                let j = rng.gen_range(0..n);
                bx[i] = lx[j];
                by[i] = ly[j];
            }
            // a degenerate resample (all x equal) is skipped
            if bx.iter().all(|&v| v == bx[0]) {
                continue;
            }
            slopes.push(ols(&bx, &by).slope);
        }
        let m = slopes.iter().sum::<f64>() / slopes.len() as f64;
        let var = slopes.iter().map(|s| (s - m) * (s - m)).sum::<f64>()
            / (slopes.len() as f64 - 1.0);
        fit.slope_se = var.sqrt();
    }
    fit
}

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ks_of_uniform_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut xs: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let d = ks_statistic(&mut xs, |x| x.clamp(0.0, 1.0));
        assert!(d < ks_critical_1pct(n), "uniform sample rejected: {d}");
        assert!(ks_p_value(d, n) > 0.01);
        // a clearly wrong CDF is rejected
        let d_bad = ks_statistic(&mut xs, |x| x.clamp(0.0, 1.0).powi(2));
        assert!(d_bad > ks_critical_1pct(n));
        assert!(ks_p_value(d_bad, n) < 1e-6);
    }

    #[test]
    fn ks_known_value() {
        // single observation at 0.7 vs uniform: D = max(0.7, 0.3) = 0.7
        let mut xs = vec![0.7];
        let d = ks_statistic(&mut xs, |x| x);
        assert!((d - 0.7).abs() < 1e-15);
    }

    #[test]
    fn exact_line_is_recovered() {
        let x: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        let fit = ols(&x, &y);
        assert!((fit.slope + 2.0).abs() < 1e-12);
        assert!((fit.intercept - 3.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_log_power_law_slope() {
        let x: Vec<f64> = (1..=50).map(|i| 1.1f64.powi(i)).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v.powf(0.75)).collect();
        let fit = log_log_fit(&x, &y, 200, 9);
        assert!((fit.slope - 0.75).abs() < 1e-10, "{}", fit.slope);
        assert!(fit.slope_se < 1e-9);
    }

    #[test]
    fn noisy_power_law_slope_and_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (1..=60).map(|i| 1.2f64.powi(i)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| v.powf(0.66) * (1.0 + 0.1 * (rng.gen::<f64>() - 0.5)))
            .collect();
        let fit = log_log_fit(&x, &y, 400, 4);
        assert!((fit.slope - 0.66).abs() < 0.01, "{}", fit.slope);
        assert!(fit.slope_se > 1e-5 && fit.slope_se < 0.01);
    }

    #[test]
    fn mean_se_basics() {
        let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-15);
        // sample sd = sqrt(5/3), se = sd/2
        assert!((se - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-12);
    }
}
