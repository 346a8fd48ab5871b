//! Small statistics toolbox shared by the experiments and the test suites.

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn stderr_of_mean(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let v = sorted(xs);
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] * (1.0 - frac) + v[hi] * frac
}

/// Large-sample standard error of the sample median: 1.2533 * sd / sqrt(n)
/// would assume normality; instead use the distribution-free binomial bracket,
/// half the distance between the order statistics that bound the median at
/// two binomial standard deviations.
pub fn median_stderr(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let half_width = 2.0 * (0.25 / n).sqrt();
    let lo = quantile(xs, 0.5 - half_width);
    let hi = quantile(xs, 0.5 + half_width);
    0.25 * (hi - lo).abs().max(f64::MIN_POSITIVE)
}

/// Wilson 95% interval for a binomial proportion: returns (center, half_width).
pub fn wilson_interval(successes: u64, n: u64) -> (f64, f64) {
    let z = 1.959963984540054_f64;
    let n = n as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    (center, half)
}

/// Two-sided Kolmogorov-Smirnov distance between `samples` and the continuous
/// CDF `cdf`.
pub fn ks_distance<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let v = sorted(samples);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Pearson chi-square statistic for observed counts against expected counts.
/// Bins with expected mass below `min_expected` are pooled into their
/// neighbor. Returns (statistic, degrees_of_freedom).
pub fn chi_square(observed: &[f64], expected: &[f64], min_expected: f64) -> (f64, usize) {
    assert_eq!(observed.len(), expected.len());
    let mut obs_pool = 0.0;
    let mut exp_pool = 0.0;
    let mut stat = 0.0;
    let mut bins = 0usize;
    for (&o, &e) in observed.iter().zip(expected) {
        obs_pool += o;
        exp_pool += e;
        if exp_pool >= min_expected {
            stat += (obs_pool - exp_pool) * (obs_pool - exp_pool) / exp_pool;
            bins += 1;
            obs_pool = 0.0;
            exp_pool = 0.0;
        }
    }
    if exp_pool > 0.0 && bins > 0 {
        // fold the ragged tail into the statistic as one more bin
        stat += (obs_pool - exp_pool) * (obs_pool - exp_pool) / exp_pool;
        bins += 1;
    }
    (stat, bins.saturating_sub(1))
}

/// Upper critical value of the chi-square distribution.
pub fn chi_square_critical(dof: usize, upper_tail: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    ChiSquared::new(dof as f64)
        .expect("dof > 0")
        .inverse_cdf(1.0 - upper_tail)
}

#[derive(Debug, Clone, Copy)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of y on x.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid(format!(
            "fit_line needs two matched samples, got {} x and {} y",
            xs.len(),
            ys.len()
        )));
    }
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("fit_line: degenerate x values".to_string()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(LineFit { slope, intercept, r_squared })
}

/// Least-squares fit of `log y` against `log x`; the slope estimates the
/// power-law exponent. All inputs must be strictly positive.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::invalid(
            "fit_loglog requires strictly positive data".to_string(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    fit_line(&lx, &ly)
}
