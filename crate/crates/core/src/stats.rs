//! Small statistical helpers shared by the experiment modules: moments,
//! empirical covariance, quantiles, a one-sample Kolmogorov-Smirnov test,
//! percentile bootstrap intervals, and log-log regression slopes.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (denominator n-1).
pub fn sample_variance(xs: &[f64]) -> f64 {
    assert!(xs.len() >= 2);
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Sample mean of a set of equal-length vectors.
pub fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    assert!(!rows.is_empty());
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        assert_eq!(r.len(), d);
        for (mi, ri) in m.iter_mut().zip(r) {
            *mi += ri;
        }
    }
    for mi in &mut m {
        *mi /= rows.len() as f64;
    }
    m
}

/// Unbiased sample covariance matrix of the rows (denominator n-1).
pub fn sample_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    assert!(rows.len() >= 2);
    let d = rows[0].len();
    let m = mean_vector(rows);
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (r[i] - m[i]) * (r[j] - m[j]);
            }
        }
    }
    cov / (rows.len() - 1) as f64
}

/// Frobenius-norm relative gap `||a - b||_F / ||b||_F`.
pub fn frobenius_relative_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).norm() / b.norm()
}

/// Linearly interpolated quantile, `q` in [0, 1].
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty());
    assert!((0.0..=1.0).contains(&q));
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Sample skewness (biased, moment form).
pub fn skewness(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Sample excess kurtosis (biased, moment form).
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Standard normal CDF via the complementary error function.
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

// Rational approximation from Numerical Recipes; absolute error below 1.2e-7,
// far inside the tolerances of every test that consumes it.
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807
                                + t * (-1.13520398
                                    + t * (1.48851587
                                        + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// One-sample Kolmogorov-Smirnov statistic against a reference CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    assert!(!samples.is_empty());
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in sorted.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Asymptotic KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.62762 / (n as f64).sqrt()
}

/// Percentile bootstrap confidence interval for `stat` over `samples`.
pub fn bootstrap_ci<F>(
    samples: &[f64],
    stat: F,
    n_boot: usize,
    level: f64,
    seed: u64,
) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64,
{
    assert!(samples.len() >= 2);
    assert!((0.0..1.0).contains(&(1.0 - level)));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_boot);
    let mut resample = vec![0.0; samples.len()];
    for _ in 0..n_boot {
        for slot in resample.iter_mut() {
            *slot = samples[rng.gen_range(0..samples.len())];
        }
        stats.push(stat(&resample));
    }
    let alpha = (1.0 - level) / 2.0;
    (quantile(&stats, alpha), quantile(&stats, 1.0 - alpha))
}

/// Ordinary least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2);
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = mean(&lx);
    let my = mean(&ly);
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_on_known_sample() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((mean(&xs) - 2.5).abs() < 1e-15);
        assert!((sample_variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normal_cdf_reference_points() {
        // Tolerances track the 1.2e-7 absolute error of the rational erfc.
        assert!((standard_normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((standard_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert!((standard_normal_cdf(-2.575829) - 0.005).abs() < 1e-6);
    }

    #[test]
    fn ks_detects_wrong_location() {
        let n = 4000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shifted: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                u + 0.5
            })
            .collect();
        let d_wrong = ks_statistic(&shifted, standard_normal_cdf);
        let centered: Vec<f64> = shifted.iter().map(|x| x - 0.5).collect();
        let d_right = ks_statistic(&centered, standard_normal_cdf);
        assert!(d_wrong > ks_critical_1pct(n));
        assert!(d_right < ks_critical_1pct(n));
    }

    #[test]
    fn slope_of_exact_power_law() {
        let xs = [10.0, 100.0, 1000.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 / x).collect();
        assert!((log_log_slope(&xs, &ys) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_interval_brackets_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<f64> = (0..400).map(|_| rng.gen_range(0.0..2.0)).collect();
        let (lo, hi) = bootstrap_ci(&xs, mean, 500, 0.95, 3);
        assert!(lo < 1.0 && 1.0 < hi);
        assert!(hi - lo < 0.3);
    }

    #[test]
    fn covariance_of_correlated_pairs() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let cov = sample_covariance(&rows);
        assert!((cov[(0, 1)] - 2.0 * cov[(0, 0)]).abs() < 1e-12);
        assert!((cov[(1, 1)] - 4.0 * cov[(0, 0)]).abs() < 1e-12);
    }
}
