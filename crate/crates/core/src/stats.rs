//! Small summary statistics used by the experiment harness.

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample standard deviation / √m).
pub fn std_error(xs: &[f64]) -> f64 {
    let m = xs.len();
    if m < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (m - 1) as f64;
    (var / m as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Smallest sample value `q` with at least `⌈level·m⌉` samples `≤ q`.
pub fn upper_quantile(xs: &[f64], level: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((level * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

/// One-sided Wilson score lower bound on a binomial proportion `k/m`.
pub fn wilson_lower(k: usize, m: usize, z: f64) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let (k, m) = (k as f64, m as f64);
    let p = k / m;
    let z2 = z * z;
    let centre = p + z2 / (2.0 * m);
    let spread = z * (p * (1.0 - p) / m + z2 / (4.0 * m * m)).sqrt();
    ((centre - spread) / (1.0 + z2 / m)).max(0.0)
}

/// Smallest order statistic `x_(k)` whose coverage `k/m` still has a Wilson
/// lower bound `≥ level`; `+∞` when even `k = m` falls short.
pub fn confident_quantile(xs: &[f64], level: f64, z: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    (1..=m)
        .find(|&k| wilson_lower(k, m, z) >= level)
        .map_or(f64::INFINITY, |k| v[k - 1])
}

/// Ordinary least squares slope of `ys` on `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    ols_slope(&lx, &ly)
}
