//! Shared helpers for integration tests: brute-force argmax oracle,
//! Kolmogorov-Smirnov uniformity test, and a histogram mode estimator.
//! These deliberately avoid the library's own optimization code paths.

#![allow(dead_code)]

/// Golden-section refinement of a maximum inside `[lo, hi]`.
pub fn golden_section_max(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Dense-grid argmax over `[0, 1]` with plateau handling: near-maximal grid
/// points are clustered, each cluster is refined by golden section, and ties
/// resolve to the lowest dosage.
pub fn grid_argmax(f: &dyn Fn(f64) -> f64, points: usize) -> f64 {
    assert!(points >= 3);
    let grid: Vec<f64> = (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&d| f(d)).collect();
    let v_max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Tolerance from the largest jump between neighboring grid values.
    let mut max_jump: f64 = 0.0;
    for w in values.windows(2) {
        max_jump = max_jump.max((w[1] - w[0]).abs());
    }
    let tol_v = max_jump.max(1e-12 * (1.0 + v_max.abs()));
    let near: Vec<usize> = (0..points).filter(|&i| values[i] >= v_max - tol_v).collect();
    // Split near-maximal indices into clusters at gaps of more than 5 cells.
    let mut clusters: Vec<(usize, usize)> = Vec::new();
    let mut start = near[0];
    let mut prev = near[0];
    for &i in &near[1..] {
        if i > prev + 5 {
            clusters.push((start, prev));
            start = i;
        }
        prev = i;
    }
    clusters.push((start, prev));

    let mut best_d = f64::NAN;
    let mut best_v = f64::NEG_INFINITY;
    let tie = 1e-5 * (1.0 + v_max.abs());
    for (a, b) in clusters {
        // Refine around the cluster's best grid point.
        let peak = (a..=b).max_by(|&i, &j| values[i].total_cmp(&values[j])).unwrap();
        let lo = grid[peak.saturating_sub(1)];
        let hi = grid[(peak + 1).min(points - 1)];
        let d = golden_section_max(f, lo, hi, 1e-7);
        let v = f(d);
        if v > best_v + tie || (v >= best_v - tie && d < best_d) {
            best_d = d;
            best_v = v.max(best_v);
        }
    }
    best_d
}

/// Asymptotic Kolmogorov distribution tail `Q(lambda)`.
fn ks_q(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
        let term = sign * (-2.0 * (j as f64) * (j as f64) * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS test against Uniform[0, 1]; returns an approximate p-value.
pub fn ks_uniform_p(draws: &[f64]) -> f64 {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d_stat: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = x.clamp(0.0, 1.0);
        let hi = (i + 1) as f64 / n - cdf;
        let lo = cdf - i as f64 / n;
        d_stat = d_stat.max(hi.max(lo));
    }
    let sqrt_n = n.sqrt();
    ks_q((sqrt_n + 0.12 + 0.11 / sqrt_n) * d_stat)
}

/// Mode estimate via a binned Epanechnikov kernel density: argmax of the
/// smoothed density plus three-point parabolic interpolation. Unbiased for
/// quadratic densities (the flat-top case a raw histogram argmax fumbles)
/// and low-bias for sharp peaks at this bandwidth.
pub fn estimate_mode(draws: &[f64], bandwidth: f64) -> f64 {
    let bins = 2000usize;
    let mut counts = vec![0f64; bins];
    for &d in draws {
        let b = ((d.clamp(0.0, 1.0)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1.0;
    }
    let width = 1.0 / bins as f64;
    let radius = (bandwidth / width).ceil() as isize;
    let density: Vec<f64> = (0..bins as isize)
        .map(|j| {
            let mut acc = 0.0;
            for off in -radius..=radius {
                let i = j + off;
                if i < 0 || i >= bins as isize {
                    continue;
                }
                let u = off as f64 * width / bandwidth;
                if u.abs() < 1.0 {
                    acc += counts[i as usize] * (1.0 - u * u);
                }
            }
            acc
        })
        .collect();
    let peak = (0..bins)
        .max_by(|&i, &j| density[i].total_cmp(&density[j]))
        .unwrap();
    let center = |b: usize| (b as f64 + 0.5) * width;
    if peak == 0 || peak == bins - 1 {
        return center(peak);
    }
    // Parabola through the peak and its neighbors.
    let (ym, y0, yp) = (density[peak - 1], density[peak], density[peak + 1]);
    let denom = ym - 2.0 * y0 + yp;
    if denom >= -1e-12 {
        return center(peak);
    }
    let shift = 0.5 * (ym - yp) / denom;
    (center(peak) + shift.clamp(-1.0, 1.0) * width).clamp(0.0, 1.0)
}

/// Sample mean helper.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median of a slice (averages the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
