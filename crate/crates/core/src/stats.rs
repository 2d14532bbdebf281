//! Small numerical helpers: value ± σ, weighted straight-line fits and a
//! derivative-free simplex minimizer.

use std::fmt;

/// A value with its 1σ uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub sigma: f64,
}

impl Estimate {
    pub fn new(value: f64, sigma: f64) -> Self {
        Estimate { value, sigma }
    }

    pub fn exact(value: f64) -> Self {
        Estimate { value, sigma: 0.0 }
    }

    /// |value − truth| in units of σ. Infinite for σ = 0 unless equal.
    pub fn pull(&self, truth: f64) -> f64 {
        let d = (self.value - truth).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.sigma
        }
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match f.precision() {
            Some(p) => write!(f, "{:.*} ± {:.*}", p, self.value, p, self.sigma),
            None => write!(f, "{} ± {}", self.value, self.sigma),
        }
    }
}

/// Weighted least squares `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub var_intercept: f64,
    pub var_slope: f64,
    pub cov: f64,
    pub chi2: f64,
}

/// Fits a line through `(x, y, σ)` points. Points with σ = 0 are given unit
/// weight (all-exact inputs still interpolate exactly). Returns `None` when
/// fewer than two distinct x values are present.
pub fn fit_line(points: &[(f64, f64, f64)]) -> Option<LineFit> {
    if points.len() < 2 {
        return None;
    }
    let all_exact = points.iter().all(|p| p.2 == 0.0);
    let weight = |s: f64| if all_exact { 1.0 } else { 1.0 / (s * s) };
    let sw: f64 = points.iter().map(|p| weight(p.2)).sum();
    let xm = points.iter().map(|p| weight(p.2) * p.0).sum::<f64>() / sw;
    let ym = points.iter().map(|p| weight(p.2) * p.1).sum::<f64>() / sw;
    // centered sums keep the exact-data case at machine precision
    let sxx: f64 = points.iter().map(|p| weight(p.2) * (p.0 - xm).powi(2)).sum();
    if sxx <= 0.0 || !sxx.is_finite() {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| weight(p.2) * (p.0 - xm) * (p.1 - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2 = points.iter().map(|p| weight(p.2) * (p.1 - intercept - slope * p.0).powi(2)).sum();
    let (var_slope, var_intercept, cov) = if all_exact {
        (0.0, 0.0, 0.0)
    } else {
        (1.0 / sxx, 1.0 / sw + xm * xm / sxx, -xm / sxx)
    };
    Some(LineFit { intercept, slope, var_intercept, var_slope, cov, chi2 })
}

#[derive(Debug, Clone)]
pub struct SimplexResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Nelder–Mead minimization with one restart from the best vertex after
/// the first convergence (or stall). `max_iter` bounds the total number of
/// iterations across restarts.
pub fn nelder_mead<F>(f: F, x0: &[f64], steps: &[f64], max_iter: usize, ftol: f64) -> SimplexResult
where
    F: Fn(&[f64]) -> f64,
{
    let mut used = 0;
    let mut best = run_simplex(&f, x0, steps, max_iter, ftol);
    used += best.iterations;
    if used < max_iter {
        let again = run_simplex(&f, &best.x, steps, max_iter - used, ftol);
        used += again.iterations;
        let converged = again.converged;
        if again.fx <= best.fx {
            best = again;
        }
        best.converged = converged;
    }
    best.iterations = used;
    best
}

fn run_simplex<F>(f: &F, x0: &[f64], steps: &[f64], max_iter: usize, ftol: f64) -> SimplexResult
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let mut pts: Vec<Vec<f64>> = vec![x0.to_vec()];
    for i in 0..n {
        let mut p = x0.to_vec();
        p[i] += steps[i];
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();

        let spread = (vals[n] - vals[0]).abs();
        if spread <= ftol * (vals[0].abs() + ftol) {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n).map(|j| pts[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (pts[n][j] - centroid[j])).collect() };

        let xr = along(-1.0);
        let fr = f(&xr);
        if fr < vals[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            if fe < fr {
                pts[n] = xe;
                vals[n] = fe;
            } else {
                pts[n] = xr;
                vals[n] = fr;
            }
        } else if fr < vals[n - 1] {
            pts[n] = xr;
            vals[n] = fr;
        } else {
            let (xc, fc) = if fr < vals[n] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            if fc < vals[n].min(fr) {
                pts[n] = xc;
                vals[n] = fc;
            } else {
                // shrink toward the best vertex
                let (head, rest) = pts.split_at_mut(1);
                for (p, v) in rest.iter_mut().zip(&mut vals[1..]) {
                    for (x, &x0) in p.iter_mut().zip(&head[0]) {
                        *x = x0 + 0.5 * (*x - x0);
                    }
                    *v = f(p);
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    SimplexResult { x: pts[best].clone(), fx: vals[best], iterations, converged }
}

/// Median of a slice of counts.
pub fn median_u64(values: &[u64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    let mid = v.len() / 2;
    let (_, m, _) = v.select_nth_unstable(mid);
    let upper = *m as f64;
    if values.len() % 2 == 1 {
        upper
    } else {
        let lower = *v[..mid].iter().max().expect("nonempty lower half") as f64;
        0.5 * (lower + upper)
    }
}
