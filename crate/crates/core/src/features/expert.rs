use crate::error::{GfefError, Result};

pub const NUM_EXPERT_FEATURES: usize = 12;

/// Readings closer than this are treated as exact repeats (constancy and
/// stuck-gauge features).
pub const DEFAULT_REPEAT_EPS: f64 = 1e-9;

/// The twelve expert statistics of one series, `f1..f12` at indices `0..12`.
///
/// 1. range, 2. max |x|, 3. constancy flag, 4. long-repeat flag,
/// 5. max absolute step, 6–9. degree-5 fit residual variances over the first
/// half, second half, whole series and last three quarters, 10. degree-2 fit
/// residual variance over the last three quarters, 11. quadratic coefficient
/// of the degree-2 fit, 12. `γ = -a2/(3 a3) - a2²/(3 a3²)` from the degree-3 fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpertFeatureVector(pub [f64; NUM_EXPERT_FEATURES]);

impl ExpertFeatureVector {
    /// One-based accessor matching the feature numbering.
    pub fn f(&self, k: usize) -> f64 {
        self.0[k - 1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Least-squares polynomial fit over the abscissa `i / T`, `i = 1..=T`.
///
/// Returns `a0..=a_degree`.  Solved by Householder QR of the Vandermonde
/// matrix, which stays well conditioned on `(0, 1]` up to degree 5.
pub fn fit_polynomial(series: &[f64], degree: usize) -> Result<Vec<f64>> {
    let t = series.len();
    let n = degree + 1;
    if t < n {
        return Err(GfefError::InvalidArgument(format!(
            "degree-{degree} fit needs at least {n} points, got {t}"
        )));
    }
    // Column-major design matrix.
    let mut a = vec![0.0; t * n];
    for i in 0..t {
        let x = (i + 1) as f64 / t as f64;
        let mut p = 1.0;
        for j in 0..n {
            a[j * t + i] = p;
            p *= x;
        }
    }
    let mut y = series.to_vec();
    let mut diag = vec![0.0; n];
    for j in 0..n {
        let col = &mut a[j * t..(j + 1) * t];
        let norm = col[j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        let alpha = if col[j] > 0.0 { -norm } else { norm };
        diag[j] = alpha;
        if norm == 0.0 {
            continue;
        }
        col[j] -= alpha;
        let vnorm2 = col[j..].iter().map(|v| v * v).sum::<f64>();
        if vnorm2 == 0.0 {
            continue;
        }
        let v: Vec<f64> = col[j..].to_vec();
        for k in j + 1..n {
            let ck = &mut a[k * t..(k + 1) * t];
            let s = 2.0 * v.iter().zip(&ck[j..]).map(|(p, q)| p * q).sum::<f64>() / vnorm2;
            for (q, p) in ck[j..].iter_mut().zip(&v) {
                *q -= s * p;
            }
        }
        let s = 2.0 * v.iter().zip(&y[j..]).map(|(p, q)| p * q).sum::<f64>() / vnorm2;
        for (q, p) in y[j..].iter_mut().zip(&v) {
            *q -= s * p;
        }
    }
    // Back substitution with R (upper triangle of the reflected columns).
    let mut coef = vec![0.0; n];
    for j in (0..n).rev() {
        let mut s = y[j];
        for k in j + 1..n {
            s -= a[k * t + j] * coef[k];
        }
        coef[j] = if diag[j] == 0.0 { 0.0 } else { s / diag[j] };
    }
    Ok(coef)
}

fn eval_poly(coef: &[f64], x: f64) -> f64 {
    coef.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Squared residuals of a degree-`degree` fit, one per point.
fn squared_residuals(series: &[f64], degree: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = series.len();
    let coef = fit_polynomial(series, degree)?;
    let r = series
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let e = v - eval_poly(&coef, (i + 1) as f64 / t as f64);
            e * e
        })
        .collect();
    Ok((r, coef))
}

/// Length of the longest run that occurs twice (at distinct starts, overlaps
/// allowed) inside the first `i` values, comparing elementwise within `eps`.
pub fn longest_repeated_len(series: &[f64], i: usize, eps: f64) -> usize {
    let prefix = &series[..i.min(series.len())];
    let n = prefix.len();
    let mut best = 0;
    // Every pair of windows lies on one diagonal `shift`; the longest match
    // on that diagonal is the longest run of agreeing positions.
    for shift in 1..n {
        let mut run = 0;
        for a in 0..n - shift {
            if (prefix[a] - prefix[a + shift]).abs() <= eps {
                run += 1;
                best = best.max(run);
            } else {
                run = 0;
            }
        }
    }
    best
}

pub fn expert_features(series: &[f64]) -> Result<ExpertFeatureVector> {
    expert_features_with_eps(series, DEFAULT_REPEAT_EPS)
}

pub fn expert_features_with_eps(series: &[f64], eps: f64) -> Result<ExpertFeatureVector> {
    let t = series.len();
    if t < 4 {
        return Err(GfefError::InvalidArgument(format!(
            "expert features need at least 4 points, got {t}"
        )));
    }
    let tf = t as f64;
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max_abs = series.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let constant = series.iter().all(|v| (v - series[0]).abs() <= eps);
    let stuck = longest_repeated_len(series, t, eps) as f64 > tf / 2.0;
    let max_step = series.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);

    // One-based inclusive ranges: [1, T/2], [T/2 + 1, T], [1, T], [ceil(T/4), T].
    let half = t / 2;
    let quarter = t.div_ceil(4);
    let range_sum = |r: &[f64], lo: usize, hi: usize| r[lo - 1..hi].iter().sum::<f64>();

    // Series shorter than 6 points interpolate exactly with degree T - 1.
    let (r5, _) = squared_residuals(series, 5.min(t - 1))?;
    let f6 = 2.0 / tf * range_sum(&r5, 1, half);
    let f7 = 2.0 / tf * range_sum(&r5, half + 1, t);
    let f8 = 1.0 / tf * range_sum(&r5, 1, t);
    let f9 = 4.0 / (3.0 * tf) * range_sum(&r5, quarter, t);

    let (r2, quad) = squared_residuals(series, 2)?;
    let f10 = 4.0 / (3.0 * tf) * range_sum(&r2, quarter, t);
    let f11 = quad[2];

    let cubic = fit_polynomial(series, 3)?;
    let f12 = curvature_gamma(cubic[2], cubic[3]);

    Ok(ExpertFeatureVector([
        max - min,
        max_abs,
        f64::from(u8::from(constant)),
        f64::from(u8::from(stuck)),
        max_step,
        f6,
        f7,
        f8,
        f9,
        f10,
        f11,
        f12,
    ]))
}

/// `γ = -a2/(3 a3) - a2²/(3 a3²)` with `|a3|` floored at
/// `1e-8 * max(1, |a2|)`, keeping its sign (zero counts as positive).
pub(crate) fn curvature_gamma(a2: f64, a3: f64) -> f64 {
    let floor = 1e-8 * a2.abs().max(1.0);
    let sign = if a3 < 0.0 { -1.0 } else { 1.0 };
    let a3 = sign * a3.abs().max(floor);
    -a2 / (3.0 * a3) - a2 * a2 / (3.0 * a3 * a3)
}
