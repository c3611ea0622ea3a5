//! Nonnegative linear filters written as suprema of biased erosions.
//!
//! For weights `alpha_i >= 0`:
//!
//! * with `sum alpha = 1`, anchoring on a coordinate `a`,
//!   `sum alpha_i x_i = sup_r min{ x_i - r_i (i != a), x_a + sum_{i != a} alpha_i r_i / alpha_a }`;
//! * with `A = sum alpha < 1`,
//!   `sum alpha_i x_i = sup_r min{ x_i - r_i, sum alpha_i r_i / (1 - A) }`.
//!
//! Both suprema are attained at `r_i* = x_i - sum alpha_j x_j`. The sweep
//! evaluates the min-expression on a finite grid and reports the gap.

use crate::error::{Error, Result};

/// Weight sums within this of 1 use the sum-one form.
pub const SUM_TOL: f64 = 1e-12;
/// Largest number of grid points a sweep will visit.
pub const MAX_GRID_POINTS: usize = 100_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ReprEval {
    /// `sum alpha_i x_i`
    pub exact: f64,
    /// Largest value of the min-expression over the grid.
    pub approx: f64,
    /// `exact - approx`; never negative up to rounding.
    pub gap: f64,
    pub step: f64,
    /// Coordinates carrying a free `r_i`, in order.
    pub free: Vec<usize>,
    /// Closed-form optimum for the free coordinates.
    pub r_star: Vec<f64>,
    /// Grid point attaining `approx`.
    pub r_best: Vec<f64>,
    pub points: usize,
}

/// The two identity forms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReprForm {
    /// Weights sum to 1; the given coordinate carries no `r`.
    SumOne { anchor: usize },
    SumBelowOne,
}

fn validate(alphas: &[f64], x: &[f64]) -> Result<f64> {
    if alphas.len() != x.len() || alphas.is_empty() {
        return Err(Error::Spec(format!("{} weights for {} inputs", alphas.len(), x.len())));
    }
    if alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(Error::Spec("weights must be finite and nonnegative".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Spec("inputs must be finite".into()));
    }
    let total: f64 = alphas.iter().sum();
    if total > 1.0 + SUM_TOL {
        return Err(Error::Spec(format!("weights sum to {total} > 1")));
    }
    Ok(total)
}

/// Which form applies. The sum-one form anchors on the last positive weight.
pub fn repr_form(alphas: &[f64]) -> ReprForm {
    let total: f64 = alphas.iter().sum();
    if (total - 1.0).abs() <= SUM_TOL {
        let anchor = alphas.iter().rposition(|a| *a > 0.0).expect("positive weight");
        ReprForm::SumOne { anchor }
    } else {
        ReprForm::SumBelowOne
    }
}

/// The min-expression at `r` (one entry per free coordinate).
fn min_expression(alphas: &[f64], x: &[f64], form: ReprForm, free: &[usize], r: &[f64]) -> f64 {
    let mut m = f64::INFINITY;
    let mut weighted = 0.0;
    for (&i, &ri) in free.iter().zip(r) {
        m = m.min(x[i] - ri);
        weighted += alphas[i] * ri;
    }
    let last = match form {
        ReprForm::SumOne { anchor } => x[anchor] + weighted / alphas[anchor],
        ReprForm::SumBelowOne => {
            let total: f64 = free.iter().map(|&i| alphas[i]).sum();
            weighted / (1.0 - total)
        }
    };
    m.min(last)
}

/// Evaluates the identity for `alphas` at `x` on a grid of spacing `step`.
///
/// Zero weights are dropped. Each free `r_i` is swept over
/// `[x_i - max(0, max x), x_i - min(0, min x) + step]` from the lower end,
/// which contains `r_i*` and the grid point just above it, so the gap is at
/// most `step`.
pub fn repr_identity_eval(alphas: &[f64], x: &[f64], step: f64) -> Result<ReprEval> {
    validate(alphas, x)?;
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Spec(format!("grid step must be positive, got {step}")));
    }
    let exact: f64 = alphas.iter().zip(x).map(|(a, v)| a * v).sum();
    let form = repr_form(alphas);
    let free: Vec<usize> = (0..x.len())
        .filter(|&i| alphas[i] > 0.0 && form != ReprForm::SumOne { anchor: i })
        .collect();
    let r_star: Vec<f64> = free.iter().map(|&i| x[i] - exact).collect();

    let hi_x = x.iter().cloned().fold(0.0, f64::max);
    let lo_x = x.iter().cloned().fold(0.0, f64::min);
    let n_pts = ((hi_x - lo_x) / step).ceil() as usize + 2;
    let lows: Vec<f64> = free.iter().map(|&i| x[i] - hi_x).collect();
    let total_pts = (0..free.len()).try_fold(1usize, |acc, _| acc.checked_mul(n_pts));
    let points = match total_pts {
        Some(p) if p <= MAX_GRID_POINTS => p,
        _ => {
            return Err(Error::Spec(format!(
                "grid of {n_pts}^{} points exceeds {MAX_GRID_POINTS}",
                free.len()
            )))
        }
    };

    let mut idx = vec![0usize; free.len()];
    let mut r = lows.clone();
    let mut best = f64::NEG_INFINITY;
    let mut r_best = r.clone();
    loop {
        let v = min_expression(alphas, x, form, &free, &r);
        if v > best {
            best = v;
            r_best.clone_from(&r);
        }
        // Odometer over the free coordinates.
        let mut k = 0;
        while k < idx.len() {
            idx[k] += 1;
            if idx[k] < n_pts {
                r[k] = lows[k] + idx[k] as f64 * step;
                break;
            }
            idx[k] = 0;
            r[k] = lows[k];
            k += 1;
        }
        if k == idx.len() {
            break;
        }
    }
    Ok(ReprEval {
        exact,
        approx: best,
        gap: exact - best,
        step,
        free,
        r_star,
        r_best,
        points,
    })
}

/// Evaluations at `step0, step0 / 2, ...` for `levels` levels.
pub fn repr_refinement(alphas: &[f64], x: &[f64], step0: f64, levels: usize) -> Result<Vec<ReprEval>> {
    (0..levels)
        .map(|k| repr_identity_eval(alphas, x, step0 / f64::powi(2.0, k as i32)))
        .collect()
}
