//! Adaptive Simpson quadrature.
//!
//! Used for the scale-function integrals behind the return-time moment
//! bounds and for the benchmark solutions whose `y` component is only
//! available as an integral.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("quadrature failed to converge on [{a}, {b}] (tolerance {tol:e})")]
    NonConvergent { a: f64, b: f64, tol: f64 },
}

const MAX_DEPTH: u32 = 48;

/// Integrates `f` over `[a, b]` to the requested absolute tolerance.
///
/// Classic adaptive Simpson with Richardson correction; the tolerance is
/// halved on each split so the accumulated error stays below `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64, QuadError> {
    if a == b {
        return Ok(0.0);
    }
    let (sign, lo, hi) = if a < b { (1.0, a, b) } else { (-1.0, b, a) };
    let m = 0.5 * (lo + hi);
    let (fl, fm, fh) = (f(lo), f(m), f(hi));
    let whole = simpson(lo, hi, fl, fm, fh);
    let v = simpson_rec(f, lo, hi, fl, fm, fh, whole, tol, MAX_DEPTH)
        .ok_or(QuadError::NonConvergent { a, b, tol })?;
    Ok(sign * v)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Option<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Some(left + right + delta / 15.0);
    }
    if depth == 0 {
        return None;
    }
    let l = simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let r = simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Some(l + r)
}
