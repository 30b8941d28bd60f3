//! Bracketed derivative-free scalar minimization (Brent's method).
//!
//! Combines golden-section steps with successive parabolic interpolation;
//! requires only that the objective is unimodal on the bracket. Used by the
//! CVaR and KL dual solvers, whose one-dimensional dual objectives are convex.

/// Outcome of a scalar minimization run.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BrentResult {
    /// Abscissa of the best point found.
    pub x: f64,
    /// Objective value at `x`.
    pub fx: f64,
    /// Number of objective evaluations performed.
    pub evaluations: usize,
    /// Half-width of the final bracketing interval around `x`.
    pub half_width: f64,
}

const GOLDEN: f64 = 0.381_966_011_250_105_2; // 2 - phi
const ZEPS: f64 = 1e-18;

/// Minimizes `f` over `[lo, hi]`.
///
/// Terminates once the bracket around the current best point shrinks below
/// `tol * (|x| + 1)` (plus a tiny absolute floor), or after `max_iter`
/// iterations. The returned `half_width` reports the achieved localization.
pub(crate) fn minimize<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
) -> BrentResult {
    let (mut a, mut b) = (lo.min(hi), lo.max(hi));
    if a == b {
        let fx = f(a);
        return BrentResult {
            x: a,
            fx,
            evaluations: 1,
            half_width: 0.0,
        };
    }

    let mut x = a + GOLDEN * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut evaluations = 1usize;
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;

    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol * x.abs() + ZEPS;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            // Parabolic fit through (v, fv), (w, fw), (x, fx).
            let r = (x - w) * (fx - fv);
            let q0 = (x - v) * (fx - fw);
            let mut p = (x - v) * q0 - (x - w) * r;
            let mut q = 2.0 * (q0 - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_old = e;
            e = d;
            if p.abs() < (0.5 * q * e_old).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm > x { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x < xm { b - x } else { a - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > 0.0 {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        evaluations += 1;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }

    BrentResult {
        x,
        fx,
        evaluations,
        half_width: 0.5 * (b - a),
    }
}
