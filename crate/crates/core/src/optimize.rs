//! Derivative-free one-dimensional maximization and bracketed root finding.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarOptimum {
    pub x: f64,
    pub value: f64,
    pub converged: bool,
}

/// Maximize `f` on `[lo, hi]`: a coarse scan over `scan` points locates the
/// best cell, then golden-section search refines inside the neighbouring
/// bracket until its width drops below `x_tol`.
///
/// Non-finite objective values are treated as `-inf`.
pub fn maximize_scalar<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    scan: usize,
    x_tol: f64,
) -> ScalarOptimum {
    assert!(hi > lo, "empty search interval");
    let mut eval = |x: f64| {
        let v = f(x);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    };
    let n = scan.max(3);
    let step = (hi - lo) / (n - 1) as f64;
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 0..n {
        let x = if i == n - 1 { hi } else { lo + step * i as f64 };
        let v = eval(x);
        if v > best.1 {
            best = (i, v);
        }
    }
    if best.1 == f64::NEG_INFINITY {
        return ScalarOptimum { x: 0.5 * (lo + hi), value: best.1, converged: false };
    }
    let mut a = if best.0 == 0 { lo } else { lo + step * (best.0 - 1) as f64 };
    let mut b = if best.0 + 1 >= n { hi } else { lo + step * (best.0 + 1) as f64 };
    let best_scan = (lo + step * best.0 as f64).min(hi);

    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c);
    let mut fd = eval(d);
    let mut converged = false;
    for _ in 0..200 {
        if (b - a).abs() <= x_tol {
            converged = true;
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d);
        }
    }
    let (x, value) = if fc >= fd { (c, fc) } else { (d, fd) };
    if value >= best.1 {
        ScalarOptimum { x, value, converged }
    } else {
        ScalarOptimum { x: best_scan, value: best.1, converged }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RootOutcome {
    Root(f64),
    /// No sign change; `f` stays positive up to the upper end.
    AboveRange(f64),
    /// No sign change; `f` is already negative at the lower end.
    BelowRange(f64),
}

/// Bisection for a decreasing function with a single sign change on `[lo, hi]`.
pub fn bisect_decreasing<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, rel_tol: f64) -> RootOutcome {
    let (mut a, mut b) = (lo, hi);
    let fa = f(a);
    let fb = f(b);
    if fa <= 0.0 {
        return RootOutcome::BelowRange(lo);
    }
    if fb >= 0.0 {
        return RootOutcome::AboveRange(hi);
    }
    for _ in 0..300 {
        let mid = 0.5 * (a + b);
        if (b - a) <= rel_tol * mid.abs() {
            break;
        }
        if f(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    RootOutcome::Root(0.5 * (a + b))
}
