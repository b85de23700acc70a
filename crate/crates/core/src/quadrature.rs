//! Adaptive Gauss–Kronrod quadrature (7/15 points) on finite and infinite
//! intervals. Used for CDFs of univariate densities and for normalization
//! checks.

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Integrate `f` over the finite interval `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64, rel_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let (total, err) = gk15(&f, a, b);
    let mut result = 0.0;
    let mut stack = vec![(a, b, total, err, 0u32)];
    while let Some((lo, hi, value, err, depth)) = stack.pop() {
        let tol = abs_tol.max(rel_tol * value.abs());
        if err <= tol || depth >= 48 || (hi - lo).abs() < 1e-300 {
            result += value;
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gk15(&f, lo, mid);
        let (v2, e2) = gk15(&f, mid, hi);
        // Split the tolerance budget between halves.
        if e1 + e2 <= tol {
            result += v1 + v2;
        } else {
            stack.push((lo, mid, v1, e1, depth + 1));
            stack.push((mid, hi, v2, e2, depth + 1));
        }
    }
    result
}

/// Integrate over `(-inf, upper]` using `x = upper - t / (1 - t)`.
pub fn integrate_lower_tail<F: Fn(f64) -> f64>(f: F, upper: f64, abs_tol: f64, rel_tol: f64) -> f64 {
    integrate(
        |t| {
            if t >= 1.0 {
                return 0.0;
            }
            let s = 1.0 - t;
            let v = f(upper - t / s) / (s * s);
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        0.0,
        1.0,
        abs_tol,
        rel_tol,
    )
}

/// Integrate over the whole real line using `x = tan(theta)`.
pub fn integrate_real_line<F: Fn(f64) -> f64>(f: F, abs_tol: f64, rel_tol: f64) -> f64 {
    let half_pi = std::f64::consts::FRAC_PI_2;
    integrate(
        |theta| {
            let c = theta.cos();
            if c <= 0.0 {
                return 0.0;
            }
            let v = f(theta.tan()) / (c * c);
            if v.is_finite() {
                v
            } else {
                0.0
            }
        },
        -half_pi,
        half_pi,
        abs_tol,
        rel_tol,
    )
}

/// CDF of a univariate density evaluated at every point of an ascending
/// slice, by cumulative integration between consecutive points.
pub fn cdf_at_sorted<F: Fn(f64) -> f64>(density: F, sorted: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(sorted.len());
    if sorted.is_empty() {
        return out;
    }
    let mut acc = integrate_lower_tail(&density, sorted[0], 1e-13, 1e-11);
    out.push(acc);
    for w in sorted.windows(2) {
        acc += integrate(&density, w[0], w[1], 1e-14, 1e-10);
        out.push(acc);
    }
    out
}
