//! Adaptive Gauss–Legendre quadrature.

use std::sync::OnceLock;

const ORDER: usize = 10;
const MAX_DEPTH: u32 = 40;

/// Nodes and weights on [-1, 1], computed once by Newton iteration on P_n.
fn rule() -> &'static ([f64; ORDER], [f64; ORDER]) {
    static RULE: OnceLock<([f64; ORDER], [f64; ORDER])> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(ORDER))
}

fn gauss_legendre(n: usize) -> ([f64; ORDER], [f64; ORDER]) {
    let mut x = [0.0; ORDER];
    let mut w = [0.0; ORDER];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = nf * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn panel(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (x, w) = rule();
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    x.iter()
        .zip(w.iter())
        .map(|(&xi, &wi)| wi * f(mid + half * xi))
        .sum::<f64>()
        * half
}

/// Integrates `f` over `[a, b]`, bisecting panels until the one-panel and
/// two-panel estimates agree to `abs_tol` (split between halves).
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, abs_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let whole = panel(&f, a, b);
    recurse(&f, a, b, whole, abs_tol, 0)
}

fn recurse(f: &impl Fn(f64) -> f64, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let left = panel(f, a, m);
    let right = panel(f, m, b);
    let both = left + right;
    if (both - whole).abs() <= tol || depth >= MAX_DEPTH {
        return both;
    }
    recurse(f, a, m, left, 0.5 * tol, depth + 1) + recurse(f, m, b, right, 0.5 * tol, depth + 1)
}
