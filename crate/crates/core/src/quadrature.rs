//! One-dimensional rules and the product rule on the sphere.

use std::f64::consts::{PI, TAU};

/// Gauss-Legendre nodes and weights on `[-1, 1]`, nodes in descending order.
///
/// Exact for polynomials of degree `≤ 2n − 1`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "Gauss-Legendre rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = x;
        nodes[n - 1 - i] = -x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// `n` equispaced nodes `2πk/n` on the circle with weights `2π/n`.
///
/// Exact for trigonometric polynomials with integer frequencies `|k| < n`.
pub fn uniform_circle(n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = TAU / n as f64;
    ((0..n).map(|k| k as f64 * h).collect(), vec![h; n])
}

/// Midpoint variant of [`uniform_circle`]: nodes `2π(k + ½)/n`.
pub fn midpoint_circle(n: usize) -> (Vec<f64>, Vec<f64>) {
    let h = TAU / n as f64;
    ((0..n).map(|k| (k as f64 + 0.5) * h).collect(), vec![h; n])
}
