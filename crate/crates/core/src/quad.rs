//! Gauss–Legendre quadrature and an adaptive panel integrator.
//!
//! N-function values in integral form are one-dimensional integrals of the
//! density; they are smooth away from zero apart from derivative kinks where
//! `min`/`max` expressions switch branch. Each 15-point panel carries an
//! embedded 7-point interpolatory subrule on the same nodes, so the error
//! estimate is local to the panel — parent/child comparisons can stay
//! correlated across a kink and under-report. Nodes and weights are generated
//! once by Newton iteration on the Legendre polynomial rather than copied
//! from tables.

use once_cell::sync::Lazy;
use thiserror::Error;

pub const PANEL_POINTS: usize = 15;
pub const MAX_DEPTH: u32 = 40;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum QuadError {
    #[error("adaptive quadrature failed to converge after depth {0}")]
    NoConvergence(u32),
    #[error("integrand evaluation failed: {0}")]
    Integrand(String),
}

/// Legendre polynomial value and derivative at `x`.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let pk = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = pk;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        // Chebyshev-like initial guess, then Newton.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Interpolatory weights on the odd-indexed GL15 nodes (7 symmetric points),
/// from the monomial moment system up to degree 6.
fn embedded_weights(nodes: &[f64]) -> [f64; 7] {
    let sub: Vec<f64> = (0..7).map(|i| nodes[2 * i + 1]).collect();
    let mut a = [[0.0f64; 8]; 7]; // augmented system
    for (k, row) in a.iter_mut().enumerate() {
        for (i, &x) in sub.iter().enumerate() {
            row[i] = x.powi(k as i32);
        }
        row[7] = if k % 2 == 0 { 2.0 / (k as f64 + 1.0) } else { 0.0 };
    }
    // Gauss-Jordan with partial pivoting on the 7x8 system
    for col in 0..7 {
        let mut piv = col;
        for r in col + 1..7 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        a.swap(col, piv);
        for r in 0..7 {
            if r == col {
                continue;
            }
            let factor = a[r][col] / a[col][col];
            for c in col..8 {
                a[r][c] -= factor * a[col][c];
            }
        }
    }
    let mut w = [0.0f64; 7];
    for i in 0..7 {
        w[i] = a[i][7] / a[i][i];
    }
    w
}

struct Rule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    embedded: [f64; 7],
}

static GL15: Lazy<Rule> = Lazy::new(|| {
    let (nodes, weights) = gauss_legendre(PANEL_POINTS);
    let embedded = embedded_weights(&nodes);
    Rule {
        nodes,
        weights,
        embedded,
    }
});

/// Fixed 15-point Gauss–Legendre rule on `[a, b]`.
pub fn panel<E>(f: &mut impl FnMut(f64) -> Result<f64, E>, a: f64, b: f64) -> Result<f64, E> {
    Ok(panel_with_estimate(f, a, b)?.0)
}

/// 15-point value together with `|GL15 − embedded 7-point|` as error estimate.
fn panel_with_estimate<E>(
    f: &mut impl FnMut(f64) -> Result<f64, E>,
    a: f64,
    b: f64,
) -> Result<(f64, f64), E> {
    let rule = &*GL15;
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut values = [0.0f64; PANEL_POINTS];
    let mut acc = 0.0;
    for i in 0..PANEL_POINTS {
        let v = f(mid + half * rule.nodes[i])?;
        values[i] = v;
        acc += rule.weights[i] * v;
    }
    let mut sub = 0.0;
    for i in 0..7 {
        sub += rule.embedded[i] * values[2 * i + 1];
    }
    Ok((acc * half, (acc - sub).abs() * half.abs()))
}

/// Adaptive integration of `f` over `[a, b]` to absolute tolerance
/// `tol * (1 + |estimate|)`, by recursive bisection of 15-point panels with
/// the embedded error estimate and halved tolerance per level.
pub fn integrate<E: std::fmt::Display>(
    mut f: impl FnMut(f64) -> Result<f64, E>,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<f64, QuadError> {
    if a == b {
        return Ok(0.0);
    }
    let (whole, est) = panel_with_estimate(&mut f, a, b).map_err(err_map)?;
    let abs_tol = tol * (1.0 + whole.abs());
    if accept(whole, est, abs_tol) {
        return Ok(whole);
    }
    let mid = 0.5 * (a + b);
    let left = recurse(&mut f, a, mid, 0.5 * abs_tol, 1)?;
    let right = recurse(&mut f, mid, b, 0.5 * abs_tol, 1)?;
    Ok(left + right)
}

fn err_map<E: std::fmt::Display>(e: E) -> QuadError {
    QuadError::Integrand(e.to_string())
}

fn accept(value: f64, est: f64, tol: f64) -> bool {
    est <= tol || est <= 1e-15 * (1.0 + value.abs())
}

fn recurse<E: std::fmt::Display>(
    f: &mut impl FnMut(f64) -> Result<f64, E>,
    a: f64,
    b: f64,
    tol: f64,
    depth: u32,
) -> Result<f64, QuadError> {
    let (value, est) = panel_with_estimate(f, a, b).map_err(err_map)?;
    if accept(value, est, tol) {
        return Ok(value);
    }
    if depth >= MAX_DEPTH {
        return Err(QuadError::NoConvergence(depth));
    }
    let mid = 0.5 * (a + b);
    let left = recurse(f, a, mid, 0.5 * tol, depth + 1)?;
    let right = recurse(f, mid, b, 0.5 * tol, depth + 1)?;
    Ok(left + right)
}
