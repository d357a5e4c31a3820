//! Sparse constraint rows shared by the formulation and the convex models.

use serde::Serialize;

/// `Σ coeffs·x  (= | ≤)  rhs`, depending on which list holds the row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearRow {
    pub coeffs: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn new(coeffs: Vec<(usize, f64)>, rhs: f64) -> Self {
        LinearRow { coeffs, rhs }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// `Σ a·x − rhs`.
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.dot(x) - self.rhs
    }
}

/// Convex separable quadratic row `Σ q·x² + Σ a·x ≤ rhs` with `q ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadRow {
    pub squares: Vec<(usize, f64)>,
    pub linear: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl QuadRow {
    pub fn value(&self, x: &[f64]) -> f64 {
        let q: f64 = self.squares.iter().map(|&(j, c)| c * x[j] * x[j]).sum();
        let l: f64 = self.linear.iter().map(|&(j, a)| a * x[j]).sum();
        q + l
    }

    pub fn residual(&self, x: &[f64]) -> f64 {
        self.value(x) - self.rhs
    }

    /// Gradient entries `(index, ∂/∂x)`; repeated indices are summed by callers.
    pub fn gradient(&self, x: &[f64]) -> Vec<(usize, f64)> {
        self.squares
            .iter()
            .map(|&(j, c)| (j, 2.0 * c * x[j]))
            .chain(self.linear.iter().copied())
            .collect()
    }
}

/// Merges repeated indices and drops exact zeros.
pub fn compress(mut coeffs: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    coeffs.sort_by_key(|&(j, _)| j);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(coeffs.len());
    for (j, a) in coeffs {
        match out.last_mut() {
            Some((k, b)) if *k == j => *b += a,
            _ => out.push((j, a)),
        }
    }
    out.retain(|&(_, a)| a != 0.0);
    out
}
