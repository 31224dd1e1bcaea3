//! Uniform periodic grids and Fourier collocation differentiation matrices.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Uniform grid on `[left, right)` with the right endpoint identified with
/// the left (periodic).
#[derive(Debug, Clone)]
pub struct Grid1D {
    pub n: usize,
    pub left: f64,
    pub right: f64,
    pub points: Vector,
    pub dx: f64,
}

#[derive(Debug, Clone)]
pub struct Grid2D {
    pub x: Grid1D,
    pub y: Grid1D,
}

impl Grid2D {
    pub fn square(grid: &Grid1D) -> Self {
        Grid2D {
            x: grid.clone(),
            y: grid.clone(),
        }
    }

    /// Quadrature weight of one cell, `dx * dy`.
    pub fn cell_area(&self) -> f64 {
        self.x.dx * self.y.dx
    }
}

/// First and second derivative collocation matrices on a periodic grid.
#[derive(Debug, Clone)]
pub struct DiffOps {
    pub d1: Matrix,
    pub d2: Matrix,
}

pub fn make_grid(n: usize, left: f64, right: f64) -> Result<Grid1D> {
    if n < 4 || !n.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "periodic grid needs an even point count >= 4, got {n}"
        )));
    }
    if right <= left {
        return Err(Error::InvalidArgument(format!(
            "domain endpoints must satisfy right > left, got [{left}, {right})"
        )));
    }
    let dx = (right - left) / n as f64;
    let points = Vector::from_fn(n, |i, _| left + dx * i as f64);
    Ok(Grid1D {
        n,
        left,
        right,
        points,
        dx,
    })
}

/// Fourier collocation differentiation matrices for an even number of points.
///
/// The second-derivative matrix is built from its own stencil rather than as
/// `d1 * d1`; the two differ on the Nyquist mode (squaring the first-derivative
/// matrix annihilates it).
pub fn fourier_diff(grid: &Grid1D) -> DiffOps {
    let n = grid.n;
    let h = 2.0 * PI / n as f64;
    let scale = 2.0 * PI / (grid.right - grid.left);

    // Entries depend only on (i - j) mod n; precompute one period of each
    // stencil. For even n both stencils extend n-periodically.
    let mut col1 = vec![0.0; n];
    let mut col2 = vec![-PI * PI / (3.0 * h * h) - 1.0 / 6.0; n];
    for k in 1..n {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let half = 0.5 * k as f64 * h;
        col1[k] = 0.5 * sign / half.tan();
        col2[k] = -sign / (2.0 * half.sin() * half.sin());
    }
    let d1 = Matrix::from_fn(n, n, |i, j| scale * col1[(n + i - j) % n]);
    let d2 = Matrix::from_fn(n, n, |i, j| scale * scale * col2[(n + i - j) % n]);
    DiffOps { d1, d2 }
}
