//! Bartels-Stewart solver for `A X - X B = C`.
//!
//! `A` is the large (N x N) coefficient, typically `I - a_kk dt F`, and `B`
//! the small (r x r) projected coefficient. Both are reduced to real Schur
//! form; the transformed quasi-triangular system is solved block column by
//! block column, with 2x2 Schur blocks handled by small coupled solves.

use crate::error::{Error, Result};
use crate::linalg::{real_schur, Matrix, SchurFactors};

/// Eigenvalues of the two coefficients closer than this are treated as a
/// collision (the Sylvester operator is singular).
const EIGENVALUE_COLLISION_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SylvesterProblem {
    /// N x N coefficient multiplying the unknown from the left.
    pub a_big: Matrix,
    /// r x r coefficient multiplying the unknown from the right.
    pub b_small: Matrix,
    /// N x r right-hand side.
    pub rhs: Matrix,
}

impl SylvesterProblem {
    fn validate(&self) -> Result<()> {
        if self.a_big.nrows() != self.a_big.ncols() {
            return Err(Error::InvalidArgument("a_big must be square".into()));
        }
        if self.b_small.nrows() != self.b_small.ncols() {
            return Err(Error::InvalidArgument("b_small must be square".into()));
        }
        if self.rhs.nrows() != self.a_big.nrows() || self.rhs.ncols() != self.b_small.nrows() {
            return Err(Error::InvalidArgument(format!(
                "rhs must be {}x{}, got {}x{}",
                self.a_big.nrows(),
                self.b_small.nrows(),
                self.rhs.nrows(),
                self.rhs.ncols()
            )));
        }
        Ok(())
    }
}

/// Solve `A X - X B = C` by Bartels-Stewart.
pub fn solve_sylvester(p: &SylvesterProblem) -> Result<Matrix> {
    p.validate()?;
    let sa = real_schur(&p.a_big)?;
    let sb = real_schur(&p.b_small)?;
    let x = solve_with_schur(&sa, &sb, &p.rhs)?;
    debug_assert!(residual_ok(p, &x), "Sylvester residual bound violated");
    Ok(x)
}

fn residual_ok(p: &SylvesterProblem, x: &Matrix) -> bool {
    let res = (&p.a_big * x - x * &p.b_small - &p.rhs).norm();
    let scale = p.a_big.norm() * x.norm() + x.norm() * p.b_small.norm() + p.rhs.norm();
    res <= 1e-10 * scale.max(f64::MIN_POSITIVE)
}

/// Same solve with the Schur forms of both coefficients already computed;
/// the K and L steps reuse the factorization of `I - a_kk dt F` across calls.
pub fn solve_with_schur(sa: &SchurFactors, sb: &SchurFactors, c: &Matrix) -> Result<Matrix> {
    check_spectra_disjoint(sa, sb)?;
    let f = sa.q.transpose() * c * &sb.q;
    let y = solve_quasi_triangular(&sa.t, &sb.t, &f)?;
    Ok(&sa.q * y * sb.q.transpose())
}

fn check_spectra_disjoint(sa: &SchurFactors, sb: &SchurFactors) -> Result<()> {
    let ea = sa.eigenvalues();
    let eb = sb.eigenvalues();
    for la in &ea {
        for lb in &eb {
            if (la - lb).norm() <= EIGENVALUE_COLLISION_TOL {
                return Err(Error::SingularPencil(format!(
                    "shared eigenvalue near {la} (distance {:.2e})",
                    (la - lb).norm()
                )));
            }
        }
    }
    Ok(())
}

/// 1x1 and 2x2 diagonal block layout of a quasi-triangular matrix.
fn block_starts(t: &Matrix) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut k = 0;
    while k < n {
        let size = if k + 1 < n && t[(k + 1, k)] != 0.0 {
            2
        } else {
            1
        };
        blocks.push((k, size));
        k += size;
    }
    blocks
}

/// Solve `Ta Y - Y Tb = F` with both coefficients quasi-upper-triangular.
fn solve_quasi_triangular(ta: &Matrix, tb: &Matrix, f: &Matrix) -> Result<Matrix> {
    let (m, r) = (ta.nrows(), tb.nrows());
    let a_blocks = block_starts(ta);
    let b_blocks = block_starts(tb);
    let mut y = Matrix::zeros(m, r);

    // Left-to-right over column blocks of Tb; the strictly-upper part of Tb
    // couples every earlier column into the current right-hand side.
    for &(j0, w) in &b_blocks {
        let mut g = f.view((0, j0), (m, w)).clone_owned();
        if j0 > 0 {
            g += y.view((0, 0), (m, j0)) * tb.view((0, j0), (j0, w));
        }
        // Bottom-up over row blocks of Ta.
        for &(i0, p) in a_blocks.iter().rev() {
            let mut h = g.view((i0, 0), (p, w)).clone_owned();
            let below = i0 + p;
            if below < m {
                h -= ta.view((i0, below), (p, m - below)) * y.view((below, j0), (m - below, w));
            }
            let taa = ta.view((i0, i0), (p, p)).clone_owned();
            let tbb = tb.view((j0, j0), (w, w)).clone_owned();
            let sol = solve_small_block(&taa, &tbb, &h)?;
            y.view_mut((i0, j0), (p, w)).copy_from(&sol);
        }
    }
    Ok(y)
}

/// Direct solve of `Taa Z - Z Tbb = H` for blocks up to 2x2: vectorize to a
/// dense system of size p*w <= 4 and Gauss-eliminate with partial pivoting.
fn solve_small_block(taa: &Matrix, tbb: &Matrix, h: &Matrix) -> Result<Matrix> {
    let (p, w) = (taa.nrows(), tbb.nrows());
    if p == 1 && w == 1 {
        let denom = taa[(0, 0)] - tbb[(0, 0)];
        if denom.abs() <= EIGENVALUE_COLLISION_TOL {
            return Err(Error::SingularPencil("1x1 pivot vanished".into()));
        }
        return Ok(Matrix::from_element(1, 1, h[(0, 0)] / denom));
    }
    // vec(Taa Z) = (I (x) Taa) vec(Z), vec(Z Tbb) = (Tbb^T (x) I) vec(Z),
    // column-major vectorization.
    let n = p * w;
    let mut sys = Matrix::zeros(n, n);
    for col in 0..w {
        for row in 0..p {
            let eq = col * p + row;
            for k in 0..p {
                sys[(eq, col * p + k)] += taa[(row, k)];
            }
            for k in 0..w {
                sys[(eq, k * p + row)] -= tbb[(k, col)];
            }
        }
    }
    let mut rhs: Vec<f64> = (0..n).map(|i| h[(i % p, i / p)]).collect();
    gauss_solve(&mut sys, &mut rhs)?;
    Ok(Matrix::from_fn(p, w, |i, j| rhs[j * p + i]))
}

fn gauss_solve(a: &mut Matrix, b: &mut [f64]) -> Result<()> {
    let n = b.len();
    for k in 0..n {
        let mut piv = k;
        for i in (k + 1)..n {
            if a[(i, k)].abs() > a[(piv, k)].abs() {
                piv = i;
            }
        }
        if a[(piv, k)].abs() <= EIGENVALUE_COLLISION_TOL {
            return Err(Error::SingularPencil("near-singular block solve".into()));
        }
        if piv != k {
            a.swap_rows(piv, k);
            b.swap(piv, k);
        }
        for i in (k + 1)..n {
            let factor = a[(i, k)] / a[(k, k)];
            for j in k..n {
                a[(i, j)] -= factor * a[(k, j)];
            }
            b[i] -= factor * b[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = b[k];
        for j in (k + 1)..n {
            s -= a[(k, j)] * b[j];
        }
        b[k] = s / a[(k, k)];
    }
    Ok(())
}
