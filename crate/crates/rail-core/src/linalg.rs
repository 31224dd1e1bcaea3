//! Dense real matrix arithmetic and factorizations.
//!
//! Matrices are `nalgebra` dynamic matrices (column-major storage). The rest
//! of the crate only relies on the factorization contracts below: reduced QR,
//! SVD with non-increasing singular values, and the real Schur form with
//! 1x1/2x2 diagonal blocks. Iterative factorizations are capped at `100 * n`
//! sweeps and report failure instead of spinning.

use nalgebra::Complex;

use crate::error::{Error, Result};

pub type Matrix = nalgebra::DMatrix<f64>;
pub type Vector = nalgebra::DVector<f64>;

/// Reduced QR factorization: `a = q * r` with `q` having orthonormal columns
/// (n x k for an n x m input, k = min(n, m)) and `r` upper triangular.
#[derive(Debug, Clone)]
pub struct QrFactors {
    pub q: Matrix,
    pub r: Matrix,
}

/// Thin SVD: `a = u * diag(sigma) * v^T` with `sigma` non-negative and
/// non-increasing.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vector,
    pub v: Matrix,
}

/// Real Schur form: `a = q * t * q^T` with `q` orthogonal and `t` quasi-upper
/// triangular (1x1 blocks for real eigenvalues, 2x2 blocks for complex pairs).
#[derive(Debug, Clone)]
pub struct SchurFactors {
    pub q: Matrix,
    pub t: Matrix,
}

fn iteration_cap(n: usize) -> usize {
    100 * n.max(1)
}

/// Fails if `a` contains NaN or infinite entries. Used when ingesting problem
/// data; factorization outputs inherit finiteness from their inputs.
pub fn ensure_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{what} contains non-finite entries"
        )))
    }
}

pub fn qr_reduced(a: &Matrix) -> Result<QrFactors> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidArgument(
            "qr_reduced requires a non-empty matrix".into(),
        ));
    }
    let qr = a.clone().qr();
    Ok(QrFactors {
        q: qr.q(),
        r: qr.r(),
    })
}

pub fn svd(a: &Matrix) -> Result<SvdFactors> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::InvalidArgument(
            "svd requires a non-empty matrix".into(),
        ));
    }
    let cap = iteration_cap(a.nrows().max(a.ncols()));
    let svd = a
        .clone()
        .try_svd(true, true, f64::EPSILON, cap)
        .ok_or_else(|| Error::Numerical(format!("SVD did not converge within {cap} sweeps")))?;
    Ok(SvdFactors {
        u: svd.u.expect("u requested"),
        sigma: svd.singular_values,
        v: svd.v_t.expect("v_t requested").transpose(),
    })
}

pub fn real_schur(a: &Matrix) -> Result<SchurFactors> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidArgument(format!(
            "real_schur requires a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "real_schur requires a non-empty matrix".into(),
        ));
    }
    let cap = iteration_cap(a.nrows());
    // Symmetric input: the spectral eigendecomposition is a real Schur form
    // with a diagonal T and is far more robust than Francis iteration on the
    // clustered spectra the projected diffusion operators produce.
    let skew = (a - a.transpose()).abs().max();
    if skew <= 1e-12 * a.abs().max().max(1.0) {
        let sym = (a + a.transpose()) * 0.5;
        let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, cap).ok_or_else(|| {
            Error::Numerical(format!(
                "symmetric eigeniteration did not converge within {cap} sweeps"
            ))
        })?;
        return Ok(SchurFactors {
            q: eig.eigenvectors,
            t: Matrix::from_diagonal(&eig.eigenvalues),
        });
    }
    let schur = a.clone().try_schur(f64::EPSILON, cap).ok_or_else(|| {
        Error::Numerical(format!(
            "Schur iteration did not converge within {cap} sweeps"
        ))
    })?;
    let (q, t) = schur.unpack();
    Ok(SchurFactors { q, t })
}

impl SchurFactors {
    /// Eigenvalues read off the quasi-triangular factor, block by block.
    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        let t = &self.t;
        let n = t.nrows();
        let mut eigs = Vec::with_capacity(n);
        let mut k = 0;
        while k < n {
            if k + 1 < n && t[(k + 1, k)] != 0.0 {
                let (a, b) = (t[(k, k)], t[(k, k + 1)]);
                let (c, d) = (t[(k + 1, k)], t[(k + 1, k + 1)]);
                let tr = a + d;
                let disc = (a - d) * (a - d) + 4.0 * b * c;
                if disc < 0.0 {
                    let im = (-disc).sqrt() / 2.0;
                    eigs.push(Complex::new(tr / 2.0, im));
                    eigs.push(Complex::new(tr / 2.0, -im));
                } else {
                    let rt = disc.sqrt();
                    eigs.push(Complex::new((tr + rt) / 2.0, 0.0));
                    eigs.push(Complex::new((tr - rt) / 2.0, 0.0));
                }
                k += 2;
            } else {
                eigs.push(Complex::new(t[(k, k)], 0.0));
                k += 1;
            }
        }
        eigs
    }
}

/// Horizontal concatenation `[a_0, a_1, ...]`. All parts must share a row
/// count.
pub fn hcat(parts: &[&Matrix]) -> Matrix {
    assert!(!parts.is_empty());
    let rows = parts[0].nrows();
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        assert_eq!(p.nrows(), rows, "hcat: inconsistent row counts");
        out.view_mut((0, at), (rows, p.ncols())).copy_from(*p);
        at += p.ncols();
    }
    out
}

/// Block-diagonal assembly `diag(a_0, a_1, ...)` of (possibly rectangular)
/// blocks.
pub fn block_diag(parts: &[&Matrix]) -> Matrix {
    assert!(!parts.is_empty());
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for p in parts {
        out.view_mut((r, c), (p.nrows(), p.ncols())).copy_from(*p);
        r += p.nrows();
        c += p.ncols();
    }
    out
}
