//! Low-rank solution representation and the rank-management operations:
//! reduced basis augmentation, SVD truncation, the globally mass conservative
//! truncation, and factor-wise diagnostics (mass, L1 error).

use crate::error::{Error, Result};
use crate::linalg::{block_diag, hcat, qr_reduced, svd, Matrix, Vector};
use crate::spectral::Grid2D;

/// Tolerance for the orthonormality invariant of stored bases.
const ORTHONORMALITY_TOL: f64 = 1e-10;

/// Factorized solution `vx * s * vy^T` with orthonormal factor columns.
/// `s` is square but not necessarily diagonal mid-step.
#[derive(Debug, Clone)]
pub struct LowRankState {
    vx: Matrix,
    s: Matrix,
    vy: Matrix,
}

impl LowRankState {
    pub fn new(vx: Matrix, s: Matrix, vy: Matrix) -> Result<Self> {
        let r = s.nrows();
        if s.ncols() != r || vx.ncols() != r || vy.ncols() != r {
            return Err(Error::InvalidArgument(format!(
                "factor ranks disagree: vx {}x{}, s {}x{}, vy {}x{}",
                vx.nrows(),
                vx.ncols(),
                s.nrows(),
                s.ncols(),
                vy.nrows(),
                vy.ncols()
            )));
        }
        if r > vx.nrows() || r > vy.nrows() {
            return Err(Error::InvalidArgument("rank exceeds grid size".into()));
        }
        for (name, v) in [("vx", &vx), ("vy", &vy)] {
            let gram = v.transpose() * v;
            let dev = (gram - Matrix::identity(r, r)).abs().max();
            if dev > ORTHONORMALITY_TOL {
                return Err(Error::InvalidArgument(format!(
                    "{name} is not orthonormal (deviation {dev:.2e})"
                )));
            }
        }
        Ok(LowRankState { vx, s, vy })
    }

    /// Orthonormalize an arbitrary factor triple into a state with diagonal
    /// `s` (QR both factors, then SVD of the small core).
    pub fn from_triple(t: &FactorTriple) -> Result<Self> {
        let fx = qr_reduced(&t.x)?;
        let fy = qr_reduced(&t.y)?;
        let core = svd(&(&fx.r * &t.s * fy.r.transpose()))?;
        LowRankState::new(
            &fx.q * &core.u,
            Matrix::from_diagonal(&core.sigma),
            &fy.q * &core.v,
        )
    }

    /// State for a sum of separable terms `sum_i coeff_i gx_i(x) gy_i(y)`.
    pub fn from_separable_terms(terms: &[(f64, Vector, Vector)]) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("no separable terms given".into()));
        }
        let n = terms[0].1.len();
        let m = terms[0].2.len();
        let r = terms.len();
        let mut x = Matrix::zeros(n, r);
        let mut y = Matrix::zeros(m, r);
        let mut s = Matrix::zeros(r, r);
        for (j, (c, gx, gy)) in terms.iter().enumerate() {
            x.set_column(j, gx);
            y.set_column(j, gy);
            s[(j, j)] = *c;
        }
        LowRankState::from_triple(&FactorTriple { x, s, y })
    }

    /// Compress a dense field: keep the singular triplets above `tol`.
    pub fn from_dense_svd(m: &Matrix, tol: f64) -> Result<Self> {
        let f = svd(m)?;
        let r = f.sigma.iter().filter(|&&s| s > tol).count().max(1);
        LowRankState::new(
            f.u.columns(0, r).clone_owned(),
            Matrix::from_diagonal(&f.sigma.rows(0, r).clone_owned()),
            f.v.columns(0, r).clone_owned(),
        )
    }

    pub fn basis_x(&self) -> &Matrix {
        &self.vx
    }

    pub fn basis_y(&self) -> &Matrix {
        &self.vy
    }

    pub fn coefficients(&self) -> &Matrix {
        &self.s
    }

    pub fn rank(&self) -> usize {
        self.s.nrows()
    }

    /// Number of stored singular values above `eps`. Meaningful at step
    /// boundaries where `s` is diagonal; used for rank reporting so that a
    /// zero-padded initial state reports its actual rank.
    pub fn effective_rank(&self, eps: f64) -> usize {
        (0..self.rank())
            .filter(|&i| self.s[(i, i)].abs() > eps)
            .count()
            .max(1)
    }

    /// Frobenius norm of the represented matrix; equals `||s||_F` because the
    /// factors are orthonormal.
    pub fn frobenius_norm(&self) -> f64 {
        self.s.norm()
    }

    pub fn to_dense(&self) -> Matrix {
        &self.vx * &self.s * self.vy.transpose()
    }
}

/// Unnormalized factor triple `x * s * y^T`; the working representation for
/// right-hand sides, increments, and sources. `x` is n x p, `s` p x q, `y`
/// m x q.
#[derive(Debug, Clone)]
pub struct FactorTriple {
    pub x: Matrix,
    pub s: Matrix,
    pub y: Matrix,
}

impl FactorTriple {
    pub fn from_state(state: &LowRankState) -> Self {
        FactorTriple {
            x: state.vx.clone(),
            s: state.s.clone(),
            y: state.vy.clone(),
        }
    }

    /// Concatenate `sum_i coeff_i * t_i` without assembling anything dense:
    /// stack the x/y factors and build a block-diagonal core.
    pub fn weighted_concat(parts: &[(f64, &FactorTriple)]) -> Self {
        assert!(!parts.is_empty());
        let xs: Vec<&Matrix> = parts.iter().map(|(_, t)| &t.x).collect();
        let ys: Vec<&Matrix> = parts.iter().map(|(_, t)| &t.y).collect();
        let scaled: Vec<Matrix> = parts.iter().map(|(c, t)| &t.s * *c).collect();
        let refs: Vec<&Matrix> = scaled.iter().collect();
        FactorTriple {
            x: hcat(&xs),
            s: block_diag(&refs),
            y: hcat(&ys),
        }
    }

    /// `(x s y^T) v` computed right-to-left.
    pub fn right_mul(&self, v: &Matrix) -> Matrix {
        &self.x * (&self.s * (self.y.transpose() * v))
    }

    /// `(x s y^T)^T v = y s^T x^T v`.
    pub fn transpose_right_mul(&self, v: &Matrix) -> Matrix {
        &self.y * (self.s.transpose() * (self.x.transpose() * v))
    }

    /// `px^T (x s y^T) py`.
    pub fn project(&self, px: &Matrix, py: &Matrix) -> Matrix {
        (px.transpose() * &self.x) * &self.s * (self.y.transpose() * py)
    }

    pub fn to_dense(&self) -> Matrix {
        &self.x * &self.s * self.y.transpose()
    }
}

/// Separable positive weight `w(x, y) = w1(x) w2(y)` for the conservative
/// truncation.
#[derive(Debug, Clone)]
pub struct WeightFunction {
    pub w1: Vector,
    pub w2: Vector,
}

impl WeightFunction {
    pub fn new(w1: Vector, w2: Vector) -> Result<Self> {
        if w1.min() <= 0.0 || w2.min() <= 0.0 {
            return Err(Error::InvalidArgument(
                "weight function must be strictly positive".into(),
            ));
        }
        Ok(WeightFunction { w1, w2 })
    }

    pub fn uniform(n: usize) -> Self {
        WeightFunction {
            w1: Vector::from_element(n, 1.0),
            w2: Vector::from_element(n, 1.0),
        }
    }
}

/// Orthonormalize stacked candidate bases and drop directions whose singular
/// values fall below `tol`: QR of the concatenation, SVD of the R factor,
/// keep the leading left singular vectors mapped back through Q.
pub fn reduced_augmentation(bases: &[&Matrix], tol: f64) -> Result<Matrix> {
    let (q, u, kept) = reduce_stack(bases, tol)?;
    Ok(&q * u.columns(0, kept).clone_owned())
}

/// Paired form used by the scheme: reduce the x and y stacks independently
/// but keep the same number of columns on both sides (the larger of the two
/// counts), so the projected coefficient matrix stays square.
pub fn reduced_augmentation_pair(
    x_bases: &[&Matrix],
    y_bases: &[&Matrix],
    tol: f64,
) -> Result<(Matrix, Matrix)> {
    let (qx, ux, rx) = reduce_stack(x_bases, tol)?;
    let (qy, uy, ry) = reduce_stack(y_bases, tol)?;
    let r = rx.max(ry).min(ux.ncols()).min(uy.ncols());
    Ok((
        &qx * ux.columns(0, r).clone_owned(),
        &qy * uy.columns(0, r).clone_owned(),
    ))
}

fn reduce_stack(bases: &[&Matrix], tol: f64) -> Result<(Matrix, Matrix, usize)> {
    if bases.is_empty() {
        return Err(Error::InvalidArgument("no bases to augment".into()));
    }
    let stacked = hcat(bases);
    let f = qr_reduced(&stacked)?;
    let core = svd(&f.r)?;
    let kept = core.sigma.iter().filter(|&&s| s > tol).count().max(1);
    Ok((f.q, core.u, kept))
}

/// Rank selection rule for [`truncate_svd_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationCriterion {
    /// Keep singular values larger than `eps` (2-norm criterion).
    SpectralAbs,
    /// Keep the smallest rank whose discarded tail satisfies
    /// `sqrt(sum sigma_j^2) <= eps` (Frobenius criterion).
    FrobeniusAbs,
}

/// Truncate to the singular values above `eps`; the result has diagonal,
/// non-increasing `s`. Rank never drops below 1.
pub fn truncate_svd(state: &LowRankState, eps: f64) -> Result<LowRankState> {
    truncate_svd_with(state, eps, TruncationCriterion::SpectralAbs)
}

pub fn truncate_svd_with(
    state: &LowRankState,
    eps: f64,
    criterion: TruncationCriterion,
) -> Result<LowRankState> {
    let core = svd(&state.s)?;
    let r = match criterion {
        TruncationCriterion::SpectralAbs => core.sigma.iter().filter(|&&s| s > eps).count(),
        TruncationCriterion::FrobeniusAbs => {
            let mut rank = core.sigma.len();
            let mut tail = 0.0;
            while rank > 0 {
                let candidate = tail + core.sigma[rank - 1] * core.sigma[rank - 1];
                if candidate.sqrt() <= eps {
                    tail = candidate;
                    rank -= 1;
                } else {
                    break;
                }
            }
            rank
        }
    }
    .max(1);
    LowRankState::new(
        &state.vx * core.u.columns(0, r).clone_owned(),
        Matrix::from_diagonal(&core.sigma.rows(0, r).clone_owned()),
        &state.vy * core.v.columns(0, r).clone_owned(),
    )
}

/// Globally mass conservative truncation.
///
/// Splits the solution into a rank-one carrier `f1` holding exactly the
/// target mass `rho0` in the direction of the weight, plus a remainder `f2`
/// truncated at `eps` in the `1/w`-scaled inner product; the discarded part
/// of `f2` carries (numerically) zero mass. The recombined factors are
/// re-orthonormalized and rediagonalized before returning.
pub fn conservative_truncate(
    state: &LowRankState,
    w: &WeightFunction,
    rho0: f64,
    eps: f64,
    grid: &Grid2D,
) -> Result<LowRankState> {
    let n = state.vx.nrows();
    if w.w1.len() != n || w.w2.len() != state.vy.nrows() {
        return Err(Error::InvalidArgument(
            "weight length does not match grid".into(),
        ));
    }
    if w.w1.min() <= 0.0 || w.w2.min() <= 0.0 {
        return Err(Error::InvalidArgument(
            "weight function must be strictly positive".into(),
        ));
    }
    let area = grid.cell_area();
    let s_f1 = rho0 / (area * w.w1.sum() * w.w2.sum());

    let sqrt_w1 = w.w1.map(f64::sqrt);
    let sqrt_w2 = w.w2.map(f64::sqrt);

    // Remainder f2 = f - f1, scaled by 1/sqrt(w) on both sides. The first
    // stacked column is w/sqrt(w) = sqrt(w), so the scaled weight direction
    // is the leading column of each Q factor.
    let mut x_stack = Matrix::zeros(n, 1 + state.rank());
    let mut y_stack = Matrix::zeros(state.vy.nrows(), 1 + state.rank());
    for i in 0..n {
        x_stack[(i, 0)] = sqrt_w1[i];
        for j in 0..state.rank() {
            x_stack[(i, j + 1)] = state.vx[(i, j)] / sqrt_w1[i];
        }
    }
    for i in 0..state.vy.nrows() {
        y_stack[(i, 0)] = sqrt_w2[i];
        for j in 0..state.rank() {
            y_stack[(i, j + 1)] = state.vy[(i, j)] / sqrt_w2[i];
        }
    }
    let fx = qr_reduced(&x_stack)?;
    let fy = qr_reduced(&y_stack)?;
    let neg_f1 = Matrix::from_element(1, 1, -s_f1);
    let core = svd(&(&fx.r * block_diag(&[&neg_f1, &state.s]) * fy.r.transpose()))?;
    let r_f2 = core.sigma.iter().filter(|&&s| s > eps).count();

    // Recombine f1 + truncated f2 and orthonormalize the result.
    let mut x_out = Matrix::zeros(n, 1 + r_f2);
    let mut y_out = Matrix::zeros(state.vy.nrows(), 1 + r_f2);
    let ux = &fx.q * core.u.columns(0, r_f2).clone_owned();
    let uy = &fy.q * core.v.columns(0, r_f2).clone_owned();
    for i in 0..n {
        x_out[(i, 0)] = w.w1[i];
        for j in 0..r_f2 {
            x_out[(i, j + 1)] = sqrt_w1[i] * ux[(i, j)];
        }
    }
    for i in 0..state.vy.nrows() {
        y_out[(i, 0)] = w.w2[i];
        for j in 0..r_f2 {
            y_out[(i, j + 1)] = sqrt_w2[i] * uy[(i, j)];
        }
    }
    let s_blocks = Matrix::from_fn(1 + r_f2, 1 + r_f2, |i, j| {
        if i == 0 && j == 0 {
            s_f1
        } else if i == j {
            core.sigma[i - 1]
        } else {
            0.0
        }
    });
    LowRankState::from_triple(&FactorTriple {
        x: x_out,
        s: s_blocks,
        y: y_out,
    })
}

/// Total discrete mass `dx dy * sum_ij U_ij`, computed factor-wise.
pub fn mass(state: &LowRankState, grid: &Grid2D) -> f64 {
    let ones_x = Vector::from_element(state.vx.nrows(), 1.0);
    let ones_y = Vector::from_element(state.vy.nrows(), 1.0);
    let left = state.vx.transpose() * ones_x;
    let right = state.vy.transpose() * ones_y;
    grid.cell_area() * (left.transpose() * &state.s * right)[(0, 0)]
}

/// Discrete L1 distance `dx dy * sum_ij |a_ij - b_ij|` between two states.
pub fn l1_error(a: &LowRankState, b: &LowRankState, grid: &Grid2D) -> Result<f64> {
    if a.vx.nrows() != b.vx.nrows() || a.vy.nrows() != b.vy.nrows() {
        return Err(Error::InvalidArgument("grid sizes differ".into()));
    }
    Ok(l1_error_dense(a, &b.to_dense(), grid))
}

/// L1 distance against a dense reference field on the same grid.
pub fn l1_error_dense(a: &LowRankState, b: &Matrix, grid: &Grid2D) -> f64 {
    let diff = a.to_dense() - b;
    grid.cell_area() * diff.iter().map(|x| x.abs()).sum::<f64>()
}

/// Orthonormal columns completing `v` towards higher rank, built by
/// Gram-Schmidt over coordinate directions taken in the given preference
/// order (deterministic for a fixed order).
pub fn orthonormal_completion(v: &Matrix, extra: usize, order: &[usize]) -> Result<Matrix> {
    let n = v.nrows();
    if v.ncols() + extra > n {
        return Err(Error::InvalidArgument(
            "completion would exceed the ambient dimension".into(),
        ));
    }
    let mut cols: Vec<Vector> = Vec::with_capacity(extra);
    for &k in order {
        if cols.len() == extra {
            break;
        }
        let mut w = Vector::zeros(n);
        w[k] = 1.0;
        for _ in 0..2 {
            w -= v * (v.transpose() * &w);
            for c in &cols {
                let proj = c.dot(&w);
                w -= proj * c;
            }
        }
        let norm = w.norm();
        if norm > 1e-6 {
            cols.push(w / norm);
        }
    }
    if cols.len() < extra {
        return Err(Error::Numerical(
            "could not complete the basis from coordinate directions".into(),
        ));
    }
    let mut out = Matrix::zeros(n, extra);
    for (j, c) in cols.iter().enumerate() {
        out.set_column(j, c);
    }
    Ok(out)
}

/// Coordinate indices sorted by how strongly the factor rows participate in
/// the solution (rows weighted by the singular values), largest first.
/// Padding directions picked in this order live on the solution's support,
/// so the first step's projection space couples to the dynamics there;
/// completing from an arbitrary corner of the grid would waste the padding
/// on regions where the solution vanishes.
fn support_order(v: &Matrix, s: &Matrix) -> Vec<usize> {
    let mut weights: Vec<(usize, f64)> = (0..v.nrows())
        .map(|i| {
            let w = (0..v.ncols()).map(|j| (v[(i, j)] * s[(j, j)]).abs()).sum();
            (i, w)
        })
        .collect();
    weights.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    weights.into_iter().map(|(i, _)| i).collect()
}

/// Pad (or trim) a diagonal-core state to exactly `r0` columns: keep the
/// leading `min(rank, r0)` singular triplets and append zero singular values
/// on completed basis directions.
pub fn pad_to_rank(state: &LowRankState, r0: usize) -> Result<LowRankState> {
    let r = state.rank();
    if r0 == r {
        return Ok(state.clone());
    }
    if r0 < r {
        let s = Matrix::from_fn(r0, r0, |i, j| if i == j { state.s[(i, i)] } else { 0.0 });
        return LowRankState::new(
            state.vx.columns(0, r0).clone_owned(),
            s,
            state.vy.columns(0, r0).clone_owned(),
        );
    }
    let extra = r0 - r;
    let cx = orthonormal_completion(&state.vx, extra, &support_order(&state.vx, &state.s))?;
    let cy = orthonormal_completion(&state.vy, extra, &support_order(&state.vy, &state.s))?;
    let vx = hcat(&[&state.vx, &cx]);
    let vy = hcat(&[&state.vy, &cy]);
    let s = Matrix::from_fn(r0, r0, |i, j| {
        if i == j && i < r {
            state.s[(i, i)]
        } else {
            0.0
        }
    });
    LowRankState::new(vx, s, vy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::make_grid;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_orthonormal(rng: &mut impl Rng, n: usize, r: usize) -> Matrix {
        let a = Matrix::from_fn(n, r, |_, _| rng.gen_range(-1.0..1.0));
        qr_reduced(&a).unwrap().q
    }

    fn random_state(rng: &mut impl Rng, n: usize, sigmas: &[f64]) -> LowRankState {
        let r = sigmas.len();
        let vx = random_orthonormal(rng, n, r);
        let vy = random_orthonormal(rng, n, r);
        let s = Matrix::from_fn(r, r, |i, j| if i == j { sigmas[i] } else { 0.0 });
        LowRankState::new(vx, s, vy).unwrap()
    }

    fn grid2(n: usize, left: f64, right: f64) -> Grid2D {
        Grid2D::square(&make_grid(n, left, right).unwrap())
    }

    #[test]
    fn augmentation_of_duplicate_basis_keeps_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let v = random_orthonormal(&mut rng, 20, 4);
        let out = reduced_augmentation(&[&v, &v], 1e-12).unwrap();
        assert_eq!(out.ncols(), 4);
        let p_in = &v * v.transpose();
        let p_out = &out * out.transpose();
        assert!((p_in - p_out).abs().max() < 1e-10);
    }

    #[test]
    fn augmentation_of_orthogonal_blocks_adds_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let q = random_orthonormal(&mut rng, 20, 7);
        let q1 = q.columns(0, 3).clone_owned();
        let q2 = q.columns(3, 4).clone_owned();
        let out = reduced_augmentation(&[&q1, &q2], 1e-12).unwrap();
        assert_eq!(out.ncols(), 7);
    }

    #[test]
    fn augmentation_matches_dense_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..10 {
            let v = random_orthonormal(&mut rng, 16, 3);
            // Near-degenerate second block: a rotation of the first plus noise.
            let noise = Matrix::from_fn(16, 3, |_, _| rng.gen_range(-1e-14..1e-14));
            let w = qr_reduced(&(&v + noise)).unwrap().q;
            let out = reduced_augmentation(&[&v, &w], 1e-12).unwrap();
            let stacked = hcat(&[&v, &w]);
            let oracle = svd(&stacked).unwrap();
            let expected = oracle.sigma.iter().filter(|&&s| s > 1e-12).count();
            assert_eq!(out.ncols(), expected);
        }
    }

    #[test]
    fn augmentation_projector_dominates_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let a = random_orthonormal(&mut rng, 24, 5);
        let b = random_orthonormal(&mut rng, 24, 4);
        let tol = 1e-12;
        let out = reduced_augmentation(&[&a, &b], tol).unwrap();
        assert!(
            (out.transpose() * &out - Matrix::identity(out.ncols(), out.ncols()))
                .abs()
                .max()
                < 1e-10
        );
        let residual_a = (&a - &out * (out.transpose() * &a)).norm();
        let residual_b = (&b - &out * (out.transpose() * &b)).norm();
        let bound = 10.0 * tol * 9.0;
        assert!(residual_a <= bound.max(1e-10));
        assert!(residual_b <= bound.max(1e-10));
    }

    #[test]
    fn paired_augmentation_equalizes_ranks() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let vx = random_orthonormal(&mut rng, 20, 3);
        let vy = random_orthonormal(&mut rng, 20, 3);
        // x side: duplicate spans, y side: disjoint spans.
        let wx = vx.clone();
        let wy = random_orthonormal(&mut rng, 20, 3);
        let (px, py) = reduced_augmentation_pair(&[&vx, &wx], &[&vy, &wy], 1e-12).unwrap();
        assert_eq!(px.ncols(), py.ncols());
        assert!(px.ncols() >= 3);
    }

    #[test]
    fn truncation_by_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let state = random_state(&mut rng, 12, &[1.0, 1e-3, 1e-9]);
        let out = truncate_svd(&state, 1e-6).unwrap();
        assert_eq!(out.rank(), 2);
        assert_relative_eq!(out.coefficients()[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.coefficients()[(1, 1)], 1e-3, epsilon = 1e-12);
    }

    #[test]
    fn truncation_keeps_rank_one_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let state = random_state(&mut rng, 12, &[1.0]);
        let out = truncate_svd(&state, 1e-6).unwrap();
        assert_eq!(out.rank(), 1);
        assert!((out.to_dense() - state.to_dense()).abs().max() < 1e-12);
    }

    #[test]
    fn truncation_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let sig: Vec<f64> = (0..8).map(|i| 10.0f64.powi(-i)).collect();
        let state = random_state(&mut rng, 20, &sig);
        let out = truncate_svd(&state, 1e-4).unwrap();
        let dense = svd(&state.to_dense()).unwrap();
        let keep = dense.sigma.iter().filter(|&&s| s > 1e-4).count();
        assert_eq!(out.rank(), keep);
        let oracle = dense.u.columns(0, keep)
            * Matrix::from_diagonal(&dense.sigma.rows(0, keep).clone_owned())
            * dense.v.columns(0, keep).transpose();
        assert!((out.to_dense() - oracle).abs().max() < 1e-10);
    }

    #[test]
    fn truncation_never_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let state = random_state(&mut rng, 15, &[2.0, 1.0, 0.5, 1e-7]);
        let out = truncate_svd(&state, 1e-5).unwrap();
        assert!(out.rank() <= state.rank());
        assert!(out.frobenius_norm() <= state.frobenius_norm() + 1e-14);
    }

    #[test]
    fn frobenius_criterion() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let state = random_state(&mut rng, 12, &[1.0, 3e-7, 4e-7]);
        // Tail sqrt((3e-7)^2 + (4e-7)^2) = 5e-7 <= 6e-7: both dropped.
        let out = truncate_svd_with(&state, 6e-7, TruncationCriterion::FrobeniusAbs).unwrap();
        assert_eq!(out.rank(), 1);
        // The 2-norm criterion at the same eps keeps both of them.
        let out2 = truncate_svd(&state, 2.9e-7).unwrap();
        assert_eq!(out2.rank(), 3);
    }

    #[test]
    fn mass_of_constant_field() {
        let grid = grid2(16, 0.0, 1.0);
        let n = 16;
        let ones = Vector::from_element(n, 1.0);
        let state = LowRankState::from_separable_terms(&[(1.0, ones.clone(), ones)]).unwrap();
        assert_relative_eq!(mass(&state, &grid), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn mass_matches_dense_sum_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let grid = grid2(12, -2.0, 2.0);
        let a = random_state(&mut rng, 12, &[1.0, 0.3]);
        let b = random_state(&mut rng, 12, &[0.7, 0.2, 0.1]);
        let dense_mass = |m: &Matrix| grid.cell_area() * m.iter().sum::<f64>();
        assert_relative_eq!(mass(&a, &grid), dense_mass(&a.to_dense()), epsilon = 1e-12);
        // Linearity through factor concatenation.
        let combo = FactorTriple::weighted_concat(&[
            (2.0, &FactorTriple::from_state(&a)),
            (-0.5, &FactorTriple::from_state(&b)),
        ]);
        let combo_state = LowRankState::from_triple(&combo).unwrap();
        assert_relative_eq!(
            mass(&combo_state, &grid),
            2.0 * mass(&a, &grid) - 0.5 * mass(&b, &grid),
            epsilon = 1e-12,
            max_relative = 1e-12
        );
    }

    #[test]
    fn l1_error_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let grid = grid2(10, 0.0, 1.0);
        let a = random_state(&mut rng, 10, &[1.0, 0.4]);
        assert_relative_eq!(l1_error(&a, &a, &grid).unwrap(), 0.0, epsilon = 1e-14);
        // Constant offset c over the unit square integrates to |c|.
        let shifted = a.to_dense() + Matrix::from_element(10, 10, 0.37);
        assert_relative_eq!(l1_error_dense(&a, &shifted, &grid), 0.37, epsilon = 1e-12);
        let b = random_state(&mut rng, 10, &[0.9, 0.2]);
        let dense = (a.to_dense() - b.to_dense())
            .iter()
            .map(|x| x.abs())
            .sum::<f64>()
            * grid.cell_area();
        assert_relative_eq!(l1_error(&a, &b, &grid).unwrap(), dense, epsilon = 1e-12);
    }

    /// Dense execution of the conservative truncation, mirroring the factored
    /// implementation on the assembled matrix.
    fn conservative_truncate_dense_oracle(
        u: &Matrix,
        w: &WeightFunction,
        rho0: f64,
        eps: f64,
        grid: &Grid2D,
    ) -> Matrix {
        let n = u.nrows();
        let area = grid.cell_area();
        let s_f1 = rho0 / (area * w.w1.sum() * w.w2.sum());
        let f1 = Matrix::from_fn(n, n, |i, j| s_f1 * w.w1[i] * w.w2[j]);
        let scaled = Matrix::from_fn(n, n, |i, j| {
            (u[(i, j)] - f1[(i, j)]) / (w.w1[i].sqrt() * w.w2[j].sqrt())
        });
        let f = svd(&scaled).unwrap();
        let keep = f.sigma.iter().filter(|&&s| s > eps).count();
        let trunc = f.u.columns(0, keep)
            * Matrix::from_diagonal(&f.sigma.rows(0, keep).clone_owned())
            * f.v.columns(0, keep).transpose();
        let f2 = Matrix::from_fn(n, n, |i, j| {
            trunc[(i, j)] * (w.w1[i].sqrt() * w.w2[j].sqrt())
        });
        f1 + f2
    }

    #[test]
    fn conservative_truncation_is_identity_on_the_carrier() {
        let n = 16;
        let grid = grid2(n, 0.0, 1.0);
        let w = WeightFunction::uniform(n);
        let rho0 = 2.5;
        let amp = rho0 / (grid.cell_area() * (n * n) as f64);
        let ones = Vector::from_element(n, 1.0);
        let state = LowRankState::from_separable_terms(&[(amp, ones.clone(), ones)]).unwrap();
        let out = conservative_truncate(&state, &w, rho0, 1e-6, &grid).unwrap();
        assert_eq!(out.rank(), 1);
        assert!((out.to_dense() - state.to_dense()).abs().max() < 1e-12);
    }

    #[test]
    fn conservative_truncation_preserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let grid = grid2(20, -4.0, 4.0);
        let w = WeightFunction::uniform(20);
        for _ in 0..5 {
            let state = random_state(&mut rng, 20, &[1.0, 1e-2, 1e-5, 1e-7, 1e-9]);
            let rho0 = mass(&state, &grid);
            let out = conservative_truncate(&state, &w, rho0, 1e-6, &grid).unwrap();
            assert!(out.rank() < state.rank() + 1, "something was truncated");
            let dev = (mass(&out, &grid) - rho0).abs();
            assert!(dev <= 1e-12 * rho0.abs().max(1e-3), "mass drift {dev:.3e}");
        }
    }

    #[test]
    fn conservative_truncation_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let n = 24;
        let grid = grid2(n, -8.0, 8.0);
        let delta = 5.0e-9;
        let w1 = Vector::from_fn(n, |i, _| (-grid.x.points[i].powi(2) / 2.0).exp() + delta);
        let w = WeightFunction::new(w1.clone(), w1).unwrap();
        for _ in 0..5 {
            // Decaying tails keep the weighted remainder well-scaled.
            let gx = Vector::from_fn(n, |i, _| (-grid.x.points[i].powi(2)).exp());
            let mut terms = vec![(1.0, gx.clone(), gx.clone())];
            for k in 1..4 {
                let fx = Vector::from_fn(n, |i, _| {
                    let x = grid.x.points[i];
                    (-x * x).exp() * x.powi(k) * rng.gen_range(0.5..1.0)
                });
                let fy = Vector::from_fn(n, |i, _| {
                    let y = grid.x.points[i];
                    (-y * y).exp() * y.powi(4 - k) * rng.gen_range(0.5..1.0)
                });
                terms.push((10.0f64.powi(-(2 * k)), fx, fy));
            }
            let state = LowRankState::from_separable_terms(&terms).unwrap();
            let rho0 = mass(&state, &grid);
            let eps = 1e-6;
            let out = conservative_truncate(&state, &w, rho0, eps, &grid).unwrap();
            let oracle =
                conservative_truncate_dense_oracle(&state.to_dense(), &w, rho0, eps, &grid);
            assert!(
                (out.to_dense() - &oracle).abs().max() <= 1e-10 * oracle.abs().max().max(1.0),
                "entrywise mismatch"
            );
        }
    }

    #[test]
    fn conservative_truncation_discard_carries_no_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let n = 20;
        let grid = grid2(n, 0.0, 1.0);
        let w = WeightFunction::uniform(n);
        let state = random_state(&mut rng, n, &[1.0, 1e-3, 1e-8, 1e-9]);
        let rho0 = mass(&state, &grid);
        let out = conservative_truncate(&state, &w, rho0, 1e-6, &grid).unwrap();
        let discarded = state.to_dense() - out.to_dense();
        let discarded_mass = grid.cell_area() * discarded.iter().sum::<f64>();
        assert!(discarded_mass.abs() <= 1e-12 * rho0.abs().max(1.0));
    }

    #[test]
    fn conservative_truncation_rejects_bad_weight() {
        let n = 8;
        let grid = grid2(n, 0.0, 1.0);
        let mut w = WeightFunction::uniform(n);
        w.w1[3] = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let state = random_state(&mut rng, n, &[1.0]);
        assert!(conservative_truncate(&state, &w, 1.0, 1e-6, &grid).is_err());
    }

    #[test]
    fn padding_and_trimming() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let state = random_state(&mut rng, 16, &[1.0, 0.5]);
        let padded = pad_to_rank(&state, 6).unwrap();
        assert_eq!(padded.rank(), 6);
        assert_eq!(padded.effective_rank(1e-12), 2);
        assert!((padded.to_dense() - state.to_dense()).abs().max() < 1e-12);
        let trimmed = pad_to_rank(&padded, 2).unwrap();
        assert!((trimmed.to_dense() - state.to_dense()).abs().max() < 1e-12);
    }

    #[test]
    fn state_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let v = random_orthonormal(&mut rng, 10, 3);
        let bad = &v * 1.01;
        assert!(LowRankState::new(bad, Matrix::identity(3, 3), v.clone()).is_err());
        assert!(LowRankState::new(v.clone(), Matrix::identity(2, 2), v).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn truncation_is_contractive(
                seed in 0u64..1000,
                exponents in proptest::collection::vec(-12.0f64..0.0, 1..8),
                eps_exp in -10.0f64..-1.0,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let sig: Vec<f64> = exponents.iter().map(|e| 10.0f64.powf(*e)).collect();
                let state = random_state(&mut rng, 16, &sig);
                let eps = 10.0f64.powf(eps_exp);
                let out = truncate_svd(&state, eps).unwrap();
                prop_assert!(out.rank() <= state.rank());
                prop_assert!(out.frobenius_norm() <= state.frobenius_norm() + 1e-12);
                let expected = sig.iter().filter(|&&s| s > eps).count().max(1);
                prop_assert_eq!(out.rank(), expected);
            }

            #[test]
            fn augmentation_span_contains_inputs(
                seed in 0u64..1000,
                r1 in 1usize..5,
                r2 in 1usize..5,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_orthonormal(&mut rng, 18, r1);
                let b = random_orthonormal(&mut rng, 18, r2);
                let out = reduced_augmentation(&[&a, &b], 1e-12).unwrap();
                let res_a = (&a - &out * (out.transpose() * &a)).norm();
                let res_b = (&b - &out * (out.transpose() * &b)).norm();
                let bound = 10.0 * 1e-12 * (r1 + r2) as f64;
                prop_assert!(res_a <= bound.max(1e-10));
                prop_assert!(res_b <= bound.max(1e-10));
            }
        }
    }
}
