//! Benchmark problems: anisotropic diffusion, rigid-body rotation with
//! diffusion, swirling deformation with diffusion, and the 0D2V
//! Lenard-Bernstein-Fokker-Planck relaxation. Also hosts the low-rank
//! advection flux assembly shared by all advection problems.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::integrator::ProblemOperators;
use crate::linalg::{block_diag, hcat, Matrix, Vector};
use crate::lowrank::{pad_to_rank, FactorTriple, LowRankState, WeightFunction};
use crate::spectral::{fourier_diff, make_grid, Grid2D};

/// Dense exact-solution evaluator, `t -> U(t)`.
pub type ExactField = Arc<dyn Fn(f64) -> Matrix + Send + Sync>;

/// Rank-one advection component `a(x, y, t) = ax(x) at(t) ay(y)`, sampled on
/// the grid.
#[derive(Clone)]
pub struct RankOneFlow {
    pub ax: Vector,
    pub at: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub ay: Vector,
}

impl RankOneFlow {
    fn constant_in_time(ax: Vector, ay: Vector) -> Self {
        RankOneFlow {
            ax,
            at: Arc::new(|_| 1.0),
            ay,
        }
    }
}

/// Columnwise Hadamard product: scale row `i` of `m` by `v[i]`.
fn col_hadamard(v: &Vector, m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for i in 0..out.nrows() {
            out[(i, j)] *= v[i];
        }
    }
    out
}

/// Negated divergence of the advection flux in factorized form:
/// `-(D_x (a1x * Vx)) (a1t S) (a1y * Vy)^T - (a2x * Vx) (a2t S) (D_y (a2y * Vy))^T`,
/// a rank-2r triple. Nothing N x N is ever assembled.
pub fn explicit_flux_divergence(
    state: &LowRankState,
    flows: &[RankOneFlow; 2],
    d1x: &Matrix,
    d1y: &Matrix,
    t: f64,
) -> FactorTriple {
    let s = state.coefficients();
    let a1 = &flows[0];
    let a2 = &flows[1];
    let x1 = d1x * col_hadamard(&a1.ax, state.basis_x());
    let y1 = col_hadamard(&a1.ay, state.basis_y());
    let x2 = col_hadamard(&a2.ax, state.basis_x());
    let y2 = d1y * col_hadamard(&a2.ay, state.basis_y());
    let s1 = s * (-(a1.at)(t));
    let s2 = s * (-(a2.at)(t));
    FactorTriple {
        x: hcat(&[&x1, &x2]),
        s: block_diag(&[&s1, &s2]),
        y: hcat(&[&y1, &y2]),
    }
}

/// Run parameters a benchmark was reported with; the runner falls back to
/// these when the caller leaves a field unset.
#[derive(Debug, Clone, Copy)]
pub struct RunDefaults {
    pub n: usize,
    pub lambda: f64,
    pub eps: f64,
    pub r0: usize,
    pub t_final: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Diffusion,
    RigidRotation { with_source: bool },
    Swirling,
    Lbfp,
}

/// A benchmark definition; `build` materializes it on a grid.
#[derive(Clone)]
pub struct BenchmarkSpec {
    pub name: &'static str,
    pub description: &'static str,
    pub x_domain: (f64, f64),
    pub y_domain: (f64, f64),
    pub defaults: RunDefaults,
    pub has_advection: bool,
    pub has_exact_solution: bool,
    kind: Kind,
}

/// A benchmark discretized on a concrete grid: operators, initial state,
/// optional exact solution and equilibrium, and the weight the conservative
/// truncation should use.
pub struct DiscreteProblem {
    pub grid: Grid2D,
    pub ops: ProblemOperators,
    pub initial: LowRankState,
    pub exact: Option<ExactField>,
    pub equilibrium: Option<Matrix>,
    pub default_weight: WeightFunction,
}

/// Anisotropic diffusion `u_t = d1 u_xx + d2 u_yy` on (0, 14)^2 with
/// d1 = 1/4, d2 = 1/9 and a rank-two sum of Gaussians as initial data.
pub fn make_diffusion_benchmark() -> BenchmarkSpec {
    BenchmarkSpec {
        name: "diffusion",
        description: "anisotropic diffusion of a rank-two pair of Gaussians",
        x_domain: (0.0, 14.0),
        y_domain: (0.0, 14.0),
        defaults: RunDefaults {
            n: 200,
            lambda: 0.3,
            eps: 1e-8,
            r0: 20,
            t_final: 0.5,
        },
        has_advection: false,
        has_exact_solution: false,
        kind: Kind::Diffusion,
    }
}

/// `u_t - y u_x + x u_y = d (u_xx + u_yy) + phi` on (-2 pi, 2 pi)^2 with
/// d = 1/5 and a manufactured source so that
/// `u = exp(-(x^2 + 3 y^2 + 2 d t))` solves the problem exactly.
pub fn make_rigid_rotation_benchmark() -> BenchmarkSpec {
    BenchmarkSpec {
        name: "rigid-rotation",
        description:
            "rigid body rotation with diffusion and a manufactured source (exact solution attached)",
        x_domain: (-2.0 * PI, 2.0 * PI),
        y_domain: (-2.0 * PI, 2.0 * PI),
        defaults: RunDefaults {
            n: 200,
            lambda: 0.5,
            eps: 1e-8,
            r0: 20,
            t_final: 0.5,
        },
        has_advection: true,
        has_exact_solution: true,
        kind: Kind::RigidRotation { with_source: true },
    }
}

/// Source-free variant with `u0 = exp(-(x^2 + 9 y^2))`: the solution rotates
/// about the origin, so the rank is near-minimal at t = 0 and t = pi/2 with
/// a maximum in between.
pub fn make_rigid_rotation_rank_benchmark() -> BenchmarkSpec {
    BenchmarkSpec {
        name: "rigid-rotation-rank",
        description: "source-free rigid rotation of an anisotropic Gaussian (rank dynamics study)",
        x_domain: (-2.0 * PI, 2.0 * PI),
        y_domain: (-2.0 * PI, 2.0 * PI),
        defaults: RunDefaults {
            n: 200,
            lambda: 0.15,
            eps: 1e-8,
            r0: 20,
            t_final: PI / 2.0,
        },
        has_advection: true,
        has_exact_solution: false,
        kind: Kind::RigidRotation { with_source: false },
    }
}

/// Swirling deformation with diffusion on (-pi, pi)^2; the flow reverses at
/// `t = T_f / 2` through the time factor `f(t) = pi cos(pi t / T_f)`.
pub fn make_swirling_benchmark() -> BenchmarkSpec {
    BenchmarkSpec {
        name: "swirling",
        description: "swirling deformation with diffusion of a C^5 cosine bell",
        x_domain: (-PI, PI),
        y_domain: (-PI, PI),
        defaults: RunDefaults {
            n: 100,
            lambda: 0.15,
            eps: 1e-8,
            r0: 15,
            t_final: 0.5,
        },
        has_advection: true,
        has_exact_solution: false,
        kind: Kind::Swirling,
    }
}

/// 0D2V Lenard-Bernstein-Fokker-Planck relaxation on (-8, 8)^2 with
/// R = 1/6, T = 3 (so D = RT = 1/2), and a two-Maxwellian initial state
/// whose total density, momentum and temperature match the equilibrium.
pub fn make_lbfp_benchmark() -> BenchmarkSpec {
    BenchmarkSpec {
        name: "lbfp",
        description: "Lenard-Bernstein-Fokker-Planck relaxation of two drifting Maxwellians",
        x_domain: (-8.0, 8.0),
        y_domain: (-8.0, 8.0),
        defaults: RunDefaults {
            n: 300,
            lambda: 0.15,
            eps: 1e-6,
            r0: 30,
            t_final: 15.0,
        },
        has_advection: true,
        has_exact_solution: false,
        kind: Kind::Lbfp,
    }
}

pub fn all_benchmarks() -> Vec<BenchmarkSpec> {
    vec![
        make_diffusion_benchmark(),
        make_rigid_rotation_benchmark(),
        make_rigid_rotation_rank_benchmark(),
        make_swirling_benchmark(),
        make_lbfp_benchmark(),
    ]
}

pub fn benchmark_by_name(name: &str) -> Result<BenchmarkSpec> {
    all_benchmarks()
        .into_iter()
        .find(|b| b.name == name)
        .ok_or_else(|| Error::Config(format!("unknown problem '{name}'")))
}

/// Gas constant of the LBFP model.
pub const LBFP_R: f64 = 1.0 / 6.0;
/// Table of the two initial Maxwellians: (n, vbar_x, T).
pub const LBFP_MAXWELLIANS: [(f64, f64, f64); 2] = [
    (1.990964530353041, 0.4979792385268875, 2.46518981703837),
    (1.150628123236752, -0.8616676237412346, 0.4107062104302872),
];
/// Robustness shift of the Maxwellian weight function.
pub const LBFP_WEIGHT_DELTA: f64 = 5.0e-9;

/// Cosine bell of the swirling benchmark.
pub fn cosine_bell(x: f64, y: f64) -> f64 {
    let r0 = 0.3 * PI;
    let r = ((x - 0.3 * PI).powi(2) + y * y).sqrt();
    if r < r0 {
        r0 * (r * PI / (2.0 * r0)).cos().powi(6)
    } else {
        0.0
    }
}

impl BenchmarkSpec {
    /// Discretize on an `n x n` grid. `t_final` parameterizes flows that
    /// depend on the horizon (swirling reversal); `r0` pads the initial rank.
    pub fn build(&self, n: usize, t_final: f64, r0: usize) -> Result<DiscreteProblem> {
        let gx = make_grid(n, self.x_domain.0, self.x_domain.1)?;
        let gy = make_grid(n, self.y_domain.0, self.y_domain.1)?;
        let dx_ops = fourier_diff(&gx);
        let dy_ops = fourier_diff(&gy);
        let grid = Grid2D {
            x: gx.clone(),
            y: gy.clone(),
        };
        let xs = &gx.points;
        let ys = &gy.points;

        match self.kind {
            Kind::Diffusion => {
                let ops =
                    ProblemOperators::implicit_only(&dx_ops.d2 * 0.25, &dy_ops.d2 * (1.0 / 9.0));
                let g = |c: f64, pts: &Vector| pts.map(|v| (-15.0 * (v - c) * (v - c)).exp());
                let initial = LowRankState::from_separable_terms(&[
                    (0.8, g(6.5, xs), g(6.5, ys)),
                    (0.5, g(7.5, xs), g(7.0, ys)),
                ])?;
                Ok(DiscreteProblem {
                    grid,
                    ops,
                    initial: pad_to_rank(&initial, r0)?,
                    exact: None,
                    equilibrium: None,
                    default_weight: WeightFunction::uniform(n),
                })
            }
            Kind::RigidRotation { with_source } => {
                let d = 0.2;
                let fx = &dx_ops.d2 * d;
                let fy = &dy_ops.d2 * d;
                // a1 = -y, a2 = x.
                let flows = [
                    RankOneFlow {
                        ax: Vector::from_element(n, 1.0),
                        at: Arc::new(|_| -1.0),
                        ay: ys.clone(),
                    },
                    RankOneFlow::constant_in_time(xs.clone(), Vector::from_element(n, 1.0)),
                ];
                let d1x = dx_ops.d1.clone();
                let d1y = dy_ops.d1.clone();
                let ops = ProblemOperators {
                    fx,
                    fy,
                    explicit_term: Some(Box::new(move |t, state| {
                        explicit_flux_divergence(state, &flows, &d1x, &d1y, t)
                    })),
                    source: if with_source {
                        Some(rigid_rotation_source(xs, ys, d))
                    } else {
                        None
                    },
                };
                let gxv = xs.map(|x| (-x * x).exp());
                let (gyv, exact): (Vector, Option<ExactField>) = if with_source {
                    let gyv = ys.map(|y| (-3.0 * y * y).exp());
                    let (gx_c, gy_c) = (gxv.clone(), gyv.clone());
                    let f: ExactField =
                        Arc::new(move |t: f64| &gx_c * gy_c.transpose() * (-2.0 * d * t).exp());
                    (gyv, Some(f))
                } else {
                    (ys.map(|y| (-9.0 * y * y).exp()), None)
                };
                let initial = LowRankState::from_separable_terms(&[(1.0, gxv, gyv)])?;
                Ok(DiscreteProblem {
                    grid,
                    ops,
                    initial: pad_to_rank(&initial, r0)?,
                    exact,
                    equilibrium: None,
                    default_weight: WeightFunction::uniform(n),
                })
            }
            Kind::Swirling => {
                let fx = dx_ops.d2.clone();
                let fy = dy_ops.d2.clone();
                let tf = t_final;
                let reversal = move |t: f64| PI * (PI * t / tf).cos();
                let neg_reversal = move |t: f64| -reversal(t);
                let flows = [
                    RankOneFlow {
                        ax: xs.map(|x| (x / 2.0).cos().powi(2)),
                        at: Arc::new(neg_reversal),
                        ay: ys.map(|y| y.sin()),
                    },
                    RankOneFlow {
                        ax: xs.map(|x| x.sin()),
                        at: Arc::new(reversal),
                        ay: ys.map(|y| (y / 2.0).cos().powi(2)),
                    },
                ];
                let d1x = dx_ops.d1.clone();
                let d1y = dy_ops.d1.clone();
                let ops = ProblemOperators {
                    fx,
                    fy,
                    explicit_term: Some(Box::new(move |t, state| {
                        explicit_flux_divergence(state, &flows, &d1x, &d1y, t)
                    })),
                    source: None,
                };
                // The bell is not separable; the discrete initial state is its
                // SVD compression at 1e-12, then padded/trimmed to r0.
                let dense = Matrix::from_fn(n, n, |i, j| cosine_bell(xs[i], ys[j]));
                let compressed = LowRankState::from_dense_svd(&dense, 1e-12)?;
                Ok(DiscreteProblem {
                    grid,
                    ops,
                    initial: pad_to_rank(&compressed, r0)?,
                    exact: None,
                    equilibrium: None,
                    default_weight: WeightFunction::uniform(n),
                })
            }
            Kind::Lbfp => {
                let diffusion = LBFP_R * 3.0; // D = R T = 1/2
                let fx = &dx_ops.d2 * diffusion;
                let fy = &dy_ops.d2 * diffusion;
                // Drift components a1 = -(vx - vbar_x), a2 = -(vy - vbar_y)
                // with zero total bulk velocity.
                let flows = [
                    RankOneFlow::constant_in_time(xs.map(|v| -v), Vector::from_element(n, 1.0)),
                    RankOneFlow::constant_in_time(Vector::from_element(n, 1.0), ys.map(|v| -v)),
                ];
                let d1x = dx_ops.d1.clone();
                let d1y = dy_ops.d1.clone();
                let ops = ProblemOperators {
                    fx,
                    fy,
                    explicit_term: Some(Box::new(move |t, state| {
                        explicit_flux_divergence(state, &flows, &d1x, &d1y, t)
                    })),
                    source: None,
                };
                let mut terms = Vec::new();
                for (dens, vbar, temp) in LBFP_MAXWELLIANS {
                    let rt2 = 2.0 * LBFP_R * temp;
                    terms.push((
                        dens / (PI * rt2),
                        xs.map(|v| (-(v - vbar) * (v - vbar) / rt2).exp()),
                        ys.map(|v| (-v * v / rt2).exp()),
                    ));
                }
                let initial = LowRankState::from_separable_terms(&terms)?;
                // Equilibrium Maxwellian: n = pi, RT = 1/2 makes the
                // prefactor exactly 1.
                let equilibrium =
                    Matrix::from_fn(n, n, |i, j| (-xs[i] * xs[i] - ys[j] * ys[j]).exp());
                let w1 = xs.map(|v| (-v * v / 2.0).exp() + LBFP_WEIGHT_DELTA);
                let w2 = ys.map(|v| (-v * v / 2.0).exp() + LBFP_WEIGHT_DELTA);
                Ok(DiscreteProblem {
                    grid,
                    ops,
                    initial: pad_to_rank(&initial, r0)?,
                    exact: None,
                    equilibrium: Some(equilibrium),
                    default_weight: WeightFunction::new(w1, w2)?,
                })
            }
        }
    }
}

/// The manufactured source of the rigid rotation benchmark,
/// `phi = (6d - 4xy - 4d(x^2 + 9y^2)) exp(-(x^2 + 3y^2 + 2dt))`,
/// decomposed analytically into separable factors: the x-factors are
/// `(Gx, x Gx, x^2 Gx)`, the y-factors `(Gy, y Gy, y^2 Gy)`, and the
/// time-dependent 3x3 coefficient couples them.
fn rigid_rotation_source(
    xs: &Vector,
    ys: &Vector,
    d: f64,
) -> Box<dyn Fn(f64) -> FactorTriple + Send + Sync> {
    let n = xs.len();
    let gx = xs.map(|x| (-x * x).exp());
    let gy = ys.map(|y| (-3.0 * y * y).exp());
    let mut phix = Matrix::zeros(n, 3);
    let mut phiy = Matrix::zeros(n, 3);
    for i in 0..n {
        phix[(i, 0)] = gx[i];
        phix[(i, 1)] = xs[i] * gx[i];
        phix[(i, 2)] = xs[i] * xs[i] * gx[i];
        phiy[(i, 0)] = gy[i];
        phiy[(i, 1)] = ys[i] * gy[i];
        phiy[(i, 2)] = ys[i] * ys[i] * gy[i];
    }
    let coeff = Matrix::from_row_slice(
        3,
        3,
        &[
            6.0 * d,
            0.0,
            -36.0 * d, //
            0.0,
            -4.0,
            0.0, //
            -4.0 * d,
            0.0,
            0.0,
        ],
    );
    Box::new(move |t: f64| FactorTriple {
        x: phix.clone(),
        s: &coeff * (-2.0 * d * t).exp(),
        y: phiy.clone(),
    })
}
