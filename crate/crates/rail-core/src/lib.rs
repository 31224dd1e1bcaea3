//! Rank-adaptive implicit low-rank integration of 2D matrix differential
//! equations
//!
//! ```text
//!   dU/dt = Fx U + U Fy^T  +  Ex(t, U)  +  Phi(t)
//! ```
//!
//! arising from advection-diffusion and Fokker-Planck equations discretized
//! by Fourier collocation. The solution is kept factorized as
//! `U = Vx S Vy^T` with orthonormal bases. Each implicit (DIRK) or
//! implicit-explicit (IMEX) Runge-Kutta stage updates the bases dimension by
//! dimension through Sylvester solves (K and L steps), enriches the
//! projection space by a reduced augmentation of predicted and previous-stage
//! bases, solves a small projected Sylvester equation for the coefficients
//! (S step), and truncates adaptively - either by plain SVD thresholding or
//! by a globally mass conservative procedure.
//!
//! Modules:
//! - [`linalg`]: dense factorization contracts (QR / SVD / real Schur).
//! - [`sylvester`]: Bartels-Stewart solver for `A X - X B = C`.
//! - [`spectral`]: periodic grids and collocation differentiation matrices.
//! - [`lowrank`]: the factorized state, augmentation, truncations, mass.
//! - [`tableau`]: DIRK and IMEX Butcher tableaus.
//! - [`integrator`]: the stage machinery and time steppers.
//! - [`problems`]: benchmark problem definitions.
//! - [`driver`]: simulation runner, convergence studies, CSV output.

pub mod driver;
pub mod error;
pub mod integrator;
pub mod linalg;
pub mod lowrank;
pub mod problems;
pub mod spectral;
pub mod sylvester;
pub mod tableau;

pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use lowrank::LowRankState;
