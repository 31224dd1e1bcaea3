//! Butcher tableaus: stiffly accurate DIRK methods and the paired
//! implicit-explicit (IMEX) Runge-Kutta schemes of Ascher, Ruuth & Spiteri.

use crate::error::{Error, Result};

const COEFF_TOL: f64 = 1e-13;

/// Lower-triangular DIRK tableau. Stiffly accurate methods have `c_s = 1`
/// and a last row equal to `b`, so the last stage is the step output.
#[derive(Debug, Clone)]
pub struct ButcherTableau {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub name: String,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }

    /// Backward Euler as a one-stage DIRK.
    pub fn backward_euler() -> Self {
        let t = ButcherTableau {
            a: vec![vec![1.0]],
            b: vec![1.0],
            c: vec![1.0],
            name: "be".into(),
        };
        t.validate().expect("builtin tableau");
        t
    }

    /// Two-stage, second-order, L-stable DIRK with nu = 1 - sqrt(2)/2.
    pub fn dirk2() -> Self {
        let nu = 1.0 - 2.0f64.sqrt() / 2.0;
        let t = ButcherTableau {
            a: vec![vec![nu], vec![1.0 - nu, nu]],
            b: vec![1.0 - nu, nu],
            c: vec![nu, 1.0],
            name: "dirk2".into(),
        };
        t.validate().expect("builtin tableau");
        t
    }

    /// Three-stage, third-order DIRK; nu is the middle root of the stage
    /// polynomial, beta1/beta2 complete the stiffly accurate last row.
    pub fn dirk3() -> Self {
        let nu = 0.435_866_521_508_459;
        let beta1 = -1.5 * nu * nu + 4.0 * nu - 0.25;
        let beta2 = 1.5 * nu * nu - 5.0 * nu + 1.25;
        let t = ButcherTableau {
            a: vec![vec![nu], vec![(1.0 - nu) / 2.0, nu], vec![beta1, beta2, nu]],
            b: vec![beta1, beta2, nu],
            c: vec![nu, (1.0 + nu) / 2.0, 1.0],
            name: "dirk3".into(),
        };
        t.validate().expect("builtin tableau");
        t
    }

    pub fn is_stiffly_accurate(&self) -> bool {
        let s = self.stages();
        if (self.c[s - 1] - 1.0).abs() > COEFF_TOL {
            return false;
        }
        (0..s).all(|k| (self.a[s - 1][k] - self.b[k]).abs() <= COEFF_TOL)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if self.a.len() != s || self.c.len() != s {
            return Err(Error::InvalidArgument("tableau sizes disagree".into()));
        }
        for (k, row) in self.a.iter().enumerate() {
            if row.len() != k + 1 {
                return Err(Error::InvalidArgument(format!(
                    "row {k} of a DIRK tableau must have {} entries",
                    k + 1
                )));
            }
            let row_sum: f64 = row.iter().sum();
            if (row_sum - self.c[k]).abs() > COEFF_TOL {
                return Err(Error::InvalidArgument(format!(
                    "abscissa mismatch at stage {k}: sum(a) = {row_sum}, c = {}",
                    self.c[k]
                )));
            }
            if row[k] <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "diagonal coefficient a[{k}][{k}] must be positive"
                )));
            }
        }
        let b_sum: f64 = self.b.iter().sum();
        if (b_sum - 1.0).abs() > COEFF_TOL {
            return Err(Error::InvalidArgument(format!(
                "weights must sum to 1, got {b_sum}"
            )));
        }
        Ok(())
    }
}

/// An s-stage DIRK coupled with an (s+1)-stage explicit scheme sharing
/// abscissae. The implicit tableau is conceptually padded with a leading
/// zero row and column; the padding is realized by the explicit tableau's
/// shifted row indexing in the stage assembly.
#[derive(Debug, Clone)]
pub struct ImexTableau {
    pub implicit: ButcherTableau,
    /// (s+1) x (s+1), strictly lower triangular.
    pub explicit_a: Vec<Vec<f64>>,
    pub explicit_b: Vec<f64>,
    /// Abscissae of the explicit scheme: `[0, c_1, ..., c_s]`.
    pub explicit_c: Vec<f64>,
    pub name: String,
    /// Classical order of the coupled scheme, used to pick which order
    /// conditions to enforce.
    pub order: usize,
}

impl ImexTableau {
    /// Backward Euler / forward Euler pairing, first order.
    pub fn imex111() -> Self {
        let t = ImexTableau {
            implicit: ButcherTableau {
                a: vec![vec![1.0]],
                b: vec![1.0],
                c: vec![1.0],
                name: "imex111-implicit".into(),
            },
            explicit_a: vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            explicit_b: vec![1.0, 0.0],
            explicit_c: vec![0.0, 1.0],
            name: "imex111".into(),
            order: 1,
        };
        t.validate().expect("builtin tableau");
        t
    }

    /// Two-stage, second-order pairing with gamma = 1 - sqrt(2)/2 and
    /// delta = 1 - 1/(2 gamma).
    pub fn imex222() -> Self {
        let gamma = 1.0 - 2.0f64.sqrt() / 2.0;
        let delta = 1.0 - 1.0 / (2.0 * gamma);
        let t = ImexTableau {
            implicit: ButcherTableau {
                a: vec![vec![gamma], vec![1.0 - gamma, gamma]],
                b: vec![1.0 - gamma, gamma],
                c: vec![gamma, 1.0],
                name: "imex222-implicit".into(),
            },
            explicit_a: vec![
                vec![0.0, 0.0, 0.0],
                vec![gamma, 0.0, 0.0],
                vec![delta, 1.0 - delta, 0.0],
            ],
            explicit_b: vec![delta, 1.0 - delta, 0.0],
            explicit_c: vec![0.0, gamma, 1.0],
            name: "imex222".into(),
            order: 2,
        };
        t.validate().expect("builtin tableau");
        t
    }

    /// Four-stage, third-order, L-stable pairing.
    pub fn imex443() -> Self {
        let t = ImexTableau {
            implicit: ButcherTableau {
                a: vec![
                    vec![0.5],
                    vec![1.0 / 6.0, 0.5],
                    vec![-0.5, 0.5, 0.5],
                    vec![1.5, -1.5, 0.5, 0.5],
                ],
                b: vec![1.5, -1.5, 0.5, 0.5],
                c: vec![0.5, 2.0 / 3.0, 0.5, 1.0],
                name: "imex443-implicit".into(),
            },
            explicit_a: vec![
                vec![0.0, 0.0, 0.0, 0.0, 0.0],
                vec![0.5, 0.0, 0.0, 0.0, 0.0],
                vec![11.0 / 18.0, 1.0 / 18.0, 0.0, 0.0, 0.0],
                vec![5.0 / 6.0, -5.0 / 6.0, 0.5, 0.0, 0.0],
                vec![0.25, 1.75, 0.75, -1.75, 0.0],
            ],
            explicit_b: vec![0.25, 1.75, 0.75, -1.75, 0.0],
            explicit_c: vec![0.0, 0.5, 2.0 / 3.0, 0.5, 1.0],
            name: "imex443".into(),
            order: 3,
        };
        t.validate().expect("builtin tableau");
        t
    }

    pub fn stages(&self) -> usize {
        self.implicit.stages()
    }

    /// Pure DIRK view: drop the explicit half.
    pub fn embedded_dirk(&self) -> ButcherTableau {
        self.implicit.clone()
    }

    pub fn validate(&self) -> Result<()> {
        self.implicit.validate()?;
        if !self.implicit.is_stiffly_accurate() {
            return Err(Error::InvalidArgument(
                "the implicit half must be stiffly accurate".into(),
            ));
        }
        let sigma = self.stages() + 1;
        if self.explicit_a.len() != sigma
            || self.explicit_b.len() != sigma
            || self.explicit_c.len() != sigma
        {
            return Err(Error::InvalidArgument(
                "explicit tableau must have s + 1 stages".into(),
            ));
        }
        for (i, row) in self.explicit_a.iter().enumerate() {
            if row.len() != sigma {
                return Err(Error::InvalidArgument("ragged explicit tableau".into()));
            }
            for (j, v) in row.iter().enumerate() {
                if j >= i && *v != 0.0 {
                    return Err(Error::InvalidArgument(
                        "explicit tableau must be strictly lower triangular".into(),
                    ));
                }
            }
            let row_sum: f64 = row.iter().sum();
            if (row_sum - self.explicit_c[i]).abs() > COEFF_TOL {
                return Err(Error::InvalidArgument(format!(
                    "explicit abscissa mismatch at row {i}"
                )));
            }
        }
        // Shared abscissae between the two halves.
        if self.explicit_c[0] != 0.0 {
            return Err(Error::InvalidArgument("explicit c must start at 0".into()));
        }
        for k in 0..self.stages() {
            if (self.explicit_c[k + 1] - self.implicit.c[k]).abs() > COEFF_TOL {
                return Err(Error::InvalidArgument(format!(
                    "implicit and explicit abscissae disagree at stage {k}"
                )));
            }
        }
        // The stiffly accurate shortcut also needs the explicit weights to
        // equal the last explicit row.
        for (bk, ak) in self.explicit_b.iter().zip(&self.explicit_a[sigma - 1]) {
            if (bk - ak).abs() > COEFF_TOL {
                return Err(Error::InvalidArgument(
                    "explicit weights must equal the last explicit row".into(),
                ));
            }
        }
        self.check_order_conditions()
    }

    fn check_order_conditions(&self) -> Result<()> {
        let b_sum: f64 = self.explicit_b.iter().sum();
        if (b_sum - 1.0).abs() > COEFF_TOL {
            return Err(Error::InvalidArgument(
                "explicit weights must sum to 1".into(),
            ));
        }
        let moment = |p: i32, b: &[f64], c: &[f64]| -> f64 {
            b.iter().zip(c).map(|(bk, ck)| bk * ck.powi(p)).sum()
        };
        if self.order >= 2 {
            for (b, c) in [
                (&self.implicit.b, &self.implicit.c),
                (&self.explicit_b, &self.explicit_c),
            ] {
                if (moment(1, b, c) - 0.5).abs() > COEFF_TOL {
                    return Err(Error::InvalidArgument(
                        "second-order condition sum(b c) = 1/2 violated".into(),
                    ));
                }
            }
        }
        if self.order >= 3 {
            for (b, c) in [
                (&self.implicit.b, &self.implicit.c),
                (&self.explicit_b, &self.explicit_c),
            ] {
                if (moment(2, b, c) - 1.0 / 3.0).abs() > COEFF_TOL {
                    return Err(Error::InvalidArgument(
                        "third-order condition sum(b c^2) = 1/3 violated".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
