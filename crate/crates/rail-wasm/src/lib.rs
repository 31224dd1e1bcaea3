//! Browser demo bindings: drive a benchmark step by step, read back the
//! solution field, the singular spectrum, and per-step diagnostics.

use wasm_bindgen::prelude::*;

use rail_core::driver::{
    ReferenceSpec, RunConfig, SchemeId, Session, StepRecord, StepSize, TruncationKind,
};
use rail_core::problems::all_benchmarks;

fn record_json(r: &StepRecord) -> String {
    let opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:e}"),
        None => "null".into(),
    };
    format!(
        r#"{{"step":{},"time":{:e},"rank":{},"mass":{:e},"rel_mass_dev":{:e},"l1_error":{},"decay_l1":{}}}"#,
        r.step,
        r.time,
        r.rank,
        r.mass,
        r.rel_mass_dev,
        opt(r.l1_error),
        opt(r.decay_l1),
    )
}

/// JSON catalog of the available benchmarks and their default parameters.
#[wasm_bindgen]
pub fn problem_catalog() -> String {
    let entries: Vec<String> = all_benchmarks()
        .iter()
        .map(|spec| {
            format!(
                r#"{{"name":"{}","description":"{}","advection":{},"n":{},"lambda":{},"eps":{:e},"r0":{},"t_final":{}}}"#,
                spec.name,
                spec.description,
                spec.has_advection,
                spec.defaults.n,
                spec.defaults.lambda,
                spec.defaults.eps,
                spec.defaults.r0,
                spec.defaults.t_final,
            )
        })
        .collect();
    format!("[{}]", entries.join(","))
}

/// One running benchmark simulation.
#[wasm_bindgen]
pub struct Simulation {
    session: Session,
}

#[wasm_bindgen]
impl Simulation {
    /// Build a simulation; `scheme` as in the CLI (be, dirk2, ..., imex443),
    /// `lambda` sets `dt = lambda * dx`, `conservative` switches the
    /// mass-conserving truncation on.
    #[wasm_bindgen(constructor)]
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        problem: &str,
        scheme: &str,
        n: usize,
        lambda: f64,
        eps: f64,
        r0: usize,
        t_final: f64,
        conservative: bool,
    ) -> Result<Simulation, JsError> {
        let scheme = SchemeId::parse(scheme).map_err(|e| JsError::new(&e.to_string()))?;
        let cfg = RunConfig {
            problem: problem.to_string(),
            scheme,
            n,
            step: StepSize::Lambda(lambda),
            t_final,
            eps,
            r0,
            truncation: if conservative {
                TruncationKind::Conservative
            } else {
                TruncationKind::Svd
            },
            weight: None,
            output: None,
            reference: ReferenceSpec::NoReference,
        };
        let session = Session::new(&cfg).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(Simulation { session })
    }

    /// Advance one time step; returns the step diagnostics as JSON.
    pub fn advance(&mut self) -> Result<String, JsError> {
        let record = self
            .session
            .advance()
            .map_err(|e| JsError::new(&e.to_string()))?;
        Ok(record_json(&record))
    }

    /// Diagnostics of the current state without stepping.
    pub fn record(&self) -> String {
        record_json(&self.session.record())
    }

    pub fn done(&self) -> bool {
        self.session.done()
    }

    pub fn n(&self) -> usize {
        self.session.grid().x.n
    }

    pub fn time(&self) -> f64 {
        self.session.time()
    }

    /// Assembled solution, row-major (`n * n` values).
    pub fn field(&self) -> Vec<f64> {
        let dense = self.session.state().to_dense();
        let n = dense.nrows();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(dense[(i, j)]);
            }
        }
        out
    }

    /// Current singular values, non-increasing.
    pub fn singular_values(&self) -> Vec<f64> {
        let s = self.session.state().coefficients();
        (0..s.nrows()).map(|i| s[(i, i)]).collect()
    }

    pub fn rank(&self) -> usize {
        self.session.state().rank()
    }
}
