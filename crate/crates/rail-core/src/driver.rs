//! Configuration-driven benchmark runner: single simulations with per-step
//! diagnostics, convergence studies against exact or fine-run references,
//! and CSV emission.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::integrator::{ConservativeSettings, StepSettings, Stepper};
use crate::linalg::Matrix;
use crate::lowrank::{l1_error_dense, mass, LowRankState, TruncationCriterion, WeightFunction};
use crate::problems::{benchmark_by_name, BenchmarkSpec};
use crate::spectral::Grid2D;
use crate::tableau::{ButcherTableau, ImexTableau};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeId {
    Be,
    Dirk2,
    Dirk3,
    Imex111,
    Imex222,
    Imex443,
}

impl SchemeId {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "be" => SchemeId::Be,
            "dirk2" => SchemeId::Dirk2,
            "dirk3" => SchemeId::Dirk3,
            "imex111" => SchemeId::Imex111,
            "imex222" => SchemeId::Imex222,
            "imex443" => SchemeId::Imex443,
            other => {
                return Err(Error::Config(format!(
                    "unknown scheme '{other}' (expected be|dirk2|dirk3|imex111|imex222|imex443)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchemeId::Be => "be",
            SchemeId::Dirk2 => "dirk2",
            SchemeId::Dirk3 => "dirk3",
            SchemeId::Imex111 => "imex111",
            SchemeId::Imex222 => "imex222",
            SchemeId::Imex443 => "imex443",
        }
    }

    pub fn is_imex(&self) -> bool {
        matches!(
            self,
            SchemeId::Imex111 | SchemeId::Imex222 | SchemeId::Imex443
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub enum StepSize {
    /// `dt = lambda * dx`.
    Lambda(f64),
    /// Absolute time step.
    Dt(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationKind {
    Svd,
    Conservative,
}

#[derive(Debug, Clone, Copy)]
pub enum WeightKind {
    Uniform,
    Maxwellian { delta: f64 },
}

#[derive(Debug, Clone)]
pub enum ReferenceSpec {
    /// Compare against the problem's closed-form solution.
    Exact,
    /// Compare against a cached fine run (restricted to the coarse grid by
    /// index subsampling; the grids must be commensurate).
    Fine {
        n: usize,
        lambda: f64,
        scheme: SchemeId,
    },
    NoReference,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: String,
    pub scheme: SchemeId,
    pub n: usize,
    pub step: StepSize,
    pub t_final: f64,
    pub eps: f64,
    pub r0: usize,
    pub truncation: TruncationKind,
    /// `None`: the problem's own weight (uniform except for the Fokker-Planck
    /// benchmark, which defaults to its Maxwellian weight).
    pub weight: Option<WeightKind>,
    pub output: Option<PathBuf>,
    pub reference: ReferenceSpec,
}

impl RunConfig {
    /// Configuration preloaded with a benchmark's reported parameters.
    pub fn for_problem(spec: &BenchmarkSpec, scheme: SchemeId) -> Self {
        RunConfig {
            problem: spec.name.to_string(),
            scheme,
            n: spec.defaults.n,
            step: StepSize::Lambda(spec.defaults.lambda),
            t_final: spec.defaults.t_final,
            eps: spec.defaults.eps,
            r0: spec.defaults.r0,
            truncation: TruncationKind::Svd,
            weight: None,
            output: None,
            reference: ReferenceSpec::NoReference,
        }
    }
}

/// Per-step diagnostics.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    /// Rank of the solution above the truncation tolerance.
    pub rank: usize,
    pub mass: f64,
    /// `(mass - mass(t=0)) / mass(t=0)`.
    pub rel_mass_dev: f64,
    /// L1 distance to the exact solution, when one exists.
    pub l1_error: Option<f64>,
    /// L1 distance to the attached equilibrium, when one exists.
    pub decay_l1: Option<f64>,
}

pub struct RunOutput {
    pub records: Vec<StepRecord>,
    pub final_state: LowRankState,
    pub grid: Grid2D,
    pub initial_mass: f64,
}

fn validate(cfg: &RunConfig, spec: &BenchmarkSpec) -> Result<()> {
    if spec.has_advection && !cfg.scheme.is_imex() {
        return Err(Error::Config(format!(
            "problem '{}' has advection terms and needs an IMEX scheme, got '{}'",
            spec.name,
            cfg.scheme.name()
        )));
    }
    if cfg.eps <= 0.0 || cfg.t_final < 0.0 || cfg.r0 == 0 {
        return Err(Error::Config("eps, t_final, r0 must be positive".into()));
    }
    match cfg.step {
        StepSize::Lambda(l) if l > 0.0 => Ok(()),
        StepSize::Dt(dt) if dt > 0.0 => Ok(()),
        _ => Err(Error::Config("step size must be positive".into())),
    }
}

/// An initialized simulation that advances one step at a time; the batch
/// runner and the interactive demo both drive one of these.
pub struct Session {
    scheme: SchemeId,
    eps: f64,
    t_final: f64,
    dt: f64,
    grid: Grid2D,
    settings: StepSettings,
    stepper: Stepper,
    state: LowRankState,
    t: f64,
    step: usize,
    initial_mass: f64,
    initial_norm: f64,
    exact: Option<crate::problems::ExactField>,
    equilibrium: Option<Matrix>,
    dirk2: ButcherTableau,
    dirk3: ButcherTableau,
    imex111: ImexTableau,
    imex222: ImexTableau,
    imex443: ImexTableau,
}

impl Session {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let spec = benchmark_by_name(&cfg.problem)?;
        validate(cfg, &spec)?;
        let problem = spec.build(cfg.n, cfg.t_final, cfg.r0)?;
        let grid = problem.grid.clone();
        let dt = match cfg.step {
            StepSize::Lambda(l) => l * grid.x.dx,
            StepSize::Dt(dt) => dt,
        };
        let initial_mass = mass(&problem.initial, &grid);
        let weight = match cfg.weight {
            None => problem.default_weight.clone(),
            Some(WeightKind::Uniform) => WeightFunction::uniform(cfg.n),
            Some(WeightKind::Maxwellian { delta }) => {
                let w1 = grid.x.points.map(|v| (-v * v / 2.0).exp() + delta);
                let w2 = grid.y.points.map(|v| (-v * v / 2.0).exp() + delta);
                WeightFunction::new(w1, w2)?
            }
        };
        let settings = StepSettings {
            eps: cfg.eps,
            aug_tol: 1e-12,
            criterion: TruncationCriterion::SpectralAbs,
            conservative: match cfg.truncation {
                TruncationKind::Svd => None,
                TruncationKind::Conservative => Some(ConservativeSettings {
                    weight,
                    rho0: initial_mass,
                    grid: grid.clone(),
                    every_stage: false,
                }),
            },
        };
        let initial_norm = problem.initial.frobenius_norm();
        Ok(Session {
            scheme: cfg.scheme,
            eps: cfg.eps,
            t_final: cfg.t_final,
            dt,
            grid,
            settings,
            stepper: Stepper::new(problem.ops),
            state: problem.initial,
            t: 0.0,
            step: 0,
            initial_mass,
            initial_norm,
            exact: problem.exact,
            equilibrium: problem.equilibrium,
            dirk2: ButcherTableau::dirk2(),
            dirk3: ButcherTableau::dirk3(),
            imex111: ImexTableau::imex111(),
            imex222: ImexTableau::imex222(),
            imex443: ImexTableau::imex443(),
        })
    }

    pub fn record(&self) -> StepRecord {
        let m = mass(&self.state, &self.grid);
        StepRecord {
            step: self.step,
            time: self.t,
            rank: self.state.effective_rank(self.eps),
            mass: m,
            rel_mass_dev: (m - self.initial_mass) / self.initial_mass,
            l1_error: self
                .exact
                .as_ref()
                .map(|f| l1_error_dense(&self.state, &f(self.t), &self.grid)),
            decay_l1: self
                .equilibrium
                .as_ref()
                .map(|eq| l1_error_dense(&self.state, eq, &self.grid)),
        }
    }

    pub fn done(&self) -> bool {
        self.t + 1e-12 * self.t_final.max(1.0) >= self.t_final
    }

    /// Take one (possibly clamped) step and return its diagnostics.
    pub fn advance(&mut self) -> Result<StepRecord> {
        let t_next = (self.t + self.dt).min(self.t_final);
        let dt_k = t_next - self.t;
        if dt_k <= 0.0 {
            return Ok(self.record());
        }
        self.state = match self.scheme {
            SchemeId::Be => {
                self.stepper
                    .backward_euler_step(&self.state, self.t, dt_k, &self.settings)?
            }
            SchemeId::Dirk2 => {
                self.stepper
                    .dirk_step(&self.state, self.t, dt_k, &self.dirk2, &self.settings)?
            }
            SchemeId::Dirk3 => {
                self.stepper
                    .dirk_step(&self.state, self.t, dt_k, &self.dirk3, &self.settings)?
            }
            SchemeId::Imex111 => {
                self.stepper
                    .imex_step(&self.state, self.t, dt_k, &self.imex111, &self.settings)?
            }
            SchemeId::Imex222 => {
                self.stepper
                    .imex_step(&self.state, self.t, dt_k, &self.imex222, &self.settings)?
            }
            SchemeId::Imex443 => {
                self.stepper
                    .imex_step(&self.state, self.t, dt_k, &self.imex443, &self.settings)?
            }
        };
        self.step += 1;
        self.t = t_next;
        if self.state.frobenius_norm() > 1e6 * self.initial_norm.max(f64::MIN_POSITIVE) {
            return Err(Error::Numerical(format!(
                "solution norm exceeded 1e6 x initial at step {}, t = {:.6}; \
                 the explicit part likely violates its CFL restriction at this dt",
                self.step, self.t
            )));
        }
        Ok(self.record())
    }

    pub fn state(&self) -> &LowRankState {
        &self.state
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn time(&self) -> f64 {
        self.t
    }
}

/// Advance a benchmark from 0 to `t_final` (the last step is clamped to land
/// exactly on `t_final`), recording diagnostics each step. Deterministic for
/// a fixed configuration.
pub fn run_simulation(cfg: &RunConfig) -> Result<RunOutput> {
    let mut session = Session::new(cfg)?;
    let mut records = vec![session.record()];
    while !session.done() {
        records.push(session.advance()?);
    }
    let initial_mass = session.initial_mass;
    let grid = session.grid.clone();
    Ok(RunOutput {
        records,
        final_state: session.state,
        grid,
        initial_mass,
    })
}

#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub lambda: f64,
    /// Mean step size actually taken (`t_final / steps`); differs from
    /// `lambda * dx` when the final step was clamped onto `t_final`.
    pub dt: f64,
    pub l1_error: f64,
    /// Order observed between this row and the previous one.
    pub observed_order: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `ln(error)` against `ln(dt)`.
    pub ls_slope: f64,
}

/// Run the configured scheme over a ladder of `lambda` values and measure the
/// final-time L1 error against the configured reference.
pub fn run_convergence_study(cfg: &RunConfig, lambdas: &[f64]) -> Result<ConvergenceTable> {
    if lambdas.is_empty() {
        return Err(Error::Config("no lambda values given".into()));
    }
    let spec = benchmark_by_name(&cfg.problem)?;
    let reference = reference_field(cfg, &spec)?;

    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut run_cfg = cfg.clone();
        run_cfg.step = StepSize::Lambda(lambda);
        run_cfg.output = None;
        let out = run_simulation(&run_cfg)?;
        let err = l1_error_dense(&out.final_state, &reference, &out.grid);
        let steps = (out.records.len() - 1).max(1);
        let dt = cfg.t_final / steps as f64;
        let observed_order = rows
            .last()
            .map(|prev: &ConvergenceRow| (prev.l1_error / err).ln() / (prev.dt / dt).ln());
        rows.push(ConvergenceRow {
            lambda,
            dt,
            l1_error: err,
            observed_order,
        });
    }

    // Least-squares slope of ln e over ln dt.
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.dt.ln(), r.l1_error.max(f64::MIN_POSITIVE).ln()))
        .collect();
    let n = pts.len() as f64;
    let mean_x = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mean_x).powi(2)).sum::<f64>();
    let sxy = pts
        .iter()
        .map(|p| (p.0 - mean_x) * (p.1 - mean_y))
        .sum::<f64>();
    let ls_slope = if sxx > 0.0 { sxy / sxx } else { f64::NAN };
    Ok(ConvergenceTable { rows, ls_slope })
}

/// Dense reference field at `t_final` on the study's coarse grid.
fn reference_field(cfg: &RunConfig, spec: &BenchmarkSpec) -> Result<Matrix> {
    match &cfg.reference {
        ReferenceSpec::Exact => {
            if !spec.has_exact_solution {
                return Err(Error::Config(format!(
                    "problem '{}' has no exact solution; use a fine-run reference",
                    spec.name
                )));
            }
            let problem = spec.build(cfg.n, cfg.t_final, cfg.r0)?;
            let exact = problem.exact.expect("exact solution advertised");
            Ok(exact(cfg.t_final))
        }
        ReferenceSpec::Fine { n, lambda, scheme } => {
            if n % cfg.n != 0 {
                return Err(Error::Config(format!(
                    "reference grid {} is not a multiple of the study grid {}; \
                     the restriction is exact index subsampling, never interpolation",
                    n, cfg.n
                )));
            }
            let mut ref_cfg = cfg.clone();
            ref_cfg.n = *n;
            ref_cfg.step = StepSize::Lambda(*lambda);
            ref_cfg.scheme = *scheme;
            ref_cfg.output = None;
            ref_cfg.reference = ReferenceSpec::NoReference;
            let fine = cached_reference_run(&ref_cfg)?;
            let stride = n / cfg.n;
            Ok(Matrix::from_fn(cfg.n, cfg.n, |i, j| {
                fine[(i * stride, j * stride)]
            }))
        }
        ReferenceSpec::NoReference => Err(Error::Config(
            "a convergence study needs a reference (exact or fine run)".into(),
        )),
    }
}

/// Output directory: `$RAIL_OUTPUT_DIR`, falling back to `./rail-out`.
pub fn output_dir() -> PathBuf {
    std::env::var_os("RAIL_OUTPUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("rail-out"))
}

fn fnv1a64(data: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in data.as_bytes() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn reference_cache_key(cfg: &RunConfig) -> String {
    let step = match cfg.step {
        StepSize::Lambda(l) => format!("lambda={}", l.to_bits()),
        StepSize::Dt(dt) => format!("dt={}", dt.to_bits()),
    };
    format!(
        "{}|{}|{}|{}|tf={}|eps={}|r0={}|trunc={:?}",
        cfg.problem,
        cfg.scheme.name(),
        cfg.n,
        step,
        cfg.t_final.to_bits(),
        cfg.eps.to_bits(),
        cfg.r0,
        cfg.truncation,
    )
}

/// Run (or load) a reference simulation and return its dense final field.
/// Results are cached on disk keyed by a hash of the configuration.
fn cached_reference_run(cfg: &RunConfig) -> Result<Matrix> {
    let key = reference_cache_key(cfg);
    let path = output_dir()
        .join("reference-cache")
        .join(format!("ref-{:016x}.f64", fnv1a64(&key)));
    if let Some(field) = load_reference(&path, cfg.n) {
        return Ok(field);
    }
    let out = run_simulation(cfg)?;
    let dense = out.final_state.to_dense();
    store_reference(&path, &dense)?;
    Ok(dense)
}

const REFERENCE_MAGIC: &[u8; 8] = b"RAILREF1";

fn store_reference(path: &Path, field: &Matrix) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let mut buf = Vec::with_capacity(16 + field.len() * 8);
    buf.extend_from_slice(REFERENCE_MAGIC);
    buf.extend_from_slice(&(field.nrows() as u64).to_le_bytes());
    for j in 0..field.ncols() {
        for i in 0..field.nrows() {
            buf.extend_from_slice(&field[(i, j)].to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

fn load_reference(path: &Path, n: usize) -> Option<Matrix> {
    let mut file = fs::File::open(path).ok()?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header).ok()?;
    if &header[..8] != REFERENCE_MAGIC {
        return None;
    }
    let stored_n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    if stored_n != n {
        return None;
    }
    let mut data = vec![0u8; n * n * 8];
    file.read_exact(&mut data).ok()?;
    let mut field = Matrix::zeros(n, n);
    let mut at = 0;
    for j in 0..n {
        for i in 0..n {
            field[(i, j)] = f64::from_le_bytes(data[at..at + 8].try_into().unwrap());
            at += 8;
        }
    }
    Some(field)
}

/// 17-significant-digit float formatting; parses back bit-identically.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub const CSV_HEADER: &str = "step,time,rank,mass,rel_mass_dev,l1_error,decay_l1";

/// Write one CSV row per record; optional diagnostics become empty fields.
pub fn emit_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = std::io::BufWriter::new(file);
    let fmt_opt = |v: &Option<f64>| v.map(fmt_float).unwrap_or_default();
    writeln!(out, "{CSV_HEADER}").map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            fmt_float(r.time),
            r.rank,
            fmt_float(r.mass),
            fmt_float(r.rel_mass_dev),
            fmt_opt(&r.l1_error),
            fmt_opt(&r.decay_l1),
        )
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    out.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}
