//! Successive linearization (Frank-Wolfe) driver.
//!
//! Each iteration linearizes the concave objective at the current iterate,
//! minimizes the linearization exactly over the conic feasible set and moves
//! towards the minimizer with step `tau` (1 for the unit rule, `2/(i+1)` for
//! the adaptive rule). Scheduled sparsification passes fix near-zero factor
//! entries at zero, and an optional HALS polish runs at the end.
//!
//! The matrix is divided by its largest entry before the run; factors are
//! scaled back on return.

use std::time::Instant;

use log::{debug, info, warn};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conic_program::SolveStatus;
use crate::error::{NmfError, Result};
use crate::formulations::{
    build_program, feasibility_residual, from_factors, grad_phi, phi, phi_lower_bound, restore_interior, spi_apply,
    to_factors, Formulation, FormulationOptions, Gradient, LatentPoint, SparsityPattern, ThresholdUnits, VarLayout,
};
use crate::hals::{self, HalsConfig};
use crate::instances::{frobenius, FactorPair, NonnegMatrix};
use crate::ipm::{BarrierSolver, SolverConfig};
use crate::rank1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepRule {
    /// `tau = 1`: the next iterate is the oracle solution.
    #[default]
    Unit,
    /// `tau = 2 / (i + 1)`.
    Adaptive,
}

impl StepRule {
    pub fn tau(self, iter: usize) -> f64 {
        match self {
            StepRule::Unit => 1.0,
            StepRule::Adaptive => 2.0 / (iter as f64 + 1.0),
        }
    }

    /// Lower bound on `tau` over `maxiter` iterations.
    pub fn tau_min(self, maxiter: usize) -> f64 {
        match self {
            StepRule::Unit => 1.0,
            StepRule::Adaptive => 2.0 / (maxiter as f64 + 1.0),
        }
    }
}

impl std::str::FromStr for StepRule {
    type Err = NmfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(StepRule::Unit),
            "adaptive" => Ok(StepRule::Adaptive),
            _ => Err(NmfError::InvalidInput(format!("unknown step rule `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RefineMode {
    /// Always for the exp form; for the soc form when the final error is in
    /// `[success_tol, 1e-4]`.
    #[default]
    Auto,
    On,
    Off,
}

impl std::str::FromStr for RefineMode {
    type Err = NmfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(RefineMode::Auto),
            "on" => Ok(RefineMode::On),
            "off" => Ok(RefineMode::Off),
            _ => Err(NmfError::InvalidInput(format!("unknown refine mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub enum Initializer {
    /// Entries uniform on `(0, 1]`.
    #[default]
    Uniform,
    /// Perturbed optimal rank-one over-approximation.
    PerturbedRank1 { d: f64 },
}

impl std::fmt::Display for Initializer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Initializer::Uniform => write!(f, "uniform"),
            Initializer::PerturbedRank1 { d } => write!(f, "rank1:{d}"),
        }
    }
}

impl std::str::FromStr for Initializer {
    type Err = NmfError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(Initializer::Uniform);
        }
        if s == "rank1" {
            return Ok(Initializer::PerturbedRank1 { d: 0.03 });
        }
        if let Some(d) = s.strip_prefix("rank1:") {
            let d: f64 = d.parse().map_err(|_| NmfError::InvalidInput(format!("bad perturbation size `{d}`")))?;
            return Ok(Initializer::PerturbedRank1 { d });
        }
        Err(NmfError::InvalidInput(format!("unknown initializer `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriverConfig {
    pub maxiter: usize,
    pub step_rule: StepRule,
    pub success_tol: f64,
    /// Iterations (1-based) at which sparsification runs before the oracle
    /// call; `None` means `ceil(0.8 maxiter)` and `ceil(0.95 maxiter)`.
    pub spi_schedule: Option<Vec<usize>>,
    pub spi_threshold: f64,
    pub spi_units: ThresholdUnits,
    pub refine: RefineMode,
    pub initializer: Initializer,
    pub seed: u64,
    /// Stop as soon as the relative error reaches `success_tol`.
    pub early_stop: bool,
    pub formulation: FormulationOptions,
    pub solver: SolverConfig,
    pub hals: HalsConfig,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            maxiter: 750,
            step_rule: StepRule::Unit,
            success_tol: 1e-6,
            spi_schedule: None,
            spi_threshold: 1e-3,
            spi_units: ThresholdUnits::Factor,
            refine: RefineMode::Auto,
            initializer: Initializer::Uniform,
            seed: 0,
            early_stop: true,
            formulation: FormulationOptions::default(),
            solver: SolverConfig::default(),
            hals: HalsConfig::default(),
        }
    }
}

impl DriverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.maxiter == 0 {
            return Err(NmfError::InvalidInput("maxiter must be at least 1".into()));
        }
        if !(self.success_tol > 0.0) {
            return Err(NmfError::InvalidInput("success tolerance must be positive".into()));
        }
        if !(self.spi_threshold > 0.0) {
            return Err(NmfError::InvalidInput("sparsification threshold must be positive".into()));
        }
        if let Initializer::PerturbedRank1 { d } = self.initializer {
            if !(d > 0.0) {
                return Err(NmfError::InvalidInput(format!("perturbation size {d} must be positive")));
            }
        }
        self.solver.validate()
    }

    pub fn spi_iterations(&self) -> Vec<usize> {
        match &self.spi_schedule {
            Some(list) => list.clone(),
            None => {
                let m = self.maxiter as f64;
                let mut v = vec![(0.8 * m).ceil() as usize, (0.95 * m).ceil() as usize];
                v.dedup();
                v
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    /// All iterations ran (or early stop fired).
    Completed,
    /// The oracle solve failed; the trace stops at the last good iterate.
    SolverFailure,
    /// The objective gradient became singular outside the sparsity pattern.
    Singular,
    /// The oracle returned a point worse than the iterate beyond tolerance.
    GapViolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// `Phi` after the step.
    pub phi: f64,
    pub gap: f64,
    pub min_gap: f64,
    pub rel_err: f64,
    pub spi_event: bool,
    pub tau: f64,
    pub newton_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpiEvent {
    pub iter: usize,
    pub added_u: usize,
    pub added_t: usize,
    pub collapsed: Vec<usize>,
    pub rolled_back: bool,
    /// Relative error of the iterate just before the pass.
    pub error_before: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub lmo_solves: usize,
    pub newton_steps: usize,
    pub barrier_iterations: usize,
    pub cold_restarts: usize,
    /// Oracle solves accepted at the looser near-optimal tolerance.
    pub near_optimal_solves: usize,
    pub worst_complementarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub error_before: f64,
    pub error_after: f64,
    pub sweeps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub instance: String,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub formulation: Formulation,
    pub step_rule: StepRule,
    pub initializer: String,
    pub seed: u64,
    pub maxiter: usize,
    pub status: RunStatus,
    pub message: Option<String>,
    /// `Phi` of the starting point (normalized units).
    pub phi0: f64,
    /// Certified lower bound on `Phi` (normalized units).
    pub phi_lb: f64,
    pub trace: Vec<TraceRow>,
    pub spi_events: Vec<SpiEvent>,
    pub refine: Option<RefineReport>,
    pub final_error: f64,
    pub success: bool,
    /// First iteration whose error reached the tolerance.
    pub iterations_to_success: Option<usize>,
    pub rate_check: bool,
    pub descent_violations: usize,
    pub feasibility_violations: usize,
    pub solver: SolverStats,
    pub pattern_size: (usize, usize),
    pub factors: FactorPair,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn min_gaps(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.min_gap).collect()
    }
}

/// FW gap `<grad, Z - V>` over the `U, T` coordinates. Values within
/// `-1e-6` relative are clamped to zero; more negative values are an error.
pub fn fw_gap(gradient: &Gradient, z: &LatentPoint, lmo: &LatentPoint, pattern: &SparsityPattern) -> Result<f64> {
    let gz = gradient.dot(z, pattern);
    let gv = gradient.dot(lmo, pattern);
    let raw = gz - gv;
    let scale = gz.abs().max(gv.abs()).max(1.0);
    if raw < -1e-6 * scale {
        return Err(NmfError::Contract(format!("negative gap {raw:e}; oracle not solved to tolerance")));
    }
    Ok(if raw < 0.0 { 0.0 } else { raw })
}

/// `min_gap_i * tau_min * i <= phi0 - phi_lb` for every 1-based iteration `i`.
pub fn rate_check(trace: &[TraceRow], phi0: f64, phi_lb: f64, tau_min: f64) -> bool {
    let c = phi0 - phi_lb;
    let slack = 1e-9 * c.abs().max(1.0);
    trace.iter().enumerate().all(|(i, r)| r.min_gap * tau_min * (i + 1) as f64 <= c + slack)
}

fn uniform_init(rows: usize, rank: usize, cols: usize, seed: u64) -> FactorPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Array2::from_shape_fn((rows, rank), |_| 1.0 - rng.random::<f64>());
    let h = Array2::from_shape_fn((rank, cols), |_| 1.0 - rng.random::<f64>());
    FactorPair { w, h }
}

fn rel_err(target: &Array2<f64>, norm: f64, pair: &FactorPair) -> f64 {
    frobenius((target - &pair.product()).view()) / norm
}

struct Oracle {
    solver: BarrierSolver,
    layout: VarLayout,
}

impl Oracle {
    fn new(
        v: &NonnegMatrix,
        rank: usize,
        form: Formulation,
        pattern: &SparsityPattern,
        cfg: &DriverConfig,
    ) -> Result<Self> {
        let (program, layout) = build_program(v, rank, form, pattern, None, &cfg.formulation)?;
        Ok(Self { solver: BarrierSolver::new(&program, cfg.solver.clone())?, layout })
    }
}

/// Runs the driver from the configured initializer.
pub fn run(v: &NonnegMatrix, rank: usize, form: Formulation, config: &DriverConfig) -> Result<RunReport> {
    config.validate()?;
    if rank == 0 {
        return Err(NmfError::InvalidInput("rank K must be at least 1".into()));
    }
    let init = match config.initializer {
        Initializer::Uniform => uniform_init(v.rows(), rank, v.cols(), config.seed),
        Initializer::PerturbedRank1 { d } => rank1::perturbed_init(v, rank, d, config.seed, &config.solver)?,
    };
    run_from(v, rank, form, config, init)
}

/// Runs the driver from explicit starting factors.
pub fn run_from(
    v: &NonnegMatrix,
    rank: usize,
    form: Formulation,
    config: &DriverConfig,
    init: FactorPair,
) -> Result<RunReport> {
    config.validate()?;
    let start = Instant::now();
    let vmax = v.max_entry();
    if !(vmax > 0.0) {
        return Err(NmfError::InvalidInput("matrix is all zero".into()));
    }
    if init.rank() != rank || init.w.nrows() != v.rows() || init.h.ncols() != v.cols() {
        return Err(NmfError::DimensionMismatch("initial factors do not match the matrix and rank".into()));
    }
    let vn = v.scaled(1.0 / vmax)?;
    let target = vn.entries().to_owned();
    let vnorm = frobenius(target.view());
    let (fs, ns) = (v.rows(), v.cols());
    let mut pattern = SparsityPattern::empty(fs, rank, ns);
    let mut warnings = Vec::new();

    // W scaled by 1/sqrt(vmax) on both sides keeps the product in normalized units
    let s = vmax.sqrt();
    let init_n = FactorPair { w: init.w.mapv(|x| x / s), h: init.h.mapv(|x| x / s) };
    let mut z = from_factors(&init_n, &vn, form, &pattern, &config.formulation)?;
    let mut oracle = Oracle::new(&vn, rank, form, &pattern, config)?;
    let phi_lb = phi_lower_bound(form, &config.formulation.effective_target(form, &vn)?);

    let mut stats = SolverStats::default();
    let mut packed = z.pack(&oracle.layout);
    if !oracle.solver.is_strictly_interior(&packed) {
        match oracle.solver.phase1(Some(&packed)) {
            Ok(p) => {
                z = LatentPoint::unpack(form, &p, &oracle.layout);
                packed = p;
                stats.cold_restarts += 1;
            }
            Err(fail) => {
                return Err(NmfError::Solver(format!("no interior starting point ({:?})", fail.status)));
            }
        }
    }
    let phi0 = phi(&z, &pattern);

    let mut trace: Vec<TraceRow> = Vec::with_capacity(config.maxiter);
    let mut spi_events = Vec::new();
    let mut status = RunStatus::Completed;
    let mut message = None;
    let mut min_gap = f64::INFINITY;
    let mut descent_violations = 0;
    let mut feasibility_violations = 0;
    let mut iterations_to_success = None;
    let spi_at = config.spi_iterations();
    let mut current_err = rel_err(&target, vnorm, &to_factors(&z, &pattern));
    if current_err <= config.success_tol {
        iterations_to_success = Some(0);
    }

    for iter in 1..=config.maxiter {
        let mut spi_now = false;
        if spi_at.contains(&iter) {
            spi_now = true;
            let out = spi_apply(&z, &pattern, config.spi_threshold, config.spi_units)?;
            let mut event = SpiEvent {
                iter,
                added_u: out.added_u.len(),
                added_t: out.added_t.len(),
                collapsed: out.collapsed.clone(),
                rolled_back: false,
                error_before: current_err,
            };
            if !out.collapsed.is_empty() {
                warnings.push(format!("iteration {iter}: components {:?} collapsed", out.collapsed));
            }
            if out.changed() {
                let switched = restore_interior(&out.point, &vn, &out.pattern, &config.formulation)
                    .and_then(|p| Oracle::new(&vn, rank, form, &out.pattern, config).map(|o| (p, o)))
                    .and_then(|(p, mut o)| {
                        let packed = p.pack(&o.layout);
                        let start = o
                            .solver
                            .phase1(Some(&packed))
                            .map_err(|f| NmfError::Solver(format!("phase-I after sparsification: {:?}", f.status)))?;
                        Ok((LatentPoint::unpack(form, &start, &o.layout), o, start))
                    });
                match switched {
                    Ok((p, o, start)) => {
                        z = p;
                        oracle = o;
                        packed = start;
                        pattern = out.pattern;
                        current_err = rel_err(&target, vnorm, &to_factors(&z, &pattern));
                    }
                    Err(e) => {
                        warn!("sparsification at iteration {iter} rolled back: {e}");
                        warnings.push(format!("iteration {iter}: sparsification rolled back ({e})"));
                        event.rolled_back = true;
                    }
                }
            }
            spi_events.push(event);
        }

        let gradient = match grad_phi(&z, &pattern) {
            Ok(g) => g,
            Err(e) => {
                status = RunStatus::Singular;
                message = Some(e.to_string());
                break;
            }
        };
        let c = gradient.objective(&oracle.layout);
        let mut sol = oracle.solver.solve(&c, Some(&packed));
        stats.lmo_solves += 1;
        let usable = |st: SolveStatus| matches!(st, SolveStatus::Optimal | SolveStatus::NearOptimal);
        if !usable(sol.status) {
            debug!("iteration {iter}: warm oracle solve ended with {:?}, retrying cold", sol.status);
            stats.cold_restarts += 1;
            stats.newton_steps += sol.newton_steps;
            oracle.solver.forget_path();
            sol = oracle.solver.solve(&c, None);
        }
        stats.newton_steps += sol.newton_steps;
        stats.barrier_iterations += sol.outer_iterations;
        if !usable(sol.status) {
            status = RunStatus::SolverFailure;
            message = Some(format!("iteration {iter}: oracle solve ended with {:?}", sol.status));
            break;
        }
        if sol.status == SolveStatus::NearOptimal {
            stats.near_optimal_solves += 1;
        }
        stats.worst_complementarity = stats.worst_complementarity.max(sol.complementarity);
        let lmo = LatentPoint::unpack(form, &sol.z, &oracle.layout);
        let phi_base = phi(&z, &pattern);
        let raw_gap = gradient.dot(&z, &pattern) - gradient.dot(&lmo, &pattern);
        let gap = match fw_gap(&gradient, &z, &lmo, &pattern) {
            Ok(g) => g,
            Err(e) => {
                status = RunStatus::GapViolation;
                message = Some(format!("iteration {iter}: {e}"));
                break;
            }
        };
        let tau = config.step_rule.tau(iter);
        let next = z.combine(&lmo, tau);
        let phi_next = phi(&next, &pattern);
        if phi_next > phi_base - tau * raw_gap + 1e-8 {
            descent_violations += 1;
        }
        if feasibility_residual(&next, &vn, &pattern, &config.formulation)? > config.solver.feas_tol {
            feasibility_violations += 1;
        }
        z = next;
        packed = z.pack(&oracle.layout);
        min_gap = min_gap.min(gap);
        current_err = rel_err(&target, vnorm, &to_factors(&z, &pattern));
        trace.push(TraceRow {
            iter,
            phi: phi_next,
            gap,
            min_gap,
            rel_err: current_err,
            spi_event: spi_now,
            tau,
            newton_steps: sol.newton_steps,
        });
        if config.solver.verbosity >= 1 {
            info!("iter {iter}: phi {phi_next:.12e} gap {gap:.3e} err {current_err:.3e}");
        }
        if current_err <= config.success_tol {
            iterations_to_success.get_or_insert(iter);
            if config.early_stop {
                break;
            }
        }
    }

    let mut pair = to_factors(&z, &pattern);
    let mut final_error = current_err;
    let wants_refine = match config.refine {
        RefineMode::Off => false,
        RefineMode::On => true,
        RefineMode::Auto => match form {
            Formulation::ExpUnder => true,
            Formulation::SocOver => final_error >= config.success_tol && final_error <= 1e-4,
        },
    };
    let mut refine = None;
    if wants_refine && status == RunStatus::Completed {
        let (refined, hs) = hals::refine(target.view(), &pair, &config.hals)?;
        if hs.final_error < final_error {
            pair = refined;
        }
        refine = Some(RefineReport {
            error_before: final_error,
            error_after: hs.final_error.min(final_error),
            sweeps: hs.sweeps,
        });
        final_error = final_error.min(hs.final_error);
    }
    let success = final_error <= config.success_tol;
    if success {
        iterations_to_success.get_or_insert(trace.len());
    }
    let tau_min = config.step_rule.tau_min(config.maxiter);
    let rate_ok = rate_check(&trace, phi0, phi_lb, tau_min);
    let factors = FactorPair { w: pair.w.mapv(|x| x * s), h: pair.h.mapv(|x| x * s) };
    let zu = pattern.zeroed_u().len();
    let zt = pattern.zeroed_t().len();
    Ok(RunReport {
        instance: v.name().to_string(),
        rows: fs,
        cols: ns,
        rank,
        formulation: form,
        step_rule: config.step_rule,
        initializer: config.initializer.to_string(),
        seed: config.seed,
        maxiter: config.maxiter,
        status,
        message,
        phi0,
        phi_lb,
        trace,
        spi_events,
        refine,
        final_error,
        success,
        iterations_to_success: if success { iterations_to_success } else { None },
        rate_check: rate_ok,
        descent_violations,
        feasibility_violations,
        solver: stats,
        pattern_size: (zu, zt),
        factors,
        warnings,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
