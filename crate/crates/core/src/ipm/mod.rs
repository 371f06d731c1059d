//! Primal path-following barrier method for [`ConicProgram`]s.
//!
//! Every cone block, interval side and finite variable bound becomes one
//! barrier block over an internal affine row set `s = h - G z`. For a barrier
//! weight `mu` the method centers `c'z / mu + phi(z)` with damped Newton
//! steps and then shrinks `mu` by `theta` until `nu * mu` falls below the
//! optimality tolerance. Newton systems are solved with a sparse Cholesky
//! factorization whose symbolic analysis is cached per program structure, so
//! repeated solves that only change the objective reuse it.

pub mod barrier;
pub mod cholesky;

use log::{debug, trace};
use serde::{Deserialize, Serialize};

use crate::conic_program::{Cone, ConicProgram, ConicSolution, SolveStatus, SparseRows};
use crate::error::{NmfError, Result};
use barrier::BarrierKind;
use cholesky::SparseCholesky;

/// Floor on the objective magnitude `sum |c_i z_i|` in the relative
/// optimality test, for objectives whose optimal value is zero. The objective
/// is normalized to `max |c_i| = 1`.
const OBJECTIVE_FLOOR: f64 = 1e-20;

/// Looser optimality factor for the near-optimal fallback.
const NEAR_OPTIMAL_FACTOR: f64 = 1e3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Barrier weight for cold starts.
    pub mu0: f64,
    /// Barrier reduction factor per outer iteration.
    pub theta: f64,
    /// Final centering threshold on `lambda^2 / 2`.
    pub newton_tol: f64,
    pub max_outer: usize,
    pub max_newton_per_outer: usize,
    pub line_search_beta: f64,
    pub fraction_to_boundary: f64,
    pub feas_tol: f64,
    /// Stop once `nu * mu <= opt_tol * max(1e-6, |c'z|)` for the objective
    /// normalized to unit max-norm.
    pub opt_tol: f64,
    /// Phase-I stops once the uniform cone shift drops below `-phase1_margin`.
    pub phase1_margin: f64,
    pub verbosity: u8,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mu0: 1.0,
            theta: 0.1,
            newton_tol: 1e-10,
            max_outer: 60,
            max_newton_per_outer: 50,
            line_search_beta: 0.5,
            fraction_to_boundary: 0.99,
            feas_tol: 1e-9,
            opt_tol: 1e-9,
            phase1_margin: 1e-6,
            verbosity: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(NmfError::InvalidInput("theta must lie in (0, 1)".into()));
        }
        if !(self.fraction_to_boundary > 0.0 && self.fraction_to_boundary < 1.0) {
            return Err(NmfError::InvalidInput("fraction_to_boundary must lie in (0, 1)".into()));
        }
        if !(self.line_search_beta > 0.0 && self.line_search_beta < 1.0) {
            return Err(NmfError::InvalidInput("line_search_beta must lie in (0, 1)".into()));
        }
        if !(self.mu0 > 0.0) {
            return Err(NmfError::InvalidInput("mu0 must be positive".into()));
        }
        Ok(())
    }
}

/// Why phase-I did not produce a strictly interior point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseOneFailure {
    pub status: SolveStatus,
    /// Smallest uniform cone shift reached; positive means infeasible.
    pub min_shift: f64,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    kind: BarrierKind,
    rows: [usize; 3],
}

#[derive(Clone, Copy, Debug)]
struct PlanEntry {
    slot: usize,
    pq: usize,
    coef: f64,
}

/// Internal barrier representation of a program (optionally with the phase-I
/// shift variable appended as the last column).
#[derive(Clone, Debug)]
struct Kernel {
    nvars: usize,
    g: SparseRows,
    h: Vec<f64>,
    blocks: Vec<Block>,
    nu: f64,
    chol: SparseCholesky,
    plan: Vec<PlanEntry>,
    plan_ptr: Vec<usize>,
    block_vals: Vec<f64>,
}

impl Kernel {
    fn new(program: &ConicProgram, with_shift: bool) -> Self {
        let n0 = program.nvars;
        let nvars = n0 + usize::from(with_shift);
        let mut g = SparseRows::new(nvars);
        let mut h = Vec::new();
        let mut blocks = Vec::new();
        let mut entries: Vec<(usize, f64)> = Vec::new();

        let mut push = |sign: f64, src: Option<usize>, offset: f64, extra: Option<(usize, f64)>, dir: f64| {
            entries.clear();
            if let Some(r) = src {
                let (cols, vals) = program.g.row(r);
                entries.extend(cols.iter().zip(vals).map(|(&c, &v)| (c, sign * v)));
            }
            if let Some(e) = extra {
                entries.push(e);
            }
            if with_shift {
                entries.push((n0, -dir));
            }
            h.push(offset);
            g.push_row(&entries)
        };

        for cone in &program.cones {
            match *cone {
                Cone::Exp(r) | Cone::RotatedSoc(r) => {
                    let kind = if matches!(cone, Cone::Exp(_)) { BarrierKind::Exp } else { BarrierKind::RotatedSoc };
                    let d = kind.interior_direction();
                    let mut rows = [0; 3];
                    for k in 0..3 {
                        rows[k] = push(1.0, Some(r[k]), program.h[r[k]], None, d[k]);
                    }
                    blocks.push(Block { kind, rows });
                }
                Cone::Nonneg(r) => {
                    let row = push(1.0, Some(r), program.h[r], None, 1.0);
                    blocks.push(Block { kind: BarrierKind::Ray, rows: [row, 0, 0] });
                }
                Cone::Box { row: r, lower, upper } => {
                    if lower.is_finite() {
                        let row = push(1.0, Some(r), program.h[r] - lower, None, 1.0);
                        blocks.push(Block { kind: BarrierKind::Ray, rows: [row, 0, 0] });
                    }
                    if upper.is_finite() {
                        let row = push(-1.0, Some(r), upper - program.h[r], None, 1.0);
                        blocks.push(Block { kind: BarrierKind::Ray, rows: [row, 0, 0] });
                    }
                }
            }
        }
        for (i, b) in program.bounds.iter().enumerate() {
            if b.lower.is_finite() {
                let row = push(1.0, None, -b.lower, Some((i, -1.0)), 1.0);
                blocks.push(Block { kind: BarrierKind::Ray, rows: [row, 0, 0] });
            }
            if b.upper.is_finite() {
                let row = push(1.0, None, b.upper, Some((i, 1.0)), 1.0);
                blocks.push(Block { kind: BarrierKind::Ray, rows: [row, 0, 0] });
            }
        }

        let cliques: Vec<Vec<usize>> = blocks
            .iter()
            .map(|b| {
                let mut vars: Vec<usize> =
                    b.rows[..b.kind.dim()].iter().flat_map(|&r| g.row(r).0.iter().copied()).collect();
                vars.sort_unstable();
                vars.dedup();
                vars
            })
            .collect();
        let chol = SparseCholesky::analyze(nvars, cliques.iter().map(|c| c.as_slice()));

        let mut plan = Vec::new();
        let mut plan_ptr = vec![0];
        for b in &blocks {
            let d = b.kind.dim();
            for p in 0..d {
                let (ci, vi) = g.row(b.rows[p]);
                for q in 0..d {
                    let (cj, vj) = g.row(b.rows[q]);
                    for (&i, &gi) in ci.iter().zip(vi) {
                        for (&j, &gj) in cj.iter().zip(vj) {
                            if i == j || keeps_lower(&chol, i, j) {
                                plan.push(PlanEntry { slot: chol.slot(i, j), pq: p * d + q, coef: gi * gj });
                            }
                        }
                    }
                }
            }
            plan_ptr.push(plan.len());
        }
        let nu = blocks.iter().map(|b| b.kind.nu()).sum();
        let nblocks = blocks.len();
        Self { nvars, g, h, blocks, nu, chol, plan, plan_ptr, block_vals: vec![0.0; nblocks] }
    }

    fn slack_into(&self, z: &[f64], s: &mut [f64]) {
        for (i, si) in s.iter_mut().enumerate() {
            *si = self.h[i] - self.g.row_dot(i, z);
        }
    }

    fn local(&self, b: &Block, s: &[f64]) -> [f64; 3] {
        let mut x = [0.0; 3];
        for p in 0..b.kind.dim() {
            x[p] = s[b.rows[p]];
        }
        x
    }

    fn in_domain(&self, s: &[f64]) -> bool {
        self.blocks.iter().all(|b| b.kind.in_domain(&self.local(b, s)[..b.kind.dim()]))
    }

    /// Barrier value per block into `out`; false outside the domain.
    fn block_values(&self, s: &[f64], out: &mut [f64]) -> bool {
        for (b, o) in self.blocks.iter().zip(out.iter_mut()) {
            match b.kind.value(&self.local(b, s)[..b.kind.dim()]) {
                Some(v) => *o = v,
                None => return false,
            }
        }
        true
    }

    /// Assembles the Hessian into the factorization workspace and returns the
    /// gradient `c * inv_mu + grad phi` in `grad`.
    fn assemble(&mut self, s: &[f64], c: &[f64], inv_mu: f64, grad: &mut [f64]) {
        self.chol.clear();
        for (g, &ci) in grad.iter_mut().zip(c) {
            *g = ci * inv_mu;
        }
        let mut gs = [0.0; 3];
        let mut hs = [0.0; 9];
        for (bi, b) in self.blocks.iter().enumerate() {
            let d = b.kind.dim();
            let x = self.local(b, s);
            b.kind.derivatives(&x[..d], &mut gs, &mut hs);
            for p in 0..d {
                let (cols, vals) = self.g.row(b.rows[p]);
                for (&i, &gi) in cols.iter().zip(vals) {
                    grad[i] -= gi * gs[p];
                }
            }
            for e in &self.plan[self.plan_ptr[bi]..self.plan_ptr[bi + 1]] {
                self.chol.add(e.slot, hs[e.pq] * e.coef);
            }
        }
    }

    fn factor(&mut self) -> bool {
        [0.0, 1e-12, 1e-8].iter().any(|&reg| self.chol.factor(reg).is_ok())
    }

    /// Largest step keeping ray and rotated-cone rows feasible.
    fn max_step(&self, s: &[f64], ds: &[f64]) -> f64 {
        let mut amax = f64::INFINITY;
        for b in &self.blocks {
            match b.kind {
                BarrierKind::Ray => {
                    let (x, d) = (s[b.rows[0]], ds[b.rows[0]]);
                    if d < 0.0 {
                        amax = amax.min(-x / d);
                    }
                }
                BarrierKind::RotatedSoc => {
                    let x = self.local(b, s);
                    let d = self.local(b, ds);
                    for k in 0..2 {
                        if d[k] < 0.0 {
                            amax = amax.min(-x[k] / d[k]);
                        }
                    }
                    let qa = 2.0 * d[0] * d[1] - d[2] * d[2];
                    let qb = 2.0 * (x[0] * d[1] + x[1] * d[0]) - 2.0 * x[2] * d[2];
                    let qc = 2.0 * x[0] * x[1] - x[2] * x[2];
                    amax = amax.min(smallest_positive_root(qa, qb, qc));
                }
                BarrierKind::Exp => {}
            }
        }
        amax
    }
}

/// Off-diagonal entries are stored once, in the lower triangle of the
/// permuted matrix; diagonal slots increase with elimination position.
fn keeps_lower(chol: &SparseCholesky, i: usize, j: usize) -> bool {
    chol.diag_slot(i) > chol.diag_slot(j)
}

/// Smallest positive root of `a t^2 + b t + c` with `c > 0`, or infinity.
fn smallest_positive_root(a: f64, b: f64, c: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(c.abs());
    if a.abs() <= 1e-14 * scale {
        return if b < 0.0 { -c / b } else { f64::INFINITY };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return f64::INFINITY;
    }
    let sq = disc.sqrt();
    // numerically stable pair of roots
    let q = -0.5 * (b + b.signum() * sq);
    let roots = [q / a, if q != 0.0 { c / q } else { f64::INFINITY }];
    roots.into_iter().filter(|&t| t > 0.0).fold(f64::INFINITY, f64::min)
}

struct PathOutcome {
    z: Vec<f64>,
    /// Whether the last centering loop reached its tolerance.
    centered: bool,
    status: SolveStatus,
    mu: f64,
    outer: usize,
    newton: usize,
}

/// Follows the central path for objective `c` (already normalized) from the
/// strictly interior point `z`.
fn follow_path(
    kernel: &mut Kernel,
    c: &[f64],
    mut z: Vec<f64>,
    mu_init: f64,
    cfg: &SolverConfig,
    early_exit: Option<(usize, f64)>,
    mut snapshots: Option<&mut Vec<(f64, Vec<f64>)>>,
) -> PathOutcome {
    let n = kernel.nvars;
    let m = kernel.h.len();
    let mut s = vec![0.0; m];
    let mut s_new = vec![0.0; m];
    let mut z_new = vec![0.0; n];
    let mut grad = vec![0.0; n];
    let mut step = vec![0.0; n];
    let mut ds = vec![0.0; m];
    let mut vals_new = vec![0.0; kernel.blocks.len()];
    let mut mu = mu_init;
    let mut newton = 0;
    let mut stalls = 0;
    let kernel_nu = kernel.nu;
    kernel.slack_into(&z, &mut s);

    let objective = |z: &[f64]| -> f64 { c.iter().zip(z).map(|(a, b)| a * b).sum() };
    let magnitude =
        |z: &[f64]| -> f64 { c.iter().zip(z).map(|(a, b)| (a * b).abs()).sum::<f64>().max(OBJECTIVE_FLOOR) };
    // Last centered iterate. When the path breaks down close to the end (the
    // Newton systems of degenerate problems lose all precision at tiny
    // weights) it is returned as near optimal if its gap bound is within
    // NEAR_OPTIMAL_FACTOR of the target.
    let mut best: Option<(f64, Vec<f64>)> = None;
    let fallback = |status, z: Vec<f64>, mu: f64, outer, newton, best: Option<(f64, Vec<f64>)>| match best {
        Some((mu_b, z_b)) if kernel_nu * mu_b <= NEAR_OPTIMAL_FACTOR * cfg.opt_tol * magnitude(&z_b) => {
            PathOutcome { z: z_b, centered: true, status: SolveStatus::NearOptimal, mu: mu_b, outer, newton }
        }
        _ => PathOutcome { z, centered: false, status, mu, outer, newton },
    };

    for outer in 0..cfg.max_outer {
        let target = cfg.opt_tol * magnitude(&z);
        let last_stage = kernel.nu * mu <= target;
        let tol = if last_stage { cfg.newton_tol } else { 0.25 };
        let mut last_lambda2 = f64::INFINITY;
        let mut centered = false;
        for _ in 0..cfg.max_newton_per_outer {
            kernel.assemble(&s, c, 1.0 / mu, &mut grad);
            if !kernel.factor() {
                return fallback(SolveStatus::NumericFailure, z, mu, outer, newton, best);
            }
            step.iter_mut().zip(&grad).for_each(|(d, g)| *d = -g);
            kernel.chol.solve(&mut step);
            let lambda2: f64 = -grad.iter().zip(&step).map(|(g, d)| g * d).sum::<f64>();
            if !lambda2.is_finite() {
                return fallback(SolveStatus::NumericFailure, z, mu, outer, newton, best);
            }
            // past the roundoff floor Newton stops converging quadratically
            if lambda2 / 2.0 <= tol || (lambda2 / 2.0 <= 1e-2 && lambda2 > 0.25 * last_lambda2) {
                centered = true;
                break;
            }
            last_lambda2 = lambda2;
            for (i, d) in ds.iter_mut().enumerate() {
                *d = -kernel.g.row_dot(i, &step);
            }
            let mut alpha = (cfg.fraction_to_boundary * kernel.max_step(&s, &ds)).min(1.0);
            let slope = -lambda2;
            let c_step = objective(&step) / mu;
            let mut block_vals = std::mem::take(&mut kernel.block_vals);
            let have_vals = kernel.block_values(&s, &mut block_vals);
            debug_assert!(have_vals);
            let mut accepted = false;
            for _ in 0..80 {
                for i in 0..n {
                    z_new[i] = z[i] + alpha * step[i];
                }
                kernel.slack_into(&z_new, &mut s_new);
                if kernel.block_values(&s_new, &mut vals_new) {
                    let dphi: f64 = vals_new.iter().zip(&block_vals).map(|(a, b)| a - b).sum();
                    let df = alpha * c_step + dphi;
                    if lambda2 < 1e-6 || df <= 1e-2 * alpha * slope {
                        accepted = true;
                        break;
                    }
                }
                alpha *= cfg.line_search_beta;
            }
            kernel.block_vals = block_vals;
            newton += 1;
            if !accepted {
                break;
            }
            std::mem::swap(&mut z, &mut z_new);
            std::mem::swap(&mut s, &mut s_new);
            trace!("newton {newton}: mu {mu:.3e} lambda2 {lambda2:.3e} step {alpha:.3e}");
            if let Some((var, threshold)) = early_exit {
                if z[var] <= threshold {
                    return PathOutcome { z, centered, status: SolveStatus::Optimal, mu, outer, newton };
                }
            }
        }
        if centered {
            if let Some(log) = snapshots.as_deref_mut() {
                log.push((mu, z.clone()));
            }
            best = Some((mu, z.clone()));
        }
        stalls = if centered { 0 } else { stalls + 1 };
        if cfg.verbosity >= 2 {
            debug!("outer {outer}: mu {mu:.3e} newton {newton} centered {centered} objective {:.12e}", objective(&z));
        }
        let target = cfg.opt_tol * magnitude(&z);
        // the gap bound nu * mu only holds close to the central path
        if centered && kernel.nu * mu <= target {
            return PathOutcome { z, centered, status: SolveStatus::Optimal, mu, outer: outer + 1, newton };
        }
        if stalls >= 3 {
            return fallback(SolveStatus::NumericFailure, z, mu, outer + 1, newton, best);
        }
        // an uncentered stage is retried at the same weight
        if centered {
            mu *= cfg.theta;
        }
    }
    fallback(SolveStatus::IterLimit, z, mu, cfg.max_outer, newton, best)
}

/// Reusable barrier solver for one program structure.
///
/// The objective passed to [`BarrierSolver::solve`] may change between calls;
/// constraints, cones and bounds are those of the program given at construction.
#[derive(Clone, Debug)]
pub struct BarrierSolver {
    config: SolverConfig,
    program: ConicProgram,
    kernel: Kernel,
    phase1: Option<Kernel>,
    center: Option<Option<Vec<f64>>>,
    /// Centered iterates `(mu, z)` of the last successful solve, `mu` decreasing.
    snapshots: Vec<(f64, Vec<f64>)>,
}

impl BarrierSolver {
    pub fn new(program: &ConicProgram, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        program.validate().map_err(|diags| {
            let text: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            NmfError::Contract(format!("invalid program: {}", text.join("; ")))
        })?;
        Ok(Self {
            kernel: Kernel::new(program, false),
            program: program.clone(),
            config,
            phase1: None,
            center: None,
            snapshots: Vec::new(),
        })
    }

    pub fn program(&self) -> &ConicProgram {
        &self.program
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// Drops the centered iterates kept from the previous solve, so the next
    /// solve starts from the warm start or the analytic center.
    pub fn forget_path(&mut self) {
        self.snapshots.clear();
    }

    /// Total barrier parameter.
    pub fn nu(&self) -> f64 {
        self.kernel.nu
    }

    pub fn is_strictly_interior(&self, z: &[f64]) -> bool {
        if z.len() != self.program.nvars || z.iter().any(|x| !x.is_finite()) {
            return false;
        }
        let mut s = vec![0.0; self.kernel.h.len()];
        self.kernel.slack_into(z, &mut s);
        self.kernel.in_domain(&s)
    }

    fn default_start(&self) -> Vec<f64> {
        self.program
            .bounds
            .iter()
            .map(|b| match (b.lower.is_finite(), b.upper.is_finite()) {
                (true, true) => 0.5 * (b.lower + b.upper),
                (true, false) => b.lower + 1.0,
                (false, true) => b.upper - 1.0,
                (false, false) => 0.0,
            })
            .collect()
    }

    /// Finds a strictly interior point by minimizing a uniform shift `a` of
    /// all cone blocks along interior directions.
    pub fn phase1(&mut self, start: Option<&[f64]>) -> std::result::Result<Vec<f64>, PhaseOneFailure> {
        let n0 = self.program.nvars;
        if let Some(z) = start {
            if self.is_strictly_interior(z) {
                return Ok(z.to_vec());
            }
        }
        let mut z: Vec<f64> = match start {
            Some(z) if z.len() == n0 && z.iter().all(|x| x.is_finite()) => z.to_vec(),
            _ => self.default_start(),
        };
        let kernel = self.phase1.get_or_insert_with(|| Kernel::new(&self.program, true));
        z.push(0.0);
        let mut s = vec![0.0; kernel.h.len()];
        kernel.slack_into(&z, &mut s);
        let mut shift = 1.0
            + kernel.blocks.iter().filter(|b| b.kind == BarrierKind::Ray).map(|b| -s[b.rows[0]]).fold(0.0, f64::max);
        loop {
            z[n0] = shift;
            kernel.slack_into(&z, &mut s);
            if kernel.in_domain(&s) {
                break;
            }
            shift = 2.0 * shift + 1.0;
            if !shift.is_finite() {
                return Err(PhaseOneFailure { status: SolveStatus::NumericFailure, min_shift: f64::INFINITY });
            }
        }
        let mut c = vec![0.0; n0 + 1];
        c[n0] = 1.0;
        let margin = self.config.phase1_margin;
        let out = follow_path(kernel, &c, z, self.config.mu0, &self.config, Some((n0, -margin)), None);
        let a = out.z[n0];
        debug!("phase-I: shift {a:.3e} after {} Newton steps", out.newton);
        if a <= -margin {
            let z = out.z[..n0].to_vec();
            if self.is_strictly_interior(&z) {
                return Ok(z);
            }
        }
        let status = match out.status {
            SolveStatus::Optimal | SolveStatus::NearOptimal => SolveStatus::Infeasible,
            other => other,
        };
        Err(PhaseOneFailure { status, min_shift: a })
    }

    /// Minimizes `objective' z` over the program's feasible set.
    pub fn solve(&mut self, objective: &[f64], warm_start: Option<&[f64]>) -> ConicSolution {
        assert_eq!(objective.len(), self.program.nvars, "objective length");
        let failed = |status, z: Vec<f64>| ConicSolution {
            objective: f64::NAN,
            z,
            status,
            complementarity: f64::INFINITY,
            primal_residual: f64::INFINITY,
            mu: f64::NAN,
            outer_iterations: 0,
            newton_steps: 0,
        };

        let scale = objective.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        let c: Vec<f64> =
            if scale > 0.0 { objective.iter().map(|x| x / scale).collect() } else { vec![0.0; objective.len()] };
        // Start from a point that is approximately central for `c` at the
        // smallest barrier weight available: a centered iterate of the previous
        // solve, the caller's warm start, or the analytic center. Points close
        // to the boundary, such as a previous optimum, are never approximately
        // central and are skipped.
        let mut start: Option<(f64, Vec<f64>)> = None;
        if scale > 0.0 {
            start = self.snapshot_start(&c);
            if let Some(w) = warm_start.filter(|z| self.is_strictly_interior(z)) {
                if let Some(mu) = self.entry_mu(&c, w) {
                    if start.as_ref().is_none_or(|(best, _)| mu < *best) {
                        start = Some((mu, w.to_vec()));
                    }
                }
            }
        }
        let (mu_init, z0) = match start {
            Some(found) => found,
            None => {
                let center = match self.analytic_center(warm_start) {
                    Ok(Some(z)) => z,
                    Ok(None) => match warm_start.filter(|z| self.is_strictly_interior(z)) {
                        Some(z) => z.to_vec(),
                        None => match self.phase1(warm_start) {
                            Ok(z) => z,
                            Err(fail) => return failed(fail.status, Vec::new()),
                        },
                    },
                    Err(fail) => return failed(fail.status, Vec::new()),
                };
                let mu = if scale > 0.0 { self.entry_mu(&c, &center) } else { None };
                (mu.unwrap_or(self.config.mu0), center)
            }
        };
        // with a zero objective the analytic center is the answer
        let cfg = if scale > 0.0 {
            self.config.clone()
        } else {
            SolverConfig { max_outer: 1, opt_tol: f64::INFINITY, ..self.config.clone() }
        };
        let mut snapshots = Vec::new();
        let out = follow_path(&mut self.kernel, &c, z0, mu_init, &cfg, None, Some(&mut snapshots));
        if matches!(out.status, SolveStatus::Optimal | SolveStatus::NearOptimal) {
            self.snapshots = snapshots;
        }
        let primal_residual = self.max_violation(&out.z);
        let magnitude: f64 = c.iter().zip(&out.z).map(|(a, b)| (a * b).abs()).sum();
        let mut status = out.status;
        if matches!(status, SolveStatus::Optimal | SolveStatus::NearOptimal) && !self.program.is_feasible(&out.z, 1e-8)
        {
            status = SolveStatus::NumericFailure;
        }
        ConicSolution {
            objective: objective.iter().zip(&out.z).map(|(a, b)| a * b).sum(),
            complementarity: if scale > 0.0 { self.kernel.nu * out.mu / magnitude.max(OBJECTIVE_FLOOR) } else { 0.0 },
            primal_residual,
            mu: out.mu,
            outer_iterations: out.outer,
            newton_steps: out.newton,
            status,
            z: out.z,
        }
    }

    /// Analytic center of the feasible set, computed once and cached. `None`
    /// when the set is unbounded in a direction the barrier does not see.
    fn analytic_center(&mut self, hint: Option<&[f64]>) -> std::result::Result<Option<Vec<f64>>, PhaseOneFailure> {
        if let Some(center) = &self.center {
            return Ok(center.clone());
        }
        let z = match hint.filter(|z| self.is_strictly_interior(z)) {
            Some(z) => z.to_vec(),
            None => self.phase1(hint)?,
        };
        let cfg = SolverConfig {
            max_outer: 1,
            opt_tol: f64::INFINITY,
            max_newton_per_outer: 20 * self.config.max_newton_per_outer,
            ..self.config.clone()
        };
        let zero = vec![0.0; self.kernel.nvars];
        let start_size = z.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let out = follow_path(&mut self.kernel, &zero, z, 1.0, &cfg, None, None);
        if out.status == SolveStatus::NumericFailure {
            return Err(PhaseOneFailure { status: out.status, min_shift: f64::NAN });
        }
        // On an unbounded set the iterates run off and the decrement
        // eventually underflows; treat a blow-up as "no center".
        let reach = self
            .program
            .bounds
            .iter()
            .flat_map(|b| [b.lower, b.upper])
            .filter(|x| x.is_finite())
            .fold(start_size.max(1.0), |m, x| m.max(x.abs()));
        let size = out.z.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let bounded = size <= 1e6 * reach;
        let center = (out.centered && bounded && self.is_strictly_interior(&out.z)).then_some(out.z);
        self.center = Some(center.clone());
        Ok(center)
    }

    /// Deepest stored centered iterate that is approximately central for `c`.
    ///
    /// Found by bisection, assuming iterates further along the previous path
    /// are less likely to qualify.
    fn snapshot_start(&mut self, c: &[f64]) -> Option<(f64, Vec<f64>)> {
        let snaps = std::mem::take(&mut self.snapshots);
        let (mut lo, mut hi) = (0, snaps.len());
        let mut best = None;
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.entry_mu(c, &snaps[mid].1) {
                Some(mu) => {
                    best = Some((mu, mid));
                    lo = mid + 1;
                }
                None => hi = mid,
            }
        }
        let out = best.map(|(mu, i)| (mu, snaps[i].1.clone()));
        self.snapshots = snaps;
        out
    }

    /// Smallest barrier weight `mu` at which `z` is approximately central for
    /// `c`, i.e. `|| c / mu + grad phi(z) ||_{H^-1}^2 <= 1`.
    fn entry_mu(&mut self, c: &[f64], z: &[f64]) -> Option<f64> {
        let n = self.kernel.nvars;
        let mut s = vec![0.0; self.kernel.h.len()];
        self.kernel.slack_into(z, &mut s);
        let mut gphi = vec![0.0; n];
        let zero = vec![0.0; n];
        self.kernel.assemble(&s, &zero, 0.0, &mut gphi);
        if !self.kernel.factor() {
            return None;
        }
        let mut hc = c.to_vec();
        self.kernel.chol.solve(&mut hc);
        let mut hg = gphi.clone();
        self.kernel.chol.solve(&mut hg);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (a, b, d) = (dot(c, &hc), dot(&gphi, &hc), dot(&gphi, &hg));
        // a t^2 + 2 b t + d <= 1 with t = 1/mu; take the largest such t
        let disc = b * b - a * (d - 1.0);
        if !(a > 0.0) || !(disc >= 0.0) {
            return None;
        }
        let t = (-b + disc.sqrt()) / a;
        (t.is_finite() && t > 0.0).then(|| 1.0 / t)
    }

    fn max_violation(&self, z: &[f64]) -> f64 {
        if z.len() != self.program.nvars {
            return f64::INFINITY;
        }
        let s = self.program.slack(z);
        let mut worst = 0.0f64;
        let mut buf = [0.0; 3];
        for cone in &self.program.cones {
            let rows = cone.rows();
            for (k, &r) in rows.iter().enumerate() {
                buf[k] = s[r];
            }
            worst = worst.max(cone.distance(&buf[..rows.len()]));
        }
        for (b, &x) in self.program.bounds.iter().zip(z) {
            worst = worst.max(b.lower - x).max(x - b.upper);
        }
        worst
    }
}

/// One-shot solve of `program`.
pub fn solve(program: &ConicProgram, config: &SolverConfig, warm_start: Option<&[f64]>) -> Result<ConicSolution> {
    let mut solver = BarrierSolver::new(program, config.clone())?;
    Ok(solver.solve(&program.objective, warm_start))
}

/// One-shot phase-I: a strictly interior point of `program`.
pub fn phase1(program: &ConicProgram, config: &SolverConfig) -> Result<std::result::Result<Vec<f64>, PhaseOneFailure>> {
    let mut solver = BarrierSolver::new(program, config.clone())?;
    Ok(solver.phase1(None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conic_program::ProgramBuilder;

    #[test]
    fn single_exp_cone() {
        // minimize x subject to (x, 1, 0) in K_exp
        let mut b = ProgramBuilder::new(1);
        let r0 = b.row(&[(0, -1.0)], 0.0);
        let r1 = b.row(&[], 1.0);
        let r2 = b.row(&[], 0.0);
        b.cone(Cone::Exp([r0, r1, r2])).objective(0, 1.0).bound(0, -10.0, 10.0);
        let sol = solve(&b.build(), &SolverConfig::default(), None).unwrap();
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-7, "{}", sol.z[0]);
    }

    #[test]
    fn contradictory_boxes_are_infeasible() {
        let mut b = ProgramBuilder::new(1);
        let r0 = b.row(&[(0, -1.0)], 0.0);
        let r1 = b.row(&[(0, -1.0)], 0.0);
        b.cone(Cone::Box { row: r0, lower: 1.0, upper: f64::INFINITY });
        b.cone(Cone::Box { row: r1, lower: f64::NEG_INFINITY, upper: 0.0 });
        let res = phase1(&b.build(), &SolverConfig::default()).unwrap();
        let fail = res.unwrap_err();
        assert_eq!(fail.status, SolveStatus::Infeasible);
        assert!(fail.min_shift > 0.0);
    }

    /// Minimum of `c'z` over `{a_i'z <= b_i}` in the plane by enumerating
    /// pairwise constraint intersections.
    fn lp_vertex_oracle(a: &[[f64; 2]], b: &[f64], c: [f64; 2]) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                let det = a[i][0] * a[j][1] - a[i][1] * a[j][0];
                if det.abs() < 1e-12 {
                    continue;
                }
                let x = (b[i] * a[j][1] - a[i][1] * b[j]) / det;
                let y = (a[i][0] * b[j] - b[i] * a[j][0]) / det;
                if a.iter().zip(b).all(|(r, &bi)| r[0] * x + r[1] * y <= bi + 1e-9) {
                    best = best.min(c[0] * x + c[1] * y);
                }
            }
        }
        best
    }

    #[test]
    fn lp_matches_vertex_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut a: Vec<[f64; 2]> = vec![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];
            let mut bv = vec![3.0, 3.0, 3.0, 3.0];
            for _ in 0..4 {
                a.push([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                bv.push(rng.random_range(0.5..2.0));
            }
            let c = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let mut pb = ProgramBuilder::new(2);
            for (r, &bi) in a.iter().zip(&bv) {
                let row = pb.row(&[(0, r[0]), (1, r[1])], bi);
                pb.cone(Cone::Nonneg(row));
            }
            pb.objective(0, c[0]).objective(1, c[1]);
            let sol = solve(&pb.build(), &SolverConfig::default(), None).unwrap();
            assert_eq!(sol.status, SolveStatus::Optimal);
            let oracle = lp_vertex_oracle(&a, &bv, c);
            assert!((sol.objective - oracle).abs() < 1e-7, "{} vs {oracle}", sol.objective);
        }
    }

    #[test]
    fn warm_start_reuses_structure() {
        // minimize c'z over the unit square; objective changes between calls
        let mut pb = ProgramBuilder::new(2);
        pb.bound(0, 0.0, 1.0).bound(1, 0.0, 1.0);
        let program = pb.build();
        let mut solver = BarrierSolver::new(&program, SolverConfig::default()).unwrap();
        let first = solver.solve(&[1.0, -1.0], None);
        assert_eq!(first.status, SolveStatus::Optimal);
        assert!((first.objective + 1.0).abs() < 1e-8);
        let warm = [0.5, 0.5];
        let second = solver.solve(&[-2.0, 1.0], Some(&warm));
        assert_eq!(second.status, SolveStatus::Optimal);
        assert!((second.objective + 2.0).abs() < 1e-8);
    }

    #[test]
    fn roots() {
        assert!((smallest_positive_root(1.0, -3.0, 2.0) - 1.0).abs() < 1e-15);
        assert_eq!(smallest_positive_root(1.0, 3.0, 2.0), f64::INFINITY);
        assert!((smallest_positive_root(0.0, -2.0, 2.0) - 1.0).abs() < 1e-15);
        assert!((smallest_positive_root(-1.0, 0.0, 4.0) - 2.0).abs() < 1e-15);
    }
}
