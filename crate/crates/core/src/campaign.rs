//! Multi-initialization campaigns and gap traces.
//!
//! Per-run seeds come from a ChaCha8 generator keyed by the master seed, one
//! stream per run index, so results do not depend on scheduling or on the
//! number of worker threads.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NmfError, Result};
use crate::formulations::Formulation;
use crate::fw::{self, DriverConfig, RunReport, RunStatus, StepRule};
use crate::instances::{builtin_matrix, gen_random_product, NonnegMatrix};
use crate::io;

/// Where a campaign's matrix comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum InstanceSpec {
    Builtin(String),
    File(PathBuf),
    /// Product of random nonnegative `rows x rank` and `rank x cols`
    /// factors; every run draws its own matrix.
    Random {
        rows: usize,
        cols: usize,
        rank: usize,
    },
}

impl InstanceSpec {
    /// Matrix for run seeds `matrix_seed`; only random instances use it.
    pub fn load(&self, matrix_seed: u64) -> Result<NonnegMatrix> {
        match self {
            InstanceSpec::Builtin(name) => builtin_matrix(name),
            InstanceSpec::File(path) => io::load_matrix(path),
            InstanceSpec::Random { rows, cols, rank } => gen_random_product(*rows, *cols, *rank, matrix_seed),
        }
    }

    pub fn label(&self) -> String {
        match self {
            InstanceSpec::Builtin(name) => name.clone(),
            InstanceSpec::File(path) => {
                path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "matrix".into())
            }
            InstanceSpec::Random { rows, cols, rank } => format!("random{rows}x{cols}r{rank}"),
        }
    }
}

impl fmt::Display for InstanceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InstanceSpec::Builtin(name) => write!(f, "builtin:{name}"),
            InstanceSpec::File(path) => write!(f, "file:{}", path.display()),
            InstanceSpec::Random { rows, cols, rank } => write!(f, "random:{rows},{cols},{rank}"),
        }
    }
}

/// Parses `builtin:NAME`, `file:PATH`, or `F,N,K` for a random product.
impl FromStr for InstanceSpec {
    type Err = NmfError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(name) = s.strip_prefix("builtin:") {
            return Ok(InstanceSpec::Builtin(name.to_string()));
        }
        if let Some(path) = s.strip_prefix("file:") {
            return Ok(InstanceSpec::File(path.into()));
        }
        let dims = s.strip_prefix("random:").unwrap_or(s);
        let parts: Vec<usize> = dims
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| NmfError::InvalidInput(format!("expected F,N,K, found `{s}`")))?;
        match parts[..] {
            [rows, cols, rank] if rows > 0 && cols > 0 && rank > 0 => Ok(InstanceSpec::Random { rows, cols, rank }),
            _ => Err(NmfError::InvalidInput(format!("expected three positive integers F,N,K, found `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub instance: InstanceSpec,
    pub rank: usize,
    pub formulations: Vec<Formulation>,
    pub n_inits: usize,
    /// `seed` is ignored; per-run seeds derive from `master_seed`.
    pub config: DriverConfig,
    pub master_seed: u64,
    /// Worker threads; `0` uses rayon's default.
    pub jobs: usize,
    pub out_dir: Option<PathBuf>,
}

impl Campaign {
    pub fn new(instance: InstanceSpec, rank: usize, formulation: Formulation, n_inits: usize) -> Self {
        Self {
            instance,
            rank,
            formulations: vec![formulation],
            n_inits,
            config: DriverConfig::default(),
            master_seed: 0,
            jobs: 0,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_inits == 0 {
            return Err(NmfError::InvalidInput("a campaign needs at least one initialization".into()));
        }
        if self.rank == 0 {
            return Err(NmfError::InvalidInput("rank K must be at least 1".into()));
        }
        if self.formulations.is_empty() {
            return Err(NmfError::InvalidInput("no formulation selected".into()));
        }
        self.config.validate()
    }
}

/// `(run seed, matrix seed)` for run `index`.
pub fn run_seeds(master: u64, index: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    let run = rng.next_u64();
    let matrix = rng.next_u64();
    (run, matrix)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub index: usize,
    pub seed: u64,
    pub success: bool,
    pub final_error: f64,
    /// `None` when the run aborted before producing a report.
    pub status: Option<RunStatus>,
    pub iterations: usize,
    pub iterations_to_success: Option<usize>,
    pub rate_check: bool,
    pub descent_violations: usize,
    pub feasibility_violations: usize,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub instance: String,
    pub rank: usize,
    pub formulation: Formulation,
    pub initializer: String,
    pub step_rule: StepRule,
    pub maxiter: usize,
    pub master_seed: u64,
    pub n_inits: usize,
    pub successes: usize,
    pub final_errors: Vec<f64>,
    pub median_iterations_to_success: Option<f64>,
    /// Completed runs whose min-gap trace broke the rate bound.
    pub rate_violations: usize,
    pub descent_violations: usize,
    pub feasibility_violations: usize,
    pub runs: Vec<RunOutcome>,
    /// Kept out of `summary.json` so identical campaigns give identical files.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl CampaignSummary {
    /// One line in the style of a results table.
    pub fn table_row(&self) -> String {
        let median = self.median_iterations_to_success.map(|m| format!("{m:.0}")).unwrap_or_else(|| "-".into());
        format!(
            "{:<14} K={:<2} {:<4} {:<10} {:>3}/{:<3} median iters {}",
            self.instance,
            self.rank,
            self.formulation.name(),
            self.initializer,
            self.successes,
            self.n_inits,
            median
        )
    }
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

fn one_run(campaign: &Campaign, form: Formulation, index: usize) -> (RunOutcome, Option<RunReport>) {
    let (seed, matrix_seed) = run_seeds(campaign.master_seed, index);
    let cfg = DriverConfig { seed, ..campaign.config.clone() };
    let result = campaign.instance.load(matrix_seed).and_then(|v| fw::run(&v, campaign.rank, form, &cfg));
    match result {
        Ok(report) => {
            let outcome = RunOutcome {
                index,
                seed,
                success: report.success,
                final_error: report.final_error,
                status: Some(report.status),
                iterations: report.trace.len(),
                iterations_to_success: report.iterations_to_success,
                rate_check: report.rate_check,
                descent_violations: report.descent_violations,
                feasibility_violations: report.feasibility_violations,
                message: report.message.clone(),
            };
            (outcome, Some(report))
        }
        Err(e) => {
            warn!("run {index} (seed {seed}) aborted: {e}");
            let outcome = RunOutcome {
                index,
                seed,
                success: false,
                final_error: f64::INFINITY,
                status: None,
                iterations: 0,
                iterations_to_success: None,
                rate_check: true,
                descent_violations: 0,
                feasibility_violations: 0,
                message: Some(e.to_string()),
            };
            (outcome, None)
        }
    }
}

fn summarize(campaign: &Campaign, form: Formulation, runs: Vec<RunOutcome>, wall_time_s: f64) -> CampaignSummary {
    let successes = runs.iter().filter(|r| r.success).count();
    let to_success: Vec<f64> =
        runs.iter().filter(|r| r.success).filter_map(|r| r.iterations_to_success.map(|i| i as f64)).collect();
    CampaignSummary {
        instance: campaign.instance.label(),
        rank: campaign.rank,
        formulation: form,
        initializer: campaign.config.initializer.to_string(),
        step_rule: campaign.config.step_rule,
        maxiter: campaign.config.maxiter,
        master_seed: campaign.master_seed,
        n_inits: campaign.n_inits,
        successes,
        final_errors: runs.iter().map(|r| r.final_error).collect(),
        median_iterations_to_success: median(to_success),
        rate_violations: runs.iter().filter(|r| r.status == Some(RunStatus::Completed) && !r.rate_check).count(),
        descent_violations: runs.iter().map(|r| r.descent_violations).sum(),
        feasibility_violations: runs.iter().map(|r| r.feasibility_violations).sum(),
        runs,
        wall_time_s,
    }
}

fn write_run(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::save_report(report, dir.join("report.json"))?;
    io::save_trace(&report.trace, dir.join("trace.csv"))?;
    io::save_array(report.factors.w.view(), dir.join("W.csv"))?;
    io::save_array(report.factors.h.view(), dir.join("H.csv"))?;
    Ok(())
}

#[derive(Serialize)]
struct Timing<'a> {
    formulation: &'a str,
    wall_time_s: f64,
    run_wall_time_s: Vec<f64>,
}

/// Runs every formulation of the campaign; one summary per formulation.
///
/// Runs execute on a rayon pool of `jobs` threads. Files are written from
/// the calling thread after each formulation finishes: `summary.json` and
/// `timing.json` in `<out>/<form>/`, and the per-run reports, traces and
/// factors in `<out>/<form>/run_<index>/`.
pub fn run_campaign(campaign: &Campaign) -> Result<Vec<CampaignSummary>> {
    campaign.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(campaign.jobs)
        .build()
        .map_err(|e| NmfError::InvalidInput(format!("thread pool: {e}")))?;
    let mut summaries = Vec::new();
    for &form in &campaign.formulations {
        let start = Instant::now();
        let results: Vec<(RunOutcome, Option<RunReport>)> =
            pool.install(|| (0..campaign.n_inits).into_par_iter().map(|i| one_run(campaign, form, i)).collect());
        let wall = start.elapsed().as_secs_f64();
        let run_times: Vec<f64> = results.iter().map(|(_, r)| r.as_ref().map_or(0.0, |r| r.wall_time_s)).collect();
        if let Some(out) = &campaign.out_dir {
            let dir = out.join(form.name());
            for (outcome, report) in &results {
                if let Some(report) = report {
                    write_run(&dir.join(format!("run_{:03}", outcome.index)), report)?;
                }
            }
        }
        let runs = results.into_iter().map(|(o, _)| o).collect();
        let summary = summarize(campaign, form, runs, wall);
        if let Some(out) = &campaign.out_dir {
            let dir = out.join(form.name());
            std::fs::create_dir_all(&dir)?;
            io::save_report(&summary, dir.join("summary.json"))?;
            let timing = Timing { formulation: form.name(), wall_time_s: wall, run_wall_time_s: run_times };
            io::save_report(&timing, dir.join("timing.json"))?;
        }
        info!("{}", summary.table_row());
        summaries.push(summary);
    }
    Ok(summaries)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapTraceRow {
    pub iter: usize,
    pub unit_min_gap: Option<f64>,
    pub adaptive_min_gap: Option<f64>,
    /// `(Phi(Z0) - Phi_lb) / iter`.
    pub reference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapTrace {
    pub instance: String,
    pub formulation: Formulation,
    pub phi0: f64,
    pub phi_lb: f64,
    pub rows: Vec<GapTraceRow>,
    pub unit: RunReport,
    pub adaptive: RunReport,
}

/// Runs both step rules from the same start and pairs their min-gap curves.
///
/// Early stopping, refinement and sparsification are switched off so both
/// traces run the full `maxiter` iterations of the plain method.
pub fn gap_trace(v: &NonnegMatrix, rank: usize, form: Formulation, config: &DriverConfig) -> Result<GapTrace> {
    let base = DriverConfig {
        early_stop: false,
        refine: fw::RefineMode::Off,
        spi_schedule: Some(Vec::new()),
        ..config.clone()
    };
    let unit = fw::run(v, rank, form, &DriverConfig { step_rule: StepRule::Unit, ..base.clone() })?;
    let adaptive = fw::run(v, rank, form, &DriverConfig { step_rule: StepRule::Adaptive, ..base })?;
    let phi0 = unit.phi0;
    let phi_lb = unit.phi_lb;
    let n = unit.trace.len().max(adaptive.trace.len());
    let rows = (1..=n)
        .map(|i| GapTraceRow {
            iter: i,
            unit_min_gap: unit.trace.get(i - 1).map(|r| r.min_gap),
            adaptive_min_gap: adaptive.trace.get(i - 1).map(|r| r.min_gap),
            reference: (phi0 - phi_lb) / i as f64,
        })
        .collect();
    Ok(GapTrace { instance: v.name().to_string(), formulation: form, phi0, phi_lb, rows, unit, adaptive })
}

/// `iter,unit_min_gap,adaptive_min_gap,reference`; missing values are empty.
pub fn write_gap_trace<W: std::io::Write>(writer: W, trace: &GapTrace) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iter", "unit_min_gap", "adaptive_min_gap", "reference"])?;
    let cell = |x: Option<f64>| x.map(|x| format!("{x:.16e}")).unwrap_or_default();
    for r in &trace.rows {
        w.write_record([
            r.iter.to_string(),
            cell(r.unit_min_gap),
            cell(r.adaptive_min_gap),
            format!("{:.16e}", r.reference),
        ])?;
    }
    w.flush()?;
    Ok(())
}
