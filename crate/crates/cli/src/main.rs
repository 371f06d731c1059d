use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use conic_nmf::campaign::{self, Campaign, InstanceSpec};
use conic_nmf::formulations::Formulation;
use conic_nmf::fw::{self, DriverConfig, Initializer, RefineMode, StepRule};
use conic_nmf::instances::NonnegMatrix;
use conic_nmf::ipm::SolverConfig;
use conic_nmf::{io, rank1, NmfError};

#[derive(Parser, Debug)]
#[command(
    name = "conic-nmf",
    version,
    about = "Exact nonnegative matrix factorization by successive conic linearization"
)]
struct Cli {
    /// Log level: 0 warnings, 1 progress, 2 solver detail, 3 every Newton step.
    #[arg(long, global = true, default_value_t = 0)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one factorization and write report.json, trace.csv, W.csv and H.csv.
    Factorize(FactorizeArgs),
    /// Run many seeded initializations and write summary.json plus every run.
    Campaign(CampaignArgs),
    /// Solve the rank-one over-approximation and print it as JSON.
    Rank1(Rank1Args),
    /// Run both step rules from one start and write paired min-gap curves.
    Gaptrace(FactorizeArgs),
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct Source {
    /// Built-in matrix (random, Vinf1..Vinf4, hex_a2, hex_a3, hex_a4, hex_ainf, appB_example).
    #[arg(long)]
    builtin: Option<String>,
    /// CSV file: a `F,N` header line followed by F rows of N values.
    #[arg(long)]
    matrix: Option<PathBuf>,
    /// Random product of nonnegative F x K and K x N factors, given as F,N,K.
    #[arg(long, value_name = "F,N,K")]
    random: Option<String>,
}

impl Source {
    fn spec(&self) -> Result<InstanceSpec, NmfError> {
        if let Some(name) = &self.builtin {
            return Ok(InstanceSpec::Builtin(name.clone()));
        }
        if let Some(path) = &self.matrix {
            return Ok(InstanceSpec::File(path.clone()));
        }
        self.random.as_deref().unwrap_or_default().parse()
    }
}

#[derive(Args, Debug, Clone)]
struct DriverArgs {
    /// Factorization rank.
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 750)]
    maxiter: usize,
    /// unit or adaptive.
    #[arg(long, default_value = "unit")]
    step: StepRule,
    /// uniform, rank1 or rank1:D for a perturbation of size D.
    #[arg(long, default_value = "uniform")]
    init: Initializer,
    /// Sparsification iterations as i,j; `none` disables. Default 80% and 95% of maxiter.
    #[arg(long, value_name = "I,J")]
    spi_at: Option<String>,
    #[arg(long, default_value_t = 1e-3)]
    spi_th: f64,
    /// auto, on or off.
    #[arg(long, default_value = "auto")]
    refine: RefineMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add this to every entry of V for the exp form, which rejects zeros otherwise.
    #[arg(long)]
    eps_shift: Option<f64>,
    /// Keep iterating after the target error is reached.
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long, default_value = "nmf_out")]
    out: PathBuf,
}

impl DriverArgs {
    fn config(&self, verbose: u8) -> Result<DriverConfig, NmfError> {
        let spi_schedule = match self.spi_at.as_deref() {
            None => None,
            Some("none") => Some(Vec::new()),
            Some(list) => Some(
                list.split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| NmfError::InvalidInput(format!("bad sparsification iteration `{s}`")))
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        let mut cfg = DriverConfig {
            maxiter: self.maxiter,
            step_rule: self.step,
            spi_schedule,
            spi_threshold: self.spi_th,
            refine: self.refine,
            initializer: self.init,
            seed: self.seed,
            early_stop: !self.no_early_stop,
            solver: SolverConfig { verbosity: verbose, ..SolverConfig::default() },
            ..DriverConfig::default()
        };
        cfg.formulation.eps_shift = self.eps_shift;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct FactorizeArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    driver: DriverArgs,
    /// exp or soc.
    #[arg(long, default_value = "soc")]
    form: Formulation,
}

#[derive(Args, Debug)]
struct CampaignArgs {
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    driver: DriverArgs,
    /// One or more of exp, soc.
    #[arg(long, default_value = "soc", value_delimiter = ',')]
    form: Vec<Formulation>,
    #[arg(long, default_value_t = 20)]
    inits: usize,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "CONIC_NMF_JOBS", default_value_t = 0)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct Rank1Args {
    #[command(flatten)]
    source: Source,
    /// Seed for --random.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Matrix for single runs; `--random` draws it from a stream separate from
/// the initialization.
fn load(source: &Source, seed: u64) -> Result<NonnegMatrix, NmfError> {
    let (_, matrix_seed) = campaign::run_seeds(seed, 0);
    source.spec()?.load(matrix_seed)
}

fn factorize(args: &FactorizeArgs, verbose: u8) -> Result<bool, NmfError> {
    let cfg = args.driver.config(verbose)?;
    let v = load(&args.source, cfg.seed)?;
    let report = fw::run(&v, args.driver.k, args.form, &cfg)?;
    let out = &args.driver.out;
    fs::create_dir_all(out)?;
    io::save_report(&report, out.join("report.json"))?;
    io::save_trace(&report.trace, out.join("trace.csv"))?;
    io::save_array(report.factors.w.view(), out.join("W.csv"))?;
    io::save_array(report.factors.h.view(), out.join("H.csv"))?;
    println!(
        "{} K={} {} seed {}: {:?}, error {:.3e} after {} iterations{}",
        report.instance,
        report.rank,
        report.formulation.name(),
        report.seed,
        report.status,
        report.final_error,
        report.trace.len(),
        if report.success { " (exact)" } else { "" }
    );
    if let Some(msg) = &report.message {
        println!("  {msg}");
    }
    Ok(report.success)
}

fn run_campaign(args: &CampaignArgs, verbose: u8) -> Result<bool, NmfError> {
    let cfg = args.driver.config(verbose)?;
    let c = Campaign {
        instance: args.source.spec()?,
        rank: args.driver.k,
        formulations: args.form.clone(),
        n_inits: args.inits,
        master_seed: cfg.seed,
        config: cfg,
        jobs: args.jobs,
        out_dir: Some(args.driver.out.clone()),
    };
    let summaries = campaign::run_campaign(&c)?;
    for s in &summaries {
        println!("{}  ({:.1}s)", s.table_row(), s.wall_time_s);
    }
    Ok(summaries.iter().all(|s| s.successes > 0))
}

fn rank_one(args: &Rank1Args) -> Result<bool, NmfError> {
    let v = load(&args.source, args.seed)?;
    let sol = rank1::solve_rank1(&v, &SolverConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&sol)?);
    Ok(true)
}

fn gaptrace(args: &FactorizeArgs, verbose: u8) -> Result<bool, NmfError> {
    let cfg = args.driver.config(verbose)?;
    let v = load(&args.source, cfg.seed)?;
    let t = campaign::gap_trace(&v, args.driver.k, args.form, &cfg)?;
    let out: &Path = &args.driver.out;
    fs::create_dir_all(out)?;
    campaign::write_gap_trace(BufWriter::new(File::create(out.join("gaptrace.csv"))?), &t)?;
    io::save_trace(&t.unit.trace, out.join("trace_unit.csv"))?;
    io::save_trace(&t.adaptive.trace, out.join("trace_adaptive.csv"))?;
    let last = t.rows.last();
    println!(
        "{} {}: C = {:.6e}; final min gap unit {:.3e}, adaptive {:.3e}",
        t.instance,
        t.formulation.name(),
        t.phi0 - t.phi_lb,
        last.and_then(|r| r.unit_min_gap).unwrap_or(f64::NAN),
        last.and_then(|r| r.adaptive_min_gap).unwrap_or(f64::NAN),
    );
    info!("wrote {}", out.join("gaptrace.csv").display());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match &cli.command {
        Command::Factorize(args) => factorize(args, cli.verbose),
        Command::Campaign(args) => run_campaign(args, cli.verbose),
        Command::Rank1(args) => rank_one(args),
        Command::Gaptrace(args) => gaptrace(args, cli.verbose),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
