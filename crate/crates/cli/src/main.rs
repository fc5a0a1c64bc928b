use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use meshpipe::config::{load_config, ConfigError};
use meshpipe::deploy::{
    blocksize_sweep, build_case, divisors, ifft_sweep, Calibration, CaseId, CaseParams, CostMode, DeployError,
};
use meshpipe::metrics::{case_report, write_csv, CaseReport, MetricsError, Records};
use meshpipe::mesh::MeshConfig;

#[derive(Parser)]
#[command(name = "meshpipe", version, about = "Simulate the IFFT -> deinterleave -> demap chain on a mesh")]
struct Cli {
    /// key = value file overriding mesh and cost parameters
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Kernel cost model
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Seed of the input symbol generator
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Calibrated,
    Counted,
}

#[derive(Args)]
struct Pipeline {
    /// Samples per deinterleave -> demap handoff in case 3
    #[arg(long, default_value_t = 1)]
    block_size: usize,
    /// Cores running the parallel IFFT in case 3
    #[arg(long, default_value_t = 8)]
    ifft_cores: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Run one deployment case and print its report
    Run {
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
        case: u32,
        #[command(flatten)]
        pipeline: Pipeline,
        #[arg(long, default_value = "case_report.csv")]
        out: PathBuf,
    },
    /// IFFT latency against core count
    SweepIfft {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        cores: Vec<usize>,
        #[arg(long, default_value = "ifft_sweep.csv")]
        out: PathBuf,
    },
    /// Deinterleave + demap latency against block size
    SweepBlocksize {
        /// Sweep every divisor of this number
        #[arg(long, conflicts_with = "sizes")]
        divisors_of: Option<usize>,
        /// Explicit block sizes
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        ifft_cores: usize,
        #[arg(long, default_value = "blocksize_sweep.csv")]
        out: PathBuf,
    },
    /// Run all three cases and write the comparison table
    Report {
        #[command(flatten)]
        pipeline: Pipeline,
        #[arg(long, default_value = "case_comparison.csv")]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<DeployError> for Failure {
    fn from(e: DeployError) -> Self {
        match e {
            DeployError::Sim(_) => Failure::Runtime(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

impl From<MetricsError> for Failure {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Deploy(d) => d.into(),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn settings(cli: &Cli) -> Result<(MeshConfig, Calibration), Failure> {
    let (mesh, mut cal) = match &cli.config {
        Some(path) => load_config(path)?,
        None => (MeshConfig::default(), Calibration::default()),
    };
    match cli.mode {
        Some(Mode::Calibrated) => cal.mode = CostMode::Calibrated,
        Some(Mode::Counted) => cal.mode = CostMode::Counted,
        None => {}
    }
    Ok((mesh, cal))
}

fn params(case: CaseId, pipeline: &Pipeline, seed: u64) -> CaseParams {
    let mut p = CaseParams::new(case);
    p.block_size = pipeline.block_size;
    p.ifft_cores = pipeline.ifft_cores;
    p.chain.seed = seed;
    p
}

fn simulate(params: &CaseParams, cal: &Calibration, mesh: &MeshConfig) -> Result<CaseReport, Failure> {
    let plan = build_case(params, cal, mesh)?;
    let result = plan.execute(mesh)?;
    let llrs = plan.output_llrs(&result)?;
    if meshpipe::dsp::hard_decisions(&llrs) != plan.input.bits {
        return Err(Failure::Runtime(format!("case {} did not recover the input bits", params.case)));
    }
    Ok(case_report(&plan, &result, mesh)?)
}

fn print_report(r: &CaseReport) {
    let row = |name: &str, v: Option<u64>| match v {
        Some(v) => println!("  {name:<14}{v:>8}"),
        None => println!("  {name:<14}{:>8}", "-"),
    };
    println!("case {}", r.case);
    row("ifft", Some(r.ifft_cycles));
    if r.demap_cycles.is_some() {
        row("deinterleave", Some(r.deint_cycles));
        row("demap", r.demap_cycles);
    } else {
        row("deint+demap", Some(r.deint_cycles));
    }
    println!("  {:<14}{:>8} cycles ({:.3} us)", "total", r.total_cycles, r.latency_us);
    println!("  {:<14}{:>8} symbols/s", "throughput", r.throughput_sps);
    let verdict = |ok: bool| if ok { "met" } else { "missed" };
    println!("  83 us symbol budget: {}", verdict(r.meets_throughput_budget));
    println!("  100 us latency budget: {}", verdict(r.meets_latency_budget));
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let (mesh, cal) = settings(cli)?;
    match &cli.command {
        Command::Run { case, pipeline, out } => {
            let case = CaseId::from_number(*case).expect("range checked by the parser");
            let report = simulate(&params(case, pipeline, cli.seed), &cal, &mesh)?;
            print_report(&report);
            write_csv(Records::CaseReport(&[report]), out)?;
            wrote(out);
        }
        Command::SweepIfft { cores, out } => {
            if cores.is_empty() {
                return Err(Failure::Usage("no core counts given".into()));
            }
            let rows = ifft_sweep(cores, &cal, &mesh)?;
            println!("n_cores  cycles");
            for (n, t) in &rows {
                println!("{n:>7}  {t:>6}");
            }
            write_csv(Records::IfftSweep(&rows), out)?;
            wrote(out);
        }
        Command::SweepBlocksize {
            divisors_of,
            sizes,
            ifft_cores,
            out,
        } => {
            let sizes = match divisors_of {
                Some(n) => divisors(*n),
                None => sizes.clone(),
            };
            if sizes.is_empty() {
                return Err(Failure::Usage("give --divisors-of or --sizes".into()));
            }
            let pipeline = Pipeline {
                block_size: 1,
                ifft_cores: *ifft_cores,
            };
            let base = params(CaseId::III, &pipeline, cli.seed);
            let rows = blocksize_sweep(&sizes, &base, &cal, &mesh)?;
            println!("block_size  cycles");
            for (b, t) in &rows {
                println!("{b:>10}  {t:>6}");
            }
            write_csv(Records::BlocksizeSweep(&rows), out)?;
            wrote(out);
        }
        Command::Report { pipeline, out } => {
            let reports = CaseId::ALL
                .iter()
                .map(|&c| simulate(&params(c, pipeline, cli.seed), &cal, &mesh))
                .collect::<Result<Vec<_>, _>>()?;
            for r in &reports {
                print_report(r);
            }
            write_csv(Records::CaseReport(&reports), out)?;
            wrote(out);
        }
    }
    Ok(())
}
