use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use umi_cli::commands;
use umi_cli::config::{GridSpec, RunConfig, SCHEMA};
use umi_cli::{CliError, Result};
use umi_core::pipeline::ScheduleStep;

#[derive(Parser)]
#[command(name = "umi", version = env!("UMI_VERSION"), about = "Ultrasound matrix imaging pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate plane-wave channel data; without --config the desk default is used.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the focused reflection matrix and the reference width table.
    Beamform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// x0,dx,nx,z0,dz,nz in mm.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
        /// Receive f-number.
        #[arg(long)]
        fnum: Option<f64>,
    },
    /// Run the correction schedule.
    Correct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only the first N steps; 0 passes the raw matrix through.
        #[arg(long)]
        steps: Option<usize>,
        /// JSON file holding a list of schedule steps.
        #[arg(long)]
        schedule: Option<PathBuf>,
    },
    /// Images, per-cell tables and the isoplanatic decomposition.
    Metrics {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// x0,z0,width,height in mm.
        #[arg(long, allow_hyphen_values = true)]
        area: Option<String>,
    },
    /// Markdown report with the step table.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the JSON schema of the run configuration.
    Schema,
}

fn parse_area(s: &str) -> Result<[f64; 4]> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Validation(format!("--area expects x0,z0,width,height, got {s:?}")))?;
    v.try_into().map_err(|_| CliError::Validation(format!("--area expects four numbers, got {s:?}")))
}

fn load_schedule(path: &Path) -> Result<Vec<ScheduleStep>> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path.display().to_string()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        CliError::Validation(format!("{}:{}:{}: {}: {inner}", path.display(), inner.line(), inner.column(), e.path()))
    })
}

fn threads() -> Result<()> {
    let Ok(v) = std::env::var("UMI_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Validation(format!("UMI_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Validation(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    threads()?;
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let c = commands::simulate(&cfg, &out)?;
            println!("{}", c.dir.display());
        }
        Command::Beamform { input, out, grid, fnum } => {
            let grid = grid.as_deref().map(GridSpec::parse).transpose()?;
            let c = commands::beamform(&input, &out, grid, fnum)?;
            println!("{}", c.dir.display());
        }
        Command::Correct { input, out, steps, schedule } => {
            let schedule = schedule.as_deref().map(load_schedule).transpose()?;
            let c = commands::correct(&input, &out, steps, schedule)?;
            for e in commands::read_steplog(&c)? {
                eprintln!("step {}: F {:?}, w {:?} mm", e.step, e.median_f, e.median_fwhm);
            }
            println!("{}", c.dir.display());
        }
        Command::Metrics { input, out, area } => {
            let area = area.as_deref().map(parse_area).transpose()?;
            let c = commands::metrics(&input, &out, area)?;
            println!("{}", c.dir.display());
        }
        Command::Report { input, out } => {
            let path = commands::report(&input, out.as_deref())?;
            println!("{}", path.display());
        }
        Command::Schema => print!("{SCHEMA}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
