use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use hyflux::config::RunConfig;
use hyflux::driver::{convergence_study, dtmax_bisection, run, Simulation};
use hyflux::output::{write_csv, write_partition_histogram};
use hyflux::HarnessError;
use hyflux_core::imex::load_tableau_pair;
use hyflux_core::partition::partition_report;

#[derive(Parser)]
#[command(name = "hyflux", version, about = "Hybridized flux reconstruction with partitioned IMEX time stepping")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for element loops.
    #[arg(long, global = true, env = "HYFLUX_THREADS")]
    threads: Option<usize>,
    /// Directory for fields and tables.
    #[arg(long, global = true, default_value = "out")]
    output_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate to the configured end time.
    Run,
    /// Temporal convergence study over a list of step sizes.
    Converge {
        #[arg(long, value_delimiter = ',', default_values_t = [0.02, 0.01, 0.005, 0.0025])]
        dt: Vec<f64>,
    },
    /// Largest stable step by bisection.
    Dtmax {
        #[arg(long)]
        lo: f64,
        #[arg(long)]
        hi: f64,
        /// Integration horizon of each trial.
        #[arg(long)]
        horizon: f64,
        /// Upper cap on the step (defaults to `hi`).
        #[arg(long)]
        cap: Option<f64>,
    },
    /// Stiffness indicator histogram and implicit flags.
    Partition,
    /// Parse and check a Butcher pair file.
    ValidateTableau { path: PathBuf },
}

fn load(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let path = cli.config.as_ref().ok_or_else(|| HarnessError::Config("--config is required for this command".into()))?;
    RunConfig::load(path)
}

fn mkdir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Run => {
            let cfg = load(cli)?;
            let (_, s) = run(&cfg, Some(&cli.output_dir))?;
            println!("steps {} t {} elements {} implicit {} ({:.4})", s.steps, s.time, s.n_elements, s.n_implicit, s.implicit_fraction);
            if let Some(e) = s.l2_error {
                println!("l2_error {e:.6e}");
            }
            let t = s.timing;
            println!("t_G {:.3} t_L {:.3} t_J {:.3} t_Rim {:.3} t_Rex {:.3} t_w {:.3}", t.t_g, t.t_l, t.t_j, t.t_rim, t.t_rex, t.t_w);
        }
        Command::Converge { dt } => {
            let cfg = load(cli)?;
            let rows = convergence_study(&cfg, dt)?;
            mkdir(&cli.output_dir)?;
            write_csv(&rows, &cli.output_dir.join("convergence.csv"))?;
            for r in rows {
                let order = r.order.map(|o| format!("{o:.2}")).unwrap_or_else(|| "-".into());
                println!("{:<10} {:.3e} {order}", r.dt, r.l2);
            }
        }
        Command::Dtmax { lo, hi, horizon, cap } => {
            let cfg = load(cli)?;
            let r = dtmax_bisection(&cfg, *lo, *hi, *horizon, cap.unwrap_or(*hi))?;
            mkdir(&cli.output_dir)?;
            write_csv(std::slice::from_ref(&r), &cli.output_dir.join("dtmax.csv"))?;
            println!("dt_max {} capped {} runs {}", r.dt_max, r.capped, r.evaluations);
        }
        Command::Partition => {
            let cfg = load(cli)?;
            let sim = Simulation::new(&cfg)?;
            let report = partition_report(&sim.indicators, &sim.disc.partition, cfg.partition.bins);
            mkdir(&cli.output_dir)?;
            write_partition_histogram(&report, &cli.output_dir.join("partition.csv"))?;
            println!(
                "elements {} implicit {} fraction {:.4} interface faces {}",
                report.n_elements, report.n_implicit, report.implicit_fraction, report.n_interface_faces
            );
        }
        Command::ValidateTableau { path } => {
            let pair = load_tableau_pair(path).map_err(|e| HarnessError::Config(e.to_string()))?;
            println!("{}: {} stages (padded {}), order {}", pair.name, pair.stages() - 1, pair.stages(), pair.order);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("hyflux: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
