//! Command-line entry point: `simulate`, `compare` and `validate`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::coordinator::{run, ControllerKind, RunOutput};
use crate::error::{Error, Result};
use crate::output::{write_results, write_steps, write_summary, write_timing, write_trace};
use crate::scenario::{load_scenario, FluxModeConfig, ScenarioConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "lanedrop", version, about = "Speed coordination of connected vehicles at a lane drop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ControllerArg {
    None,
    Centralized,
    Dmpc,
    Rollout,
    RolloutTruncated,
}

impl From<ControllerArg> for ControllerKind {
    fn from(c: ControllerArg) -> Self {
        match c {
            ControllerArg::None => ControllerKind::None,
            ControllerArg::Centralized => ControllerKind::Centralized,
            ControllerArg::Dmpc => ControllerKind::DmpcParallel,
            ControllerArg::Rollout => ControllerKind::RolloutFull,
            ControllerArg::RolloutTruncated => ControllerKind::RolloutTruncated,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one controller and write summary, trace and steps CSVs.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        controller: ControllerArg,
        #[arg(long)]
        out: PathBuf,
        /// Draw CAVs from the inflow with this seed instead of thinning.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the host-cell fluxes without the interface consistency fix.
        #[arg(long)]
        paper_literal_flux: bool,
    },
    /// Run every controller that fits its budget and write a joint summary.
    Compare {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

enum Failure {
    Config(Error),
    Runtime(Error),
}

fn load(path: &Path) -> std::result::Result<ScenarioConfig, Failure> {
    load_scenario(path).map_err(Failure::Config)
}

fn echo(config: &ScenarioConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("scenario.json"), config.to_json() + "\n")?;
    Ok(())
}

fn timed(config: &ScenarioConfig, kind: ControllerKind) -> std::result::Result<(RunOutput, f64), Failure> {
    let mut scenario = config.build().map_err(Failure::Config)?;
    scenario.planner.controller = kind;
    let start = Instant::now();
    let out = run(&scenario).map_err(Failure::Runtime)?;
    Ok((out, start.elapsed().as_secs_f64()))
}

fn execute(command: Command, stdout: &mut dyn Write) -> std::result::Result<(), Failure> {
    let rt = Failure::Runtime;
    match command {
        Command::Validate { scenario } => {
            let config = load(&scenario)?;
            let built = config.build().map_err(Failure::Config)?;
            let _ = writeln!(
                stdout,
                "ok: {} cells, {} steps, {} scheduled CAVs",
                built.grid.num_cells(),
                built.steps,
                built.arrivals.len() + built.initial_cavs.len()
            );
        }
        Command::Simulate {
            scenario,
            controller,
            out,
            seed,
            paper_literal_flux,
        } => {
            let mut config = load(&scenario)?;
            if let Some(seed) = seed {
                config.cavs.seed = Some(seed);
            }
            if paper_literal_flux {
                config.flux_mode = FluxModeConfig::PaperLiteral;
            }
            config.planner.controller = ControllerKind::from(controller).into();
            let (result, secs) = timed(&config, controller.into())?;
            echo(&config, &out).map_err(rt)?;
            write_results(&result, &out).map_err(rt)?;
            write_timing(&[(result.controller.name(), secs)], &out).map_err(rt)?;
            let _ = writeln!(
                stdout,
                "{}: J_t = {} veh*s, {} evaluations",
                result.controller.name(),
                result.metrics.total_vehicle_time,
                result.metrics.eval_count
            );
        }
        Command::Compare { scenario, out } => {
            let config = load(&scenario)?;
            let mut runs = Vec::new();
            let mut timing = Vec::new();
            for kind in ControllerKind::ALL {
                match timed(&config, kind) {
                    Ok((result, secs)) => {
                        timing.push((kind.name(), secs));
                        runs.push(result);
                    }
                    Err(Failure::Runtime(Error::Budget { needed, budget })) => {
                        let _ = writeln!(
                            stdout,
                            "{}: skipped, needs {needed:e} candidates (budget {budget:e})",
                            kind.name()
                        );
                    }
                    Err(e) => return Err(e),
                }
            }
            echo(&config, &out).map_err(rt)?;
            for r in &runs {
                let dir = out.join(r.controller.name());
                write_trace(r, &dir).map_err(rt)?;
                write_steps(r, &dir).map_err(rt)?;
            }
            let refs: Vec<&RunOutput> = runs.iter().collect();
            write_summary(&refs, &out).map_err(rt)?;
            write_timing(&timing, &out).map_err(rt)?;
            for r in &runs {
                let _ = writeln!(stdout, "{}: J_t = {} veh*s", r.controller.name(), r.metrics.total_vehicle_time);
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout();
    match execute(cli.command, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("runtime error: {e}");
            EXIT_RUNTIME
        }
    }
}
