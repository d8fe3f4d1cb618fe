use std::path::PathBuf;
use std::process::ExitCode;

use aft_cli::commands::{self, Context};
use aft_cli::experiments::Capture;
use aft_cli::scenario::ControlTask;
use aft_cli::{Error, Result, Scenario};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status when strict mode meets a tracking loss.
const EXIT_TRACKING_LOST: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "aft", version, about = "Appearance-based shape tracking experiments for continuum soft robots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Scenario file (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Exit with status 3 when any frame loses tracking.
    #[arg(long, global = true)]
    strict: bool,
    /// Comma-separated ablations: geometry-only, no-descriptor-update, direct-ik, none.
    #[arg(long, global = true)]
    ablate: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build and serialize the reference model.
    BuildReference,
    /// Track simulated sequences.
    Track(TrackArgs),
    /// Track recorded frames.
    Replay {
        /// Directory of .aftf frames, or of per-sequence subdirectories.
        #[arg(long)]
        frames: PathBuf,
        #[command(flatten)]
        track: TrackArgs,
    },
    /// Occlusion bar sweep over positions and widths.
    SweepOcclusion {
        /// Comma-separated normalized bar positions.
        #[arg(long, value_delimiter = ',')]
        positions: Option<Vec<f64>>,
        /// Comma-separated bar widths as image-height fractions.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<f64>>,
    },
    /// Per-viewpoint error table.
    SweepViewpoint,
    /// Ablation table.
    Ablate,
    /// Closed-loop control against the simulated plant.
    Control {
        #[arg(long, value_enum)]
        task: Option<Task>,
    },
}

#[derive(Args, Debug)]
struct TrackArgs {
    /// Also write every frame's matches to matches.csv.
    #[arg(long)]
    matches: bool,
    /// Debug: dump every frame's score matrix under scores/.
    #[arg(long)]
    dump_scores: bool,
}

impl TrackArgs {
    fn capture(&self) -> Capture {
        Capture { matchings: self.matches, scores: self.dump_scores }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Shape,
    Tip,
}

fn resolve(cli: &Cli) -> Result<Scenario> {
    let c = &cli.common;
    let mut scenario = match &c.scenario {
        Some(path) => Scenario::load(path)?,
        None => Scenario::default(),
    };
    if let Some(seed) = c.seed {
        scenario.seed = seed;
    }
    if let Some(list) = &c.ablate {
        scenario.apply_ablations(list)?;
    }
    if let Command::SweepOcclusion { positions, widths } = &cli.command {
        if let Some(p) = positions {
            scenario.sweeps.occlusion_positions = p.clone();
        }
        if let Some(w) = widths {
            scenario.sweeps.occlusion_widths = w.clone();
        }
    }
    scenario.validate()?;
    Ok(scenario)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::Scenario(format!("cannot start {jobs} worker threads: {e}")))?;
    }
    let ctx = Context { scenario: resolve(&cli)?, out: cli.common.out.clone(), strict: cli.common.strict };
    log::info!("writing to {}", ctx.out.display());
    match &cli.command {
        Command::BuildReference => commands::build_reference(&ctx).map(drop),
        Command::Track(args) => commands::track(&ctx, args.capture()).map(drop),
        Command::Replay { frames, track } => commands::replay(&ctx, frames, track.capture()).map(drop),
        Command::SweepOcclusion { .. } => commands::cmd_sweep_occlusion(&ctx),
        Command::SweepViewpoint => commands::cmd_sweep_viewpoint(&ctx),
        Command::Ablate => commands::cmd_ablate(&ctx),
        Command::Control { task } => {
            let task = task.map(|t| match t {
                Task::Shape => ControlTask::Shape,
                Task::Tip => ControlTask::Tip,
            });
            commands::cmd_control(&ctx, task).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::TrackingLost { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_TRACKING_LOST)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
