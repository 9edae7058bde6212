mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use repacc_core::runner::ConditionId;

#[derive(Parser)]
#[command(name = "repacc", version, about = "Spec authoring, held-out batteries, condition runs, judge panels and statistics")]
struct Cli {
    /// Root directory holding one folder per run.
    #[arg(long, global = true, default_value = "repacc-work")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled two-subject toy corpus and its manifest.
    InitToy {
        dir: PathBuf,
    },
    /// Import, split, extract, embed, author and compose each subject's spec.
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        /// Restrict to these subject ids.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Generate, dedup, cap and freeze held-out batteries.
    Battery {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Execute the subject × condition matrix.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Skip cells already on disk with a matching battery checksum.
        #[arg(long)]
        resume: bool,
        /// Stop after executing this many cells.
        #[arg(long)]
        max_cells: Option<usize>,
    },
    /// Score every response cell with the judge panel.
    Judge {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Summary statistics for a judged run, or for a shipped fixture.
    Stats {
        #[command(flatten)]
        run: OptRunArgs,
        #[arg(long, value_enum)]
        fixture: Option<Fixture>,
        #[arg(long, value_enum, default_value = "md")]
        report: ReportFormat,
    },
    /// Print a wrong-spec derangement.
    Derange {
        #[arg(long, value_delimiter = ',', required = true)]
        subjects: Vec<String>,
        #[arg(long, value_enum, default_value = "v2")]
        scheme: Scheme,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Refusal and response-length audits plus the isolation scan.
    Audit {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value = "broad")]
        mode: Mode,
    },
}

#[derive(Args, Clone)]
struct Locked {
    /// Subject manifest (JSON).
    #[arg(long)]
    subjects: Option<PathBuf>,
    /// Condition codes, comma separated (e.g. C5,C2a,C4a).
    #[arg(long, value_delimiter = ',')]
    conditions: Option<Vec<ConditionId>>,
    /// Primary judge ids, comma separated.
    #[arg(long, value_delimiter = ',')]
    panel: Option<Vec<String>>,
    #[arg(long)]
    seed_derangement: Option<u64>,
    #[arg(long)]
    seed_bootstrap: Option<u64>,
    #[arg(long)]
    seed_permutation: Option<u64>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    run_id: String,
    #[command(flatten)]
    locked: Locked,
}

#[derive(Args, Clone)]
struct OptRunArgs {
    #[arg(long)]
    run_id: Option<String>,
    #[command(flatten)]
    locked: Locked,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    #[value(name = "paper-table-d1")]
    GradientTable,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Md,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    V1,
    V2,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Strict,
    Broad,
}

impl Locked {
    fn overrides(&self) -> config::Overrides {
        config::Overrides {
            subjects_manifest: self.subjects.clone(),
            conditions: self.conditions.clone(),
            panel: self.panel.clone(),
            seed_derangement: self.seed_derangement,
            seed_bootstrap: self.seed_bootstrap,
            seed_permutation: self.seed_permutation,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let w = &cli.workdir;
    let result = match cli.command {
        Command::InitToy { dir } => commands::init_toy(&dir),
        Command::Pipeline { run, only } => commands::pipeline(w, &run.run_id, &run.locked.overrides(), &only),
        Command::Battery { run, only } => commands::battery(w, &run.run_id, &run.locked.overrides(), &only),
        Command::Run { run, resume, max_cells } => commands::run(w, &run.run_id, &run.locked.overrides(), resume, max_cells),
        Command::Judge { run } => commands::judge(w, &run.run_id, &run.locked.overrides()),
        Command::Stats { run, fixture, report } => {
            let json = matches!(report, ReportFormat::Json);
            match fixture {
                Some(Fixture::GradientTable) => commands::stats_fixture(w, run.run_id.as_deref(), &run.locked.overrides(), json),
                None => match run.run_id {
                    Some(id) => commands::stats_run(w, &id, &run.locked.overrides(), json),
                    None => {
                        eprintln!("error: stats needs --run-id or --fixture");
                        return ExitCode::from(2);
                    }
                },
            }
        }
        Command::Derange { subjects, scheme, seed } => commands::derange(&subjects, matches!(scheme, Scheme::V1), seed),
        Command::Audit { run, mode } => commands::audit(w, &run.run_id, &run.locked.overrides(), matches!(mode, Mode::Strict)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
