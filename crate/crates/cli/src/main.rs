//! `vimo`: command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 invalid input, 3 backend or network
//! failure (including replay misses), 4 internal error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use vimo_core::Error;

#[derive(Parser, Debug)]
#[command(name = "vimo", version, about = "Predict, select and evaluate with a GUI world model")]
pub struct Cli {
    /// Config file (TOML).
    #[arg(long, global = true, env = "VIMO_CONFIG")]
    pub config: Option<PathBuf>,
    /// Answer every model call from the cassette directory.
    #[arg(long, global = true)]
    pub replay: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Mask the dynamic text of a screenshot with symbols.
    Symbolize(SymbolizeArgs),
    /// Find the symbols of an STR image.
    Detect(DetectArgs),
    /// Draw text into the symbols of an STR image.
    Render(RenderArgs),
    /// Predict the screen that follows an action.
    Predict(PredictArgs),
    /// Choose one action for a goal on the current screen.
    AgentStep(AgentStepArgs),
    /// Like agent-step, judging each option after several predicted steps.
    Rollout(RolloutArgs),
    /// Score runs, predictions and trajectories.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Build dataset splits and training pairs.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Args, Debug)]
pub struct ScreenArgs {
    /// Screenshot (PNG).
    #[arg(long)]
    pub image: PathBuf,
    /// OCR boxes, one JSON object per line: {"x","y","w","h","text","is_static"?}.
    #[arg(long)]
    pub ocr: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SymbolizeArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub ocr: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Mask every OCR box, ignoring static flags and the static-text filter.
    #[arg(long)]
    pub no_static_filter: bool,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// STR image (PNG).
    #[arg(long = "str")]
    pub str_image: PathBuf,
    /// Where to write the symbol table (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long = "str")]
    pub str_image: PathBuf,
    /// Text per symbol: {"entries":[{"id","text"}]}.
    #[arg(long)]
    pub texts: PathBuf,
    /// Symbol table; detected from the image when absent.
    #[arg(long)]
    pub symbols: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the STR with id labels drawn into each symbol.
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[command(flatten)]
    pub screen: ScreenArgs,
    #[arg(long)]
    pub action: String,
    /// Predictions to chain; follow-up actions come from the agent model.
    #[arg(long, default_value_t = 1)]
    pub iterations: usize,
    /// Goal used to propose follow-up actions when chaining.
    #[arg(long, default_value = "")]
    pub goal: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct AgentStepArgs {
    #[command(flatten)]
    pub screen: ScreenArgs,
    #[arg(long)]
    pub goal: String,
    /// Earlier steps: [{"action","summary"}].
    #[arg(long)]
    pub history: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub step: AgentStepArgs,
    /// Predictions per option; defaults to the config value.
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Summarize per-run metrics into metrics.json and metrics.md.
    Report {
        /// JSON list of runs: [{"s_gc","s_ia","s_ar","n"?}].
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Predict every instructed step of a manifest and score the predictions.
    WorldModel {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Agent success over the first L steps of each episode.
    Trajectory {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 3)]
        max_l: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relative gain of one step accuracy over another, in percent.
    Gain {
        #[arg(long)]
        new: f64,
        #[arg(long)]
        base: f64,
    },
}

#[derive(Subcommand, Debug)]
pub enum DatasetCommand {
    /// Split a manifest's episodes and write frames, STRs and training pairs.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train, validation and test fractions.
        #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
        ratios: Vec<f64>,
        /// Turn raw commands into instructions with the language model.
        #[arg(long)]
        convert_commands: bool,
        /// Ask the language model which text is static before masking.
        #[arg(long)]
        static_filter: bool,
    },
    /// Check the recorded reference split counts add up.
    Reference,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Validation(String),
    Backend(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Backend(_) => 3,
            Failure::Internal(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Validation(m) | Failure::Backend(m) | Failure::Internal(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        if e.is_validation() {
            Failure::Validation(msg)
        } else if e.is_backend() || matches!(e.root(), Error::Parse { .. }) {
            Failure::Backend(msg)
        } else {
            Failure::Internal(msg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let Some(command) = cli.command else {
        let _ = Cli::command().print_help();
        eprintln!();
        return ExitCode::from(1);
    };
    let ctx = commands::Context {
        config_path: cli.config,
        replay: cli.replay,
    };
    match commands::run(&ctx, command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
