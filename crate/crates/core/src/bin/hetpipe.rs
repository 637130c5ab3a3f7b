use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hetpipe::cli::{
    cmd_compare, cmd_plan, cmd_simulate, load_plan, profile_dump, CliError, ModelSource, RunConfig, WORKERS_ENV,
};
use hetpipe::model_graph::GptConfig;
use hetpipe::profiler::ProfilerConfig;
use hetpipe::scheduler::{ScheduleKind, DEFAULT_EPSILON};

#[derive(Parser)]
#[command(name = "hetpipe", version, about = "Pipeline planner and simulator for heterogeneous GPU clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search the best pipeline plan and write plan.json.
    Plan(PlanArgs),
    /// Simulate a plan file under one scheduler.
    Simulate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, short = 'B')]
        microbatches: Option<usize>,
        #[arg(long, default_value = "h1f1b")]
        scheduler: ScheduleKind,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a plan file under several schedulers side by side.
    Compare {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "classic,eager,h1f1b")]
        schedulers: Vec<ScheduleKind>,
        #[arg(long, short = 'B')]
        microbatches: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// Print the table as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print profile-store counts and optionally write every canonical profile.
    ProfileDump(PlanArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Model spec (TOML with [gpt] or [[op]] entries).
    #[arg(long, conflicts_with = "gpt_blocks", required_unless_present = "gpt_blocks")]
    model: Option<PathBuf>,
    #[arg(long)]
    gpt_blocks: Option<usize>,
    #[arg(long, default_value_t = 4096)]
    hidden: usize,
    #[arg(long, default_value_t = 2048)]
    seq_len: usize,
    #[arg(long, default_value_t = 1)]
    mb_size: usize,
    #[arg(long, default_value_t = 51200)]
    vocab: usize,
    #[arg(long)]
    cluster: PathBuf,
    #[arg(long, short = 'B', default_value_t = 128)]
    microbatches: usize,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    efficiency: f64,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 3.0)]
    rho: f64,
    #[arg(long, default_value_t = 8.0)]
    param_memory_factor: f64,
    /// Minimum heavy operators in a repeated module.
    #[arg(long, default_value_t = 1)]
    z: usize,
    #[arg(long, default_value_t = 1)]
    layers_per_module: usize,
    /// Measured profile overrides (TOML).
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    no_dedup: bool,
    #[arg(long, env = WORKERS_ENV)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl PlanArgs {
    fn config(&self) -> RunConfig {
        let model = match (&self.model, self.gpt_blocks) {
            (Some(path), _) => ModelSource::File(path.clone()),
            (None, blocks) => ModelSource::Gpt(GptConfig {
                num_blocks: blocks.unwrap_or(1),
                hidden_dim: self.hidden,
                seq_len: self.seq_len,
                mb_size: self.mb_size,
                vocab: self.vocab,
            }),
        };
        let mut cfg = RunConfig::new(model, &self.cluster, self.microbatches);
        cfg.epsilon = self.epsilon;
        cfg.profiler = ProfilerConfig {
            beta: self.beta,
            efficiency: self.efficiency,
            alpha: self.alpha,
            rho: self.rho,
            param_memory_factor: self.param_memory_factor,
            dedup: !self.no_dedup,
        };
        cfg.z = self.z;
        cfg.layers_per_module = self.layers_per_module;
        cfg.profile_overrides = self.profiles.clone();
        cfg.workers = self.workers;
        cfg.out_dir = self.out.clone();
        cfg
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Plan(args) => {
            let out = cmd_plan(&args.config())?;
            print!("{}", out.report);
            for path in out.written {
                println!("wrote {}", path.display());
            }
        }
        Command::Simulate {
            plan,
            microbatches,
            scheduler,
            epsilon,
            out,
        } => {
            let (_, text, written) = cmd_simulate(&plan, microbatches, scheduler, epsilon, out.as_deref())?;
            print!("{text}");
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Command::Compare {
            plan,
            schedulers,
            microbatches,
            epsilon,
            json,
        } => {
            let plan = load_plan(&plan)?;
            let b = microbatches.unwrap_or(plan.microbatches);
            let (rows, text) = cmd_compare(&plan, &schedulers, b, epsilon)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
            } else {
                print!("{text}");
            }
        }
        Command::ProfileDump(args) => {
            let (_, text) = profile_dump(&args.config())?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
