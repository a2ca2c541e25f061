use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use perimeter_cli::commands::{self, Context, SweepMode, TrainOptions};
use perimeter_cli::config::{parse_controllers, parse_seed_list};
use perimeter_cli::{CliError, RunConfig};
use perimeter_core::ppo::StateVariant;

#[derive(Parser)]
#[command(name = "perimeter", version, about = "Perimeter flow-metering experiments")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// TOML file applied over the defaults; repeat to layer several.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Seeds such as `1-10` or `1,4,7`.
    #[arg(long, global = true)]
    seed_list: Option<String>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated: npc, pi, fixed, ppo.
    #[arg(long, global = true)]
    controller: Option<String>,
    #[arg(long, global = true, value_enum)]
    state_design: Option<Design>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Multiplies both demand totals.
    #[arg(long, global = true)]
    scale: Option<f64>,
    #[arg(long, global = true)]
    peakedness: Option<f64>,
    /// Policy file for ppo runs.
    #[arg(long, global = true)]
    policy: Option<PathBuf>,
    /// Worker threads, 0 for all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Design {
    D1,
    D2,
    D6,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Scale,
    Peakedness,
}

#[derive(Subcommand)]
enum Command {
    /// Run the baseline controllers and write TTS, MFD and traces.
    Baseline,
    /// Train a PPO policy, resuming from the checkpoint in the output dir.
    Train {
        /// Discard an existing checkpoint.
        #[arg(long)]
        fresh: bool,
        /// Stop after this many batches.
        #[arg(long)]
        max_batches: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate controllers (including ppo) across the seed list.
    Evaluate,
    /// Evaluate controllers across demand scales or peakedness values.
    Generalize {
        #[arg(value_enum)]
        mode: Mode,
    },
    /// Summarize the artifacts in the output dir into report.json.
    Report,
    /// Print the resolved configuration.
    Config,
}

fn resolve(o: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&o.config)?;
    if let Some(s) = &o.seed_list {
        cfg.seeds = parse_seed_list(s)?;
    }
    if let Some(out) = &o.out {
        cfg.out = out.clone();
    }
    if let Some(c) = &o.controller {
        cfg.controllers = parse_controllers(c)?;
    }
    if let Some(d) = o.state_design {
        cfg.state_design = match d {
            Design::D1 => StateVariant::D1,
            Design::D2 => StateVariant::D2,
            Design::D6 => StateVariant::D6,
        };
    }
    if let Some(g) = o.gamma {
        cfg.ppo.gamma = g;
    }
    if let Some(f) = o.scale {
        cfg.scale_demand(f)?;
    }
    if let Some(r) = o.peakedness {
        cfg.scenario.demand.peakedness = r;
    }
    if let Some(p) = &o.policy {
        cfg.policy = Some(p.clone());
    }
    if let Some(j) = o.jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.overrides)?;
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::Report => {
            let r = commands::report(&cfg.out)?;
            for c in &r.controllers {
                println!(
                    "{:<6} seeds {:>3}  mean TTS {:>10.1} h  (inside {:.1}, outside {:.1})",
                    c.controller, c.seeds, c.mean_total_h, c.mean_inside_h, c.mean_outside_h
                );
            }
            for i in &r.improvements {
                println!("{} vs {}: {:+.1}%", i.controller, i.relative_to, i.percent);
            }
        }
        Command::Baseline => {
            let ctx = Context::new(cfg)?;
            let out = commands::baseline(&ctx)?;
            println!("wrote {} runs to {}", out.tts.len(), ctx.cfg.out.display());
        }
        Command::Train {
            fresh,
            max_batches,
            quiet,
        } => {
            let ctx = Context::new(cfg)?;
            let opts = TrainOptions {
                fresh,
                max_batches,
                quiet,
            };
            let out = commands::train(&ctx, &opts)?;
            if let Some(k) = out.resumed_at {
                println!("resumed at episode {k}");
            }
            println!(
                "trained {} episodes; policy at {}",
                out.state.episodes_done,
                ctx.cfg.policy_path().display()
            );
        }
        Command::Evaluate => {
            let ctx = Context::new(cfg)?;
            let out = commands::evaluate(&ctx)?;
            println!("wrote {} runs to {}", out.rows.len(), ctx.cfg.out.display());
        }
        Command::Generalize { mode } => {
            let mode = match mode {
                Mode::Scale => SweepMode::Scale,
                Mode::Peakedness => SweepMode::Peakedness,
            };
            let ctx = Context::new(cfg)?;
            let rows = commands::generalize(&ctx, mode, None)?;
            println!("wrote {} rows to {}", rows.len(), ctx.cfg.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
