use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phcp::harness::{self, default_threshold_modes, ExperimentConfig, Layout, OUTPUT_ENV};
use phcp::protocol::{payload_report, read_trace, Mode};
use phcp::selftrain::PseudoMode;
use phcp::{Error, Result};

/// Heterogeneous collaborative perception experiments on a toy 2-D world.
#[derive(Parser, Debug)]
#[command(name = "phcp", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = OUTPUT_ENV, default_value = "phcp-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective configuration as TOML.
    ShowConfig,
    /// Generate and write the evaluation scenarios.
    GenData,
    /// Train the base model of every family.
    Pretrain,
    /// Evaluate one collaboration mode over the suite.
    Run {
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
    },
    /// mSAP against the number of support frames; k = 0 is the direct baseline.
    AblateShots {
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5")]
        shots: Vec<usize>,
    },
    /// mSAP against the pseudo-label rule.
    AblateThreshold {
        /// Hard thresholds to try; defaults to the standard set plus soft labels.
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        /// Also run soft labels with this confidence floor.
        #[arg(long)]
        soft_floor: Option<f64>,
    },
    /// Adapters trained on one scenario, evaluated on every other.
    CrossMatrix {
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
    },
    /// Payload size per message kind and mode.
    Bandwidth,
    /// Decode a message trace and print its records and payload statistics.
    Replay { trace: PathBuf },
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn threshold_modes(tau: &[f64], soft_floor: Option<f64>) -> Vec<PseudoMode> {
    if tau.is_empty() && soft_floor.is_none() {
        return default_threshold_modes();
    }
    let mut modes: Vec<PseudoMode> = tau.iter().map(|&tau| PseudoMode::Hard { tau }).collect();
    modes.extend(soft_floor.map(|floor| PseudoMode::Soft { floor }));
    modes
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Replay { trace } = &cli.command {
        let (index, messages) = read_trace(trace)?;
        println!("scenario {} mode {} ({} messages)", index.scenario_id, index.mode, messages.len());
        for m in &messages {
            let s = m.summary();
            println!("frame {:>3} sender {} {:<6} {} bytes", s.frame, s.sender, s.kind, s.payload_bytes);
        }
        for r in payload_report(&index.mode, index.records.iter().map(|e| &e.summary)) {
            println!(
                "{}: {} messages over {} frames, {:.0} bytes/frame",
                r.kind, r.messages, r.frames, r.bytes_per_frame
            );
        }
        return Ok(());
    }
    let cfg = load_config(cli.common.config.as_ref())?;
    let layout = Layout::new(&cli.common.out);
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
        Command::GenData => print_paths(&harness::cmd_gen_data(&cfg, &layout)?),
        Command::Pretrain => print_paths(&harness::cmd_pretrain(&cfg, &layout)?),
        Command::Run { mode } => {
            let (report, paths) = harness::cmd_run(&cfg, &layout, mode)?;
            print_paths(&paths);
            println!("{mode}: mSAP@0.5 {:.4}  mSAP@0.7 {:.4}", report.msap(0.5), report.msap(0.7));
        }
        Command::AblateShots { shots } => {
            let (report, paths) = harness::cmd_ablate_shots(&cfg, &layout, &shots)?;
            print_paths(&paths);
            print!("{}", report.table_csv(0.7));
        }
        Command::AblateThreshold { tau, soft_floor } => {
            let (report, paths) = harness::cmd_ablate_threshold(&cfg, &layout, &threshold_modes(&tau, soft_floor))?;
            print_paths(&paths);
            print!("{}", report.table_csv(0.7));
        }
        Command::CrossMatrix { iou } => {
            let (report, paths) = harness::cmd_cross_matrix(&cfg, &layout, iou)?;
            print_paths(&paths);
            println!("off-diagonal median {:.4}", report.off_diagonal_median);
        }
        Command::Bandwidth => {
            let (report, paths) = harness::cmd_bandwidth(&cfg, &layout)?;
            print_paths(&paths);
            print!("{}", report.to_csv());
        }
        Command::Replay { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
