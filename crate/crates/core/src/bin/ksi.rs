use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use ksi::cli::{
    cmd_ablate, cmd_generate, cmd_localize, cmd_match, cmd_pose, cmd_report, exit_code,
    load_config, output_dir, CommandReport, Overrides, PairSelection,
};
use ksi::enrich::EnrichmentMode;
use ksi::experiment::Ablation;
use ksi::matchcore::{MatchMode, Solver};

#[derive(Parser)]
#[command(
    name = "ksi",
    version,
    about = "Semantic keypoint enrichment experiments on a synthetic vineyard"
)]
struct Cli {
    /// JSON file mirroring the experiment configuration fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Enrichment mode: off, add or concat.
    #[arg(long, global = true)]
    mode: Option<EnrichmentMode>,
    /// Solver: mutual_nn, exact or sinkhorn.
    #[arg(long, global = true)]
    matcher: Option<Solver>,
    /// heterogeneous or homogeneous.
    #[arg(long = "match-mode", global = true)]
    match_mode: Option<MatchMode>,
    /// Also run with enrichment off and report both.
    #[arg(long = "compare-baseline", global = true)]
    compare_baseline: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the scene, every frame and a manifest.
    Generate,
    /// Match frame pairs and score semantic accuracy.
    Match {
        /// rows, all, or START..END over consecutive pairs.
        #[arg(long, default_value = "rows")]
        pairs: PairSelection,
    },
    /// Visual odometry around the loop.
    Pose,
    /// Localize revisit queries against the map frames.
    Localize,
    /// Run one ablation grid.
    Ablate {
        /// embed, normalize or matchmode.
        #[arg(long)]
        which: Ablation,
    },
    /// Summarize the CSVs of an output directory.
    Report,
}

fn run(cli: &Cli) -> ksi::Result<CommandReport> {
    if let Command::Report = cli.command {
        let dir = cli
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(ksi::cli::DEFAULT_OUTPUT_DIR));
        return cmd_report(&dir);
    }
    let overrides = Overrides {
        seed: cli.seed,
        mode: cli.mode,
        matcher: cli.matcher,
        match_mode: cli.match_mode,
        out: cli.out.clone(),
    };
    let cfg = load_config(cli.config.as_deref(), &overrides)?;
    eprintln!("output directory: {}", output_dir(&cfg).display());
    match &cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Match { pairs } => cmd_match(&cfg, pairs, cli.compare_baseline),
        Command::Pose => cmd_pose(&cfg, cli.compare_baseline),
        Command::Localize => cmd_localize(&cfg, cli.compare_baseline),
        Command::Ablate { which } => cmd_ablate(&cfg, *which),
        Command::Report => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let start = Instant::now();
    let code = match run(&cli) {
        Ok(report) => {
            if report.files.len() > 20 {
                println!("wrote {} files", report.files.len());
            } else {
                for f in &report.files {
                    println!("{}", f.display());
                }
            }
            for m in &report.undefined {
                eprintln!("undefined metric: {m}");
            }
            report.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    eprintln!("elapsed: {:.2} s", start.elapsed().as_secs_f64());
    ExitCode::from(code as u8)
}
