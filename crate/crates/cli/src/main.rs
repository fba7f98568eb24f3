mod config;
mod pipeline;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use config::{build_fingerprint, config_fingerprint, RunConfig};
use nextvisit::Result;
use pipeline::{
    ensure_build, parse_axis, report_tsv_row, run_calibration, run_eval, run_training,
    sweep_points, sweep_rows, write_text, ReportArtifact, REPORT_TSV_HEADER, SWEEP_CSV_HEADER,
};

/// Next-POI recommender: build the spatial artifacts, calibrate rewards,
/// train the agent, and score held-out check-ins.
#[derive(Parser)]
#[command(name = "nextvisit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. --set train.episodes=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the inputs and build the KG, contexts, profiles, and initial
    /// environment (cached by fingerprint).
    Build(CommonArgs),
    /// Run random-policy rollouts and persist the reward baselines.
    Calibrate(CommonArgs),
    /// Train the agent, checkpointing for exact resume.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Stop after this many episodes in this invocation (the checkpoint
        /// lets a later `train` finish the rest).
        #[arg(long, value_name = "N")]
        pause_after: Option<usize>,
    },
    /// Score the held-out shard with the trained greedy policy.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Replace the policy with one that always answers the true POI.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and evaluate every point on a config grid.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Sweep axis, e.g. --axis agent.variant=dqn,ddqn (repeatable).
        #[arg(long = "axis", value_name = "KEY=V1,V2,...")]
        axes: Vec<String>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build(common) => cmd_build(&common),
        Command::Calibrate(common) => cmd_calibrate(&common),
        Command::Train { common, pause_after } => cmd_train(&common, pause_after),
        Command::Eval { common, oracle } => cmd_eval(&common, oracle),
        Command::Sweep { common, axes } => cmd_sweep(&common, &axes),
    }
}

fn load(common: &CommonArgs) -> Result<RunConfig> {
    RunConfig::load(&common.config, &common.sets)
}

fn cmd_build(common: &CommonArgs) -> Result<()> {
    let cfg = load(common)?;
    let (arts, cached) = ensure_build(&cfg)?;
    println!(
        "build {} ({})",
        build_fingerprint(&cfg),
        if cached { "cache hit" } else { "rebuilt" }
    );
    println!(
        "  check-ins: {} kept, {} skipped; trips: {} kept, {} skipped",
        arts.events.len(),
        arts.checkin_report.skipped,
        arts.taxi_report.kept,
        arts.taxi_report.skipped
    );
    println!(
        "  kg: {} pois, {} categories, {} zones; windows: {}; users: {}",
        arts.kg.n_pois(),
        arts.kg.n_categories(),
        arts.kg.n_zones(),
        arts.timeline.windows().len(),
        arts.env.users.len()
    );
    if let Some(last) = arts.epoch_losses.last() {
        println!("  embedding loss: {last}");
    }
    Ok(())
}

fn cmd_calibrate(common: &CommonArgs) -> Result<()> {
    let cfg = load(common)?;
    let (arts, _) = ensure_build(&cfg)?;
    let artifact = run_calibration(&cfg, &arts)?;
    println!(
        "calibrated {} rounds ({} samples/component, {} skipped events)",
        artifact.rounds, artifact.samples_per_component, artifact.skipped_events
    );
    let b = artifact.baselines;
    println!("  b_d={} b_c={} b_p={}", b.b_d, b.b_c, b.b_p);
    Ok(())
}

fn cmd_train(common: &CommonArgs, pause_after: Option<usize>) -> Result<()> {
    let cfg = load(common)?;
    let (arts, _) = ensure_build(&cfg)?;
    let episodes = cfg.train.episodes;
    let outcome = run_training(&cfg, &arts, pause_after, |r| {
        println!(
            "episode {}/{}: loss={} reward={} accuracy={}",
            r.episode + 1,
            episodes,
            r.mean_loss,
            r.mean_reward,
            r.accuracy
        );
    })?;
    if outcome.resumed_from > 0 {
        println!("resumed after episode {}", outcome.resumed_from);
    }
    if outcome.finished {
        println!("checkpoint: {}", pipeline::checkpoint_path(&cfg).display());
    } else {
        println!(
            "paused at episode {}/{episodes}; rerun `train` to finish",
            outcome.state.trainer.episode
        );
    }
    Ok(())
}

fn cmd_eval(common: &CommonArgs, oracle: bool) -> Result<()> {
    let cfg = load(common)?;
    let (arts, _) = ensure_build(&cfg)?;
    let outcome = run_eval(&cfg, &arts, oracle)?;
    let artifact = ReportArtifact {
        fingerprint: config_fingerprint(&cfg),
        seed: cfg.run.seed,
        report: outcome.report,
    };
    println!("{REPORT_TSV_HEADER}");
    println!("{}", report_tsv_row(&artifact));
    println!(
        "wrote {} prediction pairs to {}",
        outcome.pairs.len(),
        pipeline::pairs_path(&cfg, oracle).display()
    );
    Ok(())
}

fn cmd_sweep(common: &CommonArgs, axes: &[String]) -> Result<()> {
    let base = load(common)?;
    let axes: Vec<_> = axes.iter().map(|a| parse_axis(a)).collect::<Result<_>>()?;
    let points = sweep_points(&axes)?;

    let mut csv = String::from(SWEEP_CSV_HEADER);
    csv.push('\n');
    for point in &points {
        let mut sets = common.sets.clone();
        sets.extend(point.iter().cloned());
        let cfg = RunConfig::load(&common.config, &sets)?;
        let (arts, _) = ensure_build(&cfg)?;
        run_training(&cfg, &arts, None, |_| {})?;
        let outcome = run_eval(&cfg, &arts, false)?;
        let artifact = ReportArtifact {
            fingerprint: config_fingerprint(&cfg),
            seed: cfg.run.seed,
            report: outcome.report,
        };
        println!(
            "{}: prec_cat={} rec_cat={} avg_sim={} avg_dist_km={}",
            point.join(";"),
            artifact.report.prec_cat,
            artifact.report.rec_cat,
            artifact.report.avg_sim,
            artifact.report.avg_dist_km
        );
        for row in sweep_rows(point, &artifact) {
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    let path = base.run.out_dir.join("sweep.csv");
    write_text(&path, &csv)?;
    println!("sweep table: {}", path.display());
    Ok(())
}
