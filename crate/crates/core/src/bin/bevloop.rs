use std::path::PathBuf;
use std::process::exit;

use clap::{ArgAction, Args, Parser, Subcommand};

use bevloop::cli::{
    apply_overrides, cmd_eval, cmd_run, cmd_synth, CliError, Overrides, RunConfig,
};

/// Loop closure detection for 3D LiDAR scans over birds'-eye-view contours.
#[derive(Parser)]
#[command(name = "bevloop", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// BEV grid resolution, meters per pixel.
    #[arg(long)]
    resolution: Option<f64>,
    /// Frames right before the query excluded as candidates.
    #[arg(long)]
    exclusion_window: Option<u64>,
    /// Minimum surviving peripheral pairs for a constellation match.
    #[arg(long)]
    min_pairs: Option<usize>,
    /// Candidates retrieved per query key.
    #[arg(long)]
    knn: Option<usize>,
    /// Database flush cadence in scans.
    #[arg(long)]
    flush_every: Option<u64>,
    /// Constellation survivors entering correlation optimization.
    #[arg(long)]
    max_gmm_candidates: Option<usize>,
    /// Evaluate a query's candidates concurrently.
    #[arg(long, action = ArgAction::SetTrue)]
    parallel_candidates: bool,
}

impl ConfigArgs {
    fn load(&self, extra: Overrides) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        let overrides = Overrides {
            resolution: self.resolution,
            exclusion_window: self.exclusion_window,
            min_pairs: self.min_pairs,
            knn: self.knn,
            flush_every: self.flush_every,
            max_gmm_candidates: self.max_gmm_candidates,
            parallel_candidates: self.parallel_candidates,
            ..extra
        };
        apply_overrides(&mut cfg, &overrides);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Detect loops over a directory of .bin scans; writes predictions.csv
    /// and timings.csv.
    Run {
        /// Directory holding the .bin scans (processed in filename order).
        #[arg(long)]
        scans: PathBuf,
        /// Output directory for the CSVs.
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a prediction CSV against ground-truth poses; writes
    /// pr_curve.csv, report.txt, and report.json.
    Eval {
        /// Prediction CSV written by `run`.
        #[arg(long)]
        predictions: PathBuf,
        /// Pose file, 12 row-major floats per line.
        #[arg(long)]
        poses: PathBuf,
        /// KITTI-style calibration file with a `Tr:` line; identity when
        /// omitted.
        #[arg(long)]
        calib: Option<PathBuf>,
        /// Output directory for the reports.
        #[arg(long)]
        out_dir: PathBuf,
        /// Loop distance bound, meters.
        #[arg(long)]
        l3: Option<f64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic KITTI-layout dataset with revisits.
    Synth {
        /// Output directory for velodyne/, poses.txt, calib.txt.
        #[arg(long)]
        out_dir: PathBuf,
        /// Generation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of base scans.
        #[arg(long)]
        base_scans: Option<usize>,
        /// Number of revisit scans appended after the bases.
        #[arg(long)]
        revisits: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            scans,
            out_dir,
            config,
        } => {
            let cfg = config.load(Overrides::default())?;
            let summary = cmd_run(&scans, &out_dir, &cfg)?;
            println!(
                "processed {} scans, {} loop predictions, mean {:.2} ms/scan",
                summary.scans, summary.loops_reported, summary.mean_total_ms
            );
            println!("predictions: {}", summary.predictions_csv.display());
            println!("timings:     {}", summary.timings_csv.display());
            Ok(())
        }
        Command::Eval {
            predictions,
            poses,
            calib,
            out_dir,
            l3,
            config,
        } => {
            let cfg = config.load(Overrides {
                l3,
                ..Default::default()
            })?;
            let report = cmd_eval(&predictions, &poses, calib.as_deref(), &out_dir, &cfg)?;
            println!(
                "max F1 {:.4} at threshold {:.4} ({} TP, {} FP)",
                report.max_f1, report.max_f1_threshold, report.tp_count, report.fp_count
            );
            println!("reports under {}", out_dir.display());
            Ok(())
        }
        Command::Synth {
            out_dir,
            seed,
            base_scans,
            revisits,
            config,
        } => {
            let cfg = config.load(Overrides {
                seed,
                base_scans,
                revisits,
                ..Default::default()
            })?;
            cmd_synth(&out_dir, &cfg)?;
            println!(
                "wrote {} scans under {}",
                cfg.synth.base_scans + cfg.synth.revisit_scans,
                out_dir.display()
            );
            Ok(())
        }
    }
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            exit(code);
        }
    };
    match run(cli) {
        Ok(()) => exit(0),
        Err(e) => {
            eprintln!("error: {e}");
            exit(e.exit_code());
        }
    }
}
