//! Batch entry points behind the command-line interface.
//!
//! `run` streams a scan directory through the pipeline and writes the
//! prediction and timing CSVs, `eval` scores a prediction CSV against
//! ground-truth poses, and `synth` writes a synthetic dataset in the KITTI
//! layout. Configuration is layered: built-in defaults, then an optional TOML
//! file, then command-line overrides.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::BevConfig;
use crate::constellation::{ConstellationConfig, ThresholdSet};
use crate::contour::ContourConfig;
use crate::dataset::{
    generate_dataset, read_calib, read_poses, read_scan_bin, write_dataset, DatasetError,
    SyntheticDatasetParams,
};
use crate::eval::{
    fp_error_distribution, mpe_stats, pr_curve, read_prediction_csv, EvalConfig, EvalError,
    FpErrors, MpeStats, PredictionLog,
};
use crate::gmm::GmmConfig;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::retrieval::RetrievalConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config file {path}: {message}")]
    Config { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("no .bin scans found under {0}")]
    EmptyScanDir(String),
    #[error("prediction ids reach {max_id} but the pose file has {poses} poses")]
    ScanIdRangeMismatch { max_id: u64, poses: usize },
}

impl CliError {
    /// Process exit code: data and io problems map to 2.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Driver-level options that are not part of any one stage.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub exclusion_window: u64,
    pub max_candidates: usize,
    pub max_gmm_candidates: usize,
    pub parallel_candidates: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        let d = PipelineConfig::default();
        Self {
            exclusion_window: d.exclusion_window,
            max_candidates: d.max_candidates,
            max_gmm_candidates: d.max_gmm_candidates,
            parallel_candidates: d.parallel_candidates,
        }
    }
}

/// The full layered configuration: one section per stage plus evaluation and
/// synthetic-data parameters. Unknown keys in the file are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub bev: BevConfig,
    pub contour: ContourConfig,
    pub constellation: ConstellationConfig,
    pub thresholds: ThresholdSet,
    pub gmm: GmmConfig,
    pub retrieval: RetrievalConfig,
    pub pipeline: PipelineOptions,
    pub eval: EvalConfig,
    pub synth: SyntheticDatasetParams,
}

impl RunConfig {
    /// Defaults overlaid with the TOML file, when given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                toml::from_str(&text).map_err(|e| CliError::Config {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            }
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            bev: self.bev.clone(),
            contour: self.contour.clone(),
            constellation: self.constellation.clone(),
            thresholds: self.thresholds.clone(),
            gmm: self.gmm.clone(),
            retrieval: self.retrieval.clone(),
            exclusion_window: self.pipeline.exclusion_window,
            max_candidates: self.pipeline.max_candidates,
            max_gmm_candidates: self.pipeline.max_gmm_candidates,
            parallel_candidates: self.pipeline.parallel_candidates,
        }
    }
}

/// Command-line overrides; every field beats both the defaults and the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub resolution: Option<f64>,
    pub exclusion_window: Option<u64>,
    pub min_pairs: Option<usize>,
    pub knn: Option<usize>,
    pub flush_every: Option<u64>,
    pub max_gmm_candidates: Option<usize>,
    pub parallel_candidates: bool,
    pub l3: Option<f64>,
    pub seed: Option<u64>,
    pub base_scans: Option<usize>,
    pub revisits: Option<usize>,
}

pub fn apply_overrides(cfg: &mut RunConfig, o: &Overrides) {
    if let Some(v) = o.resolution {
        cfg.bev.resolution = v;
    }
    if let Some(v) = o.exclusion_window {
        cfg.pipeline.exclusion_window = v;
        cfg.eval.exclusion_window = v;
    }
    if let Some(v) = o.min_pairs {
        cfg.constellation.min_pairs = v;
    }
    if let Some(v) = o.knn {
        cfg.retrieval.knn = v;
    }
    if let Some(v) = o.flush_every {
        cfg.retrieval.flush_every = v;
    }
    if let Some(v) = o.max_gmm_candidates {
        cfg.pipeline.max_gmm_candidates = v;
    }
    if o.parallel_candidates {
        cfg.pipeline.parallel_candidates = true;
    }
    if let Some(v) = o.l3 {
        cfg.eval.l3 = v;
    }
    if let Some(v) = o.seed {
        cfg.synth.seed = v;
    }
    if let Some(v) = o.base_scans {
        cfg.synth.base_scans = v;
    }
    if let Some(v) = o.revisits {
        cfg.synth.revisit_scans = v;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scans: usize,
    pub loops_reported: usize,
    pub mean_total_ms: f64,
    pub predictions_csv: PathBuf,
    pub timings_csv: PathBuf,
}

/// Sorted `.bin` files of a scan directory.
fn list_scan_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::EmptyScanDir(dir.display().to_string()));
    }
    Ok(files)
}

/// Process every scan of a directory in filename order (query before insert)
/// and write `predictions.csv` and `timings.csv` under `out_dir`.
///
/// The prediction CSV is deterministic for a fixed input and configuration;
/// wall-clock timings go to the separate timings CSV.
pub fn cmd_run(scans_dir: &Path, out_dir: &Path, cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let files = list_scan_files(scans_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let pred_path = out_dir.join("predictions.csv");
    let timing_path = out_dir.join("timings.csv");
    let mut pred = BufWriter::new(File::create(&pred_path).map_err(|e| io_err(&pred_path, e))?);
    let mut timing =
        BufWriter::new(File::create(&timing_path).map_err(|e| io_err(&timing_path, e))?);
    writeln!(pred, "query_id,candidate_id,score,tx_m,ty_m,yaw_rad")
        .map_err(|e| io_err(&pred_path, e))?;
    writeln!(
        timing,
        "query_id,gen_contours_ms,retrieval_ms,cac_check_ms,l2_optim_ms,update_db_ms,total_ms"
    )
    .map_err(|e| io_err(&timing_path, e))?;

    let mut pipeline = Pipeline::new(cfg.pipeline_config());
    let mut loops_reported = 0usize;
    let mut total_ms_sum = 0.0;
    for (idx, file) in files.iter().enumerate() {
        let cloud = read_scan_bin(file)?;
        let started = Instant::now();
        let (result, stages) = pipeline.process_scan(idx as u64, &cloud);
        let total_ms = started.elapsed().as_secs_f64() * 1e3;
        total_ms_sum += total_ms;
        match &result {
            Some(r) => {
                loops_reported += 1;
                writeln!(
                    pred,
                    "{},{},{:.6},{:.6},{:.6},{:.6}",
                    r.query_id, r.candidate_id, r.score, r.pose.t.x, r.pose.t.y, r.pose.theta
                )
                .map_err(|e| io_err(&pred_path, e))?;
            }
            None => {
                writeln!(pred, "{idx},,,,,").map_err(|e| io_err(&pred_path, e))?;
            }
        }
        writeln!(
            timing,
            "{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            idx,
            stages.gen_contours_ms,
            stages.retrieval_ms,
            stages.cac_check_ms,
            stages.l2_optim_ms,
            stages.update_db_ms,
            total_ms
        )
        .map_err(|e| io_err(&timing_path, e))?;
    }
    pred.flush().map_err(|e| io_err(&pred_path, e))?;
    timing.flush().map_err(|e| io_err(&timing_path, e))?;

    Ok(RunSummary {
        scans: files.len(),
        loops_reported,
        mean_total_ms: total_ms_sum / files.len() as f64,
        predictions_csv: pred_path,
        timings_csv: timing_path,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub queries: usize,
    pub max_f1: f64,
    pub max_f1_threshold: f64,
    pub tp_count: usize,
    pub mean_rot_err_deg: Option<f64>,
    pub rmse_rot_err_deg: Option<f64>,
    pub mean_trans_err_m: Option<f64>,
    pub rmse_trans_err_m: Option<f64>,
    pub flagged_nonplanar_pairs: usize,
    pub fp_count: usize,
    pub fp_fraction_under_1m_1deg: Option<f64>,
}

/// Score a prediction CSV against ground truth and write the PR curve CSV,
/// a key-value text report, and a JSON report under `out_dir`.
pub fn cmd_eval(
    predictions: &Path,
    poses_path: &Path,
    calib_path: Option<&Path>,
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<EvalReport, CliError> {
    let log = read_prediction_csv(predictions)?;
    let tr = match calib_path {
        Some(p) => read_calib(p, "Tr")?,
        None => {
            log::warn!("no calibration file given; assuming identity sensor calibration");
            Matrix4::identity()
        }
    };
    let gt_poses = read_poses(poses_path, &tr)?;
    let max_id = log
        .entries
        .iter()
        .flat_map(|p| {
            std::iter::once(p.query_id).chain(p.candidate.as_ref().map(|c| c.candidate_id))
        })
        .max()
        .unwrap_or(0);
    if max_id as usize >= gt_poses.len() {
        return Err(CliError::ScanIdRangeMismatch {
            max_id,
            poses: gt_poses.len(),
        });
    }

    let report = evaluate_log(&log, &gt_poses, &cfg.eval, out_dir)?;
    Ok(report)
}

/// Shared evaluation body: sweep, stats, and the three report files.
pub fn evaluate_log(
    log: &PredictionLog,
    gt_poses: &[Matrix4<f64>],
    eval_cfg: &EvalConfig,
    out_dir: &Path,
) -> Result<EvalReport, CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let curve = pr_curve(log, gt_poses, eval_cfg);
    let stats: MpeStats = mpe_stats(log, gt_poses, eval_cfg, curve.max_f1_threshold);
    let fp: FpErrors = fp_error_distribution(log, gt_poses, eval_cfg, curve.max_f1_threshold);

    let pr_path = out_dir.join("pr_curve.csv");
    let mut pr_file = BufWriter::new(File::create(&pr_path).map_err(|e| io_err(&pr_path, e))?);
    writeln!(pr_file, "threshold,precision,recall,f1").map_err(|e| io_err(&pr_path, e))?;
    for p in &curve.points {
        writeln!(
            pr_file,
            "{:.6},{:.6},{:.6},{:.6}",
            p.threshold, p.precision, p.recall, p.f1
        )
        .map_err(|e| io_err(&pr_path, e))?;
    }
    pr_file.flush().map_err(|e| io_err(&pr_path, e))?;

    let report = EvalReport {
        queries: log.entries.len(),
        max_f1: curve.max_f1,
        max_f1_threshold: curve.max_f1_threshold,
        tp_count: stats.n_tp,
        mean_rot_err_deg: stats.mean_rot_deg,
        rmse_rot_err_deg: stats.rmse_rot_deg,
        mean_trans_err_m: stats.mean_trans_m,
        rmse_trans_err_m: stats.rmse_trans_m,
        flagged_nonplanar_pairs: stats.flagged_pairs.len(),
        fp_count: fp.errors.len(),
        fp_fraction_under_1m_1deg: fp.fraction_under_1m_1deg,
    };

    let txt_path = out_dir.join("report.txt");
    let fmt_opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6}"));
    let text = format!(
        "queries: {}\nmax_f1: {:.6}\nmax_f1_threshold: {:.6}\ntp_count: {}\n\
         mean_rot_err_deg: {}\nrmse_rot_err_deg: {}\nmean_trans_err_m: {}\n\
         rmse_trans_err_m: {}\nflagged_nonplanar_pairs: {}\nfp_count: {}\n\
         fp_fraction_under_1m_1deg: {}\n",
        report.queries,
        report.max_f1,
        report.max_f1_threshold,
        report.tp_count,
        fmt_opt(report.mean_rot_err_deg),
        fmt_opt(report.rmse_rot_err_deg),
        fmt_opt(report.mean_trans_err_m),
        fmt_opt(report.rmse_trans_err_m),
        report.flagged_nonplanar_pairs,
        report.fp_count,
        fmt_opt(report.fp_fraction_under_1m_1deg),
    );
    std::fs::write(&txt_path, text).map_err(|e| io_err(&txt_path, e))?;

    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&json_path, json).map_err(|e| io_err(&json_path, e))?;
    Ok(report)
}

/// Generate and write a synthetic KITTI-layout dataset under `out_dir`.
pub fn cmd_synth(out_dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let dataset = generate_dataset(&cfg.synth, cfg.bev.resolution);
    write_dataset(&dataset, &cfg.synth, out_dir)?;
    Ok(())
}
