//! Evaluation of prediction logs against ground-truth poses.
//!
//! A query's single best candidate counts as a true positive when its score
//! clears the threshold and the two poses lie within the loop distance bound;
//! a confident but distant candidate is a false positive. Below the
//! threshold, queries with some valid past pose inside the bound are false
//! negatives, everything else a true negative. Sweeping the threshold over
//! the observed scores yields the precision-recall curve and the max F1
//! score; pose errors are reported for the true positives at the max-F1
//! threshold and, separately, for the false positives.

use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constellation::{wrap_angle, Se2Transform};
use crate::dataset::{pose_distance, relative_pose, se2_projection};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Loop distance bound, meters.
    pub l3: f64,
    /// Frames right before the query that are not valid loop candidates.
    pub exclusion_window: u64,
    /// Explicit score thresholds; observed scores are swept when empty.
    pub threshold_sweep: Vec<f64>,
    /// Relative poses tilted out of plane beyond this are flagged, degrees.
    pub max_tilt_deg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            l3: 5.0,
            exclusion_window: 150,
            threshold_sweep: Vec::new(),
            max_tilt_deg: 3.0,
        }
    }
}

/// The pipeline's answer for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub query_id: u64,
    pub candidate: Option<PredictedLoop>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedLoop {
    pub candidate_id: u64,
    pub score: f64,
    /// Candidate frame into query frame, meters and radians.
    pub pose: Se2Transform,
}

/// One entry per evaluated query.
#[derive(Debug, Clone, Default)]
pub struct PredictionLog {
    pub entries: Vec<Prediction>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    FalseNegative,
    TrueNegative,
    /// Ground truth unavailable for the query or its candidate.
    Skipped,
}

/// Protocol classification of one prediction at a score threshold.
pub fn classify(
    pred: &Prediction,
    gt_poses: &[Matrix4<f64>],
    cfg: &EvalConfig,
    threshold: f64,
) -> Outcome {
    let q = pred.query_id as usize;
    let Some(q_pose) = gt_poses.get(q) else {
        return Outcome::Skipped;
    };
    if let Some(p) = &pred.candidate {
        if p.score >= threshold {
            let Some(c_pose) = gt_poses.get(p.candidate_id as usize) else {
                return Outcome::Skipped;
            };
            return if pose_distance(q_pose, c_pose) < cfg.l3 {
                Outcome::TruePositive
            } else {
                Outcome::FalsePositive
            };
        }
    }
    // No confident prediction: was there a valid past pose to find?
    let last_valid = (pred.query_id).saturating_sub(cfg.exclusion_window + 1);
    if pred.query_id > cfg.exclusion_window {
        for j in 0..=last_valid {
            if let Some(j_pose) = gt_poses.get(j as usize) {
                if pose_distance(q_pose, j_pose) < cfg.l3 {
                    return Outcome::FalseNegative;
                }
            }
        }
    }
    Outcome::TrueNegative
}

/// Outcome counts at one threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub skipped: usize,
}

pub fn count_outcomes(
    log: &PredictionLog,
    gt_poses: &[Matrix4<f64>],
    cfg: &EvalConfig,
    threshold: f64,
) -> Counts {
    let mut counts = Counts::default();
    for pred in &log.entries {
        match classify(pred, gt_poses, cfg, threshold) {
            Outcome::TruePositive => counts.tp += 1,
            Outcome::FalsePositive => counts.fp += 1,
            Outcome::FalseNegative => counts.fn_ += 1,
            Outcome::TrueNegative => counts.tn += 1,
            Outcome::Skipped => counts.skipped += 1,
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub max_f1: f64,
    pub max_f1_threshold: f64,
}

/// Sweep the threshold over the observed scores (or the configured sweep) and
/// collect defined precision-recall points. Thresholds where no positives
/// exist are omitted from the curve.
pub fn pr_curve(log: &PredictionLog, gt_poses: &[Matrix4<f64>], cfg: &EvalConfig) -> PrCurve {
    let mut thresholds = if cfg.threshold_sweep.is_empty() {
        let mut scores: Vec<f64> = log
            .entries
            .iter()
            .filter_map(|p| p.candidate.as_ref().map(|c| c.score))
            .collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        scores
    } else {
        cfg.threshold_sweep.clone()
    };
    thresholds.sort_by(f64::total_cmp);

    let mut curve = PrCurve::default();
    for &threshold in &thresholds {
        let c = count_outcomes(log, gt_poses, cfg, threshold);
        if c.tp + c.fp == 0 {
            continue;
        }
        let precision = c.tp as f64 / (c.tp + c.fp) as f64;
        let recall = if c.tp + c.fn_ == 0 {
            continue;
        } else {
            c.tp as f64 / (c.tp + c.fn_) as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        curve.points.push(PrPoint {
            threshold,
            precision,
            recall,
            f1,
        });
        if f1 > curve.max_f1 {
            curve.max_f1 = f1;
            curve.max_f1_threshold = threshold;
        }
    }
    curve
}

/// Pose-error statistics of the true positives at one threshold.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MpeStats {
    pub n_tp: usize,
    pub mean_rot_deg: Option<f64>,
    pub rmse_rot_deg: Option<f64>,
    pub mean_trans_m: Option<f64>,
    pub rmse_trans_m: Option<f64>,
    /// Query/candidate pairs whose ground-truth motion tilts out of plane
    /// beyond the configured bound (degrees).
    pub flagged_pairs: Vec<(u64, u64, f64)>,
}

/// Per-prediction planar pose errors against ground truth.
fn pose_errors(
    pred: &PredictedLoop,
    query_id: u64,
    gt_poses: &[Matrix4<f64>],
) -> (f64, f64, f64) {
    let rel = relative_pose(
        &gt_poses[query_id as usize],
        &gt_poses[pred.candidate_id as usize],
    );
    let (gt_se2, tilt_deg) = se2_projection(&rel);
    let trans_err = (pred.pose.t - gt_se2.t).norm();
    let rot_err_deg = wrap_angle(pred.pose.theta - gt_se2.theta).abs().to_degrees();
    (trans_err, rot_err_deg, tilt_deg)
}

pub fn mpe_stats(
    log: &PredictionLog,
    gt_poses: &[Matrix4<f64>],
    cfg: &EvalConfig,
    threshold: f64,
) -> MpeStats {
    let mut stats = MpeStats::default();
    let mut trans = Vec::new();
    let mut rot = Vec::new();
    for pred in &log.entries {
        if classify(pred, gt_poses, cfg, threshold) != Outcome::TruePositive {
            continue;
        }
        let p = pred.candidate.as_ref().expect("true positive has candidate");
        let (trans_err, rot_err_deg, tilt_deg) = pose_errors(p, pred.query_id, gt_poses);
        if tilt_deg > cfg.max_tilt_deg {
            stats
                .flagged_pairs
                .push((pred.query_id, p.candidate_id, tilt_deg));
        }
        trans.push(trans_err);
        rot.push(rot_err_deg);
    }
    stats.n_tp = trans.len();
    if stats.n_tp > 0 {
        let n = stats.n_tp as f64;
        stats.mean_trans_m = Some(trans.iter().sum::<f64>() / n);
        stats.rmse_trans_m = Some((trans.iter().map(|e| e * e).sum::<f64>() / n).sqrt());
        stats.mean_rot_deg = Some(rot.iter().sum::<f64>() / n);
        stats.rmse_rot_deg = Some((rot.iter().map(|e| e * e).sum::<f64>() / n).sqrt());
    }
    stats
}

/// Pose errors of the false positives at one threshold, with the fraction
/// under the (1 m, 1 degree) box when any exist.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FpErrors {
    pub errors: Vec<(f64, f64)>,
    pub fraction_under_1m_1deg: Option<f64>,
}

pub fn fp_error_distribution(
    log: &PredictionLog,
    gt_poses: &[Matrix4<f64>],
    cfg: &EvalConfig,
    threshold: f64,
) -> FpErrors {
    let mut out = FpErrors::default();
    for pred in &log.entries {
        if classify(pred, gt_poses, cfg, threshold) != Outcome::FalsePositive {
            continue;
        }
        let p = pred.candidate.as_ref().expect("false positive has candidate");
        let (trans_err, rot_err_deg, _) = pose_errors(p, pred.query_id, gt_poses);
        out.errors.push((trans_err, rot_err_deg));
    }
    if !out.errors.is_empty() {
        let under = out
            .errors
            .iter()
            .filter(|(t, r)| *t < 1.0 && *r < 1.0)
            .count();
        out.fraction_under_1m_1deg = Some(under as f64 / out.errors.len() as f64);
    }
    out
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("prediction csv is missing column '{0}'")]
    MissingColumn(&'static str),
    #[error("prediction csv row {row}: bad value in column '{column}'")]
    BadValue { row: usize, column: &'static str },
}

const PREDICTION_COLUMNS: [&str; 6] = [
    "query_id",
    "candidate_id",
    "score",
    "tx_m",
    "ty_m",
    "yaw_rad",
];

/// Parse the prediction CSV written by the run command. Empty candidate
/// fields mean the query produced no loop.
pub fn read_prediction_csv(path: &Path) -> Result<PredictionLog, EvalError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => EvalError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => EvalError::Csv(e),
    })?;
    let headers = reader.headers()?.clone();
    let mut column_index = [0usize; 6];
    for (i, name) in PREDICTION_COLUMNS.iter().enumerate() {
        column_index[i] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or(EvalError::MissingColumn(name))?;
    }
    let mut log = PredictionLog::default();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(column_index[i]).unwrap_or("");
        let parse_f64 = |i: usize| -> Result<f64, EvalError> {
            field(i).parse::<f64>().map_err(|_| EvalError::BadValue {
                row: row + 2,
                column: PREDICTION_COLUMNS[i],
            })
        };
        let query_id = field(0).parse::<u64>().map_err(|_| EvalError::BadValue {
            row: row + 2,
            column: "query_id",
        })?;
        let candidate = if field(1).is_empty() {
            None
        } else {
            let candidate_id = field(1).parse::<u64>().map_err(|_| EvalError::BadValue {
                row: row + 2,
                column: "candidate_id",
            })?;
            Some(PredictedLoop {
                candidate_id,
                score: parse_f64(2)?,
                pose: Se2Transform::new(
                    parse_f64(5)?,
                    nalgebra::Vector2::new(parse_f64(3)?, parse_f64(4)?),
                ),
            })
        };
        log.entries.push(Prediction {
            query_id,
            candidate,
        });
    }
    Ok(log)
}
