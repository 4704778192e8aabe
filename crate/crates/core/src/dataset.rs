//! Dataset ingestion and synthetic scene generation.
//!
//! Real data follows the KITTI odometry layout: little-endian `f32`
//! quadruplets per point in `.bin` scans, 12 whitespace-separated floats per
//! pose line (row-major 3x4), and a calibration file with a `Tr:` line mapping
//! sensor coordinates into the pose reference frame.
//!
//! Synthetic scenes are fields of Gaussian blobs sampled in the sensor frame;
//! revisit clouds re-sample the same scene from a displaced viewpoint with
//! blob dropout and center jitter, which exercises the full pipeline without
//! any real data.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector2, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::PointCloud;
use crate::constellation::Se2Transform;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("scan file {path} has {len} bytes, not a multiple of 16 (offset {offset})")]
    BadScanLength { path: String, len: u64, offset: u64 },
    #[error("pose line {line} has {count} tokens, expected 12")]
    BadPoseLine { line: usize, count: usize },
    #[error("pose line {line}: {source}")]
    PoseParse {
        line: usize,
        source: std::num::ParseFloatError,
    },
    #[error("calibration key '{key}' not found in {path}")]
    CalibKeyMissing { path: String, key: String },
    #[error("calibration line for '{key}' has {count} tokens, expected 12")]
    BadCalibLine { key: String, count: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One scan with its optional ground-truth pose (world from sensor), meters.
#[derive(Debug, Clone)]
pub struct ScanRecord {
    pub scan_id: u64,
    pub cloud: PointCloud,
    pub gt_pose: Option<Matrix4<f64>>,
}

/// Read a KITTI velodyne scan: little-endian `f32` (x, y, z, intensity)
/// quadruplets; intensity is dropped.
pub fn read_scan_bin(path: &Path) -> Result<PointCloud, DatasetError> {
    let mut file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| io_err(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(DatasetError::BadScanLength {
            path: path.display().to_string(),
            len: bytes.len() as u64,
            offset: (bytes.len() - bytes.len() % 16) as u64,
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for chunk in bytes.chunks_exact(16) {
        let x = f32::from_le_bytes(chunk[0..4].try_into().unwrap());
        let y = f32::from_le_bytes(chunk[4..8].try_into().unwrap());
        let z = f32::from_le_bytes(chunk[8..12].try_into().unwrap());
        points.push([x as f64, y as f64, z as f64]);
    }
    Ok(PointCloud::new(points))
}

/// Write a cloud in the same `.bin` format with zero intensity.
pub fn write_scan_bin(path: &Path, cloud: &PointCloud) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for p in &cloud.points {
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, 0.0f32] {
            w.write_all(&v.to_le_bytes()).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

fn parse_12_floats(tokens: &[&str], line: usize) -> Result<[f64; 12], DatasetError> {
    if tokens.len() != 12 {
        return Err(DatasetError::BadPoseLine {
            line,
            count: tokens.len(),
        });
    }
    let mut vals = [0.0; 12];
    for (i, t) in tokens.iter().enumerate() {
        vals[i] = t
            .parse::<f64>()
            .map_err(|source| DatasetError::PoseParse { line, source })?;
    }
    Ok(vals)
}

fn mat4_from_rows(vals: &[f64; 12]) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            m[(r, c)] = vals[r * 4 + c];
        }
    }
    m
}

/// Read pose lines (row-major 3x4) and re-express them in the sensor frame
/// through the calibration `tr` (sensor to reference): `Tr^-1 * P * Tr`.
pub fn read_poses(path: &Path, tr: &Matrix4<f64>) -> Result<Vec<Matrix4<f64>>, DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let tr_inv = tr.try_inverse().expect("calibration must be invertible");
    let mut poses = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        let vals = parse_12_floats(&tokens, i + 1)?;
        poses.push(tr_inv * mat4_from_rows(&vals) * tr);
    }
    Ok(poses)
}

/// Read the `Tr` entry of a KITTI-style calibration file.
pub fn read_calib(path: &Path, key: &str) -> Result<Matrix4<f64>, DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        let Some(rest) = line.strip_prefix(&format!("{key}:")) else {
            continue;
        };
        let tokens: Vec<&str> = rest.split_whitespace().collect();
        if tokens.len() != 12 {
            return Err(DatasetError::BadCalibLine {
                key: key.to_string(),
                count: tokens.len(),
            });
        }
        let vals = parse_12_floats(&tokens, 0)?;
        return Ok(mat4_from_rows(&vals));
    }
    Err(DatasetError::CalibKeyMissing {
        path: path.display().to_string(),
        key: key.to_string(),
    })
}

/// Rotation block orthonormal with positive determinant.
pub fn is_rigid(m: &Matrix4<f64>, tol: f64) -> bool {
    let r = m.fixed_view::<3, 3>(0, 0);
    let should_be_identity = r.transpose() * r;
    (should_be_identity - Matrix3::identity()).amax() < tol && (r.determinant() - 1.0).abs() < tol
}

/// A planar pose embedded as a 4x4 rigid transform (yaw about z).
pub fn se2_to_mat4(pose: &Se2Transform) -> Matrix4<f64> {
    let (s, c) = pose.theta.sin_cos();
    let mut m = Matrix4::identity();
    m[(0, 0)] = c;
    m[(0, 1)] = -s;
    m[(1, 0)] = s;
    m[(1, 1)] = c;
    m[(0, 3)] = pose.t.x;
    m[(1, 3)] = pose.t.y;
    m
}

/// Write poses as 12 row-major floats per line.
pub fn write_poses(path: &Path, poses: &[Matrix4<f64>]) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for p in poses {
        let mut row = Vec::with_capacity(12);
        for r in 0..3 {
            for c in 0..4 {
                row.push(format!("{:.9e}", p[(r, c)]));
            }
        }
        writeln!(w, "{}", row.join(" ")).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// One Gaussian blob of structure: a footprint, a height, and how many points
/// a single scan draws from it.
#[derive(Debug, Clone)]
pub struct Blob {
    /// Footprint center in the scene frame, meters.
    pub center: Vector2<f64>,
    /// Footprint covariance, meters^2, SPD.
    pub spread: Matrix2<f64>,
    /// Structure height above the sensor plane, meters.
    pub height: f64,
    pub points: usize,
}

/// A field of blobs; clouds are sampled in the frame of the viewpoint.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub blobs: Vec<Blob>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SceneParams {
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Blob centers are drawn in this annulus around the sensor, meters.
    pub min_center_radius_m: f64,
    pub max_center_radius_m: f64,
    /// Footprint standard deviations along the principal axes, meters.
    pub min_axis_m: f64,
    pub max_axis_m: f64,
    pub min_height_m: f64,
    pub max_height_m: f64,
    pub min_points: usize,
    pub max_points: usize,
    /// Vertical sampling noise, meters.
    pub z_noise_m: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_blobs: 20,
            max_blobs: 60,
            min_center_radius_m: 8.0,
            max_center_radius_m: 60.0,
            min_axis_m: 0.6,
            max_axis_m: 3.0,
            min_height_m: 0.4,
            max_height_m: 5.4,
            min_points: 150,
            max_points: 420,
            z_noise_m: 0.05,
        }
    }
}

fn sample_standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller transform.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Deterministic random scene plus one cloud sampled from it.
pub fn generate_scene(seed: u64, params: &SceneParams) -> (SyntheticScene, PointCloud) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = random_scene(&mut rng, params);
    let cloud = sample_scene(&scene, &mut rng, params);
    (scene, cloud)
}

fn random_scene(rng: &mut ChaCha8Rng, params: &SceneParams) -> SyntheticScene {
    let n = rng.gen_range(params.min_blobs..=params.max_blobs);
    let blobs = (0..n)
        .map(|_| {
            let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let radius = rng.gen_range(params.min_center_radius_m..params.max_center_radius_m);
            let center = Vector2::new(radius * angle.cos(), radius * angle.sin());
            let a1: f64 = rng.gen_range(params.min_axis_m..params.max_axis_m);
            let a2: f64 = rng.gen_range(params.min_axis_m..a1.max(params.min_axis_m + 1e-9));
            let phi = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, c) = phi.sin_cos();
            let rot = Matrix2::new(c, -s, s, c);
            let spread = rot * Matrix2::new(a1 * a1, 0.0, 0.0, a2 * a2) * rot.transpose();
            Blob {
                center,
                spread,
                height: rng.gen_range(params.min_height_m..params.max_height_m),
                points: rng.gen_range(params.min_points..=params.max_points),
            }
        })
        .collect();
    SyntheticScene { blobs }
}

/// Fresh point sample of the whole scene, sensor at the origin.
pub fn sample_scene(
    scene: &SyntheticScene,
    rng: &mut ChaCha8Rng,
    params: &SceneParams,
) -> PointCloud {
    sample_view(scene, rng, params, &Se2Transform::identity(), 0.0, 0.0)
}

/// Sample the scene as seen from `view` (the viewpoint's pose in the scene
/// frame): each blob is kept with probability `1 - dropout`, its center
/// jittered by a Gaussian of `jitter_m`, and the drawn points are expressed
/// in the viewpoint frame.
pub fn sample_view(
    scene: &SyntheticScene,
    rng: &mut ChaCha8Rng,
    params: &SceneParams,
    view: &Se2Transform,
    dropout: f64,
    jitter_m: f64,
) -> PointCloud {
    let into_view = view.rotation().transpose();
    let mut points = Vec::new();
    for blob in &scene.blobs {
        if dropout > 0.0 && rng.gen_bool(dropout) {
            continue;
        }
        let jitter = if jitter_m > 0.0 {
            Vector2::new(
                jitter_m * sample_standard_normal(rng),
                jitter_m * sample_standard_normal(rng),
            )
        } else {
            Vector2::zeros()
        };
        let center = blob.center + jitter;
        let chol = nalgebra::Cholesky::new(blob.spread).expect("blob spread must be SPD");
        let l = chol.l();
        for _ in 0..blob.points {
            let z = Vector2::new(sample_standard_normal(rng), sample_standard_normal(rng));
            let p_scene = center + l * z;
            let p_view = into_view * (p_scene - view.t);
            let pz = blob.height + params.z_noise_m * sample_standard_normal(rng);
            points.push([p_view.x, p_view.y, pz]);
        }
    }
    PointCloud::new(points)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetParams {
    pub seed: u64,
    pub base_scans: usize,
    pub revisit_scans: usize,
    /// World spacing between base scan positions, meters. Must exceed twice
    /// the loop distance bound so only the true base lies within it.
    pub spacing_m: f64,
    /// Revisit viewpoint offset bound, meters (yaw is unrestricted).
    pub max_offset_m: f64,
    /// Probability that a blob is missing on a revisit.
    pub dropout: f64,
    /// Blob center jitter on revisits, pixels (converted via the resolution).
    pub jitter_px: f64,
    pub scene: SceneParams,
}

impl Default for SyntheticDatasetParams {
    fn default() -> Self {
        Self {
            seed: 42,
            base_scans: 500,
            revisit_scans: 500,
            spacing_m: 40.0,
            max_offset_m: 3.0,
            dropout: 0.10,
            jitter_px: 0.2,
            scene: SceneParams::default(),
        }
    }
}

/// A generated sequence: all base scans first, then one revisit per base scan
/// (cycling when there are more revisits than bases).
#[derive(Debug)]
pub struct SyntheticDataset {
    pub records: Vec<ScanRecord>,
    /// For every scan, the base scan it revisits, if any.
    pub revisit_of: Vec<Option<usize>>,
}

pub fn generate_dataset(params: &SyntheticDatasetParams, resolution_m: f64) -> SyntheticDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let jitter_m = params.jitter_px * resolution_m;
    let mut records = Vec::with_capacity(params.base_scans + params.revisit_scans);
    let mut revisit_of = Vec::with_capacity(params.base_scans + params.revisit_scans);
    let mut scenes = Vec::with_capacity(params.base_scans);
    let mut base_poses = Vec::with_capacity(params.base_scans);

    for i in 0..params.base_scans {
        let scene = random_scene(&mut rng, &params.scene);
        let cloud = sample_scene(&scene, &mut rng, &params.scene);
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let pose = Se2Transform::new(yaw, Vector2::new(i as f64 * params.spacing_m, 0.0));
        records.push(ScanRecord {
            scan_id: i as u64,
            cloud,
            gt_pose: Some(se2_to_mat4(&pose)),
        });
        revisit_of.push(None);
        scenes.push(scene);
        base_poses.push(pose);
    }

    for k in 0..params.revisit_scans {
        let base = k % params.base_scans;
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let offset_angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let offset_len = rng.gen_range(0.0..params.max_offset_m);
        let delta = Se2Transform::new(
            yaw,
            Vector2::new(offset_len * offset_angle.cos(), offset_len * offset_angle.sin()),
        );
        let cloud = sample_view(
            &scenes[base],
            &mut rng,
            &params.scene,
            &delta,
            params.dropout,
            jitter_m,
        );
        let base_pose = &base_poses[base];
        let world = Se2Transform::new(
            base_pose.theta + delta.theta,
            base_pose.t + base_pose.rotation() * delta.t,
        );
        records.push(ScanRecord {
            scan_id: (params.base_scans + k) as u64,
            cloud,
            gt_pose: Some(se2_to_mat4(&world)),
        });
        revisit_of.push(Some(base));
    }

    SyntheticDataset {
        records,
        revisit_of,
    }
}

/// Write a generated dataset in the KITTI layout: `velodyne/NNNNNN.bin`,
/// `poses.txt`, an identity `calib.txt`, and the generation parameters as
/// `synth_params.toml`.
pub fn write_dataset(
    dataset: &SyntheticDataset,
    params: &SyntheticDatasetParams,
    dir: &Path,
) -> Result<(), DatasetError> {
    let velodyne = dir.join("velodyne");
    std::fs::create_dir_all(&velodyne).map_err(|e| io_err(&velodyne, e))?;
    for rec in &dataset.records {
        let path = velodyne.join(format!("{:06}.bin", rec.scan_id));
        write_scan_bin(&path, &rec.cloud)?;
    }
    let poses: Vec<Matrix4<f64>> = dataset
        .records
        .iter()
        .map(|r| r.gt_pose.expect("synthetic scans carry poses"))
        .collect();
    write_poses(&dir.join("poses.txt"), &poses)?;

    let calib_path = dir.join("calib.txt");
    let mut calib = File::create(&calib_path).map_err(|e| io_err(&calib_path, e))?;
    writeln!(calib, "Tr: 1 0 0 0 0 1 0 0 0 0 1 0").map_err(|e| io_err(&calib_path, e))?;

    let params_path = dir.join("synth_params.toml");
    let text = toml::to_string_pretty(params).expect("params serialize");
    std::fs::write(&params_path, text).map_err(|e| io_err(&params_path, e))?;
    Ok(())
}

/// Relative world motion of frame `j` seen from frame `i`.
pub fn relative_pose(pose_i: &Matrix4<f64>, pose_j: &Matrix4<f64>) -> Matrix4<f64> {
    pose_i.try_inverse().expect("rigid pose invertible") * pose_j
}

/// Distance between two pose translations, meters.
pub fn pose_distance(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    (a.fixed_view::<3, 1>(0, 3) - b.fixed_view::<3, 1>(0, 3)).norm()
}

/// Planar projection of a relative rigid transform: yaw from the rotation's
/// planar block, planar translation, and the residual out-of-plane tilt in
/// degrees.
pub fn se2_projection(rel: &Matrix4<f64>) -> (Se2Transform, f64) {
    let yaw = (rel[(1, 0)] - rel[(0, 1)]).atan2(rel[(0, 0)] + rel[(1, 1)]);
    let t = Vector2::new(rel[(0, 3)], rel[(1, 3)]);
    // Angle between the rotated z axis and z: how non-planar the motion is.
    let rz = rel.fixed_view::<3, 3>(0, 0) * Vector3::z();
    let tilt_deg = rz.z.clamp(-1.0, 1.0).acos().to_degrees();
    (Se2Transform::new(yaw, t), tilt_deg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn empty_bin_is_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        std::fs::write(&path, b"").unwrap();
        assert!(read_scan_bin(&path).unwrap().is_empty());
    }

    #[test]
    fn sixteen_bytes_decode_one_point() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let cloud = read_scan_bin(&path).unwrap();
        assert_eq!(cloud.points, vec![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn malformed_length_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, vec![0u8; 20]).unwrap();
        match read_scan_bin(&path) {
            Err(DatasetError::BadScanLength { len: 20, offset: 16, .. }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn bin_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.bin");
        let cloud = PointCloud::new(vec![[0.5, -1.25, 3.75], [10.0, 20.0, -0.125]]);
        write_scan_bin(&path, &cloud).unwrap();
        assert_eq!(read_scan_bin(&path).unwrap(), cloud);
    }

    #[test]
    fn identity_pose_line_parses_to_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        std::fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        let poses = read_poses(&path, &Matrix4::identity()).unwrap();
        assert_eq!(poses.len(), 1);
        assert_relative_eq!(poses[0], Matrix4::identity());
    }

    #[test]
    fn translation_preserved_under_identity_calib() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        std::fs::write(&path, "1 0 0 4.5 0 1 0 -2 0 0 1 0.25\n").unwrap();
        let poses = read_poses(&path, &Matrix4::identity()).unwrap();
        assert_relative_eq!(poses[0][(0, 3)], 4.5);
        assert_relative_eq!(poses[0][(1, 3)], -2.0);
        assert_relative_eq!(poses[0][(2, 3)], 0.25);
    }

    #[test]
    fn wrong_token_count_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        std::fs::write(&path, "1 0 0 0 0 1 0 0 0 0 1 0\n1 2 3\n").unwrap();
        match read_poses(&path, &Matrix4::identity()) {
            Err(DatasetError::BadPoseLine { line: 2, count: 3 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn calib_round_trip_recovers_relative_motion() {
        // A nontrivial calibration: poses re-expressed through Tr and back
        // keep relative sensor motion intact.
        let pose = se2_to_mat4(&Se2Transform::new(0.3, Vector2::new(1.0, 2.0)));
        let tr = se2_to_mat4(&Se2Transform::new(-0.9, Vector2::new(0.2, -0.7)));
        let tr_inv = tr.try_inverse().unwrap();
        let converted = tr_inv * pose * tr;
        let back = tr * converted * tr_inv;
        assert_relative_eq!(back, pose, epsilon = 1e-9);
    }

    #[test]
    fn calib_reader_finds_tr_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        std::fs::write(
            &path,
            "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 1 0 0 0.5 0 1 0 0 0 0 1 -1\n",
        )
        .unwrap();
        let tr = read_calib(&path, "Tr").unwrap();
        assert_relative_eq!(tr[(0, 3)], 0.5);
        assert_relative_eq!(tr[(2, 3)], -1.0);
        assert!(matches!(
            read_calib(&path, "Nope"),
            Err(DatasetError::CalibKeyMissing { .. })
        ));
    }

    #[test]
    fn relative_pose_unchanged_by_global_frame_shift() {
        let p1 = se2_to_mat4(&Se2Transform::new(0.4, Vector2::new(3.0, -1.0)));
        let p2 = se2_to_mat4(&Se2Transform::new(-0.8, Vector2::new(10.0, 5.0)));
        let world_change = se2_to_mat4(&Se2Transform::new(1.1, Vector2::new(-20.0, 7.0)));
        let rel = relative_pose(&p1, &p2);
        let rel_shifted = relative_pose(&(world_change * p1), &(world_change * p2));
        assert_relative_eq!(rel, rel_shifted, epsilon = 1e-9);
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let params = SceneParams::default();
        let (_, a) = generate_scene(7, &params);
        let (_, b) = generate_scene(7, &params);
        assert_eq!(a, b);
        let (_, c) = generate_scene(8, &params);
        assert_ne!(a, c);
    }

    #[test]
    fn tight_blob_lands_where_placed() {
        use crate::bev::{rasterize, slice, BevConfig};
        use crate::contour::{extract_contours, summarize};
        let scene = SyntheticScene {
            blobs: vec![Blob {
                center: Vector2::new(10.0, 5.0),
                spread: Matrix2::new(0.25, 0.0, 0.0, 0.25),
                height: 2.0,
                points: 400,
            }],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = sample_scene(&scene, &mut rng, &SceneParams::default());
        let cfg = BevConfig::default();
        let img = rasterize(&cloud, &cfg);
        let mask = slice(&img, 1);
        let contours = extract_contours(&mask, &img, 3);
        assert_eq!(contours.len(), 1);
        let ca = summarize(&contours[0]);
        let expected = Vector2::new(
            10.0 / cfg.resolution + cfg.center_col() as f64,
            5.0 / cfg.resolution + cfg.center_row() as f64,
        );
        assert!((ca.x_c - expected).norm() < 1.0, "{:?}", ca.x_c);
    }

    #[test]
    fn transforming_scene_commutes_with_sampling() {
        use crate::bev::{rasterize, slice, BevConfig};
        use crate::contour::{extract_contours, rank_contours, summarize};
        let params = SceneParams {
            min_blobs: 8,
            max_blobs: 9,
            max_center_radius_m: 30.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = random_scene(&mut rng, &params);
        let view = Se2Transform::new(0.6, Vector2::new(1.5, -2.0));

        // Route 1: sample from the displaced viewpoint.
        let mut rng1 = ChaCha8Rng::seed_from_u64(10);
        let seen = sample_view(&scene, &mut rng1, &params, &view, 0.0, 0.0);
        // Route 2: sample in the scene frame, then move the points.
        let mut rng2 = ChaCha8Rng::seed_from_u64(10);
        let base = sample_scene(&scene, &mut rng2, &params);
        let rot_t = view.rotation().transpose();
        let moved = PointCloud::new(
            base.points
                .iter()
                .map(|p| {
                    let q = rot_t * (Vector2::new(p[0], p[1]) - view.t);
                    [q.x, q.y, p[2]]
                })
                .collect(),
        );

        let cfg = BevConfig::default();
        let rank = |cloud: &PointCloud| {
            let img = rasterize(cloud, &cfg);
            let mut cas = Vec::new();
            for l in 1..=cfg.num_levels() {
                let mask = slice(&img, l);
                cas.extend(extract_contours(&mask, &img, 3).iter().map(summarize));
            }
            rank_contours(cas, cfg.num_levels())
        };
        let a = rank(&seen);
        let b = rank(&moved);
        // Identical draws, identical geometry: the descriptors agree exactly.
        for (la, lb) in a.iter().zip(&b) {
            assert_eq!(la.len(), lb.len());
            for (ca, cb) in la.iter().zip(lb) {
                assert_eq!(ca.n_a, cb.n_a);
                assert!((ca.x_c - cb.x_c).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn synthetic_poses_are_rigid_and_revisits_close() {
        let params = SyntheticDatasetParams {
            base_scans: 4,
            revisit_scans: 4,
            scene: SceneParams {
                min_blobs: 5,
                max_blobs: 8,
                min_points: 20,
                max_points: 40,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = generate_dataset(&params, 0.5);
        assert_eq!(ds.records.len(), 8);
        for rec in &ds.records {
            assert!(is_rigid(rec.gt_pose.as_ref().unwrap(), 1e-9));
        }
        for (idx, base) in ds.revisit_of.iter().enumerate() {
            if let Some(base) = base {
                let d = pose_distance(
                    ds.records[idx].gt_pose.as_ref().unwrap(),
                    ds.records[*base].gt_pose.as_ref().unwrap(),
                );
                assert!(d <= params.max_offset_m + 1e-9);
            }
        }
    }

    #[test]
    fn written_dataset_round_trips_through_readers() {
        let params = SyntheticDatasetParams {
            base_scans: 2,
            revisit_scans: 1,
            scene: SceneParams {
                min_blobs: 4,
                max_blobs: 5,
                min_points: 10,
                max_points: 15,
                ..Default::default()
            },
            ..Default::default()
        };
        let ds = generate_dataset(&params, 0.5);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, &params, dir.path()).unwrap();

        let tr = read_calib(&dir.path().join("calib.txt"), "Tr").unwrap();
        assert_relative_eq!(tr, Matrix4::identity());
        let poses = read_poses(&dir.path().join("poses.txt"), &tr).unwrap();
        assert_eq!(poses.len(), 3);
        for (rec, pose) in ds.records.iter().zip(&poses) {
            assert_relative_eq!(rec.gt_pose.unwrap(), *pose, epsilon = 1e-7);
        }
        let cloud = read_scan_bin(&dir.path().join("velodyne/000001.bin")).unwrap();
        assert_eq!(cloud.len(), ds.records[1].cloud.len());
    }

    #[test]
    fn se2_projection_extracts_yaw_and_planar_translation() {
        let pose = Se2Transform::new(0.75, Vector2::new(2.0, -3.0));
        let (proj, tilt) = se2_projection(&se2_to_mat4(&pose));
        assert_relative_eq!(proj.theta, 0.75, epsilon = 1e-12);
        assert_relative_eq!(proj.t, pose.t, epsilon = 1e-12);
        assert_relative_eq!(tilt, 0.0, epsilon = 1e-9);
    }
}
