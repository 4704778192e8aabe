//! Contour extraction and statistical abstraction.
//!
//! Set pixels of a level mask are grouped into 8-connected components; each
//! component is compressed into a fixed set of statistics: pixel count, mean
//! height, center of mass, height-weighted center, shape covariance, and its
//! eigendecomposition.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::bev::{BevImage, Level, LevelMask};

/// One pixel of a raw contour: grid position plus the BEV height of its cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourPixel {
    pub x: u32,
    pub y: u32,
    pub z: f64,
}

/// A maximal 8-connected component of one level mask.
#[derive(Debug, Clone)]
pub struct RawContour {
    pub level: Level,
    /// Provisional id in extraction order; reassigned by [`rank_contours`].
    pub seq: usize,
    pub pixels: Vec<ContourPixel>,
}

/// Statistical summary of one raw contour.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourAbstraction {
    pub level: Level,
    pub seq: usize,
    /// Pixel count.
    pub n_a: usize,
    /// Mean height, meters.
    pub h_m: f64,
    /// Center of mass, pixels.
    pub x_c: Vector2<f64>,
    /// Height-weighted sum of positions divided by the pixel count.
    pub x_m: Vector2<f64>,
    /// Shape covariance with the 1/(n_a - 1) normalizer, pixels^2.
    pub cov: Matrix2<f64>,
    /// Major axis, unit length.
    pub v1: Vector2<f64>,
    /// Minor axis, unit length, perpendicular to `v1`.
    pub v2: Vector2<f64>,
    pub lam1: f64,
    pub lam2: f64,
    /// `|x_c - x_m|`, the eccentricity-like scalar used in similarity checks.
    pub ecc_feat: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ContourConfig {
    /// Components smaller than this are discarded during extraction.
    pub min_pixels: usize,
}

impl Default for ContourConfig {
    fn default() -> Self {
        Self { min_pixels: 3 }
    }
}

const NEIGHBORS_8: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Maximal 8-connected components of the mask with at least `min_pixels`
/// pixels. Each pixel carries the BEV height of its cell. Components are
/// returned in row-major discovery order with 1-based provisional seq ids.
pub fn extract_contours(mask: &LevelMask, img: &BevImage, min_pixels: usize) -> Vec<RawContour> {
    debug_assert_eq!(mask.width(), img.width());
    debug_assert_eq!(mask.height(), img.height());
    let (w, h) = (mask.width(), mask.height());
    let mut visited = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = Vec::new();

    for sy in 0..h {
        for sx in 0..w {
            if !mask.get(sx, sy) || visited[sy * w + sx] {
                continue;
            }
            visited[sy * w + sx] = true;
            queue.clear();
            queue.push((sx, sy));
            let mut pixels = Vec::new();
            while let Some((cx, cy)) = queue.pop() {
                let z = img
                    .cell(cx, cy)
                    .expect("mask bit set on an empty BEV cell");
                pixels.push(ContourPixel {
                    x: cx as u32,
                    y: cy as u32,
                    z,
                });
                for (dx, dy) in NEIGHBORS_8 {
                    let nx = cx as i64 + dx;
                    let ny = cy as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if mask.get(nx, ny) && !visited[ny * w + nx] {
                        visited[ny * w + nx] = true;
                        queue.push((nx, ny));
                    }
                }
            }
            if pixels.len() >= min_pixels {
                out.push(RawContour {
                    level: mask.level,
                    seq: out.len() + 1,
                    pixels,
                });
            }
        }
    }
    out
}

/// Closed-form eigendecomposition of a symmetric 2x2 matrix.
/// Returns `(v1, v2, lam1, lam2)` with `lam1 >= lam2` and `v1` unit length;
/// `v2` is `v1` rotated by 90 degrees.
pub fn eig2x2(cov: &Matrix2<f64>) -> (Vector2<f64>, Vector2<f64>, f64, f64) {
    let a = cov[(0, 0)];
    let b = cov[(0, 1)];
    let c = cov[(1, 1)];
    let half_tr = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).max(0.0).sqrt();
    let lam1 = half_tr + disc;
    let lam2 = half_tr - disc;
    let v1 = if b.abs() > 1e-12 {
        Vector2::new(lam1 - c, b).normalize()
    } else if a >= c {
        Vector2::new(1.0, 0.0)
    } else {
        Vector2::new(0.0, 1.0)
    };
    let v2 = Vector2::new(-v1.y, v1.x);
    (v1, v2, lam1, lam2)
}

/// Compress a raw contour into its statistics. The covariance uses the
/// 1/(n_a - 1) normalizer; a singleton contour gets the zero matrix.
pub fn summarize(raw: &RawContour) -> ContourAbstraction {
    let n = raw.pixels.len();
    assert!(n >= 1, "cannot summarize an empty contour");
    let n_f = n as f64;

    let mut sum_z = 0.0;
    let mut sum_p = Vector2::zeros();
    let mut sum_zp = Vector2::zeros();
    for p in &raw.pixels {
        let pos = Vector2::new(p.x as f64, p.y as f64);
        sum_z += p.z;
        sum_p += pos;
        sum_zp += p.z * pos;
    }
    let h_m = sum_z / n_f;
    let x_c = sum_p / n_f;
    let x_m = sum_zp / n_f;

    let cov = if n == 1 {
        Matrix2::zeros()
    } else {
        let mut acc = Matrix2::zeros();
        for p in &raw.pixels {
            let d = Vector2::new(p.x as f64, p.y as f64) - x_c;
            acc += d * d.transpose();
        }
        acc / (n_f - 1.0)
    };
    let (v1, v2, lam1, lam2) = eig2x2(&cov);

    ContourAbstraction {
        level: raw.level,
        seq: raw.seq,
        n_a: n,
        h_m,
        x_c,
        x_m,
        cov,
        v1,
        v2,
        lam1,
        lam2,
        ecc_feat: (x_c - x_m).norm(),
    }
}

/// Sort abstractions per level by descending pixel count, breaking ties by
/// ascending lexicographic center of mass, then assign 1-based seq ids.
/// Returns one vector per level; index 0 holds level 1.
pub fn rank_contours(cas: Vec<ContourAbstraction>, num_levels: usize) -> Vec<Vec<ContourAbstraction>> {
    let mut by_level: Vec<Vec<ContourAbstraction>> = vec![Vec::new(); num_levels];
    for ca in cas {
        assert!(ca.level >= 1 && ca.level <= num_levels, "level out of range");
        by_level[ca.level - 1].push(ca);
    }
    for level_cas in &mut by_level {
        level_cas.sort_by(|a, b| {
            b.n_a
                .cmp(&a.n_a)
                .then_with(|| a.x_c.x.total_cmp(&b.x_c.x))
                .then_with(|| a.x_c.y.total_cmp(&b.x_c.y))
        });
        for (i, ca) in level_cas.iter_mut().enumerate() {
            ca.seq = i + 1;
        }
    }
    by_level
}
