//! Birds'-eye-view projection and height slicing.
//!
//! A point cloud is binned onto a square grid keeping the maximum height per
//! cell. Slicing the image at preset heights yields one binary mask per level;
//! masks use threshold semantics, so the mask at level `l` contains every cell
//! whose height reaches level `l` or above.
//!
//! Pixel coordinates are `(p_x, p_y)` where `p_x` is the column index (metric
//! x axis) and `p_y` the row index (metric y axis). The sensor sits at the
//! center pixel `(center_col, center_row)`; metric coordinates map to pixels
//! via `p_x = round(x / resolution) + center_col` and back via
//! `x = (p_x - center_col) * resolution`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 1-based slice level index. Level 1 is the lowest slice height.
pub type Level = usize;

/// Raw 3D points in the sensor frame, meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BevConfigError {
    #[error("resolution must be positive, got {0}")]
    NonPositiveResolution(f64),
    #[error("half extents must be positive")]
    NonPositiveExtent,
    #[error("need at least 2 slice heights, got {0}")]
    TooFewLevels(usize),
    #[error("slice heights must be strictly increasing")]
    NonIncreasingHeights,
}

/// Projection and slicing parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BevConfig {
    /// Meters per pixel.
    pub resolution: f64,
    /// Half extent of the grid along x, meters.
    pub half_extent_x: f64,
    /// Half extent of the grid along y, meters.
    pub half_extent_y: f64,
    /// Slice heights relative to the sensor, strictly increasing, meters.
    pub slice_heights: Vec<f64>,
    /// Added to every point's z before binning.
    pub sensor_height_offset: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            resolution: 0.5,
            half_extent_x: 75.0,
            half_extent_y: 75.0,
            slice_heights: vec![-0.75, -0.25, 0.25, 0.75, 1.25, 2.0, 3.0, 4.5],
            sensor_height_offset: 0.0,
        }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<(), BevConfigError> {
        if !(self.resolution > 0.0) {
            return Err(BevConfigError::NonPositiveResolution(self.resolution));
        }
        if !(self.half_extent_x > 0.0 && self.half_extent_y > 0.0) {
            return Err(BevConfigError::NonPositiveExtent);
        }
        if self.slice_heights.len() < 2 {
            return Err(BevConfigError::TooFewLevels(self.slice_heights.len()));
        }
        if self.slice_heights.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BevConfigError::NonIncreasingHeights);
        }
        Ok(())
    }

    /// Number of slice levels L.
    pub fn num_levels(&self) -> usize {
        self.slice_heights.len()
    }

    pub fn center_col(&self) -> usize {
        (self.half_extent_x / self.resolution).round() as usize
    }

    pub fn center_row(&self) -> usize {
        (self.half_extent_y / self.resolution).round() as usize
    }

    pub fn width(&self) -> usize {
        2 * self.center_col() + 1
    }

    pub fn height(&self) -> usize {
        2 * self.center_row() + 1
    }

    /// Pixel indices `(p_x, p_y)` of a metric point, or `None` if off-grid.
    pub fn pixel_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let px = (x / self.resolution).round() + self.center_col() as f64;
        let py = (y / self.resolution).round() + self.center_row() as f64;
        if px >= 0.0 && py >= 0.0 && (px as usize) < self.width() && (py as usize) < self.height() {
            Some((px as usize, py as usize))
        } else {
            None
        }
    }
}

/// Dense grid of maximum point heights. Empty cells hold no value.
#[derive(Debug, Clone)]
pub struct BevImage {
    width: usize,
    height: usize,
    /// NaN marks an empty cell.
    cells: Vec<f64>,
    config: BevConfig,
}

impl BevImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn config(&self) -> &BevConfig {
        &self.config
    }

    /// Height stored at pixel `(p_x, p_y)`, if any point projected there.
    pub fn cell(&self, px: usize, py: usize) -> Option<f64> {
        let v = self.cells[py * self.width + px];
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    }

    pub fn non_empty_count(&self) -> usize {
        self.cells.iter().filter(|v| !v.is_nan()).count()
    }
}

/// Project a cloud onto the grid, keeping the maximum height per cell.
/// Out-of-bounds and non-finite points are dropped.
pub fn rasterize(cloud: &PointCloud, cfg: &BevConfig) -> BevImage {
    let width = cfg.width();
    let height = cfg.height();
    let mut cells = vec![f64::NAN; width * height];
    for p in &cloud.points {
        if !(p[0].is_finite() && p[1].is_finite() && p[2].is_finite()) {
            continue;
        }
        if let Some((px, py)) = cfg.pixel_of(p[0], p[1]) {
            let z = p[2] + cfg.sensor_height_offset;
            let cell = &mut cells[py * width + px];
            if cell.is_nan() || z > *cell {
                *cell = z;
            }
        }
    }
    BevImage {
        width,
        height,
        cells,
        config: cfg.clone(),
    }
}

/// Level a height belongs to: the highest level whose slice height it
/// reaches. `None` when the height is below every slice.
pub fn level_of(h: f64, cfg: &BevConfig) -> Option<Level> {
    let n = cfg.slice_heights.partition_point(|&t| h >= t);
    if n == 0 {
        None
    } else {
        Some(n)
    }
}

/// Binary mask of one slice level.
#[derive(Debug, Clone)]
pub struct LevelMask {
    pub level: Level,
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl LevelMask {
    pub fn new(level: Level, width: usize, height: usize) -> Self {
        Self {
            level,
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, px: usize, py: usize) -> bool {
        self.bits[py * self.width + px]
    }

    pub fn set(&mut self, px: usize, py: usize, v: bool) {
        self.bits[py * self.width + px] = v;
    }

    pub fn count_set(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Threshold slice: the mask at level `l` holds every non-empty cell whose
/// height reaches level `l` or above.
pub fn slice(img: &BevImage, l: Level) -> LevelMask {
    assert!(
        l >= 1 && l <= img.config.num_levels(),
        "slice level {l} out of range 1..={}",
        img.config.num_levels()
    );
    let mut mask = LevelMask::new(l, img.width, img.height);
    for py in 0..img.height {
        for px in 0..img.width {
            if let Some(v) = img.cell(px, py) {
                if level_of(v, &img.config).is_some_and(|lv| lv >= l) {
                    mask.set(px, py, true);
                }
            }
        }
    }
    mask
}
