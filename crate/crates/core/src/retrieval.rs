//! Yaw-invariant retrieval keys and the layered KD-tree database.
//!
//! Each indexed anchor contour yields a low-dimensional key: three entries
//! from the anchor's own statistics plus ring values integrating the levels
//! above a base level over distance segments around the anchor center. Keys
//! live in one exact KD-tree per level; inserts are buffered and merged in
//! batches, one level per flush, so per-scan update cost stays flat.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::bev::{level_of, BevImage, Level};
use crate::contour::ContourAbstraction;

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Levels whose top contours become indexed anchors.
    pub anchor_levels: Vec<Level>,
    /// Anchors indexed per level.
    pub anchors_per_level: usize,
    /// Region-of-interest radius around the anchor center, pixels.
    pub roi_radius_px: f64,
    /// Number of ring segments; thresholds are uniform up to the radius.
    pub roi_segments: usize,
    /// Width of the per-pixel distance distribution, pixels.
    pub sigma_d: f64,
    /// Pixels contribute when their level exceeds this base level.
    pub base_level: Level,
    /// Weight on the anchor part of the key.
    pub w1: f64,
    /// Candidates retrieved per query key.
    pub knn: usize,
    /// A flush is triggered every this many scans.
    pub flush_every: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            anchor_levels: vec![2, 3, 4],
            anchors_per_level: 6,
            roi_radius_px: 20.0,
            roi_segments: 7,
            sigma_d: 1.0,
            base_level: 1,
            w1: 0.3,
            knn: 50,
            flush_every: 100,
        }
    }
}

impl RetrievalConfig {
    /// Ascending segment thresholds `d_1..d_n`, uniform up to the radius.
    pub fn segment_thresholds(&self) -> Vec<f64> {
        (1..=self.roi_segments)
            .map(|i| self.roi_radius_px * i as f64 / self.roi_segments as f64)
            .collect()
    }

    pub fn key_dim(&self) -> usize {
        3 + self.roi_segments
    }
}

/// Key of one indexed anchor: `[w1 * anchor part; ring part]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalKey {
    pub level: Level,
    pub seq: usize,
    pub values: Vec<f64>,
}

/// Anchor part of the key: `[sqrt(n_a*lam1), sqrt(n_a*lam2), sqrt(cum_na)]`
/// where `cum_na` sums the pixel counts of the level's top contours through
/// this one.
pub fn make_anchor_key(ca: &ContourAbstraction, cum_na: usize) -> [f64; 3] {
    let n = ca.n_a as f64;
    [
        (n * ca.lam1).sqrt(),
        (n * ca.lam2).sqrt(),
        (cum_na as f64).sqrt(),
    ]
}

/// Ring part of the key. Every BEV pixel within the radius whose level
/// exceeds the base level spreads its level surplus over the distance
/// segments through a normal distribution centered on its anchor distance;
/// the segment integrals have a closed form in the normal CDF.
pub fn make_roi_key(img: &BevImage, ca: &ContourAbstraction, cfg: &RetrievalConfig) -> Vec<f64> {
    let thresholds = cfg.segment_thresholds();
    let mut values = vec![0.0; cfg.roi_segments];
    let r = cfg.roi_radius_px;
    let cx = ca.x_c.x;
    let cy = ca.x_c.y;

    let x_lo = ((cx - r).floor().max(0.0)) as usize;
    let x_hi = ((cx + r).ceil().min((img.width() - 1) as f64)) as usize;
    let y_lo = ((cy - r).floor().max(0.0)) as usize;
    let y_hi = ((cy + r).ceil().min((img.height() - 1) as f64)) as usize;

    for py in y_lo..=y_hi {
        for px in x_lo..=x_hi {
            let Some(h) = img.cell(px, py) else { continue };
            let Some(level) = level_of(h, img.config()) else {
                continue;
            };
            if level <= cfg.base_level {
                continue;
            }
            let dx = px as f64 - cx;
            let dy = py as f64 - cy;
            let delta = (dx * dx + dy * dy).sqrt();
            if delta > r {
                continue;
            }
            let weight = (level - cfg.base_level) as f64;
            let mut prev = phi((0.0 - delta) / cfg.sigma_d);
            for (i, &d_i) in thresholds.iter().enumerate() {
                let cur = phi((d_i - delta) / cfg.sigma_d);
                values[i] += weight * (cur - prev);
                prev = cur;
            }
        }
    }
    values
}

/// Concatenate the weighted anchor part with the ring part.
pub fn make_full_key(
    anchor_key: [f64; 3],
    roi_key: &[f64],
    w1: f64,
    level: Level,
    seq: usize,
) -> RetrievalKey {
    let mut values = Vec::with_capacity(3 + roi_key.len());
    values.extend(anchor_key.iter().map(|v| w1 * v));
    values.extend_from_slice(roi_key);
    RetrievalKey { level, seq, values }
}

/// Keys for the top anchors of every indexed level of a ranked scan.
pub fn build_keys(
    img: &BevImage,
    ranked: &[Vec<ContourAbstraction>],
    cfg: &RetrievalConfig,
) -> Vec<RetrievalKey> {
    let mut keys = Vec::new();
    for &level in &cfg.anchor_levels {
        let Some(cas) = ranked.get(level - 1) else {
            continue;
        };
        let mut cum_na = 0usize;
        for ca in cas.iter().take(cfg.anchors_per_level) {
            cum_na += ca.n_a;
            let anchor = make_anchor_key(ca, cum_na);
            let roi = make_roi_key(img, ca, cfg);
            keys.push(make_full_key(anchor, &roi, cfg.w1, level, ca.seq));
        }
    }
    keys
}

/// Reference to an indexed anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryRef {
    pub scan_id: u64,
    pub seq: usize,
}

/// One nearest-neighbor result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryHit {
    pub scan_id: u64,
    pub seq: usize,
    pub distance: f64,
}

#[derive(Debug, Error)]
pub enum DatabaseError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad snapshot magic")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    BadVersion(u32),
    #[error("snapshot key dimension {found} does not match configured {expected}")]
    DimensionMismatch { found: usize, expected: usize },
}

mod kdtree {
    use super::EntryRef;

    /// Static exact KD-tree over fixed-dimension keys, rebuilt per flush.
    #[derive(Debug, Clone, Default)]
    pub(super) struct KdTree {
        dim: usize,
        /// Keys flattened with stride `dim`, permuted into tree order.
        coords: Vec<f64>,
        entries: Vec<EntryRef>,
        nodes: Vec<Node>,
        root: i32,
    }

    #[derive(Debug, Clone)]
    enum Node {
        Split {
            axis: u8,
            /// Splitting coordinate, captured at build time: the left child
            /// holds coordinates <= split, the right child >= split.
            split: f64,
            left: u32,
            right: u32,
        },
        Leaf {
            lo: u32,
            len: u32,
        },
    }

    const LEAF_SIZE: usize = 8;

    impl KdTree {
        pub(super) fn build(dim: usize, data: Vec<(EntryRef, Vec<f64>)>) -> Self {
            let n = data.len();
            let mut order: Vec<u32> = (0..n as u32).collect();
            let coords_src: Vec<f64> = data.iter().flat_map(|(_, k)| k.iter().copied()).collect();
            let mut nodes = Vec::new();
            let root = if n == 0 {
                -1
            } else {
                Self::build_node(dim, &coords_src, &mut order, 0, n, &mut nodes) as i32
            };
            // Permute into tree order for cache-friendly leaf scans.
            let mut coords = Vec::with_capacity(n * dim);
            let mut entries = Vec::with_capacity(n);
            for &idx in &order {
                let idx = idx as usize;
                coords.extend_from_slice(&coords_src[idx * dim..(idx + 1) * dim]);
                entries.push(data[idx].0);
            }
            Self {
                dim,
                coords,
                entries,
                nodes,
                root,
            }
        }

        fn build_node(
            dim: usize,
            coords: &[f64],
            order: &mut [u32],
            lo: usize,
            hi: usize,
            nodes: &mut Vec<Node>,
        ) -> u32 {
            if hi - lo <= LEAF_SIZE {
                nodes.push(Node::Leaf {
                    lo: lo as u32,
                    len: (hi - lo) as u32,
                });
                return (nodes.len() - 1) as u32;
            }
            // Split on the axis with the widest spread.
            let mut best_axis = 0usize;
            let mut best_spread = -1.0;
            for axis in 0..dim {
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for &idx in &order[lo..hi] {
                    let v = coords[idx as usize * dim + axis];
                    min = min.min(v);
                    max = max.max(v);
                }
                let spread = max - min;
                if spread > best_spread {
                    best_spread = spread;
                    best_axis = axis;
                }
            }
            let mid = (lo + hi) / 2;
            order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
                coords[a as usize * dim + best_axis]
                    .total_cmp(&coords[b as usize * dim + best_axis])
            });
            let split = coords[order[mid] as usize * dim + best_axis];
            let node_idx = nodes.len();
            nodes.push(Node::Split {
                axis: best_axis as u8,
                split,
                left: 0,
                right: 0,
            });
            let left = Self::build_node(dim, coords, order, lo, mid, nodes);
            let right = Self::build_node(dim, coords, order, mid, hi, nodes);
            if let Node::Split {
                left: l, right: r, ..
            } = &mut nodes[node_idx]
            {
                *l = left;
                *r = right;
            }
            node_idx as u32
        }

        pub(super) fn len(&self) -> usize {
            self.entries.len()
        }

        pub(super) fn iter(&self) -> impl Iterator<Item = (EntryRef, &[f64])> + '_ {
            self.entries
                .iter()
                .enumerate()
                .map(move |(i, e)| (*e, &self.coords[i * self.dim..(i + 1) * self.dim]))
        }

        /// Exact k nearest neighbors by Euclidean distance.
        pub(super) fn knn(&self, query: &[f64], k: usize) -> Vec<(f64, EntryRef)> {
            if self.root < 0 || self.entries.is_empty() || k == 0 {
                return Vec::new();
            }
            assert_eq!(query.len(), self.dim);
            // Max-heap of the current best k squared distances.
            let mut heap: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
            self.search(self.root as u32, query, k, &mut heap);
            let mut out: Vec<(f64, EntryRef)> = heap
                .into_iter()
                .map(|(d2, i)| (d2.sqrt(), self.entries[i as usize]))
                .collect();
            out.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then_with(|| a.1.scan_id.cmp(&b.1.scan_id))
                    .then_with(|| a.1.seq.cmp(&b.1.seq))
            });
            out
        }

        fn dist2(&self, i: usize, query: &[f64]) -> f64 {
            let base = i * self.dim;
            let mut acc = 0.0;
            for d in 0..self.dim {
                let diff = self.coords[base + d] - query[d];
                acc += diff * diff;
            }
            acc
        }

        fn heap_push(heap: &mut Vec<(f64, u32)>, k: usize, item: (f64, u32)) {
            if heap.len() < k {
                heap.push(item);
                heap.sort_by(|a, b| b.0.total_cmp(&a.0)); // small k: keep it simple
            } else if item.0 < heap[0].0 {
                heap[0] = item;
                heap.sort_by(|a, b| b.0.total_cmp(&a.0));
            }
        }

        fn worst(heap: &[(f64, u32)], k: usize) -> f64 {
            if heap.len() < k {
                f64::INFINITY
            } else {
                heap[0].0
            }
        }

        fn search(&self, node_idx: u32, query: &[f64], k: usize, heap: &mut Vec<(f64, u32)>) {
            match &self.nodes[node_idx as usize] {
                Node::Leaf { lo, len } => {
                    for i in *lo as usize..(*lo + *len) as usize {
                        let d2 = self.dist2(i, query);
                        Self::heap_push(heap, k, (d2, i as u32));
                    }
                }
                Node::Split {
                    axis,
                    split,
                    left,
                    right,
                } => {
                    let diff = query[*axis as usize] - split;
                    let (near, far) = if diff < 0.0 {
                        (*left, *right)
                    } else {
                        (*right, *left)
                    };
                    self.search(near, query, k, heap);
                    if diff * diff <= Self::worst(heap, k) {
                        self.search(far, query, k, heap);
                    }
                }
            }
        }
    }
}

use kdtree::KdTree;

/// Per-level KD-trees over retrieval keys with buffered batched inserts.
///
/// Queries only see flushed entries; [`LayeredDatabase::flush`] merges one
/// level's pending buffer per call in round-robin order, so every key becomes
/// visible within `levels.len()` flush triggers.
#[derive(Debug)]
pub struct LayeredDatabase {
    key_dim: usize,
    levels: Vec<Level>,
    trees: Vec<KdTree>,
    pending: Vec<Vec<(EntryRef, Vec<f64>)>>,
    flush_cursor: usize,
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"BLDB";
const SNAPSHOT_VERSION: u32 = 1;

impl LayeredDatabase {
    pub fn new(levels: Vec<Level>, key_dim: usize) -> Self {
        let n = levels.len();
        Self {
            key_dim,
            levels,
            trees: vec![KdTree::default(); n],
            pending: vec![Vec::new(); n],
            flush_cursor: 0,
        }
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn key_dim(&self) -> usize {
        self.key_dim
    }

    /// Flushed (queryable) entry count.
    pub fn len(&self) -> usize {
        self.trees.iter().map(KdTree::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pending_len(&self) -> usize {
        self.pending.iter().map(Vec::len).sum()
    }

    fn slot_of(&self, level: Level) -> Option<usize> {
        self.levels.iter().position(|&l| l == level)
    }

    /// Buffer keys of one scan. Keys from non-indexed levels are ignored.
    pub fn insert(&mut self, scan_id: u64, keys: &[RetrievalKey]) {
        for key in keys {
            debug_assert_eq!(key.values.len(), self.key_dim);
            if let Some(slot) = self.slot_of(key.level) {
                self.pending[slot].push((
                    EntryRef {
                        scan_id,
                        seq: key.seq,
                    },
                    key.values.clone(),
                ));
            }
        }
    }

    /// K nearest flushed entries of the key's level, ascending by distance.
    pub fn query(&self, key: &RetrievalKey, k: usize) -> Vec<QueryHit> {
        let Some(slot) = self.slot_of(key.level) else {
            return Vec::new();
        };
        self.trees[slot]
            .knn(&key.values, k)
            .into_iter()
            .map(|(distance, e)| QueryHit {
                scan_id: e.scan_id,
                seq: e.seq,
                distance,
            })
            .collect()
    }

    /// Merge one level's pending buffer into its tree (round-robin). The tree
    /// is rebuilt from all of the level's entries, so a query never sees a
    /// partial state.
    pub fn flush(&mut self) {
        if self.levels.is_empty() {
            return;
        }
        let slot = self.flush_cursor % self.levels.len();
        self.flush_cursor += 1;
        self.flush_slot(slot);
    }

    /// Merge every level's pending buffer.
    pub fn flush_all(&mut self) {
        for slot in 0..self.levels.len() {
            self.flush_slot(slot);
        }
    }

    fn flush_slot(&mut self, slot: usize) {
        if self.pending[slot].is_empty() {
            return;
        }
        let mut data: Vec<(EntryRef, Vec<f64>)> = self.trees[slot]
            .iter()
            .map(|(e, k)| (e, k.to_vec()))
            .collect();
        data.append(&mut self.pending[slot]);
        self.trees[slot] = KdTree::build(self.key_dim, data);
    }

    /// Write all entries (flushed and pending) as a little-endian snapshot:
    /// magic `BLDB`, version u32, key_dim u32, level count u32, then per
    /// level: level u64, entry count u64, entries as (scan_id u64, seq u64,
    /// key f64 * key_dim).
    pub fn save(&self, path: &Path) -> Result<(), DatabaseError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.key_dim as u32).to_le_bytes())?;
        w.write_all(&(self.levels.len() as u32).to_le_bytes())?;
        for slot in 0..self.levels.len() {
            let flushed: Vec<(EntryRef, Vec<f64>)> = self.trees[slot]
                .iter()
                .map(|(e, k)| (e, k.to_vec()))
                .collect();
            let count = flushed.len() + self.pending[slot].len();
            w.write_all(&(self.levels[slot] as u64).to_le_bytes())?;
            w.write_all(&(count as u64).to_le_bytes())?;
            for (e, key) in flushed.iter().chain(self.pending[slot].iter()) {
                w.write_all(&e.scan_id.to_le_bytes())?;
                w.write_all(&(e.seq as u64).to_le_bytes())?;
                for v in key {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Load a snapshot written by [`LayeredDatabase::save`]. All entries are
    /// rebuilt into trees, so the loaded database is fully queryable.
    pub fn load(path: &Path, expected_key_dim: usize) -> Result<Self, DatabaseError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SNAPSHOT_MAGIC {
            return Err(DatabaseError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != SNAPSHOT_VERSION {
            return Err(DatabaseError::BadVersion(version));
        }
        let key_dim = read_u32(&mut r)? as usize;
        if key_dim != expected_key_dim {
            return Err(DatabaseError::DimensionMismatch {
                found: key_dim,
                expected: expected_key_dim,
            });
        }
        let n_levels = read_u32(&mut r)? as usize;
        let mut levels = Vec::with_capacity(n_levels);
        let mut trees = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            let level = read_u64(&mut r)? as Level;
            let count = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                let scan_id = read_u64(&mut r)?;
                let seq = read_u64(&mut r)? as usize;
                let mut key = Vec::with_capacity(key_dim);
                for _ in 0..key_dim {
                    key.push(read_f64(&mut r)?);
                }
                data.push((EntryRef { scan_id, seq }, key));
            }
            levels.push(level);
            trees.push(KdTree::build(key_dim, data));
        }
        let n = levels.len();
        Ok(Self {
            key_dim,
            levels,
            trees,
            pending: vec![Vec::new(); n],
            flush_cursor: 0,
        })
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bev::{rasterize, BevConfig, PointCloud};
    use crate::contour::{summarize, ContourPixel, RawContour};
    use approx::assert_relative_eq;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ca_fixture() -> ContourAbstraction {
        summarize(&RawContour {
            level: 2,
            seq: 1,
            pixels: vec![
                ContourPixel { x: 10, y: 10, z: 1.0 },
                ContourPixel { x: 11, y: 10, z: 1.0 },
                ContourPixel { x: 10, y: 11, z: 1.0 },
            ],
        })
    }

    #[test]
    fn anchor_key_from_counts_and_eigenvalues() {
        let mut ca = ca_fixture();
        ca.n_a = 100;
        ca.lam1 = 4.0;
        ca.lam2 = 1.0;
        let key = make_anchor_key(&ca, 150);
        assert_relative_eq!(key[0], 20.0);
        assert_relative_eq!(key[1], 10.0);
        assert_relative_eq!(key[2], 150f64.sqrt());
    }

    #[test]
    fn anchor_key_degenerate_minor_axis() {
        let mut ca = ca_fixture();
        ca.lam2 = 0.0;
        assert_eq!(make_anchor_key(&ca, 10)[1], 0.0);
    }

    fn roi_cfg() -> RetrievalConfig {
        RetrievalConfig {
            roi_radius_px: 8.0,
            roi_segments: 4,
            sigma_d: 1.0,
            base_level: 1,
            ..Default::default()
        }
    }

    fn bev_cfg() -> BevConfig {
        BevConfig {
            resolution: 1.0,
            half_extent_x: 16.0,
            half_extent_y: 16.0,
            slice_heights: vec![0.0, 1.0, 2.0, 3.0],
            sensor_height_offset: 0.0,
        }
    }

    #[test]
    fn roi_key_is_zero_without_pixels_above_base() {
        let cfg = roi_cfg();
        // All points at level 1 == base level: no contribution.
        let img = rasterize(
            &PointCloud::new(vec![[0.0, 0.0, 0.5], [2.0, 1.0, 0.2]]),
            &bev_cfg(),
        );
        let mut ca = ca_fixture();
        ca.x_c = Vector2::new(16.0, 16.0);
        assert!(make_roi_key(&img, &ca, &cfg).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boundary_pixel_splits_mass_between_adjacent_segments() {
        let cfg = roi_cfg(); // thresholds at 2, 4, 6, 8
        // One pixel at distance exactly 2 (the first threshold), one level
        // above base -> about half its unit mass on each side.
        let img = rasterize(&PointCloud::new(vec![[2.0, 0.0, 1.5]]), &bev_cfg());
        let mut ca = ca_fixture();
        ca.x_c = Vector2::new(16.0, 16.0); // grid center
        let key = make_roi_key(&img, &ca, &cfg);
        assert_relative_eq!(key[0], 0.5 - phi(-2.0), epsilon = 1e-9);
        assert_relative_eq!(key[1], phi(2.0) - 0.5, epsilon = 1e-9);
        assert_relative_eq!(key[2], phi(4.0) - phi(2.0), epsilon = 1e-9);
    }

    /// Trapezoid quadrature of the ring integral for one pixel.
    fn ring_quadrature(delta: f64, weight: f64, lo: f64, hi: f64, sigma: f64) -> f64 {
        let n = 40_000;
        let step = (hi - lo) / n as f64;
        let pdf = |x: f64| {
            let z = (x - delta) / sigma;
            (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut acc = 0.5 * (pdf(lo) + pdf(hi));
        for i in 1..n {
            acc += pdf(lo + i as f64 * step);
        }
        weight * acc * step
    }

    #[test]
    fn roi_key_matches_ring_quadrature() {
        let cfg = roi_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut pts = Vec::new();
        for _ in 0..60 {
            pts.push([
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-0.5..3.5),
            ]);
        }
        let img = rasterize(&PointCloud::new(pts), &bev_cfg());
        let mut ca = ca_fixture();
        ca.x_c = Vector2::new(16.0, 16.0);
        let key = make_roi_key(&img, &ca, &cfg);

        // Independent route: accumulate per-pixel trapezoid quadrature.
        let thresholds = cfg.segment_thresholds();
        let mut want = vec![0.0; cfg.roi_segments];
        for py in 0..img.height() {
            for px in 0..img.width() {
                let Some(h) = img.cell(px, py) else { continue };
                let Some(level) = crate::bev::level_of(h, img.config()) else {
                    continue;
                };
                if level <= cfg.base_level {
                    continue;
                }
                let delta =
                    ((px as f64 - ca.x_c.x).powi(2) + (py as f64 - ca.x_c.y).powi(2)).sqrt();
                if delta > cfg.roi_radius_px {
                    continue;
                }
                let weight = (level - cfg.base_level) as f64;
                let mut lo = 0.0;
                for (i, &d_i) in thresholds.iter().enumerate() {
                    want[i] += ring_quadrature(delta, weight, lo, d_i, cfg.sigma_d);
                    lo = d_i;
                }
            }
        }
        for (got, want) in key.iter().zip(&want) {
            assert_relative_eq!(got, want, epsilon = 1e-6);
        }
    }

    #[test]
    fn ring_mass_is_bounded_by_level_surplus() {
        let cfg = roi_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let pts: Vec<[f64; 3]> = (0..80)
            .map(|_| {
                [
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(-8.0..8.0),
                    rng.gen_range(0.0..3.5),
                ]
            })
            .collect();
        let img = rasterize(&PointCloud::new(pts), &bev_cfg());
        let mut ca = ca_fixture();
        ca.x_c = Vector2::new(16.0, 16.0);
        let key = make_roi_key(&img, &ca, &cfg);
        let mut surplus = 0.0;
        for py in 0..img.height() {
            for px in 0..img.width() {
                if let Some(h) = img.cell(px, py) {
                    if let Some(level) = crate::bev::level_of(h, img.config()) {
                        let delta = ((px as f64 - ca.x_c.x).powi(2)
                            + (py as f64 - ca.x_c.y).powi(2))
                        .sqrt();
                        if level > cfg.base_level && delta <= cfg.roi_radius_px {
                            surplus += (level - cfg.base_level) as f64;
                        }
                    }
                }
            }
        }
        let total: f64 = key.iter().sum();
        assert!(total <= surplus + 1e-9, "{total} vs {surplus}");
    }

    #[test]
    fn full_key_weighting_and_dimension() {
        let anchor = [2.0, 1.0, 3.0];
        let roi = vec![0.5, 0.25];
        let zero = make_full_key(anchor, &roi, 0.0, 2, 1);
        assert_eq!(zero.values, vec![0.0, 0.0, 0.0, 0.5, 0.25]);
        let plain = make_full_key(anchor, &roi, 1.0, 2, 1);
        assert_eq!(plain.values, vec![2.0, 1.0, 3.0, 0.5, 0.25]);
        assert_eq!(plain.values.len(), 3 + roi.len());
    }

    fn random_key(rng: &mut ChaCha8Rng, level: Level, seq: usize, dim: usize) -> RetrievalKey {
        RetrievalKey {
            level,
            seq,
            values: (0..dim).map(|_| rng.gen_range(0.0..50.0)).collect(),
        }
    }

    #[test]
    fn insert_is_invisible_until_flush() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut db = LayeredDatabase::new(vec![2], 10);
        let key = random_key(&mut rng, 2, 1, 10);
        db.insert(0, std::slice::from_ref(&key));
        assert!(db.query(&key, 5).is_empty());
        db.flush_all();
        let hits = db.query(&key, 5);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].scan_id, 0);
        assert_eq!(hits[0].distance, 0.0);
    }

    #[test]
    fn inserting_no_keys_is_a_noop() {
        let mut db = LayeredDatabase::new(vec![2], 10);
        db.insert(3, &[]);
        db.flush_all();
        assert_eq!(db.len(), 0);
    }

    #[test]
    fn queries_stay_within_their_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut db = LayeredDatabase::new(vec![2, 3], 4);
        let k2 = random_key(&mut rng, 2, 1, 4);
        let mut k3 = k2.clone();
        k3.level = 3;
        db.insert(0, &[k2.clone()]);
        db.insert(1, &[k3.clone()]);
        db.flush_all();
        let hits2 = db.query(&k2, 10);
        assert_eq!(hits2.len(), 1);
        assert_eq!(hits2[0].scan_id, 0);
        let hits3 = db.query(&k3, 10);
        assert_eq!(hits3.len(), 1);
        assert_eq!(hits3[0].scan_id, 1);
    }

    #[test]
    fn staggered_flush_visits_levels_round_robin() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let levels = vec![2, 3, 4];
        let mut db = LayeredDatabase::new(levels.clone(), 4);
        let keys: Vec<RetrievalKey> = levels
            .iter()
            .map(|&l| random_key(&mut rng, l, 1, 4))
            .collect();
        db.insert(0, &keys);
        assert_eq!(db.len(), 0);
        for (i, key) in keys.iter().enumerate() {
            db.flush();
            assert_eq!(db.query(key, 1).len(), 1, "level visible after flush {i}");
        }
        assert_eq!(db.pending_len(), 0);
    }

    #[test]
    fn flush_on_empty_buffer_is_noop() {
        let mut db = LayeredDatabase::new(vec![2], 4);
        db.flush();
        db.flush_all();
        assert_eq!(db.len(), 0);
    }

    fn linear_scan(
        data: &[(u64, usize, Vec<f64>)],
        query: &[f64],
        k: usize,
    ) -> Vec<(f64, u64, usize)> {
        let mut all: Vec<(f64, u64, usize)> = data
            .iter()
            .map(|(id, seq, key)| {
                let d2: f64 = key
                    .iter()
                    .zip(query)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d2.sqrt(), *id, *seq)
            })
            .collect();
        all.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 10;
        let mut db = LayeredDatabase::new(vec![2], dim);
        let mut data = Vec::new();
        for scan in 0..500u64 {
            let key = random_key(&mut rng, 2, 1, dim);
            data.push((scan, 1usize, key.values.clone()));
            db.insert(scan, &[key]);
            if scan % 37 == 0 {
                db.flush(); // exercise incremental rebuilds
            }
        }
        db.flush_all();
        for _ in 0..50 {
            let q = random_key(&mut rng, 2, 1, dim);
            let hits = db.query(&q, 20);
            let want = linear_scan(&data, &q.values, 20);
            assert_eq!(hits.len(), want.len());
            for (h, w) in hits.iter().zip(&want) {
                assert_eq!((h.scan_id, h.seq), (w.1, w.2));
                assert_relative_eq!(h.distance, w.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn empty_database_returns_nothing() {
        let db = LayeredDatabase::new(vec![2], 4);
        let key = RetrievalKey {
            level: 2,
            seq: 1,
            values: vec![0.0; 4],
        };
        assert!(db.query(&key, 10).is_empty());
    }

    #[test]
    fn snapshot_round_trip_preserves_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 6;
        let mut db = LayeredDatabase::new(vec![2, 3], dim);
        for scan in 0..60u64 {
            let level = if scan % 2 == 0 { 2 } else { 3 };
            db.insert(scan, &[random_key(&mut rng, level, 1, dim)]);
        }
        db.flush(); // leave some entries pending on purpose

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.snapshot");
        db.save(&path).unwrap();
        let loaded = LayeredDatabase::load(&path, dim).unwrap();
        assert_eq!(loaded.len(), 60); // pending entries included and queryable

        let mut probe = db;
        probe.flush_all();
        for _ in 0..10 {
            let q = random_key(&mut rng, 2, 1, dim);
            assert_eq!(probe.query(&q, 7), loaded.query(&q, 7));
        }
    }

    #[test]
    fn snapshot_rejects_wrong_dimension_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.snapshot");
        let db = LayeredDatabase::new(vec![2], 5);
        db.save(&path).unwrap();
        assert!(matches!(
            LayeredDatabase::load(&path, 9),
            Err(DatabaseError::DimensionMismatch { found: 5, expected: 9 })
        ));
        std::fs::write(&path, b"XXXXjunk").unwrap();
        assert!(matches!(
            LayeredDatabase::load(&path, 5),
            Err(DatabaseError::BadMagic)
        ));
    }
}
