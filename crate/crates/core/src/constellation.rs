//! Constellations of contours and the discrete similarity checks.
//!
//! A constellation is an anchor contour abstraction plus nearby peripheral
//! abstractions, each recorded by its distance and azimuth relative to the
//! anchor. Matching two constellations runs three sequential checks: anchor
//! similarity on five scalars, a distance-consensus pairing via per-level
//! bucket bit-vectors followed by rotation voting, and a pairwise similarity
//! check on the surviving peripheral pairs. A passing match yields a planar
//! transform estimate that seeds the continuous optimization stage.

use std::collections::HashSet;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::bev::Level;
use crate::contour::ContourAbstraction;

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(std::f64::consts::TAU);
    if w > std::f64::consts::PI {
        w - std::f64::consts::TAU
    } else {
        w
    }
}

/// Rigid planar transform: rotation by `theta` then translation by `t`.
/// The unit of `t` (pixels or meters) is documented at each use site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se2Transform {
    pub theta: f64,
    pub t: Vector2<f64>,
}

impl Se2Transform {
    pub fn identity() -> Self {
        Self {
            theta: 0.0,
            t: Vector2::zeros(),
        }
    }

    pub fn new(theta: f64, t: Vector2<f64>) -> Self {
        Self {
            theta: wrap_angle(theta),
            t,
        }
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    pub fn apply(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.rotation() * p + self.t
    }
}

/// Percentage and absolute thresholds for one scalar check.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScalarThreshold {
    /// Relative difference bound, in (0, 1).
    pub t_p: f64,
    /// Absolute difference bound, in the scalar's units.
    pub t_a: f64,
}

impl ScalarThreshold {
    pub const fn new(t_p: f64, t_a: f64) -> Self {
        Self { t_p, t_a }
    }
}

/// Thresholds for the five checked scalars plus the peripheral distance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSet {
    pub n_a: ScalarThreshold,
    pub h_m: ScalarThreshold,
    pub ecc: ScalarThreshold,
    pub lam1: ScalarThreshold,
    pub lam2: ScalarThreshold,
    pub dist: ScalarThreshold,
}

impl Default for ThresholdSet {
    fn default() -> Self {
        Self {
            n_a: ScalarThreshold::new(0.25, 6.0),
            h_m: ScalarThreshold::new(0.25, 0.3),
            ecc: ScalarThreshold::new(0.5, 0.75),
            lam1: ScalarThreshold::new(0.3, 1.0),
            lam2: ScalarThreshold::new(0.3, 1.0),
            dist: ScalarThreshold::new(0.1, 1.0),
        }
    }
}

/// Binary similarity check on one scalar: passes when either the relative
/// difference is under `t_p` or the absolute difference is under `t_a`.
/// The relative branch only applies when the larger value is positive, so
/// scalars that may go negative (mean height) fall back to the absolute test.
pub fn similarity_check(x1: f64, x2: f64, th: &ScalarThreshold) -> bool {
    let diff = (x1 - x2).abs();
    if diff < th.t_a {
        return true;
    }
    let m = x1.max(x2);
    m > 0.0 && diff / m < th.t_p
}

fn sc_five_scalars(a: &ContourAbstraction, b: &ContourAbstraction, th: &ThresholdSet) -> bool {
    similarity_check(a.n_a as f64, b.n_a as f64, &th.n_a)
        && similarity_check(a.h_m, b.h_m, &th.h_m)
        && similarity_check(a.ecc_feat, b.ecc_feat, &th.ecc)
        && similarity_check(a.lam1, b.lam1, &th.lam1)
        && similarity_check(a.lam2, b.lam2, &th.lam2)
}

/// Anchor similarity: both abstractions must sit on the same level and pass
/// the five-scalar check.
pub fn check_anchor_sim(
    a: &ContourAbstraction,
    b: &ContourAbstraction,
    th: &ThresholdSet,
) -> bool {
    a.level == b.level && sc_five_scalars(a, b, th)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ConstellationConfig {
    /// Levels whose top contours become peripherals.
    pub peripheral_levels: Vec<Level>,
    /// Peripherals taken per level.
    pub top_k_per_level: usize,
    /// Peripherals beyond this anchor distance are skipped, pixels.
    pub max_radius_px: f64,
    /// Distance bucket width, pixels.
    pub bucket_width_px: f64,
    /// Distances within this margin of a bucket boundary also set the
    /// adjacent bucket's bit on the query side.
    pub bucket_boundary_margin_px: f64,
    /// Rotation voting window, radians.
    pub rotation_window_rad: f64,
    /// Minimum surviving peripheral pairs for a constellation match.
    pub min_pairs: usize,
}

impl Default for ConstellationConfig {
    fn default() -> Self {
        Self {
            peripheral_levels: vec![2, 3, 4, 5],
            top_k_per_level: 10,
            max_radius_px: 100.0,
            bucket_width_px: 2.0,
            bucket_boundary_margin_px: 0.3,
            rotation_window_rad: 10f64.to_radians(),
            min_pairs: 4,
        }
    }
}

const BUCKETS_PER_LEVEL: u32 = 64;

/// Per-level blocks of 64 distance-bucket bits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DistBits {
    blocks: Vec<u64>,
}

impl DistBits {
    fn new(num_blocks: usize) -> Self {
        Self {
            blocks: vec![0; num_blocks],
        }
    }

    fn set(&mut self, block: usize, bucket: u32) {
        self.blocks[block] |= 1u64 << bucket;
    }

    pub fn and(&self, other: &Self) -> Self {
        debug_assert_eq!(self.blocks.len(), other.blocks.len());
        Self {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a & b)
                .collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.blocks.iter().all(|&b| b == 0)
    }

    pub fn count_ones(&self) -> u32 {
        self.blocks.iter().map(|b| b.count_ones()).sum()
    }

    fn iter_set(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.blocks.iter().enumerate().flat_map(|(bi, &bits)| {
            (0..BUCKETS_PER_LEVEL).filter_map(move |k| {
                if bits & (1u64 << k) != 0 {
                    Some((bi, k))
                } else {
                    None
                }
            })
        })
    }
}

/// A peripheral contour recorded relative to its anchor.
#[derive(Debug, Clone)]
pub struct Peripheral {
    pub ca: ContourAbstraction,
    /// Distance of the peripheral's center to the anchor's, pixels.
    pub dist: f64,
    /// Azimuth of the peripheral measured at the anchor, radians in (-pi, pi].
    pub azimuth: f64,
    /// Index of the peripheral's level block in the bit-vector.
    block: usize,
    /// Distance bucket.
    bucket: u32,
    /// Buckets set on the query side: the exact bucket plus an adjacent one
    /// when the distance is near a boundary.
    query_buckets: (u32, Option<u32>),
}

impl Peripheral {
    fn query_has(&self, bucket: u32) -> bool {
        self.query_buckets.0 == bucket || self.query_buckets.1 == Some(bucket)
    }
}

/// Anchor contour plus its peripherals and their distance bit-vectors.
#[derive(Debug, Clone)]
pub struct Constellation {
    pub anchor: ContourAbstraction,
    pub peripherals: Vec<Peripheral>,
    /// Exact-bucket bits (storage side).
    pub dist_bits: DistBits,
    /// Bits with boundary-adjacent padding (query side).
    pub query_bits: DistBits,
}

fn bucket_of(dist: f64, cfg: &ConstellationConfig) -> u32 {
    ((dist / cfg.bucket_width_px).floor() as i64).clamp(0, BUCKETS_PER_LEVEL as i64 - 1) as u32
}

fn query_buckets_of(dist: f64, bucket: u32, cfg: &ConstellationConfig) -> (u32, Option<u32>) {
    let w = cfg.bucket_width_px;
    let lo = bucket as f64 * w;
    let hi = lo + w;
    let extra = if dist - lo < cfg.bucket_boundary_margin_px && bucket > 0 {
        Some(bucket - 1)
    } else if hi - dist < cfg.bucket_boundary_margin_px && bucket + 1 < BUCKETS_PER_LEVEL {
        Some(bucket + 1)
    } else {
        None
    };
    (bucket, extra)
}

/// Build the constellation of `anchor`: the top contours per configured level
/// within the radius, excluding the anchor itself. `ranked` holds the ranked
/// abstractions per level (index 0 is level 1).
pub fn build_constellation(
    anchor: &ContourAbstraction,
    ranked: &[Vec<ContourAbstraction>],
    cfg: &ConstellationConfig,
) -> Constellation {
    let n_blocks = cfg.peripheral_levels.len();
    let mut peripherals = Vec::new();
    let mut dist_bits = DistBits::new(n_blocks);
    let mut query_bits = DistBits::new(n_blocks);

    for (block, &level) in cfg.peripheral_levels.iter().enumerate() {
        let Some(level_cas) = ranked.get(level - 1) else {
            continue;
        };
        for ca in level_cas.iter().take(cfg.top_k_per_level) {
            if ca.level == anchor.level && ca.seq == anchor.seq {
                continue;
            }
            let d_vec = ca.x_c - anchor.x_c;
            let dist = d_vec.norm();
            if dist > cfg.max_radius_px {
                continue;
            }
            let bucket = bucket_of(dist, cfg);
            let query_buckets = query_buckets_of(dist, bucket, cfg);
            dist_bits.set(block, bucket);
            query_bits.set(block, query_buckets.0);
            if let Some(extra) = query_buckets.1 {
                query_bits.set(block, extra);
            }
            peripherals.push(Peripheral {
                ca: ca.clone(),
                dist,
                azimuth: d_vec.y.atan2(d_vec.x),
                block,
                bucket,
                query_buckets,
            });
        }
    }

    Constellation {
        anchor: anchor.clone(),
        peripherals,
        dist_bits,
        query_bits,
    }
}

/// One candidate peripheral pairing: indices into the two constellations'
/// peripheral lists and their wrapped azimuth difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidatePair {
    pub idx1: usize,
    pub idx2: usize,
    pub azimuth_diff: f64,
}

/// Candidate pairs sorted ascending by azimuth difference.
#[derive(Debug, Clone, Default)]
pub struct CandidatePairList {
    pub pairs: Vec<CandidatePair>,
}

/// Pair peripherals of the query constellation `c1` against the stored
/// constellation `c2` through the bit-wise AND of their distance bit-vectors,
/// keeping pairs whose exact distances also pass the distance check.
pub fn pair_by_distance(
    c1: &Constellation,
    c2: &Constellation,
    th: &ThresholdSet,
) -> CandidatePairList {
    let and = c1.query_bits.and(&c2.dist_bits);
    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut pairs = Vec::new();
    for (block, bucket) in and.iter_set() {
        for (i, p1) in c1.peripherals.iter().enumerate() {
            if p1.block != block || !p1.query_has(bucket) {
                continue;
            }
            for (j, p2) in c2.peripherals.iter().enumerate() {
                if p2.block != block || p2.bucket != bucket {
                    continue;
                }
                if !similarity_check(p1.dist, p2.dist, &th.dist) {
                    continue;
                }
                if seen.insert((i, j)) {
                    pairs.push(CandidatePair {
                        idx1: i,
                        idx2: j,
                        azimuth_diff: wrap_angle(p1.azimuth - p2.azimuth),
                    });
                }
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.azimuth_diff
            .total_cmp(&b.azimuth_diff)
            .then_with(|| a.idx1.cmp(&b.idx1))
            .then_with(|| a.idx2.cmp(&b.idx2))
    });
    CandidatePairList { pairs }
}

/// Outcome of rotation voting: the consensus angle and the supporting pairs.
#[derive(Debug, Clone, Default)]
pub struct RotationVote {
    pub theta_hat: f64,
    pub supporters: Vec<CandidatePair>,
}

fn circular_mean(diffs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for d in diffs {
        s += d.sin();
        c += d.cos();
    }
    wrap_angle(s.atan2(c))
}

/// One-pass sliding-window vote over the azimuth-sorted pair list. The window
/// position covering the most pairs wins; wrap-around is handled by extending
/// the sorted list shifted by 2*pi. `theta_hat` is the circular mean of the
/// supporters; ties go to the placement with the smaller |theta_hat|.
pub fn vote_rotation(list: &CandidatePairList, window: f64) -> RotationVote {
    let n = list.pairs.len();
    if n == 0 {
        return RotationVote::default();
    }
    let mut diffs: Vec<f64> = list.pairs.iter().map(|p| p.azimuth_diff).collect();
    debug_assert!(
        diffs.windows(2).all(|w| w[0] <= w[1]),
        "pairs must be sorted"
    );
    for k in 0..n {
        let shifted = diffs[k] + std::f64::consts::TAU;
        diffs.push(shifted);
    }

    let mut best: Vec<(usize, usize)> = Vec::new(); // (start, end) placements
    let mut best_count = 0usize;
    let mut j = 0usize;
    for i in 0..n {
        if j < i {
            j = i;
        }
        while j < i + n && diffs[j] <= diffs[i] + window {
            j += 1;
        }
        let count = j - i;
        if count > best_count {
            best_count = count;
            best.clear();
            best.push((i, j));
        } else if count == best_count {
            best.push((i, j));
        }
    }

    let mut chosen: Option<(f64, (usize, usize))> = None;
    for &(i, j) in &best {
        let theta = circular_mean((i..j).map(|k| diffs[k]));
        let better = match &chosen {
            None => true,
            Some((t, _)) => theta.abs() < t.abs(),
        };
        if better {
            chosen = Some((theta, (i, j)));
        }
    }
    let (theta_hat, (i, j)) = chosen.expect("non-empty placements");
    let supporters = (i..j).map(|k| list.pairs[k % n]).collect();
    RotationVote {
        theta_hat,
        supporters,
    }
}

/// Five-scalar check on every supporting pair, then a one-pair-per-peripheral
/// greedy pass ordered by agreement with the voted rotation. Passes when at
/// least `min_pairs` pairs survive.
pub fn check_pairwise(
    c1: &Constellation,
    c2: &Constellation,
    vote: &RotationVote,
    th: &ThresholdSet,
    min_pairs: usize,
) -> (bool, Vec<CandidatePair>) {
    let mut checked: Vec<CandidatePair> = vote
        .supporters
        .iter()
        .filter(|p| sc_five_scalars(&c1.peripherals[p.idx1].ca, &c2.peripherals[p.idx2].ca, th))
        .copied()
        .collect();
    checked.sort_by(|a, b| {
        let da = wrap_angle(a.azimuth_diff - vote.theta_hat).abs();
        let db = wrap_angle(b.azimuth_diff - vote.theta_hat).abs();
        da.total_cmp(&db)
            .then_with(|| a.idx1.cmp(&b.idx1))
            .then_with(|| a.idx2.cmp(&b.idx2))
    });
    let mut used1 = HashSet::new();
    let mut used2 = HashSet::new();
    let mut survivors = Vec::new();
    for p in checked {
        if used1.contains(&p.idx1) || used2.contains(&p.idx2) {
            continue;
        }
        used1.insert(p.idx1);
        used2.insert(p.idx2);
        survivors.push(p);
    }
    survivors.sort_by(|a, b| a.azimuth_diff.total_cmp(&b.azimuth_diff));
    (survivors.len() >= min_pairs, survivors)
}

/// Transform mapping the second constellation's frame onto the first's with
/// the anchor centers coincident: rotation by `theta_hat` and translation
/// `t = x_c1 - R * x_c2` (pixels).
pub fn estimate_transform(
    anchor1: &ContourAbstraction,
    anchor2: &ContourAbstraction,
    theta_hat: f64,
) -> Se2Transform {
    let t = Se2Transform::new(theta_hat, Vector2::zeros());
    Se2Transform::new(theta_hat, anchor1.x_c - t.rotation() * anchor2.x_c)
}
