//! Per-scan orchestration: preprocess, retrieve, check, optimize, insert.
//!
//! Every scan is first compressed into a [`ScanDescriptor`]. Loop detection
//! queries the layered database with the descriptor's keys, drops candidates
//! inside the exclusion window, verifies the surviving anchor pairs with the
//! discrete constellation checks, and refines the best few with the GMM
//! correlation optimization; the candidate with the highest optimized
//! correlation wins. Scans enter the database only after their own query, so
//! a scan can never match itself.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::{rasterize, slice, BevConfig, BevImage, Level, PointCloud};
use crate::constellation::{
    build_constellation, check_anchor_sim, check_pairwise, estimate_transform, pair_by_distance,
    vote_rotation, Constellation, ConstellationConfig, Se2Transform, ThresholdSet,
};
use crate::contour::{extract_contours, rank_contours, summarize, ContourAbstraction, ContourConfig};
use crate::gmm::{build_gmm, optimize, Gmm25D, GmmConfig};
use crate::retrieval::{build_keys, LayeredDatabase, RetrievalConfig, RetrievalKey};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub bev: BevConfig,
    pub contour: ContourConfig,
    pub constellation: ConstellationConfig,
    pub thresholds: ThresholdSet,
    pub gmm: GmmConfig,
    pub retrieval: RetrievalConfig,
    /// Frames right before the query that are ineligible as candidates.
    pub exclusion_window: u64,
    /// Deduplicated retrieval candidates entering the constellation checks.
    pub max_candidates: usize,
    /// Constellation survivors entering the correlation optimization,
    /// ranked by surviving pair count.
    pub max_gmm_candidates: usize,
    /// Evaluate candidates of one query concurrently.
    pub parallel_candidates: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            bev: BevConfig::default(),
            contour: ContourConfig::default(),
            constellation: ConstellationConfig::default(),
            thresholds: ThresholdSet::default(),
            gmm: GmmConfig::default(),
            retrieval: RetrievalConfig::default(),
            exclusion_window: 150,
            max_candidates: 200,
            max_gmm_candidates: 10,
            parallel_candidates: false,
        }
    }
}

/// Everything the pipeline derives from one scan.
#[derive(Debug, Clone)]
pub struct ScanDescriptor {
    pub scan_id: u64,
    pub bev: BevImage,
    /// Ranked contour abstractions per level (index 0 is level 1).
    pub cas: Vec<Vec<ContourAbstraction>>,
    /// Constellations of the indexed anchors, keyed by (level, seq).
    pub constellations: Vec<((Level, usize), Constellation)>,
    pub keys: Vec<RetrievalKey>,
    /// Mixture of the selected levels with its cached self term; `None` when
    /// those levels hold no contours.
    pub gmm: Option<Gmm25D>,
}

impl ScanDescriptor {
    pub fn constellation(&self, level: Level, seq: usize) -> Option<&Constellation> {
        self.constellations
            .iter()
            .find(|((l, s), _)| *l == level && *s == seq)
            .map(|(_, c)| c)
    }

    pub fn total_contours(&self) -> usize {
        self.cas.iter().map(Vec::len).sum()
    }
}

/// Wall-clock stage durations of one processed scan, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub gen_contours_ms: f64,
    pub retrieval_ms: f64,
    pub cac_check_ms: f64,
    pub l2_optim_ms: f64,
    pub update_db_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.gen_contours_ms
            + self.retrieval_ms
            + self.cac_check_ms
            + self.l2_optim_ms
            + self.update_db_ms
    }
}

/// A detected loop: the best candidate with its optimized correlation and
/// the planar pose mapping the candidate frame into the query frame,
/// meters and radians.
#[derive(Debug, Clone)]
pub struct LoopResult {
    pub query_id: u64,
    pub candidate_id: u64,
    pub score: f64,
    pub pose: Se2Transform,
    pub stage_timings: StageTimings,
}

/// Candidate counts through the detection funnel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FunnelStats {
    pub retrieved: usize,
    pub deduped: usize,
    pub cac_passed: usize,
    pub gmm_evaluated: usize,
}

/// Deterministic per-scan preprocessing: projection, slicing, contour
/// extraction and ranking, anchor constellations, retrieval keys, and the
/// scan mixture with its cached self term.
pub fn preprocess(scan_id: u64, cloud: &PointCloud, cfg: &PipelineConfig) -> ScanDescriptor {
    let bev = rasterize(cloud, &cfg.bev);
    let mut all_cas = Vec::new();
    for level in 1..=cfg.bev.num_levels() {
        let mask = slice(&bev, level);
        for raw in extract_contours(&mask, &bev, cfg.contour.min_pixels) {
            all_cas.push(summarize(&raw));
        }
    }
    let cas = rank_contours(all_cas, cfg.bev.num_levels());

    let keys = build_keys(&bev, &cas, &cfg.retrieval);
    let constellations = keys
        .iter()
        .map(|key| {
            let anchor = &cas[key.level - 1][key.seq - 1];
            (
                (key.level, key.seq),
                build_constellation(anchor, &cas, &cfg.constellation),
            )
        })
        .collect();

    let gmm = build_gmm(&cas, &cfg.gmm.levels, &cfg.gmm).ok();

    ScanDescriptor {
        scan_id,
        bev,
        cas,
        constellations,
        keys,
        gmm,
    }
}

/// What past scans keep for matching: their anchor constellations and mixture.
#[derive(Debug)]
struct HistoryEntry {
    constellations: Vec<((Level, usize), Constellation)>,
    gmm: Option<Gmm25D>,
}

impl HistoryEntry {
    fn constellation(&self, level: Level, seq: usize) -> Option<&Constellation> {
        self.constellations
            .iter()
            .find(|((l, s), _)| *l == level && *s == seq)
            .map(|(_, c)| c)
    }
}

/// Match-side store of processed scans. The BEV image and keys of a
/// descriptor are not needed after insertion and are dropped here.
#[derive(Debug, Default)]
pub struct History {
    entries: HashMap<u64, HistoryEntry>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, scan_id: u64) -> bool {
        self.entries.contains_key(&scan_id)
    }

    pub fn insert(&mut self, desc: ScanDescriptor) {
        self.entries.insert(
            desc.scan_id,
            HistoryEntry {
                constellations: desc.constellations,
                gmm: desc.gmm,
            },
        );
    }
}

/// Buffer the descriptor's keys for retrieval. Keys become queryable with the
/// database's batched flush cadence.
pub fn add_to_database(desc: &ScanDescriptor, db: &mut LayeredDatabase) {
    db.insert(desc.scan_id, &desc.keys);
}

struct CandidateAnchor {
    key_distance: f64,
    scan_id: u64,
    level: Level,
    cand_seq: usize,
    query_seq: usize,
}

struct CacSurvivor<'a> {
    scan_id: u64,
    survivors: usize,
    theta_hat: f64,
    key_distance: f64,
    query_const: &'a Constellation,
    cand_const: &'a Constellation,
    cand_gmm: Option<&'a Gmm25D>,
}

/// Run loop detection for a preprocessed scan against the database and the
/// history of past scans. Returns the candidate with the highest optimized
/// correlation, or `None` when nothing survives the checks; the caller
/// thresholds the returned score. The result pose is in meters and radians.
pub fn detect_loop(
    desc: &ScanDescriptor,
    db: &LayeredDatabase,
    history: &History,
    cfg: &PipelineConfig,
) -> Option<LoopResult> {
    detect_loop_detailed(desc, db, history, cfg).0
}

/// [`detect_loop`] plus funnel statistics, for diagnostics and tests.
pub fn detect_loop_detailed(
    desc: &ScanDescriptor,
    db: &LayeredDatabase,
    history: &History,
    cfg: &PipelineConfig,
) -> (Option<LoopResult>, FunnelStats) {
    let mut stats = FunnelStats::default();
    let mut timings = StageTimings::default();

    // Retrieval: query every key, drop excluded frames, deduplicate by scan
    // keeping the smallest key distance, cap the candidate budget.
    let t0 = Instant::now();
    let mut hits: Vec<CandidateAnchor> = Vec::new();
    for key in &desc.keys {
        for hit in db.query(key, cfg.retrieval.knn) {
            if hit.scan_id >= desc.scan_id {
                continue;
            }
            if desc.scan_id - hit.scan_id <= cfg.exclusion_window {
                continue;
            }
            hits.push(CandidateAnchor {
                key_distance: hit.distance,
                scan_id: hit.scan_id,
                level: key.level,
                cand_seq: hit.seq,
                query_seq: key.seq,
            });
        }
    }
    stats.retrieved = hits.len();
    hits.sort_by(|a, b| {
        a.key_distance
            .total_cmp(&b.key_distance)
            .then_with(|| a.scan_id.cmp(&b.scan_id))
            .then_with(|| a.level.cmp(&b.level))
            .then_with(|| a.cand_seq.cmp(&b.cand_seq))
            .then_with(|| a.query_seq.cmp(&b.query_seq))
    });
    // Group anchor-pair hypotheses by candidate scan; scans are budgeted in
    // order of their best key distance.
    let mut scan_order: Vec<u64> = Vec::new();
    let mut by_scan: HashMap<u64, Vec<CandidateAnchor>> = HashMap::new();
    for hit in hits {
        let slot = by_scan.entry(hit.scan_id).or_default();
        if slot.is_empty() {
            scan_order.push(hit.scan_id);
        }
        slot.push(hit);
    }
    scan_order.truncate(cfg.max_candidates);
    stats.deduped = scan_order.len();
    timings.retrieval_ms = t0.elapsed().as_secs_f64() * 1e3;

    // Constellation checks per candidate anchor pair; a scan survives with
    // its best-supported passing pair.
    let t1 = Instant::now();
    let mut survivors: Vec<CacSurvivor> = Vec::new();
    for scan_id in &scan_order {
        let Some(entry) = history.entries.get(scan_id) else {
            continue;
        };
        let mut best: Option<CacSurvivor> = None;
        for cand in &by_scan[scan_id] {
            let Some(query_const) = desc.constellation(cand.level, cand.query_seq) else {
                continue;
            };
            let Some(cand_const) = entry.constellation(cand.level, cand.cand_seq) else {
                continue;
            };
            if !check_anchor_sim(&query_const.anchor, &cand_const.anchor, &cfg.thresholds) {
                continue;
            }
            let pairs = pair_by_distance(query_const, cand_const, &cfg.thresholds);
            let vote = vote_rotation(&pairs, cfg.constellation.rotation_window_rad);
            let (pass, surviving) = check_pairwise(
                query_const,
                cand_const,
                &vote,
                &cfg.thresholds,
                cfg.constellation.min_pairs,
            );
            if !pass {
                continue;
            }
            let candidate = CacSurvivor {
                scan_id: *scan_id,
                survivors: surviving.len(),
                theta_hat: vote.theta_hat,
                key_distance: cand.key_distance,
                query_const,
                cand_const,
                cand_gmm: entry.gmm.as_ref(),
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    candidate.survivors > b.survivors
                        || (candidate.survivors == b.survivors
                            && candidate.key_distance < b.key_distance)
                }
            };
            if better {
                best = Some(candidate);
            }
        }
        if let Some(b) = best {
            survivors.push(b);
        }
    }
    stats.cac_passed = survivors.len();
    survivors.sort_by(|a, b| {
        b.survivors
            .cmp(&a.survivors)
            .then_with(|| a.key_distance.total_cmp(&b.key_distance))
            .then_with(|| a.scan_id.cmp(&b.scan_id))
    });
    survivors.truncate(cfg.max_gmm_candidates);
    timings.cac_check_ms = t1.elapsed().as_secs_f64() * 1e3;

    // Correlation optimization, seeded by the constellation transform.
    let t2 = Instant::now();
    let query_gmm = desc.gmm.as_ref();
    let optimize_one = |s: &CacSurvivor| -> Option<(u64, crate::gmm::CorrelationResult)> {
        let g1 = query_gmm?;
        let g2 = s.cand_gmm?;
        let t0 = estimate_transform(&s.query_const.anchor, &s.cand_const.anchor, s.theta_hat);
        Some((s.scan_id, optimize(g1, g2, &t0, &cfg.gmm)))
    };
    let results: Vec<(u64, crate::gmm::CorrelationResult)> = if cfg.parallel_candidates {
        survivors.par_iter().filter_map(optimize_one).collect()
    } else {
        survivors.iter().filter_map(optimize_one).collect()
    };
    stats.gmm_evaluated = results.len();
    let best = results.into_iter().max_by(|a, b| {
        a.1.score
            .total_cmp(&b.1.score)
            .then_with(|| b.0.cmp(&a.0)) // equal scores: prefer the older scan
    });
    timings.l2_optim_ms = t2.elapsed().as_secs_f64() * 1e3;

    let result = best.map(|(candidate_id, r)| LoopResult {
        query_id: desc.scan_id,
        candidate_id,
        score: r.score,
        pose: pixel_to_metric_pose(&r.transform, &cfg.bev),
        stage_timings: timings,
    });
    (result, stats)
}

/// Re-express a transform estimated on grid pixel coordinates (origin at the
/// grid corner) in the sensor-centered metric frame. With the grid center `c`
/// the pixel mapping is `p_px = p_m / res + c`, so the metric translation is
/// `res * (t_px + (R - I) c)` while the rotation carries over.
pub fn pixel_to_metric_pose(t_px: &Se2Transform, bev: &BevConfig) -> Se2Transform {
    let c = nalgebra::Vector2::new(bev.center_col() as f64, bev.center_row() as f64);
    let t_m = (t_px.t + t_px.rotation() * c - c) * bev.resolution;
    Se2Transform::new(t_px.theta, t_m)
}

/// Online driver owning the database, the history, and the flush cadence.
pub struct Pipeline {
    cfg: PipelineConfig,
    db: LayeredDatabase,
    history: History,
    processed: u64,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        cfg.bev.validate().expect("invalid BEV configuration");
        let db = LayeredDatabase::new(cfg.retrieval.anchor_levels.clone(), cfg.retrieval.key_dim());
        Self {
            cfg,
            db,
            history: History::new(),
            processed: 0,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn database(&self) -> &LayeredDatabase {
        &self.db
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    /// Query-then-insert processing of one scan. The loop result, if any,
    /// carries the five stage timings of this call.
    pub fn process_scan(
        &mut self,
        scan_id: u64,
        cloud: &PointCloud,
    ) -> (Option<LoopResult>, StageTimings) {
        let t0 = Instant::now();
        let desc = preprocess(scan_id, cloud, &self.cfg);
        let gen_contours_ms = t0.elapsed().as_secs_f64() * 1e3;

        let (mut result, _) = detect_loop_detailed(&desc, &self.db, &self.history, &self.cfg);

        let t1 = Instant::now();
        add_to_database(&desc, &mut self.db);
        self.history.insert(desc);
        self.processed += 1;
        if self.cfg.retrieval.flush_every > 0 && self.processed % self.cfg.retrieval.flush_every == 0
        {
            self.db.flush();
        }
        let update_db_ms = t1.elapsed().as_secs_f64() * 1e3;

        let mut timings = result
            .as_ref()
            .map(|r| r.stage_timings)
            .unwrap_or_default();
        timings.gen_contours_ms = gen_contours_ms;
        timings.update_db_ms = update_db_ms;
        if let Some(r) = result.as_mut() {
            r.stage_timings = timings;
        }
        (result, timings)
    }
}
