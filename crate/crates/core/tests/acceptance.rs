//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Every tolerance is pinned here. Oracles are independent of the code paths
//! they check: grid quadrature for the Gaussian integrals, central finite
//! differences for the gradient, union-find for connected components, linear
//! scan for the nearest-neighbor queries, and exhaustive enumeration for the
//! constellation pairing and voting.
//!
//! Criterion 9 reproduces a real sequence and only runs when the environment
//! points at a KITTI download (see the README); it is skipped otherwise.

use std::time::Instant;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bevloop::bev::{rasterize, slice, BevConfig, Level, PointCloud};
use bevloop::cli::{cmd_eval, cmd_run, RunConfig};
use bevloop::constellation::{
    build_constellation, pair_by_distance, similarity_check, vote_rotation, wrap_angle,
    Constellation, ConstellationConfig, Se2Transform, ThresholdSet,
};
use bevloop::contour::{extract_contours, summarize, ContourPixel, RawContour};
use bevloop::dataset::{generate_dataset, relative_pose, se2_projection, SyntheticDatasetParams};
use bevloop::eval::{
    classify, mpe_stats, pr_curve, EvalConfig, Outcome, PredictedLoop, Prediction, PredictionLog,
};
use bevloop::gmm::{
    active_pairs, correlation, gauss_product_integral, objective, objective_gradient, optimize,
    Gmm25D, GmmConfig,
};
use bevloop::pipeline::{preprocess, Pipeline, PipelineConfig};
use bevloop::retrieval::{LayeredDatabase, RetrievalKey};

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} - {name} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {name}: {detail}");
}

fn random_spd(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Matrix2<f64> {
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let l1: f64 = rng.gen_range(lo..hi);
    let l2: f64 = rng.gen_range(lo..l1.max(lo + 1e-9));
    let (s, c) = phi.sin_cos();
    let rot = Matrix2::new(c, -s, s, c);
    rot * Matrix2::new(l1, 0.0, 0.0, l2) * rot.transpose()
}

fn random_mixture(rng: &mut ChaCha8Rng, levels: &[Level], per_level: usize) -> Gmm25D {
    let raw = levels
        .iter()
        .map(|_| {
            (0..per_level)
                .map(|_| {
                    (
                        rng.gen_range(5.0..120.0),
                        Vector2::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)),
                        random_spd(rng, 0.5, 8.0),
                    )
                })
                .collect()
        })
        .collect();
    Gmm25D::from_components(levels.to_vec(), raw).unwrap()
}

/// Criterion 1: the closed-form Gaussian product integral matches midpoint
/// quadrature (8-sigma box of the product Gaussian, 400x400 cells) within
/// 1e-6 relative on 200 random SPD pairs, in under 5 seconds.
#[test]
fn acceptance_1_gauss_integral_quadrature() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let mu1 = Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let mu2 = Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let s1 = random_spd(&mut rng, 0.4, 6.0);
        let s2 = random_spd(&mut rng, 0.4, 6.0);
        let exact = gauss_product_integral(&mu1, &s1, &mu2, &s2).unwrap();

        // Quadrature over the product Gaussian's support.
        let s1i = s1.try_inverse().unwrap();
        let s2i = s2.try_inverse().unwrap();
        let cov_star = (s1i + s2i).try_inverse().unwrap();
        let mu_star = cov_star * (s1i * mu1 + s2i * mu2);
        let trace = cov_star[(0, 0)] + cov_star[(1, 1)];
        let disc = ((cov_star[(0, 0)] - cov_star[(1, 1)]).powi(2)
            + 4.0 * cov_star[(0, 1)].powi(2))
        .sqrt();
        let sigma_max = (0.5 * (trace + disc)).sqrt();
        let half = 8.0 * sigma_max;
        let cells = 400;
        let step = 2.0 * half / cells as f64;
        let det1 = s1.determinant();
        let det2 = s2.determinant();
        let two_pi = std::f64::consts::TAU;
        let mut sum = 0.0;
        for iy in 0..cells {
            let y = mu_star.y - half + (iy as f64 + 0.5) * step;
            for ix in 0..cells {
                let x = mu_star.x - half + (ix as f64 + 0.5) * step;
                let p = Vector2::new(x, y);
                let d1 = p - mu1;
                let d2 = p - mu2;
                let q1 = (d1.transpose() * s1i * d1)[(0, 0)];
                let q2 = (d2.transpose() * s2i * d2)[(0, 0)];
                sum += ((-0.5 * (q1 + q2)).exp()) / (two_pi * two_pi * (det1 * det2).sqrt());
            }
        }
        let quad = sum * step * step;
        worst = worst.max((exact - quad).abs() / quad.abs());
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        1,
        "Gaussian product integral vs grid quadrature",
        worst < 1e-6 && elapsed < 5.0,
        &format!("worst relative {worst:.2e}, {elapsed:.2} s"),
    );
}

/// Criterion 2: the analytic gradient of the negative cross term (including
/// the determinant derivative) matches central finite differences (h = 1e-5)
/// within 1e-4 relative at 100 random configurations, in under 10 seconds.
#[test]
fn acceptance_2_gradient_matches_finite_differences() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let g2 = random_mixture(&mut rng, &[1, 2], 8);
        let truth = Se2Transform::new(
            rng.gen_range(-3.0..3.0),
            Vector2::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
        );
        let g1 = g2.transformed(&truth);
        let t = Se2Transform::new(
            truth.theta + rng.gen_range(-0.3..0.3),
            truth.t + Vector2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
        );
        let act = active_pairs(&g1, &g2, &t, f64::INFINITY);
        let (_, grad) = objective_gradient(&g1, &g2, &act, &t);

        let f = |dx: f64, dy: f64, dyaw: f64| {
            let tt = Se2Transform {
                theta: t.theta + dyaw,
                t: Vector2::new(t.t.x + dx, t.t.y + dy),
            };
            objective(&g1, &g2, &act, &tt)
        };
        let fd = Vector3::new(
            (f(h, 0.0, 0.0) - f(-h, 0.0, 0.0)) / (2.0 * h),
            (f(0.0, h, 0.0) - f(0.0, -h, 0.0)) / (2.0 * h),
            (f(0.0, 0.0, h) - f(0.0, 0.0, -h)) / (2.0 * h),
        );
        worst = worst.max((grad - fd).norm() / fd.norm().max(1e-12));
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        2,
        "analytic gradient vs central differences",
        worst < 1e-4 && elapsed < 10.0,
        &format!("worst relative {worst:.2e}, {elapsed:.2} s"),
    );
}

/// Criterion 3: self-correlation is 1 within 1e-9 for 100 random mixtures,
/// and optimization from starts perturbed by up to 2 px and 5 degrees
/// recovers the identity within 1e-3 px and 1e-4 rad.
#[test]
fn acceptance_3_self_similarity_and_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let cfg = GmmConfig::default();
    let mut worst_score_err: f64 = 0.0;
    let mut worst_trans: f64 = 0.0;
    let mut worst_rot: f64 = 0.0;
    for _ in 0..100 {
        let g = random_mixture(&mut rng, &[1, 2], 10);
        let r = correlation(&g, &g, &Se2Transform::identity(), f64::INFINITY);
        worst_score_err = worst_score_err.max((r.score - 1.0).abs());

        let start = Se2Transform::new(
            rng.gen_range(-1.0..1.0) * 5f64.to_radians(),
            Vector2::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
        );
        let opt = optimize(&g, &g, &start, &cfg);
        worst_trans = worst_trans.max(opt.transform.t.norm());
        worst_rot = worst_rot.max(opt.transform.theta.abs());
    }
    report(
        3,
        "self-similarity and identity recovery",
        worst_score_err < 1e-9 && worst_trans < 1e-3 && worst_rot < 1e-4,
        &format!(
            "score error {worst_score_err:.2e}, translation {worst_trans:.2e} px, rotation {worst_rot:.2e} rad"
        ),
    );
}

fn random_test_constellation(
    rng: &mut ChaCha8Rng,
    cfg: &ConstellationConfig,
) -> Constellation {
    let mk = |level: Level, seq: usize, x: f64, y: f64, n_a: usize| {
        let mut ca = summarize(&RawContour {
            level,
            seq,
            pixels: vec![
                ContourPixel { x: 0, y: 0, z: 1.0 },
                ContourPixel { x: 1, y: 0, z: 1.0 },
                ContourPixel { x: 0, y: 1, z: 1.0 },
            ],
        });
        ca.x_c = Vector2::new(x, y);
        ca.n_a = n_a;
        ca
    };
    let anchor = mk(1, 1, rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), 40);
    let mut ranked = vec![vec![anchor.clone()], Vec::new()];
    let n = rng.gen_range(4..16);
    for k in 0..n {
        let level = if rng.gen_bool(0.5) { 1 } else { 2 };
        let seq = ranked[level - 1].len() + 1;
        let ca = mk(
            level,
            seq,
            rng.gen_range(-60.0..60.0),
            rng.gen_range(-60.0..60.0),
            10 + k,
        );
        ranked[level - 1].push(ca);
    }
    build_constellation(&anchor, &ranked, cfg)
}

/// Criterion 4: distance pairing equals the exhaustive check-all-pairs oracle
/// (same level, bucket collision under the query padding rule, distance
/// check), and rotation voting matches the exhaustive window-placement
/// maximum, on 1000 random constellations, in under 10 seconds.
#[test]
fn acceptance_4_constellation_oracles() {
    let started = Instant::now();
    let cfg = ConstellationConfig {
        peripheral_levels: vec![1, 2],
        ..Default::default()
    };
    let th = ThresholdSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut pairing_mismatches = 0usize;
    let mut vote_mismatches = 0usize;

    for _ in 0..1000 {
        let c1 = random_test_constellation(&mut rng, &cfg);
        let c2 = random_test_constellation(&mut rng, &cfg);

        let list = pair_by_distance(&c1, &c2, &th);
        let mut got: Vec<(usize, usize)> = list.pairs.iter().map(|p| (p.idx1, p.idx2)).collect();
        got.sort_unstable();
        // Exhaustive oracle over all cross pairs.
        let mut want = Vec::new();
        for (i, p1) in c1.peripherals.iter().enumerate() {
            for (j, p2) in c2.peripherals.iter().enumerate() {
                if p1.ca.level != p2.ca.level {
                    continue;
                }
                if !similarity_check(p1.dist, p2.dist, &th.dist) {
                    continue;
                }
                // Bucket collision under the query-side padding rule.
                let w = cfg.bucket_width_px;
                let m = cfg.bucket_boundary_margin_px;
                let b1 = (p1.dist / w).floor().min(63.0) as i64;
                let b2 = (p2.dist / w).floor().min(63.0) as i64;
                let lo_pad = p1.dist - b1 as f64 * w < m && b1 > 0;
                let hi_pad = (b1 + 1) as f64 * w - p1.dist < m && b1 < 63;
                let collide =
                    b1 == b2 || (lo_pad && b2 == b1 - 1) || (hi_pad && b2 == b1 + 1);
                if collide {
                    want.push((i, j));
                }
            }
        }
        want.sort_unstable();
        if got != want {
            pairing_mismatches += 1;
        }

        // Window-placement oracle over the wrapped azimuth differences.
        let vote = vote_rotation(&list, cfg.rotation_window_rad);
        let diffs: Vec<f64> = list.pairs.iter().map(|p| p.azimuth_diff).collect();
        let mut oracle_best = 0usize;
        for &start in &diffs {
            let count = diffs
                .iter()
                .filter(|&&d| {
                    (d - start).rem_euclid(std::f64::consts::TAU)
                        <= cfg.rotation_window_rad + 1e-12
                })
                .count();
            oracle_best = oracle_best.max(count);
        }
        if vote.supporters.len() != oracle_best {
            vote_mismatches += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    report(
        4,
        "pairing and voting vs exhaustive oracles",
        pairing_mismatches == 0 && vote_mismatches == 0 && elapsed < 10.0,
        &format!(
            "pairing mismatches {pairing_mismatches}, vote mismatches {vote_mismatches}, {elapsed:.2} s"
        ),
    );
}

/// Criterion 5: contour extraction equals a union-find flood-fill oracle on
/// 1000 random 64x64 masks.
#[test]
fn acceptance_5_connected_components_oracle() {
    const NEIGHBORS: [(i64, i64); 8] = [
        (-1, -1),
        (0, -1),
        (1, -1),
        (-1, 0),
        (1, 0),
        (-1, 1),
        (0, 1),
        (1, 1),
    ];
    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    let size = 64usize;
    let cfg = BevConfig {
        resolution: 1.0,
        half_extent_x: (size / 2) as f64,
        half_extent_y: (size / 2) as f64,
        slice_heights: vec![0.0, 10.0],
        sensor_height_offset: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut mismatches = 0usize;
    for round in 0..1000 {
        let density = 0.1 + 0.7 * (round % 10) as f64 / 10.0;
        let mut pts = Vec::new();
        let mut bits = vec![false; size * size];
        for py in 0..cfg.height() {
            for px in 0..cfg.width() {
                if rng.gen_bool(density) && px < size && py < size {
                    bits[py * size + px] = true;
                    pts.push([
                        px as f64 - cfg.center_col() as f64,
                        py as f64 - cfg.center_row() as f64,
                        1.0,
                    ]);
                }
            }
        }
        let img = rasterize(&PointCloud::new(pts), &cfg);
        let mask = slice(&img, 1);
        let mut got: Vec<Vec<(usize, usize)>> = extract_contours(&mask, &img, 1)
            .iter()
            .map(|c| {
                let mut v: Vec<(usize, usize)> = c
                    .pixels
                    .iter()
                    .map(|p| (p.x as usize, p.y as usize))
                    .collect();
                v.sort_unstable();
                v
            })
            .collect();
        got.sort();

        // Union-find oracle over the same bit grid.
        let mut parent: Vec<usize> = (0..size * size).collect();
        for y in 0..size {
            for x in 0..size {
                if !bits[y * size + x] {
                    continue;
                }
                for (dx, dy) in NEIGHBORS {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= size as i64 || ny >= size as i64 {
                        continue;
                    }
                    if bits[ny as usize * size + nx as usize] {
                        let a = find(&mut parent, y * size + x);
                        let b = find(&mut parent, ny as usize * size + nx as usize);
                        parent[a] = b;
                    }
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
        for y in 0..size {
            for x in 0..size {
                if bits[y * size + x] {
                    let root = find(&mut parent, y * size + x);
                    groups.entry(root).or_default().push((x, y));
                }
            }
        }
        let mut want: Vec<Vec<(usize, usize)>> = groups
            .into_values()
            .map(|mut v| {
                v.sort_unstable();
                v
            })
            .collect();
        want.sort();
        if got != want {
            mismatches += 1;
        }
    }
    report(
        5,
        "connected components vs union-find oracle",
        mismatches == 0,
        &format!("{mismatches} mismatching masks of 1000"),
    );
}

/// Criterion 6: database queries equal a linear-scan oracle on 10000 random
/// 10-dimensional keys with 100 queries.
#[test]
fn acceptance_6_knn_matches_linear_scan() {
    let dim = 10usize;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut db = LayeredDatabase::new(vec![2], dim);
    let mut data: Vec<(u64, Vec<f64>)> = Vec::new();
    for scan in 0..10_000u64 {
        let values: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..100.0)).collect();
        db.insert(
            scan,
            &[RetrievalKey {
                level: 2,
                seq: 1,
                values: values.clone(),
            }],
        );
        data.push((scan, values));
    }
    db.flush_all();

    let mut mismatches = 0usize;
    for _ in 0..100 {
        let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..100.0)).collect();
        let key = RetrievalKey {
            level: 2,
            seq: 1,
            values: q.clone(),
        };
        let hits = db.query(&key, 50);
        let mut oracle: Vec<(f64, u64)> = data
            .iter()
            .map(|(id, v)| {
                let d2: f64 = v.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
                (d2.sqrt(), *id)
            })
            .collect();
        oracle.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        oracle.truncate(50);
        let same = hits.len() == oracle.len()
            && hits
                .iter()
                .zip(&oracle)
                .all(|(h, o)| h.scan_id == o.1 && (h.distance - o.0).abs() < 1e-12);
        if !same {
            mismatches += 1;
        }
    }
    report(
        6,
        "exact knn vs linear scan",
        mismatches == 0,
        &format!("{mismatches} mismatching queries of 100"),
    );
}

/// Criterion 7: retrieval keys are invariant to exact quarter-turn rotations
/// of the scene (lossless on the square grid) within 1e-6.
#[test]
fn acceptance_7_yaw_invariance_of_keys() {
    let cfg = PipelineConfig::default();
    let mut worst: f64 = 0.0;
    let mut compared = 0usize;
    for seed in [71, 72, 73, 74, 75] {
        let (_, cloud) = bevloop::dataset::generate_scene(
            seed,
            &bevloop::dataset::SceneParams::default(),
        );
        let rotated = PointCloud::new(
            cloud
                .points
                .iter()
                .map(|p| [-p[1], p[0], p[2]])
                .collect(),
        );
        let a = preprocess(0, &cloud, &cfg);
        let b = preprocess(0, &rotated, &cfg);
        assert_eq!(a.keys.len(), b.keys.len(), "key counts differ under rotation");
        // Keys may change anchor order under rotation only via exact count
        // ties; compare the per-level sorted key multisets.
        for level in cfg.retrieval.anchor_levels.iter() {
            let collect = |d: &bevloop::pipeline::ScanDescriptor| -> Vec<Vec<f64>> {
                let mut keys: Vec<Vec<f64>> = d
                    .keys
                    .iter()
                    .filter(|k| k.level == *level)
                    .map(|k| k.values.clone())
                    .collect();
                keys.sort_by(|x, y| {
                    x.iter()
                        .zip(y)
                        .map(|(a, b)| a.total_cmp(b))
                        .find(|o| *o != std::cmp::Ordering::Equal)
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
                keys
            };
            for (ka, kb) in collect(&a).iter().zip(collect(&b).iter()) {
                for (va, vb) in ka.iter().zip(kb) {
                    worst = worst.max((va - vb).abs());
                    compared += 1;
                }
            }
        }
    }
    report(
        7,
        "quarter-turn key invariance",
        worst < 1e-6 && compared > 0,
        &format!("worst deviation {worst:.2e} over {compared} entries"),
    );
}

/// Criterion 8: full synthetic end-to-end with the default configuration.
/// 500 revisit pairs (any yaw, up to 3 m offset, 10% dropout, 0.2 px jitter):
/// max F1 at least 0.95, at least 95% of the true positives within 0.3 m and
/// 1 degree, and the whole run under 2 minutes.
#[test]
fn acceptance_8_synthetic_end_to_end() {
    let started = Instant::now();
    let cfg = PipelineConfig::default();
    let params = SyntheticDatasetParams::default(); // 500 bases + 500 revisits
    let dataset = generate_dataset(&params, cfg.bev.resolution);

    let mut pipeline = Pipeline::new(cfg.clone());
    let mut log = PredictionLog::default();
    for rec in &dataset.records {
        let (result, _) = pipeline.process_scan(rec.scan_id, &rec.cloud);
        log.entries.push(Prediction {
            query_id: rec.scan_id,
            candidate: result.map(|r| PredictedLoop {
                candidate_id: r.candidate_id,
                score: r.score,
                pose: r.pose,
            }),
        });
    }
    let gt: Vec<Matrix4<f64>> = dataset
        .records
        .iter()
        .map(|r| r.gt_pose.unwrap())
        .collect();
    let eval_cfg = EvalConfig::default();
    let curve = pr_curve(&log, &gt, &eval_cfg);

    // Pose quality of the true positives at the max-F1 threshold.
    let mut tp = 0usize;
    let mut tp_within = 0usize;
    for pred in &log.entries {
        if classify(pred, &gt, &eval_cfg, curve.max_f1_threshold) != Outcome::TruePositive {
            continue;
        }
        tp += 1;
        let p = pred.candidate.as_ref().unwrap();
        let rel = relative_pose(
            &gt[pred.query_id as usize],
            &gt[p.candidate_id as usize],
        );
        let (gt_se2, _) = se2_projection(&rel);
        let trans_err = (p.pose.t - gt_se2.t).norm();
        let rot_err = wrap_angle(p.pose.theta - gt_se2.theta).abs();
        if trans_err < 0.3 && rot_err < 1f64.to_radians() {
            tp_within += 1;
        }
    }
    let frac_within = tp_within as f64 / tp.max(1) as f64;
    let stats = mpe_stats(&log, &gt, &eval_cfg, curve.max_f1_threshold);
    let elapsed = started.elapsed().as_secs_f64();
    report(
        8,
        "synthetic end-to-end revisit detection",
        curve.max_f1 >= 0.95 && frac_within >= 0.95 && elapsed < 120.0,
        &format!(
            "max F1 {:.4}, {tp} TPs, {:.1}% within (0.3 m, 1 deg), mean err {:.3} m / {:.3} deg, {elapsed:.1} s",
            curve.max_f1,
            100.0 * frac_within,
            stats.mean_trans_m.unwrap_or(f64::NAN),
            stats.mean_rot_deg.unwrap_or(f64::NAN),
        ),
    );
}

/// Criterion 9 (optional): KITTI odometry sequence 00 reproduction. Runs only
/// when `BEVLOOP_KITTI_SEQ00` points at a directory holding `velodyne/`,
/// `poses.txt` (SemanticKITTI ground truth), and `calib.txt`.
#[test]
fn acceptance_9_kitti_sequence_00() {
    let Some(root) = std::env::var_os("BEVLOOP_KITTI_SEQ00") else {
        println!("ACCEPTANCE 9: SKIP - KITTI reproduction (set BEVLOOP_KITTI_SEQ00 to run)");
        return;
    };
    let root = std::path::PathBuf::from(root);
    let out = root.join("bevloop_out");
    let cfg = RunConfig::default();
    let summary = cmd_run(&root.join("velodyne"), &out, &cfg).expect("run over sequence 00");
    let calib = root.join("calib.txt");
    let report_json = cmd_eval(
        &out.join("predictions.csv"),
        &root.join("poses.txt"),
        calib.exists().then_some(calib.as_path()),
        &out,
        &cfg,
    )
    .expect("evaluate sequence 00");
    let pass = report_json.max_f1 >= 0.95
        && report_json.mean_trans_err_m.is_some_and(|v| v <= 0.30)
        && report_json.mean_rot_err_deg.is_some_and(|v| v <= 0.35)
        && summary.mean_total_ms <= 50.0;
    report(
        9,
        "KITTI sequence 00 reproduction",
        pass,
        &format!(
            "max F1 {:.4}, mean trans {:?} m, mean rot {:?} deg, {:.1} ms/scan",
            report_json.max_f1,
            report_json.mean_trans_err_m,
            report_json.mean_rot_err_deg,
            summary.mean_total_ms
        ),
    );
}

/// Criterion 10: per-level quadrature masses of built mixtures equal the
/// level weights within 1e-3 on 50 random mixtures.
#[test]
fn acceptance_10_gmm_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut worst: f64 = 0.0;
    let two_pi = std::f64::consts::TAU;
    for _ in 0..50 {
        let raw: Vec<Vec<(f64, Vector2<f64>, Matrix2<f64>)>> = (0..2)
            .map(|_| {
                (0..rng.gen_range(3..7))
                    .map(|_| {
                        (
                            rng.gen_range(5.0..80.0),
                            Vector2::new(rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0)),
                            random_spd(&mut rng, 1.5, 6.0),
                        )
                    })
                    .collect()
            })
            .collect();
        let g = Gmm25D::from_components(vec![1, 2], raw).unwrap();
        let total_weight: f64 = g
            .components()
            .iter()
            .flatten()
            .map(|c| c.weight)
            .sum();
        assert!((total_weight - 1.0).abs() < 1e-12);

        for comps in g.components() {
            let weight: f64 = comps.iter().map(|c| c.weight).sum();
            let lo = -40.0;
            let hi = 40.0;
            let n = 320;
            let step = (hi - lo) / n as f64;
            let inv: Vec<(Matrix2<f64>, f64)> = comps
                .iter()
                .map(|c| (c.sigma.try_inverse().unwrap(), c.sigma.determinant()))
                .collect();
            let mut mass = 0.0;
            for iy in 0..n {
                let y = lo + (iy as f64 + 0.5) * step;
                for ix in 0..n {
                    let x = lo + (ix as f64 + 0.5) * step;
                    let p = Vector2::new(x, y);
                    for (c, (si, det)) in comps.iter().zip(&inv) {
                        let d = p - c.mu;
                        let q = (d.transpose() * si * d)[(0, 0)];
                        mass += c.weight * (-0.5 * q).exp() / (two_pi * det.sqrt());
                    }
                }
            }
            mass *= step * step;
            worst = worst.max((mass - weight).abs());
        }
    }
    report(
        10,
        "per-level mixture mass normalization",
        worst < 1e-3,
        &format!("worst mass deviation {worst:.2e}"),
    );
}

/// Real-scan smoke check tied to the optional KITTI download: scan 1648 of
/// sequence 08 produces a structured descriptor (at least 5 contours of 10
/// or more pixels at level 1). Skipped unless `BEVLOOP_KITTI_SEQ08` is set.
#[test]
fn kitti_scan_1648_descriptor_smoke() {
    let Some(root) = std::env::var_os("BEVLOOP_KITTI_SEQ08") else {
        println!("KITTI seq 08 smoke: SKIP (set BEVLOOP_KITTI_SEQ08 to run)");
        return;
    };
    let path = std::path::PathBuf::from(root).join("velodyne/001648.bin");
    let cloud = bevloop::dataset::read_scan_bin(&path).expect("read scan 1648");
    let cfg = PipelineConfig::default();
    let desc = preprocess(1648, &cloud, &cfg);
    let big_level1 = desc.cas[0].iter().filter(|ca| ca.n_a >= 10).count();
    assert!(
        big_level1 >= 5,
        "expected at least 5 contours with >= 10 pixels at level 1, got {big_level1}"
    );
}

