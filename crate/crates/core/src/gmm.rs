//! 2.5D Gaussian-mixture scan models and correlation optimization.
//!
//! A scan's ranked contours at the configured levels become weighted 2D
//! Gaussian components grouped per level; the discrete level coordinate keeps
//! cross-level components from interacting. The squared-density cross term
//! between two scans has a closed form (a sum of Gaussian product integrals),
//! and its normalized form, the density correlation, is maximized over the
//! planar transform with analytic derivatives. The derivative of the
//! determinant in each Gaussian normalizer is part of the gradient; dropping
//! it leaves a function that descent cannot actually minimize.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bev::Level;
use crate::constellation::Se2Transform;
use crate::contour::ContourAbstraction;

const TWO_PI: f64 = std::f64::consts::TAU;

#[derive(Debug, Error, PartialEq)]
pub enum GmmError {
    #[error("no contours at any selected level")]
    EmptyMixture,
    #[error("covariance sum is singular (det = {0})")]
    SingularCovariance(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GmmConfig {
    /// Levels whose contours enter the mixture.
    pub levels: Vec<Level>,
    /// Added to both covariance diagonal entries when the minor eigenvalue
    /// falls under `lam_min`, pixels^2.
    pub cov_reg_eps: f64,
    pub lam_min: f64,
    /// Component pairs farther apart than this are skipped, pixels.
    pub prune_dist_px: f64,
    pub max_iterations: usize,
    /// Stop when the correlation gradient norm falls below this.
    pub gradient_tol: f64,
    /// Stop when the accepted step norm falls below this.
    pub step_tol: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            levels: vec![2, 3, 4, 5],
            cov_reg_eps: 0.25,
            lam_min: 0.01,
            prune_dist_px: 30.0,
            max_iterations: 20,
            gradient_tol: 1e-6,
            step_tol: 1e-7,
        }
    }
}

/// One weighted planar Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmComponent {
    /// Normalized weight; all components of a mixture sum to 1.
    pub weight: f64,
    /// Center, pixels.
    pub mu: Vector2<f64>,
    /// Covariance, pixels^2, positive definite.
    pub sigma: Matrix2<f64>,
}

/// Level-grouped weighted Gaussian mixture of one scan.
#[derive(Debug, Clone)]
pub struct Gmm25D {
    levels: Vec<Level>,
    components: Vec<Vec<GmmComponent>>,
    total_na: f64,
    self_term: f64,
}

impl Gmm25D {
    /// Build from raw-mass components; weights are normalized over all levels
    /// and the squared-density self term is cached.
    pub fn from_components(
        levels: Vec<Level>,
        raw: Vec<Vec<(f64, Vector2<f64>, Matrix2<f64>)>>,
    ) -> Result<Self, GmmError> {
        assert_eq!(levels.len(), raw.len());
        let total: f64 = raw.iter().flatten().map(|(m, _, _)| m).sum();
        if raw.iter().all(|lvl| lvl.is_empty()) {
            return Err(GmmError::EmptyMixture);
        }
        let components: Vec<Vec<GmmComponent>> = raw
            .into_iter()
            .map(|lvl| {
                lvl.into_iter()
                    .map(|(m, mu, sigma)| GmmComponent {
                        weight: m / total,
                        mu,
                        sigma,
                    })
                    .collect()
            })
            .collect();
        for comp in components.iter().flatten() {
            let det = comp.sigma.determinant();
            if !(det > 0.0) {
                return Err(GmmError::SingularCovariance(det));
            }
        }
        let mut g = Self {
            levels,
            components,
            total_na: total,
            self_term: 0.0,
        };
        g.self_term = cross_term(&g, &g, &Se2Transform::identity(), f64::INFINITY);
        Ok(g)
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn components(&self) -> &[Vec<GmmComponent>] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.iter().map(Vec::len).sum()
    }

    pub fn total_na(&self) -> f64 {
        self.total_na
    }

    /// Cached squared-density integral of this mixture. Transform-free, so it
    /// is computed once per scan.
    pub fn self_term(&self) -> f64 {
        self.self_term
    }

    /// The same mixture with every component moved by a rigid transform.
    pub fn transformed(&self, t: &Se2Transform) -> Self {
        let rot = t.rotation();
        let components = self
            .components
            .iter()
            .map(|lvl| {
                lvl.iter()
                    .map(|c| GmmComponent {
                        weight: c.weight,
                        mu: t.apply(&c.mu),
                        sigma: rot * c.sigma * rot.transpose(),
                    })
                    .collect()
            })
            .collect();
        Self {
            levels: self.levels.clone(),
            components,
            total_na: self.total_na,
            self_term: self.self_term,
        }
    }
}

/// Mixture from the ranked contours at the selected levels. Covariances with
/// a minor eigenvalue under `cfg.lam_min` get `cfg.cov_reg_eps` added to both
/// diagonal entries so every component stays invertible.
pub fn build_gmm(
    ranked: &[Vec<ContourAbstraction>],
    levels: &[Level],
    cfg: &GmmConfig,
) -> Result<Gmm25D, GmmError> {
    let raw: Vec<Vec<(f64, Vector2<f64>, Matrix2<f64>)>> = levels
        .iter()
        .map(|&level| {
            ranked
                .get(level - 1)
                .map(|cas| {
                    cas.iter()
                        .map(|ca| {
                            let mut sigma = ca.cov;
                            if ca.lam2 < cfg.lam_min {
                                sigma[(0, 0)] += cfg.cov_reg_eps;
                                sigma[(1, 1)] += cfg.cov_reg_eps;
                            }
                            (ca.n_a as f64, ca.x_c, sigma)
                        })
                        .collect()
                })
                .unwrap_or_default()
        })
        .collect();
    Gmm25D::from_components(levels.to_vec(), raw)
}

/// Closed-form product integral of two planar Gaussian densities:
/// a Gaussian of the mean difference with the summed covariance.
pub fn gauss_product_integral(
    mu1: &Vector2<f64>,
    sigma1: &Matrix2<f64>,
    mu2: &Vector2<f64>,
    sigma2: &Matrix2<f64>,
) -> Result<f64, GmmError> {
    let s = sigma1 + sigma2;
    let det = s.determinant();
    if !(det > 1e-300) {
        return Err(GmmError::SingularCovariance(det));
    }
    let e = mu1 - mu2;
    let q = (e.x * e.x * s[(1, 1)] - 2.0 * e.x * e.y * s[(0, 1)] + e.y * e.y * s[(0, 0)]) / det;
    Ok((-0.5 * q).exp() / (TWO_PI * det.sqrt()))
}

/// Matching level slots of two mixtures plus the component pairs near enough
/// to contribute. Frozen once per optimization so the objective stays smooth.
#[derive(Debug, Clone, Default)]
pub struct ActivePairs {
    /// (slot in g1, slot in g2) per shared level.
    slots: Vec<(usize, usize)>,
    /// (shared slot index, component index in g1's level, in g2's level).
    pairs: Vec<(usize, usize, usize)>,
}

impl ActivePairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn shared_slots(g1: &Gmm25D, g2: &Gmm25D) -> Vec<(usize, usize)> {
    let mut slots = Vec::new();
    for (k1, level) in g1.levels.iter().enumerate() {
        if let Some(k2) = g2.levels.iter().position(|l| l == level) {
            slots.push((k1, k2));
        }
    }
    slots
}

/// Component pairs within `prune_dist` of each other under `t0`, per shared
/// level.
pub fn active_pairs(g1: &Gmm25D, g2: &Gmm25D, t0: &Se2Transform, prune_dist: f64) -> ActivePairs {
    let slots = shared_slots(g1, g2);
    let mut pairs = Vec::new();
    for (si, &(k1, k2)) in slots.iter().enumerate() {
        for (i, c1) in g1.components[k1].iter().enumerate() {
            for (j, c2) in g2.components[k2].iter().enumerate() {
                if (c1.mu - t0.apply(&c2.mu)).norm() <= prune_dist {
                    pairs.push((si, i, j));
                }
            }
        }
    }
    ActivePairs { slots, pairs }
}

/// Squared-density cross term between `g1` and `g2` moved by `t`, skipping
/// component pairs farther apart than `prune_dist`. Only same-level pairs
/// contribute.
pub fn cross_term(g1: &Gmm25D, g2: &Gmm25D, t: &Se2Transform, prune_dist: f64) -> f64 {
    let act = active_pairs(g1, g2, t, prune_dist);
    objective_on(g1, g2, &act, t).map_or(0.0, |f| -f)
}

/// Transform-free squared-density integral of a mixture.
pub fn self_term(g: &Gmm25D) -> f64 {
    cross_term(g, g, &Se2Transform::identity(), f64::INFINITY)
}

/// A transform with its correlation score and the terms behind it.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationResult {
    pub transform: Se2Transform,
    /// Density correlation in [0, 1]; pruning can only lower it.
    pub score: f64,
    pub cross_term: f64,
    pub self1: f64,
    pub self2: f64,
}

/// Density correlation of the two mixtures at `t`:
/// cross / sqrt(self1 * self2), with unpruned self terms.
pub fn correlation(g1: &Gmm25D, g2: &Gmm25D, t: &Se2Transform, prune_dist: f64) -> CorrelationResult {
    let cross = cross_term(g1, g2, t, prune_dist);
    let self1 = g1.self_term();
    let self2 = g2.self_term();
    CorrelationResult {
        transform: *t,
        score: cross / (self1 * self2).sqrt(),
        cross_term: cross,
        self1,
        self2,
    }
}

struct PairEval {
    g: f64,          // product integral value
    grad: Vector3<f64>,
    curv: Matrix3<f64>,
}

/// Product integral of one pair and, optionally, its derivatives in
/// theta = (x, y, yaw). The yaw derivative carries both the mean rotation and
/// the rotated-covariance terms, including the log-determinant part.
fn eval_pair(
    c1: &GmmComponent,
    c2: &GmmComponent,
    sin_t: f64,
    cos_t: f64,
    t: &Vector2<f64>,
    with_derivatives: bool,
) -> PairEval {
    // v = R mu2, B = R sigma2 R^T
    let v = Vector2::new(
        cos_t * c2.mu.x - sin_t * c2.mu.y,
        sin_t * c2.mu.x + cos_t * c2.mu.y,
    );
    let s2 = &c2.sigma;
    let (a2, b2, d2) = (s2[(0, 0)], s2[(0, 1)], s2[(1, 1)]);
    // B = R * sigma2 * R^T, expanded.
    let b00 = cos_t * (cos_t * a2 - sin_t * b2) - sin_t * (cos_t * b2 - sin_t * d2);
    let b01 = cos_t * (sin_t * a2 + cos_t * b2) - sin_t * (sin_t * b2 + cos_t * d2);
    let b11 = sin_t * (sin_t * a2 + cos_t * b2) + cos_t * (sin_t * b2 + cos_t * d2);

    let s00 = c1.sigma[(0, 0)] + b00;
    let s01 = c1.sigma[(0, 1)] + b01;
    let s11 = c1.sigma[(1, 1)] + b11;
    let det = s00 * s11 - s01 * s01;
    debug_assert!(det > 0.0, "covariance sum must stay positive definite");

    let e = Vector2::new(c1.mu.x - v.x - t.x, c1.mu.y - v.y - t.y);
    // u = S^{-1} e
    let inv_det = 1.0 / det;
    let i00 = s11 * inv_det;
    let i01 = -s01 * inv_det;
    let i11 = s00 * inv_det;
    let u = Vector2::new(i00 * e.x + i01 * e.y, i01 * e.x + i11 * e.y);
    let q = e.x * u.x + e.y * u.y;
    let g = (-0.5 * q).exp() / (TWO_PI * det.sqrt());

    if !with_derivatives {
        return PairEval {
            g,
            grad: Vector3::zeros(),
            curv: Matrix3::zeros(),
        };
    }

    // dS/dyaw = Jz*B - B*Jz with Jz the quarter-turn generator.
    let sp00 = -2.0 * b01;
    let sp01 = b00 - b11;
    let sp11 = 2.0 * b01;

    // de/dyaw = -R' mu2 = (v_y, -v_x)
    let de_yaw = Vector2::new(v.y, -v.x);
    // dq/dyaw = 2 u . de_yaw - u^T S' u
    let usu = u.x * (sp00 * u.x + sp01 * u.y) + u.y * (sp01 * u.x + sp11 * u.y);
    let dq_yaw = 2.0 * (u.x * de_yaw.x + u.y * de_yaw.y) - usu;
    // d(log det)/dyaw = tr(S^{-1} S')
    let tr_logdet = i00 * sp00 + 2.0 * i01 * sp01 + i11 * sp11;

    // dG/dtheta: translation part lacks the determinant term.
    let grad = Vector3::new(
        g * u.x,
        g * u.y,
        -0.5 * g * (dq_yaw + tr_logdet),
    );

    // Gauss-Newton curvature J^T S^{-1} J with J = de/dtheta.
    let sj = Vector2::new(i00 * de_yaw.x + i01 * de_yaw.y, i01 * de_yaw.x + i11 * de_yaw.y);
    let mut curv = Matrix3::zeros();
    curv[(0, 0)] = i00;
    curv[(0, 1)] = i01;
    curv[(1, 1)] = i11;
    curv[(0, 2)] = -sj.x;
    curv[(1, 2)] = -sj.y;
    curv[(2, 2)] = de_yaw.x * sj.x + de_yaw.y * sj.y;
    curv[(1, 0)] = curv[(0, 1)];
    curv[(2, 0)] = curv[(0, 2)];
    curv[(2, 1)] = curv[(1, 2)];
    PairEval { g, grad, curv }
}

fn objective_on(g1: &Gmm25D, g2: &Gmm25D, act: &ActivePairs, t: &Se2Transform) -> Option<f64> {
    if act.is_empty() {
        return None;
    }
    let (sin_t, cos_t) = t.theta.sin_cos();
    let mut total = 0.0;
    for &(si, i, j) in &act.pairs {
        let (k1, k2) = act.slots[si];
        let c1 = &g1.components[k1][i];
        let c2 = &g2.components[k2][j];
        let w = c1.weight * c2.weight;
        total += w * eval_pair(c1, c2, sin_t, cos_t, &t.t, false).g;
    }
    Some(-total)
}

/// Negative cross term over the frozen pair set: the quantity the transform
/// optimization minimizes (up to the constant normalizer).
pub fn objective(g1: &Gmm25D, g2: &Gmm25D, act: &ActivePairs, t: &Se2Transform) -> f64 {
    objective_on(g1, g2, act, t).unwrap_or(0.0)
}

/// Objective value and its analytic gradient in theta = (x, y, yaw).
pub fn objective_gradient(
    g1: &Gmm25D,
    g2: &Gmm25D,
    act: &ActivePairs,
    t: &Se2Transform,
) -> (f64, Vector3<f64>) {
    let (f, grad, _) = objective_gradient_curvature(g1, g2, act, t);
    (f, grad)
}

fn objective_gradient_curvature(
    g1: &Gmm25D,
    g2: &Gmm25D,
    act: &ActivePairs,
    t: &Se2Transform,
) -> (f64, Vector3<f64>, Matrix3<f64>) {
    let (sin_t, cos_t) = t.theta.sin_cos();
    let mut f = 0.0;
    let mut grad = Vector3::zeros();
    let mut curv = Matrix3::zeros();
    for &(si, i, j) in &act.pairs {
        let (k1, k2) = act.slots[si];
        let c1 = &g1.components[k1][i];
        let c2 = &g2.components[k2][j];
        let w = c1.weight * c2.weight;
        let ev = eval_pair(c1, c2, sin_t, cos_t, &t.t, true);
        f -= w * ev.g;
        grad -= w * ev.grad;
        curv += w * ev.g * ev.curv;
    }
    (f, grad, curv)
}

/// Locally maximize the correlation over (x, y, yaw) starting from `t0`,
/// with Levenberg-damped Gauss-Newton steps on the analytic gradient.
///
/// The contributing pair set is frozen at `t0` using `cfg.prune_dist_px`.
/// Iteration stops on a small correlation-gradient norm, a small step, or the
/// iteration cap; the best iterate seen is returned, so the final score never
/// falls below the score at `t0`.
pub fn optimize(g1: &Gmm25D, g2: &Gmm25D, t0: &Se2Transform, cfg: &GmmConfig) -> CorrelationResult {
    let self1 = g1.self_term();
    let self2 = g2.self_term();
    let norm = 1.0 / (self1 * self2).sqrt();
    let act = active_pairs(g1, g2, t0, cfg.prune_dist_px);

    let result = |theta: Vector3<f64>, f_scaled: f64| {
        let t = Se2Transform::new(theta.z, Vector2::new(theta.x, theta.y));
        CorrelationResult {
            transform: t,
            score: -f_scaled,
            cross_term: -f_scaled / norm,
            self1,
            self2,
        }
    };

    let mut theta = Vector3::new(t0.t.x, t0.t.y, t0.theta);
    if act.is_empty() {
        return result(theta, 0.0);
    }

    let eval_at = |th: &Vector3<f64>| {
        let t = Se2Transform {
            theta: th.z,
            t: Vector2::new(th.x, th.y),
        };
        let (f, g, h) = objective_gradient_curvature(g1, g2, &act, &t);
        (f * norm, g * norm, h * norm)
    };
    let value_at = |th: &Vector3<f64>| {
        let t = Se2Transform {
            theta: th.z,
            t: Vector2::new(th.x, th.y),
        };
        objective(g1, g2, &act, &t) * norm
    };

    let mut f = value_at(&theta);
    let mut best_theta = theta;
    let mut best_f = f;
    let mut lambda = 1e-3;

    for _ in 0..cfg.max_iterations {
        let (f_cur, grad, curv) = eval_at(&theta);
        f = f_cur;
        if f < best_f {
            best_f = f;
            best_theta = theta;
        }
        if grad.norm() < cfg.gradient_tol {
            break;
        }

        let mut accepted = false;
        let mut step = Vector3::zeros();
        for _ in 0..10 {
            let damped = curv + Matrix3::identity() * lambda;
            let Some(delta) = damped.lu().solve(&(-grad)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = theta + delta;
            let f_trial = value_at(&trial);
            if f_trial < f {
                theta = trial;
                f = f_trial;
                step = delta;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 4.0;
        }
        if !accepted {
            break;
        }
        if f < best_f {
            best_f = f;
            best_theta = theta;
        }
        if step.norm() < cfg.step_tol {
            break;
        }
    }

    result(best_theta, best_f)
}
