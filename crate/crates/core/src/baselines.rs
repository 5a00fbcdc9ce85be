//! Comparison estimators: analytic inverse perspective mapping and an
//! ε-insensitive support-vector regressor on bounding-box size.

use std::path::Path;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{intersect_ray_ground, GeometryError};
use crate::kitti_io::BBox2;
use crate::nnet::checkpoint::{load_container, save_container, CheckpointError, Container};
use crate::nnet::{ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct IpmConfig {
    pub intrinsics: Matrix3<f64>,
    pub cam_height: f64,
    pub pitch: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum IpmError {
    #[error("camera height must be positive, got {0}")]
    BadCameraHeight(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Forward ground distance of the point below the middle of the box's
/// bottom edge, assuming it rests on a flat road.
pub fn ipm_estimate(cfg: &IpmConfig, bbox: &BBox2) -> Result<f64, IpmError> {
    if !(cfg.cam_height > 0.0) {
        return Err(IpmError::BadCameraHeight(cfg.cam_height));
    }
    let ground = intersect_ray_ground(&cfg.intrinsics, cfg.cam_height, cfg.pitch, bbox.bottom_center())?;
    Ok(ground.z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrParams {
    pub c: f64,
    pub epsilon: f64,
    /// RBF bandwidth on standardized inputs; `None` picks the median heuristic.
    pub gamma: Option<f64>,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self {
            c: 10.0,
            epsilon: 0.25,
            gamma: None,
            tolerance: 1e-3,
            max_iter: 200_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum SvrError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample {0}: width, height and distance must be finite and positive")]
    BadSample(usize),
    #[error("invalid hyperparameters: {0}")]
    BadParams(&'static str),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("malformed SVR container: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvrSample {
    pub width: f64,
    pub height: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvrModel {
    /// Support vectors in standardized input space.
    pub support: Vec<[f64; 2]>,
    pub coef: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    pub epsilon: f64,
    pub input_mean: [f64; 2],
    pub input_scale: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    IterationLimit,
    /// All targets lie within one tube width; the model is constant.
    DegenerateData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvrFit {
    pub model: SvrModel,
    pub status: FitStatus,
    pub iterations: usize,
    /// Dual objective after each solver iteration, starting from zero.
    pub objective_trace: Vec<f64>,
}

fn rbf(gamma: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    (-gamma * (dx * dx + dy * dy)).exp()
}

const MEDIAN_MAX_POINTS: usize = 2000;

/// `1 / (2·m²)` with `m` the median distance between distinct inputs.
fn median_gamma(xs: &[[f64; 2]]) -> f64 {
    let stride = xs.len().div_ceil(MEDIAN_MAX_POINTS);
    let pts: Vec<[f64; 2]> = xs.iter().step_by(stride).copied().collect();
    let mut d = Vec::with_capacity(pts.len() * (pts.len() - 1) / 2);
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            let v = rbf_dist(pts[i], pts[j]);
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let m = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    1.0 / (2.0 * m * m)
}

fn rbf_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn mean_and_scale(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd > 1e-12 { sd } else { 1.0 })
}

/// Fits ε-SVR with an RBF kernel by SMO on the 2n-variable dual, choosing
/// the maximal-violating pair each iteration.
///
/// Samples are sorted into a canonical order first, so the fit does not
/// depend on the order they are given in.
pub fn svr_fit(samples: &[SvrSample], params: &SvrParams) -> Result<SvrFit, SvrError> {
    if samples.len() < 2 {
        return Err(SvrError::TooFewSamples(samples.len()));
    }
    for (i, s) in samples.iter().enumerate() {
        let ok = [s.width, s.height, s.distance].iter().all(|v| v.is_finite() && *v > 0.0);
        if !ok {
            return Err(SvrError::BadSample(i));
        }
    }
    if !(params.c > 0.0) || !(params.epsilon >= 0.0) || !(params.tolerance > 0.0) {
        return Err(SvrError::BadParams("c and tolerance must be positive, epsilon non-negative"));
    }
    if params.gamma.is_some_and(|g| !(g > 0.0)) {
        return Err(SvrError::BadParams("gamma must be positive"));
    }

    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| {
        a.width
            .total_cmp(&b.width)
            .then(a.height.total_cmp(&b.height))
            .then(a.distance.total_cmp(&b.distance))
    });
    let (mw, sw) = mean_and_scale(sorted.iter().map(|s| s.width));
    let (mh, sh) = mean_and_scale(sorted.iter().map(|s| s.height));
    let xs: Vec<[f64; 2]> = sorted.iter().map(|s| [(s.width - mw) / sw, (s.height - mh) / sh]).collect();
    let ys: Vec<f64> = sorted.iter().map(|s| s.distance).collect();
    let gamma = params.gamma.unwrap_or_else(|| median_gamma(&xs));

    let constant = |value: f64| SvrModel {
        support: Vec::new(),
        coef: Vec::new(),
        bias: value,
        gamma,
        c: params.c,
        epsilon: params.epsilon,
        input_mean: [mw, mh],
        input_scale: [sw, sh],
    };
    let (lo, hi) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &y| (l.min(y), h.max(y)));
    if hi - lo <= 2.0 * params.epsilon {
        return Ok(SvrFit {
            model: constant(0.5 * (lo + hi)),
            status: FitStatus::DegenerateData,
            iterations: 0,
            objective_trace: vec![0.0],
        });
    }

    let sol = Smo::new(&xs, &ys, gamma, params).solve();
    let n = xs.len();
    let mut support = Vec::new();
    let mut coef = Vec::new();
    for i in 0..n {
        let beta = sol.alpha[i] - sol.alpha[i + n];
        if beta != 0.0 {
            support.push(xs[i]);
            coef.push(beta);
        }
    }
    Ok(SvrFit {
        model: SvrModel {
            support,
            coef,
            bias: -sol.rho,
            ..constant(0.0)
        },
        status: if sol.converged { FitStatus::Converged } else { FitStatus::IterationLimit },
        iterations: sol.iterations,
        objective_trace: sol.trace,
    })
}

struct Smo<'a> {
    xs: &'a [[f64; 2]],
    gamma: f64,
    c: f64,
    tol: f64,
    max_iter: usize,
    /// Linear term of the dual: ε − y for the upper half, ε + y for the lower.
    p: Vec<f64>,
    sign: Vec<f64>,
}

struct SmoSolution {
    alpha: Vec<f64>,
    rho: f64,
    converged: bool,
    iterations: usize,
    trace: Vec<f64>,
}

impl<'a> Smo<'a> {
    fn new(xs: &'a [[f64; 2]], ys: &[f64], gamma: f64, params: &SvrParams) -> Self {
        let n = xs.len();
        let mut p = Vec::with_capacity(2 * n);
        p.extend(ys.iter().map(|y| params.epsilon - y));
        p.extend(ys.iter().map(|y| params.epsilon + y));
        let mut sign = vec![1.0; n];
        sign.extend(std::iter::repeat_n(-1.0, n));
        Self {
            xs,
            gamma,
            c: params.c,
            tol: params.tolerance,
            max_iter: params.max_iter,
            p,
            sign,
        }
    }

    fn kernel_row(&self, t: usize, out: &mut [f64]) {
        let n = self.xs.len();
        let xi = self.xs[t % n];
        for (o, x) in out.iter_mut().zip(self.xs) {
            *o = rbf(self.gamma, xi, *x);
        }
    }

    fn is_up(&self, t: usize, a: f64) -> bool {
        if self.sign[t] > 0.0 { a < self.c } else { a > 0.0 }
    }

    fn is_low(&self, t: usize, a: f64) -> bool {
        if self.sign[t] > 0.0 { a > 0.0 } else { a < self.c }
    }

    fn objective(&self, alpha: &[f64], grad: &[f64]) -> f64 {
        0.5 * alpha
            .iter()
            .zip(grad)
            .zip(&self.p)
            .map(|((a, g), p)| a * (g + p))
            .sum::<f64>()
    }

    fn solve(&self) -> SmoSolution {
        let n = self.xs.len();
        let l = 2 * n;
        let mut alpha = vec![0.0; l];
        let mut grad = self.p.clone();
        let mut ki = vec![0.0; n];
        let mut kj = vec![0.0; n];
        let mut trace = vec![0.0];
        let mut converged = false;
        let mut iterations = 0;

        while iterations < self.max_iter {
            let (mut gmax, mut i) = (f64::NEG_INFINITY, usize::MAX);
            let (mut gmin, mut j) = (f64::INFINITY, usize::MAX);
            for t in 0..l {
                let v = -self.sign[t] * grad[t];
                if self.is_up(t, alpha[t]) && v > gmax {
                    gmax = v;
                    i = t;
                }
                if self.is_low(t, alpha[t]) && v < gmin {
                    gmin = v;
                    j = t;
                }
            }
            if gmax - gmin < self.tol {
                converged = true;
                break;
            }
            iterations += 1;
            self.kernel_row(i, &mut ki);
            self.kernel_row(j, &mut kj);
            let (yi, yj) = (self.sign[i], self.sign[j]);
            let kij = ki[j % n];
            let quad = (2.0 - 2.0 * kij).max(1e-12);
            let (old_i, old_j) = (alpha[i], alpha[j]);
            let c = self.c;
            if yi != yj {
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = old_i - old_j;
                let (mut ai, mut aj) = (old_i + delta, old_j + delta);
                if diff > 0.0 && aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                } else if diff <= 0.0 && ai < 0.0 {
                    ai = 0.0;
                    aj = -diff;
                }
                if diff > 0.0 && ai > c {
                    ai = c;
                    aj = c - diff;
                } else if diff <= 0.0 && aj > c {
                    aj = c;
                    ai = c + diff;
                }
                alpha[i] = ai;
                alpha[j] = aj;
            } else {
                let delta = (grad[i] - grad[j]) / quad;
                let sum = old_i + old_j;
                let (mut ai, mut aj) = (old_i - delta, old_j + delta);
                if sum > c && ai > c {
                    ai = c;
                    aj = sum - c;
                } else if sum <= c && aj < 0.0 {
                    aj = 0.0;
                    ai = sum;
                }
                if sum > c && aj > c {
                    aj = c;
                    ai = sum - c;
                } else if sum <= c && ai < 0.0 {
                    ai = 0.0;
                    aj = sum;
                }
                alpha[i] = ai;
                alpha[j] = aj;
            }
            let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
            for t in 0..l {
                let s = self.sign[t];
                grad[t] += s * (yi * ki[t % n] * di + yj * kj[t % n] * dj);
            }
            trace.push(self.objective(&alpha, &grad));
        }

        let rho = self.rho(&alpha, &grad);
        SmoSolution {
            alpha,
            rho,
            converged,
            iterations,
            trace,
        }
    }

    fn rho(&self, alpha: &[f64], grad: &[f64]) -> f64 {
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut sum, mut free) = (0.0, 0usize);
        for t in 0..alpha.len() {
            let yg = self.sign[t] * grad[t];
            let at_upper = alpha[t] >= self.c;
            let at_lower = alpha[t] <= 0.0;
            if at_upper {
                if self.sign[t] < 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
            } else if at_lower {
                if self.sign[t] > 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
            } else {
                free += 1;
                sum += yg;
            }
        }
        if free > 0 { sum / free as f64 } else { 0.5 * (ub + lb) }
    }
}

pub fn svr_predict(model: &SvrModel, width: f64, height: f64) -> f64 {
    let x = [
        (width - model.input_mean[0]) / model.input_scale[0],
        (height - model.input_mean[1]) / model.input_scale[1],
    ];
    model
        .support
        .iter()
        .zip(&model.coef)
        .map(|(s, b)| b * rbf(model.gamma, *s, x))
        .sum::<f64>()
        + model.bias
}

pub const SVR_KIND: &str = "svr";

#[derive(Serialize, Deserialize)]
struct SvrMeta {
    bias: f64,
    gamma: f64,
    c: f64,
    epsilon: f64,
    input_mean: [f64; 2],
    input_scale: [f64; 2],
}

fn to_container(model: &SvrModel) -> (serde_json::Value, ParamSet) {
    let meta = SvrMeta {
        bias: model.bias,
        gamma: model.gamma,
        c: model.c,
        epsilon: model.epsilon,
        input_mean: model.input_mean,
        input_scale: model.input_scale,
    };
    let k = model.support.len();
    let mut arrays = ParamSet::new();
    arrays.push(
        "support",
        Tensor {
            shape: vec![k, 2],
            data: model.support.iter().flatten().copied().collect(),
        },
    );
    arrays.push(
        "coef",
        Tensor {
            shape: vec![k],
            data: model.coef.clone(),
        },
    );
    (serde_json::to_value(meta).expect("plain struct serializes"), arrays)
}

fn from_container(c: Container) -> Result<SvrModel, SvrError> {
    let meta: SvrMeta = serde_json::from_value(c.meta).map_err(|e| SvrError::Malformed(e.to_string()))?;
    let support = c.arrays.get("support").ok_or_else(|| SvrError::Malformed("no support array".into()))?;
    let coef = c.arrays.get("coef").ok_or_else(|| SvrError::Malformed("no coef array".into()))?;
    if support.shape.len() != 2 || support.shape[1] != 2 || coef.shape != [support.shape[0]] {
        return Err(SvrError::Malformed("support/coef shapes disagree".into()));
    }
    Ok(SvrModel {
        support: support.data.chunks_exact(2).map(|p| [p[0], p[1]]).collect(),
        coef: coef.data.clone(),
        bias: meta.bias,
        gamma: meta.gamma,
        c: meta.c,
        epsilon: meta.epsilon,
        input_mean: meta.input_mean,
        input_scale: meta.input_scale,
    })
}

pub fn save_svr(path: &Path, model: &SvrModel) -> Result<(), SvrError> {
    let (meta, arrays) = to_container(model);
    save_container(path, SVR_KIND, &meta, &arrays)?;
    Ok(())
}

pub fn load_svr(path: &Path) -> Result<SvrModel, SvrError> {
    from_container(load_container(path, SVR_KIND)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{level_to_camera, Point3, ProjectionMatrix, project_point};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k_matrix() -> Matrix3<f64> {
        Matrix3::new(700.0, 0.0, 600.0, 0.0, 700.0, 180.0, 0.0, 0.0, 1.0)
    }

    fn bbox_with_bottom(u: f64, v: f64) -> BBox2 {
        BBox2::new(u - 20.0, v - 40.0, u + 20.0, v)
    }

    #[test]
    fn ipm_recovers_flat_ground_distance() {
        for pitch in [0.0, 0.02, -0.03] {
            let cfg = IpmConfig { intrinsics: k_matrix(), cam_height: 1.65, pitch };
            let p = ProjectionMatrix::from_intrinsics(&k_matrix(), 1242, 375).unwrap();
            for z in [2.0, 10.0, 37.5, 100.0] {
                for x in [-4.0, 0.0, 3.0] {
                    let base = level_to_camera(pitch, &Point3::new(x, 1.65, z));
                    let px = project_point(&p, &base).unwrap();
                    let est = ipm_estimate(&cfg, &bbox_with_bottom(px.u, px.v)).unwrap();
                    assert!((est - z).abs() < 1e-6, "pitch {pitch} z {z}: {est}");
                }
            }
        }
    }

    #[test]
    fn ipm_horizon_is_an_error() {
        let cfg = IpmConfig { intrinsics: k_matrix(), cam_height: 1.65, pitch: 0.0 };
        assert_eq!(
            ipm_estimate(&cfg, &bbox_with_bottom(600.0, 180.0)),
            Err(IpmError::Geometry(GeometryError::AboveHorizon))
        );
        assert_eq!(
            ipm_estimate(&cfg, &bbox_with_bottom(600.0, 100.0)),
            Err(IpmError::Geometry(GeometryError::AboveHorizon))
        );
        let bad = IpmConfig { cam_height: 0.0, ..cfg };
        assert!(matches!(ipm_estimate(&bad, &bbox_with_bottom(600.0, 300.0)), Err(IpmError::BadCameraHeight(_))));
    }

    fn pinhole_samples(n: usize, seed: u64) -> Vec<SvrSample> {
        pinhole_samples_in(n, seed, 20.0, 200.0)
    }

    fn pinhole_samples_in(n: usize, seed: u64, h_min: f64, h_max: f64) -> Vec<SvrSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let h = rng.random_range(h_min..h_max);
                SvrSample {
                    width: h * rng.random_range(0.4..0.6),
                    height: h,
                    distance: 700.0 * 1.6 / h,
                }
            })
            .collect()
    }

    #[test]
    fn constant_targets_give_constant_model() {
        let s: Vec<SvrSample> = (1..6)
            .map(|i| SvrSample { width: i as f64, height: 2.0 * i as f64, distance: 20.0 })
            .collect();
        let fit = svr_fit(&s, &SvrParams::default()).unwrap();
        assert_eq!(fit.status, FitStatus::DegenerateData);
        for (w, h) in [(1.0, 1.0), (300.0, 7.0)] {
            assert_eq!(svr_predict(&fit.model, w, h), 20.0);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let one = pinhole_samples(1, 0);
        assert!(matches!(svr_fit(&one, &SvrParams::default()), Err(SvrError::TooFewSamples(1))));
        let mut s = pinhole_samples(3, 0);
        s[2].height = 0.0;
        assert!(matches!(svr_fit(&s, &SvrParams::default()), Err(SvrError::BadSample(2))));
    }

    #[test]
    fn pinhole_fit_tube_and_monotonicity() {
        let train = pinhole_samples(500, 1);
        let fit = svr_fit(&train, &SvrParams::default()).unwrap();
        assert_eq!(fit.status, FitStatus::Converged);
        let m = &fit.model;
        assert!(m.coef.iter().all(|b| b.abs() <= m.c + 1e-12));
        let residual = |m: &SvrModel, s: &SvrSample| (svr_predict(m, s.width, s.height) - s.distance).abs();
        // Samples whose coefficient is below the bound must sit inside the tube.
        for (x, b) in m.support.iter().zip(&m.coef).filter(|(_, b)| b.abs() < m.c - 1e-9) {
            let s = train
                .iter()
                .find(|s| {
                    let sx = [(s.width - m.input_mean[0]) / m.input_scale[0], (s.height - m.input_mean[1]) / m.input_scale[1]];
                    sx == *x
                })
                .unwrap();
            assert!(residual(m, s) <= m.epsilon + 0.1, "{s:?} coef {b}");
        }
        let test = pinhole_samples(200, 2);
        let abs_rel = test
            .iter()
            .map(|s| (svr_predict(m, s.width, s.height) - s.distance).abs() / s.distance)
            .sum::<f64>()
            / test.len() as f64;
        assert!(abs_rel < 0.05, "AbsRel {abs_rel}");
        let tight = SvrParams { c: 1000.0, gamma: Some(5.0), ..SvrParams::default() };
        let well_fit = svr_fit(&train, &tight).unwrap().model;
        for s in &train {
            assert!(residual(&well_fit, s) <= well_fit.epsilon + 0.1, "{s:?}");
        }

        let (lo, hi) = train.iter().fold((f64::MAX, 0.0f64), |(a, b), s| (a.min(s.height), b.max(s.height)));
        let curve: Vec<(f64, f64)> = (0..=500)
            .map(|i| lo + (hi - lo) * i as f64 / 500.0)
            .map(|h| (h, svr_predict(m, 0.5 * h, h)))
            .collect();
        for w in curve.windows(2) {
            assert!(w[1].1 < w[0].1, "not decreasing at h={}", w[1].0);
        }
    }

    #[test]
    fn objective_never_increases() {
        let fit = svr_fit(&pinhole_samples(120, 3), &SvrParams::default()).unwrap();
        assert!(fit.iterations > 10);
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn order_and_duplication_invariance() {
        let params = SvrParams { c: 1000.0, gamma: Some(5.0), tolerance: 1e-10, ..SvrParams::default() };
        let s = pinhole_samples(40, 4);
        let a = svr_fit(&s, &params).unwrap().model;
        // With no coefficient at the bound the solution is the tube-constrained
        // minimum-norm fit, which does not depend on how often a sample repeats.
        assert!(a.coef.iter().all(|b| b.abs() < a.c - 1e-6));
        let mut rev = s.clone();
        rev.reverse();
        let b = svr_fit(&rev, &params).unwrap().model;
        assert_eq!(a, b);
        let mut dup = s.clone();
        dup.extend_from_slice(&s);
        let c = svr_fit(&dup, &params).unwrap().model;
        for t in pinhole_samples(50, 5) {
            let (pa, pc) = (svr_predict(&a, t.width, t.height), svr_predict(&c, t.width, t.height));
            assert!((pa - pc).abs() < 1e-6, "{pa} vs {pc}");
        }
        let defaults = SvrParams::default();
        assert_eq!(
            svr_fit(&s, &defaults).unwrap().model.gamma,
            svr_fit(&dup, &defaults).unwrap().model.gamma
        );
    }

    #[test]
    fn container_round_trip() {
        let m = svr_fit(&pinhole_samples(30, 6), &SvrParams::default()).unwrap().model;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svr.bin");
        save_svr(&path, &m).unwrap();
        assert_eq!(load_svr(&path).unwrap(), m);
    }
}
