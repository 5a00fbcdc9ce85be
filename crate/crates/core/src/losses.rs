//! Training objectives: smooth-L1 distance loss, cross-entropy, the
//! distance-weighted projection loss and their weighted combinations, each
//! with gradients with respect to the head outputs. Batch losses are means
//! over objects.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_point, project_point_with_jacobian, GeometryError, Pixel, Point3, ProjectionMatrix};
use crate::nnet::{HeadOutputs, Mode, OutputGrads, ParamSet};

/// Smoothing of the pixel-offset norm used for projection-loss gradients.
pub const PROJECTION_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("ground-truth distance {0} is not positive")]
    NonPositiveTarget(f64),
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("projection of object {index}: {source}")]
    Projection { index: usize, source: GeometryError },
    #[error("keypoint predictions or targets missing")]
    MissingKeypoints,
    #[error("gradient mismatch in {group}: relative error {rel_error:e} exceeds {tolerance:e}")]
    GradMismatch {
        group: String,
        rel_error: f64,
        tolerance: f64,
    },
    #[error("loss weights must be non-negative")]
    NegativeWeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossWeights {
    pub const BASE: LossWeights = LossWeights {
        lambda1: 1.0,
        lambda2: 0.0,
    };
    pub const ENHANCED: LossWeights = LossWeights {
        lambda1: 10.0,
        lambda2: 0.05,
    };

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Base => Self::BASE,
            Mode::Enhanced => Self::ENHANCED,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda1 >= 0.0 && self.lambda2 >= 0.0 {
            Ok(())
        } else {
            Err(LossError::NegativeWeight)
        }
    }
}

/// Per-object training targets of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    pub distances: Vec<f64>,
    pub labels: Vec<usize>,
    pub keypoints: Option<Vec<Pixel>>,
}

impl BatchTargets {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }
}

fn check_len(what: &'static str, got: usize, expected: usize) -> Result<(), LossError> {
    if got == expected {
        Ok(())
    } else {
        Err(LossError::LengthMismatch { what, got, expected })
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Derivative of [`smooth_l1`], clamped to `[-1, 1]`.
pub fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

pub fn distance_loss(preds: &[f64], targets: &[f64]) -> Result<f64, LossError> {
    distance_loss_grad(preds, targets).map(|(v, _)| v)
}

/// Loss value and its gradient with respect to each predicted distance.
pub fn distance_loss_grad(preds: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
    check_len("distance predictions", preds.len(), targets.len())?;
    let n = preds.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(preds.len());
    for (&d, &t) in preds.iter().zip(targets) {
        let r = t - d;
        total += smooth_l1(r);
        grad.push(-smooth_l1_grad(r) / n);
    }
    Ok((total / n, grad))
}

/// `-ln softmax(logits)[label]` in log-sum-exp form.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn classification_loss(logits: &[Vec<f64>], labels: &[usize]) -> Result<f64, LossError> {
    classification_loss_grad(logits, labels).map(|(v, _)| v)
}

pub fn classification_loss_grad(
    logits: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, Vec<Vec<f64>>), LossError> {
    check_len("class logits", logits.len(), labels.len())?;
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        if y >= z.len() {
            return Err(LossError::BadLabel {
                label: y,
                classes: z.len(),
            });
        }
        total += cross_entropy(z, y);
        let mut g = crate::nnet::layers::softmax(z);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v /= n);
        grads.push(g);
    }
    Ok((total / n, grads))
}

/// Mean over objects of `‖project(P, (X, Y, D)) − k*‖ / d*`.
pub fn projection_loss(
    p: &ProjectionMatrix,
    points: &[[f64; 3]],
    keypoints: &[Pixel],
    distances: &[f64],
) -> Result<f64, LossError> {
    check_len("keypoint targets", keypoints.len(), points.len())?;
    check_len("distance targets", distances.len(), points.len())?;
    let mut total = 0.0;
    for (i, ((pt, k), &d)) in points.iter().zip(keypoints).zip(distances).enumerate() {
        if d <= 0.0 {
            return Err(LossError::NonPositiveTarget(d));
        }
        let px = project_point(p, &Point3::from(*pt))
            .map_err(|source| LossError::Projection { index: i, source })?;
        total += px.distance_to(k) / d;
    }
    Ok(total / points.len() as f64)
}

/// Exact loss value plus gradients with respect to `(X, Y, D)` of each
/// object. The gradients use the smoothed norm `sqrt(‖r‖² + ε²)`.
pub fn projection_loss_grad(
    p: &ProjectionMatrix,
    points: &[[f64; 3]],
    keypoints: &[Pixel],
    distances: &[f64],
) -> Result<(f64, Vec<[f64; 3]>), LossError> {
    check_len("keypoint targets", keypoints.len(), points.len())?;
    check_len("distance targets", distances.len(), points.len())?;
    let n = points.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(points.len());
    for (i, ((pt, k), &d)) in points.iter().zip(keypoints).zip(distances).enumerate() {
        if d <= 0.0 {
            return Err(LossError::NonPositiveTarget(d));
        }
        let (px, jac) = project_point_with_jacobian(p, &Point3::from(*pt))
            .map_err(|source| LossError::Projection { index: i, source })?;
        let (ru, rv) = (px.u - k.u, px.v - k.v);
        total += ru.hypot(rv) / d;
        let smooth = (ru * ru + rv * rv + PROJECTION_NORM_EPS * PROJECTION_NORM_EPS).sqrt();
        let (gu, gv) = (ru / smooth / d / n, rv / smooth / d / n);
        grads.push([
            gu * jac[0][0] + gv * jac[1][0],
            gu * jac[0][1] + gv * jac[1][1],
            gu * jac[0][2] + gv * jac[1][2],
        ]);
    }
    Ok((total / n, grads))
}

pub fn base_objective(l_cla: f64, l_dist: f64, w: &LossWeights) -> f64 {
    l_cla + w.lambda1 * l_dist
}

pub fn enhanced_objective(l_cla: f64, l_dist: f64, l_proj: f64, w: &LossWeights) -> f64 {
    l_cla + w.lambda1 * l_dist + w.lambda2 * l_proj
}

/// Individual terms and the weighted total of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub classification: f64,
    pub distance: f64,
    pub projection: f64,
    pub total: f64,
}

/// What the objective includes besides the distance term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSpec {
    pub mode: Mode,
    pub weights: LossWeights,
    pub use_classifier: bool,
}

/// Evaluates the configured objective on head outputs and returns the
/// gradients that [`crate::nnet::Model::backward`] consumes. In enhanced mode
/// `p` must be the camera matrix of the image the outputs came from.
pub fn objective_with_grads(
    spec: &ObjectiveSpec,
    p: Option<&ProjectionMatrix>,
    out: &HeadOutputs,
    targets: &BatchTargets,
) -> Result<(LossTerms, OutputGrads), LossError> {
    spec.weights.validate()?;
    let n = targets.len();
    check_len("head outputs", out.len(), n)?;
    check_len("class labels", targets.labels.len(), n)?;
    if let Some(&d) = targets.distances.iter().find(|&&d| d <= 0.0) {
        return Err(LossError::NonPositiveTarget(d));
    }
    let (l_dist, mut g_dist) = distance_loss_grad(&out.distances, &targets.distances)?;
    g_dist.iter_mut().for_each(|g| *g *= spec.weights.lambda1);
    let mut terms = LossTerms {
        distance: l_dist,
        ..Default::default()
    };
    let class_grads = if spec.use_classifier {
        let (l, g) = classification_loss_grad(&out.class_logits, &targets.labels)?;
        terms.classification = l;
        Some(g)
    } else {
        None
    };
    let mut kp_grads = None;
    if spec.mode == Mode::Enhanced {
        let (Some(kp), Some(kt), Some(p)) = (&out.keypoints, &targets.keypoints, p) else {
            return Err(LossError::MissingKeypoints);
        };
        let points: Vec<[f64; 3]> = kp
            .iter()
            .zip(&out.distances)
            .map(|(k, &d)| [k[0], k[1], d])
            .collect();
        let (l, g) = projection_loss_grad(p, &points, kt, &targets.distances)?;
        terms.projection = l;
        let w2 = spec.weights.lambda2;
        for (gd, gp) in g_dist.iter_mut().zip(&g) {
            *gd += w2 * gp[2];
        }
        kp_grads = Some(g.iter().map(|gp| [w2 * gp[0], w2 * gp[1]]).collect());
    }
    terms.total = match spec.mode {
        Mode::Base => base_objective(terms.classification, l_dist, &spec.weights),
        Mode::Enhanced => {
            enhanced_objective(terms.classification, l_dist, terms.projection, &spec.weights)
        }
    };
    Ok((
        terms,
        OutputGrads {
            distance: g_dist,
            keypoint: kp_grads,
            class_logits: class_grads,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Entries sampled per group; groups at most this large are checked in
    /// full.
    pub max_entries_per_group: usize,
    /// Gradient norms below this count as zero.
    pub zero_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            max_entries_per_group: 24,
            zero_floor: 1e-9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub entries: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
}

/// Compares `analytic` with central differences of `objective` around
/// `params`, group by group. The relative error of a group is
/// `‖a − n‖ / max(‖a‖, ‖n‖)` over the sampled entries.
pub fn grad_check<F>(
    mut objective: F,
    params: &ParamSet,
    analytic: &ParamSet,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, LossError>
where
    F: FnMut(&ParamSet) -> f64,
{
    assert!(params.same_layout(analytic), "gradient layout differs from parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut groups = Vec::with_capacity(params.len());
    let mut worst: Option<GroupCheck> = None;
    for g in 0..params.len() {
        let len = params.tensor(g).len();
        let picks: Vec<usize> = if len <= cfg.max_entries_per_group {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, cfg.max_entries_per_group).into_vec();
            v.sort_unstable();
            v
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &k in &picks {
            let orig = work.tensor(g).data[k];
            work.tensor_mut(g).data[k] = orig + cfg.step;
            let up = objective(&work);
            work.tensor_mut(g).data[k] = orig - cfg.step;
            let down = objective(&work);
            work.tensor_mut(g).data[k] = orig;
            let num = (up - down) / (2.0 * cfg.step);
            let ana = analytic.tensor(g).data[k];
            diff2 += (num - ana) * (num - ana);
            a2 += ana * ana;
            n2 += num * num;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        let rel_error = if scale < cfg.zero_floor { 0.0 } else { diff2.sqrt() / scale };
        let check = GroupCheck {
            group: params.name(g).to_string(),
            entries: picks.len(),
            rel_error,
        };
        if worst.as_ref().is_none_or(|w| rel_error > w.rel_error) {
            worst = Some(check.clone());
        }
        groups.push(check);
    }
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    if let Some(w) = worst.filter(|w| w.rel_error > cfg.tolerance) {
        return Err(LossError::GradMismatch {
            group: w.group,
            rel_error: w.rel_error,
            tolerance: cfg.tolerance,
        });
    }
    Ok(GradCheckReport {
        groups,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3x4;

    fn p100() -> ProjectionMatrix {
        ProjectionMatrix::new(
            Matrix3x4::new(100.0, 0.0, 50.0, 0.0, 0.0, 100.0, 50.0, 0.0, 0.0, 0.0, 1.0, 0.0),
            100,
            100,
        )
        .unwrap()
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        // value and slope continuity at the joint
        assert_abs_diff_eq!(smooth_l1(1.0 - 1e-12), smooth_l1(1.0), epsilon = 1e-11);
        assert_eq!(smooth_l1_grad(1.0), 1.0);
        assert_eq!(smooth_l1_grad(-7.0), -1.0);
    }

    #[test]
    fn distance_loss_examples() {
        assert_eq!(distance_loss(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(distance_loss(&[5.5], &[5.0]).unwrap(), 0.125);
        assert_eq!(distance_loss(&[1.0, 3.0], &[1.0, 5.0]).unwrap(), 0.75);
        assert!(matches!(
            distance_loss(&[1.0], &[1.0, 2.0]),
            Err(LossError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn classification_loss_examples() {
        let inf = f64::NEG_INFINITY;
        assert_eq!(classification_loss(&[vec![0.0, inf, inf]], &[0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            classification_loss(&[vec![0.0; 9]], &[4]).unwrap(),
            9f64.ln(),
            epsilon = 1e-12
        );
        let half = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        assert_abs_diff_eq!(
            classification_loss(&[half.to_vec()], &[0]).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
        // stable for large logits
        let big = classification_loss(&[vec![1000.0, 0.0]], &[1]).unwrap();
        assert_abs_diff_eq!(big, 1000.0, epsilon = 1e-9);
    }

    #[test]
    fn projection_loss_examples() {
        let p = p100();
        let l = projection_loss(&p, &[[0.0, 0.0, 10.0]], &[Pixel::new(60.0, 50.0)], &[10.0]).unwrap();
        assert_abs_diff_eq!(l, 1.0, epsilon = 1e-12);
        // exact hit
        let l0 = projection_loss(&p, &[[1.0, -0.5, 8.0]], &[Pixel::new(62.5, 43.75)], &[8.0]).unwrap();
        assert_eq!(l0, 0.0);
        // doubling d* halves the contribution
        let l2 = projection_loss(&p, &[[0.0, 0.0, 10.0]], &[Pixel::new(60.0, 50.0)], &[20.0]).unwrap();
        assert_abs_diff_eq!(l2, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn weighted_sums() {
        assert_eq!(base_objective(2.0, 3.0, &LossWeights::BASE), 5.0);
        assert_eq!(
            base_objective(2.0, 3.0, &LossWeights { lambda1: 0.0, lambda2: 0.0 }),
            2.0
        );
        assert_abs_diff_eq!(enhanced_objective(1.0, 2.0, 4.0, &LossWeights::ENHANCED), 21.2, epsilon = 1e-12);
        let w = LossWeights { lambda1: 10.0, lambda2: 0.0 };
        assert_eq!(enhanced_objective(1.0, 2.0, 4.0, &w), base_objective(1.0, 2.0, &w));
        assert_eq!(
            enhanced_objective(1.5, 0.25, 7.0, &LossWeights { lambda1: 1.0, lambda2: 0.0 }),
            base_objective(1.5, 0.25, &LossWeights::BASE)
        );
    }

    #[test]
    fn losses_are_means() {
        let preds = [1.0, 4.0, 9.0];
        let tgts = [2.0, 4.5, 5.0];
        let once = distance_loss(&preds, &tgts).unwrap();
        let twice = distance_loss(&[preds, preds].concat(), &[tgts, tgts].concat()).unwrap();
        assert_abs_diff_eq!(once, twice, epsilon = 1e-15);
        let rev: Vec<f64> = preds.iter().rev().copied().collect();
        let rev_t: Vec<f64> = tgts.iter().rev().copied().collect();
        assert_abs_diff_eq!(once, distance_loss(&rev, &rev_t).unwrap(), epsilon = 1e-15);
    }

    #[test]
    fn projection_grad_matches_central_differences() {
        let p = p100();
        let pts = [[0.7, -0.3, 9.0], [-2.0, 1.1, 15.0]];
        let kps = [Pixel::new(61.0, 47.0), Pixel::new(40.0, 57.0)];
        let ds = [8.5, 14.0];
        let (_, g) = projection_loss_grad(&p, &pts, &kps, &ds).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for c in 0..3 {
                let mut up = pts;
                up[i][c] += h;
                let mut dn = pts;
                dn[i][c] -= h;
                let num = (projection_loss(&p, &up, &kps, &ds).unwrap()
                    - projection_loss(&p, &dn, &kps, &ds).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(num, g[i][c], epsilon = 1e-7);
            }
        }
    }

    mod chain {
        use super::*;
        use crate::nnet::{BackboneConfig, Model, ModelConfig, RoiFeature, Variant};
        use rand::Rng;

        fn setup(seed: u64) -> (Model, Vec<RoiFeature>, BatchTargets) {
            let cfg = ModelConfig {
                backbone: BackboneConfig {
                    variant: Variant::Tiny,
                    output_stride: 4,
                    channels: vec![2, 3],
                },
                roi_grid: 2,
                head_hidden: [6, 5],
                categories: vec!["a".into(), "b".into(), "c".into()],
            };
            let model = Model::new(cfg, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats = (0..3)
                .map(|_| RoiFeature {
                    values: (0..12).map(|_| rng.random_range(0.0..2.0)).collect(),
                })
                .collect();
            let targets = BatchTargets {
                distances: vec![3.0, 7.5, 12.0],
                labels: vec![0, 2, 1],
                keypoints: Some(vec![Pixel::new(55.0, 52.0), Pixel::new(30.0, 61.0), Pixel::new(70.0, 45.0)]),
            };
            (model, feats, targets)
        }

        fn value(model: &Model, feats: &[RoiFeature], spec: &ObjectiveSpec, t: &BatchTargets) -> f64 {
            let (out, _) = model.heads_forward(feats, spec.mode);
            objective_with_grads(spec, Some(&p100()), &out, t).unwrap().0.total
        }

        #[test]
        fn head_chain_gradients_pass_and_corruption_is_caught() {
            let (model, feats, t) = setup(3);
            let spec = ObjectiveSpec {
                mode: Mode::Enhanced,
                weights: LossWeights::ENHANCED,
                use_classifier: true,
            };
            let (out, tape) = model.heads_forward(&feats, spec.mode);
            let (_, og) = objective_with_grads(&spec, Some(&p100()), &out, &t).unwrap();
            let (grads, _) = model.heads_backward(&tape, &og);
            let f = |p: &ParamSet| {
                let m = Model::from_params(model.config().clone(), p.clone()).unwrap();
                value(&m, &feats, &spec, &t)
            };
            let cfg = GradCheckConfig::default();
            let report = grad_check(f, model.params(), &grads, &cfg).unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");

            let mut bad = grads.clone();
            bad.get_mut("distance.fc2.weight").unwrap().data[0] += 0.5;
            let err = grad_check(f, model.params(), &bad, &cfg).unwrap_err();
            assert!(matches!(err, LossError::GradMismatch { ref group, .. } if group == "distance.fc2.weight"));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn smooth_l1_even_nonnegative(x in -50.0..50.0f64) {
                prop_assert_eq!(smooth_l1(x), smooth_l1(-x));
                prop_assert!(smooth_l1(x) >= 0.0);
                prop_assert_eq!(smooth_l1(x) == 0.0, x == 0.0);
                prop_assert!(smooth_l1_grad(x).abs() <= 1.0);
            }

            #[test]
            fn exact_projection_means_zero_loss(
                x in -5.0..5.0f64, y in -2.0..2.0f64, d in 2.0..80.0f64, dstar in 1.0..80.0f64,
            ) {
                let p = p100();
                let k = project_point(&p, &Point3::new(x, y, d)).unwrap();
                let l = projection_loss(&p, &[[x, y, d]], &[k], &[dstar]).unwrap();
                prop_assert_eq!(l, 0.0);
            }
        }
    }
}
