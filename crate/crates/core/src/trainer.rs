//! ADAM training loop, learning-rate schedule, inference entry points and a
//! latency benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_builder::{flip_bbox, flip_pixel, SceneSample};
use crate::geometry::{flip_projection, Pixel, ProjectionMatrix};
use crate::image::{ImageError, RgbImage};
use crate::kitti_io::{parse_calib_file, BBox2, ExtendedAnnotation, KittiError, DONT_CARE};
use crate::losses::{objective_with_grads, BatchTargets, LossError, LossTerms, LossWeights, ObjectiveSpec};
use crate::nnet::{Mode, Model, ModelConfig, NnetError, ParamSet, Variant};

/// KITTI object categories, used as the default classifier label set.
pub const KITTI_CATEGORIES: [&str; 8] = [
    "Car",
    "Van",
    "Truck",
    "Pedestrian",
    "Person_sitting",
    "Cyclist",
    "Tram",
    "Misc",
];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("image {0} lacks keypoint targets or a projection matrix required in enhanced mode")]
    MissingKeypointTargets(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("category {0:?} is not in the model's label set")]
    UnknownCategory(String),
    #[error(transparent)]
    Nnet(#[from] NnetError),
    #[error("image {image_id}: {source}")]
    Loss { image_id: String, source: LossError },
    #[error("non-finite parameters after step {0}")]
    Diverged(usize),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: ImageError },
    #[error("{path}: {source}")]
    Calib { path: PathBuf, source: KittiError },
}

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Parse(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Training hyperparameters. Config files are flat TOML tables with these
/// keys; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub variant: Variant,
    pub learning_rate: f64,
    pub decay_start_epoch: usize,
    pub decay_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_images: usize,
    pub seed: u64,
    /// Defaults to 1.0 in base mode and 10.0 in enhanced mode.
    pub lambda1: Option<f64>,
    /// Defaults to 0.05 in enhanced mode; unused in base mode.
    pub lambda2: Option<f64>,
    pub use_flip_augmentation: bool,
    pub train_classifier: bool,
    pub include_dont_care: bool,
    pub roi_grid: usize,
    /// Classifier labels; defaults to the KITTI categories plus any other
    /// category found in the training set.
    pub categories: Option<Vec<String>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Enhanced,
            variant: Variant::Tiny,
            learning_rate: 1e-3,
            decay_start_epoch: 10,
            decay_rate: 0.95,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            epochs: 20,
            batch_images: 1,
            seed: 0,
            lambda1: None,
            lambda2: None,
            use_flip_augmentation: true,
            train_classifier: true,
            include_dont_care: false,
            roi_grid: 7,
            categories: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must lie in (0, 1]");
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad("ADAM betas must lie in [0, 1)");
            }
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        if self.batch_images == 0 {
            return bad("batch_images must be at least 1");
        }
        if self.roi_grid == 0 {
            return bad("roi_grid must be positive");
        }
        self.loss_weights()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn loss_weights(&self) -> LossWeights {
        let d = LossWeights::for_mode(self.mode);
        LossWeights {
            lambda1: self.lambda1.unwrap_or(d.lambda1),
            lambda2: match self.mode {
                Mode::Base => 0.0,
                Mode::Enhanced => self.lambda2.unwrap_or(d.lambda2),
            },
        }
    }

    /// Learning rate of a 1-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let k = epoch.saturating_sub(self.decay_start_epoch);
        self.learning_rate * self.decay_rate.powi(k as i32)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigFileError> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate().map_err(|e| ConfigFileError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }
}

/// Bias-corrected ADAM.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update. Groups with `frozen[i]` set are left untouched,
    /// moments included.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, frozen: &[bool]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for g in 0..params.len() {
            if frozen.get(g).copied().unwrap_or(false) {
                continue;
            }
            let eps = self.epsilon;
            let grad = &grads.tensor(g).data;
            let m = &mut self.m.tensor_mut(g).data;
            let v = &mut self.v.tensor_mut(g).data;
            let p = &mut params.tensor_mut(g).data;
            for (((p, m), v), &gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainObject {
    pub bbox: BBox2,
    pub category: String,
    pub distance: f64,
    pub keypoint: Option<Pixel>,
}

/// One training image with its objects and, for enhanced mode, its camera
/// matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image_id: String,
    pub image: RgbImage,
    pub projection: Option<ProjectionMatrix>,
    pub objects: Vec<TrainObject>,
}

impl TrainSample {
    pub fn flipped(&self) -> TrainSample {
        let w = self.image.width();
        TrainSample {
            image_id: format!("{}-flip", self.image_id),
            image: self.image.flip_horizontal(),
            projection: self.projection.as_ref().map(flip_projection),
            objects: self
                .objects
                .iter()
                .map(|o| TrainObject {
                    bbox: flip_bbox(&o.bbox, w),
                    category: o.category.clone(),
                    distance: o.distance,
                    keypoint: o.keypoint.map(|k| flip_pixel(&k, w)),
                })
                .collect(),
        }
    }
}

fn object_of(a: &ExtendedAnnotation) -> TrainObject {
    TrainObject {
        bbox: a.label.bbox,
        category: a.label.category.clone(),
        distance: a.distance,
        keypoint: Some(a.keypoint),
    }
}

pub fn samples_from_scenes(scenes: &[SceneSample]) -> Vec<TrainSample> {
    scenes
        .iter()
        .map(|s| TrainSample {
            image_id: s.image_id.clone(),
            image: s.image.clone(),
            projection: Some(s.calib.p2.clone()),
            objects: s.annotations.iter().map(object_of).collect(),
        })
        .collect()
}

/// Groups annotations by image, in order of first appearance.
pub fn group_by_image(anns: &[ExtendedAnnotation]) -> Vec<(String, Vec<&ExtendedAnnotation>)> {
    let mut order: Vec<(String, Vec<&ExtendedAnnotation>)> = Vec::new();
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for a in anns {
        match index.get(a.image_id.as_str()) {
            Some(&i) => order[i].1.push(a),
            None => {
                index.insert(&a.image_id, order.len());
                order.push((a.image_id.clone(), vec![a]));
            }
        }
    }
    order
}

/// Loads `images_dir/{id}.png` for every annotated image. When `calib_dir`
/// is given, `calib_dir/{id}.txt` supplies the projection matrix.
pub fn load_samples(
    anns: &[ExtendedAnnotation],
    images_dir: &Path,
    calib_dir: Option<&Path>,
) -> Result<Vec<TrainSample>, DataError> {
    let mut out = Vec::new();
    for (id, objs) in group_by_image(anns) {
        let path = images_dir.join(format!("{id}.png"));
        let image = RgbImage::load(&path).map_err(|source| DataError::Image { path, source })?;
        let projection = match calib_dir {
            Some(dir) => {
                let path = dir.join(format!("{id}.txt"));
                let text = fs::read_to_string(&path).map_err(|source| DataError::Io {
                    path: path.clone(),
                    source,
                })?;
                let calib = parse_calib_file(&text, image.width(), image.height())
                    .map_err(|source| DataError::Calib { path, source })?;
                Some(calib.p2)
            }
            None => None,
        };
        out.push(TrainSample {
            image_id: id,
            image,
            projection,
            objects: objs.into_iter().map(object_of).collect(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub objects: usize,
    /// Means of the per-step loss terms.
    pub loss: LossTerms,
    pub seconds: f64,
}

impl EpochStats {
    /// Fixed-order log line.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={:.9} steps={} objects={} loss={:.6} cla={:.6} dist={:.6} proj={:.6} secs={:.2}",
            self.epoch,
            self.learning_rate,
            self.steps,
            self.objects,
            self.loss.total,
            self.loss.classification,
            self.loss.distance,
            self.loss.projection,
            self.seconds
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Total objective of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainReport {
    pub fn learning_rates(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.learning_rate).collect()
    }
}

fn label_set(cfg: &TrainConfig, data: &[TrainSample]) -> Vec<String> {
    let mut cats: Vec<String> = match &cfg.categories {
        Some(c) => c.clone(),
        None => KITTI_CATEGORIES.iter().map(|s| s.to_string()).collect(),
    };
    if cfg.categories.is_none() {
        let extra: BTreeSet<&str> = data
            .iter()
            .flat_map(|s| &s.objects)
            .map(|o| o.category.as_str())
            .filter(|c| *c != DONT_CARE || cfg.include_dont_care)
            .filter(|c| !cats.iter().any(|k| k == c))
            .collect();
        cats.extend(extra.into_iter().map(String::from));
    }
    cats
}

struct Prepared<'a> {
    sample: &'a TrainSample,
    boxes: Vec<BBox2>,
    targets: BatchTargets,
}

fn prepare<'a>(
    s: &'a TrainSample,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
) -> Result<Option<Prepared<'a>>, TrainError> {
    let objs: Vec<&TrainObject> = s
        .objects
        .iter()
        .filter(|o| cfg.include_dont_care || o.category != DONT_CARE)
        .collect();
    if objs.is_empty() {
        return Ok(None);
    }
    let labels = objs
        .iter()
        .map(|o| {
            model_cfg
                .category_index(&o.category)
                .ok_or_else(|| TrainError::UnknownCategory(o.category.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let keypoints = match cfg.mode {
        Mode::Base => None,
        Mode::Enhanced => {
            let k: Option<Vec<Pixel>> = objs.iter().map(|o| o.keypoint).collect();
            match (k, &s.projection) {
                (Some(k), Some(_)) => Some(k),
                _ => return Err(TrainError::MissingKeypointTargets(s.image_id.clone())),
            }
        }
    };
    Ok(Some(Prepared {
        sample: s,
        boxes: objs.iter().map(|o| o.bbox).collect(),
        targets: BatchTargets {
            distances: objs.iter().map(|o| o.distance).collect(),
            labels,
            keypoints,
        },
    }))
}

/// Trains a fresh model. `on_epoch` runs after every epoch, e.g. to log or
/// write a checkpoint.
pub fn train_with<F>(
    data: &[TrainSample],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Model, TrainReport), TrainError>
where
    F: FnMut(&EpochStats, &Model),
{
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model_cfg = ModelConfig::new(cfg.variant, label_set(cfg, data));
    model_cfg.roi_grid = cfg.roi_grid;
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;

    let flipped: Vec<TrainSample> = if cfg.use_flip_augmentation {
        data.iter().map(TrainSample::flipped).collect()
    } else {
        Vec::new()
    };
    let mut pool = Vec::new();
    for s in data.iter().chain(&flipped) {
        if let Some(p) = prepare(s, cfg, &model_cfg)? {
            pool.push(p);
        }
    }
    if pool.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let spec = ObjectiveSpec {
        mode: cfg.mode,
        weights: cfg.loss_weights(),
        use_classifier: cfg.train_classifier,
    };
    let frozen: Vec<bool> = model
        .params()
        .names()
        .iter()
        .map(|n| {
            (!cfg.train_classifier && n.starts_with("classifier."))
                || (cfg.mode == Mode::Base && n.starts_with("keypoint."))
        })
        .collect();
    let mut adam = Adam::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.learning_rate_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut sums = LossTerms::default();
        let (mut steps, mut objects) = (0, 0);
        for batch in order.chunks(cfg.batch_images) {
            let mut grads: Option<ParamSet> = None;
            let mut step_total = 0.0;
            for &i in batch {
                let p = &pool[i];
                let (out, tape) = model.forward_train(&p.sample.image, &p.boxes, cfg.mode)?;
                let (terms, og) =
                    objective_with_grads(&spec, p.sample.projection.as_ref(), &out, &p.targets)
                        .map_err(|source| TrainError::Loss {
                            image_id: p.sample.image_id.clone(),
                            source,
                        })?;
                let g = model.backward(&tape, &og);
                match grads.as_mut() {
                    Some(acc) => acc.add_scaled(&g, 1.0),
                    None => grads = Some(g),
                }
                sums.total += terms.total;
                sums.classification += terms.classification;
                sums.distance += terms.distance;
                sums.projection += terms.projection;
                step_total += terms.total;
                objects += p.targets.len();
            }
            let mut grads = grads.expect("non-empty batch");
            if batch.len() > 1 {
                grads.scale(1.0 / batch.len() as f64);
            }
            adam.step(model.params_mut(), &grads, lr, &frozen);
            steps += 1;
            report.step_losses.push(step_total / batch.len() as f64);
        }
        if !model.params().is_finite() {
            return Err(TrainError::Diverged(report.step_losses.len()));
        }
        let n = order.len() as f64;
        let stats = EpochStats {
            epoch,
            learning_rate: lr,
            steps,
            objects,
            loss: LossTerms {
                total: sums.total / n,
                classification: sums.classification / n,
                distance: sums.distance / n,
                projection: sums.projection / n,
            },
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats, &model);
        report.epochs.push(stats);
    }
    Ok((model, report))
}

pub fn train(data: &[TrainSample], cfg: &TrainConfig) -> Result<(Model, TrainReport), TrainError> {
    train_with(data, cfg, |_, _| {})
}

/// Distance and category name for every box. The keypoint head is not used
/// and no camera parameters are involved.
pub fn predict(model: &Model, image: &RgbImage, boxes: &[BBox2]) -> Result<Vec<(f64, String)>, NnetError> {
    let cats = &model.config().categories;
    Ok(model
        .forward(image, boxes, Mode::Base)?
        .into_iter()
        .map(|p| (p.distance, cats[p.category_index()].clone()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub frames: usize,
    pub warmup: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
    pub samples_ms: Vec<f64>,
}

/// Times `frames` single-image predictions after `warmup` untimed ones,
/// cycling through `inputs`.
pub fn benchmark(
    model: &Model,
    inputs: &[(RgbImage, Vec<BBox2>)],
    warmup: usize,
    frames: usize,
) -> Result<LatencyReport, NnetError> {
    assert!(!inputs.is_empty(), "benchmark needs at least one input");
    for i in 0..warmup {
        let (img, boxes) = &inputs[i % inputs.len()];
        predict(model, img, boxes)?;
    }
    let mut samples = Vec::with_capacity(frames);
    for i in 0..frames {
        let (img, boxes) = &inputs[i % inputs.len()];
        let t = Instant::now();
        std::hint::black_box(predict(model, img, boxes)?);
        samples.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let p95 = if sorted.is_empty() {
        0.0
    } else {
        sorted[((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1]
    };
    Ok(LatencyReport {
        frames,
        warmup,
        mean_ms: if frames == 0 { 0.0 } else { samples.iter().sum::<f64>() / frames as f64 },
        p95_ms: p95,
        max_ms: sorted.last().copied().unwrap_or(0.0),
        samples_ms: samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3;

    #[test]
    fn default_lr_trace() {
        let cfg = TrainConfig::default();
        for e in 1..=10 {
            assert_eq!(cfg.learning_rate_at(e), 0.001);
        }
        assert_abs_diff_eq!(cfg.learning_rate_at(11), 0.00095, epsilon = 1e-15);
        assert_abs_diff_eq!(cfg.learning_rate_at(12), 0.0009025, epsilon = 1e-15);
    }

    #[test]
    fn adam_matches_hand_rolled_reference() {
        // minimize (x - 3)^2 from x = 0
        let mut p = ParamSet::new();
        p.push("x", crate::nnet::Tensor { shape: vec![1], data: vec![0.0] });
        let mut adam = Adam::new(&p, 0.5, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * (p.tensor(0).data[0] - 3.0);
            let mut gs = p.zeros_like();
            gs.tensor_mut(0).data[0] = g;
            adam.step(&mut p, &gs, 0.1, &[]);

            let gr = 2.0 * (x - 3.0);
            m = 0.5 * m + 0.5 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            let mh = m / (1.0 - 0.5f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert_abs_diff_eq!(p.tensor(0).data[0], x, epsilon = 1e-10);
        }
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let cfg = TrainConfig::from_toml_str("mode = \"base\"\nepochs = 3\nseed = 9\n").unwrap();
        assert_eq!(cfg.mode, Mode::Base);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.loss_weights(), LossWeights::BASE);
        assert!(TrainConfig::from_toml_str("epochz = 3\n").is_err());
        assert!(TrainConfig::from_toml_str("decay_rate = 1.5\n").is_err());
        assert_eq!(TrainConfig::default().loss_weights(), LossWeights::ENHANCED);
    }

    fn tiny_sample(id: &str) -> TrainSample {
        let k = Matrix3::new(60.0, 0.0, 32.0, 0.0, 60.0, 16.0, 0.0, 0.0, 1.0);
        let mut img = RgbImage::new(64, 32);
        for y in 0..32 {
            for x in 0..64 {
                img.set(x, y, [x as f32 / 64.0, y as f32 / 32.0, 0.3]);
            }
        }
        TrainSample {
            image_id: id.into(),
            image: img,
            projection: Some(ProjectionMatrix::from_intrinsics(&k, 64, 32).unwrap()),
            objects: vec![
                TrainObject {
                    bbox: BBox2::new(4.0, 8.0, 20.0, 28.0),
                    category: "Car".into(),
                    distance: 8.0,
                    keypoint: Some(Pixel::new(12.0, 20.0)),
                },
                TrainObject {
                    bbox: BBox2::new(40.0, 10.0, 50.0, 20.0),
                    category: DONT_CARE.into(),
                    distance: 30.0,
                    keypoint: Some(Pixel::new(45.0, 18.0)),
                },
            ],
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            roi_grid: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = vec![tiny_sample("a"), tiny_sample("b")];
        let (m1, r1) = train(&data, &quick_cfg()).unwrap();
        let (m2, r2) = train(&data, &quick_cfg()).unwrap();
        assert_eq!(r1.step_losses, r2.step_losses);
        assert_eq!(m1.params(), m2.params());
        // flip doubles the steps; DontCare objects are skipped
        assert_eq!(r1.epochs[0].steps, 4);
        assert_eq!(r1.epochs[0].objects, 4);
        assert!(r1.epochs[0].log_line().starts_with("epoch=1 lr=0.001000000 steps=4 objects=4 loss="));
    }

    #[test]
    fn frozen_classifier_is_bitwise_unchanged() {
        let data = vec![tiny_sample("a")];
        let cfg = TrainConfig {
            train_classifier: false,
            ..quick_cfg()
        };
        let (m, _) = train(&data, &cfg).unwrap();
        let init = Model::new(m.config().clone(), cfg.seed).unwrap();
        for name in ["classifier.fc.weight", "classifier.fc.bias"] {
            assert_eq!(m.params().get(name), init.params().get(name));
        }
        assert_ne!(
            m.params().get("distance.fc3.weight"),
            init.params().get("distance.fc3.weight")
        );
    }

    #[test]
    fn enhanced_mode_requires_keypoints() {
        let mut s = tiny_sample("a");
        s.projection = None;
        assert!(matches!(
            train(&[s.clone()], &quick_cfg()),
            Err(TrainError::MissingKeypointTargets(_))
        ));
        let base = TrainConfig {
            mode: Mode::Base,
            ..quick_cfg()
        };
        assert!(train(&[s], &base).is_ok());
        assert!(matches!(train(&[], &base), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn predict_contract() {
        let data = vec![tiny_sample("a")];
        let (m, _) = train(&data, &TrainConfig { epochs: 1, ..quick_cfg() }).unwrap();
        let img = &data[0].image;
        let a = BBox2::new(4.0, 8.0, 20.0, 28.0);
        let b = BBox2::new(30.0, 2.0, 60.0, 30.0);
        let two = predict(&m, img, &[a, b]).unwrap();
        let one = predict(&m, img, &[a]).unwrap();
        assert_eq!(one[0], two[0]);
        for (d, c) in &two {
            assert!(*d > 0.0);
            assert!(m.config().categories.contains(c));
        }
        let rep = benchmark(&m, &[(img.clone(), vec![a])], 2, 5).unwrap();
        assert_eq!(rep.samples_ms.len(), 5);
        assert!(rep.mean_ms <= rep.max_ms);
        assert!(rep.p95_ms <= rep.max_ms);
    }
}
