//! Convolutional feature extractor, ROI pooling and the distance, keypoint
//! and classifier heads, with hand-written backpropagation.
//!
//! The backbone is a stack of blocks `conv3×3 → ReLU → maxpool 2×2`, so four
//! blocks give an output stride of 16. Images are zero-padded on the bottom
//! and right up to a multiple of the stride before the first block; the
//! feature map therefore has `ceil(H/16) × ceil(W/16)` cells.

pub mod checkpoint;
pub mod layers;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::RgbImage;
use crate::kitti_io::BBox2;
use layers::{col2im3, gemm, im2col3, maxpool2, relu_in_place, sigmoid, softmax, softplus};
pub use params::{ParamSet, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum NnetError {
    #[error("image of {width}x{height} cannot be processed")]
    BadImageShape { width: u32, height: u32 },
    #[error("box {0:?} has no area on the feature grid")]
    DegenerateBox(BBox2),
    #[error("no boxes given")]
    NoBoxes,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter layout does not match the model config")]
    LayoutMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Tiny,
    Vgg16Shape,
    Res50Shape,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Vgg16Shape => "vgg16-shape",
            Variant::Res50Shape => "res50-shape",
        }
    }

    /// Output widths of the three fully connected layers of the distance
    /// head; the keypoint head uses the same widths with two outputs.
    pub fn head_widths(self) -> [usize; 2] {
        match self {
            Variant::Tiny => [512, 256],
            Variant::Vgg16Shape => [2048, 512],
            Variant::Res50Shape => [1024, 512],
        }
    }

    pub fn channels(self) -> [usize; 4] {
        match self {
            Variant::Tiny => [16, 32, 64, 128],
            Variant::Vgg16Shape => [64, 128, 256, 512],
            Variant::Res50Shape => [64, 128, 256, 1024],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Variant::Tiny),
            "vgg16-shape" => Ok(Variant::Vgg16Shape),
            "res50-shape" => Ok(Variant::Res50Shape),
            _ => Err(format!("unknown backbone variant {s:?}")),
        }
    }
}

/// Base predicts distance and class; enhanced also runs the keypoint head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Base,
    Enhanced,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Base => "base",
            Mode::Enhanced => "enhanced",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Mode::Base),
            "enhanced" => Ok(Mode::Enhanced),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub output_stride: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
}

impl BackboneConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            output_stride: 16,
            channels: variant.channels().to_vec(),
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().unwrap_or(&3)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Side of the square ROI pooling grid.
    pub roi_grid: usize,
    /// Widths of the two hidden layers of the distance and keypoint heads.
    pub head_hidden: [usize; 2],
    pub categories: Vec<String>,
}

impl ModelConfig {
    pub fn new(variant: Variant, categories: Vec<String>) -> Self {
        Self {
            backbone: BackboneConfig::for_variant(variant),
            roi_grid: 7,
            head_hidden: variant.head_widths(),
            categories,
        }
    }

    pub fn validate(&self) -> Result<(), NnetError> {
        let bad = |m: &str| Err(NnetError::Config(m.to_string()));
        let blocks = self.backbone.channels.len();
        if blocks == 0 || self.backbone.channels.contains(&0) {
            return bad("backbone needs at least one block with nonzero channels");
        }
        if self.backbone.output_stride != 1 << blocks {
            return bad("output stride must equal 2^blocks");
        }
        if self.roi_grid == 0 {
            return bad("roi grid must be positive");
        }
        if self.head_hidden.contains(&0) {
            return bad("head widths must be positive");
        }
        if self.categories.len() < 2 {
            return bad("the classifier needs at least two categories");
        }
        Ok(())
    }

    pub fn roi_feature_len(&self) -> usize {
        self.backbone.feature_channels() * self.roi_grid * self.roi_grid
    }

    /// Names and shapes of every trainable array, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (i, &c) in self.backbone.channels.iter().enumerate() {
            out.push((format!("backbone.conv{}.weight", i + 1), vec![c, c_in, 3, 3]));
            out.push((format!("backbone.conv{}.bias", i + 1), vec![c]));
            c_in = c;
        }
        let f = self.roi_feature_len();
        let [h1, h2] = self.head_hidden;
        for (head, n_out) in [("distance", 1), ("keypoint", 2)] {
            for (j, (i, o)) in [(f, h1), (h1, h2), (h2, n_out)].into_iter().enumerate() {
                out.push((format!("{head}.fc{}.weight", j + 1), vec![o, i]));
                out.push((format!("{head}.fc{}.bias", j + 1), vec![o]));
            }
        }
        let k = self.categories.len();
        out.push(("classifier.fc.weight".into(), vec![k, f]));
        out.push(("classifier.fc.bias".into(), vec![k]));
        out
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }
}

/// Channel-major feature map produced by the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

/// Flattened `C × G × G` pooled feature of one box.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFeature {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPrediction {
    pub distance: f64,
    /// Camera-frame `(X, Y)` in meters; only produced in enhanced mode.
    pub keypoint_xy: Option<[f64; 2]>,
    pub class_probs: Vec<f64>,
}

impl ObjectPrediction {
    pub fn category_index(&self) -> usize {
        argmax(&self.class_probs)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Feature-grid cell range `[start, end)` of a pixel interval.
fn cell_range(lo: f64, hi: f64, stride: usize, cells: usize) -> (usize, usize) {
    let s = stride as f64;
    let start = ((lo / s).floor() as usize).min(cells.saturating_sub(1));
    let end = ((hi / s).ceil() as usize).clamp(start + 1, cells);
    (start, end)
}

/// Quantized `[start, end)` sub-window `i` of `n` cells split into `g` bins.
/// Every sub-window holds at least one cell.
pub fn roi_bin(i: usize, n: usize, g: usize) -> (usize, usize) {
    ((i * n) / g, ((i + 1) * n).div_ceil(g))
}

/// Max-pools the feature cells under `bbox` into a `grid × grid` grid.
///
/// The box is clamped to the `image_width × image_height` image, divided by
/// the stride and widened to whole cells (floor of the top-left corner, ceil
/// of the bottom-right one). Each axis of that cell region is split into
/// `grid` sub-windows by [`roi_bin`].
pub fn roi_pool(
    fm: &FeatureMap,
    bbox: &BBox2,
    image_width: u32,
    image_height: u32,
    grid: usize,
) -> Result<RoiFeature, NnetError> {
    roi_pool_indexed(fm, bbox, image_width, image_height, grid).map(|(f, _)| f)
}

fn roi_pool_indexed(
    fm: &FeatureMap,
    bbox: &BBox2,
    image_width: u32,
    image_height: u32,
    grid: usize,
) -> Result<(RoiFeature, Vec<u32>), NnetError> {
    let b = bbox.clamp_to(image_width, image_height);
    if !(b.right > b.left && b.bottom > b.top) {
        return Err(NnetError::DegenerateBox(*bbox));
    }
    let (x0, x1) = cell_range(b.left, b.right, fm.stride, fm.width);
    let (y0, y1) = cell_range(b.top, b.bottom, fm.stride, fm.height);
    let (nx, ny) = (x1 - x0, y1 - y0);
    let mut values = Vec::with_capacity(fm.channels * grid * grid);
    let mut index = Vec::with_capacity(values.capacity());
    for c in 0..fm.channels {
        let plane = c * fm.height * fm.width;
        for gy in 0..grid {
            let (sy, ey) = roi_bin(gy, ny, grid);
            for gx in 0..grid {
                let (sx, ex) = roi_bin(gx, nx, grid);
                let mut best = plane + (y0 + sy) * fm.width + x0 + sx;
                for y in y0 + sy..y0 + ey {
                    for x in x0 + sx..x0 + ex {
                        let i = plane + y * fm.width + x;
                        if fm.values[i] > fm.values[best] {
                            best = i;
                        }
                    }
                }
                values.push(fm.values[best]);
                index.push(best as u32);
            }
        }
    }
    Ok((RoiFeature { values }, index))
}

/// Raw per-object outputs of the heads for a batch of boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub distance_logits: Vec<f64>,
    pub distances: Vec<f64>,
    pub keypoints: Option<Vec<[f64; 2]>>,
    pub class_logits: Vec<Vec<f64>>,
}

impl HeadOutputs {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn predictions(&self) -> Vec<ObjectPrediction> {
        (0..self.len())
            .map(|i| ObjectPrediction {
                distance: self.distances[i],
                keypoint_xy: self.keypoints.as_ref().map(|k| k[i]),
                class_probs: softmax(&self.class_logits[i]),
            })
            .collect()
    }
}

/// Loss gradients with respect to the head outputs of each object.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    /// d loss / d distance (the softplus output, not the logit).
    pub distance: Vec<f64>,
    pub keypoint: Option<Vec<[f64; 2]>>,
    pub class_logits: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
struct FcTrace {
    /// Inputs to each layer, row-major N × in.
    inputs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HeadTape {
    n: usize,
    features: Vec<f64>,
    distance: FcTrace,
    distance_logits: Vec<f64>,
    keypoint: Option<FcTrace>,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    c_in: usize,
    h: usize,
    w: usize,
    cols: Vec<f64>,
    act: Vec<f64>,
    pool_index: Vec<u32>,
}

/// Everything `backward` needs from a training forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    blocks: Vec<BlockTrace>,
    feature_shape: (usize, usize, usize),
    roi_index: Vec<Vec<u32>>,
    heads: HeadTape,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<(usize, usize)>,
    distance: [(usize, usize); 3],
    keypoint: [(usize, usize); 3],
    classifier: (usize, usize),
}

impl Layout {
    fn of(params: &ParamSet, cfg: &ModelConfig) -> Option<Layout> {
        let pair = |prefix: String| -> Option<(usize, usize)> {
            Some((
                params.index_of(&format!("{prefix}.weight"))?,
                params.index_of(&format!("{prefix}.bias"))?,
            ))
        };
        let convs = (1..=cfg.backbone.channels.len())
            .map(|i| pair(format!("backbone.conv{i}")))
            .collect::<Option<Vec<_>>>()?;
        let head = |h: &str| -> Option<[(usize, usize); 3]> {
            Some([
                pair(format!("{h}.fc1"))?,
                pair(format!("{h}.fc2"))?,
                pair(format!("{h}.fc3"))?,
            ])
        };
        Some(Layout {
            convs,
            distance: head("distance")?,
            keypoint: head("keypoint")?,
            classifier: pair("classifier.fc".into())?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl Model {
    /// Fan-in scaled uniform weights, zero biases, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NnetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in config.param_shapes() {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let a = (6.0 / fan_in as f64).sqrt();
                for v in &mut t.data {
                    *v = rng.random_range(-a..a);
                }
            }
            params.push(name, t);
        }
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, NnetError> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len()
            || expected
                .iter()
                .zip(params.iter())
                .any(|((n, s), (pn, t))| n != pn || *s != t.shape)
        {
            return Err(NnetError::LayoutMismatch);
        }
        let layout = Layout::of(&params, &config).ok_or(NnetError::LayoutMismatch)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamSet) {
        (self.config, self.params)
    }

    fn input_tensor(&self, image: &RgbImage) -> Result<(Vec<f64>, usize, usize), NnetError> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w == 0 || h == 0 {
            return Err(NnetError::BadImageShape {
                width: image.width(),
                height: image.height(),
            });
        }
        let s = self.config.backbone.output_stride;
        let (pw, ph) = (w.div_ceil(s) * s, h.div_ceil(s) * s);
        let mut x = vec![0.0; 3 * pw * ph];
        let data = image.data();
        for y in 0..h {
            for xx in 0..w {
                let src = (y * w + xx) * 3;
                for c in 0..3 {
                    x[(c * ph + y) * pw + xx] = data[src + c] as f64 - 0.5;
                }
            }
        }
        Ok((x, ph, pw))
    }

    fn run_backbone(
        &self,
        image: &RgbImage,
        mut trace: Option<&mut Vec<BlockTrace>>,
    ) -> Result<FeatureMap, NnetError> {
        let (mut x, mut h, mut w) = self.input_tensor(image)?;
        let mut c_in = 3;
        let mut cols = Vec::new();
        for &(wi, bi) in &self.layout.convs {
            let weight = self.params.tensor(wi);
            let bias = &self.params.tensor(bi).data;
            let c_out = weight.shape[0];
            let hw = h * w;
            im2col3(&x, c_in, h, w, &mut cols);
            let mut act = vec![0.0; c_out * hw];
            for (o, row) in act.chunks_mut(hw).enumerate() {
                row.fill(bias[o]);
            }
            gemm(c_out, c_in * 9, hw, &weight.data, false, &cols, false, &mut act, 1.0);
            relu_in_place(&mut act);
            let (pooled, index) = maxpool2(&act, c_out, h, w);
            if let Some(t) = trace.as_deref_mut() {
                t.push(BlockTrace {
                    c_in,
                    h,
                    w,
                    cols: std::mem::take(&mut cols),
                    act,
                    pool_index: index,
                });
            }
            x = pooled;
            c_in = c_out;
            h /= 2;
            w /= 2;
        }
        Ok(FeatureMap {
            channels: c_in,
            height: h,
            width: w,
            stride: self.config.backbone.output_stride,
            values: x,
        })
    }

    pub fn extract_features(&self, image: &RgbImage) -> Result<FeatureMap, NnetError> {
        self.run_backbone(image, None)
    }

    fn fc_chain(
        &self,
        layers: &[(usize, usize); 3],
        x0: &[f64],
        n: usize,
        trace: bool,
    ) -> (Vec<f64>, Option<FcTrace>) {
        let mut inputs = Vec::new();
        let mut x = x0.to_vec();
        for (j, &(wi, bi)) in layers.iter().enumerate() {
            let wt = self.params.tensor(wi);
            let bias = &self.params.tensor(bi).data;
            let (o, i) = (wt.shape[0], wt.shape[1]);
            let mut y = vec![0.0; n * o];
            for row in y.chunks_mut(o) {
                row.copy_from_slice(bias);
            }
            gemm(n, i, o, &x, false, &wt.data, true, &mut y, 1.0);
            if j < 2 {
                relu_in_place(&mut y);
            }
            if trace {
                inputs.push(std::mem::replace(&mut x, y));
            } else {
                x = y;
            }
        }
        (x, trace.then_some(FcTrace { inputs }))
    }

    fn classifier_logits(&self, x0: &[f64], n: usize) -> Vec<Vec<f64>> {
        let (wi, bi) = self.layout.classifier;
        let wt = self.params.tensor(wi);
        let k = wt.shape[0];
        let mut y = vec![0.0; n * k];
        for row in y.chunks_mut(k) {
            row.copy_from_slice(&self.params.tensor(bi).data);
        }
        gemm(n, wt.shape[1], k, x0, false, &wt.data, true, &mut y, 1.0);
        y.chunks(k).map(<[f64]>::to_vec).collect()
    }

    fn stack(&self, feats: &[RoiFeature]) -> Vec<f64> {
        let f = self.config.roi_feature_len();
        let mut x = Vec::with_capacity(feats.len() * f);
        for r in feats {
            assert_eq!(r.values.len(), f, "ROI feature length does not match the config");
            x.extend_from_slice(&r.values);
        }
        x
    }

    /// Runs all heads on pooled features. The keypoint head only runs in
    /// enhanced mode.
    pub fn heads_forward(&self, feats: &[RoiFeature], mode: Mode) -> (HeadOutputs, HeadTape) {
        let n = feats.len();
        let x0 = self.stack(feats);
        let (logits, dtrace) = self.fc_chain(&self.layout.distance, &x0, n, true);
        let (keypoints, ktrace) = match mode {
            Mode::Base => (None, None),
            Mode::Enhanced => {
                let (k, t) = self.fc_chain(&self.layout.keypoint, &x0, n, true);
                (Some(k.chunks(2).map(|c| [c[0], c[1]]).collect()), t)
            }
        };
        let class_logits = self.classifier_logits(&x0, n);
        let out = HeadOutputs {
            distances: logits.iter().map(|&z| softplus(z)).collect(),
            distance_logits: logits.clone(),
            keypoints,
            class_logits,
        };
        let tape = HeadTape {
            n,
            features: x0,
            distance: dtrace.expect("traced"),
            distance_logits: logits,
            keypoint: ktrace,
        };
        (out, tape)
    }

    pub fn distance_head(&self, f: &RoiFeature) -> f64 {
        softplus(self.distance_logit(f))
    }

    pub fn distance_logit(&self, f: &RoiFeature) -> f64 {
        self.fc_chain(&self.layout.distance, &self.stack(std::slice::from_ref(f)), 1, false).0[0]
    }

    pub fn keypoint_head(&self, f: &RoiFeature) -> [f64; 2] {
        let y = self.fc_chain(&self.layout.keypoint, &self.stack(std::slice::from_ref(f)), 1, false).0;
        [y[0], y[1]]
    }

    pub fn classifier_head(&self, f: &RoiFeature) -> Vec<f64> {
        softmax(&self.classifier_logits(&self.stack(std::slice::from_ref(f)), 1)[0])
    }

    pub fn roi_features(
        &self,
        fm: &FeatureMap,
        image: &RgbImage,
        boxes: &[BBox2],
    ) -> Result<Vec<RoiFeature>, NnetError> {
        boxes
            .iter()
            .map(|b| roi_pool(fm, b, image.width(), image.height(), self.config.roi_grid))
            .collect()
    }

    /// Inference: one prediction per box. No camera parameters are involved.
    pub fn forward(
        &self,
        image: &RgbImage,
        boxes: &[BBox2],
        mode: Mode,
    ) -> Result<Vec<ObjectPrediction>, NnetError> {
        if boxes.is_empty() {
            return Err(NnetError::NoBoxes);
        }
        let fm = self.extract_features(image)?;
        let feats = self.roi_features(&fm, image, boxes)?;
        Ok(self.heads_forward(&feats, mode).0.predictions())
    }

    /// Forward pass that records what [`Model::backward`] needs.
    pub fn forward_train(
        &self,
        image: &RgbImage,
        boxes: &[BBox2],
        mode: Mode,
    ) -> Result<(HeadOutputs, Tape), NnetError> {
        if boxes.is_empty() {
            return Err(NnetError::NoBoxes);
        }
        let mut blocks = Vec::new();
        let fm = self.run_backbone(image, Some(&mut blocks))?;
        let mut feats = Vec::with_capacity(boxes.len());
        let mut roi_index = Vec::with_capacity(boxes.len());
        for b in boxes {
            let (f, idx) =
                roi_pool_indexed(&fm, b, image.width(), image.height(), self.config.roi_grid)?;
            feats.push(f);
            roi_index.push(idx);
        }
        let (out, heads) = self.heads_forward(&feats, mode);
        Ok((
            out,
            Tape {
                blocks,
                feature_shape: (fm.channels, fm.height, fm.width),
                roi_index,
                heads,
            },
        ))
    }

    fn fc_chain_backward(
        &self,
        layers: &[(usize, usize); 3],
        trace: &FcTrace,
        mut dy: Vec<f64>,
        n: usize,
        grads: &mut ParamSet,
        dx0: &mut [f64],
    ) {
        for j in (0..3).rev() {
            let (wi, bi) = layers[j];
            let wt = self.params.tensor(wi);
            let (o, i) = (wt.shape[0], wt.shape[1]);
            let x = &trace.inputs[j];
            gemm(o, n, i, &dy, true, x, false, &mut grads.tensor_mut(wi).data, 1.0);
            let db = &mut grads.tensor_mut(bi).data;
            for row in dy.chunks(o) {
                db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
            }
            if j == 0 {
                gemm(n, o, i, &dy, false, &wt.data, false, dx0, 1.0);
            } else {
                let mut dx = vec![0.0; n * i];
                gemm(n, o, i, &dy, false, &wt.data, false, &mut dx, 0.0);
                // the input of layer j is the ReLU output of layer j - 1
                for (d, &v) in dx.iter_mut().zip(x) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                dy = dx;
            }
        }
    }

    /// Backpropagates output gradients through the heads. Returns the
    /// parameter gradients (backbone entries zero) and d loss / d features.
    pub fn heads_backward(&self, tape: &HeadTape, g: &OutputGrads) -> (ParamSet, Vec<f64>) {
        let n = tape.n;
        assert_eq!(g.distance.len(), n, "one distance gradient per object");
        let mut grads = self.params.zeros_like();
        let mut dx0 = vec![0.0; tape.features.len()];
        let dlogit: Vec<f64> = g
            .distance
            .iter()
            .zip(&tape.distance_logits)
            .map(|(d, &z)| d * sigmoid(z))
            .collect();
        self.fc_chain_backward(&self.layout.distance, &tape.distance, dlogit, n, &mut grads, &mut dx0);
        if let (Some(kg), Some(kt)) = (&g.keypoint, &tape.keypoint) {
            let dy: Vec<f64> = kg.iter().flat_map(|k| [k[0], k[1]]).collect();
            self.fc_chain_backward(&self.layout.keypoint, kt, dy, n, &mut grads, &mut dx0);
        }
        if let Some(cg) = &g.class_logits {
            let (wi, bi) = self.layout.classifier;
            let wt = self.params.tensor(wi);
            let (k, f) = (wt.shape[0], wt.shape[1]);
            let dy: Vec<f64> = cg.iter().flatten().copied().collect();
            gemm(k, n, f, &dy, true, &tape.features, false, &mut grads.tensor_mut(wi).data, 1.0);
            let db = &mut grads.tensor_mut(bi).data;
            for row in dy.chunks(k) {
                db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
            }
            gemm(n, k, f, &dy, false, &wt.data, false, &mut dx0, 1.0);
        }
        (grads, dx0)
    }

    /// Full backward pass, returning gradients for every parameter.
    pub fn backward(&self, tape: &Tape, g: &OutputGrads) -> ParamSet {
        let (mut grads, dx0) = self.heads_backward(&tape.heads, g);
        let (c, fh, fw) = tape.feature_shape;
        let flen = self.config.roi_feature_len();
        let mut dx = vec![0.0; c * fh * fw];
        for (obj, idx) in tape.roi_index.iter().enumerate() {
            for (k, &i) in idx.iter().enumerate() {
                dx[i as usize] += dx0[obj * flen + k];
            }
        }
        for (bi, block) in tape.blocks.iter().enumerate().rev() {
            let (w_idx, b_idx) = self.layout.convs[bi];
            let weight = self.params.tensor(w_idx);
            let c_out = weight.shape[0];
            let hw = block.h * block.w;
            let mut dact = vec![0.0; c_out * hw];
            for (o, &i) in block.pool_index.iter().enumerate() {
                dact[i as usize] += dx[o];
            }
            for (d, &a) in dact.iter_mut().zip(&block.act) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            let k = block.c_in * 9;
            gemm(c_out, hw, k, &dact, false, &block.cols, true, &mut grads.tensor_mut(w_idx).data, 1.0);
            let db = &mut grads.tensor_mut(b_idx).data;
            for (o, row) in dact.chunks(hw).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
            if bi > 0 {
                let mut dcols = vec![0.0; k * hw];
                gemm(k, c_out, hw, &weight.data, true, &dact, false, &mut dcols, 0.0);
                dx = vec![0.0; block.c_in * hw];
                col2im3(&dcols, block.c_in, block.h, block.w, &mut dx);
            }
        }
        grads
    }
}
