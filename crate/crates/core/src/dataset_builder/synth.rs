//! Deterministic synthetic road scenes.
//!
//! Each frame is ray cast from a level pinhole camera: a checkerboard road
//! surface, flat-shaded object cuboids and a sky gradient. Objects sit on the
//! road surface. On curved roads they follow the road arc, take its heading
//! and the surface is banked (superelevated) in proportion to the curvature,
//! so object bases are no longer on the plane `y = cam_height`.
//!
//! Every object also gets LiDAR-like returns sampled on its camera-facing
//! faces, inset 2 cm below the surface so that float rounding in the stored
//! scan cannot push them out of the labelled box. Occlusion between objects
//! is ignored for the point samples.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{extract_gt_distance, Box3D, BuilderConfig, SceneSample};
use crate::geometry::{
    project_point, rotation_x, rotation_y, wrap_angle, Pixel, Point3, ProjectionMatrix,
    RigidTransform,
};
use crate::image::RgbImage;
use crate::kitti_io::{BBox2, CalibSet, Dims, ExtendedAnnotation, KittiLabel, LidarPoint, PointCloud};

const GRAVITY: f64 = 9.81;
const SURFACE_INSET: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid scene config: {0}")]
    ConfigError(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    /// Added to the frame index to form the frame id.
    pub first_frame_id: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub focal: f64,
    /// Defaults to the image center when absent.
    pub principal_point: Option<[f64; 2]>,
    pub cam_height: f64,
    pub objects_per_frame: [usize; 2],
    /// Forward range of object placement (meters along the road).
    pub distance_range: [f64; 2],
    /// Lateral offset from the road center line (meters).
    pub lateral_range: [f64; 2],
    /// Magnitude of road curvature (1/m); the sign is drawn per scene.
    pub curvature_range: [f64; 2],
    /// Speed used for the superelevation of curved roads, m/s.
    pub design_speed: f64,
    /// Maximum road cross slope.
    pub max_bank: f64,
    pub categories: Vec<String>,
    pub points_per_object: usize,
    /// Relative jitter applied to each category's mean dimensions.
    pub dims_jitter: f64,
    /// Minimum visible fraction of an object's projected box.
    pub min_visible_fraction: f64,
    /// Minimum horizontal distance between box centers in one frame,
    /// pixels. At or above the feature stride no two boxes pool the same
    /// feature cells.
    pub min_box_spacing: f64,
    pub percentile_ratio: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            first_frame_id: 0,
            image_width: 384,
            image_height: 128,
            focal: 224.0,
            principal_point: None,
            cam_height: 1.65,
            objects_per_frame: [2, 4],
            distance_range: [5.0, 60.0],
            lateral_range: [-6.0, 6.0],
            curvature_range: [0.0, 0.0],
            design_speed: 15.0,
            max_bank: 0.1,
            categories: vec!["Car".into(), "Pedestrian".into(), "Cyclist".into()],
            points_per_object: 100,
            dims_jitter: 0.1,
            min_visible_fraction: 0.5,
            min_box_spacing: 0.0,
            percentile_ratio: 0.1,
        }
    }
}

/// Mean KITTI dimensions (height, width, length) per category.
pub fn category_dims(category: &str) -> Option<Dims> {
    let (height, width, length) = match category {
        "Car" => (1.53, 1.63, 3.88),
        "Van" => (2.21, 1.90, 5.08),
        "Truck" => (3.25, 2.59, 10.11),
        "Pedestrian" => (1.76, 0.66, 0.84),
        "Person_sitting" => (1.27, 0.59, 0.80),
        "Cyclist" => (1.74, 0.60, 1.76),
        "Tram" => (3.53, 2.54, 16.09),
        "Misc" => (1.91, 1.51, 3.58),
        _ => return None,
    };
    Some(Dims {
        height,
        width,
        length,
    })
}

fn category_color(category: &str) -> [f64; 3] {
    match category {
        "Car" => [0.80, 0.15, 0.10],
        "Van" => [0.90, 0.60, 0.10],
        "Truck" => [0.60, 0.30, 0.70],
        "Pedestrian" => [0.10, 0.30, 0.90],
        "Person_sitting" => [0.10, 0.60, 0.90],
        "Cyclist" => [0.10, 0.70, 0.20],
        "Tram" => [0.90, 0.90, 0.20],
        _ => [0.50, 0.50, 0.20],
    }
}

fn faces_along_road(category: &str) -> bool {
    !matches!(category, "Pedestrian" | "Person_sitting" | "Misc")
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::ConfigError(m));
        let range_ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.image_width < 16 || self.image_height < 16 {
            return bad("image must be at least 16x16".into());
        }
        if !(self.focal > 0.0) || !(self.cam_height > 0.0) {
            return bad("focal and cam_height must be positive".into());
        }
        if self.objects_per_frame[0] == 0 || self.objects_per_frame[0] > self.objects_per_frame[1] {
            return bad(format!("empty objects_per_frame range {:?}", self.objects_per_frame));
        }
        for (name, r) in [
            ("distance_range", self.distance_range),
            ("lateral_range", self.lateral_range),
            ("curvature_range", self.curvature_range),
        ] {
            if !range_ok(r) {
                return bad(format!("empty {name} {r:?}"));
            }
        }
        if self.distance_range[0] <= 1.0 {
            return bad("distance_range must start beyond 1 m".into());
        }
        if self.curvature_range[0] < 0.0 {
            return bad("curvature_range holds magnitudes and must be non-negative".into());
        }
        if self.categories.is_empty() {
            return bad("no categories".into());
        }
        if let Some(c) = self.categories.iter().find(|c| category_dims(c).is_none()) {
            return bad(format!("unknown category {c}"));
        }
        if self.points_per_object == 0 {
            return bad("points_per_object must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dims_jitter) || !(0.0..=1.0).contains(&self.min_visible_fraction) {
            return bad("dims_jitter must lie in [0, 1) and min_visible_fraction in [0, 1]".into());
        }
        if !(self.min_box_spacing >= 0.0) {
            return bad("min_box_spacing must be non-negative".into());
        }
        if !(self.percentile_ratio > 0.0 && self.percentile_ratio < 1.0) {
            return bad("percentile_ratio must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        let [cx, cy] = self.principal_point.unwrap_or([
            0.5 * (self.image_width as f64 - 1.0),
            0.5 * (self.image_height as f64 - 1.0),
        ]);
        Matrix3::new(self.focal, 0.0, cx, 0.0, self.focal, cy, 0.0, 0.0, 1.0)
    }
}

/// Road surface `y = cam_height + bank · x` in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadSurface {
    pub cam_height: f64,
    pub bank: f64,
}

impl RoadSurface {
    pub fn flat(cam_height: f64) -> Self {
        Self {
            cam_height,
            bank: 0.0,
        }
    }

    pub fn height_at(&self, x: f64) -> f64 {
        self.cam_height + self.bank * x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthObject {
    pub category: String,
    pub bbox3d: Box3D,
    pub color: [f64; 3],
}

/// Fixed rectification rotation of the synthetic rig (a fraction of a degree).
pub fn synthetic_r0_rect() -> RigidTransform {
    RigidTransform::from_rotation(rotation_x(0.004) * rotation_y(-0.003)).expect("rotation")
}

/// Fixed velodyne-to-camera extrinsics of the synthetic rig: velodyne x
/// forward, y left, z up, mounted slightly behind and above the camera.
pub fn synthetic_velo_to_cam() -> RigidTransform {
    RigidTransform::new(
        Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
        Vector3::new(0.06, -0.08, -0.27),
    )
    .expect("rotation")
}

/// Result of ray casting a scene.
#[derive(Debug, Clone)]
pub struct Rendered {
    pub image: RgbImage,
    /// Pixels where each object is the nearest hit.
    pub visible_pixels: Vec<usize>,
    /// Pixels whose ray hits each object at all.
    pub silhouette_pixels: Vec<usize>,
}

fn ray_box(b: &Box3D, dir: &Vector3<f64>) -> Option<(f64, usize, f64)> {
    let rt = rotation_y(b.yaw).transpose();
    let o = rt * (-b.center_bottom.coords);
    let d = rt * dir;
    let lo = [-0.5 * b.dims.length, -b.dims.height, -0.5 * b.dims.width];
    let hi = [0.5 * b.dims.length, 0.0, 0.5 * b.dims.width];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut axis = 0;
    let mut sign = 1.0;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - o[a]) / d[a], (hi[a] - o[a]) / d[a]);
        let mut s = -1.0;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
            s = 1.0;
        }
        if ta > t0 {
            t0 = ta;
            axis = a;
            sign = s;
        }
        t1 = t1.min(tb);
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, axis, sign))
}

/// Ray casts `objects` on `road` as seen by a level camera with intrinsics `k`.
pub fn render_scene(
    k: &Matrix3<f64>,
    width: u32,
    height: u32,
    road: &RoadSurface,
    objects: &[SynthObject],
) -> Rendered {
    let mut image = RgbImage::new(width, height);
    let mut visible = vec![0usize; objects.len()];
    let mut silhouette = vec![0usize; objects.len()];
    let (f, cx, cy) = (k[(0, 0)], k[(0, 2)], k[(1, 2)]);
    let fy = k[(1, 1)];
    for v in 0..height {
        for u in 0..width {
            let dir = Vector3::new((u as f64 - cx) / f, (v as f64 - cy) / fy, 1.0);
            let mut best: Option<(f64, usize, usize, f64)> = None;
            for (i, o) in objects.iter().enumerate() {
                if let Some((t, axis, sign)) = ray_box(&o.bbox3d, &dir) {
                    silhouette[i] += 1;
                    if best.is_none_or(|b| t < b.0) {
                        best = Some((t, i, axis, sign));
                    }
                }
            }
            let denom = dir.y - road.bank * dir.x;
            let ground_t = (denom > 1e-9).then(|| road.cam_height / denom);
            let rgb = match (best, ground_t) {
                (Some((t, i, axis, sign)), g) if g.is_none_or(|g| t < g) => {
                    visible[i] += 1;
                    let shade = match (axis, sign > 0.0) {
                        (1, false) => 1.0,
                        (1, true) => 0.5,
                        (0, _) => 0.85,
                        _ => 0.68,
                    };
                    let c = objects[i].color;
                    [c[0] * shade, c[1] * shade, c[2] * shade]
                }
                (_, Some(t)) => {
                    let p = dir * t;
                    let checker = ((p.x / 2.0).floor() + (p.z / 2.0).floor()).rem_euclid(2.0) < 0.5;
                    let fade = (-p.z / 150.0).exp();
                    let base = if checker { 0.32 } else { 0.58 };
                    let g = base * fade + 0.45 * (1.0 - fade);
                    [g, g, g * 1.02]
                }
                _ => {
                    let s = v as f64 / height as f64;
                    [0.55 + 0.2 * s, 0.7 + 0.15 * s, 0.92]
                }
            };
            image.set(u, v, [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]);
        }
    }
    image.quantize();
    Rendered {
        image,
        visible_pixels: visible,
        silhouette_pixels: silhouette,
    }
}

/// Camera-facing faces of a box as (center, outward normal, u-axis, v-axis)
/// with half extents along the two axes.
fn visible_faces(b: &Box3D) -> Vec<(Point3, Vector3<f64>, Vector3<f64>, Vector3<f64>, f64, f64)> {
    let r = rotation_y(b.yaw);
    let (hl, hw, h) = (0.5 * b.dims.length, 0.5 * b.dims.width, b.dims.height);
    let mid = b.center_bottom + r * Vector3::new(0.0, -0.5 * h, 0.0);
    let ex = r * Vector3::x();
    let ey = Vector3::y();
    let ez = r * Vector3::z();
    let faces = [
        (ex, hl, ey, 0.5 * h, ez, hw),
        (-ex, hl, ey, 0.5 * h, ez, hw),
        (ez, hw, ex, hl, ey, 0.5 * h),
        (-ez, hw, ex, hl, ey, 0.5 * h),
        (ey, 0.5 * h, ex, hl, ez, hw),
        (-ey, 0.5 * h, ex, hl, ez, hw),
    ];
    faces
        .into_iter()
        .filter_map(|(n, dn, a, da, c, dc)| {
            let center = mid + n * dn;
            (n.dot(&center.coords) < 0.0).then_some((center, n, a, c, da, dc))
        })
        .collect()
}

/// LiDAR-like returns on the camera-facing faces, area weighted.
pub fn sample_surface_points(b: &Box3D, n: usize, rng: &mut impl Rng) -> Vec<Point3> {
    let faces = visible_faces(b);
    let areas: Vec<f64> = faces.iter().map(|f| f.4 * f.5).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random_range(0.0..total);
            let mut idx = 0;
            while idx + 1 < faces.len() && pick >= areas[idx] {
                pick -= areas[idx];
                idx += 1;
            }
            let (center, normal, a, c, da, dc) = faces[idx];
            let sa = rng.random_range(-1.0..1.0) * (da - SURFACE_INSET).max(0.0);
            let sc = rng.random_range(-1.0..1.0) * (dc - SURFACE_INSET).max(0.0);
            center - normal * SURFACE_INSET + a * sa + c * sc
        })
        .collect()
}

/// Clipped image box of a 3D box, its unclipped area, and whether every
/// corner is in front of the camera.
fn project_box(p: &ProjectionMatrix, b: &Box3D) -> Option<(BBox2, f64)> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in b.corners() {
        if c.z < 0.5 {
            return None;
        }
        let px = project_point(p, &c).ok()?;
        lo = [lo[0].min(px.u), lo[1].min(px.v)];
        hi = [hi[0].max(px.u), hi[1].max(px.v)];
    }
    let full = BBox2::new(lo[0], lo[1], hi[0], hi[1]);
    let area = full.width() * full.height();
    Some((full.clamp_to(p.image_width, p.image_height), area))
}

struct Placed {
    object: SynthObject,
    bbox: BBox2,
    truncated: f64,
    points: Vec<Point3>,
    distance: f64,
    keypoint: Pixel,
}

fn jitter(rng: &mut impl Rng, amount: f64) -> f64 {
    if amount > 0.0 {
        1.0 + rng.random_range(-amount..amount)
    } else {
        1.0
    }
}

fn sample_range(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn generate_frame(cfg: &SceneConfig, seed: u64, index: usize) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let k = cfg.intrinsics();
    let p2 = ProjectionMatrix::from_intrinsics(&k, cfg.image_width, cfg.image_height)
        .expect("validated image size");
    let curvature = if cfg.curvature_range[1] > 0.0 {
        let mag = sample_range(&mut rng, cfg.curvature_range);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    } else {
        0.0
    };
    let bank = (curvature * cfg.design_speed.powi(2) / GRAVITY).clamp(-cfg.max_bank, cfg.max_bank);
    let road = RoadSurface {
        cam_height: cfg.cam_height,
        bank,
    };
    let builder = BuilderConfig {
        percentile_ratio: cfg.percentile_ratio,
        min_points: 1,
    };

    let n_objects = rng.random_range(cfg.objects_per_frame[0]..=cfg.objects_per_frame[1]);
    let mut placed: Vec<Placed> = Vec::new();
    let mut attempts = 0;
    while placed.len() < n_objects && attempts < 60 * n_objects {
        attempts += 1;
        let category = cfg.categories[rng.random_range(0..cfg.categories.len())].clone();
        let mean = category_dims(&category).expect("validated category");
        let dims = Dims {
            height: mean.height * jitter(&mut rng, cfg.dims_jitter),
            width: mean.width * jitter(&mut rng, cfg.dims_jitter),
            length: mean.length * jitter(&mut rng, cfg.dims_jitter),
        };
        let s = sample_range(&mut rng, cfg.distance_range);
        let offset = sample_range(&mut rng, cfg.lateral_range);
        let x = offset + 0.5 * curvature * s * s;
        let heading = (curvature * s).atan();
        let yaw = if faces_along_road(&category) {
            let oncoming = if rng.random_bool(0.3) { PI } else { 0.0 };
            wrap_angle(heading - FRAC_PI_2 + oncoming + rng.random_range(-0.1..0.1))
        } else {
            rng.random_range(-PI..PI)
        };
        let bbox3d = Box3D {
            center_bottom: Point3::new(x, road.height_at(x), s),
            dims,
            yaw,
        };
        let radius = 0.5 * dims.length.hypot(dims.width);
        let clash = placed.iter().any(|o| {
            let b = &o.object.bbox3d;
            let r = 0.5 * b.dims.length.hypot(b.dims.width);
            (b.center_bottom.x - x).hypot(b.center_bottom.z - s) < r + radius + 0.5
        });
        if clash {
            continue;
        }
        let Some((bbox, full_area)) = project_box(&p2, &bbox3d) else {
            continue;
        };
        let center_u = 0.5 * (bbox.left + bbox.right);
        if placed.iter().any(|o| (0.5 * (o.bbox.left + o.bbox.right) - center_u).abs() < cfg.min_box_spacing) {
            continue;
        }
        let visible_area = bbox.width() * bbox.height();
        if bbox.height() < 3.0 || bbox.width() < 2.0 || visible_area < cfg.min_visible_fraction * full_area {
            continue;
        }
        let points = sample_surface_points(&bbox3d, cfg.points_per_object, &mut rng);
        let (distance, source) = extract_gt_distance(&points, &builder).expect("non-empty sample");
        let keypoint = match project_point(&p2, &source) {
            Ok(k) if k.is_inside(cfg.image_width, cfg.image_height) => k,
            _ => continue,
        };
        let tint = jitter(&mut rng, 0.15);
        let base = category_color(&category);
        placed.push(Placed {
            object: SynthObject {
                category,
                bbox3d,
                color: [base[0] * tint, base[1] * tint, base[2] * tint],
            },
            bbox,
            truncated: (1.0 - visible_area / full_area).clamp(0.0, 1.0),
            points,
            distance,
            keypoint,
        });
    }

    let objects: Vec<SynthObject> = placed.iter().map(|p| p.object.clone()).collect();
    let rendered = render_scene(&k, cfg.image_width, cfg.image_height, &road, &objects);

    let calib = CalibSet {
        p2,
        r0_rect: synthetic_r0_rect(),
        tr_velo_to_cam: synthetic_velo_to_cam(),
    };
    let to_velo = calib.velo_to_rect().inverse();
    let image_id = format!("{:06}", cfg.first_frame_id + index);
    let mut cloud = Vec::new();
    let mut annotations = Vec::new();
    for (i, p) in placed.iter().enumerate() {
        for q in &p.points {
            let v = to_velo.apply(q);
            cloud.push(LidarPoint {
                x: v.x as f32,
                y: v.y as f32,
                z: v.z as f32,
                reflectance: rng.random_range(0.1f32..0.9),
            });
        }
        let visible = rendered.visible_pixels[i] as f64 / rendered.silhouette_pixels[i].max(1) as f64;
        let occluded = if visible >= 0.8 {
            0
        } else if visible >= 0.4 {
            1
        } else {
            2
        };
        let b = &p.object.bbox3d;
        let c = b.center_bottom;
        annotations.push(ExtendedAnnotation {
            image_id: image_id.clone(),
            label: KittiLabel {
                category: p.object.category.clone(),
                truncated: p.truncated,
                occluded,
                alpha: wrap_angle(b.yaw - c.x.atan2(c.z)),
                bbox: p.bbox,
                dims: b.dims,
                location: c,
                rotation_y: b.yaw,
            },
            distance: p.distance,
            keypoint: p.keypoint,
        });
    }

    SceneSample {
        image_id,
        image: rendered.image,
        calib,
        annotations,
        cloud: PointCloud { points: cloud },
    }
}

/// Generates `cfg.frames` scenes. Frame `i` depends only on `(seed, i)`.
pub fn generate_synthetic_dataset(cfg: &SceneConfig, seed: u64) -> Result<Vec<SceneSample>, SynthError> {
    cfg.validate()?;
    Ok((0..cfg.frames).map(|i| generate_frame(cfg, seed, i)).collect())
}

/// Generates a single frame, identical to element `index` of
/// [`generate_synthetic_dataset`].
pub fn generate_synthetic_frame(cfg: &SceneConfig, seed: u64, index: usize) -> Result<SceneSample, SynthError> {
    cfg.validate()?;
    Ok(generate_frame(cfg, seed, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset_builder::build_ground_truth;

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            frames: 6,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_dataset(&small_cfg(), 9).unwrap();
        let b = generate_synthetic_dataset(&small_cfg(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(&small_cfg(), 10).unwrap();
        assert_ne!(a, c);
        assert_eq!(generate_synthetic_frame(&small_cfg(), 9, 4).unwrap(), a[4]);
    }

    #[test]
    fn empty_ranges_are_config_errors() {
        let mut cfg = small_cfg();
        cfg.distance_range = [30.0, 10.0];
        assert!(matches!(generate_synthetic_dataset(&cfg, 0), Err(SynthError::ConfigError(_))));
        let mut cfg = small_cfg();
        cfg.objects_per_frame = [3, 1];
        assert!(generate_synthetic_dataset(&cfg, 0).is_err());
        let mut cfg = small_cfg();
        cfg.categories = vec!["Spaceship".into()];
        assert!(generate_synthetic_dataset(&cfg, 0).is_err());
    }

    #[test]
    fn construction_reproduces_stored_distances() {
        let samples = generate_synthetic_dataset(&small_cfg(), 1).unwrap();
        let mut n = 0;
        for s in &samples {
            let labels: Vec<KittiLabel> = s.annotations.iter().map(|a| a.label.clone()).collect();
            let (anns, report) =
                build_ground_truth(&s.image_id, &labels, &s.calib, &s.cloud, &BuilderConfig::default())
                    .unwrap();
            assert_eq!(report.dropped(), 0);
            for (a, b) in anns.iter().zip(&s.annotations) {
                assert!((a.distance - b.distance).abs() < 0.1);
                assert!(a.keypoint.distance_to(&b.keypoint) < 0.5);
                n += 1;
            }
        }
        assert!(n >= 12);
    }

    #[test]
    fn pedestrian_at_twenty_meters_has_pinhole_height() {
        let cfg = SceneConfig {
            image_width: 200,
            image_height: 120,
            focal: 300.0,
            ..Default::default()
        };
        let k = cfg.intrinsics();
        let dims = category_dims("Pedestrian").unwrap();
        let b = Box3D {
            center_bottom: Point3::new(0.0, cfg.cam_height, 20.0),
            dims,
            yaw: 0.0,
        };
        let obj = SynthObject {
            category: "Pedestrian".into(),
            bbox3d: b,
            color: [0.1, 0.3, 0.9],
        };
        let road = RoadSurface::flat(cfg.cam_height);
        let r = render_scene(&k, 200, 120, &road, &[obj]);
        let empty = render_scene(&k, 200, 120, &road, &[]);
        let rows: Vec<u32> = (0..120)
            .filter(|&v| (0..200).any(|u| r.image.get(u, v) != empty.image.get(u, v)))
            .collect();
        let rendered_height = (rows.last().unwrap() - rows.first().unwrap() + 1) as f64;
        let expected = 300.0 * dims.height / 20.0;
        assert!((rendered_height - expected).abs() <= 2.0, "{rendered_height} vs {expected}");
        let p = ProjectionMatrix::from_intrinsics(&k, 200, 120).unwrap();
        let (bbox, _) = project_box(&p, &b).unwrap();
        assert!((bbox.height() - expected).abs() <= 2.0);
    }

    #[test]
    fn curved_scenes_bank_and_offset() {
        let cfg = SceneConfig {
            frames: 4,
            curvature_range: [0.005, 0.01],
            ..Default::default()
        };
        let samples = generate_synthetic_dataset(&cfg, 3).unwrap();
        let lifted = samples
            .iter()
            .flat_map(|s| &s.annotations)
            .filter(|a| (a.label.location.y - cfg.cam_height).abs() > 0.05)
            .count();
        assert!(lifted > 0);
    }

    #[test]
    fn surface_samples_lie_inside_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Box3D {
            center_bottom: Point3::new(3.0, 1.6, 15.0),
            dims: Dims {
                height: 1.5,
                width: 1.6,
                length: 4.0,
            },
            yaw: 0.7,
        };
        let pts = sample_surface_points(&b, 500, &mut rng);
        assert!(pts.iter().all(|p| b.contains(p)));
        // only camera-facing faces: nothing on the far side of the center
        let far = pts.iter().filter(|p| p.z > b.center_bottom.z + 1.0).count();
        assert!(far < 500);
    }
}
