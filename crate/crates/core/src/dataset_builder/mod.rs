//! Ground-truth construction from LiDAR, dataset splitting, flip
//! augmentation, statistics and the synthetic scene generator.

mod layout;
pub mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    self, flip_projection, mirror_x, project_point, rotation_y, wrap_angle, Point3,
};
use crate::image::RgbImage;
use crate::kitti_io::{
    BBox2, CalibSet, Dims, ExtendedAnnotation, KittiLabel, LidarPoint, PointCloud,
};

pub use layout::{
    build_dataset_dir, check_layout, frame_ids, load_frame, write_annotation_file,
    write_kitti_layout, BuildDirOutcome, FrameFailure, FrameFiles, KittiFrame, LayoutError,
    SYNTH_ANNOTATIONS_FILE,
};
pub use synth::{
    generate_synthetic_dataset, generate_synthetic_frame, SceneConfig, SynthError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BuilderError {
    #[error("no points to extract a distance from")]
    EmptySegment,
    #[error("percentile ratio must lie in (0, 1), got {0}")]
    BadRatio(f64),
}

/// Oriented 3D box in the rectified camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center_bottom: Point3,
    pub dims: Dims,
    /// Rotation about the camera y axis.
    pub yaw: f64,
}

impl Box3D {
    pub fn from_label(label: &KittiLabel) -> Self {
        Self {
            center_bottom: label.location,
            dims: label.dims,
            yaw: label.rotation_y,
        }
    }

    /// Point expressed in the box frame: x along length, y down, z along width.
    pub fn to_local(&self, p: &Point3) -> Point3 {
        Point3::from(rotation_y(self.yaw).transpose() * (p - self.center_bottom))
    }

    pub fn contains(&self, p: &Point3) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= 0.5 * self.dims.length
            && l.z.abs() <= 0.5 * self.dims.width
            && l.y <= 0.0
            && l.y >= -self.dims.height
    }

    /// The eight corners in the camera frame.
    pub fn corners(&self) -> [Point3; 8] {
        let r = rotation_y(self.yaw);
        let (hl, hw, h) = (0.5 * self.dims.length, 0.5 * self.dims.width, self.dims.height);
        let mut out = [Point3::origin(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let local = nalgebra::Vector3::new(
                if i & 1 == 0 { -hl } else { hl },
                if i & 2 == 0 { 0.0 } else { -h },
                if i & 4 == 0 { -hw } else { hw },
            );
            *c = self.center_bottom + r * local;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuilderConfig {
    pub percentile_ratio: f64,
    pub min_points: usize,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        Self {
            percentile_ratio: 0.1,
            min_points: 1,
        }
    }
}

impl BuilderConfig {
    pub fn validate(&self) -> Result<(), BuilderError> {
        if !(self.percentile_ratio > 0.0 && self.percentile_ratio < 1.0) {
            return Err(BuilderError::BadRatio(self.percentile_ratio));
        }
        Ok(())
    }
}

/// One constructed training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image_id: String,
    pub image: RgbImage,
    pub calib: CalibSet,
    pub annotations: Vec<ExtendedAnnotation>,
    /// Object returns in the velodyne frame.
    pub cloud: PointCloud,
}

/// Points inside `b`; faces are inclusive.
pub fn segment_points_in_box(points: &[Point3], b: &Box3D) -> Vec<Point3> {
    points.iter().copied().filter(|p| b.contains(p)).collect()
}

/// Selects the point at 0-based index `floor(ratio · count)` of the
/// depth-sorted segment (clamped to the last point) and returns its depth.
pub fn extract_gt_distance(
    segmented: &[Point3],
    cfg: &BuilderConfig,
) -> Result<(f64, Point3), BuilderError> {
    cfg.validate()?;
    if segmented.is_empty() {
        return Err(BuilderError::EmptySegment);
    }
    let mut sorted = segmented.to_vec();
    sorted.sort_by(|a, b| a.z.total_cmp(&b.z));
    let idx = ((cfg.percentile_ratio * sorted.len() as f64).floor() as usize).min(sorted.len() - 1);
    Ok((sorted[idx].z, sorted[idx]))
}

/// Per-reason counts from [`build_ground_truth`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub labels: usize,
    pub kept: usize,
    pub dont_care: usize,
    pub empty_segments: usize,
    pub too_few_points: usize,
    pub non_positive_distance: usize,
    pub keypoint_outside_image: usize,
    pub degenerate_projection: usize,
    /// Segments are never restricted to the camera frustum before sorting.
    pub frustum_prefilter: bool,
}

impl ConstructionReport {
    pub fn dropped(&self) -> usize {
        self.empty_segments
            + self.too_few_points
            + self.non_positive_distance
            + self.keypoint_outside_image
            + self.degenerate_projection
    }

    pub fn merge(&mut self, other: &ConstructionReport) {
        self.labels += other.labels;
        self.kept += other.kept;
        self.dont_care += other.dont_care;
        self.empty_segments += other.empty_segments;
        self.too_few_points += other.too_few_points;
        self.non_positive_distance += other.non_positive_distance;
        self.keypoint_outside_image += other.keypoint_outside_image;
        self.degenerate_projection += other.degenerate_projection;
    }
}

/// Builds extended annotations for one frame.
///
/// The cloud is moved into the rectified camera frame with
/// `Tr_velo_to_cam` followed by `R0_rect`. DontCare labels have no 3D box and
/// are skipped.
pub fn build_ground_truth(
    image_id: &str,
    labels: &[KittiLabel],
    calib: &CalibSet,
    cloud: &PointCloud,
    cfg: &BuilderConfig,
) -> Result<(Vec<ExtendedAnnotation>, ConstructionReport), BuilderError> {
    cfg.validate()?;
    let rect = geometry::apply_transform(&calib.velo_to_rect(), &cloud.positions());
    let mut report = ConstructionReport {
        labels: labels.len(),
        ..Default::default()
    };
    let mut out = Vec::new();
    for label in labels {
        if label.is_dont_care() {
            report.dont_care += 1;
            continue;
        }
        let segment = segment_points_in_box(&rect, &Box3D::from_label(label));
        if segment.is_empty() {
            report.empty_segments += 1;
            continue;
        }
        if segment.len() < cfg.min_points {
            report.too_few_points += 1;
            continue;
        }
        let (distance, source) = extract_gt_distance(&segment, cfg)?;
        if distance <= 0.0 {
            report.non_positive_distance += 1;
            continue;
        }
        let keypoint = match project_point(&calib.p2, &source) {
            Ok(k) => k,
            Err(_) => {
                report.degenerate_projection += 1;
                continue;
            }
        };
        if !keypoint.is_inside(calib.p2.image_width, calib.p2.image_height) {
            report.keypoint_outside_image += 1;
            continue;
        }
        report.kept += 1;
        out.push(ExtendedAnnotation {
            image_id: image_id.to_string(),
            label: label.clone(),
            distance,
            keypoint,
        });
    }
    Ok((out, report))
}

/// Seeded shuffle followed by a prefix split; the first
/// `round(ratio · n)` shuffled ids form the training part.
pub fn split_dataset<T: Clone>(ids: &[T], ratio: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    assert!(ratio > 0.0 && ratio < 1.0, "split ratio must lie in (0, 1)");
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratio * ids.len() as f64).round() as usize).min(ids.len());
    let val = shuffled.split_off(n_train);
    (shuffled, val)
}

/// Reference split sizes of the KITTI train/val partition used in the
/// literature. Informational only.
pub const KITTI_REFERENCE_SPLIT: (usize, usize) = (3712, 3768);

/// Mirrors a box under the pixel flip `u ↦ W − 1 − u`.
pub fn flip_bbox(b: &BBox2, width: u32) -> BBox2 {
    let w1 = width as f64 - 1.0;
    BBox2::new(w1 - b.right, b.top, w1 - b.left, b.bottom)
}

pub fn flip_pixel(p: &geometry::Pixel, width: u32) -> geometry::Pixel {
    geometry::Pixel::new(width as f64 - 1.0 - p.u, p.v)
}

fn flip_label(label: &KittiLabel, width: u32) -> KittiLabel {
    use std::f64::consts::PI;
    let mut out = label.clone();
    out.bbox = flip_bbox(&label.bbox, width);
    if !label.is_dont_care() {
        out.location = mirror_x(&label.location);
        out.rotation_y = wrap_angle(PI - label.rotation_y);
        out.alpha = wrap_angle(PI - label.alpha);
    }
    out
}

/// Mirrors a sample left-right.
///
/// The flipped sample describes the x-mirrored world: boxes, keypoints, 3D
/// labels and the point cloud are mirrored and P2 is replaced by
/// [`flip_projection`]. Distances are unchanged.
pub fn horizontal_flip_sample(s: &SceneSample) -> SceneSample {
    let width = s.image.width();
    let annotations = s
        .annotations
        .iter()
        .map(|a| ExtendedAnnotation {
            image_id: a.image_id.clone(),
            label: flip_label(&a.label, width),
            distance: a.distance,
            keypoint: flip_pixel(&a.keypoint, width),
        })
        .collect();
    let to_rect = s.calib.velo_to_rect();
    let to_velo = to_rect.inverse();
    let points = s
        .cloud
        .points
        .iter()
        .map(|p| {
            let q = to_velo.apply(&mirror_x(&to_rect.apply(&p.position())));
            LidarPoint {
                x: q.x as f32,
                y: q.y as f32,
                z: q.z as f32,
                reflectance: p.reflectance,
            }
        })
        .collect();
    SceneSample {
        image_id: s.image_id.clone(),
        image: s.image.flip_horizontal(),
        calib: CalibSet {
            p2: flip_projection(&s.calib.p2),
            ..s.calib.clone()
        },
        annotations,
        cloud: PointCloud { points },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub bins: Vec<HistogramBin>,
    /// Distances outside the histogram range.
    pub out_of_range: usize,
    pub per_category: BTreeMap<String, usize>,
}

pub const DEFAULT_STATS_BIN_WIDTH: f64 = 5.0;
pub const DEFAULT_STATS_MAX_DISTANCE: f64 = 110.0;

pub fn dataset_stats(anns: &[ExtendedAnnotation]) -> DatasetStats {
    dataset_stats_with(anns, DEFAULT_STATS_BIN_WIDTH, DEFAULT_STATS_MAX_DISTANCE)
}

pub fn dataset_stats_with(anns: &[ExtendedAnnotation], bin_width: f64, max: f64) -> DatasetStats {
    let n_bins = (max / bin_width).ceil() as usize;
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|k| HistogramBin {
            lo: k as f64 * bin_width,
            hi: ((k + 1) as f64 * bin_width).min(max),
            count: 0,
        })
        .collect();
    let mut out_of_range = 0;
    let mut per_category = BTreeMap::new();
    for a in anns {
        *per_category.entry(a.label.category.clone()).or_insert(0) += 1;
        let d = a.distance;
        if d >= 0.0 && d < max {
            bins[((d / bin_width).floor() as usize).min(n_bins - 1)].count += 1;
        } else {
            out_of_range += 1;
        }
    }
    DatasetStats {
        total: anns.len(),
        bins,
        out_of_range,
        per_category,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pixel, ProjectionMatrix, RigidTransform};
    use approx::assert_abs_diff_eq;
    use nalgebra::{Matrix3, Vector3};
    use rand::Rng;

    fn unit_cube() -> Box3D {
        Box3D {
            center_bottom: Point3::origin(),
            dims: Dims {
                height: 1.0,
                width: 1.0,
                length: 1.0,
            },
            yaw: 0.0,
        }
    }

    #[test]
    fn axis_aligned_containment() {
        let b = unit_cube();
        let inside = Point3::new(0.4, -0.4, 0.4);
        let outside = Point3::new(0.6, 0.0, 0.0);
        assert_eq!(segment_points_in_box(&[inside, outside], &b), vec![inside]);
    }

    #[test]
    fn boundary_points_are_included() {
        let b = unit_cube();
        let pts = [
            Point3::new(0.5, 0.0, -0.5),
            Point3::new(-0.5, -1.0, 0.5),
        ];
        assert_eq!(segment_points_in_box(&pts, &b).len(), 2);
    }

    #[test]
    fn empty_point_list() {
        assert!(segment_points_in_box(&[], &unit_cube()).is_empty());
    }

    /// Independent containment test: outward face normals from the rotated
    /// corners, point inside iff it is behind every face plane.
    fn half_space_contains(b: &Box3D, p: &Point3) -> bool {
        let c = b.corners();
        // faces as (corner indices a, b, c) spanning the plane, plus an
        // opposite-face corner to orient the normal inwards
        let faces: [([usize; 3], usize); 6] = [
            ([0, 2, 4], 1),
            ([1, 3, 5], 0),
            ([0, 1, 4], 2),
            ([2, 3, 6], 0),
            ([0, 1, 2], 4),
            ([4, 5, 6], 0),
        ];
        let scale = b.dims.height.max(b.dims.width).max(b.dims.length);
        faces.iter().all(|(f, opp)| {
            let n = (c[f[1]] - c[f[0]]).cross(&(c[f[2]] - c[f[0]]));
            let inward = if n.dot(&(c[*opp] - c[f[0]])) > 0.0 { n } else { -n };
            inward.normalize().dot(&(p - c[f[0]])) >= -1e-12 * scale
        })
    }

    #[test]
    fn rotated_box_matches_half_space_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b = Box3D {
            center_bottom: Point3::new(1.0, 1.5, 12.0),
            dims: Dims {
                height: 1.5,
                width: 1.7,
                length: 4.0,
            },
            yaw: std::f64::consts::FRAC_PI_2,
        };
        let mut inside = 0;
        for _ in 0..1000 {
            let p = Point3::new(
                rng.random_range(-2.0..4.0),
                rng.random_range(-0.5..2.0),
                rng.random_range(9.0..15.0),
            );
            assert_eq!(b.contains(&p), half_space_contains(&b, &p), "{p}");
            inside += b.contains(&p) as usize;
        }
        assert!(inside > 50);
    }

    #[test]
    fn percentile_index_examples() {
        let cfg = BuilderConfig::default();
        let pts: Vec<Point3> = (1..=10).rev().map(|z| Point3::new(0.0, 0.0, z as f64)).collect();
        let (d, p) = extract_gt_distance(&pts, &cfg).unwrap();
        assert_eq!(d, 2.0);
        assert_eq!(p.z, 2.0);
        let (d, _) = extract_gt_distance(&[Point3::new(1.0, 2.0, 7.3)], &cfg).unwrap();
        assert_eq!(d, 7.3);
        assert_eq!(extract_gt_distance(&[], &cfg), Err(BuilderError::EmptySegment));
    }

    #[test]
    fn bad_ratio_is_rejected() {
        let cfg = BuilderConfig {
            percentile_ratio: 1.0,
            min_points: 1,
        };
        assert_eq!(
            extract_gt_distance(&[Point3::new(0.0, 0.0, 1.0)], &cfg),
            Err(BuilderError::BadRatio(1.0))
        );
    }

    fn identity_calib(w: u32, h: u32) -> CalibSet {
        let k = Matrix3::new(100.0, 0.0, 50.0, 0.0, 100.0, 50.0, 0.0, 0.0, 1.0);
        CalibSet {
            p2: ProjectionMatrix::from_intrinsics(&k, w, h).unwrap(),
            r0_rect: RigidTransform::identity(),
            tr_velo_to_cam: RigidTransform::identity(),
        }
    }

    fn car_label(loc: Point3) -> KittiLabel {
        KittiLabel {
            category: "Car".into(),
            truncated: 0.0,
            occluded: 0,
            alpha: 0.0,
            bbox: BBox2::new(10.0, 10.0, 60.0, 60.0),
            dims: Dims {
                height: 1.5,
                width: 1.6,
                length: 3.9,
            },
            location: loc,
            rotation_y: -std::f64::consts::FRAC_PI_2,
        }
    }

    fn cloud_of(points: &[Point3]) -> PointCloud {
        PointCloud {
            points: points
                .iter()
                .map(|p| LidarPoint {
                    x: p.x as f32,
                    y: p.y as f32,
                    z: p.z as f32,
                    reflectance: 0.5,
                })
                .collect(),
        }
    }

    #[test]
    fn singleton_chain() {
        let calib = identity_calib(101, 101);
        let p = Point3::new(0.25, 1.0, 10.0);
        let (anns, report) = build_ground_truth(
            "0",
            &[car_label(Point3::new(0.0, 1.5, 10.0))],
            &calib,
            &cloud_of(&[p]),
            &BuilderConfig::default(),
        )
        .unwrap();
        assert_eq!(report.kept, 1);
        assert_eq!(anns[0].distance, 10.0);
        assert_abs_diff_eq!(anns[0].keypoint.u, 52.5, epsilon = 1e-9);
        assert_abs_diff_eq!(anns[0].keypoint.v, 60.0, epsilon = 1e-9);
    }

    #[test]
    fn empty_box_is_dropped_and_counted() {
        let calib = identity_calib(101, 101);
        let (anns, report) = build_ground_truth(
            "0",
            &[car_label(Point3::new(0.0, 1.5, 10.0))],
            &calib,
            &cloud_of(&[Point3::new(5.0, 0.0, 30.0)]),
            &BuilderConfig::default(),
        )
        .unwrap();
        assert!(anns.is_empty());
        assert_eq!(report.empty_segments, 1);
        assert_eq!(report.dropped(), 1);
        assert!(!report.frustum_prefilter);
    }

    #[test]
    fn off_image_keypoint_is_dropped() {
        let calib = identity_calib(101, 101);
        // projects to u = 50 + 100 * 8 / 10, far right of a 101 px image
        let (anns, report) = build_ground_truth(
            "0",
            &[car_label(Point3::new(8.0, 1.5, 10.0))],
            &calib,
            &cloud_of(&[Point3::new(8.0, 1.0, 10.0)]),
            &BuilderConfig::default(),
        )
        .unwrap();
        assert!(anns.is_empty());
        assert_eq!(report.keypoint_outside_image, 1);
    }

    #[test]
    fn forward_generated_box_surface() {
        // 100 points on the camera-facing surfaces of a car at z = 10, in a
        // rotated velodyne frame; expect the 10th smallest depth.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let label = car_label(Point3::new(0.5, 1.6, 10.0));
        let b = Box3D::from_label(&label);
        let mut rect_pts = Vec::new();
        for _ in 0..100 {
            // local frame: x in [-l/2, l/2], z in [-w/2, w/2]; sample the back
            // face (toward the camera) and the left side with a 1 cm inset
            let local = if rng.random_bool(0.5) {
                Vector3::new(rng.random_range(-1.9..1.9), -rng.random_range(0.05..1.45), -0.79)
            } else {
                Vector3::new(-1.94, -rng.random_range(0.05..1.45), rng.random_range(-0.79..0.79))
            };
            rect_pts.push(b.center_bottom + rotation_y(b.yaw) * local);
        }
        let mut zs: Vec<f64> = rect_pts.iter().map(|p| p.z).collect();
        zs.sort_by(f64::total_cmp);

        let velo_to_cam = RigidTransform::new(
            Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0),
            Vector3::new(0.0, -0.08, -0.27),
        )
        .unwrap();
        let mut calib = identity_calib(101, 101);
        calib.tr_velo_to_cam = velo_to_cam.clone();
        let velo_pts = geometry::apply_transform(&velo_to_cam.inverse(), &rect_pts);
        let (anns, _) =
            build_ground_truth("0", &[label], &calib, &cloud_of(&velo_pts), &BuilderConfig::default())
                .unwrap();
        assert_eq!(anns.len(), 1);
        assert_abs_diff_eq!(anns[0].distance, zs[10], epsilon = 1e-5);
        // several surface points can share the selected depth
        assert!(rect_pts
            .iter()
            .filter(|p| (p.z - zs[10]).abs() < 1e-5)
            .any(|p| anns[0].keypoint.distance_to(&project_point(&calib.p2, p).unwrap()) < 1e-3));
    }

    #[test]
    fn split_halves_and_is_deterministic() {
        let ids: Vec<u32> = (0..10).collect();
        let (a, b) = split_dataset(&ids, 0.5, 42);
        assert_eq!((a.len(), b.len()), (5, 5));
        assert!(a.iter().all(|x| !b.contains(x)));
        assert_eq!(split_dataset(&ids, 0.5, 42), (a, b));
    }

    #[test]
    fn stats_examples() {
        let mk = |cat: &str, d: f64| ExtendedAnnotation {
            image_id: "0".into(),
            label: KittiLabel {
                category: cat.into(),
                ..car_label(Point3::origin())
            },
            distance: d,
            keypoint: Pixel::default(),
        };
        let s = dataset_stats(&[mk("Car", 3.0), mk("Car", 7.0), mk("Van", 7.0)]);
        assert_eq!(s.bins.len(), 22);
        assert_eq!(s.bins[0].count, 1);
        assert_eq!(s.bins[1].count, 2);
        assert_eq!(s.per_category["Car"], 2);
        assert_eq!(s.per_category["Van"], 1);
        let empty = dataset_stats(&[]);
        assert!(empty.bins.iter().all(|b| b.count == 0));
        assert_eq!(empty.total, 0);
    }

    fn sample_for_flip() -> SceneSample {
        let mut img = RgbImage::new(101, 101);
        img.set(3, 7, [1.0, 0.0, 0.5]);
        let label = car_label(Point3::new(0.75, 1.5, 10.0));
        SceneSample {
            image_id: "7".into(),
            image: img,
            calib: identity_calib(101, 101),
            annotations: vec![ExtendedAnnotation {
                image_id: "7".into(),
                label,
                distance: 8.25,
                keypoint: Pixel::new(57.5, 30.0),
            }],
            cloud: cloud_of(&[Point3::new(0.75, 1.0, 8.25)]),
        }
    }

    #[test]
    fn flip_twice_restores_sample() {
        let s = sample_for_flip();
        let twice = horizontal_flip_sample(&horizontal_flip_sample(&s));
        assert_eq!(twice.image, s.image);
        assert_eq!(twice.annotations[0].label.bbox, s.annotations[0].label.bbox);
        assert_eq!(twice.annotations[0].keypoint, s.annotations[0].keypoint);
        assert_eq!(twice.annotations[0].distance, s.annotations[0].distance);
        assert!((twice.calib.p2.entries - s.calib.p2.entries).abs().max() < 1e-9);
        assert_abs_diff_eq!(
            twice.annotations[0].label.rotation_y,
            s.annotations[0].label.rotation_y,
            epsilon = 1e-12
        );
    }

    #[test]
    fn centered_box_stays_centered() {
        let mut s = sample_for_flip();
        s.annotations[0].label.bbox = BBox2::new(40.0, 5.0, 60.0, 20.0);
        let f = horizontal_flip_sample(&s);
        assert_eq!(f.annotations[0].label.bbox, BBox2::new(40.0, 5.0, 60.0, 20.0));
    }

    #[test]
    fn flipped_sample_is_projection_consistent() {
        let s = sample_for_flip();
        let src = s.cloud.points[0].position();
        let k = project_point(&s.calib.p2, &src).unwrap();
        let mut s = s;
        s.annotations[0].keypoint = k;
        let f = horizontal_flip_sample(&s);
        let kf = project_point(&f.calib.p2, &mirror_x(&src)).unwrap();
        assert!(kf.distance_to(&f.annotations[0].keypoint) < 1e-6);
        // and ground-truth construction on the flipped sample agrees
        let labels: Vec<KittiLabel> = f.annotations.iter().map(|a| a.label.clone()).collect();
        let (anns, _) =
            build_ground_truth("7", &labels, &f.calib, &f.cloud, &BuilderConfig::default()).unwrap();
        assert!(anns[0].keypoint.distance_to(&f.annotations[0].keypoint) < 1e-4);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn segmentation_invariant_under_joint_rotation(
                yaw in -3.2..3.2f64, turn in -3.2..3.2f64,
                pts in prop::collection::vec(prop::array::uniform3(-3.0..3.0f64), 1..50),
            ) {
                let b = Box3D {
                    center_bottom: Point3::new(1.0, 0.5, 8.0),
                    dims: Dims { height: 1.5, width: 1.2, length: 3.0 },
                    yaw,
                };
                let turned = Box3D { yaw: yaw + turn, ..b };
                let r = rotation_y(turn);
                for p in pts {
                    let p = b.center_bottom + nalgebra::Vector3::from(p);
                    let q = b.center_bottom + r * (p - b.center_bottom);
                    let l = b.to_local(&p);
                    // skip points within rounding distance of a face
                    let margin = [
                        (l.x.abs() - 1.5).abs(), (l.z.abs() - 0.6).abs(), l.y.abs(), (l.y + 1.5).abs(),
                    ];
                    if margin.iter().any(|m| *m < 1e-9) { continue; }
                    prop_assert_eq!(b.contains(&p), turned.contains(&q));
                }
            }

            #[test]
            fn adding_a_nearer_point_never_increases_distance(
                zs in prop::collection::vec(0.5..80.0f64, 1..100), extra in 0.0..0.5f64,
            ) {
                let cfg = BuilderConfig::default();
                let mut pts: Vec<Point3> = zs.iter().map(|&z| Point3::new(0.0, 0.0, z)).collect();
                let (before, _) = extract_gt_distance(&pts, &cfg).unwrap();
                pts.push(Point3::new(0.0, 0.0, extra));
                let (after, _) = extract_gt_distance(&pts, &cfg).unwrap();
                prop_assert!(after <= before);
            }

            #[test]
            fn distance_is_positive_and_bounded(zs in prop::collection::vec(0.1..80.0f64, 1..60)) {
                let pts: Vec<Point3> = zs.iter().map(|&z| Point3::new(0.0, 0.0, z)).collect();
                let (d, _) = extract_gt_distance(&pts, &BuilderConfig::default()).unwrap();
                prop_assert!(d > 0.0);
                prop_assert!(d <= zs.iter().cloned().fold(f64::MIN, f64::max));
            }

            #[test]
            fn split_is_partition(n in 0usize..200, ratio in 0.05..0.95f64, seed in any::<u64>()) {
                let ids: Vec<usize> = (0..n).collect();
                let (a, b) = split_dataset(&ids, ratio, seed);
                let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, ids);
            }
        }
    }
}
