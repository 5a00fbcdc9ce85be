//! Readers and writers for KITTI object labels, calibration files, velodyne
//! scans and the extended (distance + keypoint) annotation format.
//!
//! # Extended annotation format
//!
//! One object per line, whitespace-separated `key=value` tokens in this
//! order (readers accept any order, but every key must appear once):
//!
//! | key          | value                                        |
//! |--------------|----------------------------------------------|
//! | `image_id`   | frame id, no whitespace                      |
//! | `category`   | KITTI type string                            |
//! | `truncated`  | real                                         |
//! | `occluded`   | integer                                      |
//! | `alpha`      | radians                                      |
//! | `bbox`       | `left,top,right,bottom` in pixels            |
//! | `dims`       | `height,width,length` in meters              |
//! | `location`   | `x,y,z` camera frame, box bottom center      |
//! | `rotation_y` | radians                                      |
//! | `distance`   | ground-truth distance (camera z), meters     |
//! | `keypoint_u` | ground-truth keypoint column, pixels         |
//! | `keypoint_v` | ground-truth keypoint row, pixels            |
//!
//! Reals are written with 6 decimal places.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use thiserror::Error;

use crate::geometry::{GeometryError, Pixel, Point3, ProjectionMatrix, RigidTransform};

pub const DONT_CARE: &str = "DontCare";

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("malformed label on line {line}: {reason}")]
    MalformedLabel { line: usize, reason: String },
    #[error("calibration file is missing key {0}")]
    MissingCalibKey(String),
    #[error("malformed calibration record {0}")]
    MalformedCalib(String),
    #[error("velodyne scan length {0} is not a multiple of 16 bytes")]
    TruncatedScan(usize),
    #[error("extended annotation schema violation on line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Axis-aligned image box `(left, top, right, bottom)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox2 {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl BBox2 {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn bottom_center(&self) -> Pixel {
        Pixel::new(0.5 * (self.left + self.right), self.bottom)
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> BBox2 {
        let (w, h) = (width as f64 - 1.0, height as f64 - 1.0);
        BBox2::new(
            self.left.clamp(0.0, w),
            self.top.clamp(0.0, h),
            self.right.clamp(0.0, w),
            self.bottom.clamp(0.0, h),
        )
    }
}

/// Object dimensions in meters, KITTI order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dims {
    pub height: f64,
    pub width: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub category: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox: BBox2,
    pub dims: Dims,
    /// Bottom center of the 3D box in the rectified camera frame.
    pub location: Point3,
    pub rotation_y: f64,
}

impl KittiLabel {
    pub fn is_dont_care(&self) -> bool {
        self.category == DONT_CARE
    }

    /// One line of a KITTI label file.
    pub fn to_kitti_line(&self) -> String {
        format!(
            "{} {:.6} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            self.category,
            self.truncated,
            self.occluded,
            self.alpha,
            self.bbox.left,
            self.bbox.top,
            self.bbox.right,
            self.bbox.bottom,
            self.dims.height,
            self.dims.width,
            self.dims.length,
            self.location.x,
            self.location.y,
            self.location.z,
            self.rotation_y
        )
    }

    fn validate(&self) -> Result<(), String> {
        if !(self.bbox.left <= self.bbox.right && self.bbox.top <= self.bbox.bottom) {
            return Err(format!("inverted bbox {:?}", self.bbox));
        }
        // DontCare regions carry -1 placeholders for their 3D fields.
        if !self.is_dont_care()
            && (self.dims.height < 0.0 || self.dims.width < 0.0 || self.dims.length < 0.0)
        {
            return Err(format!("negative dimensions {:?}", self.dims));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibSet {
    /// Left color camera.
    pub p2: ProjectionMatrix,
    pub r0_rect: RigidTransform,
    pub tr_velo_to_cam: RigidTransform,
}

impl CalibSet {
    /// Velodyne frame to rectified camera frame: `Tr_velo_to_cam` then `R0_rect`.
    pub fn velo_to_rect(&self) -> RigidTransform {
        self.tr_velo_to_cam.then(&self.r0_rect)
    }

    /// KITTI calibration text. P0, P1 and P3 repeat P2; `Tr_imu_to_velo` is
    /// the identity. Readers only consume P2, R0_rect and Tr_velo_to_cam.
    pub fn to_kitti_text(&self) -> String {
        let p = self.p2.row_major();
        let r = self.r0_rect.rotation;
        let tr = self.tr_velo_to_cam.to_matrix3x4();
        let mut out = String::new();
        let join = |vals: &[f64]| {
            vals.iter()
                .map(|v| format!("{v:.12e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for key in ["P0", "P1", "P2", "P3"] {
            let _ = writeln!(out, "{key}: {}", join(&p));
        }
        let r_vals: Vec<f64> = (0..9).map(|i| r[(i / 3, i % 3)]).collect();
        let _ = writeln!(out, "R0_rect: {}", join(&r_vals));
        let tr_vals: Vec<f64> = (0..12).map(|i| tr[(i / 4, i % 4)]).collect();
        let _ = writeln!(out, "Tr_velo_to_cam: {}", join(&tr_vals));
        let ident = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let _ = writeln!(out, "Tr_imu_to_velo: {}", join(&ident));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub reflectance: f32,
}

impl LidarPoint {
    pub fn position(&self) -> Point3 {
        Point3::new(self.x as f64, self.y as f64, self.z as f64)
    }
}

/// Velodyne scan in the sensor frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3> {
        self.points.iter().map(LidarPoint::position).collect()
    }
}

/// A KITTI label extended with its LiDAR-derived distance and keypoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedAnnotation {
    pub image_id: String,
    pub label: KittiLabel,
    pub distance: f64,
    pub keypoint: Pixel,
}

fn parse_f64(tok: &str) -> Option<f64> {
    tok.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn parse_label_line(line: &str, line_no: usize) -> Result<KittiLabel, KittiError> {
    let malformed = |reason: String| KittiError::MalformedLabel {
        line: line_no,
        reason,
    };
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 15 {
        return Err(malformed(format!("expected 15 fields, found {}", fields.len())));
    }
    let mut nums = [0.0f64; 14];
    for (i, tok) in fields[1..].iter().enumerate() {
        if i == 1 {
            continue;
        }
        nums[i] = parse_f64(tok).ok_or_else(|| malformed(format!("non-numeric field {tok:?}")))?;
    }
    let occluded = fields[2]
        .parse::<i32>()
        .map_err(|_| malformed(format!("non-integer occlusion {:?}", fields[2])))?;
    let label = KittiLabel {
        category: fields[0].to_string(),
        truncated: nums[0],
        occluded,
        alpha: nums[2],
        bbox: BBox2::new(nums[3], nums[4], nums[5], nums[6]),
        dims: Dims {
            height: nums[7],
            width: nums[8],
            length: nums[9],
        },
        location: Point3::new(nums[10], nums[11], nums[12]),
        rotation_y: nums[13],
    };
    label.validate().map_err(malformed)?;
    Ok(label)
}

/// Parses a KITTI label file. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn parse_label_file(text: &str) -> Result<Vec<KittiLabel>, KittiError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_label_line(l, i + 1))
        .collect()
}

fn calib_values(records: &HashMap<&str, &str>, key: &str, n: usize) -> Result<Vec<f64>, KittiError> {
    let raw = records
        .get(key)
        .ok_or_else(|| KittiError::MissingCalibKey(key.to_string()))?;
    let vals: Option<Vec<f64>> = raw.split_whitespace().map(parse_f64).collect();
    match vals {
        Some(v) if v.len() == n => Ok(v),
        _ => Err(KittiError::MalformedCalib(key.to_string())),
    }
}

/// Parses a KITTI calibration file. The image size is not part of the file
/// and must be supplied by the caller.
pub fn parse_calib_file(
    text: &str,
    image_width: u32,
    image_height: u32,
) -> Result<CalibSet, KittiError> {
    let records: HashMap<&str, &str> = text
        .lines()
        .filter_map(|l| l.split_once(':'))
        .map(|(k, v)| (k.trim(), v))
        .collect();

    let p2 = calib_values(&records, "P2", 12)?;
    let r0 = calib_values(&records, "R0_rect", 9)?;
    let tr = calib_values(&records, "Tr_velo_to_cam", 12)?;

    let p2 = ProjectionMatrix::new(Matrix3x4::from_row_slice(&p2), image_width, image_height)?;
    let r0_rect = RigidTransform::from_rotation(Matrix3::from_row_slice(&r0))
        .map_err(|_| KittiError::MalformedCalib("R0_rect".into()))?;
    let tr = Matrix3x4::from_row_slice(&tr);
    let tr_velo_to_cam = RigidTransform::new(
        tr.fixed_view::<3, 3>(0, 0).into_owned(),
        Vector3::new(tr[(0, 3)], tr[(1, 3)], tr[(2, 3)]),
    )
    .map_err(|_| KittiError::MalformedCalib("Tr_velo_to_cam".into()))?;

    Ok(CalibSet {
        p2,
        r0_rect,
        tr_velo_to_cam,
    })
}

/// Decodes a raw velodyne scan: little-endian f32 quadruples
/// `(x, y, z, reflectance)`, no header. Reflectance is clamped to `[0, 1]`.
pub fn read_velodyne_bin(bytes: &[u8]) -> Result<PointCloud, KittiError> {
    if bytes.len() % 16 != 0 {
        return Err(KittiError::TruncatedScan(bytes.len()));
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    let points = bytes
        .chunks_exact(16)
        .map(|c| {
            let r = f(&c[12..16]);
            LidarPoint {
                x: f(&c[0..4]),
                y: f(&c[4..8]),
                z: f(&c[8..12]),
                reflectance: if r.is_nan() { 0.0 } else { r.clamp(0.0, 1.0) },
            }
        })
        .collect();
    Ok(PointCloud { points })
}

pub fn write_velodyne_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.reflectance] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Formats one extended-annotation record (no trailing newline).
pub fn format_extended_annotation(a: &ExtendedAnnotation) -> String {
    let l = &a.label;
    format!(
        "image_id={} category={} truncated={:.6} occluded={} alpha={:.6} \
         bbox={:.6},{:.6},{:.6},{:.6} dims={:.6},{:.6},{:.6} location={:.6},{:.6},{:.6} \
         rotation_y={:.6} distance={:.6} keypoint_u={:.6} keypoint_v={:.6}",
        a.image_id,
        l.category,
        l.truncated,
        l.occluded,
        l.alpha,
        l.bbox.left,
        l.bbox.top,
        l.bbox.right,
        l.bbox.bottom,
        l.dims.height,
        l.dims.width,
        l.dims.length,
        l.location.x,
        l.location.y,
        l.location.z,
        l.rotation_y,
        a.distance,
        a.keypoint.u,
        a.keypoint.v
    )
}

pub fn write_extended_annotations<W: Write>(
    anns: &[ExtendedAnnotation],
    mut sink: W,
) -> io::Result<()> {
    for a in anns {
        writeln!(sink, "{}", format_extended_annotation(a))?;
    }
    Ok(())
}

const EXTENDED_KEYS: [&str; 12] = [
    "image_id",
    "category",
    "truncated",
    "occluded",
    "alpha",
    "bbox",
    "dims",
    "location",
    "rotation_y",
    "distance",
    "keypoint_u",
    "keypoint_v",
];

pub fn parse_extended_annotation(line: &str, line_no: usize) -> Result<ExtendedAnnotation, KittiError> {
    let bad = |reason: String| KittiError::SchemaViolation {
        line: line_no,
        reason,
    };
    let mut map: HashMap<&str, &str> = HashMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| bad(format!("token {tok:?} is not key=value")))?;
        if !EXTENDED_KEYS.contains(&k) {
            return Err(bad(format!("unknown key {k:?}")));
        }
        if map.insert(k, v).is_some() {
            return Err(bad(format!("duplicate key {k:?}")));
        }
    }
    let get = |k: &str| map.get(k).copied().ok_or_else(|| bad(format!("missing key {k:?}")));
    let real = |k: &str| -> Result<f64, KittiError> {
        let v = get(k)?;
        parse_f64(v).ok_or_else(|| bad(format!("{k}={v:?} is not a finite number")))
    };
    let list = |k: &str, n: usize| -> Result<Vec<f64>, KittiError> {
        let v = get(k)?;
        let vals: Option<Vec<f64>> = v.split(',').map(parse_f64).collect();
        vals.filter(|x| x.len() == n)
            .ok_or_else(|| bad(format!("{k}={v:?} must hold {n} comma-separated numbers")))
    };

    let image_id = get("image_id")?.to_string();
    let category = get("category")?.to_string();
    if image_id.is_empty() || category.is_empty() {
        return Err(bad("empty image_id or category".into()));
    }
    let occluded_raw = get("occluded")?;
    let occluded = occluded_raw
        .parse::<i32>()
        .map_err(|_| bad(format!("occluded={occluded_raw:?} is not an integer")))?;
    let bbox = list("bbox", 4)?;
    let dims = list("dims", 3)?;
    let loc = list("location", 3)?;
    Ok(ExtendedAnnotation {
        image_id,
        label: KittiLabel {
            category,
            truncated: real("truncated")?,
            occluded,
            alpha: real("alpha")?,
            bbox: BBox2::new(bbox[0], bbox[1], bbox[2], bbox[3]),
            dims: Dims {
                height: dims[0],
                width: dims[1],
                length: dims[2],
            },
            location: Point3::new(loc[0], loc[1], loc[2]),
            rotation_y: real("rotation_y")?,
        },
        distance: real("distance")?,
        keypoint: Pixel::new(real("keypoint_u")?, real("keypoint_v")?),
    })
}

pub fn read_extended_annotations<R: BufRead>(source: R) -> Result<Vec<ExtendedAnnotation>, KittiError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_extended_annotation(&line, i + 1)?);
    }
    Ok(out)
}
