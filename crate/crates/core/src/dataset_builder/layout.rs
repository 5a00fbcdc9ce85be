//! KITTI directory layout: `image_2/`, `label_2/`, `calib/`, `velodyne/`
//! keyed by a shared frame id.

use std::fs;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{build_ground_truth, BuilderConfig, ConstructionReport, SceneSample};
use crate::image::{image_dimensions, ImageError};
use crate::kitti_io::{
    parse_calib_file, parse_label_file, read_velodyne_bin, write_extended_annotations,
    write_velodyne_bin, CalibSet, ExtendedAnnotation, KittiError, KittiLabel, PointCloud,
};

/// Generator-side annotations written next to a synthetic KITTI layout.
pub const SYNTH_ANNOTATIONS_FILE: &str = "synth_annotations.txt";

const SUBDIRS: [&str; 4] = ["image_2", "label_2", "calib", "velodyne"];

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: KittiError },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: ImageError },
}

fn parse_err(path: &Path) -> impl FnOnce(KittiError) -> LayoutError + '_ {
    move |source| LayoutError::Parse {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> LayoutError + '_ {
    move |source| LayoutError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone)]
pub struct FrameFiles {
    pub image: PathBuf,
    pub label: PathBuf,
    pub calib: PathBuf,
    pub velodyne: PathBuf,
}

impl FrameFiles {
    pub fn new(root: &Path, id: &str) -> Self {
        Self {
            image: root.join("image_2").join(format!("{id}.png")),
            label: root.join("label_2").join(format!("{id}.txt")),
            calib: root.join("calib").join(format!("{id}.txt")),
            velodyne: root.join("velodyne").join(format!("{id}.bin")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KittiFrame {
    pub id: String,
    pub image_path: PathBuf,
    pub labels: Vec<KittiLabel>,
    pub calib: CalibSet,
    pub cloud: PointCloud,
}

/// Checks that all four layout directories exist.
pub fn check_layout(root: &Path) -> Result<(), LayoutError> {
    for sub in SUBDIRS {
        let p = root.join(sub);
        if !p.is_dir() {
            return Err(LayoutError::MissingDirectory(p));
        }
    }
    Ok(())
}

/// Frame ids present in `label_2/`, sorted.
pub fn frame_ids(root: &Path) -> Result<Vec<String>, LayoutError> {
    let dir = root.join("label_2");
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn load_frame(root: &Path, id: &str) -> Result<KittiFrame, LayoutError> {
    let files = FrameFiles::new(root, id);
    let (w, h) = image_dimensions(&files.image).map_err(|source| LayoutError::Image {
        path: files.image.clone(),
        source,
    })?;
    let label_text = fs::read_to_string(&files.label).map_err(io_err(&files.label))?;
    let labels = parse_label_file(&label_text).map_err(parse_err(&files.label))?;
    let calib_text = fs::read_to_string(&files.calib).map_err(io_err(&files.calib))?;
    let calib = parse_calib_file(&calib_text, w, h).map_err(parse_err(&files.calib))?;
    let bytes = fs::read(&files.velodyne).map_err(io_err(&files.velodyne))?;
    let cloud = read_velodyne_bin(&bytes).map_err(parse_err(&files.velodyne))?;
    Ok(KittiFrame {
        id: id.to_string(),
        image_path: files.image,
        labels,
        calib,
        cloud,
    })
}

/// Writes samples as a KITTI layout plus [`SYNTH_ANNOTATIONS_FILE`].
pub fn write_kitti_layout(root: &Path, samples: &[SceneSample]) -> Result<(), LayoutError> {
    for sub in SUBDIRS {
        let p = root.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let mut all = Vec::new();
    for s in samples {
        let files = FrameFiles::new(root, &s.image_id);
        s.image
            .save_png(&files.image)
            .map_err(|source| LayoutError::Image {
                path: files.image.clone(),
                source,
            })?;
        let mut labels = String::new();
        for a in &s.annotations {
            labels.push_str(&a.label.to_kitti_line());
            labels.push('\n');
        }
        fs::write(&files.label, labels).map_err(io_err(&files.label))?;
        fs::write(&files.calib, s.calib.to_kitti_text()).map_err(io_err(&files.calib))?;
        fs::write(&files.velodyne, write_velodyne_bin(&s.cloud)).map_err(io_err(&files.velodyne))?;
        all.extend(s.annotations.iter().cloned());
    }
    write_annotation_file(&root.join(SYNTH_ANNOTATIONS_FILE), &all)
}

pub fn write_annotation_file(path: &Path, anns: &[ExtendedAnnotation]) -> Result<(), LayoutError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    write_extended_annotations(anns, BufWriter::new(file)).map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct FrameFailure {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct BuildDirOutcome {
    pub annotations: Vec<ExtendedAnnotation>,
    pub report: ConstructionReport,
    pub frames: usize,
    pub failures: Vec<FrameFailure>,
}

/// Runs ground-truth construction over every frame of a KITTI layout.
/// Frames that fail to load are recorded and skipped.
pub fn build_dataset_dir(root: &Path, cfg: &BuilderConfig) -> Result<BuildDirOutcome, LayoutError> {
    check_layout(root)?;
    let mut outcome = BuildDirOutcome {
        annotations: Vec::new(),
        report: ConstructionReport::default(),
        frames: 0,
        failures: Vec::new(),
    };
    for id in frame_ids(root)? {
        let frame = match load_frame(root, &id) {
            Ok(f) => f,
            Err(e) => {
                outcome.failures.push(FrameFailure {
                    id,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        match build_ground_truth(&id, &frame.labels, &frame.calib, &frame.cloud, cfg) {
            Ok((anns, report)) => {
                outcome.frames += 1;
                outcome.annotations.extend(anns);
                outcome.report.merge(&report);
            }
            Err(e) => outcome.failures.push(FrameFailure {
                id,
                reason: e.to_string(),
            }),
        }
    }
    Ok(outcome)
}
