use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use objdist::baselines::{
    ipm_estimate, load_svr, save_svr, svr_fit, svr_predict, FitStatus, IpmConfig, SvrModel, SvrParams, SvrSample,
};
use objdist::dataset_builder::{
    build_dataset_dir, dataset_stats_with, generate_synthetic_dataset, write_annotation_file, write_kitti_layout,
    BuilderConfig, ConstructionReport, SceneConfig,
};
use objdist::image::{image_dimensions, RgbImage};
use objdist::kitti_io::{parse_calib_file, read_extended_annotations, BBox2, ExtendedAnnotation, DONT_CARE};
use objdist::metrics::{evaluate, format_json_lines, format_table, object_keys, Averaging, Estimate, EvalConfig};
use objdist::nnet::checkpoint::{load_model, save_model};
use objdist::nnet::{Mode, Model};
use objdist::trainer::{benchmark, group_by_image, load_samples, predict as model_predict, train_with, TrainConfig, TrainError};

use crate::boxes::parse_boxes;
use crate::draw::{annotate, distance_label};
use crate::error::{CliError, CliResult, ErrorClass, InputContext};
use crate::{
    AveragingArg, BenchArgs, BuildDatasetArgs, Estimator, EvalArgs, PredictArgs, ReportFormat, StatsArgs, StatsFormat,
    SynthArgs, TrainArgs, VisualizeArgs,
};

fn io_out(e: std::io::Error) -> CliError {
    CliError::other(format!("writing output: {e}"))
}

fn read_annotations(path: &Path) -> CliResult<Vec<ExtendedAnnotation>> {
    let file = fs::File::open(path).input_ctx(path.display())?;
    read_extended_annotations(BufReader::new(file)).input_ctx(path.display())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(CliError::other)?;
    fs::write(path, text + "\n").input_ctx(path.display())
}

#[derive(Serialize)]
struct BuildReport<'a> {
    frames: usize,
    report: &'a ConstructionReport,
    failures: Vec<BTreeMap<&'static str, &'a str>>,
}

pub fn build_dataset(a: &BuildDatasetArgs, out: &mut dyn Write) -> CliResult {
    let cfg = BuilderConfig {
        percentile_ratio: a.percentile_ratio,
        min_points: a.min_points,
    };
    cfg.validate().map_err(CliError::input)?;
    let outcome = build_dataset_dir(&a.kitti_dir, &cfg).map_err(CliError::input)?;
    write_annotation_file(&a.out, &outcome.annotations).map_err(CliError::input)?;
    let report_path = a.report.clone().unwrap_or_else(|| with_suffix(&a.out, ".report.json"));
    let failures = outcome
        .failures
        .iter()
        .map(|f| BTreeMap::from([("id", f.id.as_str()), ("reason", f.reason.as_str())]))
        .collect();
    write_json(
        &report_path,
        &BuildReport {
            frames: outcome.frames,
            report: &outcome.report,
            failures,
        },
    )?;
    let r = &outcome.report;
    writeln!(
        out,
        "frames={} failed_frames={} labels={} kept={} dont_care={} empty_segments={} too_few_points={} non_positive_distance={} keypoint_outside_image={} degenerate_projection={}",
        outcome.frames,
        outcome.failures.len(),
        r.labels,
        r.kept,
        r.dont_care,
        r.empty_segments,
        r.too_few_points,
        r.non_positive_distance,
        r.keypoint_outside_image,
        r.degenerate_projection
    )
    .map_err(io_out)?;
    for f in &outcome.failures {
        eprintln!("frame {}: {}", f.id, f.reason);
    }
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            ErrorClass::PartialFrames,
            format!("{} frame(s) failed", outcome.failures.len()),
        ))
    }
}

pub fn synth(a: &SynthArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).input_ctx(path.display())?;
            toml::from_str::<SceneConfig>(&text).input_ctx(path.display())?
        }
        None => SceneConfig::default(),
    };
    if let Some(n) = a.frames {
        cfg.frames = n;
    }
    let scenes = generate_synthetic_dataset(&cfg, a.seed).map_err(CliError::input)?;
    write_kitti_layout(&a.out_dir, &scenes).map_err(CliError::input)?;
    let objects: usize = scenes.iter().map(|s| s.annotations.len()).sum();
    writeln!(out, "frames={} objects={} seed={}", scenes.len(), objects, a.seed).map_err(io_out)
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::EmptyDataset
        | TrainError::MissingKeypointTargets(_)
        | TrainError::Config(_)
        | TrainError::UnknownCategory(_) => CliError::input(e),
        other => CliError::other(other),
    }
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path).input_ctx(path.display())?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if cfg.mode == Mode::Enhanced && a.calib_dir.is_none() {
        return Err(CliError::input("enhanced mode needs --calib-dir for the keypoint loss"));
    }
    let anns = read_annotations(&a.annotations)?;
    let data = load_samples(&anns, &a.images_dir, a.calib_dir.as_deref()).map_err(CliError::input)?;
    let mut write_failed = None;
    let (model, report) = train_with(&data, &cfg, |stats, _| {
        if let Err(e) = writeln!(out, "{}", stats.log_line()) {
            write_failed.get_or_insert(e);
        }
    })
    .map_err(train_error)?;
    if let Some(e) = write_failed {
        return Err(io_out(e));
    }
    save_model(&a.out, &model).input_ctx(a.out.display())?;
    let report_path = a.report.clone().unwrap_or_else(|| with_suffix(&a.out, ".report.json"));
    write_json(&report_path, &report)
}

/// One line of `eval --predictions-out`.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub index: usize,
    pub category: String,
    pub bbox: [f64; 4],
    pub gt: f64,
    pub pred: Option<f64>,
}

fn model_estimates(a: &EvalArgs, anns: &[ExtendedAnnotation]) -> CliResult<BTreeMap<(String, usize), Option<f64>>> {
    let ckpt = a
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::new(ErrorClass::Usage, "--estimator model needs --checkpoint"))?;
    let images = a
        .images_dir
        .as_ref()
        .ok_or_else(|| CliError::new(ErrorClass::Usage, "--estimator model needs --images-dir"))?;
    let model = load_model(ckpt).input_ctx(ckpt.display())?;
    let mut preds = BTreeMap::new();
    for (id, objs) in group_by_image(anns) {
        let path = images.join(format!("{id}.png"));
        let image = RgbImage::load(&path).input_ctx(path.display())?;
        let usable: Vec<usize> = (0..objs.len())
            .filter(|&i| {
                let c = objs[i].label.bbox.clamp_to(image.width(), image.height());
                c.width() > 0.0 && c.height() > 0.0
            })
            .collect();
        let boxes: Vec<BBox2> = usable.iter().map(|&i| objs[i].label.bbox).collect();
        for i in 0..objs.len() {
            preds.insert((id.clone(), i), None);
        }
        if boxes.is_empty() {
            continue;
        }
        let out = model_predict(&model, &image, &boxes).map_err(CliError::other)?;
        for (&i, (d, _)) in usable.iter().zip(out) {
            preds.insert((id.clone(), i), Some(d));
        }
    }
    Ok(preds)
}

fn ipm_estimates(a: &EvalArgs, anns: &[ExtendedAnnotation]) -> CliResult<BTreeMap<(String, usize), Option<f64>>> {
    let calib_dir = a
        .calib_dir
        .as_ref()
        .ok_or_else(|| CliError::new(ErrorClass::Usage, "--estimator ipm needs --calib-dir"))?;
    let mut preds = BTreeMap::new();
    for (id, objs) in group_by_image(anns) {
        let path = calib_dir.join(format!("{id}.txt"));
        let text = fs::read_to_string(&path).input_ctx(path.display())?;
        // Only the intrinsics are used, so the image size need not be real
        // when no image directory is given.
        let (w, h) = match &a.images_dir {
            Some(dir) => {
                let img = dir.join(format!("{id}.png"));
                image_dimensions(&img).input_ctx(img.display())?
            }
            None => (1, 1),
        };
        let calib = parse_calib_file(&text, w, h).input_ctx(path.display())?;
        let cfg = IpmConfig {
            intrinsics: calib.p2.intrinsics(),
            cam_height: a.cam_height,
            pitch: a.pitch,
        };
        for (i, o) in objs.iter().enumerate() {
            let est = match ipm_estimate(&cfg, &o.label.bbox) {
                Ok(d) => Some(d),
                Err(objdist::baselines::IpmError::BadCameraHeight(h)) => {
                    return Err(CliError::input(format!("camera height must be positive, got {h}")))
                }
                Err(_) => None,
            };
            preds.insert((id.clone(), i), est);
        }
    }
    Ok(preds)
}

fn svr_samples(anns: &[ExtendedAnnotation], exclude: &[String]) -> Vec<SvrSample> {
    anns.iter()
        .filter(|a| !exclude.contains(&a.label.category))
        .map(|a| SvrSample {
            width: a.label.bbox.width(),
            height: a.label.bbox.height(),
            distance: a.distance,
        })
        .filter(|s| s.width > 0.0 && s.height > 0.0 && s.distance > 0.0)
        .collect()
}

fn svr_model(a: &EvalArgs, out: &mut dyn Write) -> CliResult<SvrModel> {
    if let Some(path) = &a.svr_model {
        return load_svr(path).input_ctx(path.display());
    }
    let train_path = a
        .svr_train
        .as_ref()
        .ok_or_else(|| CliError::new(ErrorClass::Usage, "--estimator svr needs --svr-train or --svr-model"))?;
    let samples = svr_samples(&read_annotations(train_path)?, &a.exclude);
    let params = SvrParams {
        c: a.svr_c,
        epsilon: a.svr_epsilon,
        ..SvrParams::default()
    };
    let fit = svr_fit(&samples, &params).map_err(CliError::input)?;
    if a.format == ReportFormat::Table {
        writeln!(
            out,
            "svr samples={} support_vectors={} iterations={} status={}",
            samples.len(),
            fit.model.coef.len(),
            fit.iterations,
            match fit.status {
                FitStatus::Converged => "converged",
                FitStatus::IterationLimit => "iteration-limit",
                FitStatus::DegenerateData => "degenerate-data",
            }
        )
        .map_err(io_out)?;
    }
    if fit.status == FitStatus::DegenerateData {
        eprintln!("warning: SVR targets are constant within the tube; the model predicts a constant");
    }
    if let Some(path) = &a.save_svr {
        save_svr(path, &fit.model).input_ctx(path.display())?;
    }
    Ok(fit.model)
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> CliResult {
    let anns = read_annotations(&a.annotations)?;
    let preds = match a.estimator {
        Estimator::Model => model_estimates(a, &anns)?,
        Estimator::Ipm => ipm_estimates(a, &anns)?,
        Estimator::Svr => {
            let m = svr_model(a, out)?;
            object_keys(&anns)
                .into_iter()
                .zip(&anns)
                .map(|(k, o)| {
                    let (w, h) = (o.label.bbox.width(), o.label.bbox.height());
                    (k, (w > 0.0 && h > 0.0).then(|| svr_predict(&m, w, h)))
                })
                .collect()
        }
    };
    let estimates: Vec<Estimate> = object_keys(&anns)
        .into_iter()
        .map(|k| Estimate {
            distance: preds.get(&k).copied().flatten(),
            image_id: k.0,
            index: k.1,
        })
        .collect();
    let cfg = EvalConfig {
        exclude_categories: a.exclude.iter().cloned().collect(),
        bin_width: a.bin_width,
        category_breakdown: a.categories.clone(),
        averaging: match a.averaging {
            AveragingArg::Micro => Averaging::Micro,
            AveragingArg::Macro => Averaging::Macro,
        },
    };
    let report = evaluate(&estimates, &anns, &cfg).map_err(CliError::input)?;
    let text = match a.format {
        ReportFormat::Table => format_table(&report),
        ReportFormat::Jsonl => format_json_lines(&report),
    };
    out.write_all(text.as_bytes()).map_err(io_out)?;
    if let Some(path) = &a.predictions_out {
        let mut lines = String::new();
        for (e, o) in estimates.iter().zip(&anns) {
            let b = o.label.bbox;
            let rec = PredictionRecord {
                image_id: e.image_id.clone(),
                index: e.index,
                category: o.label.category.clone(),
                bbox: [b.left, b.top, b.right, b.bottom],
                gt: o.distance,
                pred: e.distance,
            };
            lines.push_str(&serde_json::to_string(&rec).map_err(CliError::other)?);
            lines.push('\n');
        }
        fs::write(path, lines).input_ctx(path.display())?;
    }
    let failed = report.failure_count();
    if failed > 0 {
        return Err(CliError::new(
            ErrorClass::Estimator,
            format!("estimator produced no distance for {failed} object(s)"),
        ));
    }
    Ok(())
}

pub fn predict(a: &PredictArgs, out: &mut dyn Write) -> CliResult {
    let model = load_model(&a.checkpoint).input_ctx(a.checkpoint.display())?;
    let image = RgbImage::load(&a.image).input_ctx(a.image.display())?;
    let text = fs::read_to_string(&a.boxes).input_ctx(a.boxes.display())?;
    let entries = parse_boxes(&text).input_ctx(a.boxes.display())?;
    let boxes: Vec<BBox2> = entries.iter().map(|e| e.bbox).collect();
    let preds = model_predict(&model, &image, &boxes).map_err(|e| CliError::new(ErrorClass::Estimator, e.to_string()))?;
    for (b, (d, cat)) in boxes.iter().zip(preds) {
        let line = match a.format {
            ReportFormat::Table => format!(
                "{:.2} {:.2} {:.2} {:.2} -> {:.3} m, {}",
                b.left, b.top, b.right, b.bottom, d, cat
            ),
            ReportFormat::Jsonl => serde_json::json!({
                "bbox": [b.left, b.top, b.right, b.bottom],
                "distance": d,
                "category": cat,
            })
            .to_string(),
        };
        writeln!(out, "{line}").map_err(io_out)?;
    }
    Ok(())
}

pub fn visualize(a: &VisualizeArgs, out: &mut dyn Write) -> CliResult {
    let text = fs::read_to_string(&a.predictions).input_ctx(a.predictions.display())?;
    let mut by_image: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: PredictionRecord =
            serde_json::from_str(line).input_ctx(format!("{}:{}", a.predictions.display(), i + 1))?;
        by_image.entry(rec.image_id.clone()).or_default().push(rec);
    }
    fs::create_dir_all(&a.out_dir).input_ctx(a.out_dir.display())?;
    for (id, recs) in &by_image {
        let path = a.images_dir.join(format!("{id}.png"));
        let mut image = RgbImage::load(&path).input_ctx(path.display())?;
        for r in recs.iter().filter(|r| r.category != DONT_CARE) {
            let b = BBox2::new(r.bbox[0], r.bbox[1], r.bbox[2], r.bbox[3]);
            let color = if r.pred.is_some() { [0.1, 1.0, 0.2] } else { [1.0, 0.2, 0.1] };
            annotate(&mut image, &b, &distance_label(r.gt, r.pred), color);
        }
        let dest = a.out_dir.join(format!("{id}.png"));
        image.save_png(&dest).input_ctx(dest.display())?;
    }
    writeln!(out, "images={} out_dir={}", by_image.len(), a.out_dir.display()).map_err(io_out)
}

pub fn stats(a: &StatsArgs, out: &mut dyn Write) -> CliResult {
    if !(a.bin_width > 0.0) || !(a.max_distance > 0.0) {
        return Err(CliError::input("--bin-width and --max-distance must be positive"));
    }
    let anns = read_annotations(&a.annotations)?;
    let s = dataset_stats_with(&anns, a.bin_width, a.max_distance);
    let text = match a.format {
        StatsFormat::Json => serde_json::to_string(&s).map_err(CliError::other)? + "\n",
        StatsFormat::Table => {
            let mut t = format!("objects {}\n", s.total);
            for b in &s.bins {
                t.push_str(&format!("{:>6.1}-{:<6.1} {:>6}\n", b.lo, b.hi, b.count));
            }
            t.push_str(&format!("out_of_range {}\n", s.out_of_range));
            for (c, n) in &s.per_category {
                t.push_str(&format!("{c} {n}\n"));
            }
            t
        }
    };
    out.write_all(text.as_bytes()).map_err(io_out)
}

fn default_boxes(w: u32, h: u32) -> Vec<BBox2> {
    let (w, h) = (w as f64, h as f64);
    [(0.1, 0.3), (0.4, 0.6), (0.7, 0.9)]
        .iter()
        .map(|&(l, r)| BBox2::new(l * w, 0.45 * h, r * w, 0.8 * h))
        .collect()
}

const BENCH_MAX_IMAGES: usize = 16;

pub fn bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult {
    let model: Model = load_model(&a.checkpoint).input_ctx(a.checkpoint.display())?;
    let mut inputs = Vec::new();
    match &a.annotations {
        Some(path) => {
            let anns = read_annotations(path)?;
            for (id, objs) in group_by_image(&anns).into_iter().take(BENCH_MAX_IMAGES) {
                let p = a.images_dir.join(format!("{id}.png"));
                let img = RgbImage::load(&p).input_ctx(p.display())?;
                let boxes = objs.iter().map(|o| o.label.bbox).collect();
                inputs.push((img, boxes));
            }
        }
        None => {
            let mut pngs: Vec<PathBuf> = fs::read_dir(&a.images_dir)
                .input_ctx(a.images_dir.display())?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            pngs.sort();
            for p in pngs.into_iter().take(BENCH_MAX_IMAGES) {
                let img = RgbImage::load(&p).input_ctx(p.display())?;
                let boxes = default_boxes(img.width(), img.height());
                inputs.push((img, boxes));
            }
        }
    }
    if inputs.is_empty() {
        return Err(CliError::input("no images to benchmark"));
    }
    let r = benchmark(&model, &inputs, a.warmup, a.frames).map_err(|e| CliError::new(ErrorClass::Estimator, e.to_string()))?;
    writeln!(
        out,
        "frames={} warmup={} mean_ms={:.3} p95_ms={:.3} max_ms={:.3}",
        r.frames, r.warmup, r.mean_ms, r.p95_ms, r.max_ms
    )
    .map_err(io_out)
}
