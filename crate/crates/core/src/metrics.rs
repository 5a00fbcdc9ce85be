//! Distance-estimation metrics: δ-threshold accuracies, relative errors and
//! RMSE variants, per-category reports and distance-binned RMSE.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kitti_io::{ExtendedAnnotation, DONT_CARE};

pub const DELTA_BASE: f64 = 1.25;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions for {gts} ground-truth values")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("no objects to evaluate")]
    Empty,
    #[error("ground-truth distance {0} is not positive")]
    NonPositiveTarget(f64),
    #[error("prediction {index} is for {found}, expected {expected}")]
    Alignment {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("bin width must be positive")]
    BadBinWidth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub abs_rel: f64,
    pub squa_rel: f64,
    pub rmse: f64,
    /// Over positive predictions only; `NaN` when there are none.
    pub rmse_log: f64,
    pub count: usize,
    /// Predictions `≤ 0`: they fail every δ threshold and are left out of
    /// `rmse_log`.
    pub non_positive: usize,
}

fn check_pairs(preds: &[f64], gts: &[f64]) -> Result<(), MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    if gts.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(&g) = gts.iter().find(|&&g| !(g > 0.0)) {
        return Err(MetricsError::NonPositiveTarget(g));
    }
    Ok(())
}

pub fn compute_metrics(preds: &[f64], gts: &[f64]) -> Result<MetricsReport, MetricsError> {
    check_pairs(preds, gts)?;
    let n = gts.len() as f64;
    let thresholds = [DELTA_BASE, DELTA_BASE * DELTA_BASE, DELTA_BASE.powi(3)];
    let mut hits = [0usize; 3];
    let (mut abs_rel, mut squa_rel, mut se, mut sle) = (0.0, 0.0, 0.0, 0.0);
    let mut non_positive = 0;
    for (&d, &g) in preds.iter().zip(gts) {
        let diff = d - g;
        abs_rel += diff.abs() / g;
        squa_rel += diff * diff / g;
        se += diff * diff;
        if d > 0.0 {
            let ratio = (d / g).max(g / d);
            for (h, t) in hits.iter_mut().zip(thresholds) {
                if ratio < t {
                    *h += 1;
                }
            }
            let l = (d / g).ln();
            sle += l * l;
        } else {
            non_positive += 1;
        }
    }
    let positive = gts.len() - non_positive;
    Ok(MetricsReport {
        delta1: hits[0] as f64 / n,
        delta2: hits[1] as f64 / n,
        delta3: hits[2] as f64 / n,
        abs_rel: abs_rel / n,
        squa_rel: squa_rel / n,
        rmse: (se / n).sqrt(),
        rmse_log: if positive == 0 { f64::NAN } else { (sle / positive as f64).sqrt() },
        count: gts.len(),
        non_positive,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinRmse {
    pub lo: f64,
    pub hi: f64,
    pub rmse: f64,
    pub count: usize,
}

/// RMSE per `[k·w, (k+1)·w)` ground-truth bin; empty bins are omitted.
pub fn binned_rmse(preds: &[f64], gts: &[f64], bin_width: f64) -> Result<Vec<BinRmse>, MetricsError> {
    if !(bin_width > 0.0) {
        return Err(MetricsError::BadBinWidth);
    }
    check_pairs(preds, gts)?;
    let mut bins: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (&d, &g) in preds.iter().zip(gts) {
        let e = bins.entry((g / bin_width).floor() as u64).or_default();
        e.0 += (d - g) * (d - g);
        e.1 += 1;
    }
    Ok(bins
        .into_iter()
        .map(|(k, (se, count))| BinRmse {
            lo: k as f64 * bin_width,
            hi: (k + 1) as f64 * bin_width,
            rmse: (se / count as f64).sqrt(),
            count,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    /// Pool every included object.
    #[default]
    Micro,
    /// Mean of the per-category reports over every included category.
    Macro,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub exclude_categories: BTreeSet<String>,
    pub bin_width: f64,
    pub category_breakdown: Vec<String>,
    pub averaging: Averaging,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            exclude_categories: BTreeSet::from([DONT_CARE.to_string()]),
            bin_width: 10.0,
            category_breakdown: vec!["Car".into(), "Pedestrian".into(), "Cyclist".into()],
            averaging: Averaging::Micro,
        }
    }
}

/// One estimate for the `index`-th annotation of `image_id` (counting in
/// annotation-file order). `None` marks an estimator failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub image_id: String,
    pub index: usize,
    pub distance: Option<f64>,
}

/// Object keys `(image_id, index)` in annotation order.
pub fn object_keys(anns: &[ExtendedAnnotation]) -> Vec<(String, usize)> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    anns.iter()
        .map(|a| {
            let c = seen.entry(&a.image_id).or_default();
            let key = (a.image_id.clone(), *c);
            *c += 1;
            key
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub name: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryReport>,
    pub average: Option<MetricsReport>,
    pub averaging: Averaging,
    pub bins: Vec<BinRmse>,
    /// Objects left out by category.
    pub excluded: BTreeMap<String, usize>,
    /// Included objects without an estimate, by category.
    pub failures: BTreeMap<String, usize>,
}

impl EvalReport {
    pub fn failure_count(&self) -> usize {
        self.failures.values().sum()
    }
}

fn average_of(reports: &[MetricsReport]) -> MetricsReport {
    let k = reports.len() as f64;
    let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    MetricsReport {
        delta1: mean(|r| r.delta1),
        delta2: mean(|r| r.delta2),
        delta3: mean(|r| r.delta3),
        abs_rel: mean(|r| r.abs_rel),
        squa_rel: mean(|r| r.squa_rel),
        rmse: mean(|r| r.rmse),
        rmse_log: mean(|r| r.rmse_log),
        count: reports.iter().map(|r| r.count).sum(),
        non_positive: reports.iter().map(|r| r.non_positive).sum(),
    }
}

/// Per-category and average reports. `estimates` must list the annotations'
/// objects in the same order as `anns`.
pub fn evaluate(
    estimates: &[Estimate],
    anns: &[ExtendedAnnotation],
    cfg: &EvalConfig,
) -> Result<EvalReport, MetricsError> {
    if !(cfg.bin_width > 0.0) {
        return Err(MetricsError::BadBinWidth);
    }
    if estimates.len() != anns.len() {
        return Err(MetricsError::LengthMismatch {
            preds: estimates.len(),
            gts: anns.len(),
        });
    }
    let mut excluded = BTreeMap::new();
    let mut failures = BTreeMap::new();
    let mut by_cat: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let (mut all_p, mut all_g) = (Vec::new(), Vec::new());
    for (i, ((e, a), key)) in estimates.iter().zip(anns).zip(object_keys(anns)).enumerate() {
        if (e.image_id.as_str(), e.index) != (key.0.as_str(), key.1) {
            return Err(MetricsError::Alignment {
                index: i,
                expected: format!("{}#{}", key.0, key.1),
                found: format!("{}#{}", e.image_id, e.index),
            });
        }
        let cat = a.label.category.as_str();
        if cfg.exclude_categories.contains(cat) {
            *excluded.entry(cat.to_string()).or_insert(0) += 1;
            continue;
        }
        let Some(d) = e.distance else {
            *failures.entry(cat.to_string()).or_insert(0) += 1;
            continue;
        };
        let entry = by_cat.entry(cat).or_default();
        entry.0.push(d);
        entry.1.push(a.distance);
        all_p.push(d);
        all_g.push(a.distance);
    }
    let mut categories = Vec::new();
    for name in &cfg.category_breakdown {
        if let Some((p, g)) = by_cat.get(name.as_str()) {
            categories.push(CategoryReport {
                name: name.clone(),
                report: compute_metrics(p, g)?,
            });
        }
    }
    let average = if all_g.is_empty() {
        None
    } else {
        Some(match cfg.averaging {
            Averaging::Micro => compute_metrics(&all_p, &all_g)?,
            Averaging::Macro => {
                let reps = by_cat
                    .values()
                    .map(|(p, g)| compute_metrics(p, g))
                    .collect::<Result<Vec<_>, _>>()?;
                average_of(&reps)
            }
        })
    };
    let bins = if all_g.is_empty() {
        Vec::new()
    } else {
        binned_rmse(&all_p, &all_g, cfg.bin_width)?
    };
    Ok(EvalReport {
        categories,
        average,
        averaging: cfg.averaging,
        bins,
        excluded,
        failures,
    })
}

/// Human-readable table: one row per category plus the average, then the
/// distance bins.
pub fn format_table(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>6} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8} {:>8}",
        "category", "count", "d<1.25", "d<1.25^2", "d<1.25^3", "AbsRel", "SquaRel", "RMSE", "RMSElog"
    );
    let mut row = |name: &str, r: &MetricsReport| {
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>9.3} {:>9.3} {:>9.3} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            name, r.count, r.delta1, r.delta2, r.delta3, r.abs_rel, r.squa_rel, r.rmse, r.rmse_log
        );
    };
    for c in &report.categories {
        row(&c.name, &c.report);
    }
    if let Some(avg) = &report.average {
        row("Average", avg);
    }
    if !report.bins.is_empty() {
        let _ = writeln!(s, "\n{:<12} {:>6} {:>8}", "range_m", "count", "RMSE");
        for b in &report.bins {
            let _ = writeln!(s, "{:<12} {:>6} {:>8.3}", format!("{}-{}", b.lo, b.hi), b.count, b.rmse);
        }
    }
    for (cat, n) in &report.failures {
        let _ = writeln!(s, "failed estimates: {cat} {n}");
    }
    for (cat, n) in &report.excluded {
        let _ = writeln!(s, "excluded: {cat} {n}");
    }
    s
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record<'a> {
    Category {
        name: &'a str,
        #[serde(flatten)]
        report: &'a MetricsReport,
    },
    Average {
        averaging: Averaging,
        #[serde(flatten)]
        report: &'a MetricsReport,
    },
    Bin(&'a BinRmse),
    Failures {
        category: &'a str,
        count: usize,
    },
    Excluded {
        category: &'a str,
        count: usize,
    },
}

/// One JSON object per line, tagged by `"record"`.
pub fn format_json_lines(report: &EvalReport) -> String {
    let mut out = String::new();
    let mut push = |r: Record| {
        out.push_str(&serde_json::to_string(&r).expect("serializable record"));
        out.push('\n');
    };
    for c in &report.categories {
        push(Record::Category {
            name: &c.name,
            report: &c.report,
        });
    }
    if let Some(avg) = &report.average {
        push(Record::Average {
            averaging: report.averaging,
            report: avg,
        });
    }
    for b in &report.bins {
        push(Record::Bin(b));
    }
    for (c, &n) in &report.failures {
        push(Record::Failures { category: c, count: n });
    }
    for (c, &n) in &report.excluded {
        push(Record::Excluded { category: c, count: n });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pixel, Point3};
    use crate::kitti_io::{BBox2, Dims, KittiLabel};
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_predictions() {
        let r = compute_metrics(&[10.0, 20.0], &[10.0, 20.0]).unwrap();
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!((r.abs_rel, r.squa_rel, r.rmse, r.rmse_log), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn single_pair_hand_values() {
        let r = compute_metrics(&[10.0], &[8.0]).unwrap();
        assert_eq!(r.abs_rel, 0.25);
        assert_eq!(r.squa_rel, 0.5);
        assert_eq!(r.rmse, 2.0);
        assert_eq!(r.rmse_log, 1.25f64.ln());
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 1.0, 1.0));
        let r = compute_metrics(&[12.4], &[10.0]).unwrap();
        assert_eq!(r.delta1, 1.0);
    }

    #[test]
    fn errors_and_non_positive_predictions() {
        assert_eq!(
            compute_metrics(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::LengthMismatch { preds: 1, gts: 2 })
        );
        assert_eq!(compute_metrics(&[], &[]), Err(MetricsError::Empty));
        let r = compute_metrics(&[-1.0, 10.0], &[5.0, 10.0]).unwrap();
        assert_eq!(r.non_positive, 1);
        assert_eq!(r.delta3, 0.5);
        assert_eq!(r.rmse_log, 0.0);
    }

    #[test]
    fn bins_hand_example() {
        let b = binned_rmse(&[6.0, 18.0], &[5.0, 15.0], 10.0).unwrap();
        assert_eq!(
            b,
            vec![
                BinRmse { lo: 0.0, hi: 10.0, rmse: 1.0, count: 1 },
                BinRmse { lo: 10.0, hi: 20.0, rmse: 3.0, count: 1 },
            ]
        );
        let one = binned_rmse(&[1.0, 4.0], &[2.0, 3.0], 10.0).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].rmse, compute_metrics(&[1.0, 4.0], &[2.0, 3.0]).unwrap().rmse);
        let gap = binned_rmse(&[1.0, 55.0], &[2.0, 50.0], 10.0).unwrap();
        assert_eq!(gap.iter().map(|b| b.lo).collect::<Vec<_>>(), vec![0.0, 50.0]);
    }

    fn ann(id: &str, cat: &str, d: f64) -> ExtendedAnnotation {
        ExtendedAnnotation {
            image_id: id.into(),
            label: KittiLabel {
                category: cat.into(),
                truncated: 0.0,
                occluded: 0,
                alpha: 0.0,
                bbox: BBox2::new(0.0, 0.0, 1.0, 1.0),
                dims: Dims { height: 1.0, width: 1.0, length: 1.0 },
                location: Point3::new(0.0, 0.0, d),
                rotation_y: 0.0,
            },
            distance: d,
            keypoint: Pixel::default(),
        }
    }

    fn estimates(anns: &[ExtendedAnnotation], d: &[Option<f64>]) -> Vec<Estimate> {
        object_keys(anns)
            .into_iter()
            .zip(d)
            .map(|((image_id, index), &distance)| Estimate { image_id, index, distance })
            .collect()
    }

    #[test]
    fn evaluate_pools_and_excludes() {
        let anns = vec![
            ann("0", "Car", 10.0),
            ann("0", "Pedestrian", 8.0),
            ann("1", "DontCare", 30.0),
            ann("1", "Car", 20.0),
        ];
        let est = estimates(&anns, &[Some(11.0), Some(10.0), Some(1.0), Some(18.0)]);
        let rep = evaluate(&est, &anns, &EvalConfig::default()).unwrap();
        assert_eq!(rep.excluded["DontCare"], 1);
        let avg = rep.average.unwrap();
        let brute = compute_metrics(&[11.0, 10.0, 18.0], &[10.0, 8.0, 20.0]).unwrap();
        assert_eq!(avg, brute);
        assert_eq!(rep.categories[0].name, "Car");
        assert_eq!(rep.categories[0].report, compute_metrics(&[11.0, 18.0], &[10.0, 20.0]).unwrap());

        let macro_cfg = EvalConfig { averaging: Averaging::Macro, ..EvalConfig::default() };
        let m = evaluate(&est, &anns, &macro_cfg).unwrap().average.unwrap();
        let car = compute_metrics(&[11.0, 18.0], &[10.0, 20.0]).unwrap();
        let ped = compute_metrics(&[10.0], &[8.0]).unwrap();
        assert_abs_diff_eq!(m.rmse, (car.rmse + ped.rmse) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn single_category_average_equals_category() {
        let anns = vec![ann("0", "Car", 10.0), ann("1", "Car", 25.0)];
        let est = estimates(&anns, &[Some(9.0), Some(27.0)]);
        let rep = evaluate(&est, &anns, &EvalConfig::default()).unwrap();
        assert_eq!(rep.categories[0].report, rep.average.unwrap());
    }

    #[test]
    fn failures_and_alignment() {
        let anns = vec![ann("0", "Car", 10.0), ann("0", "Car", 12.0)];
        let est = estimates(&anns, &[None, Some(12.0)]);
        let rep = evaluate(&est, &anns, &EvalConfig::default()).unwrap();
        assert_eq!(rep.failure_count(), 1);
        assert_eq!(rep.average.unwrap().count, 1);
        let mut bad = est.clone();
        bad[1].index = 5;
        assert!(matches!(evaluate(&bad, &anns, &EvalConfig::default()), Err(MetricsError::Alignment { .. })));
    }

    #[test]
    fn json_lines_golden() {
        let anns = vec![ann("0", "Car", 8.0)];
        let est = estimates(&anns, &[Some(10.0)]);
        let rep = evaluate(&est, &anns, &EvalConfig::default()).unwrap();
        let lines = format_json_lines(&rep);
        let first = lines.lines().next().unwrap();
        assert_eq!(
            first,
            r#"{"record":"category","name":"Car","delta1":0.0,"delta2":1.0,"delta3":1.0,"abs_rel":0.25,"squa_rel":0.5,"rmse":2.0,"rmse_log":0.22314355131420976,"count":1,"non_positive":0}"#
        );
        assert_eq!(lines.lines().nth(2).unwrap(), r#"{"record":"bin","lo":0.0,"hi":10.0,"rmse":2.0,"count":1}"#);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn scale_consistency(
                pairs in prop::collection::vec((0.5..80.0f64, 0.5..80.0f64), 1..40),
                c in 0.1..10.0f64,
            ) {
                let (p, g): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
                let a = compute_metrics(&p, &g).unwrap();
                let ps: Vec<f64> = p.iter().map(|v| v * c).collect();
                let gs: Vec<f64> = g.iter().map(|v| v * c).collect();
                let b = compute_metrics(&ps, &gs).unwrap();
                prop_assert!((a.abs_rel - b.abs_rel).abs() < 1e-9);
                prop_assert!((a.rmse_log - b.rmse_log).abs() < 1e-9);
                prop_assert!((a.rmse * c - b.rmse).abs() < 1e-9 * (1.0 + b.rmse));
                prop_assert!((a.squa_rel * c - b.squa_rel).abs() < 1e-9 * (1.0 + b.squa_rel));
                prop_assert!(a.delta1 <= a.delta2 && a.delta2 <= a.delta3);
                let mut rev_p = p.clone(); rev_p.reverse();
                let mut rev_g = g.clone(); rev_g.reverse();
                let r = compute_metrics(&rev_p, &rev_g).unwrap();
                prop_assert!((r.rmse - a.rmse).abs() < 1e-9);
            }
        }
    }
}
