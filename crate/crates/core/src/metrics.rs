//! Pose accuracy metrics: ADD, ADD-S, the combined ADD-(S), threshold-curve
//! AUC and set cardinality error.

use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{Point3, Pose, RotationMatrix};
use crate::matching::{PredictionTuple, TargetTuple};
use crate::nn::{Metric, PointGrid};

/// Upper end of the absolute AUC threshold range, meters.
pub const AUC_MAX_THRESHOLD: f64 = 0.1;
/// Fraction of the object diameter used as the relative threshold.
pub const RELATIVE_THRESHOLD: f64 = 0.1;

/// Ground truth and prediction for one object instance.
#[derive(Debug, Clone, Copy)]
pub struct EvalRecord<'a> {
    pub class_id: usize,
    pub gt: Pose,
    pub pred: Pose,
    pub model_points: &'a [Point3],
    pub diameter: f64,
    pub symmetric: bool,
}

impl<'a> EvalRecord<'a> {
    pub fn new(
        class_id: usize,
        gt: Pose,
        pred: Pose,
        model_points: &'a [Point3],
        diameter: f64,
        symmetric: bool,
    ) -> Result<Self> {
        if model_points.is_empty() {
            return Err(Error::EmptyModel);
        }
        if !(diameter > 0.0 && diameter.is_finite()) {
            return Err(Error::invalid("diameter", "must be positive"));
        }
        Ok(EvalRecord {
            class_id,
            gt,
            pred,
            model_points,
            diameter,
            symmetric,
        })
    }
}

fn transformed(pose: &Pose, points: &[Point3]) -> Vec<Vector3<f64>> {
    points
        .iter()
        .map(|p| pose.transform_point(p).coords)
        .collect()
}

/// Mean distance between corresponding model points under both poses.
pub fn add_metric(rec: &EvalRecord) -> f64 {
    let gt = transformed(&rec.gt, rec.model_points);
    let pred = transformed(&rec.pred, rec.model_points);
    gt.iter()
        .zip(&pred)
        .map(|(a, b)| (a - b).norm())
        .sum::<f64>()
        / gt.len() as f64
}

/// Mean distance from each ground-truth point to the closest predicted point.
pub fn adds_metric(rec: &EvalRecord) -> f64 {
    let gt = transformed(&rec.gt, rec.model_points);
    let pred = transformed(&rec.pred, rec.model_points);
    let grid = PointGrid::new(&pred);
    gt.iter()
        .map(|a| grid.nearest(a, Metric::L2).1)
        .sum::<f64>()
        / gt.len() as f64
}

/// ADD-S for symmetric records, ADD otherwise.
pub fn combined_metric(rec: &EvalRecord) -> f64 {
    if rec.symmetric {
        adds_metric(rec)
    } else {
        add_metric(rec)
    }
}

/// Area under the accuracy-vs-threshold curve over `[0, max_threshold]`,
/// normalized to `[0, 1]`.
///
/// Accuracy at `τ` is the fraction of distances below `τ`; integrating the
/// step function exactly gives the mean of `(max − d)₊ / max`. Distances at or
/// beyond `max_threshold` contribute nothing.
pub fn auc(distances: &[f64], max_threshold: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::EmptyList);
    }
    if !(max_threshold > 0.0 && max_threshold.is_finite()) {
        return Err(Error::invalid("max_threshold", "must be positive"));
    }
    if distances.iter().any(|d| d.is_nan() || *d < 0.0) {
        return Err(Error::invalid("distances", "must be non-negative"));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let area: f64 = sorted
        .iter()
        .take_while(|d| **d < max_threshold)
        .map(|d| (max_threshold - d) / max_threshold)
        .fold(0.0, |a, b| a + b);
    Ok(area / sorted.len() as f64)
}

/// AUC where each distance is measured against `0.1 · diameter` of its object.
pub fn auc_relative(distances: &[f64], diameters: &[f64]) -> Result<f64> {
    if distances.len() != diameters.len() {
        return Err(Error::DimensionMismatch {
            expected: distances.len(),
            actual: diameters.len(),
        });
    }
    if diameters.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid("diameter", "must be positive"));
    }
    // Compare against each threshold before dividing so a distance equal to
    // its threshold lands exactly on the boundary.
    let normalized: Vec<f64> = distances
        .iter()
        .zip(diameters)
        .map(|(d, diam)| {
            let threshold = RELATIVE_THRESHOLD * diam;
            if *d >= threshold {
                1.0
            } else {
                d / threshold
            }
        })
        .collect();
    auc(&normalized, 1.0)
}

/// `|#objects − #non-ø predictions|`, a prediction being non-ø when its argmax
/// class is not the no-object class.
pub fn cardinality_error(targets: &[TargetTuple], preds: &[PredictionTuple]) -> usize {
    let gt = targets.iter().filter(|t| t.is_object()).count();
    let pred = preds
        .iter()
        .filter(|p| p.predicted_class().is_some())
        .count();
    gt.abs_diff(pred)
}

/// Geodesic rotation error in radians. For objects symmetric about their
/// model z-axis only the tilt of that axis is observable, so the error is the
/// angle between the two z-axes.
pub fn rotation_error(gt: &RotationMatrix, pred: &RotationMatrix, symmetric: bool) -> f64 {
    if symmetric {
        let a = gt.matrix().column(2).into_owned();
        let b = pred.matrix().column(2).into_owned();
        a.dot(&b).clamp(-1.0, 1.0).acos()
    } else {
        crate::geometry::geodesic_distance(gt, pred)
    }
}

/// Per-record metric row of an evaluation report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub class_id: usize,
    pub add: f64,
    pub adds: f64,
    pub combined: f64,
    pub diameter: f64,
}

impl MetricRow {
    pub fn from_record(rec: &EvalRecord) -> Self {
        let add = add_metric(rec);
        let adds = adds_metric(rec);
        MetricRow {
            class_id: rec.class_id,
            add,
            adds,
            combined: if rec.symmetric { adds } else { add },
            diameter: rec.diameter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub auc_add: f64,
    pub auc_adds: f64,
    pub auc_combined: f64,
    pub auc_combined_relative: f64,
    pub cardinality_error: Option<usize>,
}

pub fn summarize(rows: &[MetricRow], cardinality_error: Option<usize>) -> Result<MetricSummary> {
    let col = |f: fn(&MetricRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    Ok(MetricSummary {
        auc_add: auc(&col(|r| r.add), AUC_MAX_THRESHOLD)?,
        auc_adds: auc(&col(|r| r.adds), AUC_MAX_THRESHOLD)?,
        auc_combined: auc(&col(|r| r.combined), AUC_MAX_THRESHOLD)?,
        auc_combined_relative: auc_relative(&col(|r| r.combined), &col(|r| r.diameter))?,
        cardinality_error,
    })
}

/// CSV with one row per record followed by `summary` rows.
pub fn report_csv(rows: &[MetricRow], summary: &MetricSummary) -> String {
    let mut out = String::from("kind,class,add,adds,combined,diameter\n");
    for r in rows {
        let _ = writeln!(
            out,
            "record,{},{},{},{},{}",
            r.class_id, r.add, r.adds, r.combined, r.diameter
        );
    }
    let _ = writeln!(out, "summary,auc_add,{},,,", summary.auc_add);
    let _ = writeln!(out, "summary,auc_adds,{},,,", summary.auc_adds);
    let _ = writeln!(out, "summary,auc_combined,{},,,", summary.auc_combined);
    let _ = writeln!(
        out,
        "summary,auc_combined_0.1d,{},,,",
        summary.auc_combined_relative
    );
    if let Some(c) = summary.cardinality_error {
        let _ = writeln!(out, "summary,cardinality_error,{c},,,");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.02..0.02),
                )
            })
            .collect()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose::new(
            RotationMatrix::random(rng),
            Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(0.5..1.5),
            ),
        )
    }

    #[test]
    fn add_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 50);
        let gt = random_pose(&mut rng);
        let rec = EvalRecord::new(0, gt, gt, &pts, 0.2, false).unwrap();
        assert_eq!(add_metric(&rec), 0.0);
        assert_eq!(adds_metric(&rec), 0.0);

        let delta = Vector3::new(0.003, -0.004, 0.0);
        let shifted = Pose::new(gt.rotation, gt.translation + delta);
        let rec = EvalRecord::new(0, gt, shifted, &pts, 0.2, false).unwrap();
        assert!((add_metric(&rec) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn add_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 80);
        let (gt, pred) = (random_pose(&mut rng), random_pose(&mut rng));
        let rec = EvalRecord::new(0, gt, pred, &pts, 0.2, false).unwrap();
        let mut add = 0.0;
        let mut adds = 0.0;
        for p in &pts {
            let a = gt.rotation.matrix() * p.coords + gt.translation;
            add += (a - (pred.rotation.matrix() * p.coords + pred.translation)).norm();
            let mut best = f64::INFINITY;
            for q in &pts {
                best =
                    best.min((a - (pred.rotation.matrix() * q.coords + pred.translation)).norm());
            }
            adds += best;
        }
        assert!((add_metric(&rec) - add / 80.0).abs() < 1e-12);
        assert!((adds_metric(&rec) - adds / 80.0).abs() < 1e-12);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.0, 0.0], 0.1).unwrap(), 1.0);
        assert_eq!(auc(&[0.05], 0.1).unwrap(), 0.5);
        assert!((auc(&[0.02, 0.06], 0.1).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(auc(&[0.1, 0.5], 0.1).unwrap(), 0.0);
        assert!(auc(&[0.1, 0.5], 0.1).unwrap().is_sign_positive());
        assert!(matches!(auc(&[], 0.1), Err(Error::EmptyList)));
        assert!(auc(&[0.1], 0.0).is_err());
    }

    #[test]
    fn relative_auc_examples() {
        assert_eq!(auc_relative(&[0.0, 0.0], &[0.1, 0.3]).unwrap(), 1.0);
        assert_eq!(
            auc_relative(&[RELATIVE_THRESHOLD * 0.2], &[0.2]).unwrap(),
            0.0
        );
        // Two records: 0.005 of a 0.1 diameter (half the threshold) and 0.03 of
        // a 0.2 diameter (beyond the threshold).
        let v = auc_relative(&[0.005, 0.03], &[0.1, 0.2]).unwrap();
        assert!((v - (0.5 + 0.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_rotation_error_ignores_spin() {
        let gt = RotationMatrix::from_axis_angle(&Vector3::x(), 0.3);
        let spun = gt.compose(&RotationMatrix::from_axis_angle(&Vector3::z(), 1.2));
        assert!(rotation_error(&gt, &spun, true) < 1e-12);
        assert!((rotation_error(&gt, &spun, false) - 1.2).abs() < 1e-9);
    }

    #[test]
    fn report_lists_records_and_summary() {
        let rows = vec![MetricRow {
            class_id: 3,
            add: 0.01,
            adds: 0.005,
            combined: 0.01,
            diameter: 0.2,
        }];
        let s = summarize(&rows, Some(1)).unwrap();
        let csv = report_csv(&rows, &s);
        assert_eq!(csv.lines().count(), 1 + 1 + 5);
        assert!(csv.contains("summary,cardinality_error,1"));
    }
}
