//! Set-level evaluation. Predictions come from a simulated predictor: the
//! ground truth corrupted by keypoint, rotation and translation noise, random
//! misses and spurious detections, padded with ø and shuffled.

use std::fmt::Write;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use setpose::geometry::{CameraIntrinsics, Point2, Point3, Pose, RotationMatrix};
use setpose::losses::Box2D;
use setpose::matching::{
    hungarian_loss, hungarian_match, HungarianLoss, LossContext, LossWeights, ObjectTarget,
    PredictionTuple, TargetTuple, SET_CARDINALITY,
};
use setpose::metrics::{cardinality_error, MetricRow};
use setpose::synth::{Catalog, SceneRecord};

use super::{metric_row, rotest_pose, summarize_rows, AucSummary};
use crate::config::{EvalSetsConfig, PredictorConfig, SizeSweepConfig, Split};
use crate::dataset::{derive_seed, Dataset};
use crate::error::CliResult;
use crate::output::{csv_float, Provenance, Reporter};
use crate::stats::{spearman, Trend};

pub const COMMAND: &str = "eval-sets";
pub const SCENES_FILE: &str = "eval_sets_scenes.csv";
pub const OBJECTS_FILE: &str = "eval_sets_objects.csv";
pub const SUMMARY_FILE: &str = "eval_sets_summary.json";
pub const SWEEP_FILE: &str = "size_sweep.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub index: u64,
    pub objects: usize,
    pub predicted: usize,
    pub cardinality_error: usize,
    pub matching_cost: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub class: f64,
    pub boxes: f64,
    pub keypoints: f64,
    pub pose: f64,
}

impl From<HungarianLoss> for LossBreakdown {
    fn from(l: HungarianLoss) -> Self {
        LossBreakdown {
            total: l.total,
            class: l.class,
            boxes: l.boxes,
            keypoints: l.keypoints,
            pose: l.pose,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectResult {
    pub scene: u64,
    pub class_id: usize,
    /// The matched prediction has the right class.
    pub detected: bool,
    pub row: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub train_scenes: usize,
    pub val_rotation_error_deg: f64,
    pub val_translation_error_m: f64,
    pub metrics: AucSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSweepReport {
    pub rows: Vec<SweepRow>,
    /// Spearman correlation of training fraction against AUC of ADD-(S).
    /// Reported, not asserted.
    pub trend: Option<Trend>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetsReport {
    pub noise_model: String,
    pub scenes: usize,
    pub mean_loss: LossBreakdown,
    pub mean_cardinality_error: f64,
    pub metrics: AucSummary,
    #[serde(skip)]
    pub scene_results: Vec<SceneResult>,
    #[serde(skip)]
    pub object_results: Vec<ObjectResult>,
    pub size_sweep: Option<SizeSweepReport>,
}

fn class_probs(num_classes: usize, hot: usize, confidence: f64) -> Vec<f64> {
    let rest = if num_classes == 0 {
        0.0
    } else {
        (1.0 - confidence) / num_classes as f64
    };
    let mut p = vec![rest; num_classes + 1];
    p[hot] = confidence;
    p
}

fn normalized_centroid(
    t: &Vector3<f64>,
    cam: &CameraIntrinsics,
    image_size: [f64; 2],
) -> Option<Point2> {
    let px = cam.project_camera_point(&Point3::from(*t)).ok()?;
    Some(Point2::new(px.x / image_size[0], px.y / image_size[1]))
}

fn no_object(num_classes: usize, confidence: f64) -> PredictionTuple {
    PredictionTuple {
        class_probs: class_probs(num_classes, num_classes, confidence),
        box2d: Box2D::new(0.5, 0.5, 0.05, 0.05),
        keypoints: [Point2::new(0.5, 0.5); 32],
        centroid: Point2::new(0.5, 0.5),
        depth: 1.0,
        rotation: RotationMatrix::identity(),
    }
}

fn corrupt(
    obj: &ObjectTarget,
    num_classes: usize,
    p: &PredictorConfig,
    cam: &CameraIntrinsics,
    image_size: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> PredictionTuple {
    let [w, h] = image_size;
    let keypoints = obj.keypoints.map(|k| {
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        Point2::new(
            k.x + p.keypoint_sigma * dx / w,
            k.y + p.keypoint_sigma * dy / h,
        )
    });
    let axis = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let angle = p.rotation_sigma_deg.to_radians() * rng.sample::<f64, _>(StandardNormal);
    let rotation = if axis.norm() > 0.0 && angle != 0.0 {
        RotationMatrix::from_axis_angle(&axis.normalize(), angle).compose(&obj.rotation)
    } else {
        obj.rotation
    };
    let shift =
        Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)) * p.translation_sigma_m;
    let mut t = obj.translation + shift;
    let centroid = match normalized_centroid(&t, cam, image_size) {
        Some(c) => c,
        None => {
            t = obj.translation;
            normalized_centroid(&t, cam, image_size).unwrap_or(Point2::new(0.5, 0.5))
        }
    };
    PredictionTuple {
        class_probs: class_probs(num_classes, obj.class_id, p.confidence),
        box2d: Box2D::enclosing(&keypoints),
        keypoints,
        centroid,
        depth: t.z,
        rotation,
    }
}

fn spurious(num_classes: usize, p: &PredictorConfig, rng: &mut ChaCha8Rng) -> PredictionTuple {
    let center = Point2::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
    let spread = Normal::new(0.0, 0.03).expect("positive spread");
    let keypoints: [Point2; 32] = std::array::from_fn(|_| {
        Point2::new(center.x + spread.sample(rng), center.y + spread.sample(rng))
    });
    PredictionTuple {
        class_probs: class_probs(num_classes, rng.random_range(0..num_classes), p.confidence),
        box2d: Box2D::enclosing(&keypoints),
        keypoints,
        centroid: center,
        depth: rng.random_range(0.5..1.5),
        rotation: RotationMatrix::random(rng),
    }
}

/// A full prediction set for one scene: one corrupted tuple per detected
/// object, spurious tuples, ø padding, then a random slot order.
pub fn simulate_predictions(
    targets: &[TargetTuple],
    num_classes: usize,
    p: &PredictorConfig,
    cam: &CameraIntrinsics,
    image_size: [f64; 2],
    seed: u64,
) -> Vec<PredictionTuple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::with_capacity(targets.len());
    let mut extra = 0;
    for obj in targets.iter().filter_map(TargetTuple::object) {
        if rng.random::<f64>() >= p.miss_rate {
            preds.push(corrupt(obj, num_classes, p, cam, image_size, &mut rng));
        }
        if rng.random::<f64>() < p.false_positive_rate {
            extra += 1;
        }
    }
    for _ in 0..extra {
        if preds.len() < targets.len() {
            let fp = spurious(num_classes, p, &mut rng);
            preds.push(fp);
        }
    }
    preds.resize_with(targets.len(), || no_object(num_classes, p.confidence));
    preds.shuffle(&mut rng);
    preds
}

fn model_points(catalog: &Catalog) -> Vec<Vec<Point3>> {
    catalog
        .entries()
        .iter()
        .map(|e| e.model_points.clone())
        .collect()
}

/// Matches every scene's prediction set against its ground truth and scores
/// the matched pairs.
pub fn evaluate_sets(
    cfg: &EvalSetsConfig,
    data: &Dataset,
    scenes: &[SceneRecord],
) -> CliResult<(Vec<SceneResult>, Vec<ObjectResult>)> {
    let points = model_points(&data.catalog);
    let num_classes = data.catalog.len();
    let mut scene_results = Vec::with_capacity(scenes.len());
    let mut object_results = Vec::new();
    for record in scenes {
        let scene_cfg = setpose::synth::SceneConfig {
            camera: record.camera,
            image_size: record.image_size,
            ..data.manifest.scene_config.clone()
        };
        let targets = record.to_scene()?.targets(&data.catalog, &scene_cfg)?;
        debug_assert_eq!(targets.len(), SET_CARDINALITY);
        let preds = simulate_predictions(
            &targets,
            num_classes,
            &cfg.predictor,
            &record.camera,
            record.image_size,
            derive_seed(cfg.seed, &[record.index]),
        );
        let matching = hungarian_match(&targets, &preds)?;
        let ctx = LossContext {
            camera: record.camera,
            image_size: record.image_size,
            model_points: &points,
            weights: LossWeights::default(),
        };
        let loss = hungarian_loss(&targets, &preds, &matching, &ctx)?;
        for (target, &j) in targets.iter().zip(&matching.assignment) {
            let Some(obj) = target.object() else { continue };
            let pred = &preds[j];
            let detected = pred.predicted_class() == Some(obj.class_id);
            let pose = if detected {
                Some(Pose::new(
                    pred.rotation,
                    pred.translation(&record.camera, record.image_size)?,
                ))
            } else {
                None
            };
            let entry = data
                .catalog
                .get(obj.class_id)
                .expect("class ids checked on load");
            object_results.push(ObjectResult {
                scene: record.index,
                class_id: obj.class_id,
                detected,
                row: metric_row(entry, obj.class_id, &obj.pose(), pose.as_ref())?,
            });
        }
        scene_results.push(SceneResult {
            index: record.index,
            objects: targets.iter().filter(|t| t.is_object()).count(),
            predicted: preds
                .iter()
                .filter(|p| p.predicted_class().is_some())
                .count(),
            cardinality_error: cardinality_error(&targets, &preds),
            matching_cost: matching.cost,
            loss: loss.into(),
        });
    }
    Ok((scene_results, object_results))
}

fn symmetric_rows(
    catalog: &Catalog,
    rows: impl IntoIterator<Item = MetricRow>,
) -> Vec<(MetricRow, bool)> {
    rows.into_iter()
        .map(|r| {
            let sym = catalog.get(r.class_id).is_some_and(|e| e.symmetric);
            (r, sym)
        })
        .collect()
}

/// Retrains RotEst on growing fractions of the training split and scores it
/// on the stored keypoints of `eval`.
pub fn size_sweep(
    sweep: &SizeSweepConfig,
    data: &Dataset,
    eval: &[SceneRecord],
    rep: &Reporter,
) -> CliResult<SizeSweepReport> {
    let val = data.load_split(Split::Val, None)?;
    let total = data.manifest.train_scenes;
    let mut rows = Vec::with_capacity(sweep.fractions.len());
    for &fraction in &sweep.fractions {
        let n = ((fraction * total as f64).ceil() as usize).clamp(1, total.max(1));
        let train = data.load_split(Split::Train, Some(n))?;
        rep.info(format!("size sweep: fraction {fraction} ({n} scenes)"));
        let (model, curve) = super::train::fit(&data.catalog, &train, &val, &sweep.training)?;
        let mut metric_rows = Vec::new();
        for record in eval {
            for obj in &record.objects {
                let entry = data
                    .catalog
                    .get(obj.class_id)
                    .expect("class ids checked on load");
                let pose = rotest_pose(&model, &obj.perturbed_keypoints()?, obj.class_id);
                metric_rows.push(metric_row(
                    entry,
                    obj.class_id,
                    &obj.pose()?,
                    pose.as_ref(),
                )?);
            }
        }
        let last = curve.last();
        rows.push(SweepRow {
            fraction,
            train_scenes: n,
            val_rotation_error_deg: last.map_or(f64::NAN, |e| e.val_rotation_error_deg),
            val_translation_error_m: last.map_or(f64::NAN, |e| e.val_translation_error_m),
            metrics: summarize_rows(&symmetric_rows(&data.catalog, metric_rows))?,
        });
    }
    let (x, y): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.metrics.auc_add_s.map(|a| (r.fraction, a)))
        .unzip();
    Ok(SizeSweepReport {
        trend: spearman(&x, &y),
        rows,
    })
}

pub fn scenes_csv(results: &[SceneResult]) -> String {
    let mut out = String::from(
        "scene,objects,predicted,cardinality_error,matching_cost,loss_total,loss_class,loss_boxes,loss_keypoints,loss_pose\n",
    );
    for r in results {
        let l = &r.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.index,
            r.objects,
            r.predicted,
            r.cardinality_error,
            r.matching_cost,
            l.total,
            l.class,
            l.boxes,
            l.keypoints,
            l.pose
        );
    }
    out
}

pub fn objects_csv(results: &[ObjectResult]) -> String {
    let mut out = String::from("scene,class_id,detected,add,adds,add_s,diameter\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.scene,
            r.class_id,
            u8::from(r.detected),
            csv_float(Some(r.row.add)),
            csv_float(Some(r.row.adds)),
            csv_float(Some(r.row.combined)),
            r.row.diameter
        );
    }
    out
}

pub fn sweep_csv(sweep: &SizeSweepReport) -> String {
    let mut out = String::from(
        "fraction,train_scenes,val_rotation_error_deg,val_translation_error_m,auc_add,auc_adds,auc_add_s,auc_add_s_rel\n",
    );
    for r in &sweep.rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.fraction,
            r.train_scenes,
            r.val_rotation_error_deg,
            r.val_translation_error_m,
            csv_float(m.auc_add),
            csv_float(m.auc_adds),
            csv_float(m.auc_add_s),
            csv_float(m.auc_add_s_rel)
        );
    }
    out
}

pub fn evaluate(cfg: &EvalSetsConfig, data: &Dataset, rep: &Reporter) -> CliResult<EvalSetsReport> {
    let scenes = data.load_split(cfg.split, cfg.max_scenes)?;
    rep.info(format!(
        "evaluating prediction sets on {} scenes",
        scenes.len()
    ));
    let (scene_results, object_results) = evaluate_sets(cfg, data, &scenes)?;
    let n = scene_results.len().max(1) as f64;
    let mut mean_loss = LossBreakdown::default();
    for r in &scene_results {
        mean_loss.total += r.loss.total / n;
        mean_loss.class += r.loss.class / n;
        mean_loss.boxes += r.loss.boxes / n;
        mean_loss.keypoints += r.loss.keypoints / n;
        mean_loss.pose += r.loss.pose / n;
    }
    let metrics = summarize_rows(&symmetric_rows(
        &data.catalog,
        object_results.iter().map(|o| o.row),
    ))?;
    let size_sweep = match &cfg.size_sweep {
        Some(s) => Some(size_sweep(s, data, &scenes, rep)?),
        None => None,
    };
    Ok(EvalSetsReport {
        noise_model: "simulated".into(),
        scenes: scene_results.len(),
        mean_loss,
        mean_cardinality_error: scene_results
            .iter()
            .map(|r| r.cardinality_error as f64)
            .sum::<f64>()
            / n,
        metrics,
        scene_results,
        object_results,
        size_sweep,
    })
}

/// Writes the per-scene and per-object CSV files, the summary JSON and, when
/// a size sweep is configured, `size_sweep.csv`.
pub fn run(cfg: &EvalSetsConfig, out: &Path, rep: &Reporter) -> CliResult<EvalSetsReport> {
    let prov = Provenance::new(COMMAND, cfg, cfg.seed);
    let data = Dataset::open(&cfg.dataset)?;
    let report = evaluate(cfg, &data, rep)?;
    prov.write_csv(&out.join(SCENES_FILE), &scenes_csv(&report.scene_results))?;
    prov.write_csv(
        &out.join(OBJECTS_FILE),
        &objects_csv(&report.object_results),
    )?;
    if let Some(sweep) = &report.size_sweep {
        prov.write_csv(&out.join(SWEEP_FILE), &sweep_csv(sweep))?;
    }
    prov.write_json(&out.join(SUMMARY_FILE), &report)?;
    Ok(report)
}
