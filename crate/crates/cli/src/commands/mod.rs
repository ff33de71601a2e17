//! One module per subcommand. Each `run` writes its artifacts under `out`
//! and returns the computed report so callers can inspect it directly.

pub mod ablate;
pub mod compare;
pub mod eval_sets;
pub mod gen_data;
pub mod metrics;
pub mod train;

use std::path::Path;

use setpose::geometry::{CameraIntrinsics, Point2, Point3, Pose};
use setpose::keypoints::NUM_IBB_KEYPOINTS;
use setpose::metrics::{auc, auc_relative, EvalRecord, MetricRow, AUC_MAX_THRESHOLD};
use setpose::pnp::{epnp_solve, ransac_pnp, Correspondences, RansacConfig};
use setpose::rotest::{Checkpoint, InputLayout, RotEst};
use setpose::synth::CatalogEntry;

use crate::config::Solver;
use crate::error::{CliError, CliResult};
use crate::output::read_json;

pub fn load_checkpoint(path: &Path) -> CliResult<RotEst> {
    if !path.is_file() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    let ckpt: Checkpoint = read_json(path)?;
    Ok(ckpt.to_model()?)
}

/// One-hot class input for models trained with class probabilities.
pub fn class_input(model: &RotEst, class_id: usize) -> Option<Vec<f64>> {
    (model.encoder.layout == InputLayout::KeypointsAndClassProbs).then(|| {
        let mut v = vec![0.0; model.encoder.num_classes];
        if let Some(x) = v.get_mut(class_id) {
            *x = 1.0;
        }
        v
    })
}

/// Rotation and translation heads on one keypoint set.
pub fn rotest_pose(
    model: &RotEst,
    keypoints: &[Point2; NUM_IBB_KEYPOINTS],
    class_id: usize,
) -> Option<Pose> {
    let extras = class_input(model, class_id);
    let rotation = model.predict_rotation(keypoints, extras.as_deref()).ok()?;
    let t = model
        .predict_translation(keypoints, extras.as_deref())
        .ok()?;
    Some(Pose::new(rotation, t.translation))
}

/// `None` when the solver fails.
pub fn solve_pose(
    solver: Solver,
    ransac: &RansacConfig,
    object_points: &[Point3],
    image_points: &[Point2],
    cam: &CameraIntrinsics,
) -> Option<Pose> {
    let corr = Correspondences::new(object_points.to_vec(), image_points.to_vec()).ok()?;
    match solver {
        Solver::Epnp => epnp_solve(&corr, cam).ok(),
        Solver::RansacEpnp => ransac_pnp(&corr, cam, ransac)
            .map(|o| o.pose)
            .or_else(|_| epnp_solve(&corr, cam))
            .ok(),
    }
}

/// Metric row of a pose estimate; a missing estimate scores infinitely far.
pub fn metric_row(
    entry: &CatalogEntry,
    class_id: usize,
    gt: &Pose,
    pred: Option<&Pose>,
) -> CliResult<MetricRow> {
    let diameter = entry.diameter();
    Ok(match pred {
        Some(p) => MetricRow::from_record(&EvalRecord::new(
            class_id,
            *gt,
            *p,
            &entry.model_points,
            diameter,
            entry.symmetric,
        )?),
        None => MetricRow {
            class_id,
            add: f64::INFINITY,
            adds: f64::INFINITY,
            combined: f64::INFINITY,
            diameter,
        },
    })
}

/// AUC summary of a pool of metric rows; ADD is pooled over non-symmetric
/// objects only. Entries are `None` for empty pools.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct AucSummary {
    pub n: usize,
    pub n_add: usize,
    pub auc_add: Option<f64>,
    pub auc_adds: Option<f64>,
    pub auc_add_s: Option<f64>,
    pub auc_add_s_rel: Option<f64>,
    /// Fraction of ADD-(S) distances below 0.1 of the object diameter.
    pub accuracy_add_s: Option<f64>,
}

pub fn summarize_rows(rows: &[(MetricRow, bool)]) -> CliResult<AucSummary> {
    let add: Vec<f64> = rows
        .iter()
        .filter(|(_, sym)| !sym)
        .map(|(r, _)| r.add)
        .collect();
    let adds: Vec<f64> = rows.iter().map(|(r, _)| r.adds).collect();
    let combined: Vec<f64> = rows.iter().map(|(r, _)| r.combined).collect();
    let diam: Vec<f64> = rows.iter().map(|(r, _)| r.diameter).collect();
    let pooled = |v: &[f64]| -> CliResult<Option<f64>> {
        if v.is_empty() {
            Ok(None)
        } else {
            Ok(Some(auc(v, AUC_MAX_THRESHOLD)?))
        }
    };
    Ok(AucSummary {
        n: rows.len(),
        n_add: add.len(),
        auc_add: pooled(&add)?,
        auc_adds: pooled(&adds)?,
        auc_add_s: pooled(&combined)?,
        auc_add_s_rel: if rows.is_empty() {
            None
        } else {
            Some(auc_relative(&combined, &diam)?)
        },
        accuracy_add_s: (!rows.is_empty()).then(|| {
            let hits = rows
                .iter()
                .filter(|(r, _)| r.combined < 0.1 * r.diameter)
                .count();
            hits as f64 / rows.len() as f64
        }),
    })
}

pub(crate) fn to_keypoint_array(points: &[Point2]) -> Option<[Point2; NUM_IBB_KEYPOINTS]> {
    points.try_into().ok()
}
