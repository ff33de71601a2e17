//! Set prediction: no-object padding, optimal bipartite matching between the
//! ground-truth and predicted sets, and the Hungarian loss over the matched
//! pairs.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{
    recover_translation, CameraIntrinsics, Point2, Point3, Pose, RotationMatrix,
};
use crate::keypoints::NUM_IBB_KEYPOINTS;
use crate::losses::{box_loss, class_nll, keypoint_loss, pose_loss, Box2D};

/// Cardinality of the predicted set.
pub const SET_CARDINALITY: usize = 20;

/// A real object in the ground-truth set. Image quantities are normalized
/// by the image size.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTarget {
    pub class_id: usize,
    pub box2d: Box2D,
    pub keypoints: [Point2; NUM_IBB_KEYPOINTS],
    pub rotation: RotationMatrix,
    /// Meters.
    pub translation: Vector3<f64>,
    pub symmetric: bool,
}

impl ObjectTarget {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }
}

/// One ground-truth set element: an object or the no-object class ø.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum TargetTuple {
    Object(ObjectTarget),
    NoObject,
}

impl TargetTuple {
    pub fn object(&self) -> Option<&ObjectTarget> {
        match self {
            TargetTuple::Object(o) => Some(o),
            TargetTuple::NoObject => None,
        }
    }

    pub fn is_object(&self) -> bool {
        matches!(self, TargetTuple::Object(_))
    }
}

/// One predicted set element.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTuple {
    /// `C + 1` probabilities; the last entry is ø.
    pub class_probs: Vec<f64>,
    pub box2d: Box2D,
    pub keypoints: [Point2; NUM_IBB_KEYPOINTS],
    /// Normalized image position of the projected object origin.
    pub centroid: Point2,
    /// Meters.
    pub depth: f64,
    pub rotation: RotationMatrix,
}

impl PredictionTuple {
    pub fn no_object_index(&self) -> usize {
        self.class_probs.len() - 1
    }

    /// Argmax class, `None` when it is ø.
    pub fn predicted_class(&self) -> Option<usize> {
        let mut best = 0;
        for (i, p) in self.class_probs.iter().enumerate() {
            if *p > self.class_probs[best] {
                best = i;
            }
        }
        (best != self.no_object_index()).then_some(best)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_probs.len() < 2 {
            return Err(Error::invalid(
                "class_probs",
                "need at least one class plus ø",
            ));
        }
        let sum: f64 = self.class_probs.iter().sum();
        if self.class_probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(
                "class_probs",
                "not on the probability simplex",
            ));
        }
        Ok(())
    }

    /// Translation implied by the normalized centroid and depth.
    pub fn translation(
        &self,
        cam: &CameraIntrinsics,
        image_size: [f64; 2],
    ) -> Result<Vector3<f64>> {
        recover_translation(
            self.centroid.x * image_size[0],
            self.centroid.y * image_size[1],
            self.depth,
            cam,
        )
    }
}

/// Pads a list of objects with ø up to `n` entries.
pub fn pad_targets(objects: Vec<ObjectTarget>, n: usize) -> Result<Vec<TargetTuple>> {
    if objects.len() > n {
        return Err(Error::invalid(
            "objects",
            format!("{} objects exceed the set cardinality {n}", objects.len()),
        ));
    }
    let mut set: Vec<TargetTuple> = objects.into_iter().map(TargetTuple::Object).collect();
    set.resize(n, TargetTuple::NoObject);
    Ok(set)
}

/// Optimal assignment: `assignment[i]` is the prediction matched to target `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub assignment: Vec<usize>,
    pub cost: f64,
}

/// `−p̂(c) + L_box` for a real target; 0 for ø so padding never steers the assignment.
pub fn matching_cost(target: &TargetTuple, pred: &PredictionTuple) -> Result<f64> {
    match target {
        TargetTuple::NoObject => Ok(0.0),
        TargetTuple::Object(obj) => {
            let p =
                pred.class_probs
                    .get(obj.class_id)
                    .copied()
                    .ok_or(Error::DimensionMismatch {
                        expected: obj.class_id + 1,
                        actual: pred.class_probs.len(),
                    })?;
            Ok(-p + box_loss(&obj.box2d, &pred.box2d)?.value)
        }
    }
}

/// Row-major square cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("cost matrix", "entries must be finite"));
        }
        Ok(CostMatrix { n, data })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let data = (0..n * n).map(|k| f(k / n, k % n)).collect();
        Self::new(n, data)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n + col]
    }

    /// Total cost of `assignment`, summed in row order.
    pub fn assignment_cost(&self, assignment: &[usize]) -> f64 {
        assignment
            .iter()
            .enumerate()
            .map(|(r, &c)| self.get(r, c))
            .sum()
    }
}

/// Minimum-cost perfect matching on a square matrix: shortest augmenting paths
/// with row/column potentials, O(n³).
pub fn solve_assignment(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.size();
    if n == 0 {
        return Vec::new();
    }
    // 1-based columns; column 0 is the virtual source.
    let mut u = vec![0.0_f64; n + 1];
    let mut v = vec![0.0_f64; n + 1];
    let mut row_of_col = vec![0_usize; n + 1];
    let mut way = vec![0_usize; n + 1];
    for row in 1..=n {
        row_of_col[0] = row;
        let mut col0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = row_of_col[col0];
            let mut delta = f64::INFINITY;
            let mut next = 0;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = cost.get(r - 1, col - 1) - u[r] - v[col];
                if reduced < min_to[col] {
                    min_to[col] = reduced;
                    way[col] = col0;
                }
                if min_to[col] < delta {
                    delta = min_to[col];
                    next = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[row_of_col[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_to[col] -= delta;
                }
            }
            col0 = next;
            if row_of_col[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            row_of_col[col0] = row_of_col[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for col in 1..=n {
        assignment[row_of_col[col] - 1] = col - 1;
    }
    assignment
}

pub fn cost_matrix(targets: &[TargetTuple], preds: &[PredictionTuple]) -> Result<CostMatrix> {
    if targets.len() != preds.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            actual: preds.len(),
        });
    }
    let n = targets.len();
    let mut data = Vec::with_capacity(n * n);
    for t in targets {
        for p in preds {
            data.push(matching_cost(t, p)?);
        }
    }
    CostMatrix::new(n, data)
}

pub fn hungarian_match(targets: &[TargetTuple], preds: &[PredictionTuple]) -> Result<MatchResult> {
    let costs = cost_matrix(targets, preds)?;
    let assignment = solve_assignment(&costs);
    let cost = costs.assignment_cost(&assignment);
    Ok(MatchResult { assignment, cost })
}

/// Weights of the Hungarian loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub keypoints: f64,
    pub pose: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            keypoints: 1.0,
            pose: 0.05,
        }
    }
}

/// What the pose term needs besides the tuples themselves.
pub struct LossContext<'a> {
    pub camera: CameraIntrinsics,
    /// `[width, height]` in pixels, used to denormalize predicted centroids.
    pub image_size: [f64; 2],
    /// Model points indexed by class id.
    pub model_points: &'a [Vec<Point3>],
    pub weights: LossWeights,
}

/// Hungarian loss with its per-term breakdown. Each breakdown entry already
/// carries its weight, so `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HungarianLoss {
    pub total: f64,
    pub class: f64,
    pub boxes: f64,
    pub keypoints: f64,
    pub pose: f64,
}

pub fn hungarian_loss(
    targets: &[TargetTuple],
    preds: &[PredictionTuple],
    matching: &MatchResult,
    ctx: &LossContext<'_>,
) -> Result<HungarianLoss> {
    if targets.len() != preds.len() || matching.assignment.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            actual: preds.len().min(matching.assignment.len()),
        });
    }
    let mut out = HungarianLoss::default();
    for (target, &j) in targets.iter().zip(&matching.assignment) {
        let pred = &preds[j];
        match target {
            TargetTuple::NoObject => {
                out.class += class_nll(&pred.class_probs, pred.no_object_index(), true)?.value;
            }
            TargetTuple::Object(obj) => {
                out.class += class_nll(&pred.class_probs, obj.class_id, false)?.value;
                out.boxes += box_loss(&obj.box2d, &pred.box2d)?.value;
                out.keypoints +=
                    ctx.weights.keypoints * keypoint_loss(&obj.keypoints, &pred.keypoints)?.value;
                let points = ctx
                    .model_points
                    .get(obj.class_id)
                    .ok_or(Error::EmptyModel)?;
                let pred_pose = Pose::new(
                    pred.rotation,
                    pred.translation(&ctx.camera, ctx.image_size)?,
                );
                out.pose += ctx.weights.pose
                    * pose_loss(&obj.pose(), &pred_pose, points, obj.symmetric)?.value;
            }
        }
    }
    out.total = out.class + out.boxes + out.keypoints + out.pose;
    Ok(out)
}
