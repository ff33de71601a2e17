//! Loss terms of the Hungarian loss, each returning its value together with
//! the analytic gradient with respect to the prediction argument.
//!
//! Targets are constants: gradients are never taken with respect to them.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point2, Point3, Pose, RotationMatrix};
use crate::keypoints::{EDGE_QUADS, IBB_CROSS_RATIO, NUM_IBB_KEYPOINTS};
use crate::nn::{nearest_brute_force, Metric, PointGrid};

/// Smallest probability fed to the logarithm; `-ln(1e-30) ≈ 69.08`.
pub const MIN_PROBABILITY: f64 = 1e-30;
pub const NO_OBJECT_WEIGHT: f64 = 0.1;
pub const GIOU_WEIGHT: f64 = 2.0;
pub const BOX_L1_WEIGHT: f64 = 10.0;
pub const KEYPOINT_L1_WEIGHT: f64 = 1.0;
pub const CROSS_RATIO_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Partial derivatives, laid out like the prediction argument.
    pub grad: Vec<f64>,
    /// Set when an input had to be clamped (zero probability).
    pub capped: bool,
}

impl LossValue {
    fn new(value: f64, grad: Vec<f64>) -> Self {
        LossValue {
            value,
            grad,
            capped: false,
        }
    }
}

/// Axis-aligned 2D box `(cx, cy, w, h)`, normalized by the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box2D {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Box2D { cx, cy, w, h }
    }

    /// Box spanning `[x0, x1] × [y0, y1]`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Box2D::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// Tight box around a set of points.
    pub fn enclosing(points: &[Point2]) -> Self {
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Box2D::from_corners(x0, y0, x1, y1)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    fn edges(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    fn validate(&self) -> Result<()> {
        let ok = self.w > 0.0 && self.h > 0.0 && self.to_array().iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::DegenerateBox)
        }
    }
}

/// Weighted negative log-likelihood of the target class.
///
/// `probs` lives on the simplex; the last entry is the no-object class.
pub fn class_nll(probs: &[f64], target: usize, is_no_object: bool) -> Result<LossValue> {
    let p = *probs.get(target).ok_or(Error::DimensionMismatch {
        expected: target + 1,
        actual: probs.len(),
    })?;
    let weight = if is_no_object { NO_OBJECT_WEIGHT } else { 1.0 };
    let mut grad = vec![0.0; probs.len()];
    if p < MIN_PROBABILITY {
        return Ok(LossValue {
            value: -weight * MIN_PROBABILITY.ln(),
            grad,
            capped: true,
        });
    }
    grad[target] = -weight / p;
    Ok(LossValue::new(-weight * p.ln(), grad))
}

/// `1 − GIoU(b1, b2)`, in `[0, 2]`; the gradient is with respect to `b2`.
pub fn giou_loss(b1: &Box2D, b2: &Box2D) -> Result<LossValue> {
    b1.validate()?;
    b2.validate()?;
    let [ax0, ay0, ax1, ay1] = b1.edges();
    let [bx0, by0, bx1, by1] = b2.edges();

    let ix = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let iy = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = ix * iy;
    let area_a = b1.w * b1.h;
    let area_b = b2.w * b2.h;
    let union = area_a + area_b - inter;
    let ex = ax1.max(bx1) - ax0.min(bx0);
    let ey = ay1.max(by1) - ay0.min(by0);
    let enclosing = ex * ey;
    // 1 − (I/U − (E − U)/E) = 2 − I/U − U/E
    let value = 2.0 - inter / union - union / enclosing;

    let g_union = inter / (union * union) - 1.0 / enclosing;
    let g_inter = -1.0 / union - g_union;
    let g_area_b = g_union;
    let g_enc = union / (enclosing * enclosing);

    // Gradients on b2's edges (x0, y0, x1, y1).
    let mut ge = [0.0_f64; 4];
    if ix > 0.0 && iy > 0.0 {
        let (g_ix, g_iy) = (g_inter * iy, g_inter * ix);
        if bx1 <= ax1 {
            ge[2] += g_ix;
        }
        if bx0 >= ax0 {
            ge[0] -= g_ix;
        }
        if by1 <= ay1 {
            ge[3] += g_iy;
        }
        if by0 >= ay0 {
            ge[1] -= g_iy;
        }
    }
    ge[2] += g_area_b * b2.h;
    ge[0] -= g_area_b * b2.h;
    ge[3] += g_area_b * b2.w;
    ge[1] -= g_area_b * b2.w;
    let (g_ex, g_ey) = (g_enc * ey, g_enc * ex);
    if bx1 >= ax1 {
        ge[2] += g_ex;
    }
    if bx0 <= ax0 {
        ge[0] -= g_ex;
    }
    if by1 >= ay1 {
        ge[3] += g_ey;
    }
    if by0 <= ay0 {
        ge[1] -= g_ey;
    }

    let grad = vec![
        ge[0] + ge[2],
        ge[1] + ge[3],
        (ge[2] - ge[0]) / 2.0,
        (ge[3] - ge[1]) / 2.0,
    ];
    Ok(LossValue::new(value, grad))
}

/// `2·(1 − GIoU) + 10·‖b1 − b2‖₁`, gradient with respect to `b2`.
pub fn box_loss(b1: &Box2D, b2: &Box2D) -> Result<LossValue> {
    let giou = giou_loss(b1, b2)?;
    let (ta, pa) = (b1.to_array(), b2.to_array());
    let mut value = GIOU_WEIGHT * giou.value;
    let mut grad = Vec::with_capacity(4);
    for k in 0..4 {
        let diff = pa[k] - ta[k];
        value += BOX_L1_WEIGHT * diff.abs();
        grad.push(GIOU_WEIGHT * giou.grad[k] + BOX_L1_WEIGHT * sign(diff));
    }
    Ok(LossValue::new(value, grad))
}

pub fn smooth_l1(x: f64) -> LossValue {
    if x.abs() < 1.0 {
        LossValue::new(0.5 * x * x, vec![x])
    } else {
        LossValue::new(x.abs() - 0.5, vec![sign(x)])
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_keypoint_count(kps: &[Point2]) -> Result<()> {
    if kps.len() != NUM_IBB_KEYPOINTS {
        return Err(Error::DimensionMismatch {
            expected: NUM_IBB_KEYPOINTS,
            actual: kps.len(),
        });
    }
    Ok(())
}

/// Sum over the 12 IBB edges of `smoothL1(CR² − r)`, where `r` is the squared
/// distance ratio of the predicted edge points.
///
/// Gradient layout: `[u0, v0, u1, v1, ...]`.
pub fn cross_ratio_loss(kps: &[Point2]) -> Result<LossValue> {
    check_keypoint_count(kps)?;
    let target = IBB_CROSS_RATIO * IBB_CROSS_RATIO;
    let mut value = 0.0;
    let mut grad = vec![0.0; 2 * NUM_IBB_KEYPOINTS];
    for [ia, ib, ic, id] in EDGE_QUADS {
        let (a, b, c, d) = (kps[ia], kps[ib], kps[ic], kps[id]);
        let ca = c - a;
        let db = d - b;
        let cb = c - b;
        let da = d - a;
        let (p, q, s, t) = (
            ca.norm_squared(),
            db.norm_squared(),
            cb.norm_squared(),
            da.norm_squared(),
        );
        if s < 1e-24 || t < 1e-24 {
            return Err(Error::CoincidentPoints);
        }
        let r = p * q / (s * t);
        let term = smooth_l1(target - r);
        value += term.value;
        // d term / d r, then d r = r (dP/P + dQ/Q − dS/S − dT/T)
        let g_r = -term.grad[0];
        if g_r == 0.0 {
            continue;
        }
        let k = g_r * r;
        let mut add = |idx: usize, v: nalgebra::Vector2<f64>| {
            grad[2 * idx] += v.x;
            grad[2 * idx + 1] += v.y;
        };
        if p > 0.0 {
            add(ic, ca * (2.0 * k / p));
            add(ia, ca * (-2.0 * k / p));
        }
        if q > 0.0 {
            add(id, db * (2.0 * k / q));
            add(ib, db * (-2.0 * k / q));
        }
        add(ic, cb * (-2.0 * k / s));
        add(ib, cb * (2.0 * k / s));
        add(id, da * (-2.0 * k / t));
        add(ia, da * (2.0 * k / t));
    }
    Ok(LossValue::new(value, grad))
}

/// `γ‖K − K̂‖₁ + δ·L_CR(K̂)` with γ = 1 and δ = 10; gradient with respect to `pred`.
pub fn keypoint_loss(gt: &[Point2], pred: &[Point2]) -> Result<LossValue> {
    check_keypoint_count(gt)?;
    let cr = cross_ratio_loss(pred)?;
    let mut value = CROSS_RATIO_WEIGHT * cr.value;
    let mut grad: Vec<f64> = cr.grad.iter().map(|g| CROSS_RATIO_WEIGHT * g).collect();
    for (i, (g, p)) in gt.iter().zip(pred).enumerate() {
        let diff = p - g;
        value += KEYPOINT_L1_WEIGHT * diff.abs().sum();
        grad[2 * i] += KEYPOINT_L1_WEIGHT * sign(diff.x);
        grad[2 * i + 1] += KEYPOINT_L1_WEIGHT * sign(diff.y);
    }
    Ok(LossValue::new(value, grad))
}

/// How the symmetric rotation loss searches for the closest predicted point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClosestPointSearch {
    #[default]
    BruteForce,
    Grid,
}

/// Rotation term: mean per-point ℓ1 distance between `R x` and `R̂ x`
/// (point-to-point), or between `R x₁` and its closest `R̂ x₂` when the
/// object is symmetric.
///
/// Gradient layout: `R̂` row-major (9 entries).
pub fn rotation_loss(
    gt: &RotationMatrix,
    pred: &RotationMatrix,
    model_points: &[Point3],
    symmetric: bool,
    search: ClosestPointSearch,
) -> Result<LossValue> {
    if model_points.is_empty() {
        return Err(Error::EmptyModel);
    }
    let m = model_points.len() as f64;
    let gt_pts: Vec<Vector3<f64>> = model_points
        .iter()
        .map(|x| gt.matrix() * x.coords)
        .collect();
    let pred_pts: Vec<Vector3<f64>> = model_points
        .iter()
        .map(|x| pred.matrix() * x.coords)
        .collect();
    let mut value = 0.0;
    let mut g = Matrix3::zeros();
    let mut accumulate = |a: &Vector3<f64>, j: usize| {
        let diff = a - pred_pts[j];
        value += diff.abs().sum();
        let s = diff.map(sign);
        // d/dR̂ of |a − R̂ x| summed = −sign(a − R̂x) xᵀ
        g -= s * model_points[j].coords.transpose();
    };
    if symmetric {
        match search {
            ClosestPointSearch::BruteForce => {
                for a in &gt_pts {
                    let (j, _) = nearest_brute_force(&pred_pts, a, Metric::L1);
                    accumulate(a, j);
                }
            }
            ClosestPointSearch::Grid => {
                let grid = PointGrid::new(&pred_pts);
                for a in &gt_pts {
                    let (j, _) = grid.nearest(a, Metric::L1);
                    accumulate(a, j);
                }
            }
        }
    } else {
        for (j, a) in gt_pts.iter().enumerate() {
            accumulate(a, j);
        }
    }
    let grad = g.transpose().iter().map(|v| v / m).collect();
    Ok(LossValue::new(value / m, grad))
}

/// Rotation term plus `‖t − t̂‖₁`. Gradient layout: `R̂` row-major, then `t̂`.
pub fn pose_loss(
    gt: &Pose,
    pred: &Pose,
    model_points: &[Point3],
    symmetric: bool,
) -> Result<LossValue> {
    let rot = rotation_loss(
        &gt.rotation,
        &pred.rotation,
        model_points,
        symmetric,
        ClosestPointSearch::BruteForce,
    )?;
    let dt = pred.translation - gt.translation;
    let mut grad = rot.grad;
    grad.extend(dt.iter().map(|v| sign(*v)));
    Ok(LossValue::new(rot.value + dt.abs().sum(), grad))
}
