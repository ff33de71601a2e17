//! Analytical pose recovery from 2D–3D correspondences: EPnP and a RANSAC
//! wrapper around it.
//!
//! EPnP writes every model point as a barycentric combination of four control
//! points (three for planar sets), solves for the camera-frame control points
//! in the null space of a `2n × 3m` linear system, and fixes the null-space
//! coefficients with the pairwise control-point distances. The rigid motion
//! follows from a Procrustes alignment.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Point2, Point3, Pose, RotationMatrix, MIN_DEPTH};

/// Paired model points and their pixel observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    object_points: Vec<Point3>,
    image_points: Vec<Point2>,
}

impl Correspondences {
    pub fn new(object_points: Vec<Point3>, image_points: Vec<Point2>) -> Result<Self> {
        if object_points.len() != image_points.len() {
            return Err(Error::DimensionMismatch {
                expected: object_points.len(),
                actual: image_points.len(),
            });
        }
        if object_points.len() < 4 {
            return Err(Error::DegenerateConfiguration(
                "need at least 4 correspondences",
            ));
        }
        Ok(Correspondences {
            object_points,
            image_points,
        })
    }

    pub fn len(&self) -> usize {
        self.object_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.object_points.is_empty()
    }

    pub fn object_points(&self) -> &[Point3] {
        &self.object_points
    }

    pub fn image_points(&self) -> &[Point2] {
        &self.image_points
    }

    fn subset(&self, indices: &[usize]) -> Result<Self> {
        Correspondences::new(
            indices.iter().map(|&i| self.object_points[i]).collect(),
            indices.iter().map(|&i| self.image_points[i]).collect(),
        )
    }
}

/// Per-point reprojection error in pixels; points behind the camera get `+∞`.
pub fn reprojection_errors(
    corr: &Correspondences,
    pose: &Pose,
    cam: &CameraIntrinsics,
) -> Vec<f64> {
    corr.object_points
        .iter()
        .zip(&corr.image_points)
        .map(
            |(p, uv)| match cam.project_camera_point(&pose.transform_point(p)) {
                Ok(proj) => (proj - uv).norm(),
                Err(_) => f64::INFINITY,
            },
        )
        .collect()
}

pub fn reprojection_rms(corr: &Correspondences, pose: &Pose, cam: &CameraIntrinsics) -> f64 {
    let errs = reprojection_errors(corr, pose, cam);
    (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
}

const GAUSS_NEWTON_ITERATIONS: usize = 10;

struct ControlFrame {
    /// World control points; the first is the centroid.
    points: Vec<Vector3<f64>>,
    /// Barycentric coordinates, one row per correspondence.
    alphas: Vec<Vec<f64>>,
}

fn control_frame(points: &[Point3]) -> Result<ControlFrame> {
    let n = points.len() as f64;
    let centroid = points
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.coords)
        / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lambda: [f64; 3] = order.map(|k| eig.eigenvalues[k].max(0.0));
    if !(lambda[0] > 0.0) {
        return Err(Error::DegenerateConfiguration("all model points coincide"));
    }
    if lambda[1] <= 1e-10 * lambda[0] {
        return Err(Error::DegenerateConfiguration("model points are collinear"));
    }
    let planar = lambda[2] <= 1e-10 * lambda[0];
    let axes = if planar { 2 } else { 3 };
    let mut ctrl = vec![centroid];
    let mut dirs = Vec::with_capacity(axes);
    for k in 0..axes {
        let e: Vector3<f64> = eig.eigenvectors.column(order[k]).into();
        let s = lambda[k].sqrt();
        ctrl.push(centroid + e * s);
        dirs.push((e, s));
    }
    let alphas = points
        .iter()
        .map(|p| {
            let d = p.coords - centroid;
            let mut a: Vec<f64> = dirs.iter().map(|(e, s)| e.dot(&d) / s).collect();
            a.insert(0, 1.0 - a.iter().sum::<f64>());
            a
        })
        .collect();
    Ok(ControlFrame {
        points: ctrl,
        alphas,
    })
}

/// Pairwise-distance constraints for a fixed null-space basis.
struct BetaProblem {
    /// For each control-point pair, the difference vectors of each basis vector.
    diffs: Vec<Vec<Vector3<f64>>>,
    /// Squared world distances of the pairs.
    targets: Vec<f64>,
}

impl BetaProblem {
    fn new(basis: &[DVector<f64>], ctrl_world: &[Vector3<f64>]) -> Self {
        let m = ctrl_world.len();
        let mut diffs = Vec::new();
        let mut targets = Vec::new();
        for i in 0..m {
            for j in (i + 1)..m {
                diffs.push(
                    basis
                        .iter()
                        .map(|v| {
                            Vector3::new(
                                v[3 * i] - v[3 * j],
                                v[3 * i + 1] - v[3 * j + 1],
                                v[3 * i + 2] - v[3 * j + 2],
                            )
                        })
                        .collect(),
                );
                targets.push((ctrl_world[i] - ctrl_world[j]).norm_squared());
            }
        }
        BetaProblem { diffs, targets }
    }

    fn dims(&self) -> usize {
        self.diffs[0].len()
    }

    /// Linear system in the products `β_k β_l` (k ≤ l), row per pair.
    fn product_system(&self) -> DMatrix<f64> {
        let n = self.dims();
        let cols = n * (n + 1) / 2;
        DMatrix::from_fn(self.diffs.len(), cols, |p, c| {
            let (k, l) = product_index(n, c);
            let s = &self.diffs[p];
            let f = if k == l { 1.0 } else { 2.0 };
            f * s[k].dot(&s[l])
        })
    }

    fn residuals(&self, beta: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.diffs.len(),
            self.diffs.iter().zip(&self.targets).map(|(s, d2)| {
                let v = s
                    .iter()
                    .zip(beta)
                    .fold(Vector3::zeros(), |acc, (sk, b)| acc + sk * *b);
                v.norm_squared() - d2
            }),
        )
    }

    fn gauss_newton(&self, beta: &mut [f64]) {
        let n = beta.len();
        for _ in 0..GAUSS_NEWTON_ITERATIONS {
            let r = self.residuals(beta);
            let jac = DMatrix::from_fn(self.diffs.len(), n, |p, k| {
                let s = &self.diffs[p];
                let v = s
                    .iter()
                    .zip(beta.iter())
                    .fold(Vector3::zeros(), |acc, (sl, b)| acc + sl * *b);
                2.0 * s[k].dot(&v)
            });
            let Ok(step) = jac.clone().svd(true, true).solve(&r, 1e-14) else {
                return;
            };
            if step.iter().any(|v| !v.is_finite()) {
                return;
            }
            for (b, s) in beta.iter_mut().zip(step.iter()) {
                *b -= s;
            }
        }
    }

    /// Initial β from the linearized products, for a basis of size 1, 2 or 3.
    fn initial_betas(&self) -> Option<Vec<f64>> {
        let n = self.dims();
        let l = self.product_system();
        if l.nrows() < l.ncols() {
            return None;
        }
        let d = DVector::from_column_slice(&self.targets);
        let b = l.svd(true, true).solve(&d, 1e-14).ok()?;
        let beta = match n {
            1 => vec![b[0].abs().sqrt()],
            2 => {
                let b1 = b[0].abs().sqrt();
                let b2 = b[2].abs().sqrt() * if b[1] * b[0] < 0.0 { -1.0 } else { 1.0 };
                vec![b1, b2]
            }
            3 => {
                let b1 = b[0].abs().sqrt();
                if b1 < 1e-300 {
                    return None;
                }
                vec![b1, b[1] / b1, b[2] / b1]
            }
            _ => return None,
        };
        beta.iter().all(|v| v.is_finite()).then_some(beta)
    }
}

/// Maps a flat index over `k ≤ l` pairs to `(k, l)`, row-major over `k`.
fn product_index(n: usize, mut c: usize) -> (usize, usize) {
    for k in 0..n {
        let row = n - k;
        if c < row {
            return (k, k + c);
        }
        c -= row;
    }
    unreachable!("product index out of range")
}

/// Rigid alignment `x_cam ≈ R x_world + t` by SVD.
fn procrustes(world: &[Vector3<f64>], cam: &[Vector3<f64>]) -> Option<Pose> {
    let n = world.len() as f64;
    let mw = world.iter().sum::<Vector3<f64>>() / n;
    let mc = cam.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (w, c) in world.iter().zip(cam) {
        h += (c - mc) * (w - mw).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    let rotation = RotationMatrix::try_from_matrix(r).ok()?;
    Some(Pose::new(rotation, mc - r * mw))
}

/// Camera-frame points from refined β, aligned to the model; `None` when the
/// alignment fails or puts a point behind the camera.
fn candidate_pose(
    corr: &Correspondences,
    cam: &CameraIntrinsics,
    frame: &ControlFrame,
    basis: &[DVector<f64>],
    beta: &[f64],
    world: &[Vector3<f64>],
) -> Option<(f64, Pose)> {
    let ctrl: Vec<Vector3<f64>> = (0..frame.points.len())
        .map(|j| {
            basis
                .iter()
                .zip(beta)
                .fold(Vector3::zeros(), |acc, (v, b)| {
                    acc + Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]) * *b
                })
        })
        .collect();
    let mut cam_pts: Vec<Vector3<f64>> = frame
        .alphas
        .iter()
        .map(|a| {
            a.iter()
                .zip(&ctrl)
                .fold(Vector3::zeros(), |acc, (w, c)| acc + c * *w)
        })
        .collect();
    if cam_pts.iter().map(|p| p.z).sum::<f64>() < 0.0 {
        cam_pts.iter_mut().for_each(|p| *p = -*p);
    }
    scored_pose(corr, cam, world, procrustes(world, &cam_pts)?)
}

fn scored_pose(
    corr: &Correspondences,
    cam: &CameraIntrinsics,
    world: &[Vector3<f64>],
    pose: Pose,
) -> Option<(f64, Pose)> {
    let in_front = world
        .iter()
        .all(|w| (pose.rotation.matrix() * w + pose.translation).z > MIN_DEPTH);
    let err = reprojection_rms(corr, &pose, cam);
    (in_front && err.is_finite()).then_some((err, pose))
}

/// Grunert's P3P: camera-frame points for three world points seen along unit
/// bearings. Returns up to four solutions.
fn p3p(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<[Vector3<f64>; 3]> {
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let cos_a = bearings[1].dot(&bearings[2]);
    let cos_b = bearings[0].dot(&bearings[2]);
    let cos_g = bearings[0].dot(&bearings[1]);
    let q = (a2 - c2) / b2;
    let p = (a2 + c2) / b2;
    let coeffs = [
        (q - 1.0).powi(2) - 4.0 * c2 / b2 * cos_a * cos_a,
        4.0 * (q * (1.0 - q) * cos_b - (1.0 - p) * cos_a * cos_g
            + 2.0 * c2 / b2 * cos_a * cos_a * cos_b),
        2.0 * (q * q - 1.0 + 2.0 * q * q * cos_b * cos_b + 2.0 * (b2 - c2) / b2 * cos_a * cos_a
            - 4.0 * p * cos_a * cos_b * cos_g
            + 2.0 * (b2 - a2) / b2 * cos_g * cos_g),
        4.0 * (-q * (1.0 + q) * cos_b + 2.0 * a2 / b2 * cos_g * cos_g * cos_b
            - (1.0 - p) * cos_a * cos_g),
        (1.0 + q).powi(2) - 4.0 * a2 / b2 * cos_g * cos_g,
    ];
    let mut out = Vec::new();
    for v in real_quartic_roots(&coeffs) {
        let denom = 2.0 * (cos_g - v * cos_a);
        if denom.abs() < 1e-12 {
            continue;
        }
        let u = ((q - 1.0) * v * v - 2.0 * q * cos_b * v + 1.0 + q) / denom;
        let s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_b);
        if !(s1_sq > 0.0) || u <= 0.0 || v <= 0.0 {
            continue;
        }
        let s1 = s1_sq.sqrt();
        out.push([
            bearings[0] * s1,
            bearings[1] * (u * s1),
            bearings[2] * (v * s1),
        ]);
    }
    out
}

/// Real roots of `c[0] x⁴ + c[1] x³ + c[2] x² + c[3] x + c[4]`, polished by Newton steps.
fn real_quartic_roots(c: &[f64; 5]) -> Vec<f64> {
    if c[0].abs() < 1e-14 * c.iter().map(|v| v.abs()).fold(0.0, f64::max) {
        return Vec::new();
    }
    let mut companion = nalgebra::Matrix4::<f64>::zeros();
    for k in 0..4 {
        companion[(0, k)] = -c[k + 1] / c[0];
    }
    for k in 1..4 {
        companion[(k, k - 1)] = 1.0;
    }
    let eval = |x: f64| c.iter().fold(0.0, |acc, k| acc * x + k);
    let deriv = |x: f64| 4.0 * c[0] * x.powi(3) + 3.0 * c[1] * x * x + 2.0 * c[2] * x + c[3];
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-4 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..5 {
                let d = deriv(x);
                if d.abs() < 1e-300 {
                    break;
                }
                x -= eval(x) / d;
            }
            x
        })
        .collect()
}

/// EPnP on all correspondences, with Gauss–Newton refinement of the null-space
/// coefficients and selection of the candidate with the lowest reprojection
/// error.
pub fn epnp_solve(corr: &Correspondences, cam: &CameraIntrinsics) -> Result<Pose> {
    cam.validate()?;
    let frame = control_frame(&corr.object_points)?;
    let m = frame.points.len();
    let n = corr.len();

    let rows = (2 * n).max(3 * m);
    let mut mat = DMatrix::zeros(rows, 3 * m);
    for (i, (alpha, uv)) in frame.alphas.iter().zip(&corr.image_points).enumerate() {
        for (j, a) in alpha.iter().enumerate() {
            mat[(2 * i, 3 * j)] = a * cam.fx;
            mat[(2 * i, 3 * j + 2)] = a * (cam.px - uv.x);
            mat[(2 * i + 1, 3 * j + 1)] = a * cam.fy;
            mat[(2 * i + 1, 3 * j + 2)] = a * (cam.py - uv.y);
        }
    }
    let svd = mat.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or(Error::DegenerateConfiguration("SVD failed"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let null_vectors: Vec<DVector<f64>> = order.iter().map(|&k| v_t.row(k).transpose()).collect();

    // The linearization covers kernels of up to three vectors; with four
    // correspondences the kernel is wider and P3P on each triplet stands in.
    let world: Vec<Vector3<f64>> = corr.object_points.iter().map(|p| p.coords).collect();
    let mut best: Option<(f64, Pose)> = None;
    let mut consider = |candidate: Option<(f64, Pose)>| {
        if let Some((err, pose)) = candidate {
            if best.as_ref().is_none_or(|(e, _)| err < *e) {
                best = Some((err, pose));
            }
        }
    };
    for dims in 1..=m.min(3) {
        let basis = &null_vectors[..dims];
        let problem = BetaProblem::new(basis, &frame.points);
        if let Some(mut beta) = problem.initial_betas() {
            problem.gauss_newton(&mut beta);
            consider(candidate_pose(corr, cam, &frame, basis, &beta, &world));
        }
    }
    if n == 4 {
        let bearings: Vec<Vector3<f64>> = corr
            .image_points
            .iter()
            .map(|uv| {
                Vector3::new((uv.x - cam.px) / cam.fx, (uv.y - cam.py) / cam.fy, 1.0).normalize()
            })
            .collect();
        for skip in 0..4 {
            let idx: Vec<usize> = (0..4).filter(|&i| i != skip).collect();
            let w = [world[idx[0]], world[idx[1]], world[idx[2]]];
            let f = [bearings[idx[0]], bearings[idx[1]], bearings[idx[2]]];
            for cam_pts in p3p(&w, &f) {
                consider(
                    procrustes(&w, &cam_pts).and_then(|pose| scored_pose(corr, cam, &world, pose)),
                );
            }
        }
    }
    let (_, pose) = best.ok_or(Error::BehindCamera {
        index: None,
        depth: f64::NAN,
    })?;
    Ok(pose)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Inlier reprojection threshold, pixels.
    pub threshold: f64,
    /// Minimum fraction of inliers required for a consensus (at least 4 points are always required).
    pub min_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            max_iterations: 200,
            threshold: 3.0,
            min_inlier_ratio: 0.0,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::invalid("threshold", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.min_inlier_ratio) {
            return Err(Error::invalid("min_inlier_ratio", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub pose: Pose,
    pub inliers: Vec<bool>,
}

impl RansacOutcome {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|b| **b).count()
    }
}

fn inlier_mask(
    corr: &Correspondences,
    pose: &Pose,
    cam: &CameraIntrinsics,
    threshold: f64,
) -> Vec<bool> {
    reprojection_errors(corr, pose, cam)
        .into_iter()
        .map(|e| e <= threshold)
        .collect()
}

/// Minimal 4-point EPnP hypotheses scored by inlier count, then a refit on the
/// best inlier set. Iteration `i` samples with seed `cfg.seed + i`.
pub fn ransac_pnp(
    corr: &Correspondences,
    cam: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<RansacOutcome> {
    cfg.validate()?;
    let n = corr.len();
    let required = 4usize.max((cfg.min_inlier_ratio * n as f64).ceil() as usize);
    let mut best: Option<(usize, Pose, Vec<bool>)> = None;
    for i in 0..cfg.max_iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        let sample = rand::seq::index::sample(&mut rng, n, 4).into_vec();
        let Ok(minimal) = corr.subset(&sample) else {
            continue;
        };
        let Ok(pose) = epnp_solve(&minimal, cam) else {
            continue;
        };
        let mask = inlier_mask(corr, &pose, cam, cfg.threshold);
        let count = mask.iter().filter(|b| **b).count();
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            best = Some((count, pose, mask));
            if count == n {
                break;
            }
        }
    }
    let (count, pose, mask) = best.ok_or(Error::NoConsensus { best: 0 })?;
    if count < required {
        return Err(Error::NoConsensus { best: count });
    }
    let inlier_idx: Vec<usize> = (0..n).filter(|&k| mask[k]).collect();
    if let Ok(refit) = corr.subset(&inlier_idx).and_then(|c| epnp_solve(&c, cam)) {
        let refit_mask = inlier_mask(corr, &refit, cam, cfg.threshold);
        if refit_mask.iter().filter(|b| **b).count() >= count {
            return Ok(RansacOutcome {
                pose: refit,
                inliers: refit_mask,
            });
        }
    }
    Ok(RansacOutcome {
        pose,
        inliers: mask,
    })
}
