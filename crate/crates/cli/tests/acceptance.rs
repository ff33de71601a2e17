//! Acceptance run: every criterion at its stated tolerance, one line each.
//!
//! Criteria 5, 6 and 11 share one full-size training run (10k/1k scenes),
//! so this target takes several minutes in release-like builds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use setpose::attention::{attention_weights, multi_head_attention, MultiHeadParams};
use setpose::geometry::{
    cross_ratio, geodesic_distance, rot_from_6d, rot_from_6d_backward, CameraIntrinsics, Point2,
    Point3, Pose, Rot6D, RotationMatrix,
};
use setpose::keypoints::{project_keypoints, EDGE_QUADS, IBB_CROSS_RATIO, NUM_IBB_KEYPOINTS};
use setpose::losses::{
    box_loss, class_nll, cross_ratio_loss, giou_loss, keypoint_loss, pose_loss, rotation_loss,
    smooth_l1, Box2D, ClosestPointSearch,
};
use setpose::matching::{cost_matrix, hungarian_match, ObjectTarget, PredictionTuple, TargetTuple};
use setpose::metrics::{add_metric, adds_metric, auc, EvalRecord};
use setpose::pnp::{epnp_solve, reprojection_rms, Correspondences};
use setpose::rotest::{
    mlp_backward, mlp_forward, DropoutMode, InputLayout, MlpParams, TrainConfig,
};
use setpose::synth::Catalog;
use setpose_cli::commands::{ablate, compare, gen_data, train};
use setpose_cli::config::{AblateConfig, CompareConfig, GenDataConfig, Solver, TrainCommandConfig};
use setpose_cli::output::Reporter;

const QUIET: Reporter = Reporter { quiet: true };

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            pass,
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Verdict::new(false, format!("error: {e}"))
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    Pose::new(
        RotationMatrix::random(rng),
        Vector3::new(
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.1..0.1),
            rng.random_range(0.5..1.5),
        ),
    )
}

fn random_box(rng: &mut ChaCha8Rng) -> Box2D {
    Box2D::new(
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.05..0.4),
        rng.random_range(0.05..0.4),
    )
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn random_keypoints(rng: &mut ChaCha8Rng) -> [Point2; NUM_IBB_KEYPOINTS] {
    std::array::from_fn(|_| Point2::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)))
}

// 1. Matching optimality.

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    fn heap(k: usize, perm: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(perm.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, perm, out);
            let j = if k % 2 == 0 { i } else { 0 };
            perm.swap(j, k - 1);
        }
    }
    heap(n, &mut perm, &mut out);
    out
}

fn criterion_matching() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let perms: Vec<Vec<Vec<usize>>> = (0..=8).map(all_permutations).collect();
    let classes = 5;
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=8);
        let objects = rng.random_range(0..=n);
        let targets: Vec<TargetTuple> = (0..n)
            .map(|i| {
                if i < objects {
                    TargetTuple::Object(ObjectTarget {
                        class_id: rng.random_range(0..classes),
                        box2d: random_box(&mut rng),
                        keypoints: random_keypoints(&mut rng),
                        rotation: RotationMatrix::random(&mut rng),
                        translation: Vector3::new(0.0, 0.0, 1.0),
                        symmetric: false,
                    })
                } else {
                    TargetTuple::NoObject
                }
            })
            .collect();
        let preds: Vec<PredictionTuple> = (0..n)
            .map(|_| PredictionTuple {
                class_probs: random_simplex(&mut rng, classes + 1),
                box2d: random_box(&mut rng),
                keypoints: random_keypoints(&mut rng),
                centroid: Point2::new(0.5, 0.5),
                depth: 1.0,
                rotation: RotationMatrix::random(&mut rng),
            })
            .collect();
        let (Ok(m), Ok(costs)) = (
            hungarian_match(&targets, &preds),
            cost_matrix(&targets, &preds),
        ) else {
            return Verdict::error("matching failed");
        };
        let best = perms[n]
            .iter()
            .map(|p| costs.assignment_cost(p))
            .fold(f64::INFINITY, f64::min);
        if m.cost != best {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!(
            "1000 instances with N <= 8, {mismatches} differ from brute force, {}",
            secs(elapsed)
        ),
    )
}

// 2. Cross-ratio invariant.

fn criterion_cross_ratio(catalog: &Catalog) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cam = CameraIntrinsics::default();
    let (mut worst_cr, mut worst_loss) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let entry = &catalog.entries()[rng.random_range(0..catalog.len())];
        let pose = random_pose(&mut rng);
        let Ok(kps) = project_keypoints(&entry.keypoints, &pose, &cam) else {
            return Verdict::error("projection failed");
        };
        for [a, b, c, d] in EDGE_QUADS {
            match cross_ratio(
                &kps[a].coords,
                &kps[b].coords,
                &kps[c].coords,
                &kps[d].coords,
            ) {
                Ok(cr) => worst_cr = worst_cr.max((cr - IBB_CROSS_RATIO).abs()),
                Err(e) => return Verdict::error(e),
            }
        }
        match cross_ratio_loss(&kps) {
            Ok(l) => worst_loss = worst_loss.max(l.value),
            Err(e) => return Verdict::error(e),
        }
    }
    Verdict::new(
        worst_cr < 1e-6 && worst_loss < 1e-9,
        format!(
            "500 poses, max |CR - 4/3| = {worst_cr:.2e}, max cross-ratio loss = {worst_loss:.2e}"
        ),
    )
}

// 3. EPnP exactness.

fn criterion_epnp(catalog: &Catalog) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cam = CameraIntrinsics::default();
    let (mut rot, mut trans, mut rms) = (0.0f64, 0.0f64, 0.0f64);
    let start = Instant::now();
    for _ in 0..500 {
        let entry = &catalog.entries()[rng.random_range(0..catalog.len())];
        let gt = random_pose(&mut rng);
        let Ok(img) = project_keypoints(&entry.keypoints, &gt, &cam) else {
            return Verdict::error("projection failed");
        };
        let corr = Correspondences::new(entry.keypoints.points().to_vec(), img.to_vec())
            .expect("32 points");
        let pose = match epnp_solve(&corr, &cam) {
            Ok(p) => p,
            Err(e) => return Verdict::error(e),
        };
        rot = rot.max(geodesic_distance(&gt.rotation, &pose.rotation));
        trans = trans.max((gt.translation - pose.translation).norm());
        rms = rms.max(reprojection_rms(&corr, &pose, &cam));
    }
    let elapsed = start.elapsed();
    Verdict::new(
        rot < 1e-3 && trans < 1e-4 && rms < 1e-3 && elapsed < Duration::from_secs(30),
        format!(
            "500 problems, max rotation {rot:.2e} rad, max translation {trans:.2e} m, max RMS {rms:.2e} px, {}",
            secs(elapsed)
        ),
    )
}

// 4. Gradient fidelity.

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|k| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[k] += h;
            m[k] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Relative error with a floor on the denominator for entries that vanish.
/// Smallest |pre-activation| over the hidden units of `p` evaluated at `x`.
fn distance_to_kink(p: &MlpParams, x: &DMatrix<f64>) -> f64 {
    let mut a = x.clone();
    let mut closest = f64::INFINITY;
    let hidden = p.layers().len() - 1;
    for layer in &p.layers()[..hidden] {
        let mut z = &layer.weight * &a;
        for mut col in z.column_iter_mut() {
            col += &layer.bias;
        }
        closest = z.iter().fold(closest, |m, v| m.min(v.abs()));
        a = z.map(|v| v.max(0.0));
    }
    closest
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

struct GradCheck {
    name: &'static str,
    points: usize,
    worst: f64,
}

fn grad_checks(catalog: &Catalog) -> Result<Vec<GradCheck>, setpose::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cam = CameraIntrinsics::default();
    let mut out = Vec::new();
    let mut record = |name, worst: f64| {
        out.push(GradCheck {
            name,
            points: 100,
            worst,
        })
    };

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let probs = random_simplex(&mut rng, 6);
        let t = rng.random_range(0..6);
        let l = class_nll(&probs, t, t == 5)?;
        worst = worst.max(rel_error(
            &l.grad,
            &central_difference(|x| class_nll(x, t, t == 5).unwrap().value, &probs, 1e-7),
        ));
    }
    record("class NLL", worst);

    let mut worst = 0.0f64;
    let mut worst_giou = 0.0f64;
    let mut checked = 0;
    while checked < 100 {
        let a = random_box(&mut rng);
        let b = Box2D::new(
            a.cx + rng.random_range(-0.1..0.1),
            a.cy + rng.random_range(-0.1..0.1),
            a.w * rng.random_range(0.7..1.4),
            a.h * rng.random_range(0.7..1.4),
        );
        let (ta, tb) = (a.to_array(), b.to_array());
        let ea = [
            a.cx - a.w / 2.0,
            a.cy - a.h / 2.0,
            a.cx + a.w / 2.0,
            a.cy + a.h / 2.0,
        ];
        let eb = [
            b.cx - b.w / 2.0,
            b.cy - b.h / 2.0,
            b.cx + b.w / 2.0,
            b.cy + b.h / 2.0,
        ];
        let kinks = [
            ea[0] - eb[0],
            ea[1] - eb[1],
            ea[2] - eb[2],
            ea[3] - eb[3],
            ea[2] - eb[0],
            ea[3] - eb[1],
            eb[2] - ea[0],
            eb[3] - ea[1],
        ];
        // The ℓ1 and min/max terms are not differentiable at their kinks.
        if kinks.iter().any(|k| k.abs() < 1e-4)
            || ta.iter().zip(&tb).any(|(x, y)| (x - y).abs() < 1e-4)
        {
            continue;
        }
        let f = |x: &[f64]| {
            box_loss(&a, &Box2D::new(x[0], x[1], x[2], x[3]))
                .unwrap()
                .value
        };
        worst = worst.max(rel_error(
            &box_loss(&a, &b)?.grad,
            &central_difference(f, &tb, 1e-6),
        ));
        let g = |x: &[f64]| {
            giou_loss(&a, &Box2D::new(x[0], x[1], x[2], x[3]))
                .unwrap()
                .value
        };
        worst_giou = worst_giou.max(rel_error(
            &giou_loss(&a, &b)?.grad,
            &central_difference(g, &tb, 1e-6),
        ));
        checked += 1;
    }
    record("GIoU", worst_giou);
    record("box", worst);

    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 100 {
        let x: f64 = rng.random_range(-3.0..3.0);
        if (x.abs() - 1.0).abs() < 1e-4 {
            continue;
        }
        let fd = central_difference(|v| smooth_l1(v[0]).value, &[x], 1e-6);
        worst = worst.max(rel_error(&smooth_l1(x).grad, &fd));
        checked += 1;
    }
    record("smooth L1", worst);

    let unflat =
        |x: &[f64]| -> Vec<Point2> { x.chunks(2).map(|c| Point2::new(c[0], c[1])).collect() };
    let (mut worst_cr, mut worst_kp) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let entry = &catalog.entries()[rng.random_range(0..catalog.len())];
        let gt = project_keypoints(&entry.keypoints, &random_pose(&mut rng), &cam)?;
        let pred: Vec<Point2> = gt
            .iter()
            .map(|p| {
                p + nalgebra::Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))
            })
            .collect();
        let flat: Vec<f64> = pred.iter().flat_map(|p| [p.x, p.y]).collect();
        let fd = central_difference(|x| cross_ratio_loss(&unflat(x)).unwrap().value, &flat, 1e-5);
        worst_cr = worst_cr.max(rel_error(&cross_ratio_loss(&pred)?.grad, &fd));
        let fd = central_difference(
            |x| keypoint_loss(&gt, &unflat(x)).unwrap().value,
            &flat,
            1e-5,
        );
        worst_kp = worst_kp.max(rel_error(&keypoint_loss(&gt, &pred)?.grad, &fd));
    }
    record("cross-ratio", worst_cr);
    record("keypoint", worst_kp);

    let pts: Vec<Point3> = (0..50)
        .map(|_| {
            Point3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            )
        })
        .collect();
    let (mut worst_rot, mut worst_sym, mut worst_pose) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let gt = random_pose(&mut rng);
        let pred = random_pose(&mut rng);
        let mut x = pred.rotation.to_row_major().to_vec();
        x.extend(pred.translation.iter());
        // Piecewise linear in the prediction; evaluated with an unconstrained matrix.
        let as_rot =
            |x: &[f64]| RotationMatrix::from_matrix_unchecked(Matrix3::from_row_slice(&x[..9]));
        for symmetric in [false, true] {
            let f = |x: &[f64]| {
                rotation_loss(
                    &gt.rotation,
                    &as_rot(x),
                    &pts,
                    symmetric,
                    ClosestPointSearch::BruteForce,
                )
                .unwrap()
                .value
            };
            let l = rotation_loss(
                &gt.rotation,
                &pred.rotation,
                &pts,
                symmetric,
                ClosestPointSearch::BruteForce,
            )?;
            let e = rel_error(&l.grad, &central_difference(f, &x[..9], 1e-8));
            if symmetric {
                worst_sym = worst_sym.max(e);
            } else {
                worst_rot = worst_rot.max(e);
            }
        }
        let f = |x: &[f64]| {
            pose_loss(
                &gt,
                &Pose::new(as_rot(x), Vector3::new(x[9], x[10], x[11])),
                &pts,
                true,
            )
            .unwrap()
            .value
        };
        worst_pose = worst_pose.max(rel_error(
            &pose_loss(&gt, &pred, &pts, true)?.grad,
            &central_difference(f, &x, 1e-8),
        ));
    }
    record("rotation (point-to-point)", worst_rot);
    record("rotation (symmetric)", worst_sym);
    record("pose", worst_pose);

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let r = Rot6D(std::array::from_fn(|_| rng.random_range(-1.0..1.0)));
        let w = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let f = |x: &[f64]| {
            let m = rot_from_6d(&Rot6D(std::array::from_fn(|k| x[k]))).unwrap();
            m.matrix().component_mul(&w).sum()
        };
        let analytic = rot_from_6d_backward(&r, &w)?;
        worst = worst.max(rel_error(&analytic, &central_difference(f, &r.0, 1e-6)));
    }
    record("6D decode", worst);

    let mut worst = 0.0f64;
    let mut points = 0;
    while points < 100 {
        let depth = rng.random_range(1..4);
        let mut sizes = vec![rng.random_range(1..6)];
        for _ in 0..depth {
            sizes.push(rng.random_range(1..8));
        }
        let mut p = MlpParams::new(&sizes, &mut rng)?;
        for layer in p.layers_mut() {
            layer.bias.apply(|b| *b = rng.random_range(-0.5..0.5));
        }
        let batch = rng.random_range(1..4);
        let x = DMatrix::from_fn(sizes[0], batch, |_, _| rng.random_range(-1.0..1.0));
        // Central differences are meaningless across a ReLU kink.
        if distance_to_kink(&p, &x) < 1e-4 {
            continue;
        }
        points += 1;
        let w = DMatrix::from_fn(*sizes.last().unwrap(), batch, |_, _| {
            rng.random_range(-1.0..1.0)
        });
        let eval = |p: &MlpParams, x: &DMatrix<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            mlp_forward(p, x, DropoutMode::Eval, &mut r)
                .unwrap()
                .0
                .component_mul(&w)
                .sum()
        };
        let (_, cache) = mlp_forward(&p, &x, DropoutMode::Eval, &mut rng)?;
        let (grads, gx) = mlp_backward(&p, &cache, &w)?;
        let h = 1e-6;
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for k in 0..p.layers().len() {
            for idx in 0..p.layers()[k].weight.len() + p.layers()[k].bias.len() {
                let n_w = p.layers()[k].weight.len();
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    let layer = &mut q.layers_mut()[k];
                    if idx < n_w {
                        layer.weight[idx] += delta;
                    } else {
                        layer.bias[idx - n_w] += delta;
                    }
                    eval(&q, &x)
                };
                numeric.push((bump(h) - bump(-h)) / (2.0 * h));
                analytic.push(if idx < n_w {
                    grads.layers[k].weight[idx]
                } else {
                    grads.layers[k].bias[idx - n_w]
                });
            }
        }
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            numeric.push((eval(&p, &xp) - eval(&p, &xm)) / (2.0 * h));
            analytic.push(gx[idx]);
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    record("MLP", worst);
    Ok(out)
}

fn criterion_gradients(catalog: &Catalog) -> Verdict {
    match grad_checks(catalog) {
        Ok(checks) => {
            let failing: Vec<&str> = checks
                .iter()
                .filter(|c| c.worst.is_nan() || c.worst >= 1e-4)
                .map(|c| c.name)
                .collect();
            let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
            let detail = format!(
                "{} checks x {} points, worst relative error {worst:.2e}{}",
                checks.len(),
                checks[0].points,
                if failing.is_empty() {
                    String::new()
                } else {
                    format!(", failing: {}", failing.join(", "))
                }
            );
            Verdict::new(failing.is_empty(), detail)
        }
        Err(e) => Verdict::error(e),
    }
}

// 7. Metric identities.

fn criterion_metrics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..40);
        let pts: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                )
            })
            .collect();
        let rec = EvalRecord::new(
            0,
            random_pose(&mut rng),
            random_pose(&mut rng),
            &pts,
            0.3,
            false,
        )
        .unwrap();
        if adds_metric(&rec) > add_metric(&rec) {
            violations += 1;
        }
    }
    let half = auc(&[0.05], 0.1).unwrap();
    let pts: Vec<Point3> = (0..100)
        .map(|_| {
            Point3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            )
        })
        .collect();
    let gt = random_pose(&mut rng);
    let identity_add = add_metric(&EvalRecord::new(0, gt, gt, &pts, 0.3, false).unwrap());
    // A ring of points symmetric under a one-step turn about the model z-axis.
    let steps = 360;
    let ring: Vec<Point3> = (0..steps)
        .map(|k| {
            let a = k as f64 * std::f64::consts::TAU / steps as f64;
            Point3::new(0.1 * a.cos(), 0.1 * a.sin(), 0.02)
        })
        .collect();
    let turn = RotationMatrix::from_axis_angle(&Vector3::z(), std::f64::consts::TAU / steps as f64);
    let turned = Pose::new(gt.rotation.compose(&turn), gt.translation);
    let rec = EvalRecord::new(0, gt, turned, &ring, 0.2, true).unwrap();
    let (sym_adds, sym_add) = (adds_metric(&rec), add_metric(&rec));
    Verdict::new(
        violations == 0 && half == 0.5 && identity_add == 0.0 && sym_adds < 1e-9 && sym_add > 0.0,
        format!(
            "{violations} of 10^4 records with ADD-S > ADD, auc({{0.05}}, 0.1) = {half}, identity ADD = {identity_add}, \
             symmetric ADD-S = {sym_adds:.1e} with ADD = {sym_add:.1e}"
        ),
    )
}

// 8. Symmetric versus point-to-point rotation loss.

fn criterion_sloss() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = 0;
    let mut same_index = 0;
    let mut unequal = 0;
    for trial in 0..10_000 {
        let n = if trial % 2 == 0 {
            50
        } else {
            rng.random_range(1..60)
        };
        let pts: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                    rng.random_range(-0.1..0.1),
                )
            })
            .collect();
        let gt = RotationMatrix::random(&mut rng);
        // Half the trials perturb the truth slightly so the nearest point is often the same index.
        let pred = if trial % 4 == 0 {
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            RotationMatrix::from_axis_angle(&axis.normalize(), rng.random_range(0.0..0.05))
                .compose(&gt)
        } else {
            RotationMatrix::random(&mut rng)
        };
        let p = rotation_loss(&gt, &pred, &pts, false, ClosestPointSearch::BruteForce)
            .unwrap()
            .value;
        let s = rotation_loss(&gt, &pred, &pts, true, ClosestPointSearch::BruteForce)
            .unwrap()
            .value;
        if s > p {
            violations += 1;
        }
        if n == 50 {
            // Brute-force ℓ1 nearest neighbours of every ground-truth point.
            let g: Vec<Vector3<f64>> = pts.iter().map(|x| gt.matrix() * x.coords).collect();
            let q: Vec<Vector3<f64>> = pts.iter().map(|x| pred.matrix() * x.coords).collect();
            let own_index = g.iter().enumerate().all(|(i, a)| {
                let own = (a - q[i]).abs().sum();
                q.iter().all(|b| (a - b).abs().sum() >= own)
            });
            if own_index {
                same_index += 1;
                if s != p {
                    unequal += 1;
                }
            }
        }
    }
    Verdict::new(
        violations == 0 && unequal == 0 && same_index > 0,
        format!(
            "{violations} of 10^4 trials with SLoss > PLoss; {same_index} 50-point sets with the minimum at the same index, \
             {unequal} unequal"
        ),
    )
}

// 9. Attention invariants.

fn permute_rows(m: &DMatrix<f64>, perm: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], j)])
}

fn criterion_attention() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 256;
    let heads = [1, 2, 4, 8];
    let params: Vec<MultiHeadParams> = heads
        .iter()
        .map(|&h| MultiHeadParams::random(d, h, &mut rng).unwrap())
        .collect();
    let (mut worst_row, mut kv_breaks, mut q_breaks) = (0.0f64, 0, 0);
    for shape in 0..100 {
        let h_idx = shape % heads.len();
        let (nq, nk) = (rng.random_range(1..12), rng.random_range(1..12));
        let tokens = |n: usize, rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
        };
        let xq = tokens(nq, &mut rng);
        let xkv = tokens(nk, &mut rng);
        let w = attention_weights(&xq, &xkv, d, heads[h_idx]).unwrap();
        for row in w.row_iter() {
            worst_row = worst_row.max((row.sum() - 1.0).abs());
        }
        let base = multi_head_attention(&xq, &xkv, &params[h_idx]).unwrap();
        let mut perm: Vec<usize> = (0..nk).collect();
        perm.shuffle(&mut rng);
        if multi_head_attention(&xq, &permute_rows(&xkv, &perm), &params[h_idx]).unwrap() != base {
            kv_breaks += 1;
        }
        let mut perm: Vec<usize> = (0..nq).collect();
        perm.shuffle(&mut rng);
        if multi_head_attention(&permute_rows(&xq, &perm), &xkv, &params[h_idx]).unwrap()
            != permute_rows(&base, &perm)
        {
            q_breaks += 1;
        }
    }
    Verdict::new(
        worst_row < 1e-9 && kv_breaks == 0 && q_breaks == 0,
        format!(
            "100 shapes, d = 256, h in {{1,2,4,8}}: max |row sum - 1| = {worst_row:.1e}, \
             {kv_breaks} key/value permutations changed the output, {q_breaks} query permutations not equivariant"
        ),
    )
}

// 5, 6 and 11 share a trained model.

/// Training settings for the full-size run.
fn acceptance_training() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        layout: InputLayout::KeypointsAndClassProbs,
        ..TrainConfig::default()
    }
}

/// RANSAC-based EPnP with the default settings, as in the reference comparison.
const ACCEPTANCE_SOLVER: Solver = Solver::RansacEpnp;

struct Trained {
    data: PathBuf,
    checkpoint: PathBuf,
}

fn criterion_training(root: &Path) -> (Trained, Verdict) {
    let data = root.join("data");
    let model_dir = root.join("model");
    let checkpoint = model_dir.join(train::CHECKPOINT_FILE);
    let gen = GenDataConfig {
        train_scenes: 10_000,
        val_scenes: 1_000,
        ..GenDataConfig::default()
    };
    let verdict = (|| {
        gen_data::run(&gen, &data, &QUIET).map_err(|e| format!("gen-data: {e}"))?;
        let cfg = TrainCommandConfig {
            dataset: data.clone(),
            training: acceptance_training(),
            ..TrainCommandConfig::default()
        };
        let start = Instant::now();
        let (_, curve) = train::run(&cfg, &model_dir, &QUIET).map_err(|e| format!("train: {e}"))?;
        let elapsed = start.elapsed();
        let last = curve.last().ok_or("empty training curve")?;
        Ok::<_, String>(Verdict::new(
            last.val_rotation_error_deg < 10.0
                && last.val_translation_error_m < 0.02
                && elapsed < Duration::from_secs(30 * 60),
            format!(
                "10k/1k scenes, {} epochs: val rotation {:.2} deg, translation {:.2} cm, {}",
                curve.epochs.len(),
                last.val_rotation_error_deg,
                100.0 * last.val_translation_error_m,
                secs(elapsed)
            ),
        ))
    })()
    .unwrap_or_else(Verdict::error);
    (Trained { data, checkpoint }, verdict)
}

fn criterion_robustness(trained: &Trained, out: &Path) -> Verdict {
    let cfg = CompareConfig {
        dataset: trained.data.clone(),
        checkpoint: trained.checkpoint.clone(),
        solver: ACCEPTANCE_SOLVER,
        ..CompareConfig::default()
    };
    let report = match compare::run(&cfg, out, &QUIET) {
        Ok(r) => r,
        Err(e) => return Verdict::error(e),
    };
    let mut high_ok = true;
    let mut high = Vec::new();
    for b in report.bins.iter().filter(|b| b.bin_lo >= 8.0) {
        if let (Some(e), Some(r)) = (b.auc_add_epnp, b.auc_add_rotest) {
            high_ok &= r > e;
            high.push(format!("[{},{}) {:.3}/{:.3}", b.bin_lo, b.bin_hi, e, r));
        }
    }
    let low = report.bins.iter().find(|b| b.bin_lo == 0.0);
    let (low_ok, low_text) = match low.and_then(|b| b.auc_add_epnp.zip(b.auc_add_rotest)) {
        Some((e, r)) => (
            (e - r).abs() <= 0.02,
            format!("[0,2) EPnP {e:.4} vs RotEst {r:.4}"),
        ),
        None => (false, "[0,2) bin empty".to_string()),
    };
    Verdict::new(
        low_ok && high_ok && !high.is_empty(),
        format!("{low_text}; bins >= 8 px EPnP/RotEst: {}", high.join(", ")),
    )
}

fn criterion_ablation(trained: &Trained, out: &Path) -> Verdict {
    let cfg = AblateConfig {
        dataset: trained.data.clone(),
        checkpoint: trained.checkpoint.clone(),
        sigma: 8.0,
        solver: ACCEPTANCE_SOLVER,
        ..AblateConfig::default()
    };
    let report = match ablate::run(&cfg, out, &QUIET) {
        Ok(r) => r,
        Err(e) => return Verdict::error(e),
    };
    let auc_of = |name| {
        report
            .row(name)
            .and_then(|r| r.metrics.auc_add)
            .unwrap_or(f64::NAN)
    };
    let (fps, ibb, mixed, heads) = (
        auc_of(ablate::FPS_EPNP),
        auc_of(ablate::IBB_EPNP),
        auc_of(ablate::IBB_EPNP_HEAD_T),
        auc_of(ablate::IBB_HEADS),
    );
    Verdict::new(
        heads >= ibb && ibb >= fps,
        format!(
            "AUC of ADD at 8 px: FPS + EPnP {fps:.3}, IBB + EPnP {ibb:.3}, IBB + EPnP for R; head for t {mixed:.3}, \
             IBB + heads {heads:.3}"
        ),
    )
}

// 10. Determinism.

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn determinism_run(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let data = root.join("data");
    let model = root.join("model");
    let cmp = root.join("compare");
    let gen = GenDataConfig {
        seed: 11,
        train_scenes: 40,
        val_scenes: 10,
        noise_sigma: 1.0,
        ..GenDataConfig::default()
    };
    gen_data::run(&gen, &data, &QUIET).map_err(|e| e.to_string())?;
    let cfg = TrainCommandConfig {
        seed: 11,
        dataset: data.clone(),
        training: TrainConfig {
            rotation_layers: 2,
            rotation_hidden: 32,
            translation_layers: 2,
            translation_hidden: 32,
            epochs: 3,
            max_noise: 4.0,
            loss_points: 30,
            layout: InputLayout::KeypointsAndClassProbs,
            ..TrainConfig::default()
        },
        ..TrainCommandConfig::default()
    };
    train::run(&cfg, &model, &QUIET).map_err(|e| e.to_string())?;
    let cmp_cfg = CompareConfig {
        seed: 11,
        dataset: data,
        checkpoint: model.join(train::CHECKPOINT_FILE),
        noise_levels: vec![0.0, 2.0, 6.0],
        outlier_fraction: 0.1,
        ..CompareConfig::default()
    };
    compare::run(&cmp_cfg, &cmp, &QUIET).map_err(|e| e.to_string())?;
    Ok(read_tree(root))
}

fn criterion_determinism(root: &Path) -> Verdict {
    // Paths are part of the config and its hash, so both runs use the same root.
    let twice = || {
        let a = determinism_run(root)?;
        std::fs::remove_dir_all(root).map_err(|e| e.to_string())?;
        let b = determinism_run(root)?;
        Ok::<_, String>((a, b))
    };
    let (a, b) = match twice() {
        Ok(pair) => pair,
        Err(e) => return Verdict::error(e),
    };
    let differing: Vec<String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_files = a.keys().eq(b.keys());
    Verdict::new(
        same_files && differing.is_empty() && !a.is_empty(),
        format!(
            "gen-data, train and compare-solvers run twice: {} files, {} differ{}",
            a.len(),
            differing.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(" ({})", differing.join(", "))
            }
        ),
    )
}

/// Criterion numbers given on the command line select a subset; none runs all.
fn selected() -> Vec<u32> {
    let picked: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    if picked.is_empty() {
        (1..=11).collect()
    } else {
        picked
    }
}

fn main() -> ExitCode {
    let catalog = Catalog::procedural().expect("procedural catalog");
    let tmp = tempfile::tempdir().expect("temporary directory");
    let only = selected();
    let wants = |id: u32| only.contains(&id);
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |id: u32, name: &'static str, v: Verdict| {
        println!(
            "[{}] {id:>2}. {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        results.push((id, name, v));
    };

    if wants(1) {
        report(1, "matching optimality", criterion_matching());
    }
    if wants(2) {
        report(2, "cross-ratio invariant", criterion_cross_ratio(&catalog));
    }
    if wants(3) {
        report(3, "EPnP exactness", criterion_epnp(&catalog));
    }
    if wants(4) {
        report(4, "gradient fidelity", criterion_gradients(&catalog));
    }
    // 6 and 11 evaluate the model trained by 5.
    if wants(5) || wants(6) || wants(11) {
        let (trained, verdict) = criterion_training(&tmp.path().join("full"));
        report(5, "RotEst desk-scale training", verdict);
        if wants(6) {
            report(
                6,
                "robustness trend",
                criterion_robustness(&trained, &tmp.path().join("compare")),
            );
        }
        if wants(11) {
            report(
                11,
                "ablation ordering",
                criterion_ablation(&trained, &tmp.path().join("ablate")),
            );
        }
    }
    if wants(7) {
        report(7, "metric identities", criterion_metrics());
    }
    if wants(8) {
        report(8, "symmetric loss bound", criterion_sloss());
    }
    if wants(9) {
        report(9, "attention invariants", criterion_attention());
    }
    if wants(10) {
        report(
            10,
            "determinism",
            criterion_determinism(&tmp.path().join("determinism")),
        );
    }

    let failed = results.iter().filter(|(_, _, v)| !v.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
