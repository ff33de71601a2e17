//! Minibatch training of both heads.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mlp::{mlp_backward, mlp_forward, AdamW, DropoutMode, MlpParams};
use super::model::{decode_translation, eval_rng, FeatureEncoder, RotEst, SampleFrame};
use super::{InputLayout, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    rot_from_6d, rot_from_6d_backward, CameraIntrinsics, Point2, Point3, Rot6D, RotationMatrix,
};
use crate::keypoints::{fps_indices, NUM_IBB_KEYPOINTS};
use crate::losses::{rotation_loss, ClosestPointSearch};
use crate::metrics::rotation_error;

/// One annotated object instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub keypoints: [Point2; NUM_IBB_KEYPOINTS],
    pub class_id: usize,
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
}

/// Loss points and symmetry flag of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub points: Vec<Point3>,
    pub symmetric: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub train: &'a [TrainingSample],
    pub val: &'a [TrainingSample],
    /// Indexed by class id.
    pub objects: &'a [ObjectModel],
    pub camera: CameraIntrinsics,
    pub image_size: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean rotation error in degrees (about the symmetry axis for symmetric classes).
    pub val_rotation_error_deg: f64,
    /// Mean Euclidean translation error in meters.
    pub val_translation_error_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingCurve {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,train_loss,val_loss,val_rotation_error_deg,val_translation_error_m\n",
        );
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                e.val_loss,
                e.val_rotation_error_deg,
                e.val_translation_error_m
            ));
        }
        out
    }
}

fn one_hot(class_id: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class_id] = 1.0;
    v
}

fn class_input(enc: &FeatureEncoder, class_id: usize) -> Option<Vec<f64>> {
    (enc.layout == InputLayout::KeypointsAndClassProbs).then(|| one_hot(class_id, enc.num_classes))
}

/// Fits the per-feature and depth standardization on clean training keypoints.
fn fit_encoder(data: &TrainingSet, cfg: &TrainConfig) -> Result<FeatureEncoder> {
    let mut enc = FeatureEncoder::new(
        cfg.layout,
        cfg.normalization,
        data.camera,
        data.image_size,
        data.objects.len(),
    )?;
    let dim = enc.feature_dim();
    let n = data.train.len() as f64;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let (mut dsum, mut dsq) = (0.0, 0.0);
    for s in data.train {
        let extras = class_input(&enc, s.class_id);
        let frame = enc.raw_frame(&s.keypoints, extras.as_deref())?;
        for (k, f) in frame.features.iter().enumerate() {
            sum[k] += f;
            sq[k] += f * f;
        }
        let d = enc.depth_code(&s.keypoints, s.translation.z);
        dsum += d;
        dsq += d * d;
    }
    let std = |s: f64, q: f64| {
        let var = (q / n - (s / n).powi(2)).max(0.0);
        if var.sqrt() > 1e-8 {
            var.sqrt()
        } else {
            1.0
        }
    };
    enc.feature_mean = sum.iter().map(|s| s / n).collect();
    enc.feature_std = sum.iter().zip(&sq).map(|(s, q)| std(*s, *q)).collect();
    enc.depth_mean = dsum / n;
    enc.depth_std = std(dsum, dsq);
    Ok(enc)
}

struct BatchLoss {
    total: f64,
    rotation_grad: DMatrix<f64>,
    translation_grad: DMatrix<f64>,
}

/// Per-sample losses and output gradients (already divided by the batch size).
fn batch_losses(
    enc: &FeatureEncoder,
    data: &TrainingSet,
    samples: &[&TrainingSample],
    frames: &[SampleFrame],
    rot_out: &DMatrix<f64>,
    trans_out: &DMatrix<f64>,
) -> Result<(Vec<(f64, f64)>, BatchLoss)> {
    let b = samples.len();
    let mut rotation_grad = DMatrix::zeros(6, b);
    let mut translation_grad = DMatrix::zeros(3, b);
    let mut per_sample = Vec::with_capacity(b);
    let mut total = 0.0;
    for (c, (s, frame)) in samples.iter().zip(frames).enumerate() {
        let obj = &data.objects[s.class_id];
        let r6 = Rot6D(std::array::from_fn(|k| rot_out[(k, c)]));
        let virt = rot_from_6d(&r6)?;
        let pred = RotationMatrix::from_matrix_unchecked(frame.view.transpose() * virt.matrix());
        let rl = rotation_loss(
            &s.rotation,
            &pred,
            &obj.points,
            obj.symmetric,
            ClosestPointSearch::BruteForce,
        )?;
        let g_pred = Matrix3::from_row_slice(&rl.grad);
        let g_virt = frame.view * g_pred;
        let g6 = rot_from_6d_backward(&r6, &g_virt)?;
        for k in 0..6 {
            rotation_grad[(k, c)] = g6[k] / b as f64;
        }

        let out = [trans_out[(0, c)], trans_out[(1, c)], trans_out[(2, c)]];
        let tp = decode_translation(frame, &out, &enc.camera);
        let diff = tp.translation - s.translation;
        let tl = diff.abs().sum();
        let sign = diff.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        // t = ((cx − px) tz / fx, (cy − py) tz / fy, tz) with cx, cy, tz affine in the outputs.
        let cam = &enc.camera;
        let tz = tp.translation.z;
        let cx = frame.translation_offset[0] + frame.translation_scale[0] * out[0];
        let cy = frame.translation_offset[1] + frame.translation_scale[1] * out[1];
        let d_cx = sign.x * tz / cam.fx;
        let d_cy = sign.y * tz / cam.fy;
        let d_tz = if tp.depth_clamped {
            0.0
        } else {
            sign.x * (cx - cam.px) / cam.fx + sign.y * (cy - cam.py) / cam.fy + sign.z
        };
        translation_grad[(0, c)] = d_cx * frame.translation_scale[0] / b as f64;
        translation_grad[(1, c)] = d_cy * frame.translation_scale[1] / b as f64;
        translation_grad[(2, c)] = d_tz * frame.translation_scale[2] / b as f64;

        per_sample.push((rl.value, tl));
        total += rl.value + tl;
    }
    Ok((
        per_sample,
        BatchLoss {
            total,
            rotation_grad,
            translation_grad,
        },
    ))
}

fn feature_matrix(frames: &[SampleFrame]) -> DMatrix<f64> {
    let dim = frames[0].features.len();
    DMatrix::from_fn(dim, frames.len(), |r, c| frames[c].features[r])
}

fn perturb<R: Rng>(
    kps: &[Point2; NUM_IBB_KEYPOINTS],
    max_noise: f64,
    rng: &mut R,
) -> [Point2; NUM_IBB_KEYPOINTS] {
    if max_noise <= 0.0 {
        return *kps;
    }
    let sigma = rng.random_range(0.0..max_noise);
    if sigma <= 0.0 {
        return *kps;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    kps.map(|p| Point2::new(p.x + normal.sample(rng), p.y + normal.sample(rng)))
}

fn cosine_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.learning_rate;
    }
    let progress = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.final_learning_rate
        + 0.5
            * (cfg.learning_rate - cfg.final_learning_rate)
            * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct Evaluation {
    loss: f64,
    rotation_error_deg: f64,
    translation_error_m: f64,
}

fn evaluate(
    model: &RotEst,
    data: &TrainingSet,
    samples: &[TrainingSample],
    batch: usize,
) -> Result<Evaluation> {
    let enc = &model.encoder;
    let mut loss = 0.0;
    let mut rot_err = 0.0;
    let mut trans_err = 0.0;
    let mut rng = eval_rng();
    for chunk in samples.chunks(batch.max(1)) {
        let frames = chunk
            .iter()
            .map(|s| enc.encode(&s.keypoints, class_input(enc, s.class_id).as_deref()))
            .collect::<Result<Vec<_>>>()?;
        let x = feature_matrix(&frames);
        let (ro, _) = mlp_forward(&model.rotation_net, &x, DropoutMode::Eval, &mut rng)?;
        let (to, _) = mlp_forward(&model.translation_net, &x, DropoutMode::Eval, &mut rng)?;
        let refs: Vec<&TrainingSample> = chunk.iter().collect();
        let (per_sample, _) = batch_losses(enc, data, &refs, &frames, &ro, &to)?;
        for (c, (s, frame)) in chunk.iter().zip(&frames).enumerate() {
            let (rl, tl) = per_sample[c];
            loss += rl + tl;
            let r6 = Rot6D(std::array::from_fn(|k| ro[(k, c)]));
            let pred = RotationMatrix::from_matrix_unchecked(
                frame.view.transpose() * rot_from_6d(&r6)?.matrix(),
            );
            rot_err +=
                rotation_error(&s.rotation, &pred, data.objects[s.class_id].symmetric).to_degrees();
            let tp = decode_translation(frame, &[to[(0, c)], to[(1, c)], to[(2, c)]], &enc.camera);
            trans_err += (tp.translation - s.translation).norm();
        }
    }
    let n = samples.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        rotation_error_deg: rot_err / n,
        translation_error_m: trans_err / n,
    })
}

fn check_data(data: &TrainingSet) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::invalid("train", "training set is empty"));
    }
    if data.objects.is_empty() {
        return Err(Error::invalid("objects", "no object models"));
    }
    for s in data.train.iter().chain(data.val) {
        let obj = data.objects.get(s.class_id).ok_or(Error::invalid(
            "class_id",
            format!("unknown class {}", s.class_id),
        ))?;
        if obj.points.is_empty() {
            return Err(Error::EmptyModel);
        }
    }
    Ok(())
}

/// Trains the rotation and translation heads.
///
/// The rotation head is supervised with the point-matching loss (closest-point
/// form for symmetric classes), the translation head with the ℓ1 distance of
/// the recovered translation. Validation uses clean keypoints. Training is
/// single-threaded and bit-reproducible for a given configuration.
pub fn train_rotest(data: &TrainingSet, cfg: &TrainConfig) -> Result<(RotEst, TrainingCurve)> {
    cfg.validate()?;
    check_data(data)?;
    let reduced = data
        .objects
        .iter()
        .map(|o| {
            let k = cfg.loss_points.min(o.points.len());
            let idx = fps_indices(&o.points, k, 0)?;
            Ok(ObjectModel {
                points: idx.iter().map(|&i| o.points[i]).collect(),
                symmetric: o.symmetric,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let data = &TrainingSet {
        objects: &reduced,
        ..*data
    };
    let enc = fit_encoder(data, cfg)?;
    let dim = enc.feature_dim();

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rotation_net = MlpParams::new(
        &TrainConfig::layer_sizes(dim, cfg.rotation_layers, cfg.rotation_hidden, 6),
        &mut init_rng,
    )?;
    // Start the rotation head near the identity in the virtual camera.
    {
        let last = rotation_net
            .layers_mut()
            .last_mut()
            .expect("at least one layer");
        last.weight *= 0.1;
        last.bias.copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }
    let mut translation_net = MlpParams::new(
        &TrainConfig::layer_sizes(dim, cfg.translation_layers, cfg.translation_hidden, 3),
        &mut init_rng,
    )?;
    translation_net
        .layers_mut()
        .last_mut()
        .expect("at least one layer")
        .weight *= 0.1;

    let opt = |p: &MlpParams| {
        AdamW::new(
            p,
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
            cfg.epsilon,
            cfg.weight_decay,
        )
    };
    let mut rot_opt = opt(&rotation_net);
    let mut trans_opt = opt(&translation_net);

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(2);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(3);
    let mode = if cfg.dropout > 0.0 {
        DropoutMode::Train { p: cfg.dropout }
    } else {
        DropoutMode::Eval
    };

    let mut model = RotEst::new(enc, rotation_net, translation_net)?;
    let mut curve = TrainingCurve::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cosine_rate(cfg, epoch);
        rot_opt.learning_rate = lr;
        trans_opt.learning_rate = lr;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&TrainingSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let frames = samples
                .iter()
                .map(|s| {
                    let kps = perturb(&s.keypoints, cfg.max_noise, &mut noise_rng);
                    model
                        .encoder
                        .encode(&kps, class_input(&model.encoder, s.class_id).as_deref())
                })
                .collect::<Result<Vec<_>>>()?;
            let x = feature_matrix(&frames);
            let (ro, rcache) = mlp_forward(&model.rotation_net, &x, mode, &mut dropout_rng)?;
            let (to, tcache) = mlp_forward(&model.translation_net, &x, mode, &mut dropout_rng)?;
            let (_, losses) = batch_losses(&model.encoder, data, &samples, &frames, &ro, &to)?;
            epoch_loss += losses.total;

            let (mut rg, _) = mlp_backward(&model.rotation_net, &rcache, &losses.rotation_grad)?;
            let (mut tg, _) =
                mlp_backward(&model.translation_net, &tcache, &losses.translation_grad)?;
            rg.clip_norm(cfg.max_grad_norm);
            tg.clip_norm(cfg.max_grad_norm);
            rot_opt.step(&mut model.rotation_net, &rg);
            trans_opt.step(&mut model.translation_net, &tg);
        }
        let val = if data.val.is_empty() {
            Evaluation {
                loss: f64::NAN,
                rotation_error_deg: f64::NAN,
                translation_error_m: f64::NAN,
            }
        } else {
            evaluate(&model, data, data.val, 256)?
        };
        curve.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / data.train.len() as f64,
            val_loss: val.loss,
            val_rotation_error_deg: val.rotation_error_deg,
            val_translation_error_m: val.translation_error_m,
        });
        let diverged = !epoch_loss.is_finite() || (!data.val.is_empty() && !val.loss.is_finite());
        if diverged {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                curve,
            });
        }
    }
    Ok((model, curve))
}

/// Mean rotation and translation errors of a trained model on `samples`.
pub fn evaluate_model(
    model: &RotEst,
    data: &TrainingSet,
    samples: &[TrainingSample],
) -> Result<(f64, f64)> {
    let e = evaluate(model, data, samples, 256)?;
    Ok((e.rotation_error_deg, e.translation_error_m))
}
