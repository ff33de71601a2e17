//! Feature encoding, the rotation and translation heads, and checkpoints.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{mlp_forward, DropoutMode, Layer, MlpParams};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::geometry::{
    recover_translation, rot_from_6d, CameraIntrinsics, Point2, Rot6D, RotationMatrix,
};
use crate::keypoints::NUM_IBB_KEYPOINTS;

/// Smallest depth a translation head may report.
pub const MIN_PREDICTED_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputLayout {
    /// 32 keypoints only.
    #[default]
    Keypoints,
    /// 32 keypoints followed by the class probability vector.
    KeypointsAndClassProbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputNormalization {
    /// Pixel coordinates divided by the image size.
    Image,
    /// Keypoints re-expressed in a virtual camera looking at their mean,
    /// centred and scaled; rotations are predicted in that camera.
    #[default]
    KeypointFrame,
}

/// Per-sample reference frame derived from the keypoints alone.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SampleFrame {
    /// Rotation from the real camera into the virtual camera.
    pub view: Matrix3<f64>,
    pub features: Vec<f64>,
    /// Affine decoding of the translation head: `value = offset + scale · output`.
    pub translation_offset: [f64; 3],
    pub translation_scale: [f64; 3],
}

/// Maps keypoints (and optional class probabilities) to network features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureEncoder {
    pub layout: InputLayout,
    pub normalization: InputNormalization,
    pub camera: CameraIntrinsics,
    pub image_size: [f64; 2],
    pub num_classes: usize,
    /// Per-feature standardization fitted on the training set.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Standardization of the depth code.
    pub depth_mean: f64,
    pub depth_std: f64,
}

fn ray(cam: &CameraIntrinsics, p: &Point2) -> Vector3<f64> {
    Vector3::new((p.x - cam.px) / cam.fx, (p.y - cam.py) / cam.fy, 1.0)
}

/// Smallest rotation taking direction `d` onto the optical axis.
fn look_at_rotation(d: &Vector3<f64>) -> Matrix3<f64> {
    let d = d.normalize();
    let z = Vector3::z();
    let axis = d.cross(&z);
    let s = axis.norm();
    let c = d.dot(&z);
    if s < 1e-15 {
        return Matrix3::identity();
    }
    *RotationMatrix::from_axis_angle(&(axis / s), s.atan2(c)).matrix()
}

impl FeatureEncoder {
    /// Encoder with identity standardization.
    pub fn new(
        layout: InputLayout,
        normalization: InputNormalization,
        camera: CameraIntrinsics,
        image_size: [f64; 2],
        num_classes: usize,
    ) -> Result<Self> {
        camera.validate()?;
        if !(image_size[0] > 0.0 && image_size[1] > 0.0) {
            return Err(Error::invalid("image_size", "must be positive"));
        }
        if layout == InputLayout::KeypointsAndClassProbs && num_classes == 0 {
            return Err(Error::invalid(
                "num_classes",
                "class-probability input needs at least one class",
            ));
        }
        let mut enc = FeatureEncoder {
            layout,
            normalization,
            camera,
            image_size,
            num_classes,
            feature_mean: Vec::new(),
            feature_std: Vec::new(),
            depth_mean: 0.0,
            depth_std: 1.0,
        };
        let dim = enc.feature_dim();
        enc.feature_mean = vec![0.0; dim];
        enc.feature_std = vec![1.0; dim];
        Ok(enc)
    }

    pub fn feature_dim(&self) -> usize {
        let base = match self.normalization {
            InputNormalization::Image => 2 * NUM_IBB_KEYPOINTS,
            InputNormalization::KeypointFrame => 2 * NUM_IBB_KEYPOINTS + 3,
        };
        match self.layout {
            InputLayout::Keypoints => base,
            InputLayout::KeypointsAndClassProbs => base + self.num_classes,
        }
    }

    fn check_extras(&self, class_probs: Option<&[f64]>) -> Result<()> {
        match (self.layout, class_probs) {
            (InputLayout::Keypoints, _) => Ok(()),
            (InputLayout::KeypointsAndClassProbs, Some(p)) if p.len() == self.num_classes => Ok(()),
            (InputLayout::KeypointsAndClassProbs, p) => Err(Error::DimensionMismatch {
                expected: self.num_classes,
                actual: p.map_or(0, <[f64]>::len),
            }),
        }
    }

    /// Unstandardized features plus the frame needed to decode the heads.
    pub(crate) fn raw_frame(
        &self,
        keypoints: &[Point2; NUM_IBB_KEYPOINTS],
        class_probs: Option<&[f64]>,
    ) -> Result<SampleFrame> {
        self.check_extras(class_probs)?;
        if keypoints
            .iter()
            .any(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(Error::DegenerateInput("non-finite keypoint"));
        }
        let cam = &self.camera;
        let mean_px = keypoints
            .iter()
            .fold(Vector3::zeros(), |a, p| a + Vector3::new(p.x, p.y, 0.0))
            / NUM_IBB_KEYPOINTS as f64;
        let spread_px = (keypoints
            .iter()
            .map(|p| (p.x - mean_px.x).powi(2) + (p.y - mean_px.y).powi(2))
            .sum::<f64>()
            / NUM_IBB_KEYPOINTS as f64)
            .sqrt();
        if spread_px < 1e-9 {
            return Err(Error::DegenerateInput("keypoints coincide"));
        }
        let mut features = Vec::with_capacity(self.feature_dim());
        let frame = match self.normalization {
            InputNormalization::Image => {
                for p in keypoints {
                    features.push(p.x / self.image_size[0]);
                    features.push(p.y / self.image_size[1]);
                }
                SampleFrame {
                    view: Matrix3::identity(),
                    features: Vec::new(),
                    translation_offset: [0.0, 0.0, self.depth_mean],
                    translation_scale: [self.image_size[0], self.image_size[1], self.depth_std],
                }
            }
            InputNormalization::KeypointFrame => {
                let view = look_at_rotation(&ray(cam, &Point2::new(mean_px.x, mean_px.y)));
                let virt: Vec<(f64, f64)> = keypoints
                    .iter()
                    .map(|p| {
                        let r = view * ray(cam, p);
                        (r.x / r.z, r.y / r.z)
                    })
                    .collect();
                let n = NUM_IBB_KEYPOINTS as f64;
                let (mx, my) = virt.iter().fold((0.0, 0.0), |a, v| (a.0 + v.0, a.1 + v.1));
                let (mx, my) = (mx / n, my / n);
                let s = (virt
                    .iter()
                    .map(|v| (v.0 - mx).powi(2) + (v.1 - my).powi(2))
                    .sum::<f64>()
                    / n)
                    .sqrt();
                for v in &virt {
                    features.push((v.0 - mx) / s);
                    features.push((v.1 - my) / s);
                }
                features.push(mean_px.x / self.image_size[0]);
                features.push(mean_px.y / self.image_size[1]);
                features.push((spread_px / cam.fx).ln());
                // Centroid relative to the keypoint mean in units of the spread;
                // depth as `tz · spread / f`, a proxy for metric object size.
                let depth_scale = cam.fx / spread_px;
                SampleFrame {
                    view,
                    features: Vec::new(),
                    translation_offset: [mean_px.x, mean_px.y, depth_scale * self.depth_mean],
                    translation_scale: [spread_px, spread_px, depth_scale * self.depth_std],
                }
            }
        };
        if let Some(p) = class_probs.filter(|_| self.layout == InputLayout::KeypointsAndClassProbs)
        {
            features.extend_from_slice(p);
        }
        Ok(SampleFrame { features, ..frame })
    }

    /// Depth code the translation head regresses, before standardization.
    pub(crate) fn depth_code(&self, keypoints: &[Point2; NUM_IBB_KEYPOINTS], tz: f64) -> f64 {
        match self.normalization {
            InputNormalization::Image => tz,
            InputNormalization::KeypointFrame => {
                let n = NUM_IBB_KEYPOINTS as f64;
                let (mx, my) = keypoints
                    .iter()
                    .fold((0.0, 0.0), |a, p| (a.0 + p.x / n, a.1 + p.y / n));
                let spread = (keypoints
                    .iter()
                    .map(|p| (p.x - mx).powi(2) + (p.y - my).powi(2))
                    .sum::<f64>()
                    / n)
                    .sqrt();
                tz * spread / self.camera.fx
            }
        }
    }

    /// Standardized features and the decoding frame.
    pub(crate) fn encode(
        &self,
        keypoints: &[Point2; NUM_IBB_KEYPOINTS],
        class_probs: Option<&[f64]>,
    ) -> Result<SampleFrame> {
        let mut frame = self.raw_frame(keypoints, class_probs)?;
        for ((f, m), s) in frame
            .features
            .iter_mut()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
        {
            *f = (*f - m) / s;
        }
        Ok(frame)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let dim = self.feature_dim();
        if self.feature_mean.len() != dim || self.feature_std.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: self.feature_mean.len().min(self.feature_std.len()),
            });
        }
        if self
            .feature_std
            .iter()
            .chain([&self.depth_std])
            .any(|s| !(*s > 0.0))
        {
            return Err(Error::invalid(
                "feature_std",
                "standard deviations must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationPrediction {
    pub translation: Vector3<f64>,
    /// Set when the head produced a non-positive depth and it was clamped to
    /// [`MIN_PREDICTED_DEPTH`].
    pub depth_clamped: bool,
}

/// Rotation head (6 outputs) and translation head (3 outputs) sharing one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RotEst {
    pub encoder: FeatureEncoder,
    pub rotation_net: MlpParams,
    pub translation_net: MlpParams,
}

pub(crate) fn eval_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl RotEst {
    pub fn new(
        encoder: FeatureEncoder,
        rotation_net: MlpParams,
        translation_net: MlpParams,
    ) -> Result<Self> {
        encoder.validate()?;
        let dim = encoder.feature_dim();
        for (net, out) in [(&rotation_net, 6), (&translation_net, 3)] {
            if net.input_dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: net.input_dim(),
                });
            }
            if net.output_dim() != out {
                return Err(Error::DimensionMismatch {
                    expected: out,
                    actual: net.output_dim(),
                });
            }
        }
        Ok(RotEst {
            encoder,
            rotation_net,
            translation_net,
        })
    }

    fn run(net: &MlpParams, features: &[f64]) -> Result<DVector<f64>> {
        let x = DMatrix::from_column_slice(features.len(), 1, features);
        let (out, _) = mlp_forward(net, &x, DropoutMode::Eval, &mut eval_rng())?;
        Ok(out.column(0).into_owned())
    }

    pub fn predict_rotation(
        &self,
        keypoints: &[Point2; NUM_IBB_KEYPOINTS],
        class_probs: Option<&[f64]>,
    ) -> Result<RotationMatrix> {
        let frame = self.encoder.encode(keypoints, class_probs)?;
        let out = Self::run(&self.rotation_net, &frame.features)?;
        let virt = rot_from_6d(&Rot6D(std::array::from_fn(|k| out[k])))?;
        Ok(RotationMatrix::from_matrix_unchecked(
            frame.view.transpose() * virt.matrix(),
        ))
    }

    pub fn predict_translation(
        &self,
        keypoints: &[Point2; NUM_IBB_KEYPOINTS],
        class_probs: Option<&[f64]>,
    ) -> Result<TranslationPrediction> {
        let frame = self.encoder.encode(keypoints, class_probs)?;
        let out = Self::run(&self.translation_net, &frame.features)?;
        Ok(decode_translation(
            &frame,
            &[out[0], out[1], out[2]],
            &self.encoder.camera,
        ))
    }
}

/// Applies the head's affine decoding and completes `t` from `(cx, cy, tz)`.
pub(crate) fn decode_translation(
    frame: &SampleFrame,
    output: &[f64; 3],
    cam: &CameraIntrinsics,
) -> TranslationPrediction {
    let v: [f64; 3] = std::array::from_fn(|k| {
        frame.translation_offset[k] + frame.translation_scale[k] * output[k]
    });
    let (tz, depth_clamped) = if v[2] > 0.0 && v[2].is_finite() {
        (v[2], false)
    } else {
        (MIN_PREDICTED_DEPTH, true)
    };
    let translation = recover_translation(v[0], v[1], tz, cam).expect("depth is positive");
    TranslationPrediction {
        translation,
        depth_clamped,
    }
}

pub const CHECKPOINT_FORMAT: &str = "setpose-rotest";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs × inputs`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkRecord {
    sizes: Vec<usize>,
    layers: Vec<LayerRecord>,
}

impl NetworkRecord {
    fn from_params(p: &MlpParams) -> Self {
        NetworkRecord {
            sizes: p.sizes(),
            layers: p
                .layers()
                .iter()
                .map(|l| LayerRecord {
                    inputs: l.weight.ncols(),
                    outputs: l.weight.nrows(),
                    weight: l.weight.transpose().as_slice().to_vec(),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    fn to_params(&self) -> Result<MlpParams> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if l.weight.len() != l.inputs * l.outputs {
                    return Err(Error::DimensionMismatch {
                        expected: l.inputs * l.outputs,
                        actual: l.weight.len(),
                    });
                }
                Ok(Layer {
                    weight: DMatrix::from_row_slice(l.outputs, l.inputs, &l.weight),
                    bias: DVector::from_column_slice(&l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = MlpParams::from_layers(layers)?;
        if params.sizes() != self.sizes {
            return Err(Error::invalid(
                "sizes",
                "layer sizes do not match the stored weights",
            ));
        }
        Ok(params)
    }
}

/// On-disk form of a trained [`RotEst`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub encoder: FeatureEncoder,
    rotation: NetworkRecord,
    translation: NetworkRecord,
}

impl Checkpoint {
    pub fn new(model: &RotEst, config: &TrainConfig) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed: config.seed,
            config: config.clone(),
            encoder: model.encoder.clone(),
            rotation: NetworkRecord::from_params(&model.rotation_net),
            translation: NetworkRecord::from_params(&model.translation_net),
        }
    }

    pub fn to_model(&self) -> Result<RotEst> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::invalid(
                "format",
                format!("expected {CHECKPOINT_FORMAT}, found {}", self.format),
            ));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(
                "version",
                format!("unsupported checkpoint version {}", self.version),
            ));
        }
        RotEst::new(
            self.encoder.clone(),
            self.rotation.to_params()?,
            self.translation.to_params()?,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{geodesic_distance, Pose};
    use crate::keypoints::{ibb_keypoints, project_keypoints, BBox3D};
    use rand::Rng;

    fn sample_keypoints(rng: &mut ChaCha8Rng) -> ([Point2; 32], Pose) {
        let pose = Pose::new(
            RotationMatrix::random(rng),
            Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(0.6..1.0),
            ),
        );
        let kps = ibb_keypoints(&BBox3D::new(0.05, 0.03, 0.02).unwrap());
        (
            project_keypoints(&kps, &pose, &CameraIntrinsics::default()).unwrap(),
            pose,
        )
    }

    fn model(layout: InputLayout, norm: InputNormalization, seed: u64) -> RotEst {
        let enc = FeatureEncoder::new(layout, norm, CameraIntrinsics::default(), [640.0, 480.0], 3)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = enc.feature_dim();
        let r = MlpParams::new(&[d, 16, 6], &mut rng).unwrap();
        let t = MlpParams::new(&[d, 16, 3], &mut rng).unwrap();
        RotEst::new(enc, r, t).unwrap()
    }

    #[test]
    fn predictions_are_rotations_for_any_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..20 {
            for norm in [InputNormalization::Image, InputNormalization::KeypointFrame] {
                let m = model(InputLayout::Keypoints, norm, seed);
                let (kps, _) = sample_keypoints(&mut rng);
                let r = m.predict_rotation(&kps, None).unwrap();
                let m3 = r.matrix();
                assert!((m3.transpose() * m3 - Matrix3::identity()).amax() < 1e-9);
                assert!((m3.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn permuting_keypoints_changes_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = model(InputLayout::Keypoints, InputNormalization::KeypointFrame, 3);
        let (kps, _) = sample_keypoints(&mut rng);
        let mut swapped = kps;
        swapped.swap(0, 7);
        swapped.swap(3, 20);
        let a = m.predict_rotation(&kps, None).unwrap();
        let b = m.predict_rotation(&swapped, None).unwrap();
        assert!(geodesic_distance(&a, &b) > 1e-6);
    }

    #[test]
    fn exact_head_output_recovers_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for norm in [InputNormalization::Image, InputNormalization::KeypointFrame] {
            let mut m = model(InputLayout::Keypoints, norm, 4);
            m.encoder.depth_mean = 0.3;
            m.encoder.depth_std = 0.7;
            let (kps, pose) = sample_keypoints(&mut rng);
            let cam = m.encoder.camera;
            let c = cam.project_camera_point(&pose.translation.into()).unwrap();
            let frame = m.encoder.encode(&kps, None).unwrap();
            let target = [c.x, c.y, pose.translation.z];
            let code: [f64; 3] = std::array::from_fn(|k| {
                (target[k] - frame.translation_offset[k]) / frame.translation_scale[k]
            });
            let layers = m.translation_net.layers_mut();
            for l in layers.iter_mut() {
                l.weight.fill(0.0);
            }
            let last = layers.len() - 1;
            layers[last].bias = DVector::from_column_slice(&code);
            let pred = m.predict_translation(&kps, None).unwrap();
            assert!(!pred.depth_clamped);
            assert!((pred.translation - pose.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn negative_depth_is_clamped_and_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = model(InputLayout::Keypoints, InputNormalization::Image, 6);
        for l in m.translation_net.layers_mut() {
            l.weight.fill(0.0);
        }
        let layers = m.translation_net.layers_mut();
        let last = layers.len() - 1;
        layers[last].bias = DVector::from_vec(vec![0.5, 0.5, -4.0]);
        let (kps, _) = sample_keypoints(&mut rng);
        let pred = m.predict_translation(&kps, None).unwrap();
        assert!(pred.depth_clamped);
        assert_eq!(pred.translation.z, MIN_PREDICTED_DEPTH);
    }

    #[test]
    fn class_probability_layout_requires_extras() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = model(
            InputLayout::KeypointsAndClassProbs,
            InputNormalization::KeypointFrame,
            8,
        );
        let (kps, _) = sample_keypoints(&mut rng);
        assert!(m.predict_rotation(&kps, None).is_err());
        assert!(m.predict_rotation(&kps, Some(&[0.2, 0.3])).is_err());
        assert!(m.predict_rotation(&kps, Some(&[0.2, 0.3, 0.5])).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(InputLayout::Keypoints, InputNormalization::KeypointFrame, 9);
        let ck = Checkpoint::new(&m, &TrainConfig::default());
        let back: Checkpoint = serde_json::from_str(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), m);

        let mut bad = ck.clone();
        bad.rotation.sizes[1] += 1;
        assert!(bad.to_model().is_err());
        let mut bad = ck;
        bad.version = 99;
        assert!(bad.to_model().is_err());
    }
}
