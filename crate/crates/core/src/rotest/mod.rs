//! RotEst: a feed-forward rotation head over 2D keypoints, a decoupled
//! translation head, and the training loop that fits both.

mod mlp;
mod model;
mod train;

pub use mlp::{
    mlp_backward, mlp_forward, AdamW, DropoutMode, ForwardCache, Layer, MlpGradients, MlpParams,
};
pub use model::{
    Checkpoint, FeatureEncoder, InputLayout, InputNormalization, RotEst, TranslationPrediction,
    CHECKPOINT_FORMAT, CHECKPOINT_VERSION, MIN_PREDICTED_DEPTH,
};
pub use train::{
    evaluate_model, train_rotest, EpochRecord, ObjectModel, TrainingCurve, TrainingSample,
    TrainingSet,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of affine layers in the rotation head.
    pub rotation_layers: usize,
    pub rotation_hidden: usize,
    pub translation_layers: usize,
    pub translation_hidden: usize,
    pub learning_rate: f64,
    /// Learning rate reached at the last epoch by cosine decay.
    pub final_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    /// Global gradient-norm bound applied to each head.
    pub max_grad_norm: f64,
    /// Upper end of the per-sample keypoint noise sigma (pixels) drawn during training.
    pub max_noise: f64,
    /// Model points per class used by the rotation loss.
    pub loss_points: usize,
    pub layout: InputLayout,
    pub normalization: InputNormalization,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            rotation_layers: 6,
            rotation_hidden: 256,
            translation_layers: 3,
            translation_hidden: 256,
            learning_rate: 1e-3,
            final_learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-4,
            batch_size: 64,
            epochs: 60,
            dropout: 0.0,
            max_grad_norm: 0.1,
            max_noise: 0.0,
            loss_points: 100,
            layout: InputLayout::Keypoints,
            normalization: InputNormalization::KeypointFrame,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("final_learning_rate", self.final_learning_rate),
            ("epsilon", self.epsilon),
            ("max_grad_norm", self.max_grad_norm),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(name, "must lie in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.max_noise >= 0.0) {
            return Err(Error::invalid(
                "weight_decay",
                "weight decay and noise must be non-negative",
            ));
        }
        for (name, v) in [
            ("rotation_layers", self.rotation_layers),
            ("rotation_hidden", self.rotation_hidden),
            ("translation_layers", self.translation_layers),
            ("translation_hidden", self.translation_hidden),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("loss_points", self.loss_points),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub(crate) fn layer_sizes(
        input: usize,
        layers: usize,
        hidden: usize,
        output: usize,
    ) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(hidden, layers - 1));
        sizes.push(output);
        sizes
    }
}
