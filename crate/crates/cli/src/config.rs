//! One JSON document per command. Unknown keys are rejected and every field
//! has a default, so `{}` is a valid config for each command.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use setpose::geometry::CameraIntrinsics;
use setpose::pnp::RansacConfig;
use setpose::rotest::{InputLayout, TrainConfig};
use setpose::synth::{NoiseSpec, SceneConfig};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub trait ExperimentConfig: Serialize + DeserializeOwned + Default {
    fn seed(&self) -> u64;
    /// Sets the seed, including copies nested in sub-configs.
    fn set_seed(&mut self, seed: u64);
    fn validate(&self) -> CliResult<()>;
}

/// Reads `path` (or the defaults), applies the seed override and validates.
pub fn load_config<T: ExperimentConfig>(path: Option<&Path>, seed: Option<u64>) -> CliResult<T> {
    let mut cfg: T = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => T::default(),
    };
    let seed = seed.unwrap_or(cfg.seed());
    cfg.set_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

/// SHA-256 of the compact JSON form of the effective config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn check(ok: bool, msg: impl Into<String>) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg.into()))
    }
}

fn core(r: setpose::Result<()>) -> CliResult<()> {
    r.map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Pose solver used for the EPnP side of comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Epnp,
    /// RANSAC over minimal samples, falling back to EPnP on all points when no
    /// consensus is found.
    #[default]
    RansacEpnp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    /// Catalog manifest of real meshes; the procedural catalog when absent.
    pub catalog: Option<PathBuf>,
    pub camera: CameraIntrinsics,
    pub image_size: [f64; 2],
    pub objects_per_scene: [usize; 2],
    pub depth_range: [f64; 2],
    pub margin: f64,
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// Noise injected into the stored perturbed keypoints.
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        GenDataConfig {
            seed: 0,
            catalog: None,
            camera: scene.camera,
            image_size: scene.image_size,
            objects_per_scene: scene.objects_per_scene,
            depth_range: scene.depth_range,
            margin: scene.margin,
            train_scenes: 10_000,
            val_scenes: 1_000,
            noise_sigma: 0.0,
            outlier_fraction: 0.0,
        }
    }
}

impl GenDataConfig {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            camera: self.camera,
            image_size: self.image_size,
            objects_per_scene: self.objects_per_scene,
            depth_range: self.depth_range,
            margin: self.margin,
            seed: self.seed,
        }
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            sigma: self.noise_sigma,
            outlier_fraction: self.outlier_fraction,
            outlier_range: self.image_size,
            seed: self.seed,
        }
    }
}

impl ExperimentConfig for GenDataConfig {
    fn seed(&self) -> u64 {
        self.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    fn validate(&self) -> CliResult<()> {
        core(self.scene_config().validate())?;
        core(self.noise_spec().validate())?;
        check(self.train_scenes > 0, "train_scenes must be at least 1")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub seed: u64,
    /// Directory written by `gen-data`.
    pub dataset: PathBuf,
    /// Leading fraction of the training scenes to use.
    pub train_fraction: f64,
    /// `training.seed` is replaced by the top-level seed.
    pub training: TrainConfig,
}

impl Default for TrainCommandConfig {
    fn default() -> Self {
        TrainCommandConfig {
            seed: 0,
            dataset: PathBuf::from("data"),
            train_fraction: 1.0,
            training: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig for TrainCommandConfig {
    fn seed(&self) -> u64 {
        self.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.training.seed = seed;
    }

    fn validate(&self) -> CliResult<()> {
        core(self.training.validate())?;
        check(
            self.train_fraction > 0.0 && self.train_fraction <= 1.0,
            "train_fraction must lie in (0, 1]",
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub split: Split,
    /// Per-coordinate keypoint noise levels swept, pixels.
    pub noise_levels: Vec<f64>,
    pub outlier_fraction: f64,
    /// Width of the mean-pixel-error bins.
    pub bin_width: f64,
    pub solver: Solver,
    pub ransac: RansacConfig,
    /// Caps the number of scenes read from the split.
    pub max_scenes: Option<usize>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            seed: 0,
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("out/checkpoint.json"),
            split: Split::Val,
            noise_levels: vec![
                0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0, 12.0,
            ],
            outlier_fraction: 0.0,
            bin_width: 2.0,
            solver: Solver::RansacEpnp,
            ransac: RansacConfig::default(),
            max_scenes: None,
        }
    }
}

impl ExperimentConfig for CompareConfig {
    fn seed(&self) -> u64 {
        self.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.ransac.seed = seed;
    }

    fn validate(&self) -> CliResult<()> {
        core(self.ransac.validate())?;
        check(!self.noise_levels.is_empty(), "noise_levels is empty")?;
        check(
            self.noise_levels.iter().all(|s| *s >= 0.0 && s.is_finite()),
            "noise levels must be non-negative",
        )?;
        check(
            (0.0..=1.0).contains(&self.outlier_fraction),
            "outlier_fraction must lie in [0, 1]",
        )?;
        check(
            self.bin_width > 0.0 && self.bin_width.is_finite(),
            "bin_width must be positive",
        )?;
        check(self.max_scenes != Some(0), "max_scenes must be at least 1")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub split: Split,
    /// Per-coordinate keypoint noise, pixels.
    pub sigma: f64,
    pub outlier_fraction: f64,
    /// Surface keypoints chosen by farthest point sampling for the FPS row.
    pub fps_keypoints: usize,
    pub solver: Solver,
    pub ransac: RansacConfig,
    pub max_scenes: Option<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seed: 0,
            dataset: PathBuf::from("data"),
            checkpoint: PathBuf::from("out/checkpoint.json"),
            split: Split::Val,
            sigma: 8.0,
            outlier_fraction: 0.0,
            fps_keypoints: 8,
            solver: Solver::RansacEpnp,
            ransac: RansacConfig::default(),
            max_scenes: None,
        }
    }
}

impl ExperimentConfig for AblateConfig {
    fn seed(&self) -> u64 {
        self.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.ransac.seed = seed;
    }

    fn validate(&self) -> CliResult<()> {
        core(self.ransac.validate())?;
        check(
            self.sigma >= 0.0 && self.sigma.is_finite(),
            "sigma must be non-negative",
        )?;
        check(
            (0.0..=1.0).contains(&self.outlier_fraction),
            "outlier_fraction must lie in [0, 1]",
        )?;
        check(self.fps_keypoints >= 4, "fps_keypoints must be at least 4")?;
        check(self.max_scenes != Some(0), "max_scenes must be at least 1")
    }
}

/// Corruption applied to the ground truth to stand in for a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    /// Probability assigned to the predicted class; the rest is spread evenly.
    pub confidence: f64,
    /// Per-coordinate keypoint noise, pixels.
    pub keypoint_sigma: f64,
    pub rotation_sigma_deg: f64,
    pub translation_sigma_m: f64,
    /// Chance that an object gets no prediction.
    pub miss_rate: f64,
    /// Chance, per object, of an extra spurious prediction.
    pub false_positive_rate: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            confidence: 0.9,
            keypoint_sigma: 2.0,
            rotation_sigma_deg: 3.0,
            translation_sigma_m: 0.01,
            miss_rate: 0.05,
            false_positive_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SizeSweepConfig {
    pub fractions: Vec<f64>,
    pub training: TrainConfig,
}

impl Default for SizeSweepConfig {
    fn default() -> Self {
        SizeSweepConfig {
            fractions: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            training: TrainConfig {
                layout: InputLayout::KeypointsAndClassProbs,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSetsConfig {
    pub seed: u64,
    pub dataset: PathBuf,
    pub split: Split,
    pub predictor: PredictorConfig,
    pub max_scenes: Option<usize>,
    /// Retrains RotEst on growing fractions of the training split when set.
    pub size_sweep: Option<SizeSweepConfig>,
}

impl Default for EvalSetsConfig {
    fn default() -> Self {
        EvalSetsConfig {
            seed: 0,
            dataset: PathBuf::from("data"),
            split: Split::Val,
            predictor: PredictorConfig::default(),
            max_scenes: None,
            size_sweep: None,
        }
    }
}

impl ExperimentConfig for EvalSetsConfig {
    fn seed(&self) -> u64 {
        self.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(s) = &mut self.size_sweep {
            s.training.seed = seed;
        }
    }

    fn validate(&self) -> CliResult<()> {
        let p = &self.predictor;
        check(
            p.confidence > 0.0 && p.confidence <= 1.0,
            "confidence must lie in (0, 1]",
        )?;
        for (name, v) in [
            ("keypoint_sigma", p.keypoint_sigma),
            ("rotation_sigma_deg", p.rotation_sigma_deg),
            ("translation_sigma_m", p.translation_sigma_m),
        ] {
            check(
                v >= 0.0 && v.is_finite(),
                format!("{name} must be non-negative"),
            )?;
        }
        for (name, v) in [
            ("miss_rate", p.miss_rate),
            ("false_positive_rate", p.false_positive_rate),
        ] {
            check(
                (0.0..=1.0).contains(&v),
                format!("{name} must lie in [0, 1]"),
            )?;
        }
        check(self.max_scenes != Some(0), "max_scenes must be at least 1")?;
        if let Some(s) = &self.size_sweep {
            core(s.training.validate())?;
            check(!s.fractions.is_empty(), "size_sweep.fractions is empty")?;
            check(
                s.fractions.iter().all(|f| *f > 0.0 && *f <= 1.0),
                "size_sweep fractions must lie in (0, 1]",
            )?;
        }
        Ok(())
    }
}

/// A pose given as a row-major rotation and a translation in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl Default for PoseRecord {
    fn default() -> Self {
        PoseRecord {
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub seed: u64,
    /// Catalog manifest; the procedural catalog when absent.
    pub catalog: Option<PathBuf>,
    pub class_id: usize,
    pub gt: PoseRecord,
    pub pred: PoseRecord,
}

impl ExperimentConfig for MetricsConfig {
    fn seed(&self) -> u64 {
        self.seed
    }

    fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    fn validate(&self) -> CliResult<()> {
        for pose in [&self.gt, &self.pred] {
            core(setpose::geometry::RotationMatrix::from_row_major(&pose.rotation).map(|_| ()))?;
            check(
                pose.translation.iter().all(|v| v.is_finite()),
                "translation must be finite",
            )?;
        }
        Ok(())
    }
}
