use std::path::Path;

use setpose::rotest::{train_rotest, Checkpoint, RotEst, TrainConfig, TrainingCurve, TrainingSet};
use setpose::synth::{Catalog, SceneRecord};
use setpose::Error;

use crate::config::{Split, TrainCommandConfig};
use crate::dataset::{object_models, training_samples, Dataset};
use crate::error::{CliError, CliResult};
use crate::output::{Provenance, Reporter};

pub const COMMAND: &str = "train";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CURVE_FILE: &str = "training_curve.csv";

/// Trains on the noise-free keypoints of `train`, validating on `val`.
pub fn fit(
    catalog: &Catalog,
    train: &[SceneRecord],
    val: &[SceneRecord],
    training: &TrainConfig,
) -> CliResult<(RotEst, TrainingCurve)> {
    let train_samples = training_samples(train)?;
    let val_samples = training_samples(val)?;
    let objects = object_models(catalog);
    let first = train.first().or(val.first()).ok_or(Error::EmptyList)?;
    let data = TrainingSet {
        train: &train_samples,
        val: &val_samples,
        objects: &objects,
        camera: first.camera,
        image_size: first.image_size,
    };
    Ok(train_rotest(&data, training)?)
}

/// Writes `checkpoint.json` and `training_curve.csv`. A diverged run still
/// writes its partial curve before failing.
pub fn run(
    cfg: &TrainCommandConfig,
    out: &Path,
    rep: &Reporter,
) -> CliResult<(RotEst, TrainingCurve)> {
    let prov = Provenance::new(COMMAND, cfg, cfg.seed);
    let data = Dataset::open(&cfg.dataset)?;
    let n_train = ((cfg.train_fraction * data.manifest.train_scenes as f64).ceil() as usize).max(1);
    let train = data.load_split(Split::Train, Some(n_train))?;
    let val = data.load_split(Split::Val, None)?;
    rep.info(format!(
        "training on {} scenes, validating on {} scenes, {} epochs",
        train.len(),
        val.len(),
        cfg.training.epochs
    ));
    match fit(&data.catalog, &train, &val, &cfg.training) {
        Ok((model, curve)) => {
            prov.write_json(
                &out.join(CHECKPOINT_FILE),
                &Checkpoint::new(&model, &cfg.training),
            )?;
            prov.write_csv(&out.join(CURVE_FILE), &curve.to_csv())?;
            if let Some(last) = curve.last() {
                rep.info(format!(
                    "final val rotation error {:.3} deg, translation error {:.4} m",
                    last.val_rotation_error_deg, last.val_translation_error_m
                ));
            }
            Ok((model, curve))
        }
        Err(CliError::Core(Error::Divergence { epoch, curve })) => {
            prov.write_csv(&out.join(CURVE_FILE), &curve.to_csv())?;
            Err(Error::Divergence { epoch, curve }.into())
        }
        Err(e) => Err(e),
    }
}
