//! Dataset directory layout:
//!
//! ```text
//! dataset.json            counts, scene and noise settings
//! catalog/catalog.json    class manifest
//! catalog/meshes/*.ply
//! train/000000.json ...   one document per scene
//! val/000000.json ...
//! ```
//!
//! Validation scenes continue the scene index sequence after the training
//! scenes, so the two splits never share a random stream.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use setpose::rotest::{ObjectModel, TrainingSample};
use setpose::synth::{
    generate_scene, Catalog, CatalogManifest, NoiseSpec, SceneConfig, SceneRecord,
};

use crate::config::{GenDataConfig, Split};
use crate::error::{CliError, CliResult};
use crate::output::{read_json, Provenance};

pub const DATASET_FILE: &str = "dataset.json";
pub const CATALOG_DIR: &str = "catalog";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub scene_config: SceneConfig,
    pub noise: NoiseSpec,
    /// Keypoint noise in scene files is injected, not produced by a detector.
    pub noise_model: String,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub catalog: PathBuf,
}

impl DatasetManifest {
    pub fn scene_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_scenes,
            Split::Val => self.val_scenes,
        }
    }

    /// Scene index (random stream) of the `k`-th scene of a split.
    pub fn scene_index(&self, split: Split, k: usize) -> u64 {
        match split {
            Split::Train => k as u64,
            Split::Val => (self.train_scenes + k) as u64,
        }
    }
}

pub fn scene_path(root: &Path, split: Split, k: usize) -> PathBuf {
    root.join(split.dir_name()).join(format!("{k:06}.json"))
}

/// Scene records of one split, generated in memory.
pub fn generate_split(
    cfg: &GenDataConfig,
    catalog: &Catalog,
    split: Split,
) -> CliResult<Vec<SceneRecord>> {
    let scene_cfg = cfg.scene_config();
    let noise = cfg.noise_spec();
    let (count, offset) = match split {
        Split::Train => (cfg.train_scenes, 0),
        Split::Val => (cfg.val_scenes, cfg.train_scenes),
    };
    (0..count)
        .map(|k| {
            let scene = generate_scene(&scene_cfg, catalog, (offset + k) as u64)?;
            Ok(SceneRecord::from_scene(&scene, &scene_cfg, &noise)?)
        })
        .collect()
}

pub fn manifest_for(cfg: &GenDataConfig) -> DatasetManifest {
    DatasetManifest {
        scene_config: cfg.scene_config(),
        noise: cfg.noise_spec(),
        noise_model: "injected".into(),
        train_scenes: cfg.train_scenes,
        val_scenes: cfg.val_scenes,
        catalog: PathBuf::from(CATALOG_DIR).join("catalog.json"),
    }
}

/// An opened dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub catalog: Catalog,
}

impl Dataset {
    pub fn open(root: &Path) -> CliResult<Self> {
        let manifest: DatasetManifest = read_json(&root.join(DATASET_FILE))?;
        let catalog_path = root.join(&manifest.catalog);
        let catalog_dir = catalog_path.parent().unwrap_or(root);
        let catalog = CatalogManifest::load(&catalog_path)?.to_catalog(catalog_dir)?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
            catalog,
        })
    }

    /// The first `limit` scenes of a split (all when `None`), in index order.
    pub fn load_split(&self, split: Split, limit: Option<usize>) -> CliResult<Vec<SceneRecord>> {
        let n = self.manifest.scene_count(split);
        let n = limit.map_or(n, |l| l.min(n));
        (0..n)
            .map(|k| {
                let path = scene_path(&self.root, split, k);
                let record: SceneRecord = read_json(&path)?;
                if record
                    .objects
                    .iter()
                    .any(|o| o.class_id >= self.catalog.len())
                {
                    return Err(CliError::SchemaMismatch {
                        path,
                        message: "class id outside the catalog".into(),
                    });
                }
                Ok(record)
            })
            .collect()
    }
}

/// Writes the catalog, the manifest and every scene of both splits.
pub fn write_dataset(
    cfg: &GenDataConfig,
    catalog: &Catalog,
    train: &[SceneRecord],
    val: &[SceneRecord],
    out: &Path,
    prov: &Provenance,
) -> CliResult<DatasetManifest> {
    let manifest = manifest_for(cfg);
    CatalogManifest::write(catalog, out.join(CATALOG_DIR))?;
    for (split, records) in [(Split::Train, train), (Split::Val, val)] {
        for (k, r) in records.iter().enumerate() {
            prov.write_json(&scene_path(out, split, k), r)?;
        }
    }
    prov.write_json(&out.join(DATASET_FILE), &manifest)?;
    Ok(manifest)
}

/// Training samples built from the noise-free keypoints.
pub fn training_samples(records: &[SceneRecord]) -> CliResult<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for r in records {
        for o in &r.objects {
            let pose = o.pose()?;
            out.push(TrainingSample {
                keypoints: o.clean_keypoints()?,
                class_id: o.class_id,
                rotation: pose.rotation,
                translation: pose.translation,
            });
        }
    }
    Ok(out)
}

pub fn object_models(catalog: &Catalog) -> Vec<ObjectModel> {
    catalog
        .entries()
        .iter()
        .map(|e| ObjectModel {
            points: e.model_points.clone(),
            symmetric: e.symmetric,
        })
        .collect()
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one item addressed by a path of indices under a base seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base), |acc, &k| mix(acc ^ mix(k)))
}
