use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use setpose::geometry::Pose;
use setpose::metrics::MetricRow;
use setpose::synth::{perturb_keypoints, NoiseSpec, SceneRecord};

use super::{
    load_checkpoint, metric_row, rotest_pose, solve_pose, summarize_rows, to_keypoint_array,
};
use crate::config::{CompareConfig, Solver};
use crate::dataset::{derive_seed, Dataset};
use crate::error::CliResult;
use crate::output::{csv_float, Provenance, Reporter};
use crate::stats::{spearman, Trend};
use setpose::rotest::RotEst;
use setpose::synth::Catalog;

pub const COMMAND: &str = "compare-solvers";
pub const CSV_FILE: &str = "compare_solvers.csv";
pub const JSON_FILE: &str = "compare_solvers.json";

/// One bin of realized mean keypoint error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    /// Lower edge in pixels; the bin covers `[lo, lo + width)`.
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub n: usize,
    /// Non-symmetric objects, the only ones entering the ADD columns.
    pub n_add: usize,
    pub auc_add_epnp: Option<f64>,
    pub auc_add_rotest: Option<f64>,
    pub auc_adds_epnp: Option<f64>,
    pub auc_adds_rotest: Option<f64>,
    pub epnp_failures: usize,
    /// `empty_add` when no non-symmetric object fell in the bin.
    pub flag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub noise_model: String,
    pub solver: Solver,
    pub ransac: setpose::pnp::RansacConfig,
    pub objects_per_level: usize,
    pub bins: Vec<BinRow>,
    /// Spearman correlation of bin center against the EPnP ADD AUC.
    pub epnp_trend: Option<Trend>,
    pub rotest_trend: Option<Trend>,
}

#[derive(Default)]
struct BinAccumulator {
    epnp: Vec<(MetricRow, bool)>,
    rotest: Vec<(MetricRow, bool)>,
    epnp_failures: usize,
}

/// Runs both solvers on identical perturbed keypoints for every noise level
/// and bins the objects by realized mean keypoint error.
pub fn compare(
    cfg: &CompareConfig,
    catalog: &Catalog,
    model: &RotEst,
    scenes: &[SceneRecord],
) -> CliResult<CompareReport> {
    let mut bins: BTreeMap<u64, BinAccumulator> = BTreeMap::new();
    let mut objects_per_level = 0;
    for (level, sigma) in cfg.noise_levels.iter().enumerate() {
        objects_per_level = 0;
        for scene in scenes {
            for (k, obj) in scene.objects.iter().enumerate() {
                objects_per_level += 1;
                let entry = catalog
                    .get(obj.class_id)
                    .expect("class ids checked on load");
                let spec = NoiseSpec {
                    sigma: *sigma,
                    outlier_fraction: cfg.outlier_fraction,
                    outlier_range: scene.image_size,
                    seed: derive_seed(cfg.seed, &[level as u64, scene.index, k as u64]),
                };
                let noisy = perturb_keypoints(&obj.clean_keypoints()?, &spec)?;
                let kps = to_keypoint_array(&noisy.keypoints).expect("32 keypoints in, 32 out");
                let gt = obj.pose()?;
                let epnp = solve_pose(
                    cfg.solver,
                    &cfg.ransac,
                    entry.keypoints.points(),
                    &kps,
                    &scene.camera,
                );
                let rotest: Option<Pose> = rotest_pose(model, &kps, obj.class_id);
                let acc = bins
                    .entry((noisy.mean_error / cfg.bin_width).floor() as u64)
                    .or_default();
                acc.epnp_failures += usize::from(epnp.is_none());
                acc.epnp.push((
                    metric_row(entry, obj.class_id, &gt, epnp.as_ref())?,
                    entry.symmetric,
                ));
                acc.rotest.push((
                    metric_row(entry, obj.class_id, &gt, rotest.as_ref())?,
                    entry.symmetric,
                ));
            }
        }
    }
    let mut rows = Vec::with_capacity(bins.len());
    for (b, acc) in &bins {
        let e = summarize_rows(&acc.epnp)?;
        let r = summarize_rows(&acc.rotest)?;
        rows.push(BinRow {
            bin_lo: *b as f64 * cfg.bin_width,
            bin_hi: (*b + 1) as f64 * cfg.bin_width,
            n: e.n,
            n_add: e.n_add,
            auc_add_epnp: e.auc_add,
            auc_add_rotest: r.auc_add,
            auc_adds_epnp: e.auc_adds,
            auc_adds_rotest: r.auc_adds,
            epnp_failures: acc.epnp_failures,
            flag: if e.n_add == 0 {
                "empty_add".into()
            } else {
                "ok".into()
            },
        });
    }
    let trend = |f: fn(&BinRow) -> Option<f64>| {
        let (x, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter_map(|r| f(r).map(|v| (0.5 * (r.bin_lo + r.bin_hi), v)))
            .unzip();
        spearman(&x, &y)
    };
    Ok(CompareReport {
        noise_model: "injected".into(),
        solver: cfg.solver,
        ransac: cfg.ransac,
        objects_per_level,
        epnp_trend: trend(|r| r.auc_add_epnp),
        rotest_trend: trend(|r| r.auc_add_rotest),
        bins: rows,
    })
}

pub fn to_csv(report: &CompareReport) -> String {
    let mut out = String::from(
        "bin_lo,bin_hi,n,n_add,auc_add_epnp,auc_add_rotest,auc_adds_epnp,auc_adds_rotest,epnp_failures,flag\n",
    );
    for r in &report.bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.bin_lo,
            r.bin_hi,
            r.n,
            r.n_add,
            csv_float(r.auc_add_epnp),
            csv_float(r.auc_add_rotest),
            csv_float(r.auc_adds_epnp),
            csv_float(r.auc_adds_rotest),
            r.epnp_failures,
            r.flag
        );
    }
    out
}

/// Writes `compare_solvers.csv` (one row per non-empty bin) and
/// `compare_solvers.json` (the same rows plus settings and trend tests).
pub fn run(cfg: &CompareConfig, out: &Path, rep: &Reporter) -> CliResult<CompareReport> {
    let prov = Provenance::new(COMMAND, cfg, cfg.seed);
    let model = load_checkpoint(&cfg.checkpoint)?;
    let data = Dataset::open(&cfg.dataset)?;
    let scenes = data.load_split(cfg.split, cfg.max_scenes)?;
    rep.info(format!(
        "comparing {:?} and RotEst on {} scenes at {} noise levels",
        cfg.solver,
        scenes.len(),
        cfg.noise_levels.len()
    ));
    let report = compare(cfg, &data.catalog, &model, &scenes)?;
    for r in report.bins.iter().filter(|r| r.flag != "ok") {
        rep.warn(format!(
            "bin [{}, {}) has no non-symmetric objects",
            r.bin_lo, r.bin_hi
        ));
    }
    prov.write_csv(&out.join(CSV_FILE), &to_csv(&report))?;
    prov.write_json(&out.join(JSON_FILE), &report)?;
    Ok(report)
}
