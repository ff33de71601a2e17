//! Single-record debugging: the metric values of one ground-truth and
//! predicted pose pair.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use setpose::geometry::{Pose, RotationMatrix};
use setpose::metrics::{rotation_error, EvalRecord, MetricRow};
use setpose::synth::{Catalog, CatalogManifest};

use crate::config::{MetricsConfig, PoseRecord};
use crate::error::{CliError, CliResult};
use crate::output::{Provenance, Reporter};

pub const COMMAND: &str = "metrics";
pub const JSON_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_id: usize,
    pub class_name: String,
    pub symmetric: bool,
    pub diameter: f64,
    pub add: f64,
    pub adds: f64,
    pub add_s: f64,
    pub add_s_over_diameter: f64,
    pub rotation_error_deg: f64,
    pub translation_error_m: f64,
}

fn to_pose(r: &PoseRecord) -> CliResult<Pose> {
    Ok(Pose::new(
        RotationMatrix::from_row_major(&r.rotation)?,
        Vector3::from(r.translation),
    ))
}

pub fn load_catalog(path: Option<&Path>) -> CliResult<Catalog> {
    Ok(match path {
        Some(p) => CatalogManifest::load(p)?.to_catalog(p.parent().unwrap_or(Path::new(".")))?,
        None => Catalog::procedural()?,
    })
}

pub fn compute(cfg: &MetricsConfig, catalog: &Catalog) -> CliResult<MetricsReport> {
    let entry = catalog.get(cfg.class_id).ok_or_else(|| {
        CliError::Config(format!(
            "class_id {} outside a catalog of {}",
            cfg.class_id,
            catalog.len()
        ))
    })?;
    let gt = to_pose(&cfg.gt)?;
    let pred = to_pose(&cfg.pred)?;
    let diameter = entry.diameter();
    let rec = EvalRecord::new(
        cfg.class_id,
        gt,
        pred,
        &entry.model_points,
        diameter,
        entry.symmetric,
    )?;
    let row = MetricRow::from_record(&rec);
    Ok(MetricsReport {
        class_id: cfg.class_id,
        class_name: entry.name.clone(),
        symmetric: entry.symmetric,
        diameter,
        add: row.add,
        adds: row.adds,
        add_s: row.combined,
        add_s_over_diameter: row.combined / diameter,
        rotation_error_deg: rotation_error(&gt.rotation, &pred.rotation, entry.symmetric)
            .to_degrees(),
        translation_error_m: (gt.translation - pred.translation).norm(),
    })
}

/// Writes `metrics.json` and prints the same values to stdout.
pub fn run(cfg: &MetricsConfig, out: &Path, _rep: &Reporter) -> CliResult<MetricsReport> {
    let prov = Provenance::new(COMMAND, cfg, cfg.seed);
    let catalog = load_catalog(cfg.catalog.as_deref())?;
    let report = compute(cfg, &catalog)?;
    println!("class        {} ({})", report.class_id, report.class_name);
    println!("symmetric    {}", report.symmetric);
    println!("diameter     {:.6} m", report.diameter);
    println!("ADD          {:.6} m", report.add);
    println!("ADD-S        {:.6} m", report.adds);
    println!(
        "ADD-(S)      {:.6} m ({:.4} of diameter)",
        report.add_s, report.add_s_over_diameter
    );
    println!("rotation     {:.4} deg", report.rotation_error_deg);
    println!("translation  {:.6} m", report.translation_error_m);
    prov.write_json(&out.join(JSON_FILE), &report)?;
    Ok(report)
}
