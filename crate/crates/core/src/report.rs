//! On-disk artifacts of a broken-geodesic run.
//!
//! `save_run` writes one MetaImage vector field per accepted leg
//! (`leg_001_svf.mhd`, ...), the composed displacement (`composed.mhd`), a
//! JSON report and an energy CSV. Leg paths in the report are relative to
//! the report's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{BrokenGeodesic, DriverConfig};
use crate::metaimage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n_legs: usize,
    pub legs: Vec<String>,
    pub leg_lengths: Vec<f64>,
    pub total_length: f64,
    pub initial_energy: f64,
    pub energy_history: Vec<f64>,
    pub rejected_legs: usize,
    pub leg_wall_seconds: Vec<f64>,
    pub config: DriverConfig,
}

pub const ENERGY_CSV_HEADER: &str = "leg_index,leg_length,energy";

/// `leg_index,leg_length,energy`, one row per accepted leg, 1-based.
pub fn energy_csv(g: &BrokenGeodesic) -> String {
    let mut out = String::from(ENERGY_CSV_HEADER);
    out.push('\n');
    for (i, (len, e)) in g.leg_lengths.iter().zip(&g.energy_history).enumerate() {
        out.push_str(&format!("{},{},{}\n", i + 1, len, e));
    }
    out
}

/// Writes `contents` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Saves every artifact of `g` under `out_dir` and returns the report with
/// the list of files written.
pub fn save_run(out_dir: &Path, g: &BrokenGeodesic, cfg: &DriverConfig) -> Result<(RunReport, Vec<PathBuf>)> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut legs = Vec::with_capacity(g.legs.len());
    for (i, v) in g.legs.iter().enumerate() {
        let name = format!("leg_{:03}_svf.mhd", i + 1);
        written.extend(metaimage::write_field(out_dir.join(&name), v)?);
        legs.push(name);
    }
    written.extend(metaimage::write_field(out_dir.join("composed.mhd"), g.composed.displacement())?);

    let report = RunReport {
        n_legs: g.n_legs(),
        legs,
        leg_lengths: g.leg_lengths.clone(),
        total_length: g.total_length,
        initial_energy: g.initial_energy,
        energy_history: g.energy_history.clone(),
        rejected_legs: g.rejected,
        leg_wall_seconds: g.leg_seconds.clone(),
        config: cfg.clone(),
    };
    let report_path = out_dir.join("report.json");
    write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    written.push(report_path);
    let csv_path = out_dir.join("energy.csv");
    fs::write(&csv_path, energy_csv(g))?;
    written.push(csv_path);
    Ok((report, written))
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Rebuilds the geodesic a report describes by loading its leg fields.
/// A report without legs needs `grid` to size the identity transform.
pub fn load_geodesic(path: &Path, grid: &crate::field::Grid) -> Result<BrokenGeodesic> {
    let report = read_report(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    if report.legs.is_empty() {
        return Ok(BrokenGeodesic::identity(grid.clone(), report.initial_energy));
    }
    let legs = report
        .legs
        .iter()
        .map(|p| metaimage::read_field(base.join(p)))
        .collect::<Result<Vec<_>>>()?;
    for v in &legs {
        grid.ensure_same(v.grid(), "report leg")?;
    }
    let mut g = BrokenGeodesic::from_legs(legs, report.initial_energy, report.energy_history, &report.config.leg_cfg.exp_cfg)?;
    g.rejected = report.rejected_legs;
    g.leg_seconds = report.leg_wall_seconds;
    Ok(g)
}
