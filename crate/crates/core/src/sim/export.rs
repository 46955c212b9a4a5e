//! CSV output. Column order is fixed per schema version; readers should
//! reject any header that is not one of the documented ones.

use std::fs;
use std::path::{Path, PathBuf};

use csv::{ReaderBuilder, StringRecord, Writer};

use super::metrics::{compute_heat_split, profile_execution};
use super::run::{ComparisonReport, RunLog};
use super::PlantMode;
use crate::error::{Error, Result};
use crate::model::Layout;

pub const RUNLOG_SCHEMA_VERSION: &str = "tesmpc-runlog/1";

const HYBRID_COLUMNS: &[&str] = &[
    "time_s",
    "u_byp_kgps",
    "u_tes_kgps",
    "T_cp_C",
    "u_total_kgps",
    "heat_load_W",
    "T_tank_C",
    "T_cp_fluid_C",
    "T_hx_wall_C",
    "T_hx_fluid_C",
    "T_tes_out_C",
    "soc",
    "q_tes_W",
    "q_hx_W",
    "tes_ratio",
    "J_total",
    "J_tl",
    "J_te",
    "J_pc",
    "J_du",
    "iterations",
    "objective_evaluations",
    "kkt_residual",
    "status",
    "fallback_events",
    "solve_time_s",
];

/// Columns that only exist with storage.
pub const TES_ONLY_COLUMNS: &[&str] = &["u_tes_kgps", "T_tes_out_C", "soc", "q_tes_W", "tes_ratio", "J_te"];

/// Header of the run log for `mode`.
pub fn runlog_header(mode: PlantMode) -> Vec<&'static str> {
    HYBRID_COLUMNS
        .iter()
        .copied()
        .filter(|c| mode == PlantMode::Hybrid || !TES_ONLY_COLUMNS.contains(c))
        .collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_run_csv(log: &RunLog, path: &Path) -> Result<()> {
    let hybrid = log.mode == PlantMode::Hybrid;
    let outlet = Layout::new(&log.params).tes_outlet();
    let split = compute_heat_split(log);
    let mut w = Writer::from_path(path)?;
    w.write_record(runlog_header(log.mode))?;
    for (i, r) in log.records.iter().enumerate() {
        let x = &r.state;
        let mut row = vec![num(r.time_s), num(r.control.bypass_kgps)];
        if hybrid {
            row.push(num(r.control.tes_kgps));
        }
        row.extend([
            num(r.cold_plate_c),
            num(r.control.total_kgps()),
            num(r.heat_load_w),
            num(x[Layout::TANK]),
            num(x[Layout::COLD_PLATE_FLUID]),
            num(x[Layout::HX_WALL]),
            num(x[Layout::HX_FLUID]),
        ]);
        if hybrid {
            row.push(outlet.map_or_else(String::new, |o| num(x[o])));
            row.push(r.state_of_charge.map_or_else(String::new, num));
            row.push(num(split.tes_w[i]));
        }
        row.push(num(split.hx_w[i]));
        if hybrid {
            row.push(split.ratio[i].map_or_else(String::new, num));
        }
        row.extend([num(r.cost.total()), num(r.cost.temperature_limit)]);
        if hybrid {
            row.push(num(r.cost.thermal_endurance));
        }
        row.extend([
            num(r.cost.power),
            num(r.cost.move_suppression),
            r.iterations.to_string(),
            r.objective_evaluations.to_string(),
            num(r.kkt_residual),
            r.status.label().to_string(),
            r.fallback_events.to_string(),
            num(r.solve_time_s),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Full state dump: `time_s, x0, x1, ...`.
pub fn write_state_csv(log: &RunLog, path: &Path) -> Result<()> {
    let mut w = Writer::from_path(path)?;
    let n = log.records.first().map_or(0, |r| r.state.len());
    let mut header = vec!["time_s".to_string()];
    header.extend((0..n).map(|i| format!("x{i}_C")));
    w.write_record(&header)?;
    for r in &log.records {
        let mut row = vec![num(r.time_s)];
        row.extend(r.state.iter().map(|&v| num(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a run log, checking the header against the current schema and
/// that every row has the header's width.
pub fn read_run_csv(path: &Path) -> Result<(PlantMode, Vec<StringRecord>)> {
    let mut r = ReaderBuilder::new().flexible(false).from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mode = [PlantMode::Hybrid, PlantMode::NoTes]
        .into_iter()
        .find(|&m| runlog_header(m) == header)
        .ok_or_else(|| Error::Input(format!("{}: header does not match {RUNLOG_SCHEMA_VERSION}", path.display())))?;
    let rows = r.records().collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((mode, rows))
}

fn write_series(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one small CSV per plotted channel into `dir` and returns the
/// paths written.
pub fn write_plot_series(dir: &Path, log: &RunLog, comparison: Option<&ComparisonReport>) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let split = compute_heat_split(log);
    let recs = &log.records;
    let mut emit = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let p = dir.join(name);
        write_series(&p, header, rows.into_iter())?;
        written.push(p);
        Ok(())
    };

    emit(
        "heat_load.csv",
        &["time_s", "heat_load_W"],
        recs.iter().map(|r| vec![num(r.time_s), num(r.heat_load_w)]).collect(),
    )?;
    emit(
        "flows_and_cold_plate.csv",
        &["time_s", "u_total_kgps", "u_tes_kgps", "T_cp_C"],
        recs.iter()
            .map(|r| vec![num(r.time_s), num(r.control.total_kgps()), num(r.control.tes_kgps), num(r.cold_plate_c)])
            .collect(),
    )?;
    let timing = profile_execution(log);
    emit(
        "execution_time.csv",
        &["time_s", "solve_time_s", "iterations"],
        recs.iter()
            .map(|r| vec![num(r.time_s), num(r.solve_time_s), r.iterations.to_string()])
            .collect(),
    )?;
    emit(
        "execution_summary.csv",
        &["count", "min_s", "median_s", "p95_s", "max_s", "deadline_misses"],
        vec![vec![
            timing.count.to_string(),
            num(timing.min_s),
            num(timing.median_s),
            num(timing.p95_s),
            num(timing.max_s),
            timing.deadline_misses.to_string(),
        ]],
    )?;
    emit(
        "heat_rates.csv",
        &["time_s", "q_cp_W", "q_tes_W", "q_hx_W"],
        recs.iter()
            .enumerate()
            .map(|(i, r)| vec![num(r.time_s), num(r.heat_load_w), num(split.tes_w[i]), num(split.hx_w[i])])
            .collect(),
    )?;
    if log.has_tes() {
        emit(
            "tes_heat_share.csv",
            &["time_s", "tes_ratio"],
            recs.iter()
                .enumerate()
                .map(|(i, r)| vec![num(r.time_s), split.ratio[i].map_or_else(String::new, num)])
                .collect(),
        )?;
        emit(
            "state_of_charge.csv",
            &["time_s", "soc"],
            recs.iter()
                .map(|r| vec![num(r.time_s), r.state_of_charge.map_or_else(String::new, num)])
                .collect(),
        )?;
    }
    if let Some(report) = comparison {
        emit(
            "cold_plate_comparison.csv",
            &["time_s", "T_cp_hybrid_C", "T_cp_no_tes_C"],
            report.cold_plate_series.iter().map(|&(t, a, b)| vec![num(t), num(a), num(b)]).collect(),
        )?;
        emit(
            "flow_comparison.csv",
            &["time_s", "u_total_hybrid_kgps", "u_total_no_tes_kgps"],
            report.flow_series.iter().map(|&(t, a, b)| vec![num(t), num(a), num(b)]).collect(),
        )?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_tes_header_drops_storage_columns() {
        let h = runlog_header(PlantMode::Hybrid);
        let n = runlog_header(PlantMode::NoTes);
        assert_eq!(h.len(), n.len() + TES_ONLY_COLUMNS.len());
        assert_eq!(&h[..4], &["time_s", "u_byp_kgps", "u_tes_kgps", "T_cp_C"]);
        assert_eq!(*h.last().unwrap(), "solve_time_s");
        assert!(n.iter().all(|c| !TES_ONLY_COLUMNS.contains(c)));
    }
}
