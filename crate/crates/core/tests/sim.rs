use std::fs;

use proptest::prelude::*;

use tesmpc_core::config::{to_toml, ConfigFile, CONFIG_SCHEMA_VERSION};
use tesmpc_core::nmpc::NmpcConfig;
use tesmpc_core::reference::{reference_integrate, PiecewiseConstant};
use tesmpc_core::sim::{
    energy_balance, read_run_csv, run_closed_loop, runlog_header, write_run_csv, HeatPulse, PlantMode, RunLog,
    Scenario,
};
use tesmpc_core::{ControlInput, DisturbanceInput, Layout, SystemParams, ThermalModel};

fn short_scenario(duration_s: f64, pulses: Vec<HeatPulse>) -> Scenario {
    Scenario {
        duration_s,
        pulses,
        ..Scenario::sized(&SystemParams::default(), &NmpcConfig::default()).unwrap()
    }
}

fn pulse(start_s: f64, end_s: f64, power_w: f64) -> HeatPulse {
    HeatPulse { start_s, end_s, power_w }
}

fn run(scenario: &Scenario) -> RunLog {
    let log = run_closed_loop(scenario, &SystemParams::default(), &NmpcConfig::default()).unwrap();
    assert!(log.is_complete(), "{:?}", log.failure);
    log
}

#[test]
fn idle_loop_stays_at_chiller_temperature() {
    let mut scenario = short_scenario(10.0, Vec::new());
    scenario.initial_temperature_c = scenario.chiller_temperature_c;
    let log = run(&scenario);
    assert_eq!(log.records.len(), 11);
    let cfg = NmpcConfig::default();
    for r in &log.records {
        let drift = r.state.iter().map(|v| (v - scenario.chiller_temperature_c).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-9, "t = {}: {drift}", r.time_s);
        assert!((r.control.bypass_kgps - cfg.min_flow_kgps).abs() < 1e-6);
        assert!((r.control.tes_kgps - cfg.min_flow_kgps).abs() < 1e-6);
    }
}

#[test]
fn pulse_run_conserves_energy() {
    let scenario = short_scenario(40.0, vec![pulse(5.0, 20.5, 1800.0)]);
    let log = run(&scenario);
    assert_eq!(log.records.len(), 41);
    let model = ThermalModel::new(log.params.clone()).unwrap();
    let first = &log.records[0].state;
    let last = &log.records.last().unwrap().state;
    let heat = 1800.0 * 15.5;
    let ha = log.params.lumped.chiller_ha_w_per_k;
    let flux: Vec<f64> = log
        .records
        .iter()
        .map(|r| ha * (r.state[Layout::HX_WALL] - scenario.chiller_temperature_c))
        .collect();
    let rejected: f64 = flux.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    let stored = model.enthalpy(last) - model.enthalpy(first);
    let residual = (heat - rejected - stored).abs() / heat;
    assert!(residual <= 0.01, "{residual}");
    let bal = energy_balance(&log, &scenario).unwrap();
    assert!((bal.heat_input_j - heat).abs() < 1e-9 * heat);
    assert!(bal.relative_residual() <= 0.01);
    for r in &log.records {
        let soc = r.state_of_charge.unwrap();
        assert!((0.0..=1.0).contains(&soc), "{soc}");
    }
}

#[test]
fn runs_are_reproducible() {
    let scenario = short_scenario(15.0, vec![pulse(3.0, 10.0, 2000.0)]);
    let a = run(&scenario);
    let b = run(&scenario);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.state, y.state);
        assert_eq!(x.control, y.control);
        assert_eq!(x.cost, y.cost);
    }
}

#[test]
fn idle_storage_leaves_the_lumped_loop_unchanged() {
    let full = ThermalModel::new(SystemParams::default()).unwrap();
    let lumped = ThermalModel::new(SystemParams::default().without_tes()).unwrap();
    let u = PiecewiseConstant::new(vec![(0.0, ControlInput::new(0.04, 0.0)), (12.0, ControlInput::new(0.02, 0.0))]).unwrap();
    let d = PiecewiseConstant::new(vec![(0.0, DisturbanceInput::new(1500.0, 8.0)), (8.0, DisturbanceInput::new(300.0, 8.0))]).unwrap();
    let a = reference_integrate(&full, &full.uniform_state(8.5), &u, &d, 25.0, 1e-8).unwrap();
    let b = reference_integrate(&lumped, &lumped.uniform_state(8.5), &u, &d, 25.0, 1e-8).unwrap();
    let (xa, xb) = (a.last_state(), b.last_state());
    for i in 0..5 {
        assert!((xa[i] - xb[i]).abs() < 1e-6, "state {i}: {} vs {}", xa[i], xb[i]);
    }
}

#[test]
fn run_log_csv_round_trips() {
    let scenario = short_scenario(6.0, vec![pulse(1.0, 4.0, 1500.0)]);
    let dir = tempfile::tempdir().unwrap();
    for mode in [PlantMode::Hybrid, PlantMode::NoTes] {
        let log = run(&Scenario { mode, ..scenario.clone() });
        let path = dir.path().join(format!("{}.csv", mode.label()));
        write_run_csv(&log, &path).unwrap();
        let (read_mode, rows) = read_run_csv(&path).unwrap();
        assert_eq!(read_mode, mode);
        assert_eq!(rows.len(), log.records.len());
        let header = runlog_header(mode);
        let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
        for (row, rec) in rows.iter().zip(&log.records) {
            assert_eq!(row[col("time_s")].parse::<f64>().unwrap(), rec.time_s);
            assert_eq!(row[col("T_cp_C")].parse::<f64>().unwrap(), rec.cold_plate_c);
            assert_eq!(row[col("u_byp_kgps")].parse::<f64>().unwrap(), rec.control.bypass_kgps);
        }
    }
}

#[test]
fn foreign_csv_header_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csv");
    let mut header = runlog_header(PlantMode::Hybrid).join(",");
    header.push_str(",extra\n");
    fs::write(&path, header).unwrap();
    assert!(read_run_csv(&path).is_err());
    fs::write(&path, "time_s,T_cp_C\n0,8\n").unwrap();
    assert!(read_run_csv(&path).is_err());
}

#[test]
fn invalid_scenarios_are_rejected() {
    let overlap = short_scenario(50.0, vec![pulse(5.0, 20.0, 100.0), pulse(15.0, 30.0, 100.0)]);
    assert!(overlap.validate().is_err());
    let outside = short_scenario(50.0, vec![pulse(40.0, 60.0, 100.0)]);
    assert!(outside.validate().is_err());
    let fractional = short_scenario(10.5, Vec::new());
    assert!(run_closed_loop(&fractional, &SystemParams::default(), &NmpcConfig::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scenario_config_round_trips(
        duration in 10.0f64..1000.0,
        power in 0.0f64..5000.0,
        chiller in 0.0f64..20.0,
        no_tes in any::<bool>(),
    ) {
        let scenario = Scenario {
            duration_s: duration.round(),
            pulses: vec![pulse(1.0, 5.0, power)],
            chiller_temperature_c: chiller,
            initial_temperature_c: chiller + 0.5,
            mode: if no_tes { PlantMode::NoTes } else { PlantMode::Hybrid },
            ..short_scenario(10.0, Vec::new())
        };
        let file = ConfigFile {
            schema_version: CONFIG_SCHEMA_VERSION,
            system: Some(SystemParams::default()),
            nmpc: Some(NmpcConfig::default()),
            scenario: Some(scenario),
        };
        let text = to_toml(&file).unwrap();
        let back = ConfigFile::parse(&text, "round trip").unwrap();
        prop_assert_eq!(back, file);
    }
}
