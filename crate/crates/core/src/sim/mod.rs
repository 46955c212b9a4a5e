//! Closed-loop experiments: scripted heat loads, the truth plant, the
//! controller in the loop, metrics and CSV export.

mod export;
mod metrics;
mod run;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::model::{ControlInput, DisturbanceInput, Layout, ThermalModel};
use crate::nmpc::{ControlMode, NmpcConfig, PreviewMode};
use crate::params::SystemParams;

pub use export::{
    read_run_csv, runlog_header, write_plot_series, write_run_csv, write_state_csv, RUNLOG_SCHEMA_VERSION,
    TES_ONLY_COLUMNS,
};
pub use metrics::{
    compute_heat_split, energy_balance, profile_execution, recharge_windows, EnergyBalance, HeatSplit,
    TimingSummary, RATIO_FLOOR_W,
};
pub use run::{
    run_closed_loop, run_closed_loop_with, run_comparison, ComparisonReport, FullStateFeedback, RunFailure,
    RunLog, RunOptions, RunRecord, StateEstimator,
};

/// Factor by which the first pulse exceeds the steady heat-exchanger-only
/// rejection capacity.
pub const FIRST_PULSE_OVERLOAD: f64 = 1.25;
/// Magnitude of the later pulses relative to the first.
pub const LATER_PULSE_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatPulse {
    pub start_s: f64,
    pub end_s: f64,
    pub power_w: f64,
}

/// Plant configuration of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantMode {
    /// Heat exchanger plus storage, both flows manipulated.
    #[default]
    Hybrid,
    /// Five-state loop without storage, bypass flow only.
    NoTes,
}

impl PlantMode {
    pub fn label(self) -> &'static str {
        match self {
            PlantMode::Hybrid => "hybrid",
            PlantMode::NoTes => "no-tes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub duration_s: f64,
    pub baseline_heat_w: f64,
    /// Non-overlapping, active on `[start_s, end_s)`.
    pub pulses: Vec<HeatPulse>,
    pub chiller_temperature_c: f64,
    pub secondary_flow_kgps: f64,
    /// Every state starts at this temperature.
    pub initial_temperature_c: f64,
    /// Local error per second of the truth plant integrator.
    pub plant_tolerance: f64,
    pub mode: PlantMode,
}

impl Scenario {
    /// The default three-pulse scenario with the first pulse sized against
    /// the heat exchanger alone.
    pub fn sized(params: &SystemParams, cfg: &NmpcConfig) -> Result<Self> {
        let chiller = 8.0;
        let capacity = hx_only_capacity_w(params, cfg.max_total_flow_kgps, cfg.max_cold_plate_temperature_c, chiller)?;
        let p1 = FIRST_PULSE_OVERLOAD * capacity;
        let p2 = LATER_PULSE_FRACTION * p1;
        Ok(Self {
            duration_s: 400.0,
            baseline_heat_w: 0.0,
            pulses: vec![
                HeatPulse { start_s: 28.0, end_s: 55.0, power_w: p1 },
                HeatPulse { start_s: 106.0, end_s: 145.0, power_w: p2 },
                HeatPulse { start_s: 180.0, end_s: 230.0, power_w: p2 },
            ],
            chiller_temperature_c: chiller,
            secondary_flow_kgps: 0.067,
            initial_temperature_c: chiller + 0.5,
            plant_tolerance: 1e-6,
            mode: PlantMode::Hybrid,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(param_err("scenario.duration_s", "must be > 0"));
        }
        if !(self.baseline_heat_w.is_finite() && self.baseline_heat_w >= 0.0) {
            return Err(param_err("scenario.baseline_heat_w", "must be >= 0"));
        }
        for (key, v) in [
            ("scenario.chiller_temperature_c", self.chiller_temperature_c),
            ("scenario.initial_temperature_c", self.initial_temperature_c),
        ] {
            if !v.is_finite() {
                return Err(param_err(key, "must be finite"));
            }
        }
        if !(self.secondary_flow_kgps.is_finite() && self.secondary_flow_kgps > 0.0) {
            return Err(param_err("scenario.secondary_flow_kgps", "must be > 0"));
        }
        if !(self.plant_tolerance.is_finite() && self.plant_tolerance > 0.0) {
            return Err(param_err("scenario.plant_tolerance", "must be > 0"));
        }
        let mut sorted = self.pulses.clone();
        sorted.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        for (i, p) in sorted.iter().enumerate() {
            if !(p.start_s >= 0.0 && p.end_s > p.start_s && p.end_s <= self.duration_s) {
                return Err(param_err(
                    "scenario.pulses",
                    format!("pulse [{}, {}) must lie inside [0, {}]", p.start_s, p.end_s, self.duration_s),
                ));
            }
            if !(p.power_w.is_finite() && p.power_w >= 0.0) {
                return Err(param_err("scenario.pulses", format!("pulse power {} must be >= 0", p.power_w)));
            }
            if i > 0 && sorted[i - 1].end_s > p.start_s {
                return Err(param_err("scenario.pulses", format!("pulses overlap at {} s", p.start_s)));
            }
        }
        Ok(())
    }

    /// Cold plate load at `t`.
    pub fn heat_load_w(&self, t: f64) -> f64 {
        self.baseline_heat_w
            + self
                .pulses
                .iter()
                .filter(|p| p.start_s <= t && t < p.end_s)
                .map(|p| p.power_w)
                .sum::<f64>()
    }

    pub fn disturbance(&self, t: f64) -> DisturbanceInput {
        DisturbanceInput {
            cold_plate_heat_w: self.heat_load_w(t),
            chiller_temperature_c: self.chiller_temperature_c,
            secondary_flow_kgps: self.secondary_flow_kgps,
        }
    }

    /// Disturbances over the `steps` intervals starting at `t`.
    pub fn forecast(&self, t: f64, steps: usize, step_s: f64, preview: PreviewMode) -> Vec<DisturbanceInput> {
        match preview {
            PreviewMode::Exact => (0..steps).map(|k| self.disturbance(t + k as f64 * step_s)).collect(),
            PreviewMode::ZeroOrderHold => vec![self.disturbance(t); steps],
        }
    }

    /// Times at which the load changes, in `(0, duration)`.
    pub fn switch_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self
            .pulses
            .iter()
            .flat_map(|p| [p.start_s, p.end_s])
            .filter(|&s| s > 0.0 && s < self.duration_s)
            .collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    pub fn step_count(&self, step_s: f64) -> usize {
        (self.duration_s / step_s).round() as usize
    }

    /// Plant parameters and controller configuration for this mode.
    pub fn configure(&self, params: &SystemParams, cfg: &NmpcConfig) -> (SystemParams, NmpcConfig) {
        let mut cfg = cfg.clone();
        match self.mode {
            PlantMode::Hybrid => (params.clone(), cfg),
            PlantMode::NoTes => {
                cfg.mode = ControlMode::BypassOnly;
                (params.without_tes(), cfg)
            }
        }
    }
}

/// Largest steady load the heat exchanger path alone can reject at total
/// flow `flow_kgps` while holding the cold plate wall at `max_wall_c`.
pub fn hx_only_capacity_w(params: &SystemParams, flow_kgps: f64, max_wall_c: f64, chiller_c: f64) -> Result<f64> {
    let model = ThermalModel::new(params.without_tes())?;
    let u = ControlInput::new(flow_kgps, 0.0);
    let x = model.uniform_state(chiller_c);
    // without storage the dynamics are affine in the load
    let wall = |q: f64| -> Result<f64> {
        let lin = model.linearize(&x, &u, &DisturbanceInput::new(q, chiller_c))?;
        let a: DMatrix<f64> = lin.a;
        let steady: DVector<f64> = a.lu().solve(&-lin.d_tilde).ok_or(Error::Singular("steady state"))?;
        Ok(steady[Layout::COLD_PLATE_WALL])
    };
    let base = wall(0.0)?;
    let slope = wall(1.0)? - base;
    if !(slope > 0.0) {
        return Err(Error::Input("cold plate does not heat up under load".into()));
    }
    Ok((max_wall_c - base) / slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_scenario_is_valid_and_sized() {
        let params = SystemParams::default();
        let cfg = NmpcConfig::default();
        let s = Scenario::sized(&params, &cfg).unwrap();
        s.validate().unwrap();
        let cap = hx_only_capacity_w(&params, 0.1, 45.0, 8.0).unwrap();
        assert!((s.pulses[0].power_w - 1.25 * cap).abs() < 1e-9);
        assert!((s.pulses[1].power_w - 0.75 * cap).abs() < 1e-9);
        assert_eq!(s.heat_load_w(27.999), 0.0);
        assert_eq!(s.heat_load_w(28.0), s.pulses[0].power_w);
        assert_eq!(s.heat_load_w(55.0), 0.0);
        assert_eq!(s.step_count(1.0), 400);
    }

    #[test]
    fn capacity_matches_series_resistance() {
        // mixed fluid nodes: the cold plate fluid sits one full rise Q/(ṁ c_p)
        // above the HX fluid, which feeds the tank at its own temperature
        let p = SystemParams::default();
        let l = &p.lumped;
        let mcp = 0.1 * p.fluid.specific_heat_j_per_kg_k;
        let r = 1.0 / l.cold_plate_ha_w_per_k + 1.0 / l.hx_ha_w_per_k + 1.0 / l.chiller_ha_w_per_k + 1.0 / mcp;
        let expect = 37.0 / r;
        let cap = hx_only_capacity_w(&p, 0.1, 45.0, 8.0).unwrap();
        assert!((cap - expect).abs() < 1e-9 * expect, "{cap} vs {expect}");
    }

    #[test]
    fn overlapping_pulses_rejected() {
        let mut s = Scenario::sized(&SystemParams::default(), &NmpcConfig::default()).unwrap();
        s.pulses[1].start_s = 50.0;
        assert!(s.validate().is_err());
        s.pulses[1].start_s = 106.0;
        s.pulses[2].end_s = 500.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn forecast_modes() {
        let s = Scenario::sized(&SystemParams::default(), &NmpcConfig::default()).unwrap();
        let exact = s.forecast(20.0, 25, 1.0, PreviewMode::Exact);
        assert_eq!(exact[7].cold_plate_heat_w, 0.0);
        assert_eq!(exact[8].cold_plate_heat_w, s.pulses[0].power_w);
        let zoh = s.forecast(20.0, 25, 1.0, PreviewMode::ZeroOrderHold);
        assert!(zoh.iter().all(|d| d.cold_plate_heat_w == 0.0));
    }
}
