use std::time::Instant;

use log::{info, warn};
use nalgebra::DVector;

use super::{PlantMode, Scenario};
use crate::error::{Error, Result};
use crate::model::{ControlInput, Layout, ThermalModel};
use crate::nmpc::{warm_start_shift, CostBreakdown, HorizonSolution, Nmpc, NmpcConfig, SolveStatus};
use crate::params::SystemParams;
use crate::reference::{ReferenceConfig, ReferenceIntegrator};

/// Maps the true plant state to the state handed to the controller.
pub trait StateEstimator {
    fn estimate(&mut self, time_s: f64, measured: &DVector<f64>) -> DVector<f64>;
}

/// Perfect full-state measurement.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullStateFeedback;

impl StateEstimator for FullStateFeedback {
    fn estimate(&mut self, _time_s: f64, measured: &DVector<f64>) -> DVector<f64> {
        measured.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Seed each solve with the shifted previous solution.
    pub warm_start: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { warm_start: true }
    }
}

/// One control step. Rates and temperatures refer to the start of the step.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub time_s: f64,
    /// Control applied over `[time_s, time_s + t_c)`.
    pub control: ControlInput,
    /// True plant state.
    pub state: DVector<f64>,
    pub heat_load_w: f64,
    pub cold_plate_c: f64,
    /// `None` without storage.
    pub state_of_charge: Option<f64>,
    pub cost: CostBreakdown,
    pub iterations: usize,
    pub objective_evaluations: usize,
    pub kkt_residual: f64,
    pub status: SolveStatus,
    pub fallback_events: usize,
    pub solve_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub time_s: f64,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub mode: PlantMode,
    pub step_s: f64,
    /// Plant the run was simulated with.
    pub params: SystemParams,
    pub chiller_temperature_c: f64,
    pub records: Vec<RunRecord>,
    /// Set when the run stopped early; `records` then holds the partial log.
    pub failure: Option<RunFailure>,
    pub plant_steps: usize,
    pub wall_time_s: f64,
}

impl RunLog {
    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time_s).collect()
    }

    pub fn cold_plate_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cold_plate_c).collect()
    }

    pub fn peak_cold_plate_c(&self) -> f64 {
        self.records.iter().map(|r| r.cold_plate_c).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn has_tes(&self) -> bool {
        self.mode == PlantMode::Hybrid
    }
}

pub fn run_closed_loop(scenario: &Scenario, params: &SystemParams, cfg: &NmpcConfig) -> Result<RunLog> {
    run_closed_loop_with(scenario, params, cfg, RunOptions::default(), &mut FullStateFeedback)
}

/// Runs the controller against the truth plant. Setup problems are errors;
/// a failure during the run is recorded in [`RunLog::failure`] and the
/// records up to that point are kept.
pub fn run_closed_loop_with(
    scenario: &Scenario,
    params: &SystemParams,
    cfg: &NmpcConfig,
    options: RunOptions,
    estimator: &mut dyn StateEstimator,
) -> Result<RunLog> {
    scenario.validate()?;
    cfg.validate()?;
    let clock = Instant::now();
    let (plant_params, cfg) = scenario.configure(params, cfg);
    let model = ThermalModel::new(plant_params.clone())?;
    let nmpc = Nmpc::new(model.clone(), cfg.clone())?;
    let mut plant = ReferenceIntegrator::new(&model, ReferenceConfig::with_tolerance(scenario.plant_tolerance))?;

    let steps = scenario.step_count(cfg.step_s);
    if (steps as f64 * cfg.step_s - scenario.duration_s).abs() > 1e-9 * scenario.duration_s {
        return Err(Error::Input(format!(
            "duration {} s is not a multiple of the control step {} s",
            scenario.duration_s, cfg.step_s
        )));
    }
    let switches = scenario.switch_times();
    let mut log = RunLog {
        mode: scenario.mode,
        step_s: cfg.step_s,
        params: plant_params,
        chiller_temperature_c: scenario.chiller_temperature_c,
        records: Vec::with_capacity(steps + 1),
        failure: None,
        plant_steps: 0,
        wall_time_s: 0.0,
    };
    let mut x = model.uniform_state(scenario.initial_temperature_c);
    let mut u_prev = vec![cfg.min_flow_kgps; cfg.input_count()];
    let mut previous: Option<HorizonSolution> = None;

    for k in 0..=steps {
        let t = k as f64 * cfg.step_s;
        let estimate = estimator.estimate(t, &x);
        let forecast = scenario.forecast(t, cfg.horizon_steps, cfg.step_s, cfg.preview);
        let warm = match (&previous, options.warm_start) {
            (Some(p), true) => Some(warm_start_shift(p)),
            _ => None,
        };
        let solved = nmpc.solve(&estimate, &forecast, warm.as_deref(), &u_prev);
        let sol = match solved {
            Ok(s) => s,
            Err(e) => {
                warn!("controller failed at t = {t} s: {e}");
                log.failure = Some(RunFailure { time_s: t, message: e.to_string() });
                break;
            }
        };
        let u = sol.first_control();
        log.records.push(RunRecord {
            time_s: t,
            control: u,
            state: x.clone(),
            heat_load_w: scenario.heat_load_w(t),
            cold_plate_c: x[Layout::COLD_PLATE_WALL],
            state_of_charge: model.layout().has_tes().then(|| 1.0 - model.mean_melt_fraction(&x)),
            cost: sol.cost,
            iterations: sol.iterations,
            objective_evaluations: sol.objective_evaluations,
            kkt_residual: sol.kkt_residual,
            status: sol.status,
            fallback_events: sol.fallback_events,
            solve_time_s: sol.solve_time_s,
        });
        if k == steps {
            break;
        }

        // advance the plant, splitting at load switches inside the step
        let t_end = t + cfg.step_s;
        let mut t0 = t;
        let mut result = Ok(());
        for s in switches.iter().copied().filter(|&s| s > t && s < t_end).chain([t_end]) {
            match plant.advance(&x, &u, &scenario.disturbance(t0), t0, s - t0, None) {
                Ok(next) => x = next,
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
            t0 = s;
        }
        if let Err(e) = result {
            warn!("plant integration failed in [{t}, {t_end}] s: {e}");
            log.failure = Some(RunFailure { time_s: t0, message: e.to_string() });
            break;
        }
        u_prev = sol.step(0).to_vec();
        previous = Some(sol);
    }
    log.plant_steps = plant.accepted_steps;
    log.wall_time_s = clock.elapsed().as_secs_f64();
    info!(
        "{} run: {} records, {} plant steps, {:.1} s",
        scenario.mode.label(),
        log.records.len(),
        log.plant_steps,
        log.wall_time_s
    );
    Ok(log)
}

/// Hybrid versus storage-free comparison on the same disturbances.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub hybrid_peak_c: f64,
    pub no_tes_peak_c: f64,
    /// `no_tes_peak_c - hybrid_peak_c`.
    pub peak_reduction_c: f64,
    /// Largest pointwise gap `T_no_tes(t) - T_hybrid(t)`.
    pub peak_difference_c: f64,
    pub peak_difference_time_s: f64,
    pub hybrid_mean_total_flow_kgps: f64,
    pub no_tes_mean_total_flow_kgps: f64,
    /// `(time, hybrid total flow, no-TES total flow)`.
    pub flow_series: Vec<(f64, f64, f64)>,
    /// `(time, hybrid T_cp, no-TES T_cp)`.
    pub cold_plate_series: Vec<(f64, f64, f64)>,
}

impl ComparisonReport {
    pub fn from_logs(hybrid: &RunLog, no_tes: &RunLog) -> Self {
        let n = hybrid.records.len().min(no_tes.records.len());
        let pairs = || hybrid.records[..n].iter().zip(&no_tes.records[..n]);
        let (mut gap, mut gap_t) = (f64::NEG_INFINITY, 0.0);
        for (h, o) in pairs() {
            let g = o.cold_plate_c - h.cold_plate_c;
            if g > gap {
                gap = g;
                gap_t = h.time_s;
            }
        }
        let mean = |log: &RunLog| {
            let r = &log.records[..n];
            r.iter().map(|r| r.control.total_kgps()).sum::<f64>() / r.len().max(1) as f64
        };
        Self {
            hybrid_peak_c: hybrid.peak_cold_plate_c(),
            no_tes_peak_c: no_tes.peak_cold_plate_c(),
            peak_reduction_c: no_tes.peak_cold_plate_c() - hybrid.peak_cold_plate_c(),
            peak_difference_c: gap,
            peak_difference_time_s: gap_t,
            hybrid_mean_total_flow_kgps: mean(hybrid),
            no_tes_mean_total_flow_kgps: mean(no_tes),
            flow_series: pairs()
                .map(|(h, o)| (h.time_s, h.control.total_kgps(), o.control.total_kgps()))
                .collect(),
            cold_plate_series: pairs().map(|(h, o)| (h.time_s, h.cold_plate_c, o.cold_plate_c)).collect(),
        }
    }
}

/// Runs the hybrid and the storage-free configuration concurrently.
pub fn run_comparison(
    scenario: &Scenario,
    params: &SystemParams,
    cfg: &NmpcConfig,
) -> Result<(RunLog, RunLog, ComparisonReport)> {
    let hybrid = Scenario { mode: PlantMode::Hybrid, ..scenario.clone() };
    let no_tes = Scenario { mode: PlantMode::NoTes, ..scenario.clone() };
    let (a, b) = std::thread::scope(|s| {
        let h = s.spawn(|| run_closed_loop(&hybrid, params, cfg));
        let n = run_closed_loop(&no_tes, params, cfg);
        (h.join().expect("hybrid run panicked"), n)
    });
    let (a, b) = (a?, b?);
    let report = ComparisonReport::from_logs(&a, &b);
    Ok((a, b, report))
}
