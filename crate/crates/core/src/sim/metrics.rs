use super::{RunLog, Scenario};
use crate::error::Result;
use crate::model::{Layout, ThermalModel};

/// Below this total transfer rate the storage share is left undefined [W].
pub const RATIO_FLOOR_W: f64 = 1.0;

/// Heat removed from the primary fluid by each path.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatSplit {
    pub times: Vec<f64>,
    /// Into the storage devices; negative while they release heat [W].
    pub tes_w: Vec<f64>,
    /// Into the heat exchanger [W].
    pub hx_w: Vec<f64>,
    /// `tes / (tes + hx)`; `None` where the denominator is not positive.
    pub ratio: Vec<Option<f64>>,
}

/// Advective heat transfer rates evaluated at every record.
pub fn compute_heat_split(log: &RunLog) -> HeatSplit {
    let cp = log.params.fluid.specific_heat_j_per_kg_k;
    let outlet = Layout::new(&log.params).tes_outlet();
    let mut split = HeatSplit {
        times: Vec::with_capacity(log.records.len()),
        tes_w: Vec::with_capacity(log.records.len()),
        hx_w: Vec::with_capacity(log.records.len()),
        ratio: Vec::with_capacity(log.records.len()),
    };
    for r in &log.records {
        let x = &r.state;
        let hx = r.control.total_kgps() * cp * (x[Layout::COLD_PLATE_FLUID] - x[Layout::HX_FLUID]);
        let tes = match outlet {
            Some(o) => r.control.tes_kgps * cp * (x[Layout::HX_FLUID] - x[o]),
            None => 0.0,
        };
        let total = tes + hx;
        split.times.push(r.time_s);
        split.tes_w.push(tes);
        split.hx_w.push(hx);
        split.ratio.push((total > RATIO_FLOOR_W).then(|| tes / total));
    }
    split
}

/// Energy bookkeeping over a run [J].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBalance {
    pub heat_input_j: f64,
    pub chiller_rejection_j: f64,
    pub storage_change_j: f64,
    /// `input - rejection - storage change`.
    pub residual_j: f64,
}

impl EnergyBalance {
    /// Residual relative to the heat input.
    pub fn relative_residual(&self) -> f64 {
        self.residual_j.abs() / self.heat_input_j.abs().max(f64::MIN_POSITIVE)
    }
}

/// Compares the integrated load and chiller rejection with the change in
/// stored enthalpy. The load is piecewise constant over each step; the
/// chiller flux is integrated with the trapezoidal rule on the records.
pub fn energy_balance(log: &RunLog, scenario: &Scenario) -> Result<EnergyBalance> {
    let model = ThermalModel::new(log.params.clone())?;
    let ha = log.params.lumped.chiller_ha_w_per_k;
    let flux = |x: &nalgebra::DVector<f64>| ha * (x[Layout::HX_WALL] - log.chiller_temperature_c);
    let mut heat = 0.0;
    let mut chiller = 0.0;
    for w in log.records.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let dt = b.time_s - a.time_s;
        let mut t = a.time_s;
        // exact integral of the load, including switches inside the step
        for s in scenario
            .switch_times()
            .into_iter()
            .filter(|&s| s > a.time_s && s < b.time_s)
            .chain([b.time_s])
        {
            heat += scenario.heat_load_w(t) * (s - t);
            t = s;
        }
        chiller += 0.5 * dt * (flux(&a.state) + flux(&b.state));
    }
    let storage = match (log.records.first(), log.records.last()) {
        (Some(first), Some(last)) => model.enthalpy(&last.state) - model.enthalpy(&first.state),
        _ => 0.0,
    };
    Ok(EnergyBalance {
        heat_input_j: heat,
        chiller_rejection_j: chiller,
        storage_change_j: storage,
        residual_j: heat - chiller - storage,
    })
}

/// Intervals without load that start `settle_s` after a pulse ends and end
/// when the next pulse starts (or the run ends).
pub fn recharge_windows(scenario: &Scenario, settle_s: f64) -> Vec<(f64, f64)> {
    let mut pulses = scenario.pulses.clone();
    pulses.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    pulses
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let start = p.end_s + settle_s;
            let end = pulses.get(i + 1).map_or(scenario.duration_s, |n| n.start_s);
            (end > start).then_some((start, end))
        })
        .collect()
}

/// Distribution of the controller wall time per step.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingSummary {
    pub count: usize,
    pub min_s: f64,
    pub median_s: f64,
    pub p95_s: f64,
    pub max_s: f64,
    pub mean_s: f64,
    pub deadline_s: f64,
    /// Steps whose solve took longer than the deadline.
    pub deadline_misses: usize,
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn profile_execution(log: &RunLog) -> TimingSummary {
    let mut t: Vec<f64> = log.records.iter().map(|r| r.solve_time_s).collect();
    t.sort_by(f64::total_cmp);
    let n = t.len();
    let median = if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        t[n / 2]
    } else {
        0.5 * (t[n / 2 - 1] + t[n / 2])
    };
    TimingSummary {
        count: n,
        min_s: t.first().copied().unwrap_or(f64::NAN),
        median_s: median,
        p95_s: percentile(&t, 0.95),
        max_s: t.last().copied().unwrap_or(f64::NAN),
        mean_s: if n == 0 { f64::NAN } else { t.iter().sum::<f64>() / n as f64 },
        deadline_s: log.step_s,
        deadline_misses: t.iter().filter(|&&v| v > log.step_s).count(),
    }
}
