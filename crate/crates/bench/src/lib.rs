//! Fixtures shared by the benchmarks.

use nalgebra::DVector;
use tesmpc_core::reference::{reference_integrate, PiecewiseConstant};
use tesmpc_core::{ControlInput, DisturbanceInput, SystemParams, ThermalModel};

pub fn default_model() -> ThermalModel {
    ThermalModel::new(SystemParams::default()).expect("default parameters are valid")
}

/// State after `t` seconds under a constant load, starting near the chiller
/// temperature.
pub fn loaded_state(model: &ThermalModel, load_w: f64, t: f64) -> DVector<f64> {
    let u = PiecewiseConstant::constant(ControlInput::new(0.03, 0.03));
    let d = PiecewiseConstant::constant(DisturbanceInput::new(load_w, 8.0));
    reference_integrate(model, &model.uniform_state(8.5), &u, &d, t, 1e-6)
        .expect("reference integration")
        .last_state()
        .clone()
}

/// Pulse of `load_w` from step `start` on.
pub fn pulse_forecast(steps: usize, start: usize, load_w: f64) -> Vec<DisturbanceInput> {
    (0..steps)
        .map(|k| DisturbanceInput::new(if k >= start { load_w } else { 0.0 }, 8.0))
        .collect()
}
