//! Independent oracles shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use tesmpc_core::nmpc::{cost_power, cost_temperature_limit, cost_thermal_endurance, ControlMode, NmpcConfig};
use tesmpc_core::{ControlInput, DisturbanceInput, Layout, ThermalModel};

/// Matrix exponential by scaling, a long Taylor series and squaring.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = a.abs().row_sum().max();
    let s = if norm > 0.25 { (norm / 0.25).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(s);
    let n = a.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..40 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Exact solution of `ẋ = A x + b` after `t` seconds.
pub fn affine_exact(a: &DMatrix<f64>, b: &DVector<f64>, x0: &DVector<f64>, t: f64) -> DVector<f64> {
    let n = a.nrows();
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * t));
    aug.view_mut((0, n), (n, 1)).copy_from(&(b * t));
    let mut x = x0.clone().insert_row(n, 1.0);
    x = expm(&aug) * x;
    x.rows(0, n).into_owned()
}

pub fn control(cfg: &NmpcConfig, u: &[f64], k: usize) -> ControlInput {
    match cfg.mode {
        ControlMode::Hybrid => ControlInput::new(u[2 * k], u[2 * k + 1]),
        ControlMode::BypassOnly => ControlInput::new(u[k], 0.0),
    }
}

/// Horizon cost written out from the cost definitions, with the dynamics
/// of step `k` linearized at `anchors[k]` instead of the running state, so
/// only the flow dependence of each step is live. Each step is the
/// trapezoidal rule solved exactly.
pub fn frozen_rollout_cost(
    model: &ThermalModel,
    cfg: &NmpcConfig,
    anchors: &[DVector<f64>],
    u: &[f64],
    forecast: &[DisturbanceInput],
    u_prev: &[f64],
) -> f64 {
    let n = model.dim();
    let h = cfg.step_s;
    let penalty = cfg.penalty();
    let nu = cfg.input_count();
    let tes = model.layout().tes_range();
    let mut x = anchors[0].clone();
    let mut j = 0.0;
    for k in 0..cfg.horizon_steps {
        let lin = model.linearize(&anchors[k], &control(cfg, u, k), &forecast[k]).unwrap();
        let lhs = DMatrix::identity(n, n) - &lin.a * (0.5 * h);
        let rhs = &x + (&lin.a * &x) * (0.5 * h) + &lin.d_tilde * h;
        x = lhs.lu().solve(&rhs).unwrap();
        j += cost_temperature_limit(x[Layout::COLD_PLATE_WALL], &penalty);
        if cfg.mode == ControlMode::Hybrid {
            let temps: Vec<f64> = tes.clone().map(|i| x[i]).collect();
            j += cost_thermal_endurance(&temps, forecast[k].chiller_temperature_c, cfg.endurance_weight);
        }
        let step = &u[k * nu..(k + 1) * nu];
        let prev = if k == 0 { u_prev } else { &u[(k - 1) * nu..k * nu] };
        j += cost_power(step, cfg.power_weight);
        j += cfg.move_weight * step.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    j
}

/// Random previous control and horizon satisfying the input constraints,
/// with every flow in `[min, max_total / n_u]`.
pub fn random_feasible<R: Rng>(cfg: &NmpcConfig, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let nu = cfg.input_count();
    let lo = cfg.min_flow_kgps;
    let hi = cfg.max_total_flow_kgps / nu as f64;
    let du = cfg.max_flow_change_kgps;
    let u_prev: Vec<f64> = (0..nu).map(|_| rng.random_range(lo..hi)).collect();
    let mut u = Vec::with_capacity(cfg.variable_count());
    let mut last = u_prev.clone();
    for _ in 0..cfg.horizon_steps {
        for l in last.iter_mut() {
            *l = (*l + rng.random_range(-du..du)).clamp(lo, hi);
        }
        u.extend_from_slice(&last);
    }
    (u_prev, u)
}

/// Largest violation of the sum, lower-bound and rate constraints by a
/// sequence of applied controls, the first judged against `u_prev`.
pub fn applied_violation(cfg: &NmpcConfig, u_prev: &[f64], applied: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    let mut prev = u_prev.to_vec();
    for u in applied {
        let sum: f64 = u.iter().sum();
        worst = worst.max(sum - cfg.max_total_flow_kgps);
        for (j, &v) in u.iter().enumerate() {
            worst = worst.max(cfg.min_flow_kgps - v);
            worst = worst.max((v - prev[j]).abs() - cfg.max_flow_change_kgps);
        }
        prev = u.clone();
    }
    worst
}

/// Energy balances of the tank, cold plate and heat exchanger nodes, term
/// by term [W].
pub fn lumped_balances(model: &ThermalModel, x: &DVector<f64>, u: &ControlInput, d: &DisturbanceInput) -> [f64; 5] {
    let p = model.params();
    let l = &p.lumped;
    let cp = p.fluid.specific_heat_j_per_kg_k;
    let m = u.total_kgps();
    let (t_tf, t_cp, t_cpf, t_hx, t_hxf) = (x[0], x[1], x[2], x[3], x[4]);
    let t_in = if model.layout().has_tes() && m > 0.0 {
        let outlet = x[model.layout().tes_outlet().unwrap()];
        (u.bypass_kgps * t_hxf + u.tes_kgps * outlet) / m
    } else {
        t_hxf
    };
    [
        m * cp * (t_in - t_tf),
        l.cold_plate_ha_w_per_k * (t_cpf - t_cp) + d.cold_plate_heat_w,
        l.cold_plate_ha_w_per_k * (t_cp - t_cpf) + m * cp * (t_tf - t_cpf),
        l.hx_ha_w_per_k * (t_hxf - t_hx) + l.chiller_ha_w_per_k * (d.chiller_temperature_c - t_hx),
        l.hx_ha_w_per_k * (t_hx - t_hxf) + m * cp * (t_cpf - t_hxf),
    ]
}

/// A plausible mid-transient plant state: a warm cold plate, partly melted
/// storage graded along the flow path.
pub fn nominal_state(model: &ThermalModel) -> DVector<f64> {
    let lay = *model.layout();
    let mut x = model.uniform_state(14.0);
    x[Layout::TANK] = 16.0;
    x[Layout::COLD_PLATE_WALL] = 40.0;
    x[Layout::COLD_PLATE_FLUID] = 24.0;
    x[Layout::HX_WALL] = 13.0;
    x[Layout::HX_FLUID] = 19.0;
    for d in 0..lay.devices() {
        for c in 0..lay.columns() {
            let s = (d * lay.columns() + c) as f64;
            x[lay.fluid(d, c)] = 19.0 - 0.1 * s;
            x[lay.plate(d, c)] = 18.8 - 0.1 * s;
            for r in 0..lay.pcm_rows() {
                x[lay.pcm(d, r, c)] = 18.6 - 0.1 * s - 0.15 * r as f64;
            }
        }
    }
    x
}

/// Forecast with a pulse of `power_w` from step `start` on.
pub fn pulse_forecast(steps: usize, start: usize, power_w: f64, chiller_c: f64) -> Vec<DisturbanceInput> {
    (0..steps)
        .map(|k| DisturbanceInput::new(if k >= start { power_w } else { 0.0 }, chiller_c))
        .collect()
}

/// Plant state reached from a uniform 8.5 C start after `t` seconds under
/// constant inputs.
pub fn plant_state(model: &ThermalModel, u: &ControlInput, d: &DisturbanceInput, t: f64) -> DVector<f64> {
    use tesmpc_core::reference::{reference_integrate, PiecewiseConstant};
    let traj = reference_integrate(
        model,
        &model.uniform_state(8.5),
        &PiecewiseConstant::constant(*u),
        &PiecewiseConstant::constant(*d),
        t,
        1e-8,
    )
    .unwrap();
    traj.last_state().clone()
}

/// Largest eigenvalue magnitude of `a`.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.clone().complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max)
}

/// One-step error of the linear IRK step against the exponential of the
/// augmented generator, for each step size.
pub fn one_step_errors(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>, steps: &[f64]) -> Vec<f64> {
    use tesmpc_core::integrator::{initial_inverse, linear_irk_step, IntegratorConfig};
    steps
        .iter()
        .map(|&h| {
            let cfg = IntegratorConfig { step_s: h, ..IntegratorConfig::default() };
            let inv = initial_inverse(a, b, &cfg).unwrap();
            let step = linear_irk_step(x, a, b, &inv, &cfg).unwrap();
            (step.x_next - affine_exact(a, b, x, h)).amax()
        })
        .collect()
}

/// Worst componentwise relative error of the adjoint gradient against
/// central differences of [`frozen_rollout_cost`].
pub fn gradient_error(
    model: &ThermalModel,
    cfg: &NmpcConfig,
    x0: &DVector<f64>,
    forecast: &[DisturbanceInput],
    u_prev: &[f64],
    u: &[f64],
    h: f64,
) -> f64 {
    let pred = tesmpc_core::nmpc::Predictor::new(model.clone(), cfg.clone()).unwrap();
    let eval = pred.evaluate(u, x0, forecast, u_prev).unwrap();
    let anchors = &eval.states[..cfg.horizon_steps];
    let scale = eval.gradient.amax();
    let mut worst = 0.0f64;
    for i in 0..u.len() {
        let mut up = u.to_vec();
        let mut dn = u.to_vec();
        up[i] += h;
        dn[i] -= h;
        let fd = (frozen_rollout_cost(model, cfg, anchors, &up, forecast, u_prev)
            - frozen_rollout_cost(model, cfg, anchors, &dn, forecast, u_prev))
            / (2.0 * h);
        worst = worst.max((eval.gradient[i] - fd).abs() / fd.abs().max(1e-9 * scale));
    }
    worst
}
