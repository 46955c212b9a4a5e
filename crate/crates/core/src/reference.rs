//! High-accuracy truth integrator for the nonlinear plant.
//!
//! Each step solves the implicit trapezoidal rule in enthalpy form,
//! `H(y) - H(x) = h/2 (F(x) + F(y))` with `F = C(x) x + B d`, so the stored
//! energy of a closed network is conserved to the Newton tolerance. The
//! graph is reassembled at every Newton iterate. Step size is adapted by step
//! doubling, with the error held per unit of simulated time so the global
//! error scales with the tolerance.

use log::trace;
use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{ControlInput, DisturbanceInput, ThermalModel};

/// A right-continuous step function of time.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseConstant<T> {
    pieces: Vec<(f64, T)>,
}

impl<T: Clone> PiecewiseConstant<T> {
    pub fn constant(value: T) -> Self {
        Self {
            pieces: vec![(f64::NEG_INFINITY, value)],
        }
    }

    /// `pieces[i].1` holds from `pieces[i].0` until the next start. Starts
    /// must be strictly increasing; before the first start the first value
    /// applies.
    pub fn new(pieces: Vec<(f64, T)>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::Input("empty piecewise profile".into()));
        }
        if pieces.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(Error::Input("profile start times must increase".into()));
        }
        Ok(Self { pieces })
    }

    pub fn value_at(&self, t: f64) -> &T {
        let idx = self.pieces.partition_point(|(s, _)| *s <= t);
        &self.pieces[idx.saturating_sub(1)].1
    }

    /// First switching time strictly after `t`.
    pub fn next_switch(&self, t: f64) -> Option<f64> {
        self.pieces.iter().map(|(s, _)| *s).find(|&s| s > t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    /// Local error allowed per second of simulated time [K/s].
    pub tolerance: f64,
    pub initial_step_s: f64,
    pub max_step_s: f64,
    /// Below this substep Newton failure is reported as an error.
    pub min_step_s: f64,
    pub max_newton_iterations: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            initial_step_s: 0.01,
            max_step_s: 5.0,
            min_step_s: 1e-9,
            max_newton_iterations: 12,
        }
    }
}

impl ReferenceConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(crate::error::param_err("plant.tolerance", "must be > 0"));
        }
        if !(self.min_step_s > 0.0 && self.min_step_s <= self.initial_step_s && self.initial_step_s <= self.max_step_s) {
            return Err(crate::error::param_err(
                "plant.step",
                "need 0 < min_step_s <= initial_step_s <= max_step_s",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds the initial state")
    }

    /// Linear interpolation between accepted steps.
    pub fn sample(&self, t: f64) -> DVector<f64> {
        let idx = self.times.partition_point(|&s| s <= t);
        if idx == 0 {
            return self.states[0].clone();
        }
        if idx >= self.times.len() {
            return self.last_state().clone();
        }
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        let w = (t - t0) / (t1 - t0);
        &self.states[idx - 1] * (1.0 - w) + &self.states[idx] * w
    }
}

/// Stateful integrator that keeps its step-size estimate between calls.
#[derive(Debug, Clone)]
pub struct ReferenceIntegrator<'m> {
    model: &'m ThermalModel,
    cfg: ReferenceConfig,
    step_hint: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

impl<'m> ReferenceIntegrator<'m> {
    pub fn new(model: &'m ThermalModel, cfg: ReferenceConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model,
            step_hint: cfg.initial_step_s,
            cfg,
            accepted_steps: 0,
            rejected_steps: 0,
        })
    }

    /// One trapezoidal step of length `h`; `None` when Newton stalls.
    fn trapezoid(
        &self,
        x: &DVector<f64>,
        f_x: &DVector<f64>,
        h_x: &DVector<f64>,
        u: &ControlInput,
        d: &[f64; 2],
        h: f64,
    ) -> Option<DVector<f64>> {
        let n = x.len();
        let mut y = x.clone();
        let mut lu = None;
        for it in 0..self.cfg.max_newton_iterations {
            let g = self.model.assemble_unchecked(&y, u);
            let f_y = g.heat_flow(&y, d);
            let r = self.model.node_enthalpy(&y) - h_x - (f_x + &f_y) * (0.5 * h);
            if lu.is_none() || it % 4 == 0 {
                let mut jac = g.conductance() * (-0.5 * h);
                for i in 0..n {
                    jac[(i, i)] += g.capacitance[i];
                }
                lu = Some(jac.lu());
            }
            let delta = lu.as_ref()?.solve(&(-r))?;
            y += &delta;
            if !y.iter().all(|v| v.is_finite()) {
                return None;
            }
            let scale = 1.0 + y.amax();
            if delta.amax() <= 1e-13 * scale {
                return Some(y);
            }
        }
        None
    }

    /// Advances `x` over `[t0, t0 + duration]` with inputs held constant.
    /// Accepted steps are appended to `out` when given.
    pub fn advance(
        &mut self,
        x: &DVector<f64>,
        u: &ControlInput,
        d: &DisturbanceInput,
        t0: f64,
        duration: f64,
        mut out: Option<&mut Trajectory>,
    ) -> Result<DVector<f64>> {
        u.validate()?;
        d.validate()?;
        self.model.check_state(x)?;
        if !self.model.layout().has_tes() && u.tes_kgps != 0.0 {
            return Err(Error::Input("storage flow must be zero for a plant without storage".into()));
        }
        let dv = d.vector(self.model.params());
        let t_end = t0 + duration;
        let mut t = t0;
        let mut x = x.clone();
        let mut h = self.step_hint.min(self.cfg.max_step_s);
        while t_end - t > 1e-12 * t_end.abs().max(1.0) {
            let last = h >= t_end - t;
            let h_try = if last { t_end - t } else { h };
            let g = self.model.assemble_unchecked(&x, u);
            let f_x = g.heat_flow(&x, &dv);
            let h_x = self.model.node_enthalpy(&x);

            let full = self.trapezoid(&x, &f_x, &h_x, u, &dv, h_try);
            let halves = full.as_ref().and_then(|_| {
                let mid = self.trapezoid(&x, &f_x, &h_x, u, &dv, 0.5 * h_try)?;
                let gm = self.model.assemble_unchecked(&mid, u);
                let f_m = gm.heat_flow(&mid, &dv);
                let h_m = self.model.node_enthalpy(&mid);
                self.trapezoid(&mid, &f_m, &h_m, u, &dv, 0.5 * h_try)
            });
            let (full, fine) = match (full, halves) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    self.rejected_steps += 1;
                    h = 0.5 * h_try;
                    if h < self.cfg.min_step_s {
                        return Err(Error::Integration {
                            time_s: t,
                            reason: "Newton iteration did not converge above the substep floor".into(),
                        });
                    }
                    continue;
                }
            };
            let err = (&fine - &full).amax() / 3.0;
            let allowed = self.cfg.tolerance * h_try;
            if err <= allowed {
                t = if last { t_end } else { t + h_try };
                x = fine;
                self.accepted_steps += 1;
                if let Some(o) = out.as_deref_mut() {
                    o.times.push(t);
                    o.states.push(x.clone());
                }
                let grow = if err > 0.0 { 0.9 * (allowed / err).sqrt() } else { 2.0 };
                let next = h_try * grow.clamp(0.2, 2.0);
                // a clipped final step says nothing about the usable size
                h = if last { h.max(next) } else { next }.min(self.cfg.max_step_s);
            } else {
                self.rejected_steps += 1;
                h = 0.5 * h_try;
                if h < self.cfg.min_step_s {
                    return Err(Error::Integration {
                        time_s: t,
                        reason: format!("local error {err:.3e} above tolerance at the substep floor"),
                    });
                }
            }
        }
        trace!("reference step hint {h:.3e} s at t = {t}");
        self.step_hint = h;
        Ok(x)
    }
}

/// Integrates the nonlinear plant from `x0` over `[0, duration]` under
/// piecewise-constant inputs; the trajectory contains every accepted step.
pub fn reference_integrate(
    model: &ThermalModel,
    x0: &DVector<f64>,
    u_profile: &PiecewiseConstant<ControlInput>,
    d_profile: &PiecewiseConstant<DisturbanceInput>,
    duration: f64,
    tol: f64,
) -> Result<Trajectory> {
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(Error::Input(format!("invalid duration {duration}")));
    }
    let mut integ = ReferenceIntegrator::new(model, ReferenceConfig::with_tolerance(tol))?;
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![x0.clone()],
    };
    let mut t = 0.0;
    let mut x = x0.clone();
    while t < duration {
        let next = [u_profile.next_switch(t), d_profile.next_switch(t), Some(duration)]
            .into_iter()
            .flatten()
            .fold(duration, f64::min);
        let u = *u_profile.value_at(t);
        let d = *d_profile.value_at(t);
        x = integ.advance(&x, &u, &d, t, next - t, Some(&mut traj))?;
        t = next;
    }
    Ok(traj)
}

/// Dense `M⁻¹ (C x + B d)` for a state, used by steady-state checks.
pub fn steady_residual(model: &ThermalModel, x: &DVector<f64>, u: &ControlInput, d: &DisturbanceInput) -> Result<DVector<f64>> {
    let lin = model.linearize(x, u, d)?;
    Ok(&lin.a * x + lin.d_tilde)
}
