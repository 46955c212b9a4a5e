//! SQP over the input polytope.
//!
//! The subproblem Hessian is the exact Hessian of the flow costs plus a
//! Gauss–Newton model of the state costs, either rebuilt at every iterate or
//! used as the start of a damped BFGS sequence.
//!
//! Decision variables are divided by the typical flow and the objective by
//! the ∞-norm of its gradient at the starting point. Optimality is measured
//! as the QP's projected gradient relative to the current gradient. Because
//! every constraint is linear and the iterates start feasible, each accepted
//! point stays feasible and the objective itself serves as the merit
//! function.

use std::time::Instant;

use log::debug;
use nalgebra::{DMatrix, DVector};

use super::objective::{CostBreakdown, ObjectiveEvaluation, Predictor};
use super::qp::solve_qp;
use super::{constraint_set, ConstraintSet, HessianMode, LinearConstraint, NmpcConfig};
use crate::error::{Error, Result};
use crate::model::{ControlInput, DisturbanceInput, ThermalModel};

const ARMIJO: f64 = 1e-4;
const MIN_STEP_FRACTION: f64 = 1.0 / 1024.0;
const QP_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// First-order optimality within tolerance.
    Optimal,
    /// The step fell below the step tolerance.
    StepTolerance,
    /// No sufficient decrease along the QP direction.
    LineSearchStalled,
    /// Iteration cap hit; the best iterate is returned.
    MaxIterations,
}

impl SolveStatus {
    pub fn label(self) -> &'static str {
        match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::StepTolerance => "step-tolerance",
            SolveStatus::LineSearchStalled => "line-search-stalled",
            SolveStatus::MaxIterations => "max-iterations",
        }
    }
}

#[derive(Debug, Clone)]
pub struct HorizonSolution {
    /// Stacked controls `[u_0; u_1; ...]` [kg/s].
    pub controls: Vec<f64>,
    pub input_count: usize,
    /// `x_0 .. x_N`.
    pub predicted_states: Vec<DVector<f64>>,
    pub cost: CostBreakdown,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub objective_evaluations: usize,
    /// `‖H p‖_∞ / ‖g‖_∞` of the last QP: the projected gradient relative to
    /// the gradient.
    pub kkt_residual: f64,
    pub solve_time_s: f64,
    pub fallback_events: usize,
    pub status: SolveStatus,
    /// The previously applied control the rate limits were built around.
    pub previous_control: Vec<f64>,
}

impl HorizonSolution {
    pub fn horizon_steps(&self) -> usize {
        self.controls.len() / self.input_count
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.controls[k * self.input_count..(k + 1) * self.input_count]
    }

    pub fn control(&self, k: usize) -> ControlInput {
        let s = self.step(k);
        ControlInput::new(s[0], if self.input_count > 1 { s[1] } else { 0.0 })
    }

    pub fn first_control(&self) -> ControlInput {
        self.control(0)
    }
}

/// Drops the first step and repeats the last one.
pub fn warm_start_shift(prev: &HorizonSolution) -> Vec<f64> {
    let nu = prev.input_count;
    let mut u = prev.controls[nu..].to_vec();
    u.extend_from_slice(prev.step(prev.horizon_steps() - 1));
    u
}

/// Damped BFGS update of the Hessian approximation. Returns `false` when
/// the update broke down and the caller should reset the matrix.
fn bfgs_update(h: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) -> bool {
    let hs = &*h * s;
    let shs = s.dot(&hs);
    if !(shs > 1e-300) {
        return false;
    }
    let sy = s.dot(y);
    // Powell damping keeps sᵀr >= 0.2 sᵀHs
    let theta = if sy >= 0.2 * shs { 1.0 } else { 0.8 * shs / (shs - sy) };
    let r = y * theta + &hs * (1.0 - theta);
    let sr = s.dot(&r);
    if !(sr > 0.0) {
        return false;
    }
    h.ger(1.0 / sr, &r, &r, 1.0);
    h.ger(-1.0 / shs, &hs, &hs, 1.0);
    h.diagonal().iter().all(|v| v.is_finite() && *v > 0.0)
}

/// NMPC controller: prediction model, costs and the SQP solver.
#[derive(Debug, Clone)]
pub struct Nmpc {
    predictor: Predictor,
}

impl Nmpc {
    pub fn new(model: ThermalModel, cfg: NmpcConfig) -> Result<Self> {
        cfg.penalty().check_continuity(1e-9)?;
        Ok(Self {
            predictor: Predictor::new(model, cfg)?,
        })
    }

    pub fn predictor(&self) -> &Predictor {
        &self.predictor
    }

    pub fn config(&self) -> &NmpcConfig {
        self.predictor.config()
    }

    pub fn constraints(&self, u_prev: &[f64]) -> Result<ConstraintSet> {
        constraint_set(self.config(), u_prev)
    }

    /// A feasible stacked control close to `u_prev`: every step equals
    /// `u_prev` pulled into the bounds.
    fn feasible_start(&self, u_prev: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.config();
        let mut u: Vec<f64> = u_prev.iter().map(|&v| v.max(cfg.min_flow_kgps)).collect();
        let total: f64 = u.iter().sum();
        if total > cfg.max_total_flow_kgps {
            let excess = total - cfg.max_total_flow_kgps;
            let room: f64 = u.iter().map(|v| v - cfg.min_flow_kgps).sum();
            for v in &mut u {
                *v -= excess * (*v - cfg.min_flow_kgps) / room;
            }
        }
        if u.iter().zip(u_prev).any(|(a, b)| (a - b).abs() > cfg.max_flow_change_kgps) {
            return Err(Error::Infeasible(format!(
                "previous control {u_prev:?} is too far outside the input bounds"
            )));
        }
        Ok(u.repeat(cfg.horizon_steps))
    }

    /// Constraint rows for a step `p` in scaled variables around `u`.
    fn relative_rows(&self, set: &ConstraintSet, u: &[f64]) -> Vec<LinearConstraint> {
        let s = self.config().typical_flow_kgps;
        set.rows
            .iter()
            .map(|r| {
                let v = r.eval(u);
                LinearConstraint {
                    coefficients: r.coefficients.iter().map(|&(i, c)| (i, c * s)).collect(),
                    lower: (r.lower - v).min(0.0),
                    upper: (r.upper - v).max(0.0),
                }
            })
            .collect()
    }

    /// Euclidean projection of `u` onto the input polytope.
    pub fn project(&self, u: &[f64], u_prev: &[f64]) -> Result<Vec<f64>> {
        let set = self.constraints(u_prev)?;
        if u.len() != set.variable_count {
            return Err(Error::Dimension { expected: set.variable_count, got: u.len() });
        }
        if set.is_satisfied(u, 0.0) {
            return Ok(u.to_vec());
        }
        let start = self.feasible_start(u_prev)?;
        let s = self.config().typical_flow_kgps;
        let n = u.len();
        let g = DVector::from_fn(n, |i, _| (start[i] - u[i]) / s);
        let rows = self.relative_rows(&set, &start);
        let qp = solve_qp(&DMatrix::identity(n, n), &g, &rows, &[], QP_ITERATIONS)?;
        Ok((0..n).map(|i| start[i] + s * qp.step[i]).collect())
    }

    /// Optimizes the horizon from `x0`. `u_warm` defaults to holding
    /// `u_prev`; it is projected onto the constraints first.
    pub fn solve(
        &self,
        x0: &DVector<f64>,
        forecast: &[DisturbanceInput],
        u_warm: Option<&[f64]>,
        u_prev: &[f64],
    ) -> Result<HorizonSolution> {
        let clock = Instant::now();
        let cfg = self.config();
        let pred = &self.predictor;
        let set = self.constraints(u_prev)?;
        let mut u = match u_warm {
            Some(w) => self.project(w, u_prev)?,
            None => self.feasible_start(u_prev)?,
        };
        let n = u.len();
        let s = cfg.typical_flow_kgps;

        let gauss_newton = cfg.hessian == HessianMode::GaussNewton;
        let evaluate = |u: &[f64]| -> Result<(ObjectiveEvaluation, Option<DMatrix<f64>>)> {
            if gauss_newton {
                let (e, h) = pred.evaluate_with_curvature(u, x0, forecast, u_prev)?;
                Ok((e, Some(h)))
            } else {
                Ok((pred.evaluate(u, x0, forecast, u_prev)?, None))
            }
        };
        let (mut eval, ggn) = evaluate(&u)?;
        let mut evaluations = 1;
        let mut fallbacks = eval.fallback_events;
        let obj_scale = 1.0 / (s * eval.gradient.amax()).max(1e-12);
        let hess_scale = s * s * obj_scale;
        let scaled_grad = |e: &ObjectiveEvaluation| &e.gradient * (s * obj_scale);
        let mut g = scaled_grad(&eval);
        let mut h = match ggn {
            Some(h) => h * hess_scale,
            None => pred.gauss_newton_hessian(&u, x0, forecast, u_prev)? * hess_scale,
        };
        let mut active: Vec<(usize, f64)> = Vec::new();
        let mut status = SolveStatus::MaxIterations;
        let mut kkt = f64::INFINITY;
        let mut iterations = 0;

        while iterations < cfg.max_iterations {
            iterations += 1;
            let rows = self.relative_rows(&set, &u);
            let qp = solve_qp(&h, &g, &rows, &active, QP_ITERATIONS)?;
            let p = qp.step;
            active = qp.active;
            // projected gradient relative to the gradient itself, so the
            // test is independent of how large the cost currently is
            kkt = (&h * &p).amax() / g.amax().max(1e-300);
            if kkt <= cfg.optimality_tolerance {
                status = SolveStatus::Optimal;
                break;
            }
            if p.amax() <= cfg.step_tolerance {
                status = SolveStatus::StepTolerance;
                break;
            }
            let slope = g.dot(&p);
            let f0 = eval.total() * obj_scale;
            let mut alpha = 1.0;
            let accepted = loop {
                let trial: Vec<f64> = (0..n).map(|i| (u[i] + alpha * s * p[i]).max(0.0)).collect();
                let (e, ggn) = evaluate(&trial)?;
                evaluations += 1;
                fallbacks += e.fallback_events;
                if e.total() * obj_scale <= f0 + ARMIJO * alpha * slope {
                    break Some((trial, e, ggn));
                }
                alpha *= 0.5;
                if alpha < MIN_STEP_FRACTION {
                    break None;
                }
            };
            let Some((trial, e, ggn)) = accepted else {
                status = SolveStatus::LineSearchStalled;
                break;
            };
            let step = &p * alpha;
            let g_new = scaled_grad(&e);
            let y = &g_new - &g;
            h = match ggn {
                Some(m) => m * hess_scale,
                None if bfgs_update(&mut h, &step, &y) => h,
                None => pred.gauss_newton_hessian(&trial, x0, forecast, u_prev)? * hess_scale,
            };
            u = trial;
            eval = e;
            g = g_new;
            if step.amax() <= cfg.step_tolerance {
                status = SolveStatus::StepTolerance;
                break;
            }
        }
        if status == SolveStatus::MaxIterations {
            debug!("SQP hit the iteration cap ({} iterations)", cfg.max_iterations);
        }
        Ok(HorizonSolution {
            controls: u,
            input_count: cfg.input_count(),
            predicted_states: eval.states,
            cost: eval.cost,
            gradient: eval.gradient,
            iterations,
            objective_evaluations: evaluations,
            kkt_residual: kkt,
            solve_time_s: clock.elapsed().as_secs_f64(),
            fallback_events: fallbacks,
            status,
            previous_control: u_prev.to_vec(),
        })
    }
}
