//! Horizon rollout, cost and gradient.

use nalgebra::{DMatrix, DVector};

use super::{ControlMode, InverseMode, NmpcConfig, PenaltyCoefficients};
use crate::error::{Error, Result};
use crate::integrator::{initial_inverse, linear_irk_step, GradientMode, IntegratorConfig};
use crate::model::{ControlInput, DisturbanceInput, InputJacobian, Layout, ThermalModel};

/// Cost split by objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostBreakdown {
    pub temperature_limit: f64,
    pub thermal_endurance: f64,
    pub power: f64,
    pub move_suppression: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.temperature_limit + self.thermal_endurance + self.power + self.move_suppression
    }
}

#[derive(Debug, Clone)]
pub struct ObjectiveEvaluation {
    pub cost: CostBreakdown,
    /// `dJ/dU`, empty when only the cost was requested.
    pub gradient: DVector<f64>,
    /// `x_0 .. x_N`.
    pub states: Vec<DVector<f64>>,
    pub fallback_events: usize,
    /// Largest post-refinement inverse residual bound along the horizon.
    pub max_inverse_residual: f64,
}

impl ObjectiveEvaluation {
    pub fn total(&self) -> f64 {
        self.cost.total()
    }
}

/// States, per-step records, fallback count and worst inverse residual.
type Rollout = (Vec<DVector<f64>>, Vec<StepRecord>, usize, f64);

struct StepRecord {
    transition: DMatrix<f64>,
    block_inverse: DMatrix<f64>,
    jacobians: [InputJacobian; 2],
}

/// Prediction model plus cost definition for one controller.
#[derive(Debug, Clone)]
pub struct Predictor {
    model: ThermalModel,
    cfg: NmpcConfig,
    penalty: PenaltyCoefficients,
    integrator: IntegratorConfig,
}

impl Predictor {
    pub fn new(model: ThermalModel, cfg: NmpcConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == ControlMode::Hybrid && !model.layout().has_tes() {
            return Err(Error::Input(
                "hybrid control needs a prediction model with storage".into(),
            ));
        }
        let penalty = cfg.penalty();
        let integrator = IntegratorConfig {
            step_s: cfg.step_s,
            newton_schulz_iterations: cfg.newton_schulz_iterations,
            fallback_residual: cfg.inverse_fallback_residual,
            augmented: true,
        };
        Ok(Self {
            model,
            cfg,
            penalty,
            integrator,
        })
    }

    pub fn model(&self) -> &ThermalModel {
        &self.model
    }

    pub fn config(&self) -> &NmpcConfig {
        &self.cfg
    }

    pub fn penalty(&self) -> &PenaltyCoefficients {
        &self.penalty
    }

    pub fn integrator_config(&self) -> &IntegratorConfig {
        &self.integrator
    }

    /// Control of step `k` from the stacked decision vector.
    pub fn control_at(&self, u: &[f64], k: usize) -> ControlInput {
        match self.cfg.mode {
            ControlMode::Hybrid => ControlInput::new(u[2 * k], u[2 * k + 1]),
            ControlMode::BypassOnly => ControlInput::new(u[k], 0.0),
        }
    }

    fn check(&self, u: &[f64], x0: &DVector<f64>, forecast: &[DisturbanceInput], u_prev: &[f64]) -> Result<()> {
        let nv = self.cfg.variable_count();
        if u.len() != nv {
            return Err(Error::Dimension { expected: nv, got: u.len() });
        }
        if u_prev.len() != self.cfg.input_count() {
            return Err(Error::Dimension {
                expected: self.cfg.input_count(),
                got: u_prev.len(),
            });
        }
        if forecast.len() != self.cfg.horizon_steps {
            return Err(Error::Dimension {
                expected: self.cfg.horizon_steps,
                got: forecast.len(),
            });
        }
        self.model.check_state(x0)?;
        for d in forecast {
            d.validate()?;
        }
        if let Some(i) = u.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Input(format!("decision variable {i} = {} is not a valid flow", u[i])));
        }
        Ok(())
    }

    /// Stage cost at a predicted state and its gradient with respect to it.
    fn state_cost(&self, x: &DVector<f64>, t_ch: f64, grad: Option<&mut DVector<f64>>) -> (f64, f64) {
        let t_cp = x[Layout::COLD_PLATE_WALL];
        let tl = self.penalty.value(t_cp);
        let q = self.cfg.endurance_weight;
        let range = self.model.layout().tes_range();
        let te = if self.cfg.mode == ControlMode::Hybrid {
            q * x.rows(range.start, range.len()).iter().map(|t| (t - t_ch).powi(2)).sum::<f64>()
        } else {
            0.0
        };
        if let Some(g) = grad {
            g.fill(0.0);
            g[Layout::COLD_PLATE_WALL] = self.penalty.derivative(t_cp);
            if self.cfg.mode == ControlMode::Hybrid {
                for i in range {
                    g[i] = 2.0 * q * (x[i] - t_ch);
                }
            }
        }
        (tl, te)
    }

    fn control_cost(&self, u: &[f64], u_prev: &[f64], grad: Option<&mut DVector<f64>>) -> (f64, f64) {
        let nu = self.cfg.input_count();
        let (ru, rdu) = (self.cfg.power_weight, self.cfg.move_weight);
        let mut power = 0.0;
        let mut moves = 0.0;
        let mut g = grad;
        for k in 0..self.cfg.horizon_steps {
            let step = &u[k * nu..(k + 1) * nu];
            let prev = if k == 0 { u_prev } else { &u[(k - 1) * nu..k * nu] };
            let s: f64 = step.iter().sum();
            power += ru * s * s;
            for j in 0..nu {
                let du = step[j] - prev[j];
                moves += rdu * du * du;
                if let Some(g) = g.as_deref_mut() {
                    g[k * nu + j] += 2.0 * ru * s + 2.0 * rdu * du;
                    if k > 0 {
                        g[(k - 1) * nu + j] -= 2.0 * rdu * du;
                    }
                }
            }
        }
        (power, moves)
    }

    fn rollout(
        &self,
        u: &[f64],
        x0: &DVector<f64>,
        forecast: &[DisturbanceInput],
        keep: bool,
    ) -> Result<Rollout> {
        let n = self.cfg.horizon_steps;
        let mut states = Vec::with_capacity(n + 1);
        let mut records = Vec::with_capacity(if keep { n } else { 0 });
        states.push(x0.clone());
        let mut inverse: Option<DMatrix<f64>> = None;
        let mut fallbacks = 0;
        let mut worst = 0.0f64;
        for k in 0..n {
            let x = &states[k];
            let uk = self.control_at(u, k);
            let lin = self.model.linearize_unchecked(x, &uk, &forecast[k]);
            let prev = match (&inverse, self.cfg.inverse) {
                (Some(inv), InverseMode::NewtonSchulz) => inv.clone(),
                _ => initial_inverse(&lin.a, &lin.d_tilde, &self.integrator)?,
            };
            let step = linear_irk_step(x, &lin.a, &lin.d_tilde, &prev, &self.integrator)?;
            if step.fallback {
                fallbacks += 1;
            }
            worst = worst.max(step.residual_bound);
            if let Some(i) = step.x_next.iter().position(|v| !v.is_finite()) {
                return Err(Error::Objective(format!("predicted state {i} not finite at step {k}")));
            }
            if keep {
                records.push(StepRecord {
                    transition: step.transition.clone(),
                    block_inverse: step.state_block_inverse().into_owned(),
                    jacobians: self.model.input_jacobians_unchecked(x),
                });
            }
            states.push(step.x_next.clone());
            inverse = Some(step.inverse);
        }
        Ok((states, records, fallbacks, worst))
    }

    /// Cost of `u` without the gradient.
    pub fn cost(
        &self,
        u: &[f64],
        x0: &DVector<f64>,
        forecast: &[DisturbanceInput],
        u_prev: &[f64],
    ) -> Result<ObjectiveEvaluation> {
        self.check(u, x0, forecast, u_prev)?;
        let (states, _, fallback_events, max_inverse_residual) = self.rollout(u, x0, forecast, false)?;
        let mut cost = CostBreakdown::default();
        for k in 0..self.cfg.horizon_steps {
            let (tl, te) = self.state_cost(&states[k + 1], forecast[k].chiller_temperature_c, None);
            cost.temperature_limit += tl;
            cost.thermal_endurance += te;
        }
        let (p, m) = self.control_cost(u, u_prev, None);
        cost.power = p;
        cost.move_suppression = m;
        finite(&cost)?;
        Ok(ObjectiveEvaluation {
            cost,
            gradient: DVector::zeros(0),
            states,
            fallback_events,
            max_inverse_residual,
        })
    }

    /// `∂x_{k+1}/∂u_{j,k}` contracted with an adjoint vector.
    fn input_sensitivity(&self, rec: &StepRecord, x: &DVector<f64>, x_next: &DVector<f64>, j: usize, lambda: &DVector<f64>) -> f64 {
        let h = self.cfg.step_s;
        match self.cfg.gradient {
            GradientMode::Exact => {
                let w = rec.block_inverse.tr_mul(lambda);
                0.5 * h * w.dot(&rec.jacobians[j].mul_vec(&(x + x_next)))
            }
            GradientMode::FirstOrder => {
                let w = rec.transition.tr_mul(lambda);
                h * w.dot(&rec.jacobians[j].mul_vec(x))
            }
        }
    }

    fn input_sensitivity_column(&self, rec: &StepRecord, x: &DVector<f64>, x_next: &DVector<f64>, j: usize) -> DVector<f64> {
        let h = self.cfg.step_s;
        match self.cfg.gradient {
            GradientMode::Exact => &rec.block_inverse * rec.jacobians[j].mul_vec(&(x + x_next)) * (0.5 * h),
            GradientMode::FirstOrder => &rec.transition * rec.jacobians[j].mul_vec(x) * h,
        }
    }

    /// Cost and adjoint gradient.
    pub fn evaluate(
        &self,
        u: &[f64],
        x0: &DVector<f64>,
        forecast: &[DisturbanceInput],
        u_prev: &[f64],
    ) -> Result<ObjectiveEvaluation> {
        self.check(u, x0, forecast, u_prev)?;
        let rollout = self.rollout(u, x0, forecast, true)?;
        self.adjoint(u, forecast, u_prev, rollout)
    }

    /// Exact Hessian of the flow costs plus the generalized Gauss–Newton
    /// term `Σ_k Sₖᵀ ∇²ℓ Sₖ` of the state costs, with `Sₖ = ∂x_k/∂U`.
    /// Positive definite whenever the move weight is positive.
    pub fn gauss_newton_hessian(
        &self,
        u: &[f64],
        x0: &DVector<f64>,
        forecast: &[DisturbanceInput],
        u_prev: &[f64],
    ) -> Result<DMatrix<f64>> {
        self.check(u, x0, forecast, u_prev)?;
        let (states, records, _, _) = self.rollout(u, x0, forecast, true)?;
        Ok(self.curvature(u.len(), &states, &records))
    }

    /// [`Self::evaluate`] and [`Self::gauss_newton_hessian`] from a single
    /// rollout.
    pub fn evaluate_with_curvature(
        &self,
        u: &[f64],
        x0: &DVector<f64>,
        forecast: &[DisturbanceInput],
        u_prev: &[f64],
    ) -> Result<(ObjectiveEvaluation, DMatrix<f64>)> {
        self.check(u, x0, forecast, u_prev)?;
        let rollout = self.rollout(u, x0, forecast, true)?;
        let hess = self.curvature(u.len(), &rollout.0, &rollout.1);
        Ok((self.adjoint(u, forecast, u_prev, rollout)?, hess))
    }

    fn adjoint(
        &self,
        u: &[f64],
        forecast: &[DisturbanceInput],
        u_prev: &[f64],
        (states, records, fallback_events, max_inverse_residual): Rollout,
    ) -> Result<ObjectiveEvaluation> {
        let n = self.cfg.horizon_steps;
        let nu = self.cfg.input_count();
        let nx = self.model.dim();
        let mut cost = CostBreakdown::default();
        let mut grad = DVector::zeros(u.len());
        let (p, m) = self.control_cost(u, u_prev, Some(&mut grad));
        cost.power = p;
        cost.move_suppression = m;

        let mut stage_grad = DVector::zeros(nx);
        let mut lambda = DVector::zeros(nx);
        for k in (0..n).rev() {
            let (tl, te) = self.state_cost(&states[k + 1], forecast[k].chiller_temperature_c, Some(&mut stage_grad));
            cost.temperature_limit += tl;
            cost.thermal_endurance += te;
            // λ_{k+1} = 𝒜_{k+1}ᵀ λ_{k+2} + ∂ℓ/∂x_{k+1}
            lambda += &stage_grad;
            let rec = &records[k];
            for j in 0..nu {
                grad[k * nu + j] += self.input_sensitivity(rec, &states[k], &states[k + 1], j, &lambda);
            }
            lambda = rec.transition.tr_mul(&lambda);
        }
        finite(&cost)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Objective("gradient is not finite".into()));
        }
        Ok(ObjectiveEvaluation {
            cost,
            gradient: grad,
            states,
            fallback_events,
            max_inverse_residual,
        })
    }

    fn curvature(&self, nv: usize, states: &[DVector<f64>], records: &[StepRecord]) -> DMatrix<f64> {
        let n = self.cfg.horizon_steps;
        let nu = self.cfg.input_count();
        let nx = self.model.dim();
        let (ru, rdu) = (self.cfg.power_weight, self.cfg.move_weight);
        let mut hess = DMatrix::zeros(nv, nv);
        for k in 0..n {
            for a in 0..nu {
                for b in 0..nu {
                    hess[(k * nu + a, k * nu + b)] += 2.0 * ru;
                }
                let i = k * nu + a;
                hess[(i, i)] += 2.0 * rdu;
                if k > 0 {
                    let p = i - nu;
                    hess[(p, p)] += 2.0 * rdu;
                    hess[(i, p)] -= 2.0 * rdu;
                    hess[(p, i)] -= 2.0 * rdu;
                }
            }
        }

        let hybrid = self.cfg.mode == ControlMode::Hybrid;
        let range = self.model.layout().tes_range();
        let mut sens = DMatrix::zeros(nx, nv);
        let mut next = DMatrix::zeros(nx, nv);
        for k in 0..n {
            let rec = &records[k];
            let used = k * nu;
            // only the first `used` columns are nonzero before this step
            if used > 0 {
                next.columns_mut(0, used).gemm(1.0, &rec.transition, &sens.columns(0, used), 0.0);
                std::mem::swap(&mut sens, &mut next);
            }
            for j in 0..nu {
                let col = self.input_sensitivity_column(rec, &states[k], &states[k + 1], j);
                sens.column_mut(used + j).copy_from(&col);
            }
            let cols = used + nu;
            let x = &states[k + 1];
            let w = self.penalty.second_derivative(x[Layout::COLD_PLATE_WALL]);
            let row = DVector::from_iterator(cols, sens.view((Layout::COLD_PLATE_WALL, 0), (1, cols)).iter().copied());
            hess.view_mut((0, 0), (cols, cols)).ger(w, &row, &row, 1.0);
            if hybrid && self.cfg.endurance_weight > 0.0 {
                let block = sens.view((range.start, 0), (range.len(), cols));
                hess.view_mut((0, 0), (cols, cols))
                    .gemm_tr(2.0 * self.cfg.endurance_weight, &block, &block, 1.0);
            }
        }
        hess
    }

    /// The same gradient assembled by forward propagation of the full
    /// sensitivity matrix `∂x_k/∂U`. Much slower; used to cross-check the
    /// adjoint pass.
    pub fn forward_sensitivity_gradient(
        &self,
        u: &[f64],
        x0: &DVector<f64>,
        forecast: &[DisturbanceInput],
        u_prev: &[f64],
    ) -> Result<DVector<f64>> {
        self.check(u, x0, forecast, u_prev)?;
        let n = self.cfg.horizon_steps;
        let nu = self.cfg.input_count();
        let nx = self.model.dim();
        let (states, records, _, _) = self.rollout(u, x0, forecast, true)?;
        let mut grad = DVector::zeros(u.len());
        self.control_cost(u, u_prev, Some(&mut grad));
        let mut sens = DMatrix::zeros(nx, u.len());
        let mut stage_grad = DVector::zeros(nx);
        for k in 0..n {
            let rec = &records[k];
            sens = &rec.transition * sens;
            for j in 0..nu {
                let col = self.input_sensitivity_column(rec, &states[k], &states[k + 1], j);
                sens.column_mut(k * nu + j).copy_from(&col);
            }
            self.state_cost(&states[k + 1], forecast[k].chiller_temperature_c, Some(&mut stage_grad));
            grad += sens.tr_mul(&stage_grad);
        }
        Ok(grad)
    }
}

fn finite(c: &CostBreakdown) -> Result<()> {
    if c.total().is_finite() {
        Ok(())
    } else {
        Err(Error::Objective(format!("non-finite cost {c:?}")))
    }
}
