//! Multi-objective nonlinear MPC for the hybrid loop.
//!
//! The horizon cost is
//!
//! ```text
//! J = Σ_k J_TL(x_{k+1}) + J_TE(x_{k+1}) + J_PC(u_k) + R_du ‖u_k - u_{k-1}‖²
//! ```
//!
//! with a C² barrier-like penalty on the cold plate wall temperature, a
//! quadratic pull of the storage temperatures toward the chiller
//! temperature, and a quadratic proxy for pumping power. Predictions use the
//! linearized trapezoidal step; gradients come from a backward adjoint pass.

mod objective;
mod qp;
mod solver;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::integrator::GradientMode;

pub use objective::{CostBreakdown, ObjectiveEvaluation, Predictor};
pub use qp::{solve_qp, QpSolution};
pub use solver::{warm_start_shift, HorizonSolution, Nmpc, SolveStatus};

/// Which flows the controller manipulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlMode {
    /// Bypass and storage flow.
    #[default]
    Hybrid,
    /// Bypass flow only; storage flow is held at zero.
    BypassOnly,
}

impl ControlMode {
    pub fn input_count(self) -> usize {
        match self {
            ControlMode::Hybrid => 2,
            ControlMode::BypassOnly => 1,
        }
    }
}

/// How the heat-load forecast over the horizon is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreviewMode {
    /// The scripted load profile is known in advance.
    #[default]
    Exact,
    /// The current load is held over the whole horizon.
    ZeroOrderHold,
}

/// How each step's trapezoidal inverse is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InverseMode {
    /// LU at the first step, warm-started Newton–Schulz afterwards.
    #[default]
    NewtonSchulz,
    /// LU at every step.
    Direct,
}

/// Curvature model used by the SQP subproblems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianMode {
    /// Generalized Gauss–Newton matrix, rebuilt at every iterate.
    #[default]
    GaussNewton,
    /// Damped BFGS started from the Gauss–Newton matrix.
    Bfgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NmpcConfig {
    pub horizon_steps: usize,
    pub step_s: f64,
    pub min_flow_kgps: f64,
    pub max_total_flow_kgps: f64,
    pub max_flow_change_kgps: f64,
    pub max_cold_plate_temperature_c: f64,
    /// Width of the quadratic band below the temperature limit (ε).
    pub penalty_margin_c: f64,
    /// Curvature of the quadratic penalty branch (β₁).
    pub penalty_curvature: f64,
    /// Constant offset of the rational branch (α₂).
    pub penalty_offset: f64,
    pub power_weight: f64,
    pub move_weight: f64,
    pub endurance_weight: f64,
    pub newton_schulz_iterations: usize,
    pub inverse_fallback_residual: f64,
    pub constraint_tolerance: f64,
    pub optimality_tolerance: f64,
    pub step_tolerance: f64,
    pub typical_flow_kgps: f64,
    pub max_iterations: usize,
    pub mode: ControlMode,
    pub preview: PreviewMode,
    pub gradient: GradientMode,
    pub inverse: InverseMode,
    pub hessian: HessianMode,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon_steps: 25,
            step_s: 1.0,
            min_flow_kgps: 0.005,
            max_total_flow_kgps: 0.1,
            max_flow_change_kgps: 0.02,
            max_cold_plate_temperature_c: 45.0,
            penalty_margin_c: 0.3,
            penalty_curvature: 1.0,
            penalty_offset: 0.0,
            power_weight: 0.5,
            move_weight: 0.25,
            endurance_weight: 2.5e-6,
            newton_schulz_iterations: 0,
            inverse_fallback_residual: 0.5,
            constraint_tolerance: 0.002,
            optimality_tolerance: 0.005,
            step_tolerance: 0.001,
            typical_flow_kgps: 0.05,
            max_iterations: 100,
            mode: ControlMode::Hybrid,
            preview: PreviewMode::Exact,
            gradient: GradientMode::Exact,
            inverse: InverseMode::NewtonSchulz,
            hessian: HessianMode::GaussNewton,
        }
    }
}

impl NmpcConfig {
    pub fn input_count(&self) -> usize {
        self.mode.input_count()
    }

    pub fn variable_count(&self) -> usize {
        self.horizon_steps * self.input_count()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("nmpc.step_s", self.step_s),
            ("nmpc.min_flow_kgps", self.min_flow_kgps),
            ("nmpc.max_flow_change_kgps", self.max_flow_change_kgps),
            ("nmpc.penalty_margin_c", self.penalty_margin_c),
            ("nmpc.penalty_curvature", self.penalty_curvature),
            ("nmpc.inverse_fallback_residual", self.inverse_fallback_residual),
            ("nmpc.constraint_tolerance", self.constraint_tolerance),
            ("nmpc.optimality_tolerance", self.optimality_tolerance),
            ("nmpc.step_tolerance", self.step_tolerance),
            ("nmpc.typical_flow_kgps", self.typical_flow_kgps),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(param_err(key, format!("must be > 0, got {v}")));
            }
        }
        let non_negative = [
            ("nmpc.power_weight", self.power_weight),
            ("nmpc.move_weight", self.move_weight),
            ("nmpc.endurance_weight", self.endurance_weight),
        ];
        for (key, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(param_err(key, format!("must be >= 0, got {v}")));
            }
        }
        if !self.penalty_offset.is_finite() {
            return Err(param_err("nmpc.penalty_offset", "must be finite"));
        }
        if self.horizon_steps == 0 {
            return Err(param_err("nmpc.horizon_steps", "must be >= 1"));
        }
        if self.max_iterations == 0 {
            return Err(param_err("nmpc.max_iterations", "must be >= 1"));
        }
        if !(self.max_total_flow_kgps > self.min_flow_kgps) {
            return Err(param_err(
                "nmpc.max_total_flow_kgps",
                "must exceed min_flow_kgps",
            ));
        }
        if self.input_count() as f64 * self.min_flow_kgps > self.max_total_flow_kgps {
            return Err(Error::Infeasible(format!(
                "{} x min_flow_kgps = {} exceeds max_total_flow_kgps = {}",
                self.input_count(),
                self.input_count() as f64 * self.min_flow_kgps,
                self.max_total_flow_kgps
            )));
        }
        Ok(())
    }

    pub fn penalty(&self) -> PenaltyCoefficients {
        let mut p = derive_penalty_coefficients(
            self.penalty_curvature,
            self.penalty_margin_c,
            self.max_cold_plate_temperature_c,
        );
        p.shift(self.penalty_offset);
        p
    }
}

/// Coefficients of the piecewise temperature-limit penalty
///
/// ```text
/// J_TL(T) = α₁ / (T_max - T) + α₂        T <= T_max - ε
///           β₁ T² + β₂ T + β₃            T >= T_max - ε
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyCoefficients {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub max_temperature_c: f64,
    pub margin_c: f64,
}

/// Solves value, slope and curvature matching at `T* = T_max - ε` for the
/// rational branch with `α₂ = 0`.
pub fn derive_penalty_coefficients(beta1: f64, eps: f64, t_max: f64) -> PenaltyCoefficients {
    let junction = t_max - eps;
    let alpha1 = beta1 * eps.powi(3);
    // slope: α₁/ε² = 2β₁T* + β₂
    let beta2 = alpha1 / (eps * eps) - 2.0 * beta1 * junction;
    // value: α₁/ε = β₁T*² + β₂T* + β₃
    let beta3 = alpha1 / eps - beta1 * junction * junction - beta2 * junction;
    PenaltyCoefficients {
        alpha1,
        alpha2: 0.0,
        beta1,
        beta2,
        beta3,
        max_temperature_c: t_max,
        margin_c: eps,
    }
}

impl PenaltyCoefficients {
    pub fn junction_c(&self) -> f64 {
        self.max_temperature_c - self.margin_c
    }

    /// Adds a constant to both branches.
    pub fn shift(&mut self, offset: f64) {
        self.alpha2 += offset;
        self.beta3 += offset;
    }

    /// Value, slope and curvature mismatch of the two branches at the
    /// junction.
    pub fn junction_mismatch(&self) -> [f64; 3] {
        let t = self.junction_c();
        let gap = self.max_temperature_c - t;
        let rational = [
            self.alpha1 / gap + self.alpha2,
            self.alpha1 / (gap * gap),
            2.0 * self.alpha1 / gap.powi(3),
        ];
        let quad = [
            self.beta1 * t * t + self.beta2 * t + self.beta3,
            2.0 * self.beta1 * t + self.beta2,
            2.0 * self.beta1,
        ];
        [rational[0] - quad[0], rational[1] - quad[1], rational[2] - quad[2]]
    }

    /// Fails when the branches do not join to second order within `tol`,
    /// relative to the rational branch's own value, slope and curvature.
    pub fn check_continuity(&self, tol: f64) -> Result<()> {
        let gap = self.margin_c;
        let scale = [
            (self.alpha1 / gap).abs() + self.alpha2.abs(),
            self.alpha1 / (gap * gap),
            2.0 * self.alpha1 / gap.powi(3),
        ];
        for (k, (m, s)) in self.junction_mismatch().iter().zip(scale).enumerate() {
            if m.abs() > tol * s.max(1e-300) {
                return Err(param_err(
                    "nmpc.penalty",
                    format!("derivative {k} jumps by {m:.3e} at the junction"),
                ));
            }
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        if t <= self.junction_c() {
            self.alpha1 / (self.max_temperature_c - t) + self.alpha2
        } else {
            (self.beta1 * t + self.beta2) * t + self.beta3
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        if t <= self.junction_c() {
            let g = self.max_temperature_c - t;
            self.alpha1 / (g * g)
        } else {
            2.0 * self.beta1 * t + self.beta2
        }
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        if t <= self.junction_c() {
            2.0 * self.alpha1 / (self.max_temperature_c - t).powi(3)
        } else {
            2.0 * self.beta1
        }
    }
}

/// Temperature-limit penalty on the cold plate wall temperature.
pub fn cost_temperature_limit(t_cp: f64, coeffs: &PenaltyCoefficients) -> f64 {
    coeffs.value(t_cp)
}

/// `Q_tes Σ (T_i - T_ch)²` over the storage temperatures.
pub fn cost_thermal_endurance(t_tes: &[f64], t_ch: f64, q_tes: f64) -> f64 {
    q_tes * t_tes.iter().map(|t| (t - t_ch) * (t - t_ch)).sum::<f64>()
}

/// `R_u (Σ u)²`.
pub fn cost_power(flows_kgps: &[f64], r_u: f64) -> f64 {
    let s: f64 = flows_kgps.iter().sum();
    r_u * s * s
}

/// One two-sided linear constraint `lower <= Σ c_i U_i <= upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub coefficients: Vec<(usize, f64)>,
    pub lower: f64,
    pub upper: f64,
}

impl LinearConstraint {
    pub fn eval(&self, u: &[f64]) -> f64 {
        self.coefficients.iter().map(|&(i, c)| c * u[i]).sum()
    }

    pub fn violation(&self, u: &[f64]) -> f64 {
        let v = self.eval(u);
        (self.lower - v).max(v - self.upper).max(0.0)
    }
}

/// Stacked input constraints over a horizon, for `U = [u_0; u_1; ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub variable_count: usize,
    pub rows: Vec<LinearConstraint>,
}

impl ConstraintSet {
    pub fn max_violation(&self, u: &[f64]) -> f64 {
        self.rows.iter().map(|r| r.violation(u)).fold(0.0, f64::max)
    }

    pub fn is_satisfied(&self, u: &[f64], tol: f64) -> bool {
        self.max_violation(u) <= tol
    }
}

/// Sum limit, lower bounds and rate limits over the horizon: `N` sum rows,
/// then `n_u N` bound rows, then `n_u N` rate rows; step 0 is rate-limited
/// against `u_prev`.
pub fn constraint_set(cfg: &NmpcConfig, u_prev: &[f64]) -> Result<ConstraintSet> {
    cfg.validate()?;
    let nu = cfg.input_count();
    if u_prev.len() != nu {
        return Err(Error::Dimension { expected: nu, got: u_prev.len() });
    }
    let n = cfg.horizon_steps;
    let mut rows = Vec::with_capacity(n * (1 + 2 * nu));
    for k in 0..n {
        rows.push(LinearConstraint {
            coefficients: (0..nu).map(|j| (k * nu + j, 1.0)).collect(),
            lower: f64::NEG_INFINITY,
            upper: cfg.max_total_flow_kgps,
        });
    }
    for i in 0..n * nu {
        rows.push(LinearConstraint {
            coefficients: vec![(i, 1.0)],
            lower: cfg.min_flow_kgps,
            upper: f64::INFINITY,
        });
    }
    let du = cfg.max_flow_change_kgps;
    for k in 0..n {
        for j in 0..nu {
            let i = k * nu + j;
            rows.push(if k == 0 {
                LinearConstraint {
                    coefficients: vec![(i, 1.0)],
                    lower: u_prev[j] - du,
                    upper: u_prev[j] + du,
                }
            } else {
                LinearConstraint {
                    coefficients: vec![(i, 1.0), (i - nu, -1.0)],
                    lower: -du,
                    upper: du,
                }
            });
        }
    }
    Ok(ConstraintSet {
        variable_count: n * nu,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn penalty_coefficients_join_smoothly() {
        let p = derive_penalty_coefficients(1.0, 0.3, 45.0);
        assert!((p.alpha1 - 0.027).abs() < 1e-15);
        assert!((p.beta2 + 89.1).abs() < 1e-9);
        assert!((p.beta3 - 1984.77).abs() < 1e-9);
        let m = p.junction_mismatch();
        assert!(m.iter().all(|v| v.abs() < 1e-9), "{m:?}");
        p.check_continuity(1e-9).unwrap();
        let q = derive_penalty_coefficients(2.0, 0.3, 45.0);
        assert!((q.alpha1 - 2.0 * p.alpha1).abs() < 1e-15);
    }

    #[test]
    fn perturbed_coefficients_fail_continuity() {
        let mut p = derive_penalty_coefficients(1.0, 0.3, 45.0);
        p.beta2 += 1.0;
        assert!(p.check_continuity(1e-6).is_err());
    }

    #[test]
    fn penalty_branches() {
        let p = derive_penalty_coefficients(1.0, 0.3, 45.0);
        assert!((cost_temperature_limit(25.0, &p) - (0.027 / 20.0)).abs() < 1e-15);
        let mut prev = cost_temperature_limit(8.5, &p);
        for i in 1..1000 {
            let t = 8.5 + 0.05 * i as f64;
            let v = cost_temperature_limit(t, &p);
            assert!(v > prev && v >= 0.0, "t={t}");
            prev = v;
        }
        let t = p.junction_c();
        let left = p.alpha1 / (45.0 - t) + p.alpha2;
        let right = p.beta1 * t * t + p.beta2 * t + p.beta3;
        assert!((left - right).abs() <= 1e-9 * left);
    }

    #[test]
    fn offset_keeps_continuity() {
        let cfg = NmpcConfig {
            penalty_offset: 6.75e-4,
            ..NmpcConfig::default()
        };
        let p = cfg.penalty();
        p.check_continuity(1e-9).unwrap();
        assert!((cost_temperature_limit(25.0, &p) - (0.027 / 20.0 + 6.75e-4)).abs() < 1e-15);
    }

    #[test]
    fn endurance_and_power() {
        assert_eq!(cost_thermal_endurance(&[8.0; 72], 8.0, 2.5e-6), 0.0);
        let mut t = [8.0; 72];
        t[3] = 8.5;
        assert!((cost_thermal_endurance(&t, 8.0, 2.5e-6) - 2.5e-6 * 0.25).abs() < 1e-18);
        assert!((cost_thermal_endurance(&[9.0; 72], 8.0, 2.5e-6) - 1.8e-4).abs() < 1e-15);
        assert_eq!(cost_power(&[0.0, 0.0], 0.5), 0.0);
        assert!((cost_power(&[0.05, 0.05], 0.5) - 0.005).abs() < 1e-15);
        assert_eq!(cost_power(&[0.01, 0.07], 0.5), cost_power(&[0.07, 0.01], 0.5));
    }

    #[test]
    fn constraint_rows() {
        let cfg = NmpcConfig::default();
        let c = constraint_set(&cfg, &[0.005, 0.005]).unwrap();
        assert_eq!(c.rows.len(), 5 * cfg.horizon_steps);
        let u = vec![0.005; 50];
        assert!(c.is_satisfied(&u, 0.0));
        // strict: every row has slack or is an exact bound
        let sums = &c.rows[..25];
        assert!(sums.iter().all(|r| r.eval(&u) < r.upper));
    }

    #[test]
    fn infeasible_config_rejected() {
        let cfg = NmpcConfig {
            min_flow_kgps: 0.06,
            ..NmpcConfig::default()
        };
        assert!(matches!(constraint_set(&cfg, &[0.06, 0.06]), Err(Error::Infeasible(_))));
    }
}
