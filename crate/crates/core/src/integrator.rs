//! Linearized implicit Runge–Kutta (trapezoidal) step.
//!
//! Over one control interval the state-dependent coefficients are frozen at
//! `x_k`, giving the affine system `ẋ = A_k x + d̃_k`. In augmented form
//! `φ_k = [[A_k, d̃_k], [0, 0]]` the trapezoidal rule is the rational map
//! `x̃_{k+1} = (I - Z_k)⁻¹ (I + Z_k) x̃_k` with `Z_k = (t_c/2) φ_k`. The
//! inverse is refined from the previous step's inverse with Newton–Schulz,
//! so a step costs a fixed number of matrix products.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputJacobian;

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    /// Step duration `t_c` [s].
    pub step_s: f64,
    /// Newton–Schulz count `r`; the update is applied `r + 1` times.
    pub newton_schulz_iterations: usize,
    /// Above this bound on `‖I - D D⁻¹‖_∞` the inverse is recomputed by LU.
    pub fallback_residual: f64,
    /// Invert the full `(n+1)` augmented matrix (the default) or only the
    /// `n x n` block.
    pub augmented: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            step_s: 1.0,
            newton_schulz_iterations: 0,
            fallback_residual: 0.5,
            augmented: true,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_s.is_finite() && self.step_s > 0.0) {
            return Err(crate::error::param_err("integrator.step_s", "must be > 0"));
        }
        if !(self.fallback_residual > 0.0) {
            return Err(crate::error::param_err("integrator.fallback_residual", "must be > 0"));
        }
        Ok(())
    }
}

/// Result of one linear IRK step.
#[derive(Debug, Clone)]
pub struct DiscreteStep {
    /// Discrete state transition `𝒜_k`.
    pub transition: DMatrix<f64>,
    /// Discrete offset `𝒟_k`.
    pub offset: DVector<f64>,
    /// Refined inverse, warm start for the next step. Augmented or block
    /// sized depending on [`IntegratorConfig::augmented`].
    pub inverse: DMatrix<f64>,
    pub x_next: DVector<f64>,
    /// Upper bound on `‖I - D_k D_k⁻¹‖_∞` after refinement.
    pub residual_bound: f64,
    /// The Newton–Schulz result was replaced by a direct inverse.
    pub fallback: bool,
}

impl DiscreteStep {
    /// `(I - (t_c/2) A_k)⁻¹`, the block the sensitivities need.
    pub fn state_block_inverse(&self) -> nalgebra::DMatrixView<'_, f64> {
        let n = self.transition.nrows();
        self.inverse.view((0, 0), (n, n))
    }
}

/// Augmented generator `[[A, d̃], [0, 0]]`.
pub fn build_phi(a: &DMatrix<f64>, d_tilde: &DVector<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut phi = DMatrix::zeros(n + 1, n + 1);
    phi.view_mut((0, 0), (n, n)).copy_from(a);
    phi.view_mut((0, n), (n, 1)).copy_from(d_tilde);
    phi
}

/// Applies `X ← X (2I - D X)` exactly `iterations + 1` times.
pub fn newton_schulz(d: &DMatrix<f64>, initial: &DMatrix<f64>, iterations: usize) -> DMatrix<f64> {
    newton_schulz_with_residual(d, initial, iterations).0
}

/// Nonzeros of a matrix, grouped by row.
struct SparseRows {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    fn from_dense(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let mut rows = vec![Vec::new(); n];
        for j in 0..m.ncols() {
            for (i, row) in rows.iter_mut().enumerate() {
                let v = m[(i, j)];
                if v != 0.0 {
                    row.push((j, v));
                }
            }
        }
        Self { n, rows }
    }

    /// `self * x` for dense `x`.
    fn mul_dense(&self, x: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        for j in 0..x.ncols() {
            let xc = x.column(j);
            for (i, row) in self.rows.iter().enumerate() {
                out[(i, j)] = row.iter().map(|&(k, v)| v * xc[k]).sum();
            }
        }
    }

    /// `x * self` for dense `x`.
    fn rmul_dense(&self, x: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        out.fill(0.0);
        for (k, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                out.column_mut(j).axpy(v, &x.column(k), 1.0);
            }
        }
    }
}

/// Newton–Schulz plus `‖I - D X_last‖²_∞` where `X_last` is the iterate fed
/// into the final update; since the new residual is the square of the old
/// one, this bounds the returned iterate's residual without another product.
fn newton_schulz_with_residual(
    d: &DMatrix<f64>,
    initial: &DMatrix<f64>,
    iterations: usize,
) -> (DMatrix<f64>, f64) {
    let n = d.nrows();
    let sparse = SparseRows::from_dense(d);
    debug_assert_eq!(sparse.n, n);
    let mut x = initial.clone();
    let mut bound = f64::INFINITY;
    let mut dx = DMatrix::zeros(n, n);
    let mut next = DMatrix::zeros(n, n);
    for _ in 0..=iterations {
        sparse.mul_dense(&x, &mut dx);
        // dx <- 2I - D X, tracking ‖I - D X‖_∞ on the way
        let mut worst = 0.0f64;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                let e = if i == j { 1.0 - dx[(i, j)] } else { -dx[(i, j)] };
                row += e.abs();
            }
            worst = worst.max(row);
        }
        bound = worst * worst;
        dx.neg_mut();
        for i in 0..n {
            dx[(i, i)] += 2.0;
        }
        next.gemm(1.0, &x, &dx, 0.0);
        std::mem::swap(&mut x, &mut next);
    }
    (x, bound)
}

/// `‖I - D X‖_∞`, computed explicitly.
pub fn inverse_residual(d: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    let mut r = -(d * x);
    for i in 0..r.nrows() {
        r[(i, i)] += 1.0;
    }
    r.row_iter().map(|row| row.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn direct_inverse(d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    d.clone().lu().try_inverse().ok_or(Error::Singular("trapezoidal matrix"))
}

/// `D = I - (t_c/2) φ` (augmented) or `I - (t_c/2) A` (block).
fn trapezoid_matrix(a: &DMatrix<f64>, d_tilde: &DVector<f64>, cfg: &IntegratorConfig) -> DMatrix<f64> {
    let half = 0.5 * cfg.step_s;
    let mut d = if cfg.augmented {
        build_phi(a, d_tilde) * (-half)
    } else {
        a * (-half)
    };
    for i in 0..d.nrows() {
        d[(i, i)] += 1.0;
    }
    d
}

/// Exact inverse of `D₀` by LU, used at the start of a horizon.
pub fn initial_inverse(a: &DMatrix<f64>, d_tilde: &DVector<f64>, cfg: &IntegratorConfig) -> Result<DMatrix<f64>> {
    direct_inverse(&trapezoid_matrix(a, d_tilde, cfg))
}

/// One linearized trapezoidal step from `x_k` with `A_k`, `d̃_k`, warm
/// started from the previous step's inverse.
pub fn linear_irk_step(
    x_k: &DVector<f64>,
    a_k: &DMatrix<f64>,
    d_tilde_k: &DVector<f64>,
    prev_inverse: &DMatrix<f64>,
    cfg: &IntegratorConfig,
) -> Result<DiscreteStep> {
    let n = x_k.len();
    if a_k.nrows() != n || a_k.ncols() != n {
        return Err(Error::Dimension { expected: n, got: a_k.nrows() });
    }
    if d_tilde_k.len() != n {
        return Err(Error::Dimension { expected: n, got: d_tilde_k.len() });
    }
    let size = if cfg.augmented { n + 1 } else { n };
    if prev_inverse.nrows() != size || prev_inverse.ncols() != size {
        return Err(Error::Dimension { expected: size, got: prev_inverse.nrows() });
    }

    let d = trapezoid_matrix(a_k, d_tilde_k, cfg);
    let (mut inverse, mut residual_bound) =
        newton_schulz_with_residual(&d, prev_inverse, cfg.newton_schulz_iterations);
    let mut fallback = false;
    if !(residual_bound <= cfg.fallback_residual) {
        debug!("Newton–Schulz residual bound {residual_bound:.3e} above threshold, using LU");
        inverse = direct_inverse(&d)?;
        residual_bound = 0.0;
        fallback = true;
    }

    let half = 0.5 * cfg.step_s;
    // I + Z restricted to the state block is 2I - D there
    let mut plus = -d.view((0, 0), (n, n)).into_owned();
    for i in 0..n {
        plus[(i, i)] += 2.0;
    }
    let block = inverse.view((0, 0), (n, n)).into_owned();
    let mut transition = DMatrix::zeros(n, n);
    SparseRows::from_dense(&plus).rmul_dense(&block, &mut transition);
    let offset = if cfg.augmented {
        // top-right of D⁻¹ (I + Z): P (t_c/2) d̃ + y, with y the top-right of D⁻¹
        &block * d_tilde_k * half + inverse.view((0, n), (n, 1))
    } else {
        &block * d_tilde_k * cfg.step_s
    };
    let x_next = &transition * x_k + &offset;
    Ok(DiscreteStep {
        transition,
        offset,
        inverse,
        x_next,
        residual_bound,
        fallback,
    })
}

/// How `∂x_{k+1}/∂u_k` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// `t_c 𝒜_k G_j x_k`: the first term of the matrix-exponential power
    /// series, with `𝒜_k` standing in for `exp(t_c A_k)`.
    FirstOrder,
    /// Derivative of the trapezoidal map itself:
    /// `(t_c/2) (I - Z_k)⁻¹ G_j (x_k + x_{k+1})`.
    #[default]
    Exact,
}

/// `∂x_{k+1}/∂x_k` (frozen coefficients) and `∂x_{k+1}/∂u_k`, one column per
/// entry of `jacobians`.
pub fn step_gradients(
    step: &DiscreteStep,
    jacobians: &[InputJacobian],
    x_k: &DVector<f64>,
    cfg: &IntegratorConfig,
    mode: GradientMode,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x_k.len();
    let mut dxdu = DMatrix::zeros(n, jacobians.len());
    match mode {
        GradientMode::FirstOrder => {
            for (j, g) in jacobians.iter().enumerate() {
                let col = &step.transition * g.mul_vec(x_k) * cfg.step_s;
                dxdu.set_column(j, &col);
            }
        }
        GradientMode::Exact => {
            let mid = x_k + &step.x_next;
            let block = step.state_block_inverse();
            for (j, g) in jacobians.iter().enumerate() {
                let col = block * g.mul_vec(&mid) * (0.5 * cfg.step_s);
                dxdu.set_column(j, &col);
            }
        }
    }
    (step.transition.clone(), dxdu)
}
