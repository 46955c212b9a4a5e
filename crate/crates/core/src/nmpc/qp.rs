//! Primal active-set solver for small convex QPs with two-sided linear
//! constraints.
//!
//! ```text
//! min ½ pᵀ H p + gᵀ p   s.t.   lower_i <= a_iᵀ p <= upper_i
//! ```
//!
//! `H` must be positive definite and `p = 0` feasible.

use nalgebra::{DMatrix, DVector};

use super::LinearConstraint;
use crate::error::{Error, Result};

/// One side of a two-sided row, written as `sign * a_iᵀ p >= bound`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Side {
    row: usize,
    sign: f64,
    bound: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub step: DVector<f64>,
    /// Active rows at the solution, signed: `+1` lower side, `-1` upper.
    pub active: Vec<(usize, f64)>,
    /// Multipliers of `active`, all non-negative.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
}

fn dot(a: &LinearConstraint, p: &DVector<f64>) -> f64 {
    a.coefficients.iter().map(|&(i, c)| c * p[i]).sum()
}

/// Solves the QP from `p = 0`. `initial_active` seeds the working set with
/// rows that are tight at `p = 0`; rows that are not tight are ignored.
pub fn solve_qp(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    rows: &[LinearConstraint],
    initial_active: &[(usize, f64)],
    max_iterations: usize,
) -> Result<QpSolution> {
    let n = g.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::Dimension { expected: n, got: h.nrows() });
    }
    let mut sides = Vec::with_capacity(2 * rows.len());
    for (i, r) in rows.iter().enumerate() {
        if r.lower > 0.0 || r.upper < 0.0 {
            return Err(Error::Qp(format!("row {i} excludes the starting point")));
        }
        if r.lower.is_finite() {
            sides.push(Side { row: i, sign: 1.0, bound: r.lower });
        }
        if r.upper.is_finite() {
            sides.push(Side { row: i, sign: -1.0, bound: -r.upper });
        }
    }

    let mut p = DVector::zeros(n);
    let mut working: Vec<usize> = Vec::new();
    // orthonormal basis of the seeded normals; dependent rows are skipped
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for &(row, sign) in initial_active {
        let Some(k) = sides.iter().position(|s| s.row == row && s.sign == sign) else {
            continue;
        };
        if sides[k].bound.abs() > 1e-12 || working.iter().any(|&w| sides[w].row == row) {
            continue;
        }
        let mut v = DVector::zeros(n);
        for &(i, c) in &rows[row].coefficients {
            v[i] += c;
        }
        let norm0 = v.norm();
        for b in &basis {
            let d = b.dot(&v);
            v.axpy(-d, b, 1.0);
        }
        let norm = v.norm();
        if norm > 1e-8 * norm0 {
            basis.push(v / norm);
            working.push(k);
        }
    }

    let scale = h.amax().max(1.0);
    for iter in 0..max_iterations {
        let m = working.len();
        // [H  -A_Wᵀ] [s]   [-(H p + g)]
        // [A_W   0 ] [μ] = [     0    ]
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        for (c, &w) in working.iter().enumerate() {
            let s = sides[w];
            for &(i, a) in &rows[s.row].coefficients {
                kkt[(n + c, i)] = s.sign * a;
                kkt[(i, n + c)] = -s.sign * a;
            }
        }
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&-(h * &p + g));
        let sol = kkt
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Qp("singular KKT system".into()))?;
        let s = sol.rows(0, n).into_owned();
        let mu = sol.rows(n, m).into_owned();

        if s.amax() <= 1e-10 * (1.0 + p.amax()) {
            // stationary on the working set: check multiplier signs
            let (worst, _) = mu
                .iter()
                .enumerate()
                .fold((None, -1e-12 * scale), |acc, (i, &v)| if v < acc.1 { (Some(i), v) } else { acc });
            match worst {
                None => {
                    return Ok(QpSolution {
                        step: p,
                        active: working.iter().map(|&w| (sides[w].row, sides[w].sign)).collect(),
                        multipliers: mu.iter().map(|v| v.max(0.0)).collect(),
                        iterations: iter + 1,
                    })
                }
                Some(i) => {
                    working.remove(i);
                }
            }
            continue;
        }

        let mut alpha = 1.0;
        let mut blocking = None;
        // directions this small against a row are rounding noise
        let tiny = 1e-9 * s.amax();
        for (k, side) in sides.iter().enumerate() {
            if working.contains(&k) {
                continue;
            }
            let a = &rows[side.row];
            let as_ = side.sign * dot(a, &s);
            let norm: f64 = a.coefficients.iter().map(|&(_, c)| c.abs()).sum();
            if as_ < -tiny * norm {
                let slack = side.sign * dot(a, &p) - side.bound;
                let t = (slack.max(0.0)) / -as_;
                if t < alpha {
                    alpha = t;
                    blocking = Some(k);
                }
            }
        }
        p += &s * alpha;
        if let Some(k) = blocking {
            working.push(k);
        }
    }
    Err(Error::Qp(format!("no convergence in {max_iterations} iterations")))
}
