mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;
use tesmpc_core::integrator::{
    build_phi, initial_inverse, linear_irk_step, step_gradients, GradientMode, IntegratorConfig,
};
use tesmpc_core::reference::{reference_integrate, PiecewiseConstant};
use tesmpc_core::{ControlInput, DisturbanceInput, SystemParams, ThermalModel};

fn model() -> ThermalModel {
    ThermalModel::new(SystemParams::default()).unwrap()
}

fn step_at(m: &ThermalModel, x: &DVector<f64>, u: &ControlInput, d: &DisturbanceInput, cfg: &IntegratorConfig) -> DVector<f64> {
    let lin = m.linearize(x, u, d).unwrap();
    let inv = initial_inverse(&lin.a, &lin.d_tilde, cfg).unwrap();
    linear_irk_step(x, &lin.a, &lin.d_tilde, &inv, cfg).unwrap().x_next
}

#[test]
fn third_order_local_error_in_asymptotic_range() {
    let m = model();
    let u = ControlInput::new(0.04, 0.02);
    let d = DisturbanceInput::new(1200.0, 8.0);
    let x = plant_state(&m, &u, &d, 40.0);
    let lin = m.linearize(&x, &u, &d).unwrap();
    let h0 = 0.5 / spectral_radius(&lin.a);
    let steps: Vec<f64> = (0..4).map(|k| h0 * 0.5f64.powi(k)).collect();
    let errors = one_step_errors(&lin.a, &lin.d_tilde, &x, &steps);
    for w in errors.windows(2) {
        assert!(w[0] / w[1] >= 7.0, "{errors:?}");
    }
}

#[test]
fn exact_gradient_matches_finite_differences_of_one_step() {
    // A(x_k) frozen, only the flow dependence varies
    let m = model();
    let cfg = IntegratorConfig::default();
    let x = nominal_state(&m);
    let u = ControlInput::new(0.03, 0.04);
    let d = DisturbanceInput::new(1500.0, 8.0);
    let lin = m.linearize(&x, &u, &d).unwrap();
    let inv = initial_inverse(&lin.a, &lin.d_tilde, &cfg).unwrap();
    let step = linear_irk_step(&x, &lin.a, &lin.d_tilde, &inv, &cfg).unwrap();
    let jac = m.input_jacobians(&x, &d).unwrap();
    let (dxdx, dxdu) = step_gradients(&step, &jac, &x, &cfg, GradientMode::Exact);
    assert_eq!(dxdx, step.transition);
    let h = 1e-6;
    for j in 0..2 {
        let mut up = u.as_array();
        let mut dn = u.as_array();
        up[j] += h;
        dn[j] -= h;
        let fd = (step_at(&m, &x, &ControlInput::new(up[0], up[1]), &d, &cfg)
            - step_at(&m, &x, &ControlInput::new(dn[0], dn[1]), &d, &cfg))
            / (2.0 * h);
        let err = (dxdu.column(j) - &fd).norm() / fd.norm();
        assert!(err < 1e-6, "input {j}: {err}");
    }
}

/// Relative Frobenius error of the first-order and exact input
/// sensitivities against central differences of the step.
fn sensitivity_errors(step_s: f64) -> (f64, f64) {
    let m = model();
    let cfg = IntegratorConfig { step_s, ..IntegratorConfig::default() };
    let u = ControlInput::new(0.03, 0.03);
    let d = DisturbanceInput::new(1000.0, 8.0);
    let x = plant_state(&m, &u, &d, 60.0);
    let lin = m.linearize(&x, &u, &d).unwrap();
    let inv = initial_inverse(&lin.a, &lin.d_tilde, &cfg).unwrap();
    let step = linear_irk_step(&x, &lin.a, &lin.d_tilde, &inv, &cfg).unwrap();
    let jac = m.input_jacobians(&x, &d).unwrap();
    let (_, first) = step_gradients(&step, &jac, &x, &cfg, GradientMode::FirstOrder);
    let (_, exact) = step_gradients(&step, &jac, &x, &cfg, GradientMode::Exact);
    let h = 1e-5;
    let mut fd = DMatrix::zeros(m.dim(), 2);
    for j in 0..2 {
        let mut up = u.as_array();
        let mut dn = u.as_array();
        up[j] += h;
        dn[j] -= h;
        let col = (step_at(&m, &x, &ControlInput::new(up[0], up[1]), &d, &cfg)
            - step_at(&m, &x, &ControlInput::new(dn[0], dn[1]), &d, &cfg))
            / (2.0 * h);
        fd.set_column(j, &col);
    }
    ((&first - &fd).norm() / fd.norm(), (&exact - &fd).norm() / fd.norm())
}

#[test]
fn first_order_gradient_is_consistent() {
    // one power-series term: the error is O(t_c ρ(A))
    let (coarse, exact) = sensitivity_errors(1.0 / 128.0);
    assert!(exact < 1e-6, "{exact}");
    let (fine, exact) = sensitivity_errors(1.0 / 512.0);
    assert!(exact < 1e-6, "{exact}");
    assert!(fine <= 2e-2, "{fine}");
    assert!(coarse / fine >= 3.5, "{coarse} vs {fine}");
}

#[test]
fn chained_transitions_match_rollout_sensitivity() {
    let m = model();
    let cfg = IntegratorConfig::default();
    let u = ControlInput::new(0.03, 0.03);
    let d = DisturbanceInput::new(800.0, 8.0);
    let mut anchors = vec![plant_state(&m, &u, &d, 30.0)];
    for _ in 0..5 {
        let next = step_at(&m, anchors.last().unwrap(), &u, &d, &cfg);
        anchors.push(next);
    }
    let lins: Vec<_> = anchors.iter().take(5).map(|x| m.linearize(x, &u, &d).unwrap()).collect();
    let propagate = |x0: &DVector<f64>| {
        let mut x = x0.clone();
        for lin in &lins {
            let inv = initial_inverse(&lin.a, &lin.d_tilde, &cfg).unwrap();
            x = linear_irk_step(&x, &lin.a, &lin.d_tilde, &inv, &cfg).unwrap().x_next;
        }
        x
    };
    let mut chain = DMatrix::identity(m.dim(), m.dim());
    for lin in &lins {
        let inv = initial_inverse(&lin.a, &lin.d_tilde, &cfg).unwrap();
        let step = linear_irk_step(&anchors[0], &lin.a, &lin.d_tilde, &inv, &cfg).unwrap();
        chain = &step.transition * chain;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..3 {
        let i = rng.random_range(0..m.dim());
        let h = 1e-3;
        let mut up = anchors[0].clone();
        let mut dn = anchors[0].clone();
        up[i] += h;
        dn[i] -= h;
        let fd = (propagate(&up) - propagate(&dn)) / (2.0 * h);
        let err = (chain.column(i) - &fd).norm() / fd.norm().max(1e-12);
        assert!(err < 1e-6, "state {i}: {err}");
    }
}

#[test]
fn warm_started_inverse_keeps_bottom_row() {
    let m = model();
    let cfg = IntegratorConfig::default();
    let u = ControlInput::new(0.03, 0.03);
    let d = DisturbanceInput::new(1000.0, 8.0);
    let mut x = plant_state(&m, &u, &d, 60.0);
    let mut inv: Option<DMatrix<f64>> = None;
    for _ in 0..10 {
        let lin = m.linearize(&x, &u, &d).unwrap();
        let prev = inv.take().unwrap_or_else(|| initial_inverse(&lin.a, &lin.d_tilde, &cfg).unwrap());
        let step = linear_irk_step(&x, &lin.a, &lin.d_tilde, &prev, &cfg).unwrap();
        let n = m.dim() + 1;
        let plus = DMatrix::identity(n, n) + build_phi(&lin.a, &lin.d_tilde) * (0.5 * cfg.step_s);
        let prop = &step.inverse * plus;
        let last = prop.row(n - 1);
        for c in 0..n {
            let expect = if c == n - 1 { 1.0 } else { 0.0 };
            assert!((last[c] - expect).abs() < 1e-9);
        }
        assert!(step.residual_bound <= 1e-3, "{}", step.residual_bound);
        x = step.x_next.clone();
        inv = Some(step.inverse);
    }
}

#[test]
fn reference_error_shrinks_with_tolerance() {
    let m = ThermalModel::new(SystemParams::default()).unwrap();
    let x0 = m.uniform_state(8.5);
    let u = PiecewiseConstant::new(vec![(0.0, ControlInput::new(0.05, 0.02)), (10.0, ControlInput::new(0.03, 0.05))]).unwrap();
    let d = PiecewiseConstant::new(vec![(0.0, DisturbanceInput::new(1500.0, 8.0)), (15.0, DisturbanceInput::new(0.0, 8.0))]).unwrap();
    let run = |tol: f64| reference_integrate(&m, &x0, &u, &d, 30.0, tol).unwrap().last_state().clone();
    // deviation from a tol/100 run is proportional to tol at this level
    let tol = 1e-6;
    let coarse = (run(tol) - run(tol / 100.0)).amax();
    let fine = (run(tol / 2.0) - run(tol / 200.0)).amax();
    assert!(fine <= 0.51 * coarse, "coarse {coarse:e}, fine {fine:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn diffusion_steps_do_not_amplify(seed in 0u64..1000, step_s in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        // a random conductance graph: symmetric, negative definite
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let g: f64 = rng.random_range(0.0..2.0);
                a[(i, j)] += g;
                a[(j, i)] += g;
                a[(i, i)] -= g;
                a[(j, j)] -= g;
            }
            a[(i, i)] -= rng.random_range(0.01..1.0);
        }
        let cfg = IntegratorConfig { step_s, ..IntegratorConfig::default() };
        let b = DVector::zeros(n);
        let inv = initial_inverse(&a, &b, &cfg).unwrap();
        let step = linear_irk_step(&DVector::zeros(n), &a, &b, &inv, &cfg).unwrap();
        let rho = spectral_radius(&step.transition);
        prop_assert!(rho <= 1.0 + 1e-12, "{}", rho);
    }

    #[test]
    fn equilibria_are_fixed_points(q in 0.0f64..2500.0, byp in 0.005f64..0.05, tes in 0.005f64..0.05) {
        let m = model();
        let u = ControlInput::new(byp, tes);
        let d = DisturbanceInput::new(q, 8.0);
        let lin = m.linearize(&m.uniform_state(15.0), &u, &d).unwrap();
        let eq = lin.a.clone().lu().solve(&-&lin.d_tilde).unwrap();
        let cfg = IntegratorConfig::default();
        let inv = initial_inverse(&lin.a, &lin.d_tilde, &cfg).unwrap();
        let step = linear_irk_step(&eq, &lin.a, &lin.d_tilde, &inv, &cfg).unwrap();
        prop_assert!((step.x_next - &eq).amax() <= 1e-9 * eq.amax());
    }
}
