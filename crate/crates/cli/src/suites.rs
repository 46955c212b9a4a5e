//! Seeded property suites run by `tesmpc validate`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tesmpc_core::integrator::{initial_inverse, linear_irk_step, IntegratorConfig};
use tesmpc_core::nmpc::{constraint_set, warm_start_shift, CostBreakdown, HorizonSolution, Nmpc, Predictor, SolveStatus};
use tesmpc_core::{Config, ControlInput, DisturbanceInput, Layout, NmpcConfig, ThermalModel};

/// Faults that can be injected to check that a suite notices them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Fault {
    /// Adds 1 to the quadratic branch's linear coefficient.
    PenaltyBeta2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub struct Suites<'a> {
    pub config: &'a Config,
    pub seed: u64,
    pub cases: usize,
    pub fault: Option<Fault>,
}

type Check = fn(&Suites, &mut ChaCha8Rng) -> Result<String, String>;

const SUITES: &[(&str, Check)] = &[
    ("graph-invariants", graph_invariants),
    ("penalty-continuity", penalty_continuity),
    ("adjoint-gradient", adjoint_gradient),
    ("integrator-convergence", integrator_convergence),
    ("input-constraints", input_constraints),
];

impl Suites<'_> {
    /// Runs every suite; each gets its own generator derived from the seed.
    pub fn run(&self) -> Vec<SuiteResult> {
        SUITES
            .iter()
            .enumerate()
            .map(|(i, &(name, check))| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(i as u64));
                let (passed, detail) = match check(self, &mut rng) {
                    Ok(d) => (true, d),
                    Err(d) => (false, d),
                };
                SuiteResult { name, passed, detail }
            })
            .collect()
    }

    fn model(&self) -> Result<ThermalModel, String> {
        ThermalModel::new(self.config.system.clone()).map_err(|e| e.to_string())
    }
}

fn random_state(model: &ThermalModel, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(model.dim(), |_, _| rng.random_range(5.0..50.0))
}

fn graph_invariants(s: &Suites, rng: &mut ChaCha8Rng) -> Result<String, String> {
    let model = s.model()?;
    let mut isolated = s.config.system.clone();
    isolated.lumped.chiller_ha_w_per_k = 0.0;
    let isolated = ThermalModel::new(isolated).map_err(|e| e.to_string())?;
    let ha_ch = model.params().lumped.chiller_ha_w_per_k;
    let (mut row_sum, mut leak) = (0.0f64, 0.0f64);
    for case in 0..s.cases {
        let x = random_state(&model, rng);
        let u = ControlInput::new(rng.random_range(0.005..0.08), rng.random_range(0.005..0.08));
        let d = DisturbanceInput::new(rng.random_range(0.0..3000.0), rng.random_range(5.0..15.0));
        let g = model.assemble_graph(&x, &u, &d).map_err(|e| e.to_string())?;
        let c_in = g.c_in();
        for i in 0..model.dim() {
            if c_in[(i, i)] != 0.0 || c_in.row(i).iter().any(|&c| c < 0.0) {
                return Err(format!("case {case}: row {i} of C_in has a self-loop or a negative entry"));
            }
            let expect = c_in.row(i).sum() + if i == Layout::HX_WALL { ha_ch } else { 0.0 };
            row_sum = row_sum.max((g.outflow[i] - expect).abs() / expect.abs().max(1e-300));
        }
        // without load or chiller the heat flows must cancel
        let idle = DisturbanceInput::new(0.0, d.chiller_temperature_c);
        let g = isolated.assemble_graph(&x, &u, &idle).map_err(|e| e.to_string())?;
        let q = g.heat_flow(&x, &idle.vector(isolated.params()));
        let scale: f64 = q.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
        leak = leak.max(q.sum().abs() / scale);
    }
    let detail = format!("{} samples, row-sum error {row_sum:.1e}, isolated heat imbalance {leak:.1e}", s.cases);
    if row_sum <= 1e-12 && leak <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn penalty_continuity(s: &Suites, rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut p = s.config.nmpc.penalty();
    if s.fault == Some(Fault::PenaltyBeta2) {
        p.beta2 += 1.0;
    }
    let [value, slope, curvature] = p.junction_mismatch();
    p.check_continuity(1e-9)
        .map_err(|e| format!("{e} (value {value:.1e}, slope {slope:.1e}, curvature {curvature:.1e})"))?;
    // monotone and convex on random points below the limit
    let t_max = p.max_temperature_c;
    for _ in 0..s.cases {
        let t = rng.random_range(t_max - 40.0..t_max - 1e-3);
        if !(p.derivative(t) > 0.0 && p.second_derivative(t) > 0.0) {
            return Err(format!("penalty not increasing and convex at {t:.3} C"));
        }
    }
    Ok(format!(
        "junction {:.2} C, mismatch value {value:.1e}, slope {slope:.1e}, curvature {curvature:.1e}",
        p.junction_c()
    ))
}

fn short_horizon(cfg: &NmpcConfig) -> NmpcConfig {
    NmpcConfig { horizon_steps: 5, ..cfg.clone() }
}

/// Random previous control and a horizon that satisfies the input limits.
fn random_feasible(cfg: &NmpcConfig, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nu = cfg.input_count();
    let lo = cfg.min_flow_kgps;
    let hi = cfg.max_total_flow_kgps / nu as f64;
    let du = cfg.max_flow_change_kgps;
    let u_prev: Vec<f64> = (0..nu).map(|_| rng.random_range(lo..hi)).collect();
    let mut last = u_prev.clone();
    let mut u = Vec::with_capacity(cfg.variable_count());
    for _ in 0..cfg.horizon_steps {
        for v in last.iter_mut() {
            *v = (*v + rng.random_range(-du..du)).clamp(lo, hi);
        }
        u.extend_from_slice(&last);
    }
    (u_prev, u)
}

fn adjoint_gradient(s: &Suites, rng: &mut ChaCha8Rng) -> Result<String, String> {
    let model = s.model()?;
    let cfg = short_horizon(&s.config.nmpc);
    let pred = Predictor::new(model.clone(), cfg.clone()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let cases = s.cases.min(10);
    for _ in 0..cases {
        let x0 = DVector::from_fn(model.dim(), |_, _| rng.random_range(8.0..30.0));
        let q = rng.random_range(0.0..2500.0);
        let forecast = vec![DisturbanceInput::new(q, 8.0); cfg.horizon_steps];
        let (u_prev, u) = random_feasible(&cfg, rng);
        let adj = pred.evaluate(&u, &x0, &forecast, &u_prev).map_err(|e| e.to_string())?.gradient;
        let fwd = pred.forward_sensitivity_gradient(&u, &x0, &forecast, &u_prev).map_err(|e| e.to_string())?;
        worst = worst.max((&adj - &fwd).amax() / fwd.amax().max(1e-300));
    }
    let detail = format!("{cases} horizons, adjoint vs forward sensitivities {worst:.1e}");
    if worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Integrates `ẋ = A x + d̃` over `span` seconds in steps of `h`.
fn integrate(a: &DMatrix<f64>, d: &DVector<f64>, x0: &DVector<f64>, h: f64, span: f64) -> Result<DVector<f64>, String> {
    let cfg = IntegratorConfig { step_s: h, ..IntegratorConfig::default() };
    let inv = initial_inverse(a, d, &cfg).map_err(|e| e.to_string())?;
    let mut x = x0.clone();
    for _ in 0..(span / h).round() as usize {
        x = linear_irk_step(&x, a, d, &inv, &cfg).map_err(|e| e.to_string())?.x_next;
    }
    Ok(x)
}

fn integrator_convergence(s: &Suites, rng: &mut ChaCha8Rng) -> Result<String, String> {
    let model = s.model()?;
    let mut worst = f64::INFINITY;
    let cases = s.cases.min(3);
    for _ in 0..cases {
        let x = random_state(&model, rng);
        let u = ControlInput::new(rng.random_range(0.01..0.05), rng.random_range(0.01..0.05));
        let d = DisturbanceInput::new(rng.random_range(0.0..2500.0), 8.0);
        let lin = model.linearize(&x, &u, &d).map_err(|e| e.to_string())?;
        // largest power of two with h ‖A‖∞ <= 1/2
        let norm = lin.a.abs().row_sum().max();
        let h0 = 0.5f64.powi((2.0 * norm).log2().ceil().max(0.0) as i32);
        let span = 4.0 * h0;
        let truth = integrate(&lin.a, &lin.d_tilde, &x, h0 / 64.0, span)?;
        let errors: Vec<f64> = (0..3)
            .map(|k| integrate(&lin.a, &lin.d_tilde, &x, h0 * 0.5f64.powi(k), span).map(|y| (y - &truth).amax()))
            .collect::<Result<_, _>>()?;
        for w in errors.windows(2) {
            worst = worst.min(w[0] / w[1]);
        }
    }
    let detail = format!("{cases} frozen systems, smallest error ratio per halving {worst:.2}");
    if worst >= 3.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn input_constraints(s: &Suites, rng: &mut ChaCha8Rng) -> Result<String, String> {
    let model = s.model()?;
    let cfg = short_horizon(&s.config.nmpc);
    let nmpc = Nmpc::new(model, cfg.clone()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..s.cases {
        let (u_prev, u) = random_feasible(&cfg, rng);
        let sol = HorizonSolution {
            controls: u,
            input_count: cfg.input_count(),
            predicted_states: Vec::new(),
            cost: CostBreakdown::default(),
            gradient: DVector::zeros(0),
            iterations: 0,
            objective_evaluations: 0,
            kkt_residual: 0.0,
            solve_time_s: 0.0,
            fallback_events: 0,
            status: SolveStatus::Optimal,
            previous_control: u_prev,
        };
        let applied = sol.step(0).to_vec();
        let set = constraint_set(&cfg, &applied).map_err(|e| e.to_string())?;
        worst = worst.max(set.max_violation(&warm_start_shift(&sol)));
        // arbitrary points are projected into the feasible set
        let wild: Vec<f64> = (0..cfg.variable_count()).map(|_| rng.random_range(-0.05..0.2)).collect();
        let projected = nmpc.project(&wild, &applied).map_err(|e| e.to_string())?;
        worst = worst.max(set.max_violation(&projected));
    }
    let detail = format!("{} shifted and projected horizons, worst violation {worst:.1e}", s.cases);
    if worst <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}
