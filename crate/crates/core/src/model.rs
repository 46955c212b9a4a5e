//! Graph form `M(x) ẋ = (C_in - C_out)(x, u) x + B d` of the hybrid loop.
//!
//! Node order: tank fluid, cold plate wall, cold plate fluid, heat exchanger
//! wall, heat exchanger fluid, then every storage device in flow order. Within
//! a device the fluid row comes first, then the plate row, then the
//! PCM-composite grid row-major starting at the row touching the plate.
//!
//! Primary flow runs tank -> cold plate fluid -> heat exchanger fluid, then
//! splits into the bypass line (back to the tank) and the storage devices in
//! series (fluid volumes in upwind order) before rejoining at the tank.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::params::{SystemParams, TesDerived};
use crate::pcm;

/// Below this total primary flow the tank mixing rule is undefined.
pub const MIN_TOTAL_FLOW_KGPS: f64 = 1e-6;

/// Plausible temperature band checked when building a [`StateVector`].
pub const TEMPERATURE_RANGE_C: (f64, f64) = (-40.0, 200.0);

/// Index map of the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    devices: usize,
    columns: usize,
    pcm_rows: usize,
}

impl Layout {
    pub const TANK: usize = 0;
    pub const COLD_PLATE_WALL: usize = 1;
    pub const COLD_PLATE_FLUID: usize = 2;
    pub const HX_WALL: usize = 3;
    pub const HX_FLUID: usize = 4;
    pub const LUMPED: usize = 5;

    pub fn new(params: &SystemParams) -> Self {
        Self {
            devices: params.tes.device_count,
            columns: params.tes.columns,
            pcm_rows: params.tes.pcm_rows,
        }
    }

    pub fn devices(&self) -> usize {
        self.devices
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn pcm_rows(&self) -> usize {
        self.pcm_rows
    }

    pub fn per_device(&self) -> usize {
        (2 + self.pcm_rows) * self.columns
    }

    pub fn dim(&self) -> usize {
        Self::LUMPED + self.devices * self.per_device()
    }

    pub fn has_tes(&self) -> bool {
        self.devices > 0
    }

    fn base(&self, device: usize) -> usize {
        Self::LUMPED + device * self.per_device()
    }

    pub fn fluid(&self, device: usize, column: usize) -> usize {
        self.base(device) + column
    }

    pub fn plate(&self, device: usize, column: usize) -> usize {
        self.base(device) + self.columns + column
    }

    pub fn pcm(&self, device: usize, row: usize, column: usize) -> usize {
        self.base(device) + 2 * self.columns + row * self.columns + column
    }

    /// Last fluid volume of the last device.
    pub fn tes_outlet(&self) -> Option<usize> {
        self.has_tes()
            .then(|| self.fluid(self.devices - 1, self.columns - 1))
    }

    /// All storage states (everything after the lumped block).
    pub fn tes_range(&self) -> std::ops::Range<usize> {
        Self::LUMPED..self.dim()
    }

    pub fn pcm_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.devices).flat_map(move |d| {
            (0..self.pcm_rows).flat_map(move |r| (0..self.columns).map(move |c| self.pcm(d, r, c)))
        })
    }

    pub fn is_pcm(&self, index: usize) -> bool {
        if index < Self::LUMPED || index >= self.dim() {
            return false;
        }
        (index - Self::LUMPED) % self.per_device() >= 2 * self.columns
    }

    pub fn is_tes_fluid(&self, index: usize) -> bool {
        if index < Self::LUMPED || index >= self.dim() {
            return false;
        }
        (index - Self::LUMPED) % self.per_device() < self.columns
    }
}

/// Validated temperature vector [°C].
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(DVector<f64>);

impl StateVector {
    pub fn new(values: DVector<f64>) -> Result<Self> {
        let (lo, hi) = TEMPERATURE_RANGE_C;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::Input(format!(
                    "state entry {i} = {v} outside [{lo}, {hi}] °C"
                )));
            }
        }
        Ok(Self(values))
    }

    pub fn uniform(dim: usize, temperature_c: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, temperature_c))
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn cold_plate_wall_c(&self) -> f64 {
        self.0[Layout::COLD_PLATE_WALL]
    }
}

/// Bypass and storage mass flow rates [kg/s].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlInput {
    pub bypass_kgps: f64,
    pub tes_kgps: f64,
}

impl ControlInput {
    pub fn new(bypass_kgps: f64, tes_kgps: f64) -> Self {
        Self {
            bypass_kgps,
            tes_kgps,
        }
    }

    pub fn total_kgps(&self) -> f64 {
        self.bypass_kgps + self.tes_kgps
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.bypass_kgps, self.tes_kgps]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("bypass", self.bypass_kgps), ("tes", self.tes_kgps)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!("{name} flow must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Cold plate load and chiller boundary condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisturbanceInput {
    pub cold_plate_heat_w: f64,
    pub chiller_temperature_c: f64,
    /// Secondary (chiller side) flow; constant, folded into the chiller conductance.
    pub secondary_flow_kgps: f64,
}

impl DisturbanceInput {
    pub fn new(cold_plate_heat_w: f64, chiller_temperature_c: f64) -> Self {
        Self {
            cold_plate_heat_w,
            chiller_temperature_c,
            secondary_flow_kgps: 0.067,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.cold_plate_heat_w.is_finite() || self.cold_plate_heat_w < 0.0 {
            return Err(Error::Input(format!(
                "cold plate heat load must be finite and >= 0, got {}",
                self.cold_plate_heat_w
            )));
        }
        if !self.chiller_temperature_c.is_finite() {
            return Err(Error::Input("chiller temperature must be finite".into()));
        }
        Ok(())
    }

    /// `d = [Q_cp, (hA)_ch T_ch]`.
    pub fn vector(&self, params: &SystemParams) -> [f64; 2] {
        [
            self.cold_plate_heat_w,
            params.lumped.chiller_ha_w_per_k * self.chiller_temperature_c,
        ]
    }
}

/// Directed conductance: energy enters `to` at the temperature of `from`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub to: usize,
    pub from: usize,
    pub conductance_w_per_k: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermalGraph {
    /// Diagonal of `M` [J/K].
    pub capacitance: DVector<f64>,
    /// Off-diagonal entries of `C_in` in a fixed order.
    pub inflow: Vec<Edge>,
    /// Diagonal of `C_out` [W/K].
    pub outflow: DVector<f64>,
    /// `B`, n_x by 2.
    pub disturbance_map: DMatrix<f64>,
}

impl ThermalGraph {
    pub fn dim(&self) -> usize {
        self.capacitance.len()
    }

    pub fn c_in(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut c = DMatrix::zeros(n, n);
        for e in &self.inflow {
            c[(e.to, e.from)] += e.conductance_w_per_k;
        }
        c
    }

    pub fn c_out(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.outflow)
    }

    /// `C_in - C_out`.
    pub fn conductance(&self) -> DMatrix<f64> {
        let mut c = self.c_in();
        for i in 0..self.dim() {
            c[(i, i)] -= self.outflow[i];
        }
        c
    }

    /// `(C_in - C_out) x + B d`, the net heat flow into every node [W].
    pub fn heat_flow(&self, x: &DVector<f64>, d: &[f64; 2]) -> DVector<f64> {
        let mut q = -self.outflow.component_mul(x);
        for e in &self.inflow {
            q[e.to] += e.conductance_w_per_k * x[e.from];
        }
        q += &self.disturbance_map * DVector::from_column_slice(d);
        q
    }

    /// Nonzero positions of `C_in`.
    pub fn pattern(&self) -> Vec<(usize, usize)> {
        self.inflow.iter().map(|e| (e.to, e.from)).collect()
    }
}

/// Sparse `∂A/∂u_j`, stored as (row, col, value) triplets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InputJacobian {
    pub dim: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl InputJacobian {
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for &(i, j, g) in &self.entries {
            out[i] += g * v[j];
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for &(i, j, g) in &self.entries {
            m[(i, j)] += g;
        }
        m
    }
}

/// Flow path of one advective edge: which inputs carry mass along it.
#[derive(Debug, Clone, Copy)]
struct FlowPath {
    to: usize,
    from: usize,
    bypass: bool,
    tes: bool,
}

/// Linearized continuous dynamics `ẋ = A x + d̃` at one operating point.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub a: DMatrix<f64>,
    pub d_tilde: DVector<f64>,
}

/// Hybrid TMS model bound to one parameter set.
#[derive(Debug, Clone)]
pub struct ThermalModel {
    params: SystemParams,
    layout: Layout,
    tes: TesDerived,
    paths: Vec<FlowPath>,
}

impl ThermalModel {
    pub fn new(params: SystemParams) -> Result<Self> {
        params.validate()?;
        let layout = Layout::new(&params);
        let tes = params.derived();
        let paths = flow_paths(&layout);
        Ok(Self {
            params,
            layout,
            tes,
            paths,
        })
    }

    pub fn params(&self) -> &SystemParams {
        &self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Number of control inputs that drive this plant (1 without storage).
    pub fn input_count(&self) -> usize {
        if self.layout.has_tes() {
            2
        } else {
            1
        }
    }

    pub fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!("state entry {i} is not finite")));
        }
        Ok(())
    }

    fn check_inputs(&self, x: &DVector<f64>, u: &ControlInput, d: &DisturbanceInput) -> Result<()> {
        self.check_state(x)?;
        u.validate()?;
        d.validate()?;
        if !self.layout.has_tes() && u.tes_kgps != 0.0 {
            return Err(Error::Input(
                "storage flow must be zero for a plant without storage".into(),
            ));
        }
        Ok(())
    }

    /// Composite conductivity of a PCM-metal volume at `t`.
    fn composite_conductivity(&self, t: f64) -> f64 {
        let f = self.params.metal.fin_volume_fraction;
        f * self.params.metal.conductivity_w_per_m_k + (1.0 - f) * pcm::conductivity(t, &self.params.pcm)
    }

    /// Diagonal of `M(x)` [J/K].
    pub fn capacitance(&self, x: &DVector<f64>) -> DVector<f64> {
        let l = &self.params.lumped;
        let mut m = DVector::zeros(self.dim());
        m[Layout::TANK] = l.tank_fluid_capacitance_j_per_k;
        m[Layout::COLD_PLATE_WALL] = l.cold_plate_wall_capacitance_j_per_k;
        m[Layout::COLD_PLATE_FLUID] = l.cold_plate_fluid_capacitance_j_per_k;
        m[Layout::HX_WALL] = l.hx_wall_capacitance_j_per_k;
        m[Layout::HX_FLUID] = l.hx_fluid_capacitance_j_per_k;
        let lay = &self.layout;
        for dev in 0..lay.devices() {
            for c in 0..lay.columns() {
                m[lay.fluid(dev, c)] = self.tes.fluid_capacitance_j_per_k;
                m[lay.plate(dev, c)] = self.tes.plate_capacitance_j_per_k;
                for r in 0..lay.pcm_rows() {
                    let i = lay.pcm(dev, r, c);
                    m[i] = self.tes.pcm_mass_kg
                        * pcm::effective_specific_heat_unchecked(x[i], &self.params.pcm)
                        + self.tes.fin_capacitance_j_per_k;
                }
            }
        }
        m
    }

    /// Stored energy of every node relative to 0 °C [J].
    pub fn node_enthalpy(&self, x: &DVector<f64>) -> DVector<f64> {
        let t0 = pcm::ENTHALPY_REFERENCE_C;
        let fixed = self.capacitance(x);
        DVector::from_fn(self.dim(), |i, _| {
            if self.layout.is_pcm(i) {
                self.tes.pcm_mass_kg * pcm::specific_enthalpy(x[i], &self.params.pcm)
                    + self.tes.fin_capacitance_j_per_k * (x[i] - t0)
            } else {
                fixed[i] * (x[i] - t0)
            }
        })
    }

    /// Total stored energy relative to 0 °C [J].
    pub fn enthalpy(&self, x: &DVector<f64>) -> f64 {
        self.node_enthalpy(x).sum()
    }

    /// Builds `M`, `C_in`, `C_out` and `B` at `(x, u, d)`.
    pub fn assemble_graph(
        &self,
        x: &DVector<f64>,
        u: &ControlInput,
        d: &DisturbanceInput,
    ) -> Result<ThermalGraph> {
        self.check_inputs(x, u, d)?;
        Ok(self.assemble_unchecked(x, u))
    }

    pub(crate) fn assemble_unchecked(&self, x: &DVector<f64>, u: &ControlInput) -> ThermalGraph {
        let n = self.dim();
        let cp = self.params.fluid.specific_heat_j_per_kg_k;
        let l = &self.params.lumped;
        let lay = &self.layout;
        let mut inflow = Vec::with_capacity(8 * n);

        for p in &self.paths {
            let flow = if p.bypass { u.bypass_kgps } else { 0.0 } + if p.tes { u.tes_kgps } else { 0.0 };
            inflow.push(Edge {
                to: p.to,
                from: p.from,
                conductance_w_per_k: flow * cp,
            });
        }

        let mut pair = |a: usize, b: usize, g: f64| {
            inflow.push(Edge { to: a, from: b, conductance_w_per_k: g });
            inflow.push(Edge { to: b, from: a, conductance_w_per_k: g });
        };
        pair(Layout::COLD_PLATE_WALL, Layout::COLD_PLATE_FLUID, l.cold_plate_ha_w_per_k);
        pair(Layout::HX_WALL, Layout::HX_FLUID, l.hx_ha_w_per_k);

        let t = &self.params.tes;
        let k_metal = self.params.metal.conductivity_w_per_m_k;
        let half_plate = 0.5 * t.plate_thickness_m;
        let half_row = 0.5 * self.tes.row_thickness_m;
        let half_len = 0.5 * t.cv_length_m;
        let face = self.tes.face_area_m2;
        let side = self.tes.side_area_m2;
        for dev in 0..lay.devices() {
            for c in 0..lay.columns() {
                pair(lay.fluid(dev, c), lay.plate(dev, c), t.fluid_plate_ha_w_per_k);
                if c + 1 < lay.columns() {
                    pair(
                        lay.plate(dev, c),
                        lay.plate(dev, c + 1),
                        self.tes.plate_axial_conductance_w_per_k,
                    );
                }
                let first = lay.pcm(dev, 0, c);
                let k_first = self.composite_conductivity(x[first]);
                pair(
                    lay.plate(dev, c),
                    first,
                    face / (half_plate / k_metal + half_row / k_first),
                );
                for r in 0..lay.pcm_rows() {
                    let i = lay.pcm(dev, r, c);
                    let ki = self.composite_conductivity(x[i]);
                    if r + 1 < lay.pcm_rows() {
                        let j = lay.pcm(dev, r + 1, c);
                        let kj = self.composite_conductivity(x[j]);
                        pair(i, j, face / (half_row / ki + half_row / kj));
                    }
                    if c + 1 < lay.columns() {
                        let j = lay.pcm(dev, r, c + 1);
                        let kj = self.composite_conductivity(x[j]);
                        pair(i, j, side / (half_len / ki + half_len / kj));
                    }
                }
            }
        }

        let mut outflow = DVector::zeros(n);
        for e in &inflow {
            outflow[e.to] += e.conductance_w_per_k;
        }
        outflow[Layout::HX_WALL] += l.chiller_ha_w_per_k;

        let mut b = DMatrix::zeros(n, 2);
        b[(Layout::COLD_PLATE_WALL, 0)] = 1.0;
        b[(Layout::HX_WALL, 1)] = 1.0;

        ThermalGraph {
            capacitance: self.capacitance(x),
            inflow,
            outflow,
            disturbance_map: b,
        }
    }

    /// `A = M⁻¹ (C_in - C_out)`, `d̃ = M⁻¹ B d`.
    pub fn assemble_a_dtilde(
        &self,
        graph: &ThermalGraph,
        d: &DisturbanceInput,
    ) -> Result<Linearization> {
        if let Some(i) = graph.capacitance.iter().position(|&m| !(m > 0.0) || !m.is_finite()) {
            return Err(crate::error::param_err(
                "capacitance",
                format!("diagonal entry {i} of M is {}", graph.capacitance[i]),
            ));
        }
        Ok(linearization_from_graph(graph, &d.vector(&self.params)))
    }

    /// `A(x, u, d)` and `d̃(x, d)` in one call.
    pub fn linearize(
        &self,
        x: &DVector<f64>,
        u: &ControlInput,
        d: &DisturbanceInput,
    ) -> Result<Linearization> {
        let g = self.assemble_graph(x, u, d)?;
        self.assemble_a_dtilde(&g, d)
    }

    pub(crate) fn linearize_unchecked(
        &self,
        x: &DVector<f64>,
        u: &ControlInput,
        d: &DisturbanceInput,
    ) -> Linearization {
        let g = self.assemble_unchecked(x, u);
        linearization_from_graph(&g, &d.vector(&self.params))
    }

    /// Analytical `G_j = ∂A/∂u_j` for j in {bypass, storage}.
    pub fn input_jacobians(
        &self,
        x: &DVector<f64>,
        d: &DisturbanceInput,
    ) -> Result<[InputJacobian; 2]> {
        self.check_state(x)?;
        d.validate()?;
        Ok(self.input_jacobians_unchecked(x))
    }

    pub(crate) fn input_jacobians_unchecked(&self, x: &DVector<f64>) -> [InputJacobian; 2] {
        let m = self.capacitance(x);
        let cp = self.params.fluid.specific_heat_j_per_kg_k;
        let n = self.dim();
        let mut g = [
            InputJacobian { dim: n, entries: Vec::new() },
            InputJacobian { dim: n, entries: Vec::new() },
        ];
        for p in &self.paths {
            for (j, active) in [p.bypass, p.tes].into_iter().enumerate() {
                if active {
                    let w = cp / m[p.to];
                    g[j].entries.push((p.to, p.from, w));
                    g[j].entries.push((p.to, p.to, -w));
                }
            }
        }
        g
    }

    /// Right-hand side `M⁻¹ (C x + B d)` of the nonlinear dynamics.
    pub fn derivative(
        &self,
        x: &DVector<f64>,
        u: &ControlInput,
        d: &DisturbanceInput,
    ) -> Result<DVector<f64>> {
        let g = self.assemble_graph(x, u, d)?;
        Ok(g.heat_flow(x, &d.vector(&self.params)).component_div(&g.capacitance))
    }

    /// Mixed tank inlet temperature of the bypass and storage streams.
    pub fn tank_inlet_temperature(&self, x: &DVector<f64>, u: &ControlInput) -> Result<f64> {
        self.check_state(x)?;
        u.validate()?;
        let total = u.total_kgps();
        if total < MIN_TOTAL_FLOW_KGPS {
            return Err(Error::DegenerateFlow {
                total_kgps: total,
                floor_kgps: MIN_TOTAL_FLOW_KGPS,
            });
        }
        let t_hx = x[Layout::HX_FLUID];
        let t_tes = match self.layout.tes_outlet() {
            Some(i) => x[i],
            None if u.tes_kgps == 0.0 => t_hx,
            None => {
                return Err(Error::Input(
                    "storage flow must be zero for a plant without storage".into(),
                ))
            }
        };
        if u.tes_kgps == 0.0 {
            return Ok(t_hx);
        }
        if u.bypass_kgps == 0.0 {
            return Ok(t_tes);
        }
        Ok((u.bypass_kgps * t_hx + u.tes_kgps * t_tes) / total)
    }

    /// Mass-weighted melt fraction over all PCM volumes.
    pub fn mean_melt_fraction(&self, x: &DVector<f64>) -> f64 {
        let count = self.layout.pcm_indices().count();
        if count == 0 {
            return 0.0;
        }
        // every composite volume carries the same PCM mass
        let sum: f64 = self
            .layout
            .pcm_indices()
            .map(|i| pcm::melt_fraction_unchecked(x[i], &self.params.pcm))
            .sum();
        sum / count as f64
    }

    /// `1 - mean melt fraction`: 1 fully solid (charged), 0 fully melted.
    pub fn state_of_charge(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_state(x)?;
        Ok(1.0 - self.mean_melt_fraction(x))
    }

    /// A uniform state at `temperature_c`.
    pub fn uniform_state(&self, temperature_c: f64) -> DVector<f64> {
        DVector::from_element(self.dim(), temperature_c)
    }
}

fn linearization_from_graph(g: &ThermalGraph, d: &[f64; 2]) -> Linearization {
    let n = g.dim();
    let mut a = DMatrix::zeros(n, n);
    for e in &g.inflow {
        a[(e.to, e.from)] += e.conductance_w_per_k / g.capacitance[e.to];
    }
    for i in 0..n {
        a[(i, i)] -= g.outflow[i] / g.capacitance[i];
    }
    let bd = &g.disturbance_map * DVector::from_column_slice(d);
    Linearization {
        a,
        d_tilde: bd.component_div(&g.capacitance),
    }
}

fn flow_paths(lay: &Layout) -> Vec<FlowPath> {
    let mut paths = vec![
        FlowPath { to: Layout::TANK, from: Layout::HX_FLUID, bypass: true, tes: false },
        FlowPath { to: Layout::COLD_PLATE_FLUID, from: Layout::TANK, bypass: true, tes: true },
        FlowPath { to: Layout::HX_FLUID, from: Layout::COLD_PLATE_FLUID, bypass: true, tes: true },
    ];
    if let Some(outlet) = lay.tes_outlet() {
        paths.push(FlowPath { to: Layout::TANK, from: outlet, bypass: false, tes: true });
        let mut upstream = Layout::HX_FLUID;
        for dev in 0..lay.devices() {
            for c in 0..lay.columns() {
                let i = lay.fluid(dev, c);
                paths.push(FlowPath { to: i, from: upstream, bypass: false, tes: true });
                upstream = i;
            }
        }
    }
    paths
}
