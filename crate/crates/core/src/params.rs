//! Physical parameters of the hybrid thermal management system.
//!
//! Every quantity carries its SI unit in the field name. The defaults are a
//! representative bench-scale loop with four hexadecane/aluminium storage
//! devices; see the provenance table in the README for where each value
//! comes from.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

/// Capacitances and conductances of the tank, cold plate and heat exchanger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LumpedParams {
    pub tank_fluid_capacitance_j_per_k: f64,
    pub cold_plate_wall_capacitance_j_per_k: f64,
    pub cold_plate_fluid_capacitance_j_per_k: f64,
    pub hx_wall_capacitance_j_per_k: f64,
    pub hx_fluid_capacitance_j_per_k: f64,
    pub cold_plate_ha_w_per_k: f64,
    pub hx_ha_w_per_k: f64,
    /// Wall-to-chiller-fluid conductance. Zero isolates the loop.
    pub chiller_ha_w_per_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidParams {
    pub specific_heat_j_per_kg_k: f64,
    pub density_kg_per_m3: f64,
}

/// Phase change material properties (hexadecane by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcmParams {
    pub solid_specific_heat_j_per_kg_k: f64,
    pub liquid_specific_heat_j_per_kg_k: f64,
    pub latent_heat_j_per_kg: f64,
    pub melt_temperature_c: f64,
    /// Standard deviation of the latent-heat bump.
    pub melt_width_c: f64,
    pub solid_conductivity_w_per_m_k: f64,
    pub liquid_conductivity_w_per_m_k: f64,
    pub density_kg_per_m3: f64,
}

/// Fin and plate metal (aluminium by default).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetalParams {
    pub specific_heat_j_per_kg_k: f64,
    pub conductivity_w_per_m_k: f64,
    pub density_kg_per_m3: f64,
    /// Volume fraction of fin metal inside each PCM-composite volume.
    pub fin_volume_fraction: f64,
}

/// Geometry of one storage device and the number of devices in series.
///
/// Each device is a single fluid row and a single plate row of `columns`
/// volumes, backed by a `pcm_rows x columns` grid of composite volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TesParams {
    pub device_count: usize,
    pub columns: usize,
    pub pcm_rows: usize,
    /// Length of one control volume along the flow direction.
    pub cv_length_m: f64,
    pub cv_width_m: f64,
    pub fluid_channel_depth_m: f64,
    pub plate_thickness_m: f64,
    /// Total thickness of the PCM-composite layer.
    pub pcm_thickness_m: f64,
    /// Fluid-to-plate convective conductance of one fluid volume.
    pub fluid_plate_ha_w_per_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    pub lumped: LumpedParams,
    pub fluid: FluidParams,
    pub pcm: PcmParams,
    pub metal: MetalParams,
    pub tes: TesParams,
}

impl Default for SystemParams {
    fn default() -> Self {
        Self {
            lumped: LumpedParams {
                tank_fluid_capacitance_j_per_k: 150.0,
                cold_plate_wall_capacitance_j_per_k: 150.0,
                cold_plate_fluid_capacitance_j_per_k: 60.0,
                hx_wall_capacitance_j_per_k: 100.0,
                hx_fluid_capacitance_j_per_k: 60.0,
                cold_plate_ha_w_per_k: 100.0,
                hx_ha_w_per_k: 250.0,
                chiller_ha_w_per_k: 250.0,
            },
            fluid: FluidParams {
                specific_heat_j_per_kg_k: 4180.0,
                density_kg_per_m3: 998.0,
            },
            pcm: PcmParams {
                solid_specific_heat_j_per_kg_k: 1800.0,
                liquid_specific_heat_j_per_kg_k: 2200.0,
                latent_heat_j_per_kg: 236_000.0,
                melt_temperature_c: 18.1,
                melt_width_c: 1.5,
                solid_conductivity_w_per_m_k: 0.33,
                liquid_conductivity_w_per_m_k: 0.15,
                density_kg_per_m3: 800.0,
            },
            metal: MetalParams {
                specific_heat_j_per_kg_k: 900.0,
                conductivity_w_per_m_k: 205.0,
                density_kg_per_m3: 2700.0,
                fin_volume_fraction: 0.1,
            },
            tes: TesParams {
                device_count: 4,
                columns: 3,
                pcm_rows: 4,
                cv_length_m: 0.05,
                cv_width_m: 0.11,
                fluid_channel_depth_m: 0.003,
                plate_thickness_m: 0.002,
                pcm_thickness_m: 0.013,
                fluid_plate_ha_w_per_k: 12.0,
            },
        }
    }
}

impl SystemParams {
    /// The same loop with the storage subsystem removed (5 states).
    pub fn without_tes(&self) -> Self {
        let mut p = self.clone();
        p.tes.device_count = 0;
        p
    }

    pub fn state_dim(&self) -> usize {
        5 + self.tes.device_count * self.tes.volumes_per_device()
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(param_err(key, format!("must be finite and > 0, got {v}")))
            }
        }
        let l = &self.lumped;
        positive("lumped.tank_fluid_capacitance_j_per_k", l.tank_fluid_capacitance_j_per_k)?;
        positive(
            "lumped.cold_plate_wall_capacitance_j_per_k",
            l.cold_plate_wall_capacitance_j_per_k,
        )?;
        positive(
            "lumped.cold_plate_fluid_capacitance_j_per_k",
            l.cold_plate_fluid_capacitance_j_per_k,
        )?;
        positive("lumped.hx_wall_capacitance_j_per_k", l.hx_wall_capacitance_j_per_k)?;
        positive("lumped.hx_fluid_capacitance_j_per_k", l.hx_fluid_capacitance_j_per_k)?;
        positive("lumped.cold_plate_ha_w_per_k", l.cold_plate_ha_w_per_k)?;
        positive("lumped.hx_ha_w_per_k", l.hx_ha_w_per_k)?;
        if !(l.chiller_ha_w_per_k.is_finite() && l.chiller_ha_w_per_k >= 0.0) {
            return Err(param_err(
                "lumped.chiller_ha_w_per_k",
                format!("must be finite and >= 0, got {}", l.chiller_ha_w_per_k),
            ));
        }
        positive("fluid.specific_heat_j_per_kg_k", self.fluid.specific_heat_j_per_kg_k)?;
        positive("fluid.density_kg_per_m3", self.fluid.density_kg_per_m3)?;

        let p = &self.pcm;
        positive("pcm.solid_specific_heat_j_per_kg_k", p.solid_specific_heat_j_per_kg_k)?;
        positive("pcm.liquid_specific_heat_j_per_kg_k", p.liquid_specific_heat_j_per_kg_k)?;
        positive("pcm.latent_heat_j_per_kg", p.latent_heat_j_per_kg)?;
        if !p.melt_temperature_c.is_finite() {
            return Err(param_err("pcm.melt_temperature_c", "must be finite"));
        }
        positive("pcm.melt_width_c", p.melt_width_c)?;
        positive("pcm.solid_conductivity_w_per_m_k", p.solid_conductivity_w_per_m_k)?;
        positive("pcm.liquid_conductivity_w_per_m_k", p.liquid_conductivity_w_per_m_k)?;
        positive("pcm.density_kg_per_m3", p.density_kg_per_m3)?;

        let m = &self.metal;
        positive("metal.specific_heat_j_per_kg_k", m.specific_heat_j_per_kg_k)?;
        positive("metal.conductivity_w_per_m_k", m.conductivity_w_per_m_k)?;
        positive("metal.density_kg_per_m3", m.density_kg_per_m3)?;
        if !(m.fin_volume_fraction > 0.0 && m.fin_volume_fraction < 1.0) {
            return Err(param_err(
                "metal.fin_volume_fraction",
                format!("must lie in (0, 1), got {}", m.fin_volume_fraction),
            ));
        }

        let t = &self.tes;
        if t.columns == 0 {
            return Err(param_err("tes.columns", "must be >= 1"));
        }
        if t.pcm_rows == 0 {
            return Err(param_err("tes.pcm_rows", "must be >= 1"));
        }
        positive("tes.cv_length_m", t.cv_length_m)?;
        positive("tes.cv_width_m", t.cv_width_m)?;
        positive("tes.fluid_channel_depth_m", t.fluid_channel_depth_m)?;
        positive("tes.plate_thickness_m", t.plate_thickness_m)?;
        positive("tes.pcm_thickness_m", t.pcm_thickness_m)?;
        positive("tes.fluid_plate_ha_w_per_k", t.fluid_plate_ha_w_per_k)?;
        Ok(())
    }

    pub(crate) fn derived(&self) -> TesDerived {
        TesDerived::new(self)
    }
}

impl TesParams {
    pub fn volumes_per_device(&self) -> usize {
        2 * self.columns + self.pcm_rows * self.columns
    }
}

/// Masses and conduction geometry that follow from [`TesParams`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct TesDerived {
    pub fluid_capacitance_j_per_k: f64,
    pub plate_capacitance_j_per_k: f64,
    pub pcm_mass_kg: f64,
    pub fin_capacitance_j_per_k: f64,
    /// Plate-to-plate conductance between neighbouring columns.
    pub plate_axial_conductance_w_per_k: f64,
    /// Face area normal to the thickness direction.
    pub face_area_m2: f64,
    /// Face area normal to the flow direction of one PCM row.
    pub side_area_m2: f64,
    pub row_thickness_m: f64,
}

impl TesDerived {
    fn new(p: &SystemParams) -> Self {
        let t = &p.tes;
        let m = &p.metal;
        let face = t.cv_length_m * t.cv_width_m;
        let row = t.pcm_thickness_m / t.pcm_rows as f64;
        let pcm_cv_volume = face * row;
        let fluid_mass = face * t.fluid_channel_depth_m * p.fluid.density_kg_per_m3;
        let plate_mass = face * t.plate_thickness_m * m.density_kg_per_m3;
        let fin_mass = pcm_cv_volume * m.fin_volume_fraction * m.density_kg_per_m3;
        Self {
            fluid_capacitance_j_per_k: fluid_mass * p.fluid.specific_heat_j_per_kg_k,
            plate_capacitance_j_per_k: plate_mass * m.specific_heat_j_per_kg_k,
            pcm_mass_kg: pcm_cv_volume * (1.0 - m.fin_volume_fraction) * p.pcm.density_kg_per_m3,
            fin_capacitance_j_per_k: fin_mass * m.specific_heat_j_per_kg_k,
            plate_axial_conductance_w_per_k: m.conductivity_w_per_m_k
                * t.plate_thickness_m
                * t.cv_width_m
                / t.cv_length_m,
            face_area_m2: face,
            side_area_m2: row * t.cv_width_m,
            row_thickness_m: row,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_dimension_is_77() {
        let p = SystemParams::default();
        p.validate().unwrap();
        assert_eq!(p.tes.volumes_per_device(), 18);
        assert_eq!(p.state_dim(), 77);
        assert_eq!(p.without_tes().state_dim(), 5);
    }

    #[test]
    fn rejects_non_positive_capacitance() {
        let mut p = SystemParams::default();
        p.lumped.hx_wall_capacitance_j_per_k = -1.0;
        let err = p.validate().unwrap_err().to_string();
        assert!(err.contains("lumped.hx_wall_capacitance_j_per_k"), "{err}");
    }

    #[test]
    fn rejects_fin_fraction_outside_unit_interval() {
        let mut p = SystemParams::default();
        p.metal.fin_volume_fraction = 1.0;
        assert!(p.validate().is_err());
        p.metal.fin_volume_fraction = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn chiller_conductance_may_be_zero() {
        let mut p = SystemParams::default();
        p.lumped.chiller_ha_w_per_k = 0.0;
        p.validate().unwrap();
    }

    #[test]
    fn pcm_volume_matches_device_geometry() {
        let p = SystemParams::default();
        let d = p.derived();
        let cells = (p.tes.columns * p.tes.pcm_rows) as f64;
        // 15 x 11 x 1.3 cm per device
        let total = cells * d.face_area_m2 * d.row_thickness_m;
        assert!((total - 0.15 * 0.11 * 0.013).abs() < 1e-12);
    }
}
