//! Versioned TOML configuration files.
//!
//! A file carries `schema_version` and any of the `[system]`, `[nmpc]` and
//! `[scenario]` sections. A configuration directory holds `system.toml`,
//! `nmpc.toml` and `scenario.toml`; missing files fall back to defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nmpc::NmpcConfig;
use crate::params::SystemParams;
use crate::sim::Scenario;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

pub const SYSTEM_FILE: &str = "system.toml";
pub const NMPC_FILE: &str = "nmpc.toml";
pub const SCENARIO_FILE: &str = "scenario.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmpc: Option<NmpcConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        if file.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{origin}: unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Everything a run needs. `scenario` is `None` until one is loaded or
/// sized from the other two.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub system: SystemParams,
    pub nmpc: NmpcConfig,
    pub scenario: Option<Scenario>,
}

impl Config {
    /// Sections present in `file` replace the current ones.
    pub fn merge(&mut self, file: ConfigFile) {
        if let Some(s) = file.system {
            self.system = s;
        }
        if let Some(n) = file.nmpc {
            self.nmpc = n;
        }
        if let Some(s) = file.scenario {
            self.scenario = Some(s);
        }
    }

    /// Loads a single file or a configuration directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Config::default();
        if path.is_dir() {
            for name in [SYSTEM_FILE, NMPC_FILE, SCENARIO_FILE] {
                let p = path.join(name);
                if p.exists() {
                    cfg.merge(ConfigFile::read(&p)?);
                }
            }
        } else {
            cfg.merge(ConfigFile::read(path)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate().map_err(|e| match e {
            Error::Parameter { key, reason } => Error::Parameter {
                key: format!("system.{key}"),
                reason,
            },
            other => other,
        })?;
        self.nmpc.validate()?;
        self.nmpc.penalty().check_continuity(1e-9)?;
        if let Some(s) = &self.scenario {
            s.validate()?;
        }
        Ok(())
    }

    /// The loaded scenario, or the default one sized for this plant.
    pub fn scenario_or_default(&self) -> Result<Scenario> {
        match &self.scenario {
            Some(s) => Ok(s.clone()),
            None => Scenario::sized(&self.system, &self.nmpc),
        }
    }
}

/// Comments placed above keys when defaults are exported, keyed by
/// `table.key`.
const NOTES: &[(&str, &str)] = &[
    ("system.lumped.tank_fluid_capacitance_j_per_k", "engineering estimate for a bench-scale loop"),
    ("system.lumped.cold_plate_wall_capacitance_j_per_k", "engineering estimate"),
    ("system.lumped.cold_plate_fluid_capacitance_j_per_k", "engineering estimate"),
    ("system.lumped.hx_wall_capacitance_j_per_k", "engineering estimate"),
    ("system.lumped.hx_fluid_capacitance_j_per_k", "engineering estimate"),
    ("system.lumped.cold_plate_ha_w_per_k", "engineering estimate"),
    ("system.lumped.hx_ha_w_per_k", "engineering estimate"),
    ("system.lumped.chiller_ha_w_per_k", "engineering estimate; 0 isolates the loop"),
    ("system.fluid.specific_heat_j_per_kg_k", "water property table"),
    ("system.fluid.density_kg_per_m3", "water property table"),
    ("system.pcm.latent_heat_j_per_kg", "hexadecane property table"),
    ("system.pcm.melt_temperature_c", "hexadecane property table"),
    ("system.pcm.melt_width_c", "assumed mushy-zone width"),
    ("system.pcm.density_kg_per_m3", "hexadecane property table"),
    ("system.metal.conductivity_w_per_m_k", "aluminium property table"),
    ("system.metal.fin_volume_fraction", "assumed fin density"),
    ("system.tes.device_count", "published storage layout"),
    ("system.tes.columns", "published discretization"),
    ("system.tes.pcm_rows", "published discretization"),
    ("system.tes.cv_length_m", "published device geometry, split into columns"),
    ("system.tes.cv_width_m", "published device geometry"),
    ("system.tes.pcm_thickness_m", "published device geometry"),
    ("system.tes.fluid_channel_depth_m", "engineering estimate"),
    ("system.tes.plate_thickness_m", "engineering estimate"),
    ("system.tes.fluid_plate_ha_w_per_k", "engineering estimate"),
    ("nmpc.horizon_steps", "published controller setting"),
    ("nmpc.step_s", "published controller setting"),
    ("nmpc.min_flow_kgps", "published controller setting"),
    ("nmpc.max_total_flow_kgps", "published controller setting"),
    ("nmpc.max_flow_change_kgps", "published controller setting"),
    ("nmpc.max_cold_plate_temperature_c", "published controller setting"),
    ("nmpc.penalty_margin_c", "published controller setting"),
    ("nmpc.penalty_curvature", "published controller setting; the other penalty coefficients follow from C2 matching"),
    ("nmpc.penalty_offset", "zero keeps the penalty at zero offset"),
    ("nmpc.power_weight", "published controller setting"),
    ("nmpc.move_weight", "published controller setting"),
    ("nmpc.endurance_weight", "published controller setting"),
    ("nmpc.newton_schulz_iterations", "published controller setting"),
    ("nmpc.constraint_tolerance", "published optimizer setting"),
    ("nmpc.optimality_tolerance", "published optimizer setting"),
    ("nmpc.step_tolerance", "published optimizer setting"),
    ("nmpc.typical_flow_kgps", "published optimizer setting"),
    ("nmpc.inverse_fallback_residual", "divergence guard for the warm-started inverse"),
    ("scenario.chiller_temperature_c", "published boundary condition"),
    ("scenario.secondary_flow_kgps", "published boundary condition"),
    ("scenario.initial_temperature_c", "half a kelvin above the chiller"),
    ("scenario.plant_tolerance", "truth-plant local error per second"),
    ("scenario.pulses", "first pulse 1.25x the steady HX-only capacity at full flow; later pulses 0.6x the first"),
];

/// Inserts `# note` lines above annotated keys.
fn annotate(text: &str) -> String {
    let mut out = String::with_capacity(text.len() * 2);
    let mut table = String::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix("[[").and_then(|s| s.strip_suffix("]]")) {
            table = name.to_string();
        } else if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            table = name.to_string();
        } else if let Some((key, _)) = trimmed.split_once('=') {
            let full = if table.is_empty() {
                key.trim().to_string()
            } else {
                format!("{table}.{}", key.trim())
            };
            if let Some((_, note)) = NOTES.iter().find(|(k, _)| *k == full) {
                out.push_str("# ");
                out.push_str(note);
                out.push('\n');
            }
        }
        if trimmed.starts_with("[[") && table == "scenario.pulses" && !out.contains("# first pulse") {
            let (_, note) = NOTES.iter().find(|(k, _)| *k == "scenario.pulses").expect("pulse note");
            out.push_str("# ");
            out.push_str(note);
            out.push('\n');
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

pub fn to_toml(file: &ConfigFile) -> Result<String> {
    let text = toml::to_string_pretty(file).map_err(|e| Error::Config(e.to_string()))?;
    Ok(annotate(&text))
}

/// Writes the three default files into `dir` and returns their paths.
pub fn export_defaults(dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = Config::default();
    let scenario = cfg.scenario_or_default()?;
    fs::create_dir_all(dir)?;
    let files = [
        (
            SYSTEM_FILE,
            ConfigFile { schema_version: CONFIG_SCHEMA_VERSION, system: Some(cfg.system), nmpc: None, scenario: None },
        ),
        (
            NMPC_FILE,
            ConfigFile { schema_version: CONFIG_SCHEMA_VERSION, system: None, nmpc: Some(cfg.nmpc), scenario: None },
        ),
        (
            SCENARIO_FILE,
            ConfigFile { schema_version: CONFIG_SCHEMA_VERSION, system: None, nmpc: None, scenario: Some(scenario) },
        ),
    ];
    let mut written = Vec::new();
    for (name, file) in files {
        let p = dir.join(name);
        fs::write(&p, to_toml(&file)?)?;
        written.push(p);
    }
    Ok(written)
}
