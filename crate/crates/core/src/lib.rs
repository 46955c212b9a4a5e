//! Hybrid thermal management system with latent thermal energy storage:
//! graph-based plant model, linearized implicit Runge–Kutta integrator with
//! analytical sensitivities, multi-objective NMPC and a closed-loop
//! experiment harness.

pub mod config;
pub mod error;
pub mod integrator;
pub mod model;
pub mod nmpc;
pub mod params;
pub mod pcm;
pub mod reference;
pub mod sim;

pub use config::Config;
pub use error::{Error, Result};
pub use model::{ControlInput, DisturbanceInput, Layout, StateVector, ThermalGraph, ThermalModel};
pub use nmpc::{HorizonSolution, Nmpc, NmpcConfig};
pub use params::SystemParams;
pub use sim::{RunLog, Scenario};
