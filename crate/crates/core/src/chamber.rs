//! Chamber water-vapor balance for condenser failure: vapor produced by the
//! vials accumulates when it exceeds what the condenser can take.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drying_primary::{run_primary, DryingParams, PrimaryError, PrimaryTrajectory, RunOptions};
use crate::solver::IntegratorConfig;
use crate::thermo::GAS_CONSTANT;

const SETPOINT_BAND: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChamberError {
    #[error("invalid chamber model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Primary(#[from] PrimaryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChamberModel {
    #[serde(rename = "volume_m3")]
    pub volume: f64,
    /// Condenser capacity as a mass flow.
    #[serde(rename = "condenser_capacity_kg_s")]
    pub condenser_capacity: f64,
    pub n_vial: u32,
    #[serde(rename = "mean_temperature_k")]
    pub mean_temperature: f64,
    #[serde(rename = "molar_mass_water_kg_mol")]
    pub molar_mass_water: f64,
    /// Controlled baseline vapor pressure the condenser holds when it keeps up.
    #[serde(rename = "setpoint_pa")]
    pub setpoint: f64,
}

impl Default for ChamberModel {
    fn default() -> Self {
        Self {
            volume: 0.118,
            condenser_capacity: 1.8e-5,
            n_vial: 200,
            mean_temperature: 260.0,
            molar_mass_water: 0.018,
            setpoint: 3.0,
        }
    }
}

impl ChamberModel {
    pub fn validate(&self) -> Result<(), ChamberError> {
        if !(self.volume > 0.0) {
            return Err(ChamberError::Invalid("chamber volume must be positive".into()));
        }
        if !(self.condenser_capacity >= 0.0 && self.mean_temperature > 0.0 && self.molar_mass_water > 0.0) {
            return Err(ChamberError::Invalid(
                "capacity must be non-negative, temperature and molar mass positive".into(),
            ));
        }
        if !(self.setpoint >= 0.0) {
            return Err(ChamberError::Invalid("setpoint must be non-negative".into()));
        }
        Ok(())
    }

    /// Total vapor production of all vials (kg/s).
    pub fn vapor_flow(&self, flux: f64, area: f64) -> f64 {
        f64::from(self.n_vial) * area * flux
    }

    /// Pressure rate (Pa/s) for a per-vial sublimation flux. The condenser
    /// cannot pull the chamber below its setpoint: spare capacity drains the
    /// accumulated vapor, fading out over the last `SETPOINT_BAND` pascal so
    /// the pressure settles on the setpoint instead of crossing it.
    pub fn pressure_rate(&self, pressure: f64, flux: f64, area: f64) -> f64 {
        let excess = self.vapor_flow(flux, area) - self.condenser_capacity;
        let gain = GAS_CONSTANT * self.mean_temperature / (self.volume * self.molar_mass_water);
        if excess >= 0.0 {
            return excess * gain;
        }
        let above = ((pressure - self.setpoint) / SETPOINT_BAND).clamp(0.0, 1.0);
        excess * gain * above
    }
}

/// Primary drying with the chamber pressure as an extra state driven by the
/// vials' own vapor production.
pub fn run_primary_with_condenser(
    initial: &[f64],
    t_start: f64,
    params: &DryingParams,
    chamber: &ChamberModel,
    options: &RunOptions,
    solver: &IntegratorConfig,
) -> Result<PrimaryTrajectory, ChamberError> {
    chamber.validate()?;
    Ok(run_primary(initial, t_start, params, Some(chamber), options, solver)?)
}
