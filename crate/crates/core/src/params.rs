//! The complete parameter set of a cycle, with reference defaults for every
//! field, and the conversions into each stage's model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chamber::ChamberModel;
use crate::drying_primary::{DryingParams, RunOptions};
use crate::drying_secondary::{DesorptionKinetics, SecondaryParams};
use crate::freezing::{FreezingModel, FreezingProtocol};
use crate::schedule::Schedule;
use crate::solver::IntegratorConfig;
use crate::thermo::{mixture_properties, Formulation, MixtureProperties};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("invalid parameter `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VialSettings {
    #[serde(rename = "diameter_m")]
    pub diameter: f64,
    pub glass_emissivity: f64,
    /// Radiation transfer factor between the product top and the surface above.
    pub top_transfer_factor: f64,
    /// Radiation transfer factor between the vial side and the chamber wall.
    pub side_transfer_factor: f64,
}

impl Default for VialSettings {
    fn default() -> Self {
        Self {
            diameter: 0.024,
            glass_emissivity: 0.8,
            top_transfer_factor: 0.8,
            side_transfer_factor: 0.624,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentHeats {
    #[serde(rename = "fusion_j_kg")]
    pub fusion: f64,
    #[serde(rename = "sublimation_j_kg")]
    pub sublimation: f64,
    #[serde(rename = "desorption_j_kg")]
    pub desorption: f64,
}

impl Default for LatentHeats {
    fn default() -> Self {
        Self {
            fusion: 3.34e5,
            sublimation: 2.84e6,
            desorption: 2.68e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrimarySettings {
    /// Only used when primary drying runs on its own.
    #[serde(rename = "initial_temperature_k")]
    pub initial_temperature: f64,
    #[serde(rename = "shelf_k")]
    pub shelf: Schedule,
    #[serde(rename = "wall_k")]
    pub wall: Schedule,
    #[serde(rename = "upper_k")]
    pub upper: Schedule,
    #[serde(rename = "h_bottom_w_m2k")]
    pub h_bottom: f64,
    #[serde(rename = "resistance_base_m_s")]
    pub resistance_base: f64,
    #[serde(rename = "resistance_slope_1_s")]
    pub resistance_slope: f64,
    #[serde(rename = "resistance_saturation_m")]
    pub resistance_saturation: f64,
    #[serde(rename = "chamber_vapor_pressure_pa")]
    pub chamber_vapor_pressure: f64,
    #[serde(rename = "rho_dried_kg_m3")]
    pub rho_dried: f64,
    /// Frozen-layer property overrides; the mixture rule fills any left out.
    #[serde(rename = "rho_frozen_kg_m3")]
    pub rho_frozen: Option<f64>,
    #[serde(rename = "cp_frozen_j_kgk")]
    pub cp_frozen: Option<f64>,
    #[serde(rename = "k_frozen_w_mk")]
    pub k_frozen: Option<f64>,
    /// Product height; computed from the fill when absent.
    #[serde(rename = "height_m")]
    pub height: Option<f64>,
    pub front_guard: f64,
    #[serde(rename = "horizon_s")]
    pub horizon: f64,
    /// Conduction-only heating after the front reaches the bottom.
    #[serde(rename = "extra_heating_s")]
    pub extra_heating: f64,
}

impl Default for PrimarySettings {
    fn default() -> Self {
        Self {
            initial_temperature: 233.0,
            shelf: Schedule::Constant(270.0),
            wall: Schedule::Constant(265.0),
            upper: Schedule::Constant(265.0),
            h_bottom: 15.0,
            resistance_base: 1.5e4,
            resistance_slope: 3e7,
            resistance_saturation: 10.0,
            chamber_vapor_pressure: 3.0,
            rho_dried: 215.0,
            rho_frozen: None,
            cp_frozen: Some(2163.0),
            k_frozen: Some(2.07),
            height: None,
            front_guard: 1e-6,
            horizon: 5e5,
            extra_heating: 0.0,
        }
    }
}

/// Initial bound water: one value everywhere, or linear from top to bottom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConcentrationProfile {
    Uniform(f64),
    Linear { top: f64, bottom: f64 },
}

impl ConcentrationProfile {
    pub fn nodes(&self, n: usize) -> Vec<f64> {
        match *self {
            ConcentrationProfile::Uniform(c) => vec![c; n],
            ConcentrationProfile::Linear { top, bottom } => (0..n)
                .map(|j| top + (bottom - top) * j as f64 / (n - 1).max(1) as f64)
                .collect(),
        }
    }

    fn min(&self) -> f64 {
        match *self {
            ConcentrationProfile::Uniform(c) => c,
            ConcentrationProfile::Linear { top, bottom } => top.min(bottom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecondarySettings {
    /// Only used when secondary drying runs on its own.
    #[serde(rename = "initial_temperature_k")]
    pub initial_temperature: f64,
    #[serde(rename = "initial_concentration_kg_kg")]
    pub initial_concentration: ConcentrationProfile,
    #[serde(rename = "target_concentration_kg_kg")]
    pub target_concentration: f64,
    #[serde(rename = "equilibrium_concentration_kg_kg")]
    pub equilibrium_concentration: f64,
    #[serde(rename = "shelf_k")]
    pub shelf: Schedule,
    #[serde(rename = "wall_k")]
    pub wall: Schedule,
    #[serde(rename = "upper_k")]
    pub upper: Schedule,
    #[serde(rename = "h_bottom_w_m2k")]
    pub h_bottom: f64,
    #[serde(rename = "frequency_factor_1_s")]
    pub frequency_factor: f64,
    #[serde(rename = "activation_energy_j_mol")]
    pub activation_energy: f64,
    #[serde(rename = "rho_dried_kg_m3")]
    pub rho_dried: f64,
    #[serde(rename = "rho_eff_kg_m3")]
    pub rho_eff: f64,
    #[serde(rename = "cp_eff_j_kgk")]
    pub cp_eff: f64,
    #[serde(rename = "k_eff_w_mk")]
    pub k_eff: f64,
    #[serde(rename = "height_m")]
    pub height: Option<f64>,
    #[serde(rename = "horizon_s")]
    pub horizon: f64,
}

impl Default for SecondarySettings {
    fn default() -> Self {
        Self {
            initial_temperature: 270.0,
            initial_concentration: ConcentrationProfile::Uniform(0.088),
            target_concentration: 0.01,
            equilibrium_concentration: 0.0,
            shelf: Schedule::Constant(295.0),
            wall: Schedule::Constant(290.0),
            upper: Schedule::Constant(290.0),
            h_bottom: 15.0,
            frequency_factor: 1.5e-3,
            activation_energy: 6500.0,
            rho_dried: 212.21,
            rho_eff: 215.0,
            cp_eff: 2590.0,
            k_eff: 0.217,
            height: None,
            horizon: 1e6,
        }
    }
}

/// When primary drying takes over from freezing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Handoff {
    /// After final cooling.
    #[default]
    EndOfFreezing,
    /// At the end of solidification, skipping final cooling.
    EndOfSolidification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub handoff: Handoff,
    /// Grid nodes used by both drying stages.
    pub grid_points: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            handoff: Handoff::EndOfFreezing,
            grid_points: 51,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParameterSet {
    pub formulation: Formulation,
    pub vial: VialSettings,
    pub latent_heat: LatentHeats,
    pub freezing: FreezingProtocol,
    pub primary: PrimarySettings,
    pub secondary: SecondarySettings,
    pub chamber: ChamberModel,
    pub solver: IntegratorConfig,
    pub pipeline: PipelineSettings,
}

impl ParameterSet {
    pub fn validate(&self) -> Result<(), ParamsError> {
        let invalid = |field, reason: String| Err(ParamsError::Invalid { field, reason });
        if let Err(e) = self.formulation.validate() {
            return invalid("formulation", e.to_string());
        }
        let v = &self.vial;
        if !(v.diameter > 0.0) {
            return invalid("vial.diameter_m", "must be positive".into());
        }
        if !(0.0..=1.0).contains(&v.glass_emissivity) {
            return invalid("vial.glass_emissivity", "must lie in [0, 1]".into());
        }
        for (field, f) in [
            ("vial.top_transfer_factor", v.top_transfer_factor),
            ("vial.side_transfer_factor", v.side_transfer_factor),
        ] {
            if !(f >= 0.0 && f <= v.glass_emissivity) {
                return invalid(field, format!("{f} must lie between 0 and the glass emissivity"));
            }
        }
        let l = &self.latent_heat;
        if !(l.fusion > 0.0 && l.sublimation > 0.0 && l.desorption >= 0.0) {
            return invalid("latent_heat", "latent heats must be positive".into());
        }
        if let Err(e) = self.freezing.validate() {
            return invalid("freezing", e.to_string());
        }
        let p = &self.primary;
        for (field, o) in [
            ("primary.rho_frozen_kg_m3", p.rho_frozen),
            ("primary.cp_frozen_j_kgk", p.cp_frozen),
            ("primary.k_frozen_w_mk", p.k_frozen),
            ("primary.height_m", p.height),
        ] {
            if o.is_some_and(|x| !(x > 0.0)) {
                return invalid(field, "must be positive when given".into());
            }
        }
        if !(p.horizon > 0.0 && p.extra_heating >= 0.0) {
            return invalid(
                "primary.horizon_s",
                "horizon must be positive and extra heating non-negative".into(),
            );
        }
        if let Err(e) = self.primary_params().validate() {
            return invalid("primary", e.to_string());
        }
        let s = &self.secondary;
        if !(s.initial_concentration.min() >= 0.0) {
            return invalid("secondary.initial_concentration_kg_kg", "must be non-negative".into());
        }
        if !(s.horizon > 0.0) {
            return invalid("secondary.horizon_s", "must be positive".into());
        }
        if s.height.is_some_and(|x| !(x > 0.0)) {
            return invalid("secondary.height_m", "must be positive when given".into());
        }
        if let Err(e) = self.secondary_params().validate() {
            return invalid("secondary", e.to_string());
        }
        if let Err(e) = self.chamber.validate() {
            return invalid("chamber", e.to_string());
        }
        if let Err(e) = self.solver.validate() {
            return invalid("solver", e.to_string());
        }
        if self.pipeline.grid_points < 3 {
            return invalid("pipeline.grid_points", "at least three nodes are needed".into());
        }
        Ok(())
    }

    pub fn mixture(&self) -> MixtureProperties {
        mixture_properties(&self.formulation, self.vial.diameter)
    }

    pub fn freezing_model(&self) -> FreezingModel {
        FreezingModel {
            formulation: self.formulation.clone(),
            diameter: self.vial.diameter,
            heat_of_fusion: self.latent_heat.fusion,
            side_transfer_factor: self.vial.side_transfer_factor,
            protocol: self.freezing.clone(),
            solver: self.solver.clone(),
        }
    }

    pub fn primary_params(&self) -> DryingParams {
        let m = self.mixture();
        let p = &self.primary;
        DryingParams {
            rho_frozen: p.rho_frozen.unwrap_or(m.rho_frozen),
            cp_frozen: p.cp_frozen.unwrap_or(m.cp_frozen),
            k_frozen: p.k_frozen.unwrap_or(m.k_frozen),
            rho_dried: p.rho_dried,
            h_bottom: p.h_bottom,
            resistance_base: p.resistance_base,
            resistance_slope: p.resistance_slope,
            resistance_saturation: p.resistance_saturation,
            heat_of_sublimation: self.latent_heat.sublimation,
            shelf: p.shelf.clone(),
            wall: p.wall.clone(),
            upper: p.upper.clone(),
            chamber_vapor_pressure: p.chamber_vapor_pressure,
            top_transfer_factor: self.vial.top_transfer_factor,
            side_transfer_factor: self.vial.side_transfer_factor,
            diameter: self.vial.diameter,
            height: p.height.unwrap_or(m.height),
        }
    }

    pub fn primary_options(&self) -> RunOptions {
        RunOptions {
            grid_points: self.pipeline.grid_points,
            front_guard: self.primary.front_guard,
            horizon: self.primary.horizon,
        }
    }

    pub fn secondary_params(&self) -> SecondaryParams {
        let s = &self.secondary;
        SecondaryParams {
            kinetics: DesorptionKinetics {
                frequency_factor: s.frequency_factor,
                activation_energy: s.activation_energy,
                equilibrium_concentration: s.equilibrium_concentration,
                rho_dried: s.rho_dried,
                heat_of_desorption: self.latent_heat.desorption,
                k_eff: s.k_eff,
                rho_eff: s.rho_eff,
                cp_eff: s.cp_eff,
            },
            h_bottom: s.h_bottom,
            shelf: s.shelf.clone(),
            wall: s.wall.clone(),
            upper: s.upper.clone(),
            top_transfer_factor: self.vial.top_transfer_factor,
            side_transfer_factor: self.vial.side_transfer_factor,
            diameter: self.vial.diameter,
            height: s
                .height
                .or(self.primary.height)
                .unwrap_or_else(|| self.mixture().height),
            target_concentration: s.target_concentration,
        }
    }

    pub fn initial_concentration(&self) -> Vec<f64> {
        self.secondary.initial_concentration.nodes(self.pipeline.grid_points)
    }
}
