//! Property correlations, radiation exchange and the mixture/geometry
//! relations shared by every stage model.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STEFAN_BOLTZMANN: f64 = 5.67e-8;
pub const GAS_CONSTANT: f64 = 8.314;
/// Freezing point of pure water (K).
pub const WATER_FREEZING_POINT: f64 = 273.15;

const EVAP_POLE: f64 = 42.98;
const CRITICAL_TEMPERATURE: f64 = 647.1;
const BOILING_POINT: f64 = 373.15;
const LATENT_AT_BOILING: f64 = 2.257e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThermoError {
    #[error("temperature {0} K is outside the domain of {1}")]
    TemperatureDomain(f64, &'static str),
    #[error("unfrozen water mass must be positive, got {0} kg")]
    NoLiquidWater(f64),
    #[error("ice annulus radii invalid: inner {inner} m, outer {outer} m")]
    InvalidRadius { inner: f64, outer: f64 },
    #[error("ice layer thickness must be non-negative, got {0} m")]
    NegativeThickness(f64),
    #[error("{0}")]
    InvalidFormulation(String),
}

/// Solute/water system properties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Formulation {
    pub solute_mass_fraction: f64,
    #[serde(rename = "fill_volume_m3")]
    pub fill_volume: f64,
    #[serde(rename = "rho_solute_kg_m3")]
    pub rho_solute: f64,
    #[serde(rename = "rho_water_kg_m3")]
    pub rho_water: f64,
    #[serde(rename = "rho_ice_kg_m3")]
    pub rho_ice: f64,
    #[serde(rename = "cp_solute_j_kgk")]
    pub cp_solute: f64,
    #[serde(rename = "cp_water_j_kgk")]
    pub cp_water: f64,
    #[serde(rename = "cp_ice_j_kgk")]
    pub cp_ice: f64,
    #[serde(rename = "k_solute_w_mk")]
    pub k_solute: f64,
    #[serde(rename = "k_water_w_mk")]
    pub k_water: f64,
    #[serde(rename = "k_ice_w_mk")]
    pub k_ice: f64,
    #[serde(rename = "molar_mass_solute_kg_mol")]
    pub molar_mass_solute: f64,
    #[serde(rename = "molar_mass_water_kg_mol")]
    pub molar_mass_water: f64,
    #[serde(rename = "molar_mass_inert_kg_mol")]
    pub molar_mass_inert: f64,
    #[serde(rename = "cryoscopic_constant_kgk_mol")]
    pub cryoscopic_constant: f64,
}

impl Default for Formulation {
    fn default() -> Self {
        Self {
            solute_mass_fraction: 0.05,
            fill_volume: 3e-6,
            rho_solute: 1587.9,
            rho_water: 1000.0,
            rho_ice: 917.0,
            cp_solute: 1204.0,
            cp_water: 4187.0,
            cp_ice: 2108.0,
            k_solute: 0.126,
            k_water: 0.598,
            k_ice: 2.25,
            molar_mass_solute: 0.3423,
            molar_mass_water: 0.018,
            molar_mass_inert: 0.028,
            cryoscopic_constant: 1.86,
        }
    }
}

impl Formulation {
    pub fn validate(&self) -> Result<(), ThermoError> {
        if !(0.0..1.0).contains(&self.solute_mass_fraction) {
            return Err(ThermoError::InvalidFormulation(format!(
                "solute mass fraction {} not in [0, 1)",
                self.solute_mass_fraction
            )));
        }
        let positive = [
            ("fill volume", self.fill_volume),
            ("solute density", self.rho_solute),
            ("water density", self.rho_water),
            ("ice density", self.rho_ice),
            ("solute heat capacity", self.cp_solute),
            ("water heat capacity", self.cp_water),
            ("ice heat capacity", self.cp_ice),
            ("solute conductivity", self.k_solute),
            ("water conductivity", self.k_water),
            ("ice conductivity", self.k_ice),
            ("solute molar mass", self.molar_mass_solute),
            ("water molar mass", self.molar_mass_water),
            ("inert gas molar mass", self.molar_mass_inert),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ThermoError::InvalidFormulation(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.cryoscopic_constant >= 0.0) {
            return Err(ThermoError::InvalidFormulation(
                "cryoscopic constant must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Vial cross-section and product height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VialGeometry {
    pub diameter: f64,
    pub height: f64,
}

impl VialGeometry {
    pub fn area(&self) -> f64 {
        cross_section(self.diameter)
    }

    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }
}

pub fn cross_section(diameter: f64) -> f64 {
    PI * diameter * diameter / 4.0
}

/// Vapour pressure over liquid water (Pa).
pub fn psat_evaporation(t: f64) -> Result<f64, ThermoError> {
    if !(t > EVAP_POLE) {
        return Err(ThermoError::TemperatureDomain(t, "the evaporation correlation"));
    }
    Ok(psat_evaporation_raw(t))
}

#[inline]
pub(crate) fn psat_evaporation_raw(t: f64) -> f64 {
    1e3 * (16.3872 - 3885.7 / (t - EVAP_POLE)).exp()
}

/// Vapour pressure over ice (Pa).
pub fn psat_sublimation(t: f64) -> Result<f64, ThermoError> {
    if !(t > 0.0) {
        return Err(ThermoError::TemperatureDomain(t, "the sublimation correlation"));
    }
    Ok(psat_sublimation_raw(t))
}

#[inline]
pub(crate) fn psat_sublimation_raw(t: f64) -> f64 {
    (-6139.9 / t + 28.8912).exp()
}

/// Latent heat of vaporisation (J/kg), vanishing at the critical point.
pub fn heat_of_vaporization(t: f64) -> Result<f64, ThermoError> {
    if !(t > 0.0 && t <= CRITICAL_TEMPERATURE) {
        return Err(ThermoError::TemperatureDomain(t, "the latent heat correlation"));
    }
    Ok(heat_of_vaporization_raw(t))
}

#[inline]
pub(crate) fn heat_of_vaporization_raw(t: f64) -> f64 {
    let ratio = (1.0 - t / CRITICAL_TEMPERATURE) / (1.0 - BOILING_POINT / CRITICAL_TEMPERATURE);
    LATENT_AT_BOILING * ratio.max(0.0).powf(0.38)
}

/// Equilibrium freezing temperature of the solution left after some of the
/// water has turned to ice.
pub fn freezing_point(solute_mass: f64, liquid_water_mass: f64, f: &Formulation) -> Result<f64, ThermoError> {
    if !(liquid_water_mass > 0.0) {
        return Err(ThermoError::NoLiquidWater(liquid_water_mass));
    }
    Ok(WATER_FREEZING_POINT - f.cryoscopic_constant / f.molar_mass_solute * solute_mass / liquid_water_mass)
}

/// Net radiative heat received by a surface at `t_self` from one at `t_other`.
pub fn radiation_exchange(t_self: f64, t_other: f64, factor: f64, area: f64) -> f64 {
    STEFAN_BOLTZMANN * area * factor * (t_other.powi(4) - t_self.powi(4))
}

/// `4 sigma F T^3` about the mean of the two surface temperatures.
pub fn linearized_radiation_coefficient(factor: f64, t_a: f64, t_b: f64) -> f64 {
    let t_ref = 0.5 * (t_a + t_b);
    4.0 * STEFAN_BOLTZMANN * factor * t_ref.powi(3)
}

/// Conduction resistance of the ice between the liquid core and a wall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IceLayer {
    Slab { thickness: f64 },
    Annulus { outer_radius: f64, inner_radius: f64 },
}

/// Film coefficient in series with conduction through an ice layer,
/// referenced to the outer surface.
pub fn overall_htc(h: f64, layer: IceLayer, k_ice: f64) -> Result<f64, ThermoError> {
    let extra = match layer {
        IceLayer::Slab { thickness } => {
            if thickness < 0.0 {
                return Err(ThermoError::NegativeThickness(thickness));
            }
            thickness / k_ice
        }
        IceLayer::Annulus {
            outer_radius,
            inner_radius,
        } => {
            if !(inner_radius > 0.0 && inner_radius <= outer_radius) {
                return Err(ThermoError::InvalidRadius {
                    inner: inner_radius,
                    outer: outer_radius,
                });
            }
            outer_radius * (outer_radius / inner_radius).ln() / k_ice
        }
    };
    Ok(1.0 / (1.0 / h + extra))
}

/// Derived quantities of a filled vial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureProperties {
    pub rho_liquid: f64,
    pub solute_mass: f64,
    pub water_mass: f64,
    pub rho_frozen: f64,
    pub cp_frozen: f64,
    pub k_frozen: f64,
    pub height: f64,
    pub area: f64,
}

pub fn mixture_properties(f: &Formulation, diameter: f64) -> MixtureProperties {
    let xs = f.solute_mass_fraction;
    let rho_liquid = 1.0 / (xs / f.rho_solute + (1.0 - xs) / f.rho_water);
    let solute_mass = xs * rho_liquid * f.fill_volume;
    let water_mass = (1.0 - xs) * rho_liquid * f.fill_volume;
    let rho_frozen = 1.0 / (xs / f.rho_solute + (1.0 - xs) / f.rho_ice);
    let area = cross_section(diameter);
    MixtureProperties {
        rho_liquid,
        solute_mass,
        water_mass,
        rho_frozen,
        cp_frozen: xs * f.cp_solute + (1.0 - xs) * f.cp_ice,
        k_frozen: xs * f.k_solute + (1.0 - xs) * f.k_ice,
        height: (solute_mass + water_mass) / (rho_frozen * area),
        area,
    }
}

/// Lateral surface area of the product column for given water and ice
/// inventories.
pub fn radial_area(solute_mass: f64, water_mass: f64, ice_mass: f64, f: &Formulation, diameter: f64) -> f64 {
    4.0 * (solute_mass / f.rho_solute + water_mass / f.rho_water + ice_mass / f.rho_ice) / diameter
}
