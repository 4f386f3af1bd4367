//! Lumped freezing of a single suspended vial: preconditioning, vacuum
//! induced surface freezing, nucleation, solidification and final cooling.
//!
//! During solidification the liquid temperature is tied to the depressed
//! freezing point of the remaining solution, which reduces that stage to a
//! single ODE for the ice mass. Ice grows inward from the side and bottom
//! walls and acts as an extra conduction resistance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schedule::{merged_breakpoints, Schedule};
use crate::solver::{integrate_adaptive, Direction, EventSpec, IntegratorConfig, OdeSystem, Solution, SolverError};
use crate::thermo::{
    self, cross_section, heat_of_vaporization_raw, linearized_radiation_coefficient, overall_htc, psat_evaporation_raw,
    radial_area, Formulation, IceLayer, ThermoError, STEFAN_BOLTZMANN, WATER_FREEZING_POINT,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FreezingError {
    #[error("nucleation temperature {nucleation} K is above the freezing point {freezing_point} K")]
    NoSupercooling { nucleation: f64, freezing_point: f64 },
    #[error("{stage:?} did not finish within {horizon} s of simulated time")]
    Timeout { stage: Stage, horizon: f64 },
    #[error("invalid freezing protocol: {0}")]
    InvalidProtocol(String),
    #[error(transparent)]
    Thermo(#[from] ThermoError),
    #[error("integration failed during {stage:?}: {source}")]
    Solver { stage: Stage, source: SolverError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Preconditioning,
    Visf,
    Nucleation,
    Solidification,
    FinalCooling,
    Done,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Preconditioning => "preconditioning",
            Stage::Visf => "visf",
            Stage::Nucleation => "nucleation",
            Stage::Solidification => "solidification",
            Stage::FinalCooling => "final_cooling",
            Stage::Done => "done",
        }
    }
}

/// Lumped vial state during freezing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VialState {
    pub t: f64,
    pub temperature: f64,
    pub water: f64,
    pub ice: f64,
    pub stage: Stage,
}

/// Gas, wall and upper-surface temperatures around the vial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Environment {
    #[serde(rename = "gas_k")]
    pub gas: Schedule,
    #[serde(rename = "wall_k")]
    pub wall: Schedule,
    #[serde(rename = "upper_k")]
    pub upper: Schedule,
}

impl Environment {
    pub fn constant(gas: f64, wall: f64, upper: f64) -> Self {
        Self {
            gas: gas.into(),
            wall: wall.into(),
            upper: upper.into(),
        }
    }

    fn at(&self, t: f64) -> (f64, f64, f64) {
        (self.gas.value(t), self.wall.value(t), self.upper.value(t))
    }

    fn breakpoints(&self) -> Vec<f64> {
        merged_breakpoints([&self.gas, &self.wall, &self.upper])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisfSettings {
    /// Freezing-clock time at which the pressure drop starts.
    #[serde(rename = "start_s")]
    pub start: f64,
    #[serde(rename = "total_pressure_pa")]
    pub total_pressure: f64,
}

mod optional_visf {
    use super::VisfSettings;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Toggle {
        Flag(bool),
        Settings(VisfSettings),
    }

    pub fn serialize<S: Serializer>(v: &Option<VisfSettings>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => Toggle::Settings(v.clone()).serialize(s),
            None => Toggle::Flag(false).serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<VisfSettings>, D::Error> {
        match Toggle::deserialize(d)? {
            Toggle::Flag(false) => Ok(None),
            Toggle::Flag(true) => Ok(Some(VisfSettings::default())),
            Toggle::Settings(v) => Ok(Some(v)),
        }
    }
}

impl Default for VisfSettings {
    fn default() -> Self {
        Self {
            start: 3600.0,
            total_pressure: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum NucleationMode {
    Controlled {
        #[serde(rename = "temperature_k")]
        temperature: f64,
    },
    Stochastic {
        /// Rate prefactor in 1/(m^3 s K^exponent).
        rate_constant: f64,
        exponent: f64,
        seed: u64,
        #[serde(rename = "sampling_interval_s", default = "default_sampling_interval")]
        sampling_interval: f64,
    },
}

fn default_sampling_interval() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezingProtocol {
    #[serde(rename = "initial_temperature_k")]
    pub initial_temperature: f64,
    #[serde(rename = "h_top_w_m2k")]
    pub h_top: f64,
    #[serde(rename = "h_bottom_w_m2k")]
    pub h_bottom: f64,
    #[serde(rename = "h_side_w_m2k")]
    pub h_side: f64,
    #[serde(rename = "mass_transfer_kg_m2s")]
    pub mass_transfer: f64,
    /// Surroundings until nucleation, on the freezing clock.
    pub before_nucleation: Environment,
    /// Surroundings from nucleation on, on a clock starting at nucleation.
    pub after_nucleation: Environment,
    #[serde(rename = "total_pressure_pa")]
    pub total_pressure: f64,
    /// Water partial pressure in the chamber gas during the pressure drop.
    #[serde(rename = "chamber_vapor_pressure_pa")]
    pub chamber_vapor_pressure: f64,
    /// `false` in a configuration file switches the pressure drop off.
    #[serde(with = "optional_visf")]
    pub visf: Option<VisfSettings>,
    pub nucleation: NucleationMode,
    pub solidification_fraction: f64,
    /// Final-cooling target; when absent the equilibrium temperature of
    /// the surroundings at the start of final cooling is used.
    #[serde(rename = "final_temperature_k")]
    pub final_temperature: Option<f64>,
    #[serde(rename = "final_tolerance_k")]
    pub final_tolerance: f64,
    /// Longest simulated time any single stage may take.
    #[serde(rename = "stage_horizon_s")]
    pub stage_horizon: f64,
}

impl Default for FreezingProtocol {
    fn default() -> Self {
        Self {
            initial_temperature: 298.15,
            h_top: 5.0,
            h_bottom: 10.0,
            h_side: 8.0,
            mass_transfer: 6.34e-3,
            before_nucleation: Environment::constant(268.0, 273.0, 273.0),
            after_nucleation: Environment::constant(230.0, 240.0, 240.0),
            total_pressure: 1e5,
            chamber_vapor_pressure: 0.0,
            visf: Some(VisfSettings::default()),
            nucleation: NucleationMode::Controlled { temperature: 268.0 },
            solidification_fraction: 0.95,
            final_temperature: None,
            final_tolerance: 0.5,
            stage_horizon: 2.0e5,
        }
    }
}

impl FreezingProtocol {
    pub fn validate(&self) -> Result<(), FreezingError> {
        let bad = |m: &str| Err(FreezingError::InvalidProtocol(m.to_string()));
        if !(self.h_top > 0.0 && self.h_bottom > 0.0 && self.h_side > 0.0) {
            return bad("heat transfer coefficients must be positive");
        }
        if !(self.mass_transfer >= 0.0) {
            return bad("mass transfer coefficient must be non-negative");
        }
        if !(0.85..=0.95).contains(&self.solidification_fraction) {
            return bad("solidification fraction must lie in [0.85, 0.95]");
        }
        if !(self.final_tolerance > 0.0) {
            return bad("final tolerance must be positive");
        }
        if !(self.stage_horizon > 0.0) {
            return bad("stage horizon must be positive");
        }
        if !(self.initial_temperature > 0.0) {
            return bad("initial temperature must be positive");
        }
        for env in [&self.before_nucleation, &self.after_nucleation] {
            for s in [&env.gas, &env.wall, &env.upper] {
                s.validate()
                    .map_err(|e| FreezingError::InvalidProtocol(e.to_string()))?;
            }
        }
        if let Some(v) = &self.visf {
            if !(v.total_pressure > 0.0 && v.start >= 0.0) {
                return bad("pressure drop needs a positive pressure and non-negative start");
            }
        }
        match &self.nucleation {
            NucleationMode::Controlled { temperature } => {
                if !(*temperature > 0.0) {
                    return bad("nucleation temperature must be positive");
                }
            }
            NucleationMode::Stochastic {
                rate_constant,
                sampling_interval,
                ..
            } => {
                if !(*rate_constant >= 0.0 && *sampling_interval > 0.0) {
                    return bad("nucleation kinetics need k >= 0 and a positive sampling interval");
                }
            }
        }
        Ok(())
    }
}

/// Everything the freezing stages need: formulation, vial and protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezingModel {
    pub formulation: Formulation,
    pub diameter: f64,
    pub heat_of_fusion: f64,
    pub side_transfer_factor: f64,
    pub protocol: FreezingProtocol,
    pub solver: IntegratorConfig,
}

/// Stage-end times on the freezing clock.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FreezingTimes {
    pub t_f1: f64,
    pub t_f2: f64,
    pub t_f3: f64,
    pub t_f4: f64,
    pub t_f5: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucleationOutcome {
    pub temperature_before: f64,
    pub temperature_after: f64,
    pub ice_formed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreezingTrajectory {
    pub t: Vec<f64>,
    pub temperature: Vec<f64>,
    pub water: Vec<f64>,
    pub ice: Vec<f64>,
    pub stage: Vec<Stage>,
    pub times: FreezingTimes,
    pub nucleation: NucleationOutcome,
    /// Total water (liquid plus ice) carried through solidification.
    pub total_water: f64,
    /// Target temperature that ended final cooling.
    pub final_target: f64,
}

impl FreezingTrajectory {
    pub fn final_state(&self) -> VialState {
        let n = self.t.len() - 1;
        VialState {
            t: self.t[n],
            temperature: self.temperature[n],
            water: self.water[n],
            ice: self.ice[n],
            stage: Stage::Done,
        }
    }

    /// Linear interpolation of the sampled temperature, for reporting.
    pub fn temperature_at(&self, t: f64) -> f64 {
        crate::interp_linear(&self.t, &self.temperature, t)
    }

    fn push(&mut self, t: f64, temperature: f64, water: f64, ice: f64, stage: Stage) {
        self.t.push(t);
        self.temperature.push(temperature);
        self.water.push(water);
        self.ice.push(ice);
        self.stage.push(stage);
    }
}

/// Ice fraction formed on nucleation and the solution temperature after it,
/// from the adiabatic balance and the freezing point of the concentrated
/// remaining liquid.
pub fn nucleate_controlled(
    nucleation_temperature: f64,
    solute_mass: f64,
    water_mass: f64,
    f: &Formulation,
    heat_of_fusion: f64,
) -> Result<NucleationOutcome, FreezingError> {
    let depression = f.cryoscopic_constant * solute_mass / f.molar_mass_solute;
    let capacity = solute_mass * f.cp_solute + water_mass * f.cp_water;
    let freezing_point = thermo::freezing_point(solute_mass, water_mass, f)?;
    let dt = WATER_FREEZING_POINT - nucleation_temperature;
    let c = (dt * water_mass - depression) * capacity;
    if c < 0.0 {
        return Err(FreezingError::NoSupercooling {
            nucleation: nucleation_temperature,
            freezing_point,
        });
    }
    if c == 0.0 {
        return Ok(NucleationOutcome {
            temperature_before: nucleation_temperature,
            temperature_after: nucleation_temperature,
            ice_formed: 0.0,
        });
    }
    let l = heat_of_fusion;
    let b = l * water_mass + dt * capacity;
    let disc = (b * b - 4.0 * l * c).max(0.0);
    // Smaller root, written to avoid cancellation.
    let ice = 2.0 * c / (b + disc.sqrt());
    let after = WATER_FREEZING_POINT - depression / (water_mass - ice);
    Ok(NucleationOutcome {
        temperature_before: nucleation_temperature,
        temperature_after: after,
        ice_formed: ice,
    })
}

/// Poisson nucleation rate (1/s) for a supercooled solution.
pub fn nucleation_rate(
    temperature: f64,
    solute_mass: f64,
    water_mass: f64,
    f: &Formulation,
    rate_constant: f64,
    exponent: f64,
) -> f64 {
    let t_eq = WATER_FREEZING_POINT - f.cryoscopic_constant * solute_mass / (f.molar_mass_solute * water_mass);
    if temperature >= t_eq {
        return 0.0;
    }
    rate_constant * (t_eq - temperature).powf(exponent) * f.fill_volume
}

/// One Bernoulli trial for the first nucleus within `dt` at rate `rate`.
pub fn sample_stochastic_nucleation<R: Rng + ?Sized>(rate: f64, dt: f64, rng: &mut R) -> bool {
    if rate <= 0.0 {
        return false;
    }
    let p = -(-rate * dt).exp_m1();
    rng.random::<f64>() < p
}

/// First nucleation time at a constant rate, sampled interval by interval.
/// Returns the end of the first successful interval.
pub fn first_nucleation_time<R: Rng + ?Sized>(rate: f64, dt: f64, max_time: f64, rng: &mut R) -> Option<f64> {
    let mut k = 0u64;
    loop {
        k += 1;
        let t = k as f64 * dt;
        if t > max_time {
            return None;
        }
        if sample_stochastic_nucleation(rate, dt, rng) {
            return Some(t);
        }
    }
}

/// Geometry of the liquid core during solidification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IceGeometry {
    pub core_radius: f64,
    pub core_height: f64,
    pub bottom_ice: f64,
    pub side_area: f64,
}

impl FreezingModel {
    pub fn solute_mass(&self) -> f64 {
        thermo::mixture_properties(&self.formulation, self.diameter).solute_mass
    }

    pub fn initial_water(&self) -> f64 {
        thermo::mixture_properties(&self.formulation, self.diameter).water_mass
    }

    fn area(&self) -> f64 {
        cross_section(self.diameter)
    }

    fn capacity_liquid(&self, ms: f64, mw: f64) -> f64 {
        ms * self.formulation.cp_solute + mw * self.formulation.cp_water
    }

    /// Heat received by a liquid or fully frozen vial with no ice resistance.
    pub fn heat_rate_lumped(&self, temperature: f64, water: f64, ice: f64, env: (f64, f64, f64)) -> f64 {
        let p = &self.protocol;
        let (gas, wall, upper) = env;
        let az = self.area();
        let ar = radial_area(self.solute_mass(), water, ice, &self.formulation, self.diameter);
        p.h_top * az * (upper - temperature)
            + p.h_bottom * az * (gas - temperature)
            + p.h_side * ar * (gas - temperature)
            + STEFAN_BOLTZMANN * ar * self.side_transfer_factor * (wall.powi(4) - temperature.powi(4))
    }

    /// Evaporation rate (kg/s, negative for loss) at the liquid surface.
    pub fn evaporation_rate(&self, temperature: f64, total_pressure: f64) -> f64 {
        let f = &self.formulation;
        let frac =
            |p: f64| p * f.molar_mass_water / (p * f.molar_mass_water + (total_pressure - p) * f.molar_mass_inert);
        let p_sat = psat_evaporation_raw(temperature);
        let p_c = self.protocol.chamber_vapor_pressure;
        -self.protocol.mass_transfer * self.area() * (frac(p_sat) - frac(p_c))
    }

    /// Liquid core and bottom ice layer for the given liquid water mass,
    /// with the core keeping the aspect ratio of the unfrozen fill.
    pub fn ice_geometry(&self, water: f64, ice: f64, total_water: f64) -> Result<IceGeometry, FreezingError> {
        let f = &self.formulation;
        let ms = self.solute_mass();
        let az = self.area();
        let v0 = ms / f.rho_solute + total_water / f.rho_water;
        let v_liq = ms / f.rho_solute + water / f.rho_water;
        let v_tot = v_liq + ice / f.rho_ice;
        let s = (v_liq / v0).cbrt();
        let r_o = 0.5 * self.diameter;
        let core_radius = r_o * s;
        let core_height = v0 / az * s;
        let bottom_ice = v_tot / az - core_height;
        if core_radius > r_o * (1.0 + 1e-12) || bottom_ice < -1e-12 * v_tot / az {
            return Err(FreezingError::Thermo(ThermoError::InvalidRadius {
                inner: core_radius,
                outer: r_o,
            }));
        }
        Ok(IceGeometry {
            core_radius: core_radius.min(r_o),
            core_height,
            bottom_ice: bottom_ice.max(0.0),
            side_area: radial_area(ms, water, ice, f, self.diameter),
        })
    }

    /// Run the full freezing sequence.
    pub fn run(&self) -> Result<FreezingTrajectory, FreezingError> {
        self.protocol.validate()?;
        self.formulation.validate()?;
        let p = &self.protocol;
        let ms = self.solute_mass();
        let mw0 = self.initial_water();
        let mut traj = FreezingTrajectory {
            t: Vec::new(),
            temperature: Vec::new(),
            water: Vec::new(),
            ice: Vec::new(),
            stage: Vec::new(),
            times: FreezingTimes::default(),
            nucleation: NucleationOutcome {
                temperature_before: 0.0,
                temperature_after: 0.0,
                ice_formed: 0.0,
            },
            total_water: mw0,
            final_target: 0.0,
        };

        // Preconditioning, ending at the pressure drop, at the controlled
        // nucleation temperature, or at a sampled stochastic nucleation.
        let (t_f1, t_at_f1, nucleated_early) = self.preconditioning(mw0, &mut traj)?;
        traj.times.t_f1 = t_f1;

        let (t_f2, t_n, water_f2) = if nucleated_early {
            (t_f1, t_at_f1, mw0)
        } else {
            self.visf(t_f1, t_at_f1, mw0, &mut traj)?
        };
        traj.times.t_f2 = t_f2;

        let nuc = match &p.nucleation {
            NucleationMode::Controlled { .. } | NucleationMode::Stochastic { .. } => {
                nucleate_controlled(t_n, ms, water_f2, &self.formulation, self.heat_of_fusion)?
            }
        };
        traj.nucleation = nuc;
        traj.total_water = water_f2;
        let t_f3 = t_f2;
        traj.times.t_f3 = t_f3;
        traj.push(
            t_f3,
            nuc.temperature_after,
            water_f2 - nuc.ice_formed,
            nuc.ice_formed,
            Stage::Nucleation,
        );

        let (t_f4, ice_f4) = self.solidification(t_f3, water_f2, nuc.ice_formed, &mut traj)?;
        traj.times.t_f4 = t_f4;

        let t_start_cool = *traj.temperature.last().expect("samples recorded");
        let t_f5 = self.final_cooling(t_f3, t_f4, t_start_cool, water_f2 - ice_f4, ice_f4, &mut traj)?;
        traj.times.t_f5 = t_f5;
        Ok(traj)
    }

    fn solve(
        &self,
        stage: Stage,
        system: &dyn OdeSystem,
        y0: &[f64],
        span: (f64, f64),
        events: &[EventSpec<'_>],
    ) -> Result<Solution, FreezingError> {
        integrate_adaptive(system, y0, span, &self.solver, events)
            .map_err(|source| FreezingError::Solver { stage, source })
    }

    fn preconditioning(&self, mw0: f64, traj: &mut FreezingTrajectory) -> Result<(f64, f64, bool), FreezingError> {
        let p = &self.protocol;
        let sys = LumpedCooling {
            model: self,
            env: &p.before_nucleation,
            clock_offset: 0.0,
            water: mw0,
            ice: 0.0,
        };
        let t0 = p.initial_temperature;
        match &p.nucleation {
            NucleationMode::Controlled { temperature } => {
                let tn = *temperature;
                if t0 <= tn {
                    traj.push(0.0, t0, mw0, 0.0, Stage::Preconditioning);
                    return Ok((0.0, t0, true));
                }
                let end = p.visf.as_ref().map(|v| v.start).unwrap_or(p.stage_horizon);
                let events = [EventSpec::new(
                    "nucleation",
                    Direction::Falling,
                    true,
                    move |_, y: &[f64]| y[0] - tn,
                )];
                let sol = self.solve(Stage::Preconditioning, &sys, &[t0], (0.0, end), &events)?;
                record(traj, &sol, Stage::Preconditioning, |y| (y[0], mw0, 0.0));
                let hit = sol.terminal_event.is_some();
                if !hit && p.visf.is_none() {
                    return Err(FreezingError::Timeout {
                        stage: Stage::Preconditioning,
                        horizon: p.stage_horizon,
                    });
                }
                let t_end = sol.t_final();
                // The jump is algebraic: start it from the nucleation
                // temperature itself, not the interpolated state.
                let temp = if hit { tn } else { sol.y_final()[0] };
                Ok((t_end, temp, hit))
            }
            NucleationMode::Stochastic {
                rate_constant,
                exponent,
                seed,
                sampling_interval,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let ms = self.solute_mass();
                let chunk = 600.0;
                let mut t = 0.0;
                let mut temp = t0;
                let mut k = 0u64;
                traj.push(0.0, t0, mw0, 0.0, Stage::Preconditioning);
                while t < p.stage_horizon {
                    let t_end = (t + chunk).min(p.stage_horizon);
                    let sol = self.solve(Stage::Preconditioning, &sys, &[temp], (t, t_end), &[])?;
                    loop {
                        let tk = (k + 1) as f64 * sampling_interval;
                        if tk > t_end {
                            break;
                        }
                        k += 1;
                        let tk_temp = sol.interpolate(tk)[0];
                        let rate = nucleation_rate(tk_temp, ms, mw0, &self.formulation, *rate_constant, *exponent);
                        if sample_stochastic_nucleation(rate, *sampling_interval, &mut rng) {
                            for i in 1..sol.len() {
                                if sol.t[i] >= tk {
                                    break;
                                }
                                traj.push(sol.t[i], sol.y[i][0], mw0, 0.0, Stage::Preconditioning);
                            }
                            traj.push(tk, tk_temp, mw0, 0.0, Stage::Preconditioning);
                            return Ok((tk, tk_temp, true));
                        }
                    }
                    for i in 1..sol.len() {
                        traj.push(sol.t[i], sol.y[i][0], mw0, 0.0, Stage::Preconditioning);
                    }
                    t = t_end;
                    temp = sol.y_final()[0];
                }
                Err(FreezingError::Timeout {
                    stage: Stage::Preconditioning,
                    horizon: p.stage_horizon,
                })
            }
        }
    }

    fn visf(
        &self,
        t_f1: f64,
        temp: f64,
        water: f64,
        traj: &mut FreezingTrajectory,
    ) -> Result<(f64, f64, f64), FreezingError> {
        let p = &self.protocol;
        let tn = match p.nucleation {
            NucleationMode::Controlled { temperature } => temperature,
            NucleationMode::Stochastic { .. } => unreachable!("stochastic runs nucleate in preconditioning"),
        };
        let visf = p.visf.as_ref().expect("caller checked the pressure drop is configured");
        let sys = Evaporation {
            model: self,
            total_pressure: visf.total_pressure,
        };
        let events = [EventSpec::new(
            "nucleation",
            Direction::Falling,
            true,
            move |_, y: &[f64]| y[0] - tn,
        )];
        let sol = self.solve(
            Stage::Visf,
            &sys,
            &[temp, water],
            (t_f1, t_f1 + p.stage_horizon),
            &events,
        )?;
        record(traj, &sol, Stage::Visf, |y| (y[0], y[1], 0.0));
        if sol.terminal_event.is_none() {
            return Err(FreezingError::Timeout {
                stage: Stage::Visf,
                horizon: p.stage_horizon,
            });
        }
        Ok((sol.t_final(), tn, sol.y_final()[1]))
    }

    fn solidification(
        &self,
        t_f3: f64,
        total_water: f64,
        ice0: f64,
        traj: &mut FreezingTrajectory,
    ) -> Result<(f64, f64), FreezingError> {
        let p = &self.protocol;
        let target = p.solidification_fraction * total_water;
        if ice0 >= target {
            return Ok((t_f3, ice0));
        }
        let sys = self.solidification_system(t_f3, total_water, ice0)?;
        let events = [EventSpec::new(
            "solidified",
            Direction::Rising,
            true,
            move |_, y: &[f64]| y[0] - target,
        )];
        let sol = self.solve(
            Stage::Solidification,
            &sys,
            &[ice0],
            (t_f3, t_f3 + p.stage_horizon),
            &events,
        )?;
        record(traj, &sol, Stage::Solidification, |y| {
            let w = total_water - y[0];
            (sys.temperature(w), w, y[0])
        });
        if sol.terminal_event.is_none() {
            return Err(FreezingError::Timeout {
                stage: Stage::Solidification,
                horizon: p.stage_horizon,
            });
        }
        // Land exactly on the criterion; the event is accurate to the
        // time tolerance, the ice mass need not be.
        let n = traj.ice.len() - 1;
        traj.ice[n] = target;
        traj.water[n] = total_water - target;
        traj.temperature[n] = sys.temperature(total_water - target);
        Ok((sol.t_final(), target))
    }

    /// The single-ODE solidification system starting at nucleation.
    pub fn solidification_system(
        &self,
        t_f3: f64,
        total_water: f64,
        ice0: f64,
    ) -> Result<Solidification<'_>, FreezingError> {
        let p = &self.protocol;
        let ms = self.solute_mass();
        let depression = self.formulation.cryoscopic_constant * ms / self.formulation.molar_mass_solute;
        let t_start = WATER_FREEZING_POINT - depression / (total_water - ice0);
        let wall0 = p.after_nucleation.wall.value(0.0);
        let h_rad = linearized_radiation_coefficient(self.side_transfer_factor, t_start, wall0);
        Ok(Solidification {
            model: self,
            t_f3,
            total_water,
            depression,
            h_rad,
        })
    }

    fn final_cooling(
        &self,
        t_f3: f64,
        t_f4: f64,
        temp: f64,
        water: f64,
        ice: f64,
        traj: &mut FreezingTrajectory,
    ) -> Result<f64, FreezingError> {
        let p = &self.protocol;
        let sys = LumpedCooling {
            model: self,
            env: &p.after_nucleation,
            clock_offset: t_f3,
            water,
            ice,
        };
        let target = match p.final_temperature {
            Some(t) => t,
            None => sys.equilibrium(t_f4),
        };
        traj.final_target = target;
        let tol = p.final_tolerance;
        if (temp - target).abs() <= tol {
            traj.push(t_f4, temp, water, ice, Stage::Done);
            return Ok(t_f4);
        }
        let events = [EventSpec::new(
            "cooled",
            Direction::Falling,
            true,
            move |_, y: &[f64]| (y[0] - target).abs() - tol,
        )];
        let sol = self.solve(
            Stage::FinalCooling,
            &sys,
            &[temp],
            (t_f4, t_f4 + p.stage_horizon),
            &events,
        )?;
        record(traj, &sol, Stage::FinalCooling, |y| (y[0], water, ice));
        if sol.terminal_event.is_none() {
            return Err(FreezingError::Timeout {
                stage: Stage::FinalCooling,
                horizon: p.stage_horizon,
            });
        }
        if let Some(s) = traj.stage.last_mut() {
            *s = Stage::Done;
        }
        Ok(sol.t_final())
    }
}

fn record(traj: &mut FreezingTrajectory, sol: &Solution, stage: Stage, map: impl Fn(&[f64]) -> (f64, f64, f64)) {
    let skip = usize::from(!traj.t.is_empty() && traj.t.last() == sol.t.first());
    for (t, y) in sol.t.iter().zip(&sol.y).skip(skip) {
        let (temp, w, i) = map(y);
        traj.push(*t, temp, w, i, stage);
    }
}

/// Sensible-heat-only balance: preconditioning and final cooling.
struct LumpedCooling<'a> {
    model: &'a FreezingModel,
    env: &'a Environment,
    clock_offset: f64,
    water: f64,
    ice: f64,
}

impl LumpedCooling<'_> {
    fn capacity(&self) -> f64 {
        let f = &self.model.formulation;
        self.model.capacity_liquid(self.model.solute_mass(), self.water) + self.ice * f.cp_ice
    }

    /// Temperature where the net heat flow vanishes for the surroundings at `t`.
    fn equilibrium(&self, t: f64) -> f64 {
        let env = self.env.at(t - self.clock_offset);
        let q = |temp: f64| self.model.heat_rate_lumped(temp, self.water, self.ice, env);
        let (mut lo, mut hi) = (1.0, 1000.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if q(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

impl OdeSystem for LumpedCooling<'_> {
    fn dim(&self) -> usize {
        1
    }

    fn rhs(&self, t: f64, y: &[f64], dydt: &mut [f64]) {
        let env = self.env.at(t - self.clock_offset);
        dydt[0] = self.model.heat_rate_lumped(y[0], self.water, self.ice, env) / self.capacity();
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.env
            .breakpoints()
            .into_iter()
            .map(|b| b + self.clock_offset)
            .collect()
    }
}

/// Temperature and liquid water mass under reduced total pressure.
struct Evaporation<'a> {
    model: &'a FreezingModel,
    total_pressure: f64,
}

impl OdeSystem for Evaporation<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, t: f64, y: &[f64], dydt: &mut [f64]) {
        let m = self.model;
        let env = m.protocol.before_nucleation.at(t);
        let (temp, water) = (y[0], y[1]);
        let dw = m.evaporation_rate(temp, self.total_pressure);
        let q = m.heat_rate_lumped(temp, water, 0.0, env);
        let cap = m.capacity_liquid(m.solute_mass(), water);
        dydt[0] = (q + heat_of_vaporization_raw(temp) * dw) / cap;
        dydt[1] = dw;
    }

    fn atol_scale(&self, i: usize) -> f64 {
        if i == 1 {
            1e-3
        } else {
            1.0
        }
    }

    fn admissible(&self, y: &[f64]) -> bool {
        y[1] > 0.0
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.model.protocol.before_nucleation.breakpoints()
    }
}

/// Ice growth with the liquid held at its freezing point.
pub struct Solidification<'a> {
    model: &'a FreezingModel,
    t_f3: f64,
    total_water: f64,
    depression: f64,
    h_rad: f64,
}

impl Solidification<'_> {
    pub fn temperature(&self, water: f64) -> f64 {
        WATER_FREEZING_POINT - self.depression / water
    }

    /// Heat received through the top surface, the bottom ice slab and the
    /// side ice annulus for the given ice mass.
    pub fn heat_rate(&self, t: f64, ice: f64) -> f64 {
        let m = self.model;
        let p = &m.protocol;
        let water = self.total_water - ice;
        let temp = self.temperature(water);
        let (gas, wall, upper) = p.after_nucleation.at(t - self.t_f3);
        let k_ice = m.formulation.k_ice;
        let az = m.area();
        let Ok(geo) = m.ice_geometry(water, ice, self.total_water) else {
            return f64::NAN;
        };
        let u_bottom = overall_htc(
            p.h_bottom,
            IceLayer::Slab {
                thickness: geo.bottom_ice,
            },
            k_ice,
        )
        .unwrap_or(f64::NAN);
        let h_side = p.h_side + self.h_rad;
        let t_side = (p.h_side * gas + self.h_rad * wall) / h_side;
        let u_side = overall_htc(
            h_side,
            IceLayer::Annulus {
                outer_radius: 0.5 * m.diameter,
                inner_radius: geo.core_radius,
            },
            k_ice,
        )
        .unwrap_or(f64::NAN);
        p.h_top * az * (upper - temp) + u_bottom * az * (gas - temp) + u_side * geo.side_area * (t_side - temp)
    }

    /// Liquid-phase heat capacity at the given ice mass.
    pub fn capacity(&self, ice: f64) -> f64 {
        self.model
            .capacity_liquid(self.model.solute_mass(), self.total_water - ice)
    }
}

impl OdeSystem for Solidification<'_> {
    fn dim(&self) -> usize {
        1
    }

    fn rhs(&self, t: f64, y: &[f64], dydt: &mut [f64]) {
        let ice = y[0];
        let water = self.total_water - ice;
        let q = self.heat_rate(t, ice);
        let cap = self.capacity(ice);
        dydt[0] = -q / (self.model.heat_of_fusion + cap * self.depression / (water * water));
    }

    fn atol_scale(&self, _i: usize) -> f64 {
        1e-3
    }

    fn admissible(&self, y: &[f64]) -> bool {
        y[0] >= 0.0 && y[0] < self.total_water
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.model
            .protocol
            .after_nucleation
            .breakpoints()
            .into_iter()
            .map(|b| b + self.t_f3)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterSet;
    use proptest::prelude::*;

    fn model() -> FreezingModel {
        ParameterSet::default().freezing_model()
    }

    /// Independent fixed-point iteration on the two nucleation equations.
    fn nucleation_oracle(tn: f64, ms: f64, mw: f64, f: &Formulation, l: f64) -> (f64, f64) {
        let cap = ms * f.cp_solute + mw * f.cp_water;
        let mut ice = 0.0;
        let mut t_fl = tn;
        for _ in 0..500 {
            t_fl = 273.15 - f.cryoscopic_constant / f.molar_mass_solute * ms / (mw - ice);
            ice = (t_fl - tn) * cap / l;
        }
        (ice, t_fl)
    }

    #[test]
    fn nucleation_defaults() {
        let f = Formulation::default();
        let out = nucleate_controlled(268.0, 1.53e-4, 2.9e-3, &f, 3.34e5).unwrap();
        assert!((out.ice_formed - 1.79e-4).abs() < 0.01e-4, "{}", out.ice_formed);
        assert!((out.temperature_after - 272.84).abs() < 0.01);
        let (ice, t) = nucleation_oracle(268.0, 1.53e-4, 2.9e-3, &f, 3.34e5);
        assert!((ice - out.ice_formed).abs() / ice < 1e-10);
        assert!((t - out.temperature_after).abs() < 1e-9);
    }

    #[test]
    fn nucleation_residuals() {
        let f = Formulation::default();
        let (ms, mw, l, tn) = (1.53e-4, 2.9e-3, 3.34e5, 265.0);
        let out = nucleate_controlled(tn, ms, mw, &f, l).unwrap();
        let cap = ms * f.cp_solute + mw * f.cp_water;
        let r1 = ((out.temperature_after - tn) * cap - out.ice_formed * l) / (out.ice_formed * l);
        let fp = 273.15 - f.cryoscopic_constant / f.molar_mass_solute * ms / (mw - out.ice_formed);
        assert!(r1.abs() < 1e-9);
        assert!((fp - out.temperature_after).abs() / fp < 1e-9);
    }

    #[test]
    fn nucleation_at_freezing_point_forms_no_ice() {
        // Choose a solute mass making the depression exactly representable.
        let f = Formulation {
            cryoscopic_constant: 1.0,
            molar_mass_solute: 1.0,
            ..Formulation::default()
        };
        let out = nucleate_controlled(272.15, 1.0e-3, 1.0e-3, &f, 3.34e5).unwrap();
        assert_eq!(out.ice_formed, 0.0);
        assert_eq!(out.temperature_after, 272.15);
        assert!(matches!(
            nucleate_controlled(273.0, 1.53e-4, 2.9e-3, &Formulation::default(), 3.34e5),
            Err(FreezingError::NoSupercooling { .. })
        ));
    }

    #[test]
    fn preconditioning_equilibrium_and_sign() {
        let m = model();
        let ms = m.solute_mass();
        let mw = m.initial_water();
        let env = (268.0, 273.0, 273.0);
        assert!(m.heat_rate_lumped(298.15, mw, 0.0, env) < 0.0);
        let q = m.heat_rate_lumped(250.0, mw, 0.0, (250.0, 250.0, 250.0));
        assert_eq!(q, 0.0);
        assert!(ms > 0.0);
    }

    #[test]
    fn preconditioning_matches_exponential_relaxation() {
        let mut m = model();
        m.side_transfer_factor = 0.0;
        m.protocol.before_nucleation = Environment::constant(260.0, 260.0, 260.0);
        m.protocol.visf = None;
        m.protocol.nucleation = NucleationMode::Controlled { temperature: 100.0 };
        m.solver = IntegratorConfig::default().with_rtol(1e-8).with_atol(1e-8);
        let mw = m.initial_water();
        let ms = m.solute_mass();
        let sys = LumpedCooling {
            model: &m,
            env: &m.protocol.before_nucleation,
            clock_offset: 0.0,
            water: mw,
            ice: 0.0,
        };
        let sol = integrate_adaptive(&sys, &[290.0], (0.0, 5000.0), &m.solver, &[]).unwrap();
        let az = cross_section(m.diameter);
        let ar = radial_area(ms, mw, 0.0, &m.formulation, m.diameter);
        let ua = (m.protocol.h_top + m.protocol.h_bottom) * az + m.protocol.h_side * ar;
        let cap = ms * m.formulation.cp_solute + mw * m.formulation.cp_water;
        for (t, y) in sol.t.iter().zip(&sol.y) {
            let exact = 260.0 + 30.0 * (-ua * t / cap).exp();
            assert!((y[0] - exact).abs() < 1e-5, "t = {t}");
        }
    }

    #[test]
    fn evaporation_rate_hand_value() {
        let mut m = model();
        m.protocol.chamber_vapor_pressure = 0.0;
        let r = m.evaporation_rate(268.0, 1e4);
        assert!((r + 7.76e-8).abs() < 0.02e-7, "{r}");
        m.protocol.mass_transfer = 0.0;
        assert_eq!(m.evaporation_rate(268.0, 1e4), 0.0);
    }

    #[test]
    fn zero_driving_force_stops_evaporation() {
        let mut m = model();
        m.protocol.chamber_vapor_pressure = psat_evaporation_raw(268.0);
        assert!(m.evaporation_rate(268.0, 1e4).abs() < 1e-20);
    }

    #[test]
    fn default_run_stage_order_and_visf_loss() {
        let m = model();
        let traj = m.run().unwrap();
        let t = traj.times;
        assert!(0.0 <= t.t_f1 && t.t_f1 <= t.t_f2 && t.t_f2 <= t.t_f3);
        assert!(t.t_f3 <= t.t_f4 && t.t_f4 <= t.t_f5);
        let loss = (m.initial_water() - traj.total_water) / m.initial_water();
        assert!(loss > 0.0 && loss < 0.02, "{loss}");
        assert!((traj.nucleation.temperature_before - 268.0).abs() < 1e-12);
    }

    #[test]
    fn solidification_keeps_constraint_and_mass() {
        let m = model();
        let traj = m.run().unwrap();
        let ms = m.solute_mass();
        let mut prev_ice = 0.0;
        for i in 0..traj.t.len() {
            if traj.stage[i] != Stage::Solidification {
                continue;
            }
            assert!((traj.water[i] + traj.ice[i] - traj.total_water).abs() <= 1e-15 * traj.total_water);
            let fp = thermo::freezing_point(ms, traj.water[i], &m.formulation).unwrap();
            assert!((traj.temperature[i] - fp).abs() < 1e-9);
            assert!(traj.ice[i] >= prev_ice);
            prev_ice = traj.ice[i];
        }
    }

    #[test]
    fn adiabatic_solidification_stalls() {
        let mut m = model();
        // Surroundings at the liquid temperature and no radiation.
        m.side_transfer_factor = 0.0;
        let ms = m.solute_mass();
        let w = m.initial_water();
        let t_fl = thermo::freezing_point(ms, w - 1e-4, &m.formulation).unwrap();
        m.protocol.after_nucleation = Environment::constant(t_fl, t_fl, t_fl);
        let sys = m.solidification_system(0.0, w, 1e-4).unwrap();
        let mut d = [0.0];
        sys.rhs(0.0, &[1e-4], &mut d);
        assert!(d[0].abs() < 1e-15);
    }

    #[test]
    fn solidification_fraction_moves_end_of_solidification_not_final_state() {
        let mut lo = model();
        lo.protocol.solidification_fraction = 0.85;
        let (a, b) = (lo.run().unwrap(), model().run().unwrap());
        assert!(a.times.t_f4 < b.times.t_f4);
        // During solidification the temperature is pinned to the depression of
        // the remaining liquid, so it cannot agree at t_f4 itself.
        let (ta, tb) = (a.temperature_at(a.times.t_f4), b.temperature_at(b.times.t_f4));
        assert!(ta > tb + 1.0, "{ta} vs {tb}");
        let (fa, fb) = (a.final_state().temperature, b.final_state().temperature);
        assert!((fa - fb).abs() < 1.0, "{fa} vs {fb}");
    }

    #[test]
    fn stochastic_runs_repeat_bit_for_bit() {
        let mut m = model();
        m.protocol.visf = None;
        m.protocol.nucleation = NucleationMode::Stochastic {
            rate_constant: 1e-9,
            exponent: 12.0,
            seed: 7,
            sampling_interval: 0.1,
        };
        m.protocol.before_nucleation = Environment::constant(250.0, 255.0, 255.0);
        let a = m.run().unwrap();
        let b = m.run().unwrap();
        assert_eq!(a, b);
        assert!(a.nucleation.temperature_before < 272.0);
    }

    #[test]
    fn zero_rate_never_nucleates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(first_nucleation_time(0.0, 0.1, 1e3, &mut rng), None);
    }

    #[test]
    fn nucleation_rate_zero_above_equilibrium() {
        let f = Formulation::default();
        assert_eq!(nucleation_rate(273.0, 1.53e-4, 2.9e-3, &f, 1.0, 12.0), 0.0);
        assert!(nucleation_rate(260.0, 1.53e-4, 2.9e-3, &f, 1e-9, 12.0) > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn nucleation_matches_oracle(tn in 255.0f64..272.5, mw in 1e-3f64..4e-3) {
            let f = Formulation::default();
            let ms = 1.53e-4;
            let fp = thermo::freezing_point(ms, mw, &f).unwrap();
            prop_assume!(tn < fp - 1e-3);
            let out = nucleate_controlled(tn, ms, mw, &f, 3.34e5).unwrap();
            let (ice, t) = nucleation_oracle(tn, ms, mw, &f, 3.34e5);
            prop_assert!((out.ice_formed - ice).abs() <= 1e-9 * ice);
            prop_assert!((out.temperature_after - t).abs() < 1e-8);
            prop_assert!(out.ice_formed > 0.0 && out.ice_formed < mw);
        }

        #[test]
        fn probability_in_unit_interval(rate in 0.0f64..1e6, dt in 0.0f64..10.0) {
            let p = -(-rate * dt).exp_m1();
            prop_assert!((0.0..=1.0).contains(&p));
        }

        #[test]
        fn ice_geometry_is_consistent(frac in 0.0f64..0.95) {
            let m = model();
            let w = m.initial_water();
            let ice = frac * w;
            let g = m.ice_geometry(w - ice, ice, w).unwrap();
            prop_assert!(g.core_radius <= 0.5 * m.diameter);
            prop_assert!(g.bottom_ice >= 0.0);
        }
    }
}
