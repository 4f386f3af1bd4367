//! Primary drying: conduction in the frozen layer below a receding
//! sublimation front, solved on a grid normalized to the frozen thickness.
//!
//! `z` points down from the top of the product. The front sits at `z = S`,
//! the vial bottom at `z = H`, and the grid coordinate `xi = (z - S)/(H - S)`
//! maps the shrinking frozen layer onto `[0, 1]`. Both flux conditions are
//! imposed through ghost nodes eliminated from the end rows.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chamber::ChamberModel;
use crate::schedule::{merged_breakpoints, Schedule};
use crate::solver::{
    integrate_adaptive, Direction, EventSpec, IntegratorConfig, OdeSystem, Solution, SolverError, Sparsity,
};
use crate::thermo::{cross_section, psat_sublimation_raw, STEFAN_BOLTZMANN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrimaryError {
    #[error("invalid primary drying setup: {0}")]
    InvalidSetup(String),
    #[error("front stalled at {front} m of {height} m: no sublimation driving force")]
    Stalled { front: f64, height: f64 },
    #[error("front reached {front} m of {height} m within the {horizon} s horizon")]
    Timeout { front: f64, height: f64, horizon: f64 },
    #[error("integration failed: {0}")]
    Solver(#[from] SolverError),
}

/// Frozen-layer properties, heat and mass transfer, and the operating
/// schedules for one primary drying run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DryingParams {
    pub rho_frozen: f64,
    pub cp_frozen: f64,
    pub k_frozen: f64,
    /// Effective density of the dried layer above the front.
    pub rho_dried: f64,
    pub h_bottom: f64,
    /// Cake resistance `R0 + R1 S / (R2 + S)`.
    pub resistance_base: f64,
    pub resistance_slope: f64,
    pub resistance_saturation: f64,
    pub heat_of_sublimation: f64,
    pub shelf: Schedule,
    pub wall: Schedule,
    pub upper: Schedule,
    pub chamber_vapor_pressure: f64,
    pub top_transfer_factor: f64,
    pub side_transfer_factor: f64,
    pub diameter: f64,
    pub height: f64,
}

impl DryingParams {
    pub fn validate(&self) -> Result<(), PrimaryError> {
        let bad = |m: &str| Err(PrimaryError::InvalidSetup(m.to_string()));
        if !(self.rho_frozen > self.rho_dried && self.rho_dried > 0.0) {
            return bad("frozen density must exceed the dried density, which must be positive");
        }
        if !(self.resistance_base > 0.0 && self.resistance_slope >= 0.0 && self.resistance_saturation > 0.0) {
            return bad("cake resistance needs R0 > 0, R1 >= 0, R2 > 0");
        }
        if !(self.cp_frozen > 0.0 && self.k_frozen > 0.0 && self.h_bottom >= 0.0) {
            return bad("frozen heat capacity and conductivity must be positive");
        }
        if !(self.diameter > 0.0 && self.height > 0.0) {
            return bad("vial diameter and product height must be positive");
        }
        if !(self.chamber_vapor_pressure >= 0.0) {
            return bad("chamber vapor pressure must be non-negative");
        }
        for s in [&self.shelf, &self.wall, &self.upper] {
            s.validate().map_err(|e| PrimaryError::InvalidSetup(e.to_string()))?;
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        cross_section(self.diameter)
    }

    pub fn side_area(&self) -> f64 {
        PI * self.diameter * self.height
    }

    pub fn cake_resistance(&self, front: f64) -> f64 {
        self.resistance_base + self.resistance_slope * front / (self.resistance_saturation + front)
    }

    /// Front speed for a given sublimation flux.
    pub fn front_velocity(&self, flux: f64) -> f64 {
        flux / (self.rho_frozen - self.rho_dried)
    }
}

/// Sublimation mass flux (kg/m^2/s) through the dried layer, zero when the
/// chamber holds more vapor than the ice can supply.
pub fn sublimation_flux(interface_temperature: f64, front: f64, chamber_pressure: f64, dp: &DryingParams) -> f64 {
    let drive = psat_sublimation_raw(interface_temperature) - chamber_pressure;
    drive.max(0.0) / dp.cake_resistance(front)
}

/// Temperature profile on the normalized grid plus the front position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimaryState {
    pub t: f64,
    pub temperature: Vec<f64>,
    pub front: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub grid_points: usize,
    /// Front completion guard as a fraction of the product height.
    pub front_guard: f64,
    pub horizon: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            grid_points: 51,
            front_guard: 1e-6,
            horizon: 5.0e5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimaryTrajectory {
    pub t: Vec<f64>,
    pub front: Vec<f64>,
    /// Node temperatures, front (index 0) to bottom.
    pub profiles: Vec<Vec<f64>>,
    pub flux: Vec<f64>,
    /// Chamber vapor pressure seen by the front at each sample.
    pub chamber_pressure: Vec<f64>,
    pub t_start: f64,
    pub t_end: f64,
}

impl PrimaryTrajectory {
    pub fn bottom_temperature(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| p[p.len() - 1]).collect()
    }

    pub fn top_temperature(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| p[0]).collect()
    }

    /// Mean over the frozen layer (trapezoid rule on the normalized grid).
    pub fn average_temperature(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| trapezoid_mean(p)).collect()
    }

    pub fn final_profile(&self) -> &[f64] {
        self.profiles.last().expect("trajectory holds the initial sample")
    }

    pub fn drying_time(&self) -> f64 {
        self.t_end - self.t_start
    }
}

pub(crate) fn trapezoid_mean(v: &[f64]) -> f64 {
    let n = v.len();
    let inner: f64 = v[1..n - 1].iter().sum();
    (inner + 0.5 * (v[0] + v[n - 1])) / (n - 1) as f64
}

/// Method-of-lines system. State: node temperatures, then the front
/// position, then (when coupled to a chamber) the chamber vapor pressure.
pub struct PrimarySystem<'a> {
    pub params: &'a DryingParams,
    pub chamber: Option<&'a ChamberModel>,
    pub n: usize,
    pub t_start: f64,
    /// When set, sublimation and front motion are switched off.
    pub sublimation_off: bool,
}

impl<'a> PrimarySystem<'a> {
    pub fn new(params: &'a DryingParams, n: usize, t_start: f64) -> Self {
        Self {
            params,
            chamber: None,
            n,
            t_start,
            sublimation_off: false,
        }
    }

    fn chamber_pressure(&self, y: &[f64]) -> f64 {
        match self.chamber {
            Some(_) => y[self.n + 1],
            None => self.params.chamber_vapor_pressure,
        }
    }

    pub fn flux(&self, y: &[f64]) -> f64 {
        if self.sublimation_off {
            return 0.0;
        }
        sublimation_flux(y[0], y[self.n], self.chamber_pressure(y), self.params)
    }
}

impl OdeSystem for PrimarySystem<'_> {
    fn dim(&self) -> usize {
        self.n + 1 + usize::from(self.chamber.is_some())
    }

    fn rhs(&self, t: f64, y: &[f64], dydt: &mut [f64]) {
        let p = self.params;
        let n = self.n;
        let local = t - self.t_start;
        let (t_shelf, t_wall, t_upper) = (p.shelf.value(local), p.wall.value(local), p.upper.value(local));
        let temp = &y[..n];
        let front = y[n];
        let thickness = p.height - front;
        let dxi = 1.0 / (n - 1) as f64;
        let flux = self.flux(y);
        let velocity = p.front_velocity(flux);
        let sigma_top = STEFAN_BOLTZMANN * p.top_transfer_factor;

        let grad_top =
            thickness / p.k_frozen * (flux * p.heat_of_sublimation - sigma_top * (t_upper.powi(4) - temp[0].powi(4)));
        let grad_bottom = -thickness * p.h_bottom * (temp[n - 1] - t_shelf) / p.k_frozen;
        let ghost_top = temp[1] - 2.0 * dxi * grad_top;
        let ghost_bottom = temp[n - 2] + 2.0 * dxi * grad_bottom;

        let capacity = p.rho_frozen * p.cp_frozen;
        let diffusion = p.k_frozen / (capacity * thickness * thickness * dxi * dxi);
        let advection = velocity / (thickness * 2.0 * dxi);
        // Side radiation per unit frozen volume.
        let radiation = STEFAN_BOLTZMANN * p.side_area() * p.side_transfer_factor / (capacity * p.area() * thickness);
        let t_wall4 = t_wall.powi(4);

        for j in 0..n {
            let left = if j == 0 { ghost_top } else { temp[j - 1] };
            let right = if j == n - 1 { ghost_bottom } else { temp[j + 1] };
            let xi = j as f64 * dxi;
            dydt[j] = diffusion * (right - 2.0 * temp[j] + left) - (xi - 1.0) * advection * (right - left)
                + radiation * (t_wall4 - temp[j].powi(4));
        }
        dydt[n] = velocity;
        if let Some(ch) = self.chamber {
            dydt[n + 1] = ch.pressure_rate(y[n + 1], flux, p.area());
        }
    }

    fn sparsity(&self) -> Sparsity {
        let mut dense_columns = vec![0, self.n];
        if self.chamber.is_some() {
            dense_columns.push(self.n + 1);
        }
        Sparsity::Banded {
            lower: 1,
            upper: 1,
            dense_columns,
        }
    }

    fn atol_scale(&self, i: usize) -> f64 {
        if i == self.n {
            self.params.height
        } else {
            1.0
        }
    }

    fn admissible(&self, y: &[f64]) -> bool {
        y[self.n] < self.params.height && y[..self.n].iter().all(|&v| v > 0.0)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let p = self.params;
        merged_breakpoints([&p.shelf, &p.wall, &p.upper])
            .into_iter()
            .map(|b| b + self.t_start)
            .collect()
    }
}

/// Integrate primary drying from a uniform or given profile with the front
/// at the top until the front reaches the bottom.
pub fn run_primary(
    initial: &[f64],
    t_start: f64,
    params: &DryingParams,
    chamber: Option<&ChamberModel>,
    options: &RunOptions,
    solver: &IntegratorConfig,
) -> Result<PrimaryTrajectory, PrimaryError> {
    params.validate()?;
    let n = options.grid_points;
    if n < 3 {
        return Err(PrimaryError::InvalidSetup(
            "at least three grid points are needed".into(),
        ));
    }
    if initial.len() != n {
        return Err(PrimaryError::InvalidSetup(format!(
            "initial profile has {} nodes, grid has {n}",
            initial.len()
        )));
    }
    if !(options.front_guard > 0.0 && options.front_guard < 1.0) {
        return Err(PrimaryError::InvalidSetup("front guard must lie in (0, 1)".into()));
    }
    if let Some(ch) = chamber {
        ch.validate().map_err(|e| PrimaryError::InvalidSetup(e.to_string()))?;
    }
    let mut sys = PrimarySystem::new(params, n, t_start);
    sys.chamber = chamber;
    let mut y0 = initial.to_vec();
    y0.push(0.0);
    if let Some(ch) = chamber {
        y0.push(ch.setpoint);
    }
    let end_front = params.height * (1.0 - options.front_guard);
    let events = [EventSpec::new(
        "front_at_bottom",
        Direction::Rising,
        true,
        move |_, y: &[f64]| y[n] - end_front,
    )];
    let sol = integrate_adaptive(&sys, &y0, (t_start, t_start + options.horizon), solver, &events)?;
    if sol.terminal_event.is_none() {
        let y = sol.y_final();
        let front = y[n];
        if sys.flux(y) == 0.0 {
            return Err(PrimaryError::Stalled {
                front,
                height: params.height,
            });
        }
        return Err(PrimaryError::Timeout {
            front,
            height: params.height,
            horizon: options.horizon,
        });
    }
    Ok(collect(&sys, &sol, t_start))
}

fn collect(sys: &PrimarySystem<'_>, sol: &Solution, t_start: f64) -> PrimaryTrajectory {
    let n = sys.n;
    PrimaryTrajectory {
        t: sol.t.clone(),
        front: sol.y.iter().map(|y| y[n]).collect(),
        profiles: sol.y.iter().map(|y| y[..n].to_vec()).collect(),
        flux: sol.y.iter().map(|y| sys.flux(y)).collect(),
        chamber_pressure: sol.y.iter().map(|y| sys.chamber_pressure(y)).collect(),
        t_start,
        t_end: sol.t_final(),
    }
}

/// Heat flows into the frozen layer per unit cross-section (W/m^2) for a
/// state: bottom, top radiation, side radiation, sublimation, and the
/// sensible heat carried off by the ice leaving at the front.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatFlows {
    pub bottom: f64,
    pub top_radiation: f64,
    pub side_radiation: f64,
    pub sublimation: f64,
    pub front_enthalpy: f64,
}

impl HeatFlows {
    pub fn net(&self) -> f64 {
        self.bottom + self.top_radiation + self.side_radiation - self.sublimation - self.front_enthalpy
    }
}

pub fn heat_flows(sys: &PrimarySystem<'_>, t: f64, y: &[f64]) -> HeatFlows {
    let p = sys.params;
    let n = sys.n;
    let local = t - sys.t_start;
    let temp = &y[..n];
    let flux = sys.flux(y);
    let t_wall4 = p.wall.value(local).powi(4);
    let weights = trapezoid_weights(n);
    let side: f64 = temp
        .iter()
        .zip(&weights)
        .map(|(&tj, w)| w * (t_wall4 - tj.powi(4)))
        .sum::<f64>()
        * STEFAN_BOLTZMANN
        * p.side_transfer_factor
        * p.side_area()
        / p.area();
    HeatFlows {
        bottom: p.h_bottom * (p.shelf.value(local) - temp[n - 1]),
        top_radiation: STEFAN_BOLTZMANN * p.top_transfer_factor * (p.upper.value(local).powi(4) - temp[0].powi(4)),
        side_radiation: side,
        sublimation: flux * p.heat_of_sublimation,
        front_enthalpy: p.rho_frozen * p.cp_frozen * temp[0] * p.front_velocity(flux),
    }
}

pub(crate) fn trapezoid_weights(n: usize) -> Vec<f64> {
    let d = 1.0 / (n - 1) as f64;
    let mut w = vec![d; n];
    w[0] *= 0.5;
    w[n - 1] *= 0.5;
    w
}

/// Sensible heat per unit cross-section held by the frozen layer.
pub fn frozen_enthalpy(p: &DryingParams, profile: &[f64], front: f64) -> f64 {
    p.rho_frozen * p.cp_frozen * (p.height - front) * trapezoid_mean(profile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterSet;
    use proptest::prelude::*;

    fn defaults() -> DryingParams {
        ParameterSet::default().primary_params()
    }

    fn solver() -> IntegratorConfig {
        IntegratorConfig::default()
    }

    #[test]
    fn flux_hand_values() {
        let mut p = defaults();
        p.resistance_base = 1.5e4;
        let n = sublimation_flux(250.0, 0.0, 3.0, &p);
        assert!((n - 4.87e-3).abs() < 0.01e-3, "{n}");
        assert_eq!(p.cake_resistance(0.0), p.resistance_base);
        let at_eq = psat_sublimation_raw(240.0);
        assert_eq!(sublimation_flux(240.0, 0.0, at_eq, &p), 0.0);
        assert_eq!(sublimation_flux(240.0, 0.0, at_eq + 5.0, &p), 0.0);
    }

    #[test]
    fn front_velocity_hand_value() {
        let mut p = defaults();
        p.rho_frozen = 937.0;
        p.rho_dried = 215.0;
        assert!((p.front_velocity(4.87e-3) - 6.745e-6).abs() < 0.01e-6);
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let mut p = defaults();
        let t_eq = 250.0;
        p.shelf = t_eq.into();
        p.wall = t_eq.into();
        p.upper = t_eq.into();
        p.chamber_vapor_pressure = psat_sublimation_raw(t_eq);
        let sys = PrimarySystem::new(&p, 11, 0.0);
        let mut y = vec![t_eq; 11];
        y.push(1e-3);
        let mut d = vec![1.0; 12];
        sys.rhs(0.0, &y, &mut d);
        assert!(d.iter().all(|v| v.abs() < 1e-12), "{d:?}");
    }

    /// Sublimation and radiation off: the insulated top and Robin bottom
    /// relax to the shelf temperature, and every row but the top one
    /// annihilates the linear profile carrying a constant flux `q`.
    #[test]
    fn steady_state_is_linear_conduction() {
        let mut p = defaults();
        p.top_transfer_factor = 0.0;
        p.side_transfer_factor = 0.0;
        p.shelf = 260.0.into();
        let n = 21;
        let mut sys = PrimarySystem::new(&p, n, 0.0);
        sys.sublimation_off = true;

        let mut y0: Vec<f64> = (0..n).map(|j| 240.0 + j as f64).collect();
        y0.push(0.002);
        let sol = integrate_adaptive(
            &sys,
            &y0,
            (0.0, 2.0e5),
            &solver().with_rtol(1e-10).with_atol(1e-10),
            &[],
        )
        .unwrap();
        for &v in &sol.y_final()[..n] {
            assert!((v - 260.0).abs() / 260.0 < 1e-6, "{v}");
        }

        let (q, k, h) = (50.0, p.k_frozen, p.h_bottom);
        let front = 0.002;
        let thick = p.height - front;
        let mut y: Vec<f64> = (0..n)
            .map(|j| {
                let xi = j as f64 / (n - 1) as f64;
                260.0 - q / h - q * (1.0 - xi) * thick / k
            })
            .collect();
        y.push(front);
        let mut d = vec![0.0; n + 1];
        sys.rhs(0.0, &y, &mut d);
        for (j, v) in d.iter().enumerate().take(n).skip(1) {
            assert!(v.abs() < 1e-9, "row {j}: {v}");
        }
    }

    fn run_default(n: usize, rtol: f64) -> PrimaryTrajectory {
        let p = defaults();
        let opts = RunOptions {
            grid_points: n,
            ..RunOptions::default()
        };
        run_primary(
            &vec![233.0; n],
            0.0,
            &p,
            None,
            &opts,
            &solver().with_rtol(rtol).with_atol(rtol),
        )
        .unwrap()
    }

    #[test]
    fn front_is_monotone_and_temperatures_bounded() {
        let p = defaults();
        let tr = run_default(21, 1e-6);
        for w in tr.front.windows(2) {
            assert!(w[1] >= w[0]);
        }
        // Sublimation is the only sink and it stops where the ice vapor
        // pressure falls to the chamber pressure.
        let (mut a, mut b) = (150.0, 273.0);
        for _ in 0..100 {
            let m = 0.5 * (a + b);
            if psat_sublimation_raw(m) < p.chamber_vapor_pressure {
                a = m;
            } else {
                b = m;
            }
        }
        let lo = a - 1e-6;
        for prof in &tr.profiles {
            for &v in prof {
                assert!(v >= lo && v <= 271.0, "{v}");
            }
        }
        assert!(tr.front.last().unwrap() / p.height > 1.0 - 2e-6);
    }

    #[test]
    fn sublimed_mass_matches_front_sweep() {
        let p = defaults();
        let tr = run_default(21, 1e-7);
        let mut mass = 0.0;
        for i in 1..tr.t.len() {
            mass += 0.5 * (tr.flux[i] + tr.flux[i - 1]) * (tr.t[i] - tr.t[i - 1]);
        }
        let sweep = (p.rho_frozen - p.rho_dried) * tr.front.last().unwrap();
        assert!((mass - sweep).abs() / sweep < 1e-3, "{mass} vs {sweep}");
    }

    #[test]
    fn grid_doubling_changes_drying_time_little() {
        let a = run_default(41, 1e-6).drying_time();
        let b = run_default(81, 1e-6).drying_time();
        assert!((a - b).abs() / b < 0.01, "{a} vs {b}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn higher_chamber_pressure_lowers_flux(t in 220.0f64..265.0, s in 0.0f64..7e-3, p1 in 0.0f64..30.0, dp in 0.01f64..10.0) {
            let p = defaults();
            let a = sublimation_flux(t, s, p1, &p);
            let b = sublimation_flux(t, s, p1 + dp, &p);
            prop_assert!(b <= a);
            if a > 0.0 { prop_assert!(b < a); }
        }

        #[test]
        fn resistance_grows_with_front(s in 0.0f64..0.01, ds in 1e-6f64..1e-3) {
            let p = defaults();
            prop_assert!(p.cake_resistance(s + ds) > p.cake_resistance(s));
        }
    }
}
