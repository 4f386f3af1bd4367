//! Secondary drying: conduction through the dried cake on a fixed grid,
//! coupled to first-order desorption of bound water at every node.
//!
//! `z` runs from the top surface (node 0) to the vial bottom. The state is
//! interleaved as `[T0, c0, T1, c1, ...]` so the Jacobian stays banded.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drying_primary::{trapezoid_mean, trapezoid_weights};
use crate::schedule::{merged_breakpoints, Schedule};
use crate::solver::{
    integrate_adaptive, Direction, EventSpec, IntegratorConfig, OdeSystem, Solution, SolverError, Sparsity,
};
use crate::thermo::{cross_section, GAS_CONSTANT, STEFAN_BOLTZMANN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SecondaryError {
    #[error("invalid secondary drying setup: {0}")]
    InvalidSetup(String),
    #[error("average bound water {average} still above target {target} after {horizon} s")]
    Timeout { average: f64, target: f64, horizon: f64 },
    #[error("integration failed: {0}")]
    Solver(#[from] SolverError),
}

/// Arrhenius desorption and the dried-cake properties it heats or cools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesorptionKinetics {
    pub frequency_factor: f64,
    pub activation_energy: f64,
    pub equilibrium_concentration: f64,
    /// Density of the solid skeleton carrying the bound water.
    pub rho_dried: f64,
    pub heat_of_desorption: f64,
    pub k_eff: f64,
    pub rho_eff: f64,
    pub cp_eff: f64,
}

impl DesorptionKinetics {
    pub fn rate_constant(&self, temperature: f64) -> f64 {
        self.frequency_factor * (-self.activation_energy / (GAS_CONSTANT * temperature)).exp()
    }

    /// Linear-driving-force rate `dc/dt` (1/s).
    pub fn desorption_rate(&self, temperature: f64, concentration: f64) -> f64 {
        self.rate_constant(temperature) * (self.equilibrium_concentration - concentration)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondaryParams {
    pub kinetics: DesorptionKinetics,
    pub h_bottom: f64,
    pub shelf: Schedule,
    pub wall: Schedule,
    pub upper: Schedule,
    pub top_transfer_factor: f64,
    pub side_transfer_factor: f64,
    pub diameter: f64,
    pub height: f64,
    /// Stop when the volume-averaged bound water falls to this value.
    pub target_concentration: f64,
}

impl SecondaryParams {
    pub fn validate(&self) -> Result<(), SecondaryError> {
        let bad = |m: &str| Err(SecondaryError::InvalidSetup(m.to_string()));
        let k = &self.kinetics;
        if !(k.frequency_factor > 0.0 && k.activation_energy >= 0.0) {
            return bad("desorption needs a positive frequency factor and non-negative activation energy");
        }
        if !(k.k_eff > 0.0 && k.rho_eff > 0.0 && k.cp_eff > 0.0 && k.rho_dried >= 0.0) {
            return bad("effective cake properties must be positive");
        }
        if !(k.equilibrium_concentration >= 0.0 && self.target_concentration >= 0.0) {
            return bad("concentrations must be non-negative");
        }
        if !(self.diameter > 0.0 && self.height > 0.0 && self.h_bottom >= 0.0) {
            return bad("geometry must be positive and h_bottom non-negative");
        }
        for s in [&self.shelf, &self.wall, &self.upper] {
            s.validate().map_err(|e| SecondaryError::InvalidSetup(e.to_string()))?;
        }
        Ok(())
    }

    fn area(&self) -> f64 {
        cross_section(self.diameter)
    }

    fn side_area(&self) -> f64 {
        PI * self.diameter * self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondaryState {
    pub t: f64,
    pub temperature: Vec<f64>,
    pub concentration: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondaryTrajectory {
    pub t: Vec<f64>,
    /// Node temperatures, top to bottom.
    pub temperature: Vec<Vec<f64>>,
    pub concentration: Vec<Vec<f64>>,
    pub t_start: f64,
    pub t_end: f64,
}

impl SecondaryTrajectory {
    pub fn average_concentration(&self) -> Vec<f64> {
        self.concentration.iter().map(|c| trapezoid_mean(c)).collect()
    }

    pub fn average_temperature(&self) -> Vec<f64> {
        self.temperature.iter().map(|c| trapezoid_mean(c)).collect()
    }

    pub fn bottom_temperature(&self) -> Vec<f64> {
        self.temperature.iter().map(|p| p[p.len() - 1]).collect()
    }

    pub fn top_temperature(&self) -> Vec<f64> {
        self.temperature.iter().map(|p| p[0]).collect()
    }

    pub fn drying_time(&self) -> f64 {
        self.t_end - self.t_start
    }
}

pub struct SecondarySystem<'a> {
    pub params: &'a SecondaryParams,
    pub n: usize,
    pub t_start: f64,
    /// Pure conduction, bound water held fixed.
    pub desorption_off: bool,
}

impl SecondarySystem<'_> {
    fn grid_step(&self) -> f64 {
        self.params.height / (self.n - 1) as f64
    }
}

impl OdeSystem for SecondarySystem<'_> {
    fn dim(&self) -> usize {
        2 * self.n
    }

    fn rhs(&self, t: f64, y: &[f64], dydt: &mut [f64]) {
        let p = self.params;
        let k = &p.kinetics;
        let n = self.n;
        let local = t - self.t_start;
        let (t_shelf, t_wall, t_upper) = (p.shelf.value(local), p.wall.value(local), p.upper.value(local));
        let dz = self.grid_step();
        let temp = |j: usize| y[2 * j];
        let ghost_top = temp(1)
            + 2.0 * dz * STEFAN_BOLTZMANN * p.top_transfer_factor * (t_upper.powi(4) - temp(0).powi(4)) / k.k_eff;
        let ghost_bottom = temp(n - 2) - 2.0 * dz * p.h_bottom * (temp(n - 1) - t_shelf) / k.k_eff;
        let capacity = k.rho_eff * k.cp_eff;
        let diffusion = k.k_eff / (capacity * dz * dz);
        let desorption_heat = k.rho_dried * k.heat_of_desorption / capacity;
        let radiation = STEFAN_BOLTZMANN * p.side_area() * p.side_transfer_factor / (capacity * p.area() * p.height);
        let t_wall4 = t_wall.powi(4);
        for j in 0..n {
            let tj = temp(j);
            let left = if j == 0 { ghost_top } else { temp(j - 1) };
            let right = if j == n - 1 { ghost_bottom } else { temp(j + 1) };
            let dc = if self.desorption_off {
                0.0
            } else {
                k.desorption_rate(tj, y[2 * j + 1])
            };
            dydt[2 * j + 1] = dc;
            dydt[2 * j] =
                diffusion * (right - 2.0 * tj + left) + desorption_heat * dc + radiation * (t_wall4 - tj.powi(4));
        }
    }

    fn sparsity(&self) -> Sparsity {
        Sparsity::Banded {
            lower: 2,
            upper: 2,
            dense_columns: Vec::new(),
        }
    }

    fn atol_scale(&self, i: usize) -> f64 {
        if i % 2 == 1 {
            1e-3
        } else {
            1.0
        }
    }

    fn admissible(&self, y: &[f64]) -> bool {
        y.iter().step_by(2).all(|&v| v > 0.0)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let p = self.params;
        merged_breakpoints([&p.shelf, &p.wall, &p.upper])
            .into_iter()
            .map(|b| b + self.t_start)
            .collect()
    }
}

/// Integrate until the volume-averaged bound water reaches the target.
pub fn run_secondary(
    initial_temperature: &[f64],
    initial_concentration: &[f64],
    t_start: f64,
    params: &SecondaryParams,
    horizon: f64,
    solver: &IntegratorConfig,
) -> Result<SecondaryTrajectory, SecondaryError> {
    params.validate()?;
    let n = initial_temperature.len();
    if n < 3 || initial_concentration.len() != n {
        return Err(SecondaryError::InvalidSetup(
            "temperature and concentration profiles need the same length, at least three".into(),
        ));
    }
    if initial_concentration.iter().any(|&c| !(c >= 0.0)) {
        return Err(SecondaryError::InvalidSetup(
            "initial bound water must be non-negative".into(),
        ));
    }
    let target = params.target_concentration;
    let y0: Vec<f64> = initial_temperature
        .iter()
        .zip(initial_concentration)
        .flat_map(|(&t, &c)| [t, c])
        .collect();
    if trapezoid_mean(initial_concentration) <= target {
        return Ok(SecondaryTrajectory {
            t: vec![t_start],
            temperature: vec![initial_temperature.to_vec()],
            concentration: vec![initial_concentration.to_vec()],
            t_start,
            t_end: t_start,
        });
    }
    let sys = SecondarySystem {
        params,
        n,
        t_start,
        desorption_off: false,
    };
    let weights = trapezoid_weights(n);
    let events = [EventSpec::new("dry", Direction::Falling, true, move |_, y: &[f64]| {
        let avg: f64 = weights.iter().enumerate().map(|(j, w)| w * y[2 * j + 1]).sum();
        avg - target
    })];
    let sol = integrate_adaptive(&sys, &y0, (t_start, t_start + horizon), solver, &events)?;
    let traj = collect(&sol, t_start);
    if sol.terminal_event.is_none() {
        return Err(SecondaryError::Timeout {
            average: *traj.average_concentration().last().expect("non-empty"),
            target,
            horizon,
        });
    }
    Ok(traj)
}

fn collect(sol: &Solution, t_start: f64) -> SecondaryTrajectory {
    let split = |y: &Vec<f64>| -> (Vec<f64>, Vec<f64>) {
        (
            y.iter().step_by(2).copied().collect(),
            y.iter().skip(1).step_by(2).copied().collect(),
        )
    };
    let (temperature, concentration) = sol.y.iter().map(split).unzip();
    SecondaryTrajectory {
        t: sol.t.clone(),
        temperature,
        concentration,
        t_start,
        t_end: sol.t_final(),
    }
}

/// Heat the dried cake for a fixed time by conduction only, with the bound
/// water frozen in place.
pub fn run_heating(
    initial_temperature: &[f64],
    concentration: &[f64],
    t_start: f64,
    duration: f64,
    params: &SecondaryParams,
    solver: &IntegratorConfig,
) -> Result<SecondaryTrajectory, SecondaryError> {
    params.validate()?;
    let n = initial_temperature.len();
    if n < 3 || concentration.len() != n {
        return Err(SecondaryError::InvalidSetup(
            "temperature and concentration profiles need the same length, at least three".into(),
        ));
    }
    if !(duration >= 0.0) {
        return Err(SecondaryError::InvalidSetup(
            "heating duration must be non-negative".into(),
        ));
    }
    let y0: Vec<f64> = initial_temperature
        .iter()
        .zip(concentration)
        .flat_map(|(&t, &c)| [t, c])
        .collect();
    if duration == 0.0 {
        return Ok(SecondaryTrajectory {
            t: vec![t_start],
            temperature: vec![initial_temperature.to_vec()],
            concentration: vec![concentration.to_vec()],
            t_start,
            t_end: t_start,
        });
    }
    let sys = SecondarySystem {
        params,
        n,
        t_start,
        desorption_off: true,
    };
    let sol = integrate_adaptive(&sys, &y0, (t_start, t_start + duration), solver, &[])?;
    Ok(collect(&sol, t_start))
}

/// Boundary heat input per unit cross-section (W/m^2) and the side
/// radiation, for the energy audit.
pub fn boundary_heat(params: &SecondaryParams, t_local: f64, temperature: &[f64]) -> f64 {
    let n = temperature.len();
    let sigma = STEFAN_BOLTZMANN;
    let bottom = params.h_bottom * (params.shelf.value(t_local) - temperature[n - 1]);
    let top = sigma * params.top_transfer_factor * (params.upper.value(t_local).powi(4) - temperature[0].powi(4));
    let t_wall4 = params.wall.value(t_local).powi(4);
    let side: f64 = temperature
        .iter()
        .zip(trapezoid_weights(n))
        .map(|(&tj, w)| w * (t_wall4 - tj.powi(4)))
        .sum::<f64>()
        * sigma
        * params.side_transfer_factor
        * params.side_area()
        / params.area();
    bottom + top + side
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterSet;
    use proptest::prelude::*;

    fn defaults() -> SecondaryParams {
        ParameterSet::default().secondary_params()
    }

    fn tight() -> IntegratorConfig {
        IntegratorConfig::default().with_rtol(1e-8).with_atol(1e-8)
    }

    fn uniform(t: f64, c: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
        (vec![t; n], vec![c; n])
    }

    fn insulated(mut p: SecondaryParams) -> SecondaryParams {
        p.h_bottom = 0.0;
        p.top_transfer_factor = 0.0;
        p.side_transfer_factor = 0.0;
        p
    }

    #[test]
    fn rate_constant_hand_value() {
        let k = defaults().kinetics;
        assert!((k.rate_constant(293.0) - 1.04e-4).abs() < 0.01e-4);
    }

    #[test]
    fn isothermal_decay_matches_exponential() {
        let mut p = insulated(defaults());
        p.kinetics.heat_of_desorption = 0.0;
        let t0 = 285.0;
        let (temp, conc) = uniform(t0, 0.088, 11);
        let traj = run_secondary(&temp, &conc, 0.0, &p, 1e7, &tight()).unwrap();
        let k = p.kinetics.rate_constant(t0);
        let cs = p.kinetics.equilibrium_concentration;
        let expected = ((0.088 - cs) / (p.target_concentration - cs)).ln() / k;
        assert!((traj.drying_time() - expected).abs() / expected < 1e-4);
        for (t, c) in traj.t.iter().zip(traj.average_concentration()) {
            let exact = cs + (0.088 - cs) * (-k * t).exp();
            assert!((c - exact).abs() / exact < 1e-6, "t={t} c={c} exact={exact}");
        }
    }

    // Single-node model of the whole cake, integrated with classical RK4.
    fn lumped_oracle(p: &SecondaryParams, t0: f64, c0: f64, times: &[f64]) -> Vec<(f64, f64)> {
        let k = &p.kinetics;
        let capacity = k.rho_eff * k.cp_eff * p.height;
        let shelf = p.shelf.value(0.0);
        let f = |s: [f64; 2]| {
            let dc = k.desorption_rate(s[0], s[1]);
            let dt = (p.h_bottom * (shelf - s[0]) + k.rho_dried * k.heat_of_desorption * p.height * dc) / capacity;
            [dt, dc]
        };
        let mut out = Vec::new();
        let (mut t, mut s) = (0.0, [t0, c0]);
        let h: f64 = 1.0;
        for &target in times {
            while t < target {
                let dt = h.min(target - t);
                let k1 = f(s);
                let k2 = f([s[0] + 0.5 * dt * k1[0], s[1] + 0.5 * dt * k1[1]]);
                let k3 = f([s[0] + 0.5 * dt * k2[0], s[1] + 0.5 * dt * k2[1]]);
                let k4 = f([s[0] + dt * k3[0], s[1] + dt * k3[1]]);
                for i in 0..2 {
                    s[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                t += dt;
            }
            out.push((s[0], s[1]));
        }
        out
    }

    #[test]
    fn small_biot_matches_lumped_oracle() {
        let mut p = defaults();
        p.top_transfer_factor = 0.0;
        p.side_transfer_factor = 0.0;
        p.h_bottom = 0.5;
        let (temp, conc) = uniform(273.0, 0.088, 21);
        let traj = run_secondary(&temp, &conc, 0.0, &p, 1e7, &tight()).unwrap();
        let oracle = lumped_oracle(&p, 273.0, 0.088, &traj.t);
        for ((avg_t, avg_c), (lt, lc)) in traj
            .average_temperature()
            .iter()
            .zip(traj.average_concentration())
            .zip(oracle)
        {
            assert!((avg_t - lt).abs() < 0.3, "{avg_t} vs {lt}");
            assert!((avg_c - lc).abs() / lc < 0.01, "{avg_c} vs {lc}");
        }
    }

    #[test]
    fn equilibrium_state_is_stationary() {
        let mut p = defaults();
        let sink = 290.0;
        p.shelf = Schedule::Constant(sink);
        p.wall = Schedule::Constant(sink);
        p.upper = Schedule::Constant(sink);
        let n = 7;
        let sys = SecondarySystem {
            params: &p,
            n,
            t_start: 0.0,
            desorption_off: false,
        };
        let y: Vec<f64> = (0..n).flat_map(|_| [sink, 0.0]).collect();
        let mut dy = vec![1.0; 2 * n];
        sys.rhs(0.0, &y, &mut dy);
        assert!(dy.iter().all(|&v| v.abs() < 1e-12), "{dy:?}");
    }

    #[test]
    fn insulated_top_relaxes_to_shelf_temperature() {
        let mut p = defaults();
        p.top_transfer_factor = 0.0;
        p.side_transfer_factor = 0.0;
        let (temp, conc) = uniform(250.0, 0.05, 21);
        let traj = run_heating(&temp, &conc, 0.0, 2e5, &p, &tight()).unwrap();
        let last = traj.temperature.last().unwrap();
        let shelf = p.shelf.value(0.0);
        assert!(last.iter().all(|&t| (t - shelf).abs() < 1e-3), "{last:?}");
        assert_eq!(traj.concentration.last().unwrap(), &conc);
    }

    #[test]
    fn desorption_cools() {
        let p = defaults();
        let n = 5;
        let with = SecondarySystem {
            params: &p,
            n,
            t_start: 0.0,
            desorption_off: false,
        };
        let without = SecondarySystem {
            desorption_off: true,
            ..with
        };
        let y: Vec<f64> = (0..n).flat_map(|_| [280.0, 0.08]).collect();
        let (mut a, mut b) = (vec![0.0; 2 * n], vec![0.0; 2 * n]);
        with.rhs(0.0, &y, &mut a);
        without.rhs(0.0, &y, &mut b);
        for j in 0..n {
            assert!(a[2 * j] < b[2 * j]);
            assert!(a[2 * j + 1] < 0.0);
        }
    }

    #[test]
    fn warmer_shelf_dries_faster() {
        let base = defaults();
        let mut previous = f64::INFINITY;
        for shelf in [285.0, 295.0, 305.0] {
            let mut p = base.clone();
            p.shelf = Schedule::Constant(shelf);
            let (temp, conc) = uniform(265.0, 0.088, 21);
            let t = run_secondary(&temp, &conc, 0.0, &p, 1e7, &IntegratorConfig::default())
                .unwrap()
                .drying_time();
            assert!(t < previous, "shelf {shelf}: {t} >= {previous}");
            previous = t;
        }
    }

    #[test]
    fn grid_refinement_changes_drying_time_by_under_one_percent() {
        let p = defaults();
        let time = |n| {
            let (temp, conc) = uniform(265.0, 0.088, n);
            run_secondary(&temp, &conc, 0.0, &p, 1e7, &tight())
                .unwrap()
                .drying_time()
        };
        let (coarse, fine) = (time(26), time(51));
        assert!((coarse - fine).abs() / fine < 0.01, "{coarse} vs {fine}");
    }

    #[test]
    fn already_dry_returns_immediately() {
        let p = defaults();
        let (temp, conc) = uniform(290.0, p.target_concentration * 0.5, 11);
        let traj = run_secondary(&temp, &conc, 1234.0, &p, 1e7, &tight()).unwrap();
        assert_eq!(traj.t_end, 1234.0);
        assert_eq!(traj.drying_time(), 0.0);
    }

    #[test]
    fn horizon_too_short_is_reported() {
        let p = defaults();
        let (temp, conc) = uniform(265.0, 0.088, 11);
        let err = run_secondary(&temp, &conc, 0.0, &p, 10.0, &tight()).unwrap_err();
        assert!(matches!(err, SecondaryError::Timeout { .. }));
    }

    #[test]
    fn trajectory_energy_closes() {
        let p = defaults();
        let n = 21;
        let (temp, conc) = uniform(265.0, 0.088, n);
        let traj = run_secondary(&temp, &conc, 0.0, &p, 1e7, &tight()).unwrap();
        let k = &p.kinetics;
        let energy = |i: usize| {
            p.height
                * (k.rho_eff * k.cp_eff * trapezoid_mean(&traj.temperature[i])
                    - k.rho_dried * k.heat_of_desorption * trapezoid_mean(&traj.concentration[i]))
        };
        let mut supplied = 0.0;
        for i in 1..traj.t.len() {
            let dt = traj.t[i] - traj.t[i - 1];
            supplied += 0.5
                * dt
                * (boundary_heat(&p, traj.t[i - 1], &traj.temperature[i - 1])
                    + boundary_heat(&p, traj.t[i], &traj.temperature[i]));
        }
        let last = traj.t.len() - 1;
        let stored = energy(last) - energy(0);
        assert!(
            (stored - supplied).abs() <= 5e-3 * supplied.abs(),
            "{stored} vs {supplied}"
        );
    }

    proptest! {
        #[test]
        fn discrete_energy_balance_is_exact(
            temps in proptest::collection::vec(230.0f64..320.0, 5..12),
            c in 0.0f64..0.1,
        ) {
            let p = defaults();
            let n = temps.len();
            let sys = SecondarySystem { params: &p, n, t_start: 0.0, desorption_off: false };
            let y: Vec<f64> = temps.iter().flat_map(|&t| [t, c]).collect();
            let mut dy = vec![0.0; 2 * n];
            sys.rhs(0.0, &y, &mut dy);
            let k = &p.kinetics;
            let weights = trapezoid_weights(n);
            let rate: f64 = weights
                .iter()
                .enumerate()
                .map(|(j, w)| w * (k.rho_eff * k.cp_eff * dy[2 * j] - k.rho_dried * k.heat_of_desorption * dy[2 * j + 1]))
                .sum::<f64>()
                * p.height;
            let supplied = boundary_heat(&p, 0.0, &temps);
            prop_assert!((rate - supplied).abs() <= 1e-9 * (1.0 + supplied.abs() + rate.abs()), "{} vs {}", rate, supplied);
        }

        #[test]
        fn bound_water_decreases_toward_equilibrium(c0 in 0.03f64..0.1, t0 in 250.0f64..290.0) {
            let p = defaults();
            let (temp, conc) = uniform(t0, c0, 11);
            let traj = run_secondary(&temp, &conc, 0.0, &p, 1e7, &IntegratorConfig::default()).unwrap();
            let avg = traj.average_concentration();
            let cs = p.kinetics.equilibrium_concentration;
            for w in avg.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            for prof in &traj.concentration {
                prop_assert!(prof.iter().all(|&c| c >= cs - 1e-9 && c <= c0 + 1e-9));
            }
        }
    }
}
