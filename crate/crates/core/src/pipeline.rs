//! Full continuous cycle: freezing, primary drying, optional extra heating
//! and secondary drying, chained on one clock.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drying_primary::{run_primary, PrimaryError, PrimaryTrajectory};
use crate::drying_secondary::{run_heating, run_secondary, SecondaryError, SecondaryTrajectory};
use crate::freezing::{FreezingError, FreezingTrajectory, Stage};
use crate::params::{Handoff, ParameterSet, ParamsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error("freezing: {0}")]
    Freezing(#[from] FreezingError),
    #[error("primary drying: {0}")]
    Primary(#[from] PrimaryError),
    #[error("extra heating: {0}")]
    Heating(SecondaryError),
    #[error("secondary drying: {0}")]
    Secondary(SecondaryError),
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Params(_) => "parameters",
            PipelineError::Freezing(_) => "freezing",
            PipelineError::Primary(_) => "primary",
            PipelineError::Heating(_) => "heating",
            PipelineError::Secondary(_) => "secondary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleTimes {
    pub t_f1: f64,
    pub t_f2: f64,
    pub t_f3: f64,
    pub t_f4: f64,
    pub t_f5: f64,
    /// Freezing-to-drying handoff.
    pub primary_start: f64,
    /// Front reached the vial bottom.
    pub sublimation_end: f64,
    /// End of primary drying, including any extra heating.
    pub t_d1: f64,
    pub t_d2: f64,
}

impl CycleTimes {
    /// Time spent in the freezing, primary and secondary drying chambers.
    pub fn residence(&self) -> [f64; 3] {
        [
            self.primary_start,
            self.t_d1 - self.primary_start,
            self.t_d2 - self.t_d1,
        ]
    }

    pub fn is_monotone(&self) -> bool {
        let freezing = [self.t_f1, self.t_f2, self.t_f3, self.t_f4, self.t_f5];
        let drying = [self.primary_start, self.sublimation_end, self.t_d1, self.t_d2];
        freezing.windows(2).all(|w| w[0] <= w[1])
            && drying.windows(2).all(|w| w[0] <= w[1])
            && self.t_f4 <= self.primary_start
    }
}

/// One row of the cycle-wide observables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleSample {
    pub t: f64,
    pub stage: &'static str,
    pub product_temperature: f64,
    pub ice_mass: f64,
    pub bound_water: Option<f64>,
    pub pressure: f64,
    /// Gas temperature while freezing, shelf temperature while drying.
    pub heat_source_temperature: f64,
}

/// Water inventory of one vial over the cycle (kg).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaterBalance {
    pub initial: f64,
    pub evaporated: f64,
    pub sublimed: f64,
    pub desorbed: f64,
    pub residual_bound: f64,
}

impl WaterBalance {
    pub fn accounted(&self) -> f64 {
        self.evaporated + self.sublimed + self.desorbed + self.residual_bound
    }

    pub fn relative_error(&self) -> f64 {
        (self.accounted() - self.initial) / self.initial
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleResult {
    pub freezing: FreezingTrajectory,
    pub primary: PrimaryTrajectory,
    pub heating: Option<SecondaryTrajectory>,
    pub secondary: SecondaryTrajectory,
    pub times: CycleTimes,
    pub samples: Vec<CycleSample>,
    pub water: WaterBalance,
}

pub fn run_full_cycle(params: &ParameterSet) -> Result<CycleResult, PipelineError> {
    params.validate()?;
    let freezing = params.freezing_model().run()?;
    let ft = freezing.times;
    let (primary_start, start_temperature) = match params.pipeline.handoff {
        Handoff::EndOfFreezing => (ft.t_f5, freezing.final_state().temperature),
        Handoff::EndOfSolidification => (ft.t_f4, freezing.temperature_at(ft.t_f4)),
    };
    let n = params.pipeline.grid_points;
    let dp = params.primary_params();
    let primary = run_primary(
        &vec![start_temperature; n],
        primary_start,
        &dp,
        None,
        &params.primary_options(),
        &params.solver,
    )?;
    let sp = params.secondary_params();
    let c0 = params.initial_concentration();
    let heating = if params.primary.extra_heating > 0.0 {
        Some(
            run_heating(
                primary.final_profile(),
                &c0,
                primary.t_end,
                params.primary.extra_heating,
                &sp,
                &params.solver,
            )
            .map_err(PipelineError::Heating)?,
        )
    } else {
        None
    };
    let (t_d1, handoff_profile) = match &heating {
        Some(h) => (h.t_end, h.temperature.last().expect("non-empty").clone()),
        None => (primary.t_end, primary.final_profile().to_vec()),
    };
    let secondary = run_secondary(
        &handoff_profile,
        &c0,
        t_d1,
        &sp,
        params.secondary.horizon,
        &params.solver,
    )
    .map_err(PipelineError::Secondary)?;
    let times = CycleTimes {
        t_f1: ft.t_f1,
        t_f2: ft.t_f2,
        t_f3: ft.t_f3,
        t_f4: ft.t_f4,
        t_f5: ft.t_f5,
        primary_start,
        sublimation_end: primary.t_end,
        t_d1,
        t_d2: secondary.t_end,
    };
    let water = water_balance(params, &freezing, &primary, &secondary);
    let samples = observables(params, &freezing, &primary, heating.as_ref(), &secondary, primary_start);
    Ok(CycleResult {
        freezing,
        primary,
        heating,
        secondary,
        times,
        samples,
        water,
    })
}

fn water_balance(
    params: &ParameterSet,
    freezing: &FreezingTrajectory,
    primary: &PrimaryTrajectory,
    secondary: &SecondaryTrajectory,
) -> WaterBalance {
    let initial = params.freezing_model().initial_water();
    let at_solidification = crate::interp_linear(&freezing.t, &freezing.water, freezing.times.t_f3)
        + crate::interp_linear(&freezing.t, &freezing.ice, freezing.times.t_f3);
    let area = params.primary_params().area();
    let sublimed = area
        * primary
            .t
            .windows(2)
            .zip(primary.flux.windows(2))
            .map(|(t, f)| 0.5 * (t[1] - t[0]) * (f[0] + f[1]))
            .sum::<f64>();
    let sp = params.secondary_params();
    let solid = sp.kinetics.rho_dried * area * sp.height;
    let avg = secondary.average_concentration();
    let (first, last) = (avg[0], avg[avg.len() - 1]);
    WaterBalance {
        initial,
        evaporated: initial - at_solidification,
        sublimed,
        desorbed: solid * (first - last),
        residual_bound: solid * last,
    }
}

fn observables(
    params: &ParameterSet,
    freezing: &FreezingTrajectory,
    primary: &PrimaryTrajectory,
    heating: Option<&SecondaryTrajectory>,
    secondary: &SecondaryTrajectory,
    primary_start: f64,
) -> Vec<CycleSample> {
    let proto = &params.freezing;
    let t_f2 = freezing.times.t_f2;
    let mut out = Vec::new();
    for i in 0..freezing.t.len() {
        let t = freezing.t[i];
        if t > primary_start {
            break;
        }
        let stage = freezing.stage[i];
        let pressure = match (&proto.visf, stage) {
            (Some(v), Stage::Visf) => v.total_pressure,
            _ => proto.total_pressure,
        };
        let gas = if t < t_f2 {
            proto.before_nucleation.gas.value(t)
        } else {
            proto.after_nucleation.gas.value(t - t_f2)
        };
        out.push(CycleSample {
            t,
            stage: stage.label(),
            product_temperature: freezing.temperature[i],
            ice_mass: freezing.ice[i],
            bound_water: None,
            pressure,
            heat_source_temperature: gas,
        });
    }
    let ice0 = crate::interp_linear(&freezing.t, &freezing.ice, primary_start);
    let height = params.primary_params().height;
    let avg = primary.average_temperature();
    for i in 0..primary.t.len() {
        let t = primary.t[i];
        out.push(CycleSample {
            t,
            stage: "primary",
            product_temperature: avg[i],
            ice_mass: ice0 * (1.0 - primary.front[i] / height).max(0.0),
            bound_water: None,
            pressure: primary.chamber_pressure[i],
            heat_source_temperature: params.primary.shelf.value(t - primary_start),
        });
    }
    let pressure = params.primary.chamber_vapor_pressure;
    if let Some(h) = heating {
        let avg_t = h.average_temperature();
        let avg_c = h.average_concentration();
        for i in 0..h.t.len() {
            out.push(CycleSample {
                t: h.t[i],
                stage: "heating",
                product_temperature: avg_t[i],
                ice_mass: 0.0,
                bound_water: Some(avg_c[i]),
                pressure,
                heat_source_temperature: params.secondary.shelf.value(h.t[i] - h.t_start),
            });
        }
    }
    let avg_t = secondary.average_temperature();
    let avg_c = secondary.average_concentration();
    for i in 0..secondary.t.len() {
        let t = secondary.t[i];
        out.push(CycleSample {
            t,
            stage: "secondary",
            product_temperature: avg_t[i],
            ice_mass: 0.0,
            bound_water: Some(avg_c[i]),
            pressure,
            heat_source_temperature: params.secondary.shelf.value(t - secondary.t_start),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::freezing::NucleationMode;

    #[test]
    fn default_cycle_chains_consistently() {
        let ps = ParameterSet::default();
        let r = run_full_cycle(&ps).unwrap();
        assert!(r.times.is_monotone(), "{:?}", r.times);
        assert_eq!(r.primary.t_start, r.times.t_f5);
        assert_eq!(r.secondary.t_start, r.times.t_d1);
        let end = r.freezing.final_state().temperature;
        assert!(r.primary.profiles[0].iter().all(|&t| t == end));
        assert_eq!(r.secondary.temperature[0], r.primary.final_profile());
        assert!(*r.secondary.average_concentration().last().unwrap() <= 0.01 + 1e-9);
        let [a, b, c] = r.times.residence();
        assert!(a > 0.0 && b > 0.0 && c > 0.0);
        assert!(r.samples.windows(2).all(|w| w[0].t <= w[1].t));
        let last_primary = r.samples.iter().rev().find(|s| s.stage == "primary").unwrap();
        let ice0 = r.freezing.final_state().ice;
        assert!(last_primary.ice_mass <= ice0 * 1.01 * ps.primary.front_guard);
    }

    #[test]
    fn literal_handoff_starts_at_end_of_solidification() {
        let mut ps = ParameterSet::default();
        ps.pipeline.handoff = Handoff::EndOfSolidification;
        ps.pipeline.grid_points = 21;
        let r = run_full_cycle(&ps).unwrap();
        assert_eq!(r.primary.t_start, r.times.t_f4);
        assert!(r.times.is_monotone());
    }

    #[test]
    fn extra_heating_delays_secondary() {
        let mut ps = ParameterSet::default();
        ps.pipeline.grid_points = 21;
        ps.primary.extra_heating = 1800.0;
        let r = run_full_cycle(&ps).unwrap();
        let h = r.heating.as_ref().unwrap();
        assert_eq!(h.t_start, r.times.sublimation_end);
        assert!((r.times.t_d1 - r.times.sublimation_end - 1800.0).abs() < 1e-6);
        assert_eq!(&r.secondary.temperature[0], h.temperature.last().unwrap());
    }

    #[test]
    fn stochastic_cycle_is_reproducible() {
        let mut ps = ParameterSet::default();
        ps.pipeline.grid_points = 21;
        ps.freezing.visf = None;
        ps.freezing.nucleation = NucleationMode::Stochastic {
            rate_constant: 1e-5,
            exponent: 12.0,
            seed: 7,
            sampling_interval: 0.1,
        };
        let a = run_full_cycle(&ps).unwrap();
        let b = run_full_cycle(&ps).unwrap();
        assert_eq!(a.times, b.times);
        assert!(a.times.is_monotone());
    }

    #[test]
    fn stage_errors_are_tagged() {
        let mut ps = ParameterSet::default();
        ps.secondary.horizon = 1.0;
        let e = run_full_cycle(&ps).unwrap_err();
        assert_eq!(e.stage(), "secondary");
    }
}
