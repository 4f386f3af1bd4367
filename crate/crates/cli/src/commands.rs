//! One function per simulation subcommand. Each turns a scenario into
//! output tables, a JSON summary and a few headline numbers.

use std::collections::BTreeMap;

use lyosim::analysis::{
    biot_number, cylinder_eigenvalues, cylinder_transient_theta, diffusion_time, effective_diffusivity, lumped_theta,
    time_scales,
};
use lyosim::chamber::run_primary_with_condenser;
use lyosim::drying_primary::{run_primary, PrimaryTrajectory};
use lyosim::drying_secondary::{run_secondary, SecondaryTrajectory};
use lyosim::freezing::{FreezingTrajectory, Stage};
use lyosim::{run_full_cycle, ParameterSet};
use serde_json::{json, Value};
use thiserror::Error;

use crate::output::Table;
use crate::scenario::{Scenario, StageName};

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct SimulationError {
    pub stage: &'static str,
    pub message: String,
}

fn failed(stage: &'static str) -> impl Fn(&dyn std::fmt::Display) -> SimulationError {
    move |e| SimulationError {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Freeze,
    Primary,
    Secondary,
    Cycle,
    Failure,
    Analyze,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Freeze => "freeze",
            Command::Primary => "primary",
            Command::Secondary => "secondary",
            Command::Cycle => "cycle",
            Command::Failure => "failure",
            Command::Analyze => "analyze",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub tables: Vec<Table>,
    pub summary: Value,
    /// Scalar results, one column each in sweep tables.
    pub headline: BTreeMap<String, f64>,
}

pub fn run(command: Command, scenario: &Scenario) -> Result<RunOutput, SimulationError> {
    match command {
        Command::Freeze => freeze(&scenario.params),
        Command::Primary => primary(&scenario.params),
        Command::Secondary => secondary(&scenario.params),
        Command::Cycle => cycle(scenario),
        Command::Failure => failure(&scenario.params),
        Command::Analyze => analyze(scenario),
    }
}

fn headline(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

fn freezing_table(ps: &ParameterSet, f: &FreezingTrajectory) -> Table {
    let proto = &ps.freezing;
    let t_f2 = f.times.t_f2;
    let gas = f.t.iter().map(|&t| {
        if t < t_f2 {
            proto.before_nucleation.gas.value(t)
        } else {
            proto.after_nucleation.gas.value(t - t_f2)
        }
    });
    let pressure = f.stage.iter().map(|&s| match (&proto.visf, s) {
        (Some(v), Stage::Visf) => v.total_pressure,
        _ => proto.total_pressure,
    });
    Table::new("freezing")
        .column("t_s", f.t.iter().copied())
        .column("stage", f.stage.iter().map(|s| s.label()))
        .column("T_avg_K", f.temperature.iter().copied())
        .column("m_w_kg", f.water.iter().copied())
        .column("m_i_kg", f.ice.iter().copied())
        .column("p_total_Pa", pressure)
        .column("T_gas_K", gas.collect::<Vec<_>>())
}

fn primary_table(name: &str, ps: &ParameterSet, p: &PrimaryTrajectory, ice0: f64) -> Table {
    let height = ps.primary_params().height;
    Table::new(name)
        .column("t_s", p.t.iter().copied())
        .column("T_avg_K", p.average_temperature())
        .column("T_bottom_K", p.bottom_temperature())
        .column("T_top_K", p.top_temperature())
        .column("S_m", p.front.iter().copied())
        .column("m_i_kg", p.front.iter().map(|s| ice0 * (1.0 - s / height).max(0.0)))
        .column("flux_kg_m2s", p.flux.iter().copied())
        .column("p_w_c_Pa", p.chamber_pressure.iter().copied())
        .column("T_shelf_K", p.t.iter().map(|t| ps.primary.shelf.value(t - p.t_start)))
}

fn secondary_table(name: &str, ps: &ParameterSet, s: &SecondaryTrajectory) -> Table {
    Table::new(name)
        .column("t_s", s.t.iter().copied())
        .column("T_avg_K", s.average_temperature())
        .column("T_bottom_K", s.bottom_temperature())
        .column("T_top_K", s.top_temperature())
        .column("c_w_avg_kg_kg", s.average_concentration())
        .column("T_shelf_K", s.t.iter().map(|t| ps.secondary.shelf.value(t - s.t_start)))
}

/// Ice that sublimes when the front sweeps the whole frozen layer.
fn sublimable_ice(ps: &ParameterSet) -> f64 {
    let p = ps.primary_params();
    (p.rho_frozen - p.rho_dried) * p.area() * p.height
}

fn peak(profiles: &[Vec<f64>]) -> f64 {
    profiles.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
}

fn freeze(ps: &ParameterSet) -> Result<RunOutput, SimulationError> {
    let f = ps.freezing_model().run().map_err(|e| failed("freezing")(&e))?;
    let end = f.final_state();
    let times = f.times;
    Ok(RunOutput {
        summary: json!({
            "times_s": times,
            "nucleation": f.nucleation,
            "total_water_kg": f.total_water,
            "final_target_K": f.final_target,
            "final": { "t_s": end.t, "T_K": end.temperature, "m_w_kg": end.water, "m_i_kg": end.ice },
        }),
        headline: headline(&[
            ("t_f1_s", times.t_f1),
            ("t_f2_s", times.t_f2),
            ("t_f3_s", times.t_f3),
            ("t_f4_s", times.t_f4),
            ("t_f5_s", times.t_f5),
            ("T_final_K", end.temperature),
        ]),
        tables: vec![freezing_table(ps, &f)],
    })
}

fn primary(ps: &ParameterSet) -> Result<RunOutput, SimulationError> {
    let init = vec![ps.primary.initial_temperature; ps.pipeline.grid_points];
    let p = ps.primary_params();
    let tr = run_primary(&init, 0.0, &p, None, &ps.primary_options(), &ps.solver).map_err(|e| failed("primary")(&e))?;
    let bottom = tr.bottom_temperature();
    let (t_end, peak_t) = (tr.drying_time(), peak(&tr.profiles));
    Ok(RunOutput {
        summary: json!({
            "drying_time_s": t_end,
            "drying_time_h": t_end / 3600.0,
            "peak_temperature_K": peak_t,
            "final_bottom_temperature_K": bottom[bottom.len() - 1],
            "steps": tr.t.len() - 1,
        }),
        headline: headline(&[("drying_time_s", t_end), ("peak_temperature_K", peak_t)]),
        tables: vec![primary_table("primary", ps, &tr, sublimable_ice(ps))],
    })
}

fn secondary(ps: &ParameterSet) -> Result<RunOutput, SimulationError> {
    let n = ps.pipeline.grid_points;
    let init = vec![ps.secondary.initial_temperature; n];
    let tr = run_secondary(
        &init,
        &ps.initial_concentration(),
        0.0,
        &ps.secondary_params(),
        ps.secondary.horizon,
        &ps.solver,
    )
    .map_err(|e| failed("secondary")(&e))?;
    let c = tr.average_concentration();
    let t_end = tr.drying_time();
    let peak_t = peak(&tr.temperature);
    Ok(RunOutput {
        summary: json!({
            "drying_time_s": t_end,
            "drying_time_h": t_end / 3600.0,
            "initial_average_concentration_kg_kg": c[0],
            "final_average_concentration_kg_kg": c[c.len() - 1],
            "peak_temperature_K": peak_t,
        }),
        headline: headline(&[
            ("drying_time_s", t_end),
            ("final_average_concentration_kg_kg", c[c.len() - 1]),
            ("peak_temperature_K", peak_t),
        ]),
        tables: vec![secondary_table("secondary", ps, &tr)],
    })
}

fn cycle(scenario: &Scenario) -> Result<RunOutput, SimulationError> {
    let ps = &scenario.params;
    let r = run_full_cycle(ps).map_err(|e| SimulationError {
        stage: e.stage(),
        message: e.to_string(),
    })?;
    let s = &r.samples;
    let mut tables = vec![Table::new("cycle")
        .column("t_s", s.iter().map(|x| x.t))
        .column("stage", s.iter().map(|x| x.stage))
        .column("T_avg_K", s.iter().map(|x| x.product_temperature))
        .column("m_i_kg", s.iter().map(|x| x.ice_mass))
        .column("c_w_avg_kg_kg", s.iter().map(|x| x.bound_water))
        .column("p_Pa", s.iter().map(|x| x.pressure))
        .column("T_source_K", s.iter().map(|x| x.heat_source_temperature))];
    if scenario.selects(StageName::Freezing) {
        tables.push(freezing_table(ps, &r.freezing));
    }
    if scenario.selects(StageName::Primary) {
        let ice0 = lyosim::interp_linear(&r.freezing.t, &r.freezing.ice, r.times.primary_start);
        tables.push(primary_table("primary", ps, &r.primary, ice0));
        if let Some(h) = &r.heating {
            tables.push(secondary_table("heating", ps, h));
        }
    }
    if scenario.selects(StageName::Secondary) {
        tables.push(secondary_table("secondary", ps, &r.secondary));
    }
    let t = r.times;
    let [freezing_s, primary_s, secondary_s] = t.residence();
    let c = r.secondary.average_concentration();
    Ok(RunOutput {
        summary: json!({
            "times_s": t,
            "residence_s": { "freezing": freezing_s, "primary_drying": primary_s, "secondary_drying": secondary_s },
            "water_balance_kg": r.water,
            "water_balance_relative_error": r.water.relative_error(),
            "peak_primary_temperature_K": peak(&r.primary.profiles),
            "final_average_concentration_kg_kg": c[c.len() - 1],
            "grid_points": ps.pipeline.grid_points,
        }),
        headline: headline(&[
            ("t_f1_s", t.t_f1),
            ("t_f5_s", t.t_f5),
            ("t_d1_s", t.t_d1),
            ("t_d2_s", t.t_d2),
            ("water_balance_relative_error", r.water.relative_error()),
        ]),
        tables,
    })
}

fn failure(ps: &ParameterSet) -> Result<RunOutput, SimulationError> {
    let init = vec![ps.primary.initial_temperature; ps.pipeline.grid_points];
    let p = ps.primary_params();
    let opts = ps.primary_options();
    let base = run_primary(&init, 0.0, &p, None, &opts, &ps.solver).map_err(|e| failed("primary")(&e))?;
    let fail = run_primary_with_condenser(&init, 0.0, &p, &ps.chamber, &opts, &ps.solver)
        .map_err(|e| failed("condenser")(&e))?;
    let (i_peak, &p_peak) = fail
        .chamber_pressure
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("trajectory holds the initial state");
    let saturation = ps.chamber.vapor_flow(fail.flux[i_peak], p.area()) / ps.chamber.condenser_capacity - 1.0;
    let ice0 = sublimable_ice(ps);
    let (peak_base, peak_fail) = (peak(&base.profiles), peak(&fail.profiles));
    Ok(RunOutput {
        summary: json!({
            "baseline": { "drying_time_s": base.drying_time(), "peak_temperature_K": peak_base },
            "failure": {
                "drying_time_s": fail.drying_time(),
                "peak_temperature_K": peak_fail,
                "peak_pressure_Pa": p_peak,
                "peak_pressure_time_s": fail.t[i_peak],
                "flow_over_capacity_minus_one_at_peak": saturation,
            },
            "drying_time_increase_rel": fail.drying_time() / base.drying_time() - 1.0,
        }),
        headline: headline(&[
            ("baseline_drying_time_s", base.drying_time()),
            ("failure_drying_time_s", fail.drying_time()),
            ("peak_pressure_Pa", p_peak),
            ("failure_peak_temperature_K", peak_fail),
        ]),
        tables: vec![
            primary_table("primary_baseline", ps, &base, ice0),
            primary_table("primary_failure", ps, &fail, ice0),
        ],
    })
}

fn analyze(scenario: &Scenario) -> Result<RunOutput, SimulationError> {
    let a = &scenario.analysis;
    let err = failed("analysis");
    let n = a.fourier_points;
    let fo: Vec<f64> = (0..n).map(|i| a.fourier_max * i as f64 / (n - 1) as f64).collect();
    let mut table = Table::new("theta").column("Fo", fo.iter().copied());
    let mut cases = Vec::new();
    let mut heads = Vec::new();
    for (k, case) in a.biot.iter().enumerate() {
        let bi = biot_number(case.h_w_m2k, case.length_m, case.k_w_mk);
        let series = fo
            .iter()
            .map(|&f| cylinder_transient_theta(bi, f, a.series_terms))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(&e))?;
        let lumped: Vec<f64> = fo.iter().map(|&f| lumped_theta(bi, f)).collect();
        let gap = series
            .iter()
            .zip(&lumped)
            .map(|(s, l)| (s - l).abs())
            .fold(0.0, f64::max);
        let roots = cylinder_eigenvalues(bi, 5).map_err(|e| err(&e))?;
        table = table
            .column(&format!("theta_series_{}", k + 1), series)
            .column(&format!("theta_lumped_{}", k + 1), lumped);
        cases.push(json!({
            "h_W_m2K": case.h_w_m2k, "length_m": case.length_m, "k_W_mK": case.k_w_mk,
            "biot": bi, "eigenvalues": roots, "max_abs_series_minus_lumped": gap,
        }));
        heads.push((format!("biot_{}", k + 1), bi));
    }
    let de = effective_diffusivity(&a.cake, a.temperature_k, a.molar_mass_g_mol).map_err(|e| err(&e))?;
    let kd = match a.desorption_rate_1_s {
        Some(k) => k,
        None => scenario
            .params
            .secondary_params()
            .kinetics
            .rate_constant(a.temperature_k),
    };
    let scales = time_scales(a.length_m, de, kd).map_err(|e| err(&e))?;
    let solid = a
        .solid_diffusion
        .as_ref()
        .map(|s| diffusion_time(s.length_m, s.diffusivity_m2_s));
    heads.extend([
        ("diffusion_time_s".to_string(), scales.diffusion_s),
        ("desorption_time_s".to_string(), scales.desorption_s),
    ]);
    Ok(RunOutput {
        summary: json!({
            "biot_cases": cases,
            "knudsen_diffusivity_m2_s": a.cake.knudsen_diffusivity(a.temperature_k, a.molar_mass_g_mol),
            "effective_diffusivity_m2_s": de,
            "desorption_rate_1_s": kd,
            "diffusion_time_s": scales.diffusion_s,
            "desorption_time_s": scales.desorption_s,
            "desorption_time_h": scales.desorption_s / 3600.0,
            "desorption_over_diffusion": scales.ratio(),
            "limiting": scales.limiting,
            "solid_diffusion_time_s": solid,
        }),
        headline: heads.into_iter().collect(),
        tables: vec![table],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analyze_reports_the_screening_numbers() {
        let mut s = Scenario::default();
        s.analysis.desorption_rate_1_s = Some(7.8e-5);
        let out = run(Command::Analyze, &s).unwrap();
        assert!((out.headline["biot_1"] - 0.0427).abs() < 1e-4);
        assert!((out.headline["biot_2"] - 0.3467).abs() < 1e-4);
        assert!((out.summary["desorption_time_h"].as_f64().unwrap() - 3.56).abs() < 0.01);
        assert_eq!(out.summary["limiting"], "desorption");
        assert_eq!(out.tables[0].columns.len(), 5);
    }

    #[test]
    fn simulation_failures_carry_the_stage() {
        let mut s = Scenario::default();
        s.params.secondary.horizon = 10.0;
        let e = run(Command::Secondary, &s).unwrap_err();
        assert_eq!(e.stage, "secondary");
        let e = run(Command::Cycle, &s).unwrap_err();
        assert_eq!(e.stage, "secondary");
    }

    #[test]
    fn cycle_tables_follow_stage_selection() {
        let s = Scenario {
            stages: vec![StageName::Secondary],
            ..Scenario::default()
        };
        let out = run(Command::Cycle, &s).unwrap();
        let names: Vec<&str> = out.tables.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["cycle", "secondary"]);
    }
}
