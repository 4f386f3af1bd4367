use super::{
    error_norm, tolerance_scale, EventSpec, IntegratorConfig, OdeSystem, Recorder, Solution, SolverError, Stats,
};

// Bogacki-Shampine 3(2), first-same-as-last.
const A21: f64 = 0.5;
const A32: f64 = 0.75;
const B: [f64; 3] = [2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0];
const B_HAT: [f64; 4] = [7.0 / 24.0, 0.25, 1.0 / 3.0, 0.125];

pub(super) fn run<S: OdeSystem + ?Sized>(
    system: &S,
    y0: &[f64],
    (t0, t_end): (f64, f64),
    config: &IntegratorConfig,
    events: &[EventSpec<'_>],
) -> Result<Solution, SolverError> {
    let n = system.dim();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    system.rhs(t, &y, &mut k1);
    if k1.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteRhs { t });
    }
    let mut rec = Recorder::new(t0, &y, &k1, events, config.event_tolerance);
    let mut stats = Stats {
        rhs_evals: 1,
        ..Stats::default()
    };
    if t_end == t0 {
        rec.solution.stats = stats;
        return Ok(rec.solution);
    }
    let mut breakpoints: Vec<f64> = system
        .breakpoints()
        .into_iter()
        .filter(|&b| b > t0 && b < t_end)
        .collect();
    breakpoints.sort_by(f64::total_cmp);
    let mut next_bp = 0usize;

    let mut scale = vec![0.0; n];
    tolerance_scale(system, config, &y, &y, &mut scale);
    let mut h = config.initial_step.unwrap_or_else(|| {
        let d0 = error_norm(&y, &scale);
        let d1 = error_norm(&k1, &scale);
        if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        }
    });
    let (mut k2, mut k3, mut k4) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut y1 = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut rejected_this_step = false;

    loop {
        if stats.steps + stats.rejected >= config.max_steps {
            return Err(SolverError::MaxSteps {
                t,
                max_steps: config.max_steps,
            });
        }
        while next_bp < breakpoints.len() && breakpoints[next_bp] <= t {
            next_bp += 1;
        }
        let target = breakpoints.get(next_bp).copied().unwrap_or(t_end);
        h = h.min(config.max_step);
        let remaining = target - t;
        let mut lands = false;
        if h >= remaining * (1.0 - 1e-12) {
            h = remaining;
            lands = true;
        }
        if h < 16.0 * f64::EPSILON * t.abs().max(1.0) {
            return Err(SolverError::StepSizeUnderflow { t, h });
        }

        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        system.rhs(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + h * A32 * k2[i];
        }
        system.rhs(t + 0.75 * h, &tmp, &mut k3);
        for i in 0..n {
            y1[i] = y[i] + h * (B[0] * k1[i] + B[1] * k2[i] + B[2] * k3[i]);
        }
        let t1 = if lands { target } else { t + h };
        let t_eval = if lands && target < t_end { t1.next_down() } else { t1 };
        system.rhs(t_eval, &y1, &mut k4);
        stats.rhs_evals += 3;
        for i in 0..n {
            let hat = B_HAT[0] * k1[i] + B_HAT[1] * k2[i] + B_HAT[2] * k3[i] + B_HAT[3] * k4[i];
            let high = B[0] * k1[i] + B[1] * k2[i] + B[2] * k3[i];
            err[i] = h * (high - hat);
        }
        tolerance_scale(system, config, &y, &y1, &mut scale);
        let e = error_norm(&err, &scale);
        let finite = k4.iter().all(|v| v.is_finite()) && e.is_finite();
        if !finite || e > 1.0 || !system.admissible(&y1) {
            stats.rejected += 1;
            rejected_this_step = true;
            h *= if finite && e > 1.0 {
                (0.9 * e.powf(-1.0 / 3.0)).max(0.2)
            } else {
                0.25
            };
            continue;
        }
        stats.steps += 1;
        if rec.accept(t1, &y1, &k4) {
            break;
        }
        t = t1;
        std::mem::swap(&mut y, &mut y1);
        if lands && t < t_end {
            system.rhs(t, &y, &mut k1);
            stats.rhs_evals += 1;
        } else {
            std::mem::swap(&mut k1, &mut k4);
        }
        if t >= t_end {
            break;
        }
        let mut fac = if e == 0.0 {
            5.0
        } else {
            (0.9 * e.powf(-1.0 / 3.0)).clamp(0.2, 5.0)
        };
        if rejected_this_step {
            fac = fac.min(1.0);
        }
        h *= fac;
        rejected_this_step = false;
    }
    rec.solution.stats = stats;
    Ok(rec.solution)
}
