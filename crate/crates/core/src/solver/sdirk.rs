use nalgebra::{DMatrix, DVector};

use super::jacobian::FdJacobian;
use super::{error_norm, tolerance_scale, EventSpec, IntegratorConfig, OdeSystem, Recorder, Solution, SolverError};

/// Root of `6g^3 - 18g^2 + 9g - 1` in (1/6, 1/2): makes the three-stage
/// scheme L-stable and third order.
pub(crate) const GAMMA: f64 = 0.435_866_521_508_458_999_416_019_451_193_556_85;

pub(crate) struct Tableau {
    pub c: [f64; 3],
    pub a: [[f64; 3]; 3],
    pub b_hat: [f64; 3],
}

pub(crate) fn tableau() -> Tableau {
    let g = GAMMA;
    let b1 = -(6.0 * g * g - 16.0 * g + 1.0) / 4.0;
    let b2 = (6.0 * g * g - 20.0 * g + 5.0) / 4.0;
    let bh2 = (1.0 - 2.0 * g) / (1.0 - g);
    Tableau {
        c: [g, 0.5 * (1.0 + g), 1.0],
        a: [[g, 0.0, 0.0], [0.5 * (1.0 - g), g, 0.0], [b1, b2, g]],
        b_hat: [1.0 - bh2, bh2, 0.0],
    }
}

const MAX_NEWTON: usize = 10;
const JACOBIAN_MAX_AGE: usize = 20;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;
const SAFETY: f64 = 0.9;

enum StageFailure {
    Diverged,
    NonFinite,
}

struct Workspace {
    n: usize,
    k: [Vec<f64>; 3],
    base: Vec<f64>,
    stage: Vec<f64>,
    fy: Vec<f64>,
    scale: Vec<f64>,
}

pub(super) fn run<S: OdeSystem + ?Sized>(
    system: &S,
    y0: &[f64],
    (t0, t_end): (f64, f64),
    config: &IntegratorConfig,
    events: &[EventSpec<'_>],
) -> Result<Solution, SolverError> {
    let n = system.dim();
    let tab = tableau();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut f0 = vec![0.0; n];
    system.rhs(t, &y, &mut f0);
    if f0.iter().any(|v| !v.is_finite()) {
        return Err(SolverError::NonFiniteRhs { t });
    }
    let mut rec = Recorder::new(t0, &y, &f0, events, config.event_tolerance);
    let mut rhs_evals = 1usize;
    if t_end == t0 {
        rec.solution.stats.rhs_evals = rhs_evals;
        return Ok(rec.solution);
    }

    let mut breakpoints: Vec<f64> = system
        .breakpoints()
        .into_iter()
        .filter(|&b| b > t0 && b < t_end)
        .collect();
    breakpoints.sort_by(f64::total_cmp);
    breakpoints.dedup();
    let mut next_bp = 0usize;

    let mut jac = FdJacobian::new(&system.sparsity(), n);
    let mut have_jac = false;
    let mut jac_fresh = false;
    let mut jac_age = 0usize;
    let mut lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> = None;
    let mut lu_h = f64::NAN;

    let mut ws = Workspace {
        n,
        k: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        base: vec![0.0; n],
        stage: vec![0.0; n],
        fy: vec![0.0; n],
        scale: vec![0.0; n],
    };
    let magnitude: Vec<f64> = (0..n).map(|i| system.atol_scale(i)).collect();
    let mut scale_y = vec![0.0; n];
    tolerance_scale(system, config, &y, &y, &mut scale_y);

    let mut h = match config.initial_step {
        Some(h) => h,
        None => initial_step(&y, &f0, &scale_y),
    };
    h = h.min(config.max_step).min(t_end - t0);

    let mut stats = super::Stats::default();
    let mut newton_failures = 0usize;
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
        let target = if next_bp < breakpoints.len() {
            breakpoints[next_bp]
        } else {
            t_end
        };
        h = h.min(config.max_step);
        let remaining = target - t;
        let mut lands = false;
        if h >= remaining * (1.0 - 1e-12) {
            h = remaining;
            lands = true;
        } else if h > 0.5 * remaining && h < remaining {
            h = 0.5 * remaining;
        }
        let h_min = 16.0 * f64::EPSILON * t.abs().max(1.0);
        if h < h_min {
            return Err(SolverError::StepSizeUnderflow { t, h });
        }

        if !have_jac || jac_age >= JACOBIAN_MAX_AGE {
            // The carried-over derivative is a stage value with Newton error in
            // it; differencing against it would swamp small perturbations.
            system.rhs(t, &y, &mut f0);
            rhs_evals += 1;
            rhs_evals += jac.update(system, t, &y, &f0, &magnitude);
            stats.jacobian_evals += 1;
            have_jac = true;
            jac_fresh = true;
            jac_age = 0;
            lu = None;
        }
        if lu.is_none() || lu_h != h {
            let m = DMatrix::<f64>::identity(n, n) - &jac.matrix * (h * GAMMA);
            lu = Some(m.lu());
            lu_h = h;
            stats.factorizations += 1;
        }
        let lu_ref = lu.as_ref().expect("factorization present");

        tolerance_scale(system, config, &y, &y, &mut scale_y);
        // Stages never see the far side of a breakpoint.
        let t_cap = if lands && target < t_end {
            target.next_down()
        } else {
            f64::INFINITY
        };
        let stages = solve_stages(
            system,
            &tab,
            t,
            h,
            t_cap,
            &y,
            &f0,
            lu_ref,
            &scale_y,
            &mut ws,
            &mut rhs_evals,
        );
        if let Err(fail) = stages {
            stats.rejected += 1;
            rejected_this_step = true;
            if !jac_fresh {
                have_jac = false;
                continue;
            }
            newton_failures += 1;
            if newton_failures > 25 {
                return Err(SolverError::ConvergenceFailure { t, state: y });
            }
            h *= match fail {
                StageFailure::Diverged => 0.25,
                StageFailure::NonFinite => 0.1,
            };
            continue;
        }
        newton_failures = 0;

        // Stiffly accurate: the new state is the last stage value.
        let y1: Vec<f64> = ws.stage.clone();
        let mut err = DVector::<f64>::zeros(n);
        let db = [
            tab.a[2][0] - tab.b_hat[0],
            tab.a[2][1] - tab.b_hat[1],
            tab.a[2][2] - tab.b_hat[2],
        ];
        for i in 0..n {
            err[i] = h * (db[0] * ws.k[0][i] + db[1] * ws.k[1][i] + db[2] * ws.k[2][i]);
        }
        let filtered = lu_ref.solve(&err).unwrap_or(err);
        tolerance_scale(system, config, &y, &y1, &mut ws.scale);
        let err_norm = error_norm(filtered.as_slice(), &ws.scale);

        let ok = err_norm.is_finite() && err_norm <= 1.0 && system.admissible(&y1);
        if !ok {
            stats.rejected += 1;
            let fac = if err_norm.is_finite() && err_norm > 1.0 {
                (SAFETY * err_norm.powf(-1.0 / 3.0)).max(FAC_MIN)
            } else {
                0.5
            };
            h *= fac;
            rejected_this_step = true;
            if !jac_fresh && err_norm > 10.0 {
                have_jac = false;
            }
            continue;
        }

        let t1 = if lands { target } else { t + h };
        let f1 = ws.k[2].clone();
        stats.steps += 1;
        if rec.accept(t1, &y1, &f1) {
            break;
        }
        t = t1;
        y = y1;
        if lands && t < t_end {
            // Right-hand side may jump here; restart from a fresh derivative.
            system.rhs(t, &y, &mut f0);
            rhs_evals += 1;
            have_jac = false;
        } else {
            f0 = f1;
        }
        if t >= t_end {
            break;
        }

        let mut fac = if err_norm == 0.0 {
            FAC_MAX
        } else {
            (SAFETY * err_norm.powf(-1.0 / 3.0)).clamp(FAC_MIN, FAC_MAX)
        };
        if rejected_this_step {
            fac = fac.min(1.0);
        }
        if (1.0..1.2).contains(&fac) {
            fac = 1.0;
        }
        h *= fac;
        rejected_this_step = false;
        jac_age += 1;
        jac_fresh = false;
    }
    stats.rhs_evals = rhs_evals;
    rec.solution.stats = stats;
    Ok(rec.solution)
}

fn initial_step(y: &[f64], f: &[f64], scale: &[f64]) -> f64 {
    let d0 = error_norm(y, scale);
    let d1 = error_norm(f, scale);
    if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
}

#[allow(clippy::too_many_arguments)]
fn solve_stages<S: OdeSystem + ?Sized>(
    system: &S,
    tab: &Tableau,
    t: f64,
    h: f64,
    t_cap: f64,
    y: &[f64],
    f0: &[f64],
    lu: &nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    scale: &[f64],
    ws: &mut Workspace,
    rhs_evals: &mut usize,
) -> Result<(), StageFailure> {
    let n = ws.n;
    let hg = h * GAMMA;
    let mut g = DVector::<f64>::zeros(n);
    for i in 0..3 {
        for r in 0..n {
            let mut acc = y[r];
            for j in 0..i {
                acc += h * tab.a[i][j] * ws.k[j][r];
            }
            ws.base[r] = acc;
            let guess = if i == 0 { f0[r] } else { ws.k[i - 1][r] };
            ws.stage[r] = acc + hg * guess;
        }
        let ti = (t + tab.c[i] * h).min(t_cap);
        let mut prev_norm = f64::INFINITY;
        let mut converged = false;
        for iter in 0..MAX_NEWTON {
            system.rhs(ti, &ws.stage, &mut ws.fy);
            *rhs_evals += 1;
            if ws.fy.iter().any(|v| !v.is_finite()) {
                return Err(StageFailure::NonFinite);
            }
            for r in 0..n {
                g[r] = -(ws.stage[r] - ws.base[r] - hg * ws.fy[r]);
            }
            let delta = match lu.solve(&g) {
                Some(d) => d,
                None => return Err(StageFailure::Diverged),
            };
            for r in 0..n {
                ws.stage[r] += delta[r];
            }
            let norm = error_norm(delta.as_slice(), scale);
            if !norm.is_finite() {
                return Err(StageFailure::NonFinite);
            }
            if norm <= 1e-3 {
                converged = true;
                break;
            }
            if iter > 0 {
                let theta = norm / prev_norm;
                if theta >= 0.9 {
                    return Err(StageFailure::Diverged);
                }
                if theta / (1.0 - theta) * norm <= 0.03 {
                    converged = true;
                    break;
                }
            }
            prev_norm = norm;
        }
        if !converged {
            return Err(StageFailure::Diverged);
        }
        for r in 0..n {
            ws.k[i][r] = (ws.stage[r] - ws.base[r]) / hg;
        }
    }
    Ok(())
}
