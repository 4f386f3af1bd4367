//! Adaptive time integration for the lumped and method-of-lines models.
//!
//! The default method is a three-stage, L-stable, stiffly accurate singly
//! diagonally implicit Runge-Kutta scheme of order 3 with an embedded order-2
//! error estimate. Stage equations are solved by simplified Newton iteration
//! using a finite-difference Jacobian whose columns are grouped according to
//! the sparsity the system declares. Every accepted step carries a cubic
//! Hermite interpolant, which is what event location and post-processing use.
//!
//! An explicit Bogacki-Shampine 3(2) pair is available as a reference method
//! for non-stiff problems and for comparisons in tests.

mod dense;
mod events;
mod explicit;
mod jacobian;
mod sdirk;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dense::DenseSegment;
pub use events::{locate_event, Direction, EventRecord, EventSpec};
pub use jacobian::{column_groups, Sparsity};

/// A first-order system `y' = f(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, y: &[f64], dydt: &mut [f64]);

    /// Structural dependence of `f` on `y`, used to group Jacobian columns.
    fn sparsity(&self) -> Sparsity {
        Sparsity::Dense
    }

    /// Multiplier applied to the absolute tolerance for component `i`, so
    /// that mixed-unit states (kelvin next to kilograms) share one config.
    fn atol_scale(&self, _i: usize) -> f64 {
        1.0
    }

    /// Steps that end in an inadmissible state are rejected and retried
    /// with a smaller step.
    fn admissible(&self, _y: &[f64]) -> bool {
        true
    }

    /// Times at which the right-hand side has kinks or jumps. The
    /// integrator lands exactly on these instead of stepping across them.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Stiff implicit SDIRK3 with Newton stage solves.
    Implicit,
    /// Explicit Bogacki-Shampine 3(2).
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Unbounded when left out.
    #[serde(rename = "max_step_s", skip_serializing_if = "is_unbounded")]
    pub max_step: f64,
    #[serde(rename = "initial_step_s")]
    pub initial_step: Option<f64>,
    pub method: Method,
    #[serde(rename = "event_tolerance_s")]
    pub event_tolerance: f64,
    pub max_steps: usize,
}

fn is_unbounded(v: &f64) -> bool {
    v.is_infinite()
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-6,
            max_step: f64::INFINITY,
            initial_step: None,
            method: Method::Implicit,
            event_tolerance: 1e-3,
            max_steps: 200_000,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(SolverError::InvalidConfig("rtol and atol must be positive".into()));
        }
        if !(self.max_step > 0.0) {
            return Err(SolverError::InvalidConfig("max_step must be positive".into()));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) {
                return Err(SolverError::InvalidConfig("initial_step must be positive".into()));
            }
        }
        if !(self.event_tolerance > 0.0) {
            return Err(SolverError::InvalidConfig("event_tolerance must be positive".into()));
        }
        Ok(())
    }

    pub fn with_rtol(mut self, rtol: f64) -> Self {
        self.rtol = rtol;
        self
    }

    pub fn with_atol(mut self, atol: f64) -> Self {
        self.atol = atol;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_max_step(mut self, max_step: f64) -> Self {
        self.max_step = max_step;
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("right-hand side is not finite at t = {t}")]
    NonFiniteRhs { t: f64 },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("implicit stage solve failed to converge at t = {t}")]
    ConvergenceFailure { t: f64, state: Vec<f64> },
    #[error("maximum number of steps ({max_steps}) reached at t = {t}")]
    MaxSteps { t: f64, max_steps: usize },
    #[error("event function does not change sign on [{t0}, {t1}]")]
    NoSignChange { t0: f64, t1: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Stats {
    pub steps: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    pub jacobian_evals: usize,
    pub factorizations: usize,
}

/// Accepted steps of an integration together with the derivative at each
/// sample, which makes the whole record a piecewise cubic dense output.
#[derive(Debug, Clone)]
pub struct Solution {
    pub t: Vec<f64>,
    pub y: Vec<Vec<f64>>,
    pub dydt: Vec<Vec<f64>>,
    pub events: Vec<EventRecord>,
    /// Index into the caller's event list of the terminal event that
    /// stopped the integration, if any.
    pub terminal_event: Option<usize>,
    pub stats: Stats,
}

impl Solution {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn t_final(&self) -> f64 {
        *self.t.last().expect("solution always holds the initial sample")
    }

    pub fn y_final(&self) -> &[f64] {
        self.y.last().expect("solution always holds the initial sample")
    }

    pub fn segment(&self, i: usize) -> DenseSegment<'_> {
        DenseSegment {
            t0: self.t[i],
            t1: self.t[i + 1],
            y0: &self.y[i],
            y1: &self.y[i + 1],
            f0: &self.dydt[i],
            f1: &self.dydt[i + 1],
        }
    }

    /// Dense-output value at `t`, clamped to the integrated interval.
    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        let n = self.t.len();
        if n == 1 || t <= self.t[0] {
            return self.y[0].clone();
        }
        if t >= self.t[n - 1] {
            return self.y[n - 1].clone();
        }
        let i = match self.t.partition_point(|&s| s <= t) {
            0 => 0,
            k => k - 1,
        };
        let i = i.min(n - 2);
        let mut out = vec![0.0; self.y[0].len()];
        self.segment(i).eval(t, &mut out);
        out
    }
}

/// Integrates `system` from `t_span.0` to `t_span.1`, stopping early at the
/// first terminal event.
pub fn integrate_adaptive<S: OdeSystem + ?Sized>(
    system: &S,
    y0: &[f64],
    t_span: (f64, f64),
    config: &IntegratorConfig,
    events: &[EventSpec<'_>],
) -> Result<Solution, SolverError> {
    config.validate()?;
    if y0.len() != system.dim() {
        return Err(SolverError::InvalidConfig(format!(
            "initial state has {} components, system has {}",
            y0.len(),
            system.dim()
        )));
    }
    if !(t_span.1 >= t_span.0) {
        return Err(SolverError::InvalidConfig(
            "integration interval must be non-decreasing".into(),
        ));
    }
    match config.method {
        Method::Implicit => sdirk::run(system, y0, t_span, config, events),
        Method::Explicit => explicit::run(system, y0, t_span, config, events),
    }
}

/// Weighted RMS norm with per-component scale `atol_i + rtol * max(|a_i|, |b_i|)`.
pub(crate) fn error_norm(err: &[f64], scale: &[f64]) -> f64 {
    let n = err.len().max(1) as f64;
    (err.iter().zip(scale).map(|(e, s)| (e / s) * (e / s)).sum::<f64>() / n).sqrt()
}

pub(crate) fn tolerance_scale<S: OdeSystem + ?Sized>(
    system: &S,
    config: &IntegratorConfig,
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
) {
    for i in 0..out.len() {
        out[i] = config.atol * system.atol_scale(i) + config.rtol * a[i].abs().max(b[i].abs());
    }
}

/// Shared bookkeeping for the step loops: recording samples, detecting
/// events on each accepted step and truncating at terminal events.
pub(crate) struct Recorder<'e, 'a> {
    pub solution: Solution,
    events: &'e [EventSpec<'a>],
    last_g: Vec<f64>,
    tol: f64,
}

impl<'e, 'a> Recorder<'e, 'a> {
    pub fn new(t0: f64, y0: &[f64], f0: &[f64], events: &'e [EventSpec<'a>], tol: f64) -> Self {
        let last_g = events.iter().map(|e| (e.function)(t0, y0)).collect();
        Self {
            solution: Solution {
                t: vec![t0],
                y: vec![y0.to_vec()],
                dydt: vec![f0.to_vec()],
                events: Vec::new(),
                terminal_event: None,
                stats: Stats::default(),
            },
            events,
            last_g,
            tol,
        }
    }

    /// Records an accepted step; returns true if a terminal event fired, in
    /// which case the final sample sits at the event time.
    pub fn accept(&mut self, t1: f64, y1: &[f64], f1: &[f64]) -> bool {
        let sol = &mut self.solution;
        sol.t.push(t1);
        sol.y.push(y1.to_vec());
        sol.dydt.push(f1.to_vec());
        if self.events.is_empty() {
            return false;
        }
        let i = sol.t.len() - 2;
        let mut first_terminal: Option<(usize, f64)> = None;
        let mut fired = Vec::new();
        for (k, ev) in self.events.iter().enumerate() {
            let g0 = self.last_g[k];
            let g1 = (ev.function)(t1, y1);
            self.last_g[k] = g1;
            if !ev.direction.crossed(g0, g1) {
                continue;
            }
            let seg = sol.segment(i);
            let te = match locate_event(&seg, ev, self.tol) {
                Ok(te) => te,
                Err(_) => t1,
            };
            fired.push((k, te));
            if ev.terminal && first_terminal.is_none_or(|(_, t)| te < t) {
                first_terminal = Some((k, te));
            }
        }
        let cutoff = first_terminal.map(|(_, t)| t).unwrap_or(f64::INFINITY);
        fired.sort_by(|a, b| a.1.total_cmp(&b.1));
        for (k, te) in fired {
            if te <= cutoff {
                let y = self.solution.interpolate(te);
                self.solution.events.push(EventRecord { index: k, t: te, y });
            }
        }
        if let Some((k, te)) = first_terminal {
            let sol = &mut self.solution;
            let n = sol.t.len();
            if te < sol.t[n - 1] {
                let ye = {
                    let mut out = vec![0.0; y1.len()];
                    sol.segment(n - 2).eval(te, &mut out);
                    out
                };
                // Slope at the event point from the interpolant keeps the
                // truncated record a consistent Hermite spline.
                let fe = sol.segment(n - 2).derivative(te);
                sol.t[n - 1] = te;
                sol.y[n - 1] = ye;
                sol.dydt[n - 1] = fe;
            }
            sol.terminal_event = Some(k);
            return true;
        }
        false
    }
}
