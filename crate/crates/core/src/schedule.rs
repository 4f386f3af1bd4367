//! Time-dependent operating set points (shelf, gas, wall temperatures and
//! pressures), evaluated on a stage-local clock.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule table is empty")]
    Empty,
    #[error("schedule times must be non-decreasing (at index {0})")]
    Unordered(usize),
    #[error("schedule value is not finite")]
    NonFinite,
    #[error("ramp rate must be non-zero when start and end differ")]
    ZeroRate,
}

/// A set point that is constant, piecewise linear through tabulated
/// `[time_s, value]` points (held constant outside the table, with repeated
/// times giving a step), or a linear ramp followed by a hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Constant(f64),
    Table {
        points: Vec<[f64; 2]>,
    },
    Ramp {
        start: f64,
        end: f64,
        rate_per_min: f64,
        #[serde(default)]
        delay_s: f64,
    },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Constant(0.0)
    }
}

impl From<f64> for Schedule {
    fn from(v: f64) -> Self {
        Schedule::Constant(v)
    }
}

impl Schedule {
    pub fn ramp(start: f64, end: f64, rate_per_min: f64) -> Self {
        Schedule::Ramp {
            start,
            end,
            rate_per_min,
            delay_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        match self {
            Schedule::Constant(v) => {
                if !v.is_finite() {
                    return Err(ScheduleError::NonFinite);
                }
            }
            Schedule::Table { points } => {
                if points.is_empty() {
                    return Err(ScheduleError::Empty);
                }
                for (i, p) in points.iter().enumerate() {
                    if !(p[0].is_finite() && p[1].is_finite()) {
                        return Err(ScheduleError::NonFinite);
                    }
                    if i > 0 && p[0] < points[i - 1][0] {
                        return Err(ScheduleError::Unordered(i));
                    }
                }
            }
            Schedule::Ramp {
                start,
                end,
                rate_per_min,
                delay_s,
            } => {
                if ![start, end, rate_per_min, delay_s].iter().all(|v| v.is_finite()) {
                    return Err(ScheduleError::NonFinite);
                }
                if start != end && *rate_per_min == 0.0 {
                    return Err(ScheduleError::ZeroRate);
                }
            }
        }
        Ok(())
    }

    /// Value at stage time `t`; right-continuous at steps.
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::Table { points } => {
                let n = points.len();
                if t < points[0][0] {
                    return points[0][1];
                }
                if t >= points[n - 1][0] {
                    return points[n - 1][1];
                }
                let k = points.partition_point(|p| p[0] <= t);
                let (a, b) = (points[k - 1], points[k]);
                let span = b[0] - a[0];
                if span <= 0.0 {
                    return b[1];
                }
                a[1] + (b[1] - a[1]) * (t - a[0]) / span
            }
            Schedule::Ramp {
                start,
                end,
                rate_per_min,
                delay_s,
            } => {
                if t <= *delay_s || start == end {
                    return if t <= *delay_s { *start } else { *end };
                }
                let rate = rate_per_min.abs() / 60.0 * (end - start).signum();
                let v = start + rate * (t - delay_s);
                if (end - start) * (v - end) >= 0.0 {
                    *end
                } else {
                    v
                }
            }
        }
    }

    /// Times where the schedule has kinks or steps.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            Schedule::Constant(_) => Vec::new(),
            Schedule::Table { points } => points.iter().map(|p| p[0]).collect(),
            Schedule::Ramp {
                start,
                end,
                rate_per_min,
                delay_s,
            } => {
                if start == end {
                    return Vec::new();
                }
                let dur = (end - start).abs() / (rate_per_min.abs() / 60.0);
                vec![*delay_s, delay_s + dur]
            }
        }
    }

    /// Bounds of the values the schedule can take.
    pub fn range(&self) -> (f64, f64) {
        match self {
            Schedule::Constant(v) => (*v, *v),
            Schedule::Table { points } => points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, p| {
                (acc.0.min(p[1]), acc.1.max(p[1]))
            }),
            Schedule::Ramp { start, end, .. } => (start.min(*end), start.max(*end)),
        }
    }

    /// Same schedule seen from a clock that starts `offset` seconds later.
    pub fn shifted(&self, offset: f64) -> Schedule {
        match self {
            Schedule::Constant(v) => Schedule::Constant(*v),
            Schedule::Table { points } => Schedule::Table {
                points: points.iter().map(|p| [p[0] - offset, p[1]]).collect(),
            },
            Schedule::Ramp {
                start,
                end,
                rate_per_min,
                delay_s,
            } => Schedule::Ramp {
                start: *start,
                end: *end,
                rate_per_min: *rate_per_min,
                delay_s: delay_s - offset,
            },
        }
    }
}

pub(crate) fn merged_breakpoints<'a>(schedules: impl IntoIterator<Item = &'a Schedule>) -> Vec<f64> {
    let mut out: Vec<f64> = schedules.into_iter().flat_map(|s| s.breakpoints()).collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}
