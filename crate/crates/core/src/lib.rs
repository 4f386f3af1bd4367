//! Mechanistic simulation of continuous freeze drying for suspended vials.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod chamber;
pub mod drying_primary;
pub mod drying_secondary;
pub mod freezing;
pub mod params;
pub mod pipeline;
pub mod schedule;
pub mod solver;
pub mod thermo;

pub use params::ParameterSet;
pub use pipeline::{run_full_cycle, CycleResult};

/// Piecewise-linear interpolation through `(xs, ys)`, held constant outside
/// the sampled range. `xs` must be non-decreasing.
pub fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[k - 1], xs[k]);
    if x1 == x0 {
        return ys[k];
    }
    ys[k - 1] + (ys[k] - ys[k - 1]) * (x - x0) / (x1 - x0)
}
