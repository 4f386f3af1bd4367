//! Transport-scale screening: Biot numbers, the analytic transient
//! conduction solution for an infinite cylinder with a convective surface,
//! effective diffusivity in the dried cake and mass-transfer time scales.

mod bessel;

pub use bessel::{j0, j1};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("eigenvalue {index} not bracketed below {limit}")]
    NoConvergence { index: usize, limit: f64 },
}

pub const DEFAULT_TERMS: usize = 20;
const TAIL_CUTOFF: f64 = 1e-12;
const SCAN_STEP: f64 = 0.05;

pub fn biot_number(h: f64, length: f64, k: f64) -> f64 {
    h * length / k
}

/// First `n` positive roots of `λ J1(λ) = Bi J0(λ)`.
pub fn cylinder_eigenvalues(biot: f64, n: usize) -> Result<Vec<f64>, AnalysisError> {
    if !(biot > 0.0 && biot.is_finite()) {
        return Err(AnalysisError::InvalidInput(format!(
            "Biot number must be positive, got {biot}"
        )));
    }
    let f = |l: f64| l * j1(l) - biot * j0(l);
    let mut roots = Vec::with_capacity(n);
    let mut a = 0.0;
    let mut fa = f(a);
    let limit = (n as f64 + 2.0) * std::f64::consts::PI + 10.0;
    while roots.len() < n {
        let b = a + SCAN_STEP;
        if b > limit {
            return Err(AnalysisError::NoConvergence {
                index: roots.len() + 1,
                limit,
            });
        }
        let fb = f(b);
        if fb == 0.0 {
            roots.push(b);
        } else if fa * fb < 0.0 {
            roots.push(bisect(&f, a, b, fa));
        }
        a = b;
        fa = fb;
    }
    Ok(roots)
}

fn bisect(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 || (b - a) < 1e-15 * m.max(1.0) {
            return m;
        }
        if fa * fm < 0.0 {
            b = m;
        } else {
            a = m;
            fa = fm;
        }
    }
    0.5 * (a + b)
}

/// Volume-averaged dimensionless temperature `(T - T_env)/(T0 - T_env)` of
/// an infinite cylinder after a step change of its surroundings.
pub fn cylinder_transient_theta(biot: f64, fourier: f64, n_terms: usize) -> Result<f64, AnalysisError> {
    if !(fourier >= 0.0) {
        return Err(AnalysisError::InvalidInput(format!(
            "Fourier number must be non-negative, got {fourier}"
        )));
    }
    if n_terms == 0 {
        return Err(AnalysisError::InvalidInput("at least one series term is needed".into()));
    }
    let roots = cylinder_eigenvalues(biot, n_terms)?;
    let mut theta = 0.0;
    for l in roots {
        let l2 = l * l;
        let term = 4.0 * biot * biot / (l2 * (l2 + biot * biot)) * (-l2 * fourier).exp();
        theta += term;
        if term < TAIL_CUTOFF {
            break;
        }
    }
    Ok(theta)
}

/// Lumped-capacitance counterpart for a cylinder (surface/volume = 2/r).
pub fn lumped_theta(biot: f64, fourier: f64) -> f64 {
    (-2.0 * biot * fourier).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PorousMedium {
    pub porosity: f64,
    pub tortuosity: f64,
    #[serde(rename = "mean_pore_radius_m")]
    pub mean_pore_radius: f64,
    #[serde(rename = "gas_diffusivity_m2_s")]
    pub gas_diffusivity: f64,
}

impl PorousMedium {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if !(self.porosity > 0.0 && self.porosity < 1.0) {
            return Err(AnalysisError::InvalidInput("porosity must lie in (0, 1)".into()));
        }
        if !(self.tortuosity >= 1.0) {
            return Err(AnalysisError::InvalidInput("tortuosity must be at least 1".into()));
        }
        if !(self.mean_pore_radius > 0.0 && self.gas_diffusivity > 0.0) {
            return Err(AnalysisError::InvalidInput(
                "pore radius and gas diffusivity must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Knudsen diffusivity (m^2/s) with the molar mass in g/mol.
    pub fn knudsen_diffusivity(&self, temperature: f64, molar_mass_g_mol: f64) -> f64 {
        97.0 * self.mean_pore_radius * (temperature / molar_mass_g_mol).sqrt()
    }
}

/// Harmonic combination of the molecular and Knudsen contributions, both
/// scaled by porosity over tortuosity.
pub fn effective_diffusivity(
    medium: &PorousMedium,
    temperature: f64,
    molar_mass_g_mol: f64,
) -> Result<f64, AnalysisError> {
    medium.validate()?;
    if !(temperature > 0.0 && molar_mass_g_mol > 0.0) {
        return Err(AnalysisError::InvalidInput(
            "temperature and molar mass must be positive".into(),
        ));
    }
    let scale = medium.porosity / medium.tortuosity;
    let molecular = scale * medium.gas_diffusivity;
    let knudsen = scale * medium.knudsen_diffusivity(temperature, molar_mass_g_mol);
    Ok(1.0 / (1.0 / molecular + 1.0 / knudsen))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Limiting {
    Diffusion,
    Desorption,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeScales {
    pub diffusion_s: f64,
    pub desorption_s: f64,
    pub limiting: Limiting,
}

impl TimeScales {
    pub fn ratio(&self) -> f64 {
        self.desorption_s / self.diffusion_s
    }
}

pub fn diffusion_time(length: f64, diffusivity: f64) -> f64 {
    length * length / diffusivity
}

pub fn time_scales(length: f64, diffusivity: f64, desorption_rate: f64) -> Result<TimeScales, AnalysisError> {
    if !(length > 0.0 && diffusivity > 0.0 && desorption_rate > 0.0) {
        return Err(AnalysisError::InvalidInput(
            "length, diffusivity and rate constant must be positive".into(),
        ));
    }
    let diffusion_s = diffusion_time(length, diffusivity);
    let desorption_s = 1.0 / desorption_rate;
    let limiting = if desorption_s >= diffusion_s {
        Limiting::Desorption
    } else {
        Limiting::Diffusion
    };
    Ok(TimeScales {
        diffusion_s,
        desorption_s,
        limiting,
    })
}
