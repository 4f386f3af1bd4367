//! Simulated-versus-reference metrics on the reference sample times.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: csv::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: no column `{column}`")]
    MissingColumn { path: PathBuf, column: String },
    #[error("no output table named `{0}`")]
    MissingTable(String),
    #[error("reference times must be strictly increasing (row {0})")]
    Unordered(usize),
    #[error(
        "simulated range [{sim_start}, {sim_end}] s and reference range [{ref_start}, {ref_end}] s do not overlap"
    )]
    NoOverlap {
        sim_start: f64,
        sim_end: f64,
        ref_start: f64,
        ref_end: f64,
    },
}

/// Digitized observable: a time column followed by one value column whose
/// header names the observable (units are part of the name, e.g. `T_bottom_K`).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSeries {
    pub observable: String,
    pub t: Vec<f64>,
    pub value: Vec<f64>,
}

impl ReferenceSeries {
    pub fn new(observable: &str, t: Vec<f64>, value: Vec<f64>) -> Result<Self, CompareError> {
        if let Some(i) = t.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(CompareError::Unordered(i + 1));
        }
        Ok(ReferenceSeries {
            observable: observable.to_string(),
            t,
            value,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CompareError> {
        let (headers, columns) = read_numeric_csv(path)?;
        if headers.len() != 2 {
            return Err(CompareError::Format {
                path: path.to_path_buf(),
                message: format!("expected two columns (time, value), found {}", headers.len()),
            });
        }
        let mut columns = columns.into_iter();
        let (t, v) = (columns.next().unwrap(), columns.next().unwrap());
        Self::new(&headers[1], t, v)
    }
}

/// Reads a CSV with a header row; non-numeric columns come back as NaN.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CompareError> {
    let read_err = |source| CompareError::Read {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(read_err)?;
    let headers: Vec<String> = r
        .headers()
        .map_err(read_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut columns = vec![Vec::new(); headers.len()];
    for record in r.records() {
        let record = record.map_err(read_err)?;
        for (col, field) in columns.iter_mut().zip(record.iter()) {
            col.push(field.trim().parse().unwrap_or(f64::NAN));
        }
    }
    Ok((headers, columns))
}

/// Pulls `t_s` and one observable out of a written trajectory CSV.
pub fn read_simulated(path: &Path, observable: &str) -> Result<(Vec<f64>, Vec<f64>), CompareError> {
    let (headers, mut columns) = read_numeric_csv(path)?;
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CompareError::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let (it, iv) = (find("t_s")?, find(observable)?);
    let v = std::mem::take(&mut columns[iv]);
    let t = std::mem::take(&mut columns[it]);
    Ok((t, v))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub observable: String,
    pub points_compared: usize,
    pub points_outside: usize,
    pub rmse: f64,
    pub max_abs: f64,
    /// Simulated end time minus reference end time.
    pub terminal_time_delta_s: f64,
    pub terminal_time_delta_rel: f64,
}

pub fn compare(sim_t: &[f64], sim_v: &[f64], reference: &ReferenceSeries) -> Result<Metrics, CompareError> {
    let (ts, te) = (sim_t[0], sim_t[sim_t.len() - 1]);
    let (rs, re) = (reference.t[0], reference.t[reference.t.len() - 1]);
    let mut sq = 0.0;
    let mut max_abs = 0.0f64;
    let mut used = 0;
    for (&t, &v) in reference.t.iter().zip(&reference.value) {
        if t < ts || t > te || v.is_nan() {
            continue;
        }
        let e = lyosim::interp_linear(sim_t, sim_v, t) - v;
        sq += e * e;
        max_abs = max_abs.max(e.abs());
        used += 1;
    }
    if used == 0 {
        return Err(CompareError::NoOverlap {
            sim_start: ts,
            sim_end: te,
            ref_start: rs,
            ref_end: re,
        });
    }
    let delta = te - re;
    Ok(Metrics {
        observable: reference.observable.clone(),
        points_compared: used,
        points_outside: reference.t.len() - used,
        rmse: (sq / used as f64).sqrt(),
        max_abs,
        terminal_time_delta_s: delta,
        terminal_time_delta_rel: if re != 0.0 { delta / re } else { f64::NAN },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Thresholds {
    pub max_abs: Option<f64>,
    pub rmse: Option<f64>,
    pub terminal_time_rel: Option<f64>,
}

impl Thresholds {
    /// Names of the metrics that exceed their threshold.
    pub fn violations(&self, m: &Metrics) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.max_abs.is_some_and(|lim| m.max_abs > lim) {
            out.push("max_abs");
        }
        if self.rmse.is_some_and(|lim| m.rmse > lim) {
            out.push("rmse");
        }
        if self
            .terminal_time_rel
            .is_some_and(|lim| !(m.terminal_time_delta_rel.abs() <= lim))
        {
            out.push("terminal_time_rel");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(t: &[f64], v: &[f64]) -> ReferenceSeries {
        ReferenceSeries::new("T_K", t.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identical_series_give_zero_metrics() {
        let t = [0.0, 10.0, 25.0, 40.0];
        let v = [231.0, 240.5, 250.25, 255.0];
        let m = compare(&t, &v, &series(&t, &v)).unwrap();
        assert_eq!((m.rmse, m.max_abs, m.terminal_time_delta_s), (0.0, 0.0, 0.0));
        assert_eq!(m.points_compared, 4);
    }

    #[test]
    fn constant_offset_is_the_max_abs() {
        let t = [0.0, 10.0, 25.0, 40.0];
        let v = [231.0, 240.5, 250.25, 255.0];
        let shifted: Vec<f64> = v.iter().map(|x| x + 1.0).collect();
        let m = compare(&t, &v, &series(&t, &shifted)).unwrap();
        assert_eq!(m.max_abs, 1.0);
        assert_eq!(m.rmse, 1.0);
    }

    #[test]
    fn reference_between_samples_is_interpolated() {
        let m = compare(&[0.0, 10.0], &[0.0, 10.0], &series(&[2.5, 7.5, 20.0], &[2.5, 7.0, 0.0])).unwrap();
        assert_eq!(m.points_compared, 2);
        assert_eq!(m.points_outside, 1);
        assert!((m.max_abs - 0.5).abs() < 1e-15);
        assert_eq!(m.terminal_time_delta_s, -10.0);
        assert_eq!(m.terminal_time_delta_rel, -0.5);
    }

    #[test]
    fn disjoint_ranges_are_an_error() {
        let r = compare(&[0.0, 1.0], &[0.0, 1.0], &series(&[2.0, 3.0], &[0.0, 0.0]));
        assert!(matches!(r, Err(CompareError::NoOverlap { .. })));
    }

    #[test]
    fn reference_times_must_increase() {
        assert!(matches!(
            ReferenceSeries::new("x", vec![0.0, 1.0, 1.0], vec![0.0; 3]),
            Err(CompareError::Unordered(2))
        ));
    }

    #[test]
    fn thresholds_flag_each_metric() {
        let m = Metrics {
            observable: "x".into(),
            points_compared: 3,
            points_outside: 0,
            rmse: 0.01,
            max_abs: 2.5,
            terminal_time_delta_s: 900.0,
            terminal_time_delta_rel: 0.1,
        };
        let lim = Thresholds {
            max_abs: Some(3.0),
            rmse: Some(0.005),
            terminal_time_rel: Some(0.08),
        };
        assert_eq!(lim.violations(&m), vec!["rmse", "terminal_time_rel"]);
        assert!(Thresholds::default().violations(&m).is_empty());
    }
}
