//! Column tables and the files they end up in.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("cannot encode {what}: {message}")]
    Encode { what: &'static str, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            // Display on f64 is the shortest string that parses back to the
            // same value, and never depends on locale.
            Cell::Num(v) => format!("{v}"),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn to_json(&self) -> Value {
        match self {
            Cell::Num(v) => serde_json::json!(v),
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Empty => Value::Null,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

/// A trajectory or report laid out as named columns of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<(String, Vec<Cell>)>,
}

impl Table {
    pub fn new(name: &str) -> Self {
        Table {
            name: name.to_string(),
            columns: Vec::new(),
        }
    }

    pub fn column<C: Into<Cell>>(mut self, header: &str, values: impl IntoIterator<Item = C>) -> Self {
        let values: Vec<Cell> = values.into_iter().map(Into::into).collect();
        if let Some((_, first)) = self.columns.first() {
            assert_eq!(first.len(), values.len(), "column {header} has a different length");
        }
        self.columns.push((header.to_string(), values));
        self
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, |(_, v)| v.len())
    }

    pub fn numeric(&self, header: &str) -> Option<Vec<f64>> {
        let (_, values) = self.columns.iter().find(|(h, _)| h == header)?;
        values
            .iter()
            .map(|c| match c {
                Cell::Num(v) => Some(*v),
                _ => None,
            })
            .collect()
    }

    pub fn write(&self, dir: &Path, format: Format) -> Result<PathBuf, OutputError> {
        match format {
            Format::Csv => self.write_csv(dir),
            Format::Json => self.write_json(dir),
        }
    }

    fn write_csv(&self, dir: &Path) -> Result<PathBuf, OutputError> {
        let path = dir.join(format!("{}.csv", self.name));
        let csv_err = |source| OutputError::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(self.columns.iter().map(|(h, _)| h.as_str()))
            .map_err(csv_err)?;
        for i in 0..self.rows() {
            w.write_record(self.columns.iter().map(|(_, v)| v[i].render()))
                .map_err(csv_err)?;
        }
        w.flush().map_err(|source| OutputError::Io {
            path: path.clone(),
            source,
        })?;
        Ok(path)
    }

    fn write_json(&self, dir: &Path) -> Result<PathBuf, OutputError> {
        let mut map = Map::new();
        for (h, v) in &self.columns {
            map.insert(h.clone(), Value::Array(v.iter().map(Cell::to_json).collect()));
        }
        let doc = serde_json::json!({ "name": self.name, "columns": self.columns.iter().map(|(h, _)| h).collect::<Vec<_>>(), "data": map });
        let path = dir.join(format!("{}.json", self.name));
        write_text(&path, &pretty_json(&doc)?)?;
        Ok(path)
    }
}

fn pretty_json<T: Serialize>(v: &T) -> Result<String, OutputError> {
    serde_json::to_string_pretty(v).map_err(|e| OutputError::Encode {
        what: "JSON",
        message: e.to_string(),
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), OutputError> {
    fs::write(path, text).map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn create_dir(dir: &Path) -> Result<(), OutputError> {
    fs::create_dir_all(dir).map_err(|source| OutputError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    write_text(path, &(pretty_json(value)? + "\n"))
}

/// Every parameter the run consumed, defaults included, as TOML that can be
/// fed back in as a scenario.
pub fn write_effective(path: &Path, scenario: &crate::scenario::Scenario) -> Result<(), OutputError> {
    let text = toml::to_string_pretty(scenario).map_err(|e| OutputError::Encode {
        what: "TOML",
        message: e.to_string(),
    })?;
    write_text(path, &text)
}
