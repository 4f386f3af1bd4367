//! Scenario documents: a parameter set plus stage selection, seed, output
//! location, analysis inputs and reference series to compare against.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use lyosim::analysis::PorousMedium;
use lyosim::freezing::NucleationMode;
use lyosim::ParameterSet;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("scenario {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("stage selection is empty")]
    NoStages,
    #[error("stage `{0}` selected twice")]
    DuplicateStage(&'static str),
    #[error("invalid parameters: {0}")]
    Params(#[from] lyosim::params::ParamsError),
    #[error("analysis settings: {0}")]
    Analysis(String),
    #[error("reference `{0}`: thresholds must be positive")]
    Threshold(String),
    #[error("sweep `{arg}`: {reason}")]
    Sweep { arg: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Freezing,
    Primary,
    Secondary,
}

impl StageName {
    pub fn label(self) -> &'static str {
        match self {
            StageName::Freezing => "freezing",
            StageName::Primary => "primary",
            StageName::Secondary => "secondary",
        }
    }
}

fn all_stages() -> Vec<StageName> {
    vec![StageName::Freezing, StageName::Primary, StageName::Secondary]
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiotCase {
    pub h_w_m2k: f64,
    pub length_m: f64,
    pub k_w_mk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolidDiffusion {
    pub length_m: f64,
    pub diffusivity_m2_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    pub biot: Vec<BiotCase>,
    pub cake: PorousMedium,
    pub temperature_k: f64,
    pub molar_mass_g_mol: f64,
    pub length_m: f64,
    /// Taken from the desorption kinetics at `temperature_k` when absent.
    pub desorption_rate_1_s: Option<f64>,
    pub solid_diffusion: Option<SolidDiffusion>,
    pub fourier_max: f64,
    pub fourier_points: usize,
    pub series_terms: usize,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            biot: vec![
                BiotCase {
                    h_w_m2k: 8.0,
                    length_m: 0.012,
                    k_w_mk: 2.25,
                },
                BiotCase {
                    h_w_m2k: 65.0,
                    length_m: 0.012,
                    k_w_mk: 2.25,
                },
            ],
            cake: PorousMedium {
                porosity: 0.815,
                tortuosity: 1.2,
                mean_pore_radius: 5e-6,
                gas_diffusivity: 1.97e-5,
            },
            temperature_k: 256.0,
            molar_mass_g_mol: 18.0,
            length_m: 0.01,
            desorption_rate_1_s: None,
            solid_diffusion: None,
            fourier_max: 10.0,
            fourier_points: 201,
            series_terms: lyosim::analysis::DEFAULT_TERMS,
        }
    }
}

/// Digitized curve to compare one output column against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceCheck {
    /// Output table holding the simulated column (`primary`, `cycle`, ...).
    pub table: String,
    /// Column name; the reference file must use it as its value header.
    pub observable: String,
    /// Two-column CSV, relative paths resolved against the scenario file.
    pub file: PathBuf,
    pub max_abs: Option<f64>,
    pub rmse: Option<f64>,
    /// Allowed end-time mismatch relative to the reference end time.
    pub terminal_time_rel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "all_stages")]
    pub stages: Vec<StageName>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: OutputSettings,
    #[serde(default)]
    pub params: ParameterSet,
    #[serde(default)]
    pub analysis: AnalysisSettings,
    #[serde(default, rename = "reference", skip_serializing_if = "Vec::is_empty")]
    pub references: Vec<ReferenceCheck>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: None,
            stages: all_stages(),
            seed: None,
            output: OutputSettings::default(),
            params: ParameterSet::default(),
            analysis: AnalysisSettings::default(),
            references: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut s = Self::parse(&text).map_err(|e| match e {
            ScenarioError::Parse { message, .. } => ScenarioError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for r in &mut s.references {
            if r.file.is_relative() {
                r.file = base.join(&r.file);
            }
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.stages.is_empty() {
            return Err(ScenarioError::NoStages);
        }
        let mut seen = HashSet::new();
        for s in &self.stages {
            if !seen.insert(*s) {
                return Err(ScenarioError::DuplicateStage(s.label()));
            }
        }
        self.params.validate()?;
        self.analysis
            .cake
            .validate()
            .map_err(|e| ScenarioError::Analysis(e.to_string()))?;
        let a = &self.analysis;
        if a.fourier_points < 2 || !(a.fourier_max > 0.0) || a.series_terms == 0 {
            return Err(ScenarioError::Analysis(
                "Fourier grid and series length must be positive".into(),
            ));
        }
        for r in &self.references {
            if [r.max_abs, r.rmse, r.terminal_time_rel]
                .iter()
                .flatten()
                .any(|&v| !(v > 0.0))
            {
                return Err(ScenarioError::Threshold(r.observable.clone()));
            }
        }
        Ok(())
    }

    pub fn selects(&self, stage: StageName) -> bool {
        self.stages.contains(&stage)
    }

    /// Replaces the seed of stochastic nucleation. Returns whether the
    /// scenario uses one.
    pub fn apply_seed(&mut self, seed: u64) -> bool {
        self.seed = Some(seed);
        match &mut self.params.freezing.nucleation {
            NucleationMode::Stochastic { seed: s, .. } => {
                *s = seed;
                true
            }
            NucleationMode::Controlled { .. } => false,
        }
    }

    /// Sets a numeric field addressed by a dotted path, relative to the
    /// parameter set or, with an `analysis.` prefix, the analysis section.
    pub fn set_number(&mut self, path: &str, value: f64) -> Result<(), ScenarioError> {
        let fail = |reason: String| ScenarioError::Sweep {
            arg: path.to_string(),
            reason,
        };
        let (section, rest) = match path.strip_prefix("analysis.") {
            Some(rest) => ("analysis", rest),
            None => ("params", path),
        };
        let mut doc = serde_json::to_value(&*self).map_err(|e| fail(e.to_string()))?;
        let mut node = &mut doc[section];
        for key in rest.split('.') {
            node = match node {
                Value::Object(map) => map.get_mut(key).ok_or_else(|| fail(format!("no field `{key}`")))?,
                Value::Array(items) => {
                    let i: usize = key.parse().map_err(|_| fail(format!("`{key}` is not an index")))?;
                    items
                        .get_mut(i)
                        .ok_or_else(|| fail(format!("index {i} out of range")))?
                }
                _ => return Err(fail(format!("`{key}` is below a scalar"))),
            };
        }
        if !(node.is_number() || node.is_null()) {
            return Err(fail("target is not a number".into()));
        }
        *node = if node.is_u64() && value >= 0.0 && value.fract() == 0.0 {
            serde_json::json!(value as u64)
        } else {
            serde_json::json!(value)
        };
        let references = std::mem::take(&mut self.references);
        let mut updated: Scenario = serde_json::from_value(doc).map_err(|e| fail(e.to_string()))?;
        updated.references = references;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

/// `param=start:stop:n`, expanded to `n` evenly spaced values.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub path: String,
    pub values: Vec<f64>,
}

impl std::str::FromStr for Sweep {
    type Err = ScenarioError;

    fn from_str(arg: &str) -> Result<Self, Self::Err> {
        let fail = |reason: &str| ScenarioError::Sweep {
            arg: arg.to_string(),
            reason: reason.to_string(),
        };
        let (path, range) = arg.split_once('=').ok_or_else(|| fail("expected param=start:stop:n"))?;
        let parts: Vec<&str> = range.split(':').collect();
        let [start, stop, n] = parts[..] else {
            return Err(fail("expected start:stop:n"));
        };
        let start: f64 = start.trim().parse().map_err(|_| fail("start is not a number"))?;
        let stop: f64 = stop.trim().parse().map_err(|_| fail("stop is not a number"))?;
        let n: usize = n.trim().parse().map_err(|_| fail("n is not a count"))?;
        if n == 0 || !start.is_finite() || !stop.is_finite() {
            return Err(fail("need a finite range and at least one point"));
        }
        let values = if n == 1 {
            vec![start]
        } else {
            (0..n)
                .map(|i| start + (stop - start) * i as f64 / (n - 1) as f64)
                .collect()
        };
        Ok(Sweep {
            path: path.trim().to_string(),
            values,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default_cycle() {
        let s = Scenario::parse("").unwrap();
        assert_eq!(s, Scenario::default());
    }

    #[test]
    fn shipped_scenarios_are_valid() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
        assert_eq!(n, 11);
    }

    #[test]
    fn empty_stage_list_is_rejected() {
        assert!(matches!(Scenario::parse("stages = []"), Err(ScenarioError::NoStages)));
        assert!(matches!(
            Scenario::parse(r#"stages = ["primary", "primary"]"#),
            Err(ScenarioError::DuplicateStage("primary"))
        ));
    }

    #[test]
    fn unknown_keys_are_schema_errors() {
        let r = Scenario::parse("[params.primary]\nh_b = 3.0\n");
        assert!(matches!(r, Err(ScenarioError::Parse { .. })));
    }

    #[test]
    fn schedules_and_switches_parse() {
        let s = Scenario::parse(
            r#"
stages = ["primary"]
[params.primary]
shelf_k = { start = 228.15, end = 258.15, rate_per_min = 0.25 }
[params.freezing]
visf = false
"#,
        )
        .unwrap();
        assert_eq!(s.params.primary.shelf.value(120.0), 228.65);
        assert!(s.params.freezing.visf.is_none());
    }

    #[test]
    fn sweep_argument_expands() {
        let s: Sweep = "primary.shelf_k=260:280:5".parse().unwrap();
        assert_eq!(s.path, "primary.shelf_k");
        assert_eq!(s.values, vec![260.0, 265.0, 270.0, 275.0, 280.0]);
        assert!("primary.shelf_k=1:2".parse::<Sweep>().is_err());
        assert!("primary.shelf_k=1:2:0".parse::<Sweep>().is_err());
    }

    #[test]
    fn set_number_reaches_nested_fields() {
        let mut s = Scenario::default();
        s.set_number("primary.h_bottom_w_m2k", 22.0).unwrap();
        assert_eq!(s.params.primary.h_bottom, 22.0);
        s.set_number("analysis.biot.1.h_w_m2k", 30.0).unwrap();
        assert_eq!(s.analysis.biot[1].h_w_m2k, 30.0);
        s.set_number("pipeline.grid_points", 31.0).unwrap();
        assert_eq!(s.params.pipeline.grid_points, 31);
        assert!(s.set_number("primary.nope", 1.0).is_err());
        assert!(s.set_number("pipeline.handoff", 1.0).is_err());
    }

    #[test]
    fn seed_only_touches_stochastic_runs() {
        let mut s = Scenario::default();
        assert!(!s.apply_seed(3));
        s.params.freezing.nucleation = NucleationMode::Stochastic {
            rate_constant: 1e-5,
            exponent: 12.0,
            seed: 1,
            sampling_interval: 0.1,
        };
        assert!(s.apply_seed(3));
        assert!(matches!(
            s.params.freezing.nucleation,
            NucleationMode::Stochastic { seed: 3, .. }
        ));
    }
}
