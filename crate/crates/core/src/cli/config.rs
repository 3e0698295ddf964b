//! The JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::changepoint::{CandidateSpec, DetectOptions};
use crate::error::{with_file, Error, Result};
use crate::model::FitSettings;
use crate::simulation::{presets, Analysis, DacSpec, DgpSpec, InferSpec, WeightGen};
use crate::weights::WeightFormat;

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightFile {
    pub path: PathBuf,
    #[serde(default)]
    pub format: WeightFormat,
    #[serde(default = "yes")]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisConfig {
    /// A constant per matrix: the time-invariant model.
    Constants,
    /// Series file with `z_j_k` columns.
    Series {
        path: PathBuf,
        /// Whether each matrix carries a constant; all do when absent.
        #[serde(default)]
        constant: Option<Vec<bool>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverFile {
    pub path: PathBuf,
    /// Column to read; the first series when absent.
    #[serde(default)]
    pub column: Option<String>,
}

/// Observed inputs for `fit` and `detect`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub panel: Option<PathBuf>,
    #[serde(default)]
    pub weights: Vec<WeightFile>,
    #[serde(default)]
    pub basis: Option<BasisConfig>,
    /// Threshold driver; detection over time uses `1..T`.
    #[serde(default)]
    pub driver: Option<DriverFile>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectConfig {
    #[serde(default)]
    pub candidates: Option<CandidateSpec>,
    #[serde(default)]
    pub with_constant: bool,
    #[serde(default)]
    pub options: DetectOptions,
    #[serde(default)]
    pub dac: Option<DacSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetRef {
    pub name: String,
    pub d: usize,
    pub t_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HistSpec {
    fn default() -> Self {
        Self { lo: -4.0, hi: 4.0, bins: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplicateConfig {
    pub reps: usize,
    pub workers: usize,
    pub seed: u64,
    pub infer_hist: Option<HistSpec>,
}

impl Default for ReplicateConfig {
    fn default() -> Self {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        Self { reps: 100, workers, seed: 0, infer_hist: None }
    }
}

/// Everything a command reads besides the command line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Output directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default)]
    pub infer: Option<InferSpec>,
    #[serde(default)]
    pub detect: DetectConfig,
    /// A full process description; excludes `preset`.
    #[serde(default)]
    pub dgp: Option<DgpSpec>,
    #[serde(default)]
    pub preset: Option<PresetRef>,
    /// Per-replication analysis; derived from `fit`/`infer` or `detect` when absent.
    #[serde(default)]
    pub analysis: Option<Analysis>,
    #[serde(default)]
    pub replicate: ReplicateConfig,
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Read a config file; relative paths inside it are taken from its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = with_file(path, Self::parse_str)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = &mut self.output {
            fix(p);
        }
        if let Some(p) = &mut self.data.panel {
            fix(p);
        }
        for w in &mut self.data.weights {
            fix(&mut w.path);
        }
        if let Some(BasisConfig::Series { path, .. }) = &mut self.data.basis {
            fix(path);
        }
        if let Some(d) = &mut self.data.driver {
            fix(&mut d.path);
        }
        if let Some(dgp) = &mut self.dgp {
            for w in &mut dgp.weights {
                if let WeightGen::File { path, .. } = w {
                    fix(path);
                }
            }
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    /// The process to simulate: the inline one or a named preset.
    pub fn resolve_dgp(&self) -> Result<DgpSpec> {
        match (&self.dgp, &self.preset) {
            (Some(_), Some(_)) => Err(Error::Config("give either dgp or preset, not both".into())),
            (Some(dgp), None) => Ok(dgp.clone()),
            (None, Some(p)) => presets::by_name(&p.name, p.d, p.t_len).ok_or_else(|| {
                Error::Config(format!("unknown preset {:?}; known: {}", p.name, presets::NAMES.join(", ")))
            }),
            (None, None) => Err(Error::Config("no dgp or preset given".into())),
        }
    }

    /// The analysis run in every replication.
    pub fn resolve_analysis(&self) -> Analysis {
        if let Some(a) = &self.analysis {
            return a.clone();
        }
        match &self.detect.candidates {
            Some(candidates) => Analysis::Detect {
                settings: self.fit.clone(),
                candidates: candidates.clone(),
                with_constant: self.detect.with_constant,
                options: self.detect.options,
                dac: self.detect.dac,
            },
            None => Analysis::Fit { settings: self.fit.clone(), infer: self.infer.clone() },
        }
    }
}
