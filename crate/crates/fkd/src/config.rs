//! Experiment configuration (JSON) and its stable content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FkdError, Result};
use crate::graph::{SplitMode, SyntheticParams};
use crate::rewire::RewireParams;
use crate::rng::fnv1a;
use crate::student::StudentVariant;
use crate::teacher::TeacherKind;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticParams),
    Files {
        edges: PathBuf,
        features: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameletModeSpec {
    Exact,
    Chebyshev { degree: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterBankSpec {
    /// Top scale level J (the index set is {(0,J)} ∪ {(r,j): j ≤ J}).
    pub scales: usize,
    pub mode: FrameletModeSpec,
}

impl Default for FilterBankSpec {
    fn default() -> Self {
        FilterBankSpec {
            scales: 1,
            mode: FrameletModeSpec::Exact,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub kind: TeacherKind,
    /// Spatial/spectral layers, or the simplified band power.
    pub depth: usize,
    pub hidden: usize,
    pub dropout: f64,
    /// Energy perturbation strength (ε for spatial, ε^S for simplified).
    pub eps: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            kind: TeacherKind::Spatial,
            depth: 2,
            hidden: 32,
            dropout: 0.0,
            eps: 0.0,
            lr: 0.01,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudentSpec {
    pub variant: StudentVariant,
    pub d_enc: usize,
    pub lambda: f64,
    /// Band power for FMLP-S.
    pub power: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for StudentSpec {
    fn default() -> Self {
        StudentSpec {
            variant: StudentVariant::FmlpS,
            d_enc: 64,
            lambda: 0.5,
            power: 2,
            dropout: 0.0,
            lr: 0.01,
            weight_decay: 0.01,
        }
    }
}

/// Hyperparameter grids for `grid-search` (singletons elsewhere).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub dropout: Vec<f64>,
    #[serde(default)]
    pub d_enc: Vec<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            lr: vec![0.1, 0.05, 0.01, 0.005],
            weight_decay: vec![0.05, 0.01, 0.1, 0.5],
            hidden: vec![16, 32, 64],
            dropout: vec![0.0],
            d_enc: vec![128, 64, 32, 16, 8],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewireSpec {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: RewireParams,
}

impl Default for RewireSpec {
    fn default() -> Self {
        RewireSpec {
            enabled: false,
            params: RewireParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub split: SplitMode,
    #[serde(default)]
    pub filter_bank: FilterBankSpec,
    #[serde(default)]
    pub teacher: TeacherSpec,
    #[serde(default)]
    pub student: StudentSpec,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub rewire: RewireSpec,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_epochs() -> usize {
    200
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FkdError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| FkdError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(FkdError::Config("seed list must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.student.lambda) {
            return Err(FkdError::Config("lambda must lie in [0,1]".into()));
        }
        if let Some(grid) = &self.grid {
            if grid.lr.is_empty() || grid.weight_decay.is_empty() || grid.hidden.is_empty() {
                return Err(FkdError::Config("grids must not be empty".into()));
            }
        }
        if let DatasetSpec::Files {
            edges,
            features,
            labels,
        } = &self.dataset
        {
            for p in [edges, features, labels] {
                if !p.exists() {
                    return Err(FkdError::Config(format!("missing input {}", p.display())));
                }
            }
        }
        if let FrameletModeSpec::Chebyshev { degree } = self.filter_bank.mode {
            if degree < 4 {
                return Err(FkdError::DegreeTooLow(degree));
            }
        }
        Ok(())
    }

    /// Stable content hash: configs that serialize to the same canonical
    /// JSON value (key order irrelevant) hash identically.
    pub fn content_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = canonical_json(&value);
        format!("{:016x}", fnv1a(canonical.as_bytes()))
    }
}

/// Canonical rendering: object keys sorted (serde_json::Value already keeps
/// them in a BTreeMap), floats via their shortest round-trip form.
fn canonical_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(map) => {
            let inner: Vec<String> = map
                .iter()
                .map(|(k, val)| format!("{k:?}:{}", canonical_json(val)))
                .collect();
            format!("{{{}}}", inner.join(","))
        }
        serde_json::Value::Array(items) => {
            let inner: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", inner.join(","))
        }
        other => other.to_string(),
    }
}
