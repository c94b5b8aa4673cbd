//! Experiment configuration file (JSON, versioned).

use pdediscover::data::{GeneratorSpec, Sampler};
use pdediscover::library::{builtin_library, LibrarySpec};
use pdediscover::network::ActivationKind;
use pdediscover::trainer::AdoConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Master seed. Every other seed of the run is derived from it.
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub library: LibrarySource,
    #[serde(default)]
    pub network: NetworkConfig,
    /// One dataset per branch of the network.
    pub datasets: Vec<DatasetSource>,
    pub collocation: CollocationConfig,
    #[serde(default)]
    pub ado: AdoConfig,
    /// Reference equations for scoring, e.g. `{"u_t": {"u*u_x": -1, "u_xx": 0.1}}`.
    #[serde(default)]
    pub truth: Option<BTreeMap<String, BTreeMap<String, f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LibrarySource {
    Builtin(String),
    Custom { custom: LibrarySpec },
    File { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub depth: usize,
    pub width: usize,
    pub activation: ActivationKind,
    /// Hidden layers of each branch when there are several datasets.
    pub branch_depth: usize,
    pub branch_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 4,
            width: 20,
            activation: ActivationKind::Tanh,
            branch_depth: 2,
            branch_width: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    /// Measurement CSV. Exclusive with `generate`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Full-grid truth CSV used for the field error of a file dataset.
    #[serde(default)]
    pub truth_path: Option<PathBuf>,
    #[serde(default)]
    pub generate: Option<GeneratedData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedData {
    pub spec: GeneratorSpec,
    #[serde(default)]
    pub noise: f64,
    pub sensors: usize,
    pub times: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollocationConfig {
    #[serde(default = "default_sampler")]
    pub sampler: Sampler,
    pub count: usize,
    /// Sampling box; defaults to the dataset's domain.
    #[serde(default)]
    pub bounds: Option<Vec<[f64; 2]>>,
}

fn default_sampler() -> Sampler {
    Sampler::Sobol
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("version: expected {CONFIG_VERSION}, got {}", self.version));
        }
        if self.datasets.is_empty() {
            return bad("datasets: at least one dataset is required".into());
        }
        for (i, d) in self.datasets.iter().enumerate() {
            match (&d.path, &d.generate) {
                (Some(_), None) | (None, Some(_)) => {}
                _ => return bad(format!("datasets[{i}]: give exactly one of `path` and `generate`")),
            }
            if let Some(g) = &d.generate {
                if !(g.noise.is_finite() && g.noise >= 0.0) {
                    return bad(format!("datasets[{i}].noise: must be a non-negative number"));
                }
                if g.sensors == 0 || g.times == 0 {
                    return bad(format!("datasets[{i}]: sensors and times must be positive"));
                }
                g.spec
                    .validate()
                    .map_err(|e| CliError::Config(format!("datasets[{i}].spec: {e}")))?;
            }
        }
        if self.collocation.count == 0 {
            return bad("collocation.count: must be at least 1".into());
        }
        if let Some(b) = &self.collocation.bounds {
            if b.iter().any(|[lo, hi]| !(lo < hi)) {
                return bad("collocation.bounds: every interval needs lo < hi".into());
            }
        }
        if self.network.depth == 0 || self.network.width == 0 {
            return bad("network: depth and width must be positive".into());
        }
        if self.datasets.len() > 1 && (self.network.branch_depth == 0 || self.network.branch_width == 0) {
            return bad("network: branch_depth and branch_width must be positive".into());
        }
        self.ado.validate().map_err(|e| CliError::Config(format!("ado: {e}")))?;
        self.library_spec()?;
        Ok(())
    }

    /// Resolves the library, reading a file source relative to the working
    /// directory.
    pub fn library_spec(&self) -> Result<LibrarySpec, CliError> {
        let lib = |e: pdediscover::library::LibraryError| CliError::Config(format!("library: {e}"));
        match &self.library {
            LibrarySource::Builtin(name) => builtin_library(name).map_err(lib),
            LibrarySource::Custom { custom } => {
                custom.validate().map_err(lib)?;
                Ok(custom.clone())
            }
            LibrarySource::File { file } => {
                let text = std::fs::read_to_string(file).map_err(|e| CliError::Config(format!("library: {}: {e}", file.display())))?;
                LibrarySpec::from_json(&text).map_err(lib)
            }
        }
    }
}

/// Sub-seed for one purpose of one branch, derived from the master seed.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    use rand::{RngCore, SeedableRng};
    let tag = purpose.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(tag ^ index);
    rng.next_u64()
}
