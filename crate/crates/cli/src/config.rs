//! Run configuration: a single JSON document covering the model, the
//! estimation volume, the radar degradation model, and the synthetic
//! scan pattern. Flags override file values; the `ROLLS_SEED` variable
//! overrides the configured seed but loses to an explicit `--seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use rolls_core::grid::VoxelGridSpec;
use rolls_core::model::ModelConfig;
use rolls_core::synth::RadarNoiseModel;

use crate::CliError;

/// Synthetic scan-pattern resolution shared by `synth` and the fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub n_azimuth: usize,
    pub n_elevation: usize,
    pub max_range: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            n_azimuth: 256,
            n_elevation: 16,
            max_range: 60.0,
        }
    }
}

/// Moderate degradation: sparse returns with multipath ghosts, the
/// regime the two-stage pipeline is built around.
pub fn default_noise() -> RadarNoiseModel {
    RadarNoiseModel {
        keep_prob: 0.7,
        sigma_xy: 0.03,
        sigma_z: 0.05,
        p_penetrate: 0.02,
        p_ghost: 0.25,
        seed: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: VoxelGridSpec,
    pub noise: RadarNoiseModel,
    pub scan: ScanConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            grid: VoxelGridSpec::default(),
            noise: default_noise(),
            scan: ScanConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model
            .validate()
            .map_err(|e| CliError::Usage(format!("invalid model config: {e}")))?;
        self.grid
            .dims()
            .map_err(|e| CliError::Usage(format!("invalid grid: {e}")))?;
        self.noise
            .validate()
            .map_err(|e| CliError::Usage(format!("invalid noise model: {e}")))?;
        if self.scan.n_azimuth == 0 || self.scan.n_elevation == 0 || self.scan.max_range <= 0.0 {
            return Err(CliError::Usage(
                "invalid scan config: resolutions must be >= 1 and max_range > 0".to_string(),
            ));
        }
        Ok(())
    }
}

/// Shared configuration flags. Precedence: `--seed` flag, then the
/// `ROLLS_SEED` environment variable, then the config file, then the
/// built-in defaults.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration file; built-in defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training iteration count override.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Batch size override.
    #[arg(long)]
    pub batch_size: Option<usize>,
}

impl ConfigArgs {
    /// Resolves the effective config from defaults, file, env, and flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Usage(format!("--config: cannot read {}: {e}", path.display()))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    CliError::Usage(format!("--config: invalid JSON in {}: {e}", path.display()))
                })?
            }
            None => RunConfig::default(),
        };
        if let Ok(v) = std::env::var("ROLLS_SEED") {
            let seed = v.parse::<u64>().map_err(|_| {
                CliError::Usage(format!("ROLLS_SEED: expected an unsigned integer, got '{v}'"))
            })?;
            apply_seed(&mut cfg, seed);
        }
        if let Some(seed) = self.seed {
            apply_seed(&mut cfg, seed);
        }
        if let Some(iters) = self.iterations {
            cfg.model.iterations = iters;
        }
        if let Some(bs) = self.batch_size {
            cfg.model.batch_size = bs;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn apply_seed(cfg: &mut RunConfig, seed: u64) {
    cfg.model.seed = seed;
    cfg.noise.seed = seed;
}

/// Per-run provenance record written to every output directory.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.model.seed,
            config: cfg.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, value: impl Into<String>) {
        self.inputs.insert(name.to_string(), value.into());
    }

    pub fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    pub fn timing(&mut self, phase: &str, ms: f64) {
        self.timings_ms.insert(phase.to_string(), ms);
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("manifest serialization failed: {e}")))?;
        std::fs::write(&path, text)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

/// Creates an output directory (and parents), surfacing failures as
/// runtime errors.
pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Usage-level check that an input path given by `flag` exists.
pub fn require_exists(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{flag}: no such path: {}",
            path.display()
        )))
    }
}
