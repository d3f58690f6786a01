//! Run configuration read from TOML; command-line flags override fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::ModelConfig;
use crate::diffusion::{DiffusionSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::road_graph::hex;
use crate::sampler::SamplerConfig;
use crate::synth_world::{split_path, GridCitySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub network: PathBuf,
    /// Corpus prefix; split files append `.train`, `.val`, `.test`.
    pub corpus: PathBuf,
    /// Training output directory holding checkpoints, bins and the metrics log.
    pub run_dir: PathBuf,
    /// Checkpoint read by `sample` and `bench`; defaults to the best checkpoint in `run_dir`.
    pub checkpoint: Option<PathBuf>,
    /// Conditioning requests for `sample`; defaults to the test split.
    pub requests: Option<PathBuf>,
    pub generated: PathBuf,
    pub report: PathBuf,
    pub bench: PathBuf,
}

impl Paths {
    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.run_dir.join("model.ckpt"))
    }

    pub fn requests(&self) -> PathBuf {
        self.requests.clone().unwrap_or_else(|| split_path(&self.corpus, "test"))
    }

    /// Bin table written next to the corpus splits.
    pub fn corpus_bins(&self) -> PathBuf {
        split_path(&self.corpus, "bins.json")
    }

    pub fn stats(&self) -> PathBuf {
        let mut s = self.generated.as_os_str().to_owned();
        s.push(".stats.json");
        PathBuf::from(s)
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            network: "network.json".into(),
            corpus: "corpus.jsonl".into(),
            run_dir: "run".into(),
            checkpoint: None,
            requests: None,
            generated: "generated.jsonl".into(),
            report: "report.json".into(),
            bench: "bench.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 20_000, min_len: 4, max_len: 31 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Conditioning tuples taken from the head of the request file.
    pub requests: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { requests: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// EDR match tolerance; defaults to the network's median segment length.
    pub edr_eps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub workers: usize,
    pub paths: Paths,
    pub city: GridCitySpec,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionSchedule,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            deterministic: true,
            workers: 1,
            paths: Paths::default(),
            city: GridCitySpec::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            diffusion: DiffusionSchedule::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let start = e.span().map_or(0, |s| s.start);
            let mut line = text[..start].matches('\n').count() + 1;
            if let Some(key) = e.message().strip_prefix("unknown field `").and_then(|m| m.split('`').next()) {
                let found = text[start..].lines().position(|l| {
                    l.trim_start().strip_prefix(key).is_some_and(|r| r.trim_start().starts_with('='))
                });
                if let Some(k) = found {
                    line += k;
                }
            }
            Error::Parse { path: path.display().to_string(), line, msg: e.message().to_string() }
        })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("config does not serialize: {e}")))
    }
}

/// SHA-256 of the canonical JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex(&Sha256::digest(&bytes)))
}
