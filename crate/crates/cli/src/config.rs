//! Pipeline configuration, read from a TOML file.
//!
//! Every section is optional. Relative paths are resolved against the
//! directory of the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use labharm::ablation::BenchmarkConfig;
use labharm::pairs::GenerationSchedule;
use labharm::rerank::{ExternalTransport, RerankConfig, TrainConfig};
use labharm::retriever::{RetrievalConfig, RetrievalMode};
use labharm::semantic::DEFAULT_DIMENSION;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Reference database CSV.
    pub reference: Option<PathBuf>,
    /// Synonym file; the built-in seed dictionary when absent.
    pub synonyms: Option<PathBuf>,
    /// Precomputed record vectors; computed with the fallback embedder when absent.
    pub vectors: Option<PathBuf>,
    /// Directory written by `index`. Preferred over rebuilding from `reference`.
    pub index_dir: Option<PathBuf>,
    /// Tuned weights (JSON written by `tune`); overrides `retrieval.weights`.
    pub weights: Option<PathBuf>,
    /// Reference scorer model (JSON written by `train`).
    pub model: Option<PathBuf>,
    /// Labeled queries used when `tune_on_startup` is set.
    pub tuning_queries: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub feedback: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerSection {
    pub budget: usize,
    pub initial_designs: usize,
    pub random_starts: usize,
}

impl Default for TunerSection {
    fn default() -> Self {
        TunerSection {
            budget: 120,
            initial_designs: 20,
            random_starts: 256,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PairsSection {
    #[serde(flatten)]
    pub schedule: GenerationSchedule,
    /// Retrieval depth for hard-negative mining; 0 disables it.
    pub neighbors: usize,
}

impl Default for PairsSection {
    fn default() -> Self {
        PairsSection {
            schedule: GenerationSchedule::default(),
            neighbors: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub host: String,
    pub port: u16,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            host: "127.0.0.1".into(),
            port: 8080,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Embedding dimension of the fallback embedder.
    pub dimension: usize,
    pub mode: RetrievalMode,
    pub tune_on_startup: bool,
    pub paths: Paths,
    pub retrieval: RetrievalConfig,
    pub rerank: RerankConfig,
    /// Scores pairs through an external process or service instead of the
    /// reference model.
    pub external_scorer: Option<ExternalTransport>,
    pub tuner: TunerSection,
    pub pairs: PairsSection,
    pub train: TrainConfig,
    pub service: ServiceSection,
    pub benchmark: BenchmarkConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            dimension: DEFAULT_DIMENSION,
            mode: RetrievalMode::Hybrid,
            tune_on_startup: false,
            paths: Paths::default(),
            retrieval: RetrievalConfig::default(),
            rerank: RerankConfig::default(),
            external_scorer: None,
            tuner: TunerSection::default(),
            pairs: PairsSection::default(),
            train: TrainConfig::default(),
            service: ServiceSection::default(),
            benchmark: BenchmarkConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).context("parsing config")?;
        cfg.resolve(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in {}", path.display()))
    }

    fn resolve(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.reference,
            &mut p.synonyms,
            &mut p.vectors,
            &mut p.index_dir,
            &mut p.weights,
            &mut p.model,
            &mut p.tuning_queries,
            &mut p.results,
            &mut p.feedback,
        ] {
            if let Some(path) = slot {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }

    /// The global `--seed` replaces every seed in the file.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.benchmark.synth.seed = seed;
        self.benchmark.train.seed = seed;
    }

    /// Checks value ranges and that every input file named in `paths` exists.
    /// Output paths (`results`, `feedback`) may be absent.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rerank.lambda) {
            bail!("rerank.lambda must be in [0, 1], got {}", self.rerank.lambda);
        }
        if self.dimension == 0 {
            bail!("dimension must be positive");
        }
        self.retrieval.validate()?;
        self.retrieval.weights.validate()?;
        let p = &self.paths;
        for (name, path) in [
            ("reference", &p.reference),
            ("synonyms", &p.synonyms),
            ("vectors", &p.vectors),
            ("index_dir", &p.index_dir),
            ("weights", &p.weights),
            ("model", &p.model),
            ("tuning_queries", &p.tuning_queries),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    bail!("paths.{name}: {} does not exist", path.display());
                }
            }
        }
        if self.tune_on_startup && p.tuning_queries.is_none() {
            bail!("tune_on_startup needs paths.tuning_queries");
        }
        Ok(())
    }
}
