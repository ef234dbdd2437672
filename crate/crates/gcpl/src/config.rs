//! Run configuration: a sectioned TOML file with documented defaults.
//!
//! Unknown keys are rejected; missing keys fall back to the defaults
//! below; the fully resolved config is echoed into every output directory
//! so any run is reproducible from its echo alone. The `GCPL_SEED`
//! environment variable overrides the global seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::denoiser::{Architecture, PretrainConfig};
use crate::error::{Error, Result};
use crate::harness::{Method, SyntheticSpec};
use crate::optim::AdamWConfig;
use crate::prompt::{CompleConfig, GcplConfig, PromptInit};
use crate::schedule::NoiseSchedule;

pub const SEED_ENV_VAR: &str = "GCPL_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every named stream derives from it.
    pub seed: u64,
    /// Optional registered dataset name; resolves a prompt template into
    /// reports when set.
    pub dataset_name: Option<String>,
    pub schedule: ScheduleSection,
    pub backbone: BackboneSection,
    pub pretrain: PretrainSection,
    pub gcpl: GcplSection,
    pub comple: CompleSection,
    pub classifier: ClassifierSection,
    pub data: DataSection,
    pub episode: EpisodeSection,
    pub benchmark: BenchmarkSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            dataset_name: None,
            schedule: ScheduleSection::default(),
            backbone: BackboneSection::default(),
            pretrain: PretrainSection::default(),
            gcpl: GcplSection::default(),
            comple: CompleSection::default(),
            classifier: ClassifierSection::default(),
            data: DataSection::default(),
            episode: EpisodeSection::default(),
            benchmark: BenchmarkSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: String,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            t: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule: "linear".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub latent_dim: usize,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
    pub hidden_dim: usize,
    /// Scale of the per-class pretraining conditions.
    pub cond_scale: f32,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            time_embed_dim: 16,
            cond_dim: 16,
            hidden_dim: 128,
            cond_scale: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub log_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 5000,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: None,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcplSection {
    pub lr: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub init: String,
    pub init_sigma: f32,
}

impl Default for GcplSection {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            epochs: 2000,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: None,
            init: "cond-mean".into(),
            init_sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompleSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub negative_margin: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub init: String,
    pub init_sigma: f32,
}

impl Default for CompleSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 4000,
            batch_size: 4,
            lambda: 0.001,
            negative_margin: None,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            grad_clip: None,
            init: "cond-mean".into(),
            init_sigma: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub n_mc: usize,
    pub shared_pairs: bool,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            n_mc: 128,
            shared_pairs: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// "synthetic" or "folder".
    pub source: String,
    /// Folder-of-latents root, required when source = "folder".
    pub folder: Option<PathBuf>,
    pub n_classes: usize,
    pub latent_dim: usize,
    pub prototype_scale: f32,
    pub sigma_class: f32,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "synthetic".into(),
            folder: None,
            n_classes: 4,
            latent_dim: 16,
            prototype_scale: 1.0,
            sigma_class: 0.3,
            train_per_class: 64,
            test_per_class: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub n_way: usize,
    pub k_shot: usize,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        Self { n_way: 4, k_shot: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<String>,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            shots: vec![1, 4, 8, 16],
            seeds: vec![0, 1, 2],
            methods: vec!["gcpl".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub backbone: PathBuf,
    pub embeddings: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            backbone: PathBuf::from("out/backbone.dnz"),
            embeddings: PathBuf::from("out/prompts.emb"),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Reads, applies the `GCPL_SEED` override, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if let Ok(value) = std::env::var(SEED_ENV_VAR) {
            config.seed = value
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV_VAR} must be an unsigned integer, got {value:?}")))?;
        }
        config.validate()?;
        Ok(config)
    }

    /// The fully resolved config as TOML, for echoing into output dirs.
    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.schedule != "linear" {
            return Err(Error::Config(format!(
                "unsupported schedule family {:?}; only \"linear\" is implemented",
                self.schedule.schedule
            )));
        }
        if self.schedule.t == 0 {
            return Err(Error::Config("schedule.T must be positive".into()));
        }
        if !(self.schedule.beta_start > 0.0
            && self.schedule.beta_start <= self.schedule.beta_end
            && self.schedule.beta_end < 1.0)
        {
            return Err(Error::Config("betas must satisfy 0 < beta_start <= beta_end < 1".into()));
        }
        if self.backbone.time_embed_dim < 2 || self.backbone.time_embed_dim % 2 != 0 {
            return Err(Error::Config("backbone.time_embed_dim must be even and >= 2".into()));
        }
        match self.data.source.as_str() {
            "synthetic" => {
                if self.data.latent_dim != self.backbone.latent_dim {
                    return Err(Error::Config(format!(
                        "data.latent_dim ({}) must match backbone.latent_dim ({})",
                        self.data.latent_dim, self.backbone.latent_dim
                    )));
                }
                if self.episode.n_way > self.data.n_classes {
                    return Err(Error::Config(format!(
                        "episode.n_way ({}) exceeds data.n_classes ({})",
                        self.episode.n_way, self.data.n_classes
                    )));
                }
                if self.episode.k_shot > self.data.train_per_class {
                    return Err(Error::Config(format!(
                        "episode.k_shot ({}) exceeds data.train_per_class ({})",
                        self.episode.k_shot, self.data.train_per_class
                    )));
                }
            }
            "folder" => {
                if self.data.folder.is_none() {
                    return Err(Error::Config("data.folder is required when data.source = \"folder\"".into()));
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown data.source {other:?}; expected \"synthetic\" or \"folder\""
                )));
            }
        }
        for (name, init) in [("gcpl", &self.gcpl.init), ("comple", &self.comple.init)] {
            if init != "cond-mean" && init != "random-normal" {
                return Err(Error::Config(format!(
                    "{name}.init must be \"cond-mean\" or \"random-normal\", got {init:?}"
                )));
            }
        }
        if self.benchmark.shots.is_empty() || self.benchmark.shots.contains(&0) {
            return Err(Error::Config("benchmark.shots must be non-empty positive counts".into()));
        }
        if self.benchmark.seeds.is_empty() {
            return Err(Error::Config("benchmark.seeds must be non-empty".into()));
        }
        if self.benchmark.methods.is_empty() {
            return Err(Error::Config("benchmark.methods must be non-empty".into()));
        }
        for m in &self.benchmark.methods {
            m.parse::<Method>().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(name) = &self.dataset_name {
            crate::harness::resolve_template(name).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.gcpl_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.comple_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.classifier_config().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.t, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            latent_dim: self.backbone.latent_dim,
            time_embed_dim: self.backbone.time_embed_dim,
            cond_dim: self.backbone.cond_dim,
            hidden_dim: self.backbone.hidden_dim,
            max_timestep: self.schedule.t,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            optim: AdamWConfig {
                lr: self.pretrain.lr,
                beta1: self.pretrain.beta1,
                beta2: self.pretrain.beta2,
                weight_decay: self.pretrain.weight_decay,
                eps: 1e-8,
                grad_clip: self.pretrain.grad_clip,
            },
            seed: self.seed,
            log_every: self.pretrain.log_every.max(1),
        }
    }

    pub fn gcpl_config(&self) -> GcplConfig {
        GcplConfig {
            epochs: self.gcpl.epochs,
            optim: AdamWConfig {
                lr: self.gcpl.lr,
                beta1: self.gcpl.beta1,
                beta2: self.gcpl.beta2,
                weight_decay: self.gcpl.weight_decay,
                eps: 1e-8,
                grad_clip: self.gcpl.grad_clip,
            },
            init: prompt_init(&self.gcpl.init, self.gcpl.init_sigma),
            seed: self.seed,
        }
    }

    pub fn comple_config(&self) -> CompleConfig {
        CompleConfig {
            epochs: self.comple.epochs,
            batch_size: self.comple.batch_size,
            lambda: self.comple.lambda,
            negative_margin: self.comple.negative_margin,
            optim: AdamWConfig {
                lr: self.comple.lr,
                beta1: self.comple.beta1,
                beta2: self.comple.beta2,
                weight_decay: self.comple.weight_decay,
                eps: 1e-8,
                grad_clip: self.comple.grad_clip,
            },
            init: prompt_init(&self.comple.init, self.comple.init_sigma),
            seed: self.seed,
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            n_mc: self.classifier.n_mc,
            shared_pairs: self.classifier.shared_pairs,
            seed: self.seed,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: self.data.n_classes,
            latent_dim: self.data.latent_dim,
            prototype_scale: self.data.prototype_scale,
            sigma_class: self.data.sigma_class,
            train_per_class: self.data.train_per_class,
            test_per_class: self.data.test_per_class,
            seed: self.seed,
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        self.benchmark
            .methods
            .iter()
            .map(|m| m.parse().expect("validated at load"))
            .collect()
    }
}

fn prompt_init(kind: &str, sigma: f32) -> PromptInit {
    match kind {
        "random-normal" => PromptInit::RandomNormal { sigma },
        _ => PromptInit::CondMean { sigma },
    }
}
