//! Synthetic dataset generation, N-way K-shot episode construction, the
//! prompt-template registry, benchmark sweeps, and the folder-of-latents
//! ingestion format.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{classify, ClassifierConfig};
use crate::denoiser::{ConditionEmbedding, Denoiser};
use crate::error::{Error, Result};
use crate::format;
use crate::prompt::{train_comple, train_gcpl, ClassPrompt, CompleConfig, GcplConfig};
use crate::rng::{derive_seed, stream_rng, streams};
use crate::schedule::{standard_normal_vector, NoiseSchedule};
use crate::tensor::Tensor;

const LATENT_MAGIC: &[u8] = b"GCPLLAT";
const LATENT_VERSION: u32 = 1;

/// Parameters of a synthetic latent classification task: one Gaussian blob
/// per class around a randomly drawn prototype.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub latent_dim: usize,
    pub prototype_scale: f32,
    pub sigma_class: f32,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The pinned reference task: easy enough that nearest-prototype is
    /// near-perfect, hard enough that chance is 25%.
    pub fn reference(seed: u64) -> Self {
        Self {
            n_classes: 4,
            latent_dim: 16,
            prototype_scale: 1.0,
            sigma_class: 0.3,
            train_per_class: 64,
            test_per_class: 50,
            seed,
        }
    }

    /// The harder 8-class task used for the contrastive comparison.
    pub fn harder(seed: u64) -> Self {
        Self {
            n_classes: 8,
            latent_dim: 16,
            prototype_scale: 1.0,
            sigma_class: 0.5,
            train_per_class: 64,
            test_per_class: 50,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("synthetic task needs at least two classes".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        if !(self.sigma_class > 0.0) {
            return Err(Error::InvalidArgument("sigma_class must be positive".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidArgument("per-class sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// One class's latents, split into disjoint train and test sets.
#[derive(Debug, Clone)]
pub struct ClassData {
    pub name: String,
    pub train: Vec<Tensor>,
    pub test: Vec<Tensor>,
}

/// A labeled latent dataset; class ids index into `classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub latent_dim: usize,
    pub classes: Vec<ClassData>,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Flattened (latent, class id) pairs over the train split.
    pub fn train_pairs(&self) -> Vec<(Tensor, usize)> {
        self.classes
            .iter()
            .enumerate()
            .flat_map(|(id, c)| c.train.iter().map(move |x| (x.clone(), id)))
            .collect()
    }
}

/// Draws the dataset: prototypes once from the seed, then each sample as
/// prototype + N(0, sigma^2) noise. Train and test splits are disjoint by
/// construction and the whole dataset is a pure function of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, streams::DATASET);
    let prototypes: Vec<Tensor> = (0..spec.n_classes)
        .map(|_| standard_normal_vector(spec.latent_dim, &mut rng).scale(spec.prototype_scale))
        .collect();
    let mut classes = Vec::with_capacity(spec.n_classes);
    for (id, proto) in prototypes.iter().enumerate() {
        let mut draw = |n: usize| -> Result<Vec<Tensor>> {
            (0..n)
                .map(|_| proto.add(&standard_normal_vector(spec.latent_dim, &mut rng).scale(spec.sigma_class)))
                .collect()
        };
        let train = draw(spec.train_per_class)?;
        let test = draw(spec.test_per_class)?;
        classes.push(ClassData {
            name: format!("class_{id}"),
            train,
            test,
        });
    }
    Ok(Dataset {
        latent_dim: spec.latent_dim,
        classes,
    })
}

/// An N-way K-shot task instance: per-class support exemplars drawn from
/// the train split plus every test sample of the selected classes as
/// held-out queries.
#[derive(Debug, Clone)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    /// class id -> support exemplars (exactly k_shot each).
    pub support: BTreeMap<usize, Vec<Tensor>>,
    /// (latent, class id) held-out queries, disjoint from the support.
    pub queries: Vec<(Tensor, usize)>,
}

pub fn build_episode(dataset: &Dataset, n_way: usize, k_shot: usize, seed: u64) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::InvalidArgument("n_way and k_shot must be positive".into()));
    }
    if n_way > dataset.n_classes() {
        return Err(Error::InsufficientData(format!(
            "episode wants {n_way} classes but the dataset has {}",
            dataset.n_classes()
        )));
    }
    let mut rng = stream_rng(seed, streams::EPISODE);
    let mut class_ids: Vec<usize> = (0..dataset.n_classes()).collect();
    for k in 0..n_way {
        let pick = rand::Rng::random_range(&mut rng, k..class_ids.len());
        class_ids.swap(k, pick);
    }
    class_ids.truncate(n_way);
    class_ids.sort_unstable();

    let mut support = BTreeMap::new();
    let mut queries = Vec::new();
    for &class_id in &class_ids {
        let class = &dataset.classes[class_id];
        if class.train.len() < k_shot {
            return Err(Error::InsufficientData(format!(
                "class {} has {} train samples, episode wants {k_shot}",
                class.name,
                class.train.len()
            )));
        }
        let mut indices: Vec<usize> = (0..class.train.len()).collect();
        for k in 0..k_shot {
            let pick = rand::Rng::random_range(&mut rng, k..indices.len());
            indices.swap(k, pick);
        }
        indices.truncate(k_shot);
        indices.sort_unstable();
        support.insert(class_id, indices.iter().map(|&i| class.train[i].clone()).collect());
        queries.extend(class.test.iter().map(|x| (x.clone(), class_id)));
    }
    Ok(Episode {
        n_way,
        k_shot,
        support,
        queries,
    })
}

/// A handcrafted prompt template: context words around one learnable
/// `[CLASS]` slot, plus the generic initializer word. Metadata at desk
/// scale; resolved into reports and reserved for external text-encoder
/// backends.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub dataset: String,
    pub template: String,
    pub initializer_word: String,
}

impl PromptTemplate {
    pub fn new(dataset: &str, template: &str, initializer_word: &str) -> Result<Self> {
        if template.matches("[CLASS]").count() != 1 {
            return Err(Error::InvalidArgument(format!(
                "template must contain \"[CLASS]\" exactly once: {template:?}"
            )));
        }
        Ok(Self {
            dataset: dataset.into(),
            template: template.into(),
            initializer_word: initializer_word.into(),
        })
    }
}

const TEMPLATE_TABLE: &[(&str, &str, &str)] = &[
    ("StanfordCars", "A photo of [CLASS], a type of car.", "car"),
    ("Cornseeds", "A photo of [CLASS] corn seed.", "seed"),
    ("CRC5k", "[CLASS] tissue.", "tissue"),
    ("ISIC2018", "[CLASS] skin lesion.", "skin"),
    ("LC25000", "[CLASS] tissue.", "tissue"),
    ("Fractals", "[CLASS] fractal.", "fractal"),
];

/// Looks up the registered template for a dataset name.
pub fn resolve_template(dataset_name: &str) -> Result<PromptTemplate> {
    TEMPLATE_TABLE
        .iter()
        .find(|(name, _, _)| *name == dataset_name)
        .map(|(name, template, word)| PromptTemplate::new(name, template, word))
        .unwrap_or_else(|| {
            let known: Vec<&str> = TEMPLATE_TABLE.iter().map(|(n, _, _)| *n).collect();
            Err(Error::InvalidArgument(format!(
                "unknown dataset {dataset_name:?}; known datasets: {known:?}"
            )))
        })
}

pub fn known_template_names() -> Vec<&'static str> {
    TEMPLATE_TABLE.iter().map(|(n, _, _)| *n).collect()
}

/// Prompt-learning method selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gcpl,
    Comple,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Gcpl => write!(f, "gcpl"),
            Method::Comple => write!(f, "comple"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcpl" => Ok(Method::Gcpl),
            "comple" => Ok(Method::Comple),
            other => Err(Error::InvalidArgument(format!(
                "unknown method {other:?}; expected \"gcpl\" or \"comple\""
            ))),
        }
    }
}

/// One (shots, seed) benchmark measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkCell {
    pub method: Method,
    pub shots: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub wall_clock_s: f64,
}

/// Accuracy aggregated over seeds at one shot count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShotSummary {
    pub shots: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation; present only with two or more seeds.
    pub std_accuracy: Option<f64>,
    pub n_seeds: usize,
}

/// Full sweep results for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub method: Method,
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub cells: Vec<BenchmarkCell>,
    pub summaries: Vec<ShotSummary>,
    pub wall_clock_s: f64,
    pub template: Option<PromptTemplate>,
}

impl BenchmarkReport {
    pub fn summary_for(&self, shots: usize) -> Option<&ShotSummary> {
        self.summaries.iter().find(|s| s.shots == shots)
    }
}

/// Settings shared by every cell of a sweep.
pub struct BenchmarkSettings {
    pub n_way: usize,
    pub gcpl: GcplConfig,
    pub comple: CompleConfig,
    pub classifier: ClassifierConfig,
    pub template: Option<PromptTemplate>,
}

/// Trains prompts for one episode with the chosen method. Per-class runs
/// are independent under the per-class noise streams, so the per-class
/// route fans out across threads.
pub fn train_episode_prompts<D: Denoiser + Sync>(
    method: Method,
    episode: &Episode,
    settings: &BenchmarkSettings,
    cell_seed: u64,
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<Vec<ClassPrompt>> {
    match method {
        Method::Gcpl => {
            let mut cfg = settings.gcpl.clone();
            cfg.seed = cell_seed;
            let mut prompts = episode
                .support
                .par_iter()
                .map(|(&class_id, support)| train_gcpl(class_id, support, &cfg, model, schedule).map(|(p, _)| p))
                .collect::<Result<Vec<_>>>()?;
            prompts.sort_by_key(|p| p.class_id);
            Ok(prompts)
        }
        Method::Comple => {
            let mut cfg = settings.comple.clone();
            cfg.seed = cell_seed;
            let (prompts, _) = train_comple(&episode.support, &cfg, model, schedule)?;
            Ok(prompts)
        }
    }
}

/// Classifies every query of an episode and returns the accuracy. Queries
/// fan out across threads, each with its own derived pair seed, so the
/// result is independent of evaluation order.
pub fn evaluate_prompts<D: Denoiser + Sync>(
    episode: &Episode,
    prompts: &[ClassPrompt],
    classifier: &ClassifierConfig,
    cell_seed: u64,
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let correct: usize = episode
        .queries
        .par_iter()
        .enumerate()
        .map(|(query_idx, (x, label))| {
            let cfg = ClassifierConfig {
                seed: derive_seed(cell_seed, streams::QUERY_BASE + query_idx as u64),
                ..*classifier
            };
            classify(x, prompts, &cfg, model, schedule).map(|report| usize::from(report.predicted == *label))
        })
        .try_reduce(|| 0usize, |a, b| Ok(a + b))?;
    Ok(correct as f64 / episode.queries.len() as f64)
}

/// Runs the full sweep for one method: for each (shot, seed), build an
/// episode, train prompts, classify the held-out queries, and aggregate
/// mean and standard deviation per shot count.
pub fn run_benchmark<D: Denoiser + Sync>(
    dataset: &Dataset,
    method: Method,
    shots: &[usize],
    seeds: &[u64],
    settings: &BenchmarkSettings,
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<BenchmarkReport> {
    if shots.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("benchmark needs at least one shot count and one seed".into()));
    }
    let sweep_start = Instant::now();
    let mut cells = Vec::new();
    for &shot in shots {
        for &seed in seeds {
            let cell_start = Instant::now();
            let cell = (|| -> Result<BenchmarkCell> {
                let episode = build_episode(dataset, settings.n_way, shot, seed)?;
                let prompts = train_episode_prompts(method, &episode, settings, seed, model, schedule)?;
                let accuracy = evaluate_prompts(&episode, &prompts, &settings.classifier, seed, model, schedule)?;
                Ok(BenchmarkCell {
                    method,
                    shots: shot,
                    seed,
                    accuracy,
                    wall_clock_s: cell_start.elapsed().as_secs_f64(),
                })
            })()
            .map_err(|e| Error::InvalidArgument(format!("benchmark cell (shots={shot}, seed={seed}): {e}")))?;
            cells.push(cell);
        }
    }

    let summaries = shots
        .iter()
        .map(|&shot| {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| c.shots == shot)
                .map(|c| c.accuracy)
                .collect();
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let std = (accs.len() >= 2).then(|| {
                (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (accs.len() - 1) as f64).sqrt()
            });
            ShotSummary {
                shots: shot,
                mean_accuracy: mean,
                std_accuracy: std,
                n_seeds: accs.len(),
            }
        })
        .collect();

    Ok(BenchmarkReport {
        method,
        shots: shots.to_vec(),
        seeds: seeds.to_vec(),
        cells,
        summaries,
        wall_clock_s: sweep_start.elapsed().as_secs_f64(),
        template: settings.template.clone(),
    })
}

/// Untrained standard-normal prompts: the chance-level null control.
pub fn null_prompts(class_ids: &[usize], cond_dim: usize, seed: u64) -> Vec<ClassPrompt> {
    let mut rng = stream_rng(seed, streams::NULL_PROMPTS);
    class_ids
        .iter()
        .map(|&class_id| ClassPrompt {
            class_id,
            embedding: ConditionEmbedding::new(standard_normal_vector(cond_dim, &mut rng))
                .expect("normal draws form a valid embedding"),
            initializer_ref: "null".into(),
        })
        .collect()
}

/// Serializes benchmark cells as the CSV table
/// `method,shots,seed,accuracy,wall_clock_s`.
pub fn benchmark_csv(reports: &[BenchmarkReport]) -> String {
    let mut out = String::from("method,shots,seed,accuracy,wall_clock_s\n");
    for report in reports {
        for cell in &report.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                cell.method, cell.shots, cell.seed, cell.accuracy, cell.wall_clock_s
            ));
        }
    }
    out
}

/// Writes one latent to the single-sample file format: magic, version,
/// length, then little-endian f32 values.
pub fn write_latent(path: &Path, latent: &Tensor) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let inner = |w: &mut BufWriter<std::fs::File>| -> std::io::Result<()> {
        format::write_magic(w, LATENT_MAGIC, LATENT_VERSION)?;
        format::write_u32(w, latent.len() as u32)?;
        format::write_f32s(w, latent.data())?;
        w.flush()
    };
    inner(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: &Path) -> Result<Tensor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_latent_from(&mut r)
}

pub fn read_latent_from<R: Read>(r: &mut R) -> Result<Tensor> {
    format::read_magic(r, LATENT_MAGIC, LATENT_VERSION)?;
    let dim = format::read_u32(r)? as usize;
    if dim == 0 {
        return Err(Error::Format("latent file holds an empty vector".into()));
    }
    let values = format::read_f32s(r, dim)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after latent payload".into()));
    }
    Tensor::new(vec![dim], values).map_err(|e| Error::Format(format!("invalid stored latent: {e}")))
}

/// Writes `queries` under `dir/<class_name>/NNNN.lat`.
pub fn write_latent_folder(dir: &Path, queries: &[(String, Tensor)]) -> Result<()> {
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    for (name, latent) in queries {
        let class_dir = dir.join(name);
        std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        let counter = counters.entry(name.as_str()).or_insert(0);
        write_latent(&class_dir.join(format!("{counter:04}.lat")), latent)?;
        *counter += 1;
    }
    Ok(())
}

/// Reads every `*.lat` under `dir`, labeling samples by their immediate
/// directory name. Entries come back sorted by (label, file name).
pub fn read_latent_folder(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut entries: Vec<(String, PathBuf)> = Vec::new();
    let listing = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            let label = entry.file_name().to_string_lossy().into_owned();
            let inner = std::fs::read_dir(&path).map_err(|e| Error::io(&path, e))?;
            for file in inner {
                let file = file.map_err(|e| Error::io(&path, e))?;
                let file_path = file.path();
                if file_path.extension().is_some_and(|ext| ext == "lat") {
                    entries.push((label.clone(), file_path));
                }
            }
        } else if path.extension().is_some_and(|ext| ext == "lat") {
            entries.push((String::new(), path));
        }
    }
    if entries.is_empty() {
        return Err(Error::InsufficientData(format!("no .lat files under {}", dir.display())));
    }
    entries.sort();
    entries
        .into_iter()
        .map(|(label, path)| Ok((label, read_latent(&path)?)))
        .collect()
}
