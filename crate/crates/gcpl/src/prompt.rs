//! Class-prompt learning through a frozen denoiser.
//!
//! Two training routes share the same per-sample machinery: per-class
//! training minimizes the noise-prediction error of a single class prompt
//! over its support set, and joint contrastive training optimizes all class
//! prompts simultaneously, additionally pushing each prediction away from
//! the ground-truth noises of other classes in the batch.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditionEmbedding, Denoiser};
use crate::error::{Error, Result};
use crate::format;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{stream_rng, streams};
use crate::schedule::{add_noise, sample_pairs, standard_normal_vector, NoiseSchedule, TimestepNoisePair};
use crate::tensor::{mse_f64, GradientRecord, ParamId, Tensor};

const STORE_MAGIC: &[u8] = b"GCPLEMB";
const STORE_VERSION: u32 = 1;

/// A learnable per-class conditioning embedding.
#[derive(Debug, Clone)]
pub struct ClassPrompt {
    pub class_id: usize,
    pub embedding: ConditionEmbedding,
    /// Name of the initializer this prompt started from.
    pub initializer_ref: String,
}

/// How prompts are initialized before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum PromptInit {
    /// Backbone's mean pretraining condition plus N(0, sigma^2) noise:
    /// a class-agnostic "generic concept" starting point.
    CondMean { sigma: f32 },
    /// Pure N(0, sigma^2) start.
    RandomNormal { sigma: f32 },
}

impl Default for PromptInit {
    fn default() -> Self {
        PromptInit::CondMean { sigma: 0.02 }
    }
}

impl PromptInit {
    fn describe(&self) -> String {
        match self {
            PromptInit::CondMean { sigma } => format!("cond-mean+noise({sigma})"),
            PromptInit::RandomNormal { sigma } => format!("random-normal({sigma})"),
        }
    }
}

/// Per-class training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GcplConfig {
    /// One epoch is one optimizer step over the full support set.
    pub epochs: usize,
    pub optim: AdamWConfig,
    pub init: PromptInit,
    pub seed: u64,
}

impl Default for GcplConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            optim: AdamWConfig::with_lr(5e-4),
            init: PromptInit::default(),
            seed: 0,
        }
    }
}

impl GcplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        self.optim.validate()
    }
}

/// Joint contrastive training settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompleConfig {
    /// One epoch is one optimizer step over a sampled batch.
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the repulsive cross-class term.
    pub lambda: f64,
    /// Optional cap on each repulsive pair contribution; off by default so
    /// the loss follows its definition literally.
    pub negative_margin: Option<f64>,
    pub optim: AdamWConfig,
    pub init: PromptInit,
    pub seed: u64,
}

impl Default for CompleConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            batch_size: 4,
            lambda: 0.001,
            negative_margin: None,
            optim: AdamWConfig::with_lr(1e-3),
            init: PromptInit::default(),
            seed: 0,
        }
    }
}

impl CompleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument("lambda must be >= 0".into()));
        }
        self.optim.validate()
    }
}

/// First/last training losses, for endpoint checks and logs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainReport {
    pub first_loss: f64,
    pub final_loss: f64,
}

fn require_frozen<D: Denoiser>(model: &D, what: &'static str) -> Result<()> {
    if !model.is_frozen() {
        return Err(Error::NotFrozen(what));
    }
    Ok(())
}

/// Non-finite values surfacing inside a training step are divergence;
/// attach the step index.
fn divergence_guard<T>(result: Result<T>, step: usize) -> Result<T> {
    result.map_err(|e| match e {
        Error::NonFinite(what) => Error::Divergence { step, what },
        other => other,
    })
}

/// Deterministic prompt initialization for one class.
pub fn init_prompt_embedding<D: Denoiser>(
    model: &D,
    class_id: usize,
    init: PromptInit,
    seed: u64,
) -> Result<ConditionEmbedding> {
    let dim = model.cond_dim();
    let mut rng = stream_rng(seed, streams::PROMPT_INIT_BASE + class_id as u64);
    let vector = match init {
        PromptInit::CondMean { sigma } => model
            .prompt_init_anchor()
            .add(&standard_normal_vector(dim, &mut rng).scale(sigma))?,
        PromptInit::RandomNormal { sigma } => standard_normal_vector(dim, &mut rng).scale(sigma),
    };
    ConditionEmbedding::new(vector)
}

/// Evaluates one exemplar under one draw: returns the loss contribution and
/// the prompt gradient, both scaled by `inv_batch`. Shared verbatim by both
/// training routes so their per-sample arithmetic is bit-identical.
fn sample_loss_and_grad<D: Denoiser>(
    model: &D,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    pair: &TimestepNoisePair,
    embedding: &ConditionEmbedding,
    inv_batch: f64,
) -> Result<(f64, Tensor)> {
    let noised = add_noise(x0, &pair.eps, pair.t, schedule)?;
    let out = model.predict_f64(&noised.xt, pair.t, embedding)?;
    let eps = pair.eps.to_f64();
    let loss = mse_f64(&eps, &out) * inv_batch;
    let scale = 2.0 * inv_batch / out.len() as f64;
    let upstream: Vec<f64> = out.iter().zip(&eps).map(|(&o, &e)| (o - e) * scale).collect();
    let grad = model.condition_gradient(&noised.xt, pair.t, embedding, &upstream)?;
    Ok((loss, grad))
}

/// Batch-mean noise-prediction loss of one class prompt over its exemplars,
/// with pre-drawn (t, eps) pairs (one per exemplar). Returns the loss and
/// the gradient with respect to the prompt embedding; nothing else receives
/// gradient.
pub fn gcpl_loss_with_pairs<D: Denoiser>(
    exemplars: &[Tensor],
    pairs: &[TimestepNoisePair],
    embedding: &ConditionEmbedding,
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<(f64, Tensor)> {
    require_frozen(model, "prompt-loss evaluation")?;
    if exemplars.is_empty() {
        return Err(Error::InsufficientData("prompt loss needs at least one exemplar".into()));
    }
    if exemplars.len() != pairs.len() {
        return Err(Error::InvalidArgument(format!(
            "need one (t, eps) pair per exemplar: {} exemplars, {} pairs",
            exemplars.len(),
            pairs.len()
        )));
    }
    let inv_batch = 1.0 / exemplars.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(vec![model.cond_dim()]);
    for (x0, pair) in exemplars.iter().zip(pairs) {
        let (l, g) = sample_loss_and_grad(model, schedule, x0, pair, embedding, inv_batch)?;
        loss += l;
        grad = grad.add(&g)?;
    }
    Ok((loss, grad))
}

/// As [`gcpl_loss_with_pairs`] with fresh draws from `rng`.
pub fn gcpl_loss<D: Denoiser, R: Rng>(
    exemplars: &[Tensor],
    embedding: &ConditionEmbedding,
    model: &D,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, Tensor)> {
    if exemplars.is_empty() {
        return Err(Error::InsufficientData("prompt loss needs at least one exemplar".into()));
    }
    let pairs = sample_pairs(exemplars.len(), schedule.t_max(), model.latent_dim(), rng)?;
    gcpl_loss_with_pairs(exemplars, &pairs, embedding, model, schedule)
}

/// Learns one class prompt by gradient descent through the frozen model.
///
/// Each epoch draws fresh (t, eps) pairs for the whole support set and
/// applies one optimizer step. Noise draws come from the per-class stream
/// `(seed, class_id)`, so runs for different classes are independent and
/// may execute in parallel.
pub fn train_gcpl<D: Denoiser>(
    class_id: usize,
    support: &[Tensor],
    cfg: &GcplConfig,
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<(ClassPrompt, TrainReport)> {
    cfg.validate()?;
    require_frozen(model, "prompt training")?;
    if support.is_empty() {
        return Err(Error::InsufficientData(format!("class {class_id} has an empty support set")));
    }
    check_dims(model, schedule)?;

    let embedding = init_prompt_embedding(model, class_id, cfg.init, cfg.seed)?;
    let mut params = BTreeMap::from([(ParamId::Prompt(class_id), embedding.vector().clone())]);
    let mut optimizer = AdamW::new(cfg.optim)?;
    let mut noise_rng = stream_rng(cfg.seed, streams::PROMPT_NOISE_BASE + class_id as u64);

    let mut first_loss = 0.0f64;
    let mut final_loss = 0.0f64;
    for epoch in 0..cfg.epochs {
        let current = ConditionEmbedding::new(params[&ParamId::Prompt(class_id)].clone())?;
        let pairs = sample_pairs(support.len(), schedule.t_max(), model.latent_dim(), &mut noise_rng)?;
        let (loss, grad) =
            divergence_guard(gcpl_loss_with_pairs(support, &pairs, &current, model, schedule), epoch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: epoch,
                what: format!("prompt loss for class {class_id} is not finite"),
            });
        }
        if epoch == 0 {
            first_loss = loss;
        }
        final_loss = loss;
        let mut grads = GradientRecord::new();
        grads.insert(ParamId::Prompt(class_id), grad);
        divergence_guard(optimizer.step(&mut params, &grads), epoch)?;
    }

    let prompt = ClassPrompt {
        class_id,
        embedding: ConditionEmbedding::new(params.remove(&ParamId::Prompt(class_id)).unwrap())?,
        initializer_ref: cfg.init.describe(),
    };
    Ok((
        prompt,
        TrainReport {
            first_loss,
            final_loss,
        },
    ))
}

/// One batch element for the contrastive loss: a labeled exemplar with its
/// own (t, eps) draw.
#[derive(Debug, Clone)]
pub struct CompleSample {
    pub class_id: usize,
    pub x0: Tensor,
    pub pair: TimestepNoisePair,
}

/// Value and gradients of the contrastive multi-class loss on one batch.
#[derive(Debug, Clone)]
pub struct CompleLoss {
    /// positive - lambda * negative
    pub total: f64,
    /// Mean attraction term over the batch.
    pub positive: f64,
    /// Mean repulsion term over cross-class ordered pairs (0 when B = 1).
    pub negative: f64,
    /// Gradients keyed by `ParamId::Prompt(class_id)`, covering exactly the
    /// classes present in the batch.
    pub grads: GradientRecord,
}

/// Contrastive multi-class loss over a batch of B labeled samples.
///
/// The attraction term is the batch-mean error of each prediction against
/// its own ground-truth noise. The repulsion term compares prediction `j`
/// against the ground-truth noises of the *other* samples `i != j`,
/// skipping pairs whose samples share a class, and is normalized by the
/// count of contributing ordered pairs (`B(B-1)` when all classes are
/// distinct; defined as 0 when no pair contributes).
pub fn comple_loss_with_pairs<D: Denoiser>(
    batch: &[CompleSample],
    prompts: &BTreeMap<usize, ConditionEmbedding>,
    lambda: f64,
    negative_margin: Option<f64>,
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<CompleLoss> {
    require_frozen(model, "contrastive loss evaluation")?;
    if batch.is_empty() {
        return Err(Error::InsufficientData("contrastive loss needs at least one sample".into()));
    }
    for sample in batch {
        if !prompts.contains_key(&sample.class_id) {
            return Err(Error::UnknownClass(sample.class_id));
        }
    }
    let b = batch.len();
    let inv_batch = 1.0 / b as f64;
    let dim = model.latent_dim() as f64;

    // Ordered cross-class pairs (i, j): prediction j vs ground truth i.
    let valid_pair = |i: usize, j: usize| i != j && batch[i].class_id != batch[j].class_id;
    let pair_count = (0..b)
        .flat_map(|i| (0..b).map(move |j| (i, j)))
        .filter(|&(i, j)| valid_pair(i, j))
        .count();
    let inv_pairs = if pair_count > 0 { 1.0 / pair_count as f64 } else { 0.0 };

    let mut positive = 0.0f64;
    let mut negative = 0.0f64;
    let mut grads = GradientRecord::new();

    for j in 0..b {
        let sample = &batch[j];
        let embedding = &prompts[&sample.class_id];
        let noised = add_noise(&sample.x0, &sample.pair.eps, sample.pair.t, schedule)?;
        let out = model.predict_f64(&noised.xt, sample.pair.t, embedding)?;
        let eps_j = sample.pair.eps.to_f64();
        positive += mse_f64(&eps_j, &out) * inv_batch;

        // d(total)/d(out_j): attraction pulls toward eps_j, repulsion pushes
        // away from every other contributing sample's ground truth.
        let pos_scale = 2.0 * inv_batch / dim;
        let mut upstream: Vec<f64> = out.iter().zip(&eps_j).map(|(&o, &e)| (o - e) * pos_scale).collect();
        for i in 0..b {
            if !valid_pair(i, j) {
                continue;
            }
            let eps_i = batch[i].pair.eps.to_f64();
            let term = mse_f64(&eps_i, &out);
            let capped = negative_margin.is_some_and(|m| term >= m);
            let value = if capped { negative_margin.unwrap() } else { term };
            negative += value * inv_pairs;
            if lambda != 0.0 && !capped {
                let neg_scale = lambda * 2.0 * inv_pairs / dim;
                for (u, (&o, &e)) in upstream.iter_mut().zip(out.iter().zip(&eps_i)) {
                    *u -= (o - e) * neg_scale;
                }
            }
        }

        let grad = model.condition_gradient(&noised.xt, sample.pair.t, embedding, &upstream)?;
        grads.accumulate(ParamId::Prompt(sample.class_id), grad)?;
    }

    Ok(CompleLoss {
        total: positive - lambda * negative,
        positive,
        negative,
        grads,
    })
}

/// As [`comple_loss_with_pairs`] but drawing one (t, eps) pair per sample
/// from `rng` in batch order.
pub fn comple_loss<D: Denoiser, R: Rng>(
    batch: &[(usize, Tensor)],
    prompts: &BTreeMap<usize, ConditionEmbedding>,
    lambda: f64,
    negative_margin: Option<f64>,
    model: &D,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<CompleLoss> {
    let samples = batch
        .iter()
        .map(|(class_id, x0)| {
            let pair = sample_pairs(1, schedule.t_max(), model.latent_dim(), rng)?.pop().unwrap();
            Ok(CompleSample {
                class_id: *class_id,
                x0: x0.clone(),
                pair,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    comple_loss_with_pairs(&samples, prompts, lambda, negative_margin, model, schedule)
}

/// Jointly trains all class prompts with the contrastive objective.
///
/// Each step samples `batch_size` distinct classes where possible (falling
/// back to replacement when fewer classes exist), one exemplar each, and
/// applies one update of a single optimizer over the concatenated prompt
/// parameters. Noise draws use the same per-class streams as the per-class
/// trainer; batch composition draws use a separate stream.
pub fn train_comple<D: Denoiser>(
    support_sets: &BTreeMap<usize, Vec<Tensor>>,
    cfg: &CompleConfig,
    model: &D,
    schedule: &NoiseSchedule,
) -> Result<(Vec<ClassPrompt>, TrainReport)> {
    cfg.validate()?;
    require_frozen(model, "prompt training")?;
    if support_sets.is_empty() {
        return Err(Error::InsufficientData("joint training needs at least one class".into()));
    }
    for (class_id, support) in support_sets {
        if support.is_empty() {
            return Err(Error::InsufficientData(format!("class {class_id} has an empty support set")));
        }
    }
    check_dims(model, schedule)?;

    let class_ids: Vec<usize> = support_sets.keys().copied().collect();
    let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
    for &class_id in &class_ids {
        let embedding = init_prompt_embedding(model, class_id, cfg.init, cfg.seed)?;
        params.insert(ParamId::Prompt(class_id), embedding.vector().clone());
    }
    let mut optimizer = AdamW::new(cfg.optim)?;
    let mut composition_rng = stream_rng(cfg.seed, streams::COMPOSITION);
    let mut noise_rngs: BTreeMap<usize, rand_chacha::ChaCha12Rng> = class_ids
        .iter()
        .map(|&c| (c, stream_rng(cfg.seed, streams::PROMPT_NOISE_BASE + c as u64)))
        .collect();

    let mut first_loss = 0.0f64;
    let mut final_loss = 0.0f64;
    for epoch in 0..cfg.epochs {
        // Batch composition: distinct classes via partial shuffle when
        // enough classes exist, otherwise uniform with replacement.
        let chosen: Vec<usize> = if class_ids.len() >= cfg.batch_size {
            let mut pool = class_ids.clone();
            for k in 0..cfg.batch_size {
                let pick = composition_rng.random_range(k..pool.len());
                pool.swap(k, pick);
            }
            pool.truncate(cfg.batch_size);
            pool
        } else {
            (0..cfg.batch_size)
                .map(|_| class_ids[composition_rng.random_range(0..class_ids.len())])
                .collect()
        };

        let mut batch = Vec::with_capacity(cfg.batch_size);
        for &class_id in &chosen {
            let support = &support_sets[&class_id];
            let exemplar = support[composition_rng.random_range(0..support.len())].clone();
            let rng = noise_rngs.get_mut(&class_id).unwrap();
            let pair = sample_pairs(1, schedule.t_max(), model.latent_dim(), rng)?.pop().unwrap();
            batch.push(CompleSample {
                class_id,
                x0: exemplar,
                pair,
            });
        }

        let prompts: BTreeMap<usize, ConditionEmbedding> = class_ids
            .iter()
            .map(|&c| Ok((c, ConditionEmbedding::new(params[&ParamId::Prompt(c)].clone())?)))
            .collect::<Result<_>>()?;
        let loss = divergence_guard(
            comple_loss_with_pairs(&batch, &prompts, cfg.lambda, cfg.negative_margin, model, schedule),
            epoch,
        )?;
        if !loss.total.is_finite() {
            return Err(Error::Divergence {
                step: epoch,
                what: "contrastive loss is not finite".into(),
            });
        }
        if epoch == 0 {
            first_loss = loss.total;
        }
        final_loss = loss.total;

        // Untouched prompts receive zero gradient; the joint parameter
        // vector still steps as one unit (moment decay and weight decay
        // apply everywhere).
        let mut grads = loss.grads;
        for &class_id in &class_ids {
            let id = ParamId::Prompt(class_id);
            if !grads.contains(&id) {
                grads.insert(id, Tensor::zeros(vec![model.cond_dim()]));
            }
        }
        divergence_guard(optimizer.step(&mut params, &grads), epoch)?;
    }

    let prompts = class_ids
        .iter()
        .map(|&class_id| {
            Ok(ClassPrompt {
                class_id,
                embedding: ConditionEmbedding::new(params[&ParamId::Prompt(class_id)].clone())?,
                initializer_ref: cfg.init.describe(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        prompts,
        TrainReport {
            first_loss,
            final_loss,
        },
    ))
}

fn check_dims<D: Denoiser>(model: &D, schedule: &NoiseSchedule) -> Result<()> {
    if schedule.t_max() != model.max_timestep() {
        return Err(Error::InvalidArgument(format!(
            "schedule covers {} timesteps but the model expects {}",
            schedule.t_max(),
            model.max_timestep()
        )));
    }
    Ok(())
}

/// Named learned embeddings, persisted as a versioned binary store.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub cond_dim: usize,
    /// (class name, embedding) in class-id order.
    pub entries: Vec<(String, Tensor)>,
}

impl EmbeddingStore {
    pub fn from_prompts(prompts: &[ClassPrompt], names: &[String]) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::InsufficientData("embedding store needs at least one prompt".into()));
        }
        if prompts.len() != names.len() {
            return Err(Error::InvalidArgument(format!(
                "{} prompts but {} class names",
                prompts.len(),
                names.len()
            )));
        }
        let cond_dim = prompts[0].embedding.dim();
        let entries = prompts
            .iter()
            .zip(names)
            .map(|(p, n)| (n.clone(), p.embedding.vector().clone()))
            .collect();
        Ok(Self { cond_dim, entries })
    }

    /// Rebuilds prompts; class ids are assigned by store position.
    pub fn to_prompts(&self) -> Result<Vec<ClassPrompt>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(class_id, (name, embedding))| {
                Ok(ClassPrompt {
                    class_id,
                    embedding: ConditionEmbedding::new(embedding.clone())?,
                    initializer_ref: format!("stored:{name}"),
                })
            })
            .collect()
    }

    pub fn save<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        format::write_magic(w, STORE_MAGIC, STORE_VERSION)?;
        format::write_u32(w, self.cond_dim as u32)?;
        format::write_u32(w, self.entries.len() as u32)?;
        for (name, embedding) in &self.entries {
            format::write_string(w, name)?;
            format::write_f32s(w, embedding.data())?;
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.save(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        format::read_magic(r, STORE_MAGIC, STORE_VERSION)?;
        let cond_dim = format::read_u32(r)? as usize;
        let count = format::read_u32(r)? as usize;
        if cond_dim == 0 || count == 0 {
            return Err(Error::Format("embedding store must hold at least one class".into()));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = format::read_string(r)?;
            let values = format::read_f32s(r, cond_dim)?;
            let embedding = Tensor::new(vec![cond_dim], values)
                .map_err(|e| Error::Format(format!("invalid stored embedding: {e}")))?;
            entries.push((name, embedding));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::Format(e.to_string()))? != 0 {
            return Err(Error::Format("trailing bytes after embedding store payload".into()));
        }
        Ok(Self { cond_dim, entries })
    }

    pub fn load_from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::load(&mut BufReader::new(file))
    }
}
