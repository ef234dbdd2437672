//! The conditional noise predictor: a compact fixed-architecture network
//! (two SiLU hidden layers over the concatenation of the noised latent, a
//! sinusoidal time embedding, and the conditioning embedding), its
//! pretraining into a frozen backbone, and the latent codec standing in
//! for a pretrained autoencoder.
//!
//! Parameters and all public tensors are f32; the forward and backward
//! passes run internally in f64 so that finite-difference gradient checks
//! against the loss paths are not drowned by rounding noise.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{stream_rng, streams};
use crate::schedule::{add_noise, standard_normal_vector, NoiseSchedule};
use crate::tensor::{mse_f64, GradientRecord, ParamId, Tensor};

const MODEL_MAGIC: &[u8] = b"GCPLDNZ";
const MODEL_VERSION: u32 = 1;
const HIDDEN_LAYERS: u32 = 2;

/// A conditioning embedding: a finite 1-D vector fed to the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    vector: Tensor,
}

impl ConditionEmbedding {
    pub fn new(vector: Tensor) -> Result<Self> {
        if vector.shape().len() != 1 {
            return Err(Error::ShapeMismatch {
                context: "ConditionEmbedding::new",
                expected: vec![vector.len()],
                got: vector.shape().to_vec(),
            });
        }
        Ok(Self { vector })
    }

    pub fn vector(&self) -> &Tensor {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Draws one conditioning embedding per class from per-class streams, each
/// entry N(0, scale^2). Used as the "true" conditions during pretraining.
pub fn make_class_conditions(n_classes: usize, cond_dim: usize, scale: f32, seed: u64) -> Vec<ConditionEmbedding> {
    (0..n_classes)
        .map(|c| {
            let mut rng = stream_rng(seed, streams::CLASS_CONDITION_BASE + c as u64);
            ConditionEmbedding::new(standard_normal_vector(cond_dim, &mut rng).scale(scale))
                .expect("normal draws form a valid embedding")
        })
        .collect()
}

/// Fixed architecture descriptor. The layer count is pinned at two hidden
/// layers; widths and the timestep range are configurable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub latent_dim: usize,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
    pub hidden_dim: usize,
    pub max_timestep: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            time_embed_dim: 16,
            cond_dim: 16,
            hidden_dim: 128,
            max_timestep: 1000,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.cond_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("architecture dimensions must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "time_embed_dim must be even and >= 2, got {}",
                self.time_embed_dim
            )));
        }
        if self.max_timestep == 0 {
            return Err(Error::InvalidArgument("max_timestep must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.time_embed_dim + self.cond_dim
    }
}

/// Sinusoidal timestep features with `dim/2` frequencies geometrically
/// spaced from 1 down to 1/t_max: `w_i = t_max^(-i/(dim/2 - 1))`, features
/// `[sin(t w_0).., cos(t w_0)..]`.
pub fn time_embedding(t: usize, dim: usize, t_max: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0f64; dim];
    for i in 0..half {
        let exponent = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = (t_max as f64).powf(-exponent);
        let angle = t as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_derivative(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Abstraction over conditional noise predictors so that losses and the
/// classifier also run against verification stubs.
pub trait Denoiser {
    fn latent_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn max_timestep(&self) -> usize;
    fn is_frozen(&self) -> bool;

    /// Predicted noise with the same shape as `xt`, in f64 for loss paths.
    fn predict_f64(&self, xt: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Vec<f64>>;

    /// Gradient of `upstream . output` with respect to the conditioning
    /// embedding, where `upstream` is d(loss)/d(output) in f64.
    fn condition_gradient(
        &self,
        xt: &Tensor,
        t: usize,
        cond: &ConditionEmbedding,
        upstream: &[f64],
    ) -> Result<Tensor>;

    /// Predicted noise rounded to f32; errors if any output is non-finite.
    fn predict(&self, xt: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Tensor> {
        let out: Vec<f32> = self.predict_f64(xt, t, cond)?.iter().map(|&v| v as f32).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Tensor::new(vec![self.latent_dim()], out)
    }

    /// Embedding that anchors prompt initialization; the mean pretraining
    /// condition for a trained backbone, zero otherwise.
    fn prompt_init_anchor(&self) -> Tensor {
        Tensor::zeros(vec![self.cond_dim()])
    }
}

struct ForwardTrace {
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    out: Vec<f64>,
}

/// The trainable conditional noise predictor.
///
/// Once `frozen` is set no code path mutates the parameters; prompt
/// learning and classification require a frozen model.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    arch: Architecture,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    w3: Tensor,
    b3: Tensor,
    /// Mean of the pretraining class conditions; anchors prompt
    /// initialization when training from a stored backbone.
    cond_mean: Tensor,
    frozen: bool,
}

impl DenoiserModel {
    /// Zero-initialized model (useful for contract tests).
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            w1: Tensor::zeros(vec![arch.hidden_dim, arch.input_dim()]),
            b1: Tensor::zeros(vec![arch.hidden_dim]),
            w2: Tensor::zeros(vec![arch.hidden_dim, arch.hidden_dim]),
            b2: Tensor::zeros(vec![arch.hidden_dim]),
            w3: Tensor::zeros(vec![arch.latent_dim, arch.hidden_dim]),
            b3: Tensor::zeros(vec![arch.latent_dim]),
            cond_mean: Tensor::zeros(vec![arch.cond_dim]),
            frozen: false,
        })
    }

    /// Random initialization: weights N(0, 1/fan_in), biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream_rng(seed, streams::MODEL_INIT);
        let mut layer = |rows: usize, cols: usize| -> Tensor {
            let std = 1.0 / (cols as f64).sqrt();
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    (z * std) as f32
                })
                .collect();
            Tensor::matrix(rows, cols, data).expect("finite init")
        };
        Ok(Self {
            arch,
            w1: layer(arch.hidden_dim, arch.input_dim()),
            b1: Tensor::zeros(vec![arch.hidden_dim]),
            w2: layer(arch.hidden_dim, arch.hidden_dim),
            b2: Tensor::zeros(vec![arch.hidden_dim]),
            w3: layer(arch.latent_dim, arch.hidden_dim),
            b3: Tensor::zeros(vec![arch.latent_dim]),
            cond_mean: Tensor::zeros(vec![arch.cond_dim]),
            frozen: false,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Mean of the pretraining class conditions (zero if never pretrained).
    pub fn cond_mean(&self) -> &Tensor {
        &self.cond_mean
    }

    fn check_inputs(&self, xt: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<()> {
        if xt.shape() != [self.arch.latent_dim] {
            return Err(Error::ShapeMismatch {
                context: "denoiser latent input",
                expected: vec![self.arch.latent_dim],
                got: xt.shape().to_vec(),
            });
        }
        if cond.dim() != self.arch.cond_dim {
            return Err(Error::ShapeMismatch {
                context: "denoiser conditioning input",
                expected: vec![self.arch.cond_dim],
                got: vec![cond.dim()],
            });
        }
        if t == 0 || t > self.arch.max_timestep {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.arch.max_timestep
            )));
        }
        Ok(())
    }

    fn forward_trace(&self, xt: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<ForwardTrace> {
        self.check_inputs(xt, t, cond)?;
        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend(xt.data().iter().map(|&v| v as f64));
        input.extend(time_embedding(t, self.arch.time_embed_dim, self.arch.max_timestep));
        input.extend(cond.vector().data().iter().map(|&v| v as f64));

        let z1 = affine_f64(&self.w1, &self.b1, &input);
        let a1: Vec<f64> = z1.iter().map(|&z| silu(z)).collect();
        let z2 = affine_f64(&self.w2, &self.b2, &a1);
        let a2: Vec<f64> = z2.iter().map(|&z| silu(z)).collect();
        let out = affine_f64(&self.w3, &self.b3, &a2);
        Ok(ForwardTrace {
            input,
            z1,
            a1,
            z2,
            a2,
            out,
        })
    }

    fn backward_trace(&self, trace: &ForwardTrace, upstream: &[f64], include_params: bool) -> BackwardResult {
        let arch = &self.arch;
        let hidden = arch.hidden_dim;

        // delta2 = W3^T u  (elementwise) silu'(z2)
        let mut delta2 = vec![0.0f64; hidden];
        for h in 0..hidden {
            let mut acc = 0.0f64;
            for (o, &u) in upstream.iter().enumerate() {
                acc += self.w3.data()[o * hidden + h] as f64 * u;
            }
            delta2[h] = acc * silu_derivative(trace.z2[h]);
        }
        let mut delta1 = vec![0.0f64; hidden];
        for h in 0..hidden {
            let mut acc = 0.0f64;
            for (k, &d) in delta2.iter().enumerate() {
                acc += self.w2.data()[k * hidden + h] as f64 * d;
            }
            delta1[h] = acc * silu_derivative(trace.z1[h]);
        }
        // Input gradient; the conditioning slice is its tail.
        let in_dim = arch.input_dim();
        let mut input_grad = vec![0.0f64; in_dim];
        for i in 0..in_dim {
            let mut acc = 0.0f64;
            for (h, &d) in delta1.iter().enumerate() {
                acc += self.w1.data()[h * in_dim + i] as f64 * d;
            }
            input_grad[i] = acc;
        }
        let cond_grad = input_grad[in_dim - arch.cond_dim..].to_vec();

        let params = include_params.then(|| ParamGradients {
            w1: outer_product(&delta1, &trace.input),
            b1: delta1.clone(),
            w2: outer_product(&delta2, &trace.a1),
            b2: delta2,
            w3: outer_product(upstream, &trace.a2),
            b3: upstream.to_vec(),
        });

        BackwardResult { cond_grad, params }
    }

    /// Gradients of `upstream . output` with respect to the conditioning
    /// embedding (always) and, when `include_params` is set, the network
    /// parameters. Parameter gradients on a frozen model are rejected.
    pub fn predict_noise_backward(
        &self,
        xt: &Tensor,
        t: usize,
        cond: &ConditionEmbedding,
        upstream: &Tensor,
        include_params: bool,
    ) -> Result<GradientRecord> {
        if include_params && self.frozen {
            return Err(Error::FrozenModel("parameter gradients requested on a frozen backbone".into()));
        }
        if upstream.shape() != [self.arch.latent_dim] {
            return Err(Error::ShapeMismatch {
                context: "denoiser upstream gradient",
                expected: vec![self.arch.latent_dim],
                got: upstream.shape().to_vec(),
            });
        }
        let trace = self.forward_trace(xt, t, cond)?;
        let result = self.backward_trace(&trace, &upstream.to_f64(), include_params);
        let mut record = GradientRecord::new();
        record.insert(ParamId::Condition, f64_tensor(vec![self.arch.cond_dim], &result.cond_grad)?);
        if let Some(p) = result.params {
            let arch = &self.arch;
            record.insert(ParamId::Hidden1Weight, f64_tensor(vec![arch.hidden_dim, arch.input_dim()], &p.w1)?);
            record.insert(ParamId::Hidden1Bias, f64_tensor(vec![arch.hidden_dim], &p.b1)?);
            record.insert(ParamId::Hidden2Weight, f64_tensor(vec![arch.hidden_dim, arch.hidden_dim], &p.w2)?);
            record.insert(ParamId::Hidden2Bias, f64_tensor(vec![arch.hidden_dim], &p.b2)?);
            record.insert(ParamId::OutputWeight, f64_tensor(vec![arch.latent_dim, arch.hidden_dim], &p.w3)?);
            record.insert(ParamId::OutputBias, f64_tensor(vec![arch.latent_dim], &p.b3)?);
        }
        Ok(record)
    }

    fn params_map(&self) -> BTreeMap<ParamId, Tensor> {
        BTreeMap::from([
            (ParamId::Hidden1Weight, self.w1.clone()),
            (ParamId::Hidden1Bias, self.b1.clone()),
            (ParamId::Hidden2Weight, self.w2.clone()),
            (ParamId::Hidden2Bias, self.b2.clone()),
            (ParamId::OutputWeight, self.w3.clone()),
            (ParamId::OutputBias, self.b3.clone()),
        ])
    }

    fn set_params(&mut self, mut map: BTreeMap<ParamId, Tensor>) {
        self.w1 = map.remove(&ParamId::Hidden1Weight).expect("w1");
        self.b1 = map.remove(&ParamId::Hidden1Bias).expect("b1");
        self.w2 = map.remove(&ParamId::Hidden2Weight).expect("w2");
        self.b2 = map.remove(&ParamId::Hidden2Bias).expect("b2");
        self.w3 = map.remove(&ParamId::OutputWeight).expect("w3");
        self.b3 = map.remove(&ParamId::OutputBias).expect("b3");
    }

    /// Parameter tensors serialized little-endian in declaration order;
    /// the byte-level identity check for the frozen-backbone invariant.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for t in [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3] {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn save<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        format::write_magic(w, MODEL_MAGIC, MODEL_VERSION)?;
        for dim in [
            self.arch.latent_dim,
            self.arch.time_embed_dim,
            self.arch.cond_dim,
            self.arch.hidden_dim,
            HIDDEN_LAYERS as usize,
            self.arch.max_timestep,
        ] {
            format::write_u32(w, dim as u32)?;
        }
        for t in [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.cond_mean] {
            format::write_f32s(w, t.data())?;
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.save(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads a stored backbone; the result is always frozen.
    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        format::read_magic(r, MODEL_MAGIC, MODEL_VERSION)?;
        let latent_dim = format::read_u32(r)? as usize;
        let time_embed_dim = format::read_u32(r)? as usize;
        let cond_dim = format::read_u32(r)? as usize;
        let hidden_dim = format::read_u32(r)? as usize;
        let layers = format::read_u32(r)?;
        if layers != HIDDEN_LAYERS {
            return Err(Error::Format(format!(
                "unsupported hidden layer count {layers}, expected {HIDDEN_LAYERS}"
            )));
        }
        let max_timestep = format::read_u32(r)? as usize;
        let arch = Architecture {
            latent_dim,
            time_embed_dim,
            cond_dim,
            hidden_dim,
            max_timestep,
        };
        arch.validate().map_err(|e| Error::Format(format!("invalid stored architecture: {e}")))?;
        let read_tensor = |r: &mut R, shape: Vec<usize>| -> Result<Tensor> {
            let n = shape.iter().product();
            Tensor::new(shape, format::read_f32s(r, n)?)
                .map_err(|e| Error::Format(format!("invalid stored tensor: {e}")))
        };
        let w1 = read_tensor(r, vec![hidden_dim, arch.input_dim()])?;
        let b1 = read_tensor(r, vec![hidden_dim])?;
        let w2 = read_tensor(r, vec![hidden_dim, hidden_dim])?;
        let b2 = read_tensor(r, vec![hidden_dim])?;
        let w3 = read_tensor(r, vec![latent_dim, hidden_dim])?;
        let b3 = read_tensor(r, vec![latent_dim])?;
        let cond_mean = read_tensor(r, vec![cond_dim])?;
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::Format(e.to_string()))? != 0 {
            return Err(Error::Format("trailing bytes after model payload".into()));
        }
        Ok(Self {
            arch,
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            cond_mean,
            frozen: true,
        })
    }

    pub fn load_from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::load(&mut BufReader::new(file))
    }
}

struct ParamGradients {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w3: Vec<f64>,
    b3: Vec<f64>,
}

struct BackwardResult {
    cond_grad: Vec<f64>,
    params: Option<ParamGradients>,
}

impl Denoiser for DenoiserModel {
    fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn cond_dim(&self) -> usize {
        self.arch.cond_dim
    }

    fn max_timestep(&self) -> usize {
        self.arch.max_timestep
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn predict_f64(&self, xt: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Vec<f64>> {
        Ok(self.forward_trace(xt, t, cond)?.out)
    }

    fn condition_gradient(
        &self,
        xt: &Tensor,
        t: usize,
        cond: &ConditionEmbedding,
        upstream: &[f64],
    ) -> Result<Tensor> {
        if upstream.len() != self.arch.latent_dim {
            return Err(Error::ShapeMismatch {
                context: "denoiser upstream gradient",
                expected: vec![self.arch.latent_dim],
                got: vec![upstream.len()],
            });
        }
        let trace = self.forward_trace(xt, t, cond)?;
        let result = self.backward_trace(&trace, upstream, false);
        f64_tensor(vec![self.arch.cond_dim], &result.cond_grad)
    }

    fn prompt_init_anchor(&self) -> Tensor {
        self.cond_mean.clone()
    }
}

fn affine_f64(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let rows = w.shape()[0];
    let cols = w.shape()[1];
    debug_assert_eq!(cols, x.len());
    let mut out = vec![0.0f64; rows];
    for (row, slot) in out.iter_mut().enumerate() {
        let mut acc = b.data()[row] as f64;
        let base = row * cols;
        for col in 0..cols {
            acc += w.data()[base + col] as f64 * x[col];
        }
        *slot = acc;
    }
    out
}

fn outer_product(rows: &[f64], cols: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        for &c in cols {
            out.push(r * c);
        }
    }
    out
}

fn f64_tensor(shape: Vec<usize>, data: &[f64]) -> Result<Tensor> {
    let rounded: Vec<f32> = data.iter().map(|&v| v as f32).collect();
    if rounded.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Tensor::new(shape, rounded)
}

/// Pretraining settings for manufacturing the frozen backbone fixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub seed: u64,
    /// Loss is sampled into the report every this many steps.
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            optim: AdamWConfig::with_lr(1e-3),
            seed: 0,
            log_every: 100,
        }
    }
}

/// Loss trace recorded while pretraining.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    /// (step, batch loss) sampled every `log_every` steps plus the final step.
    pub loss_samples: Vec<(usize, f64)>,
}

impl PretrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_samples.first().map(|&(_, l)| l)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_samples.last().map(|&(_, l)| l)
    }
}

/// Trains a fresh model to predict the added noise given the true class
/// condition, then freezes it. The returned model is the stand-in for a
/// large pretrained conditional denoiser.
pub fn pretrain_backbone(
    arch: Architecture,
    dataset: &[(Tensor, usize)],
    true_conditions: &[ConditionEmbedding],
    schedule: &NoiseSchedule,
    config: &PretrainConfig,
) -> Result<(DenoiserModel, PretrainReport)> {
    arch.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData("pretraining dataset is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if schedule.t_max() != arch.max_timestep {
        return Err(Error::InvalidArgument(format!(
            "schedule covers {} timesteps but the architecture expects {}",
            schedule.t_max(),
            arch.max_timestep
        )));
    }
    for (x0, class) in dataset {
        if *class >= true_conditions.len() {
            return Err(Error::UnknownClass(*class));
        }
        if x0.shape() != [arch.latent_dim] {
            return Err(Error::ShapeMismatch {
                context: "pretraining latent",
                expected: vec![arch.latent_dim],
                got: x0.shape().to_vec(),
            });
        }
    }
    for cond in true_conditions {
        if cond.dim() != arch.cond_dim {
            return Err(Error::ShapeMismatch {
                context: "pretraining condition",
                expected: vec![arch.cond_dim],
                got: vec![cond.dim()],
            });
        }
    }

    let mut model = DenoiserModel::init(arch, config.seed)?;
    let n = true_conditions.len() as f64;
    let mean: Vec<f32> = (0..arch.cond_dim)
        .map(|i| {
            let sum: f64 = true_conditions.iter().map(|c| c.vector().data()[i] as f64).sum();
            (sum / n) as f32
        })
        .collect();
    model.cond_mean = Tensor::new(vec![arch.cond_dim], mean)?;

    let mut optimizer = AdamW::new(config.optim)?;
    let mut rng = stream_rng(config.seed, streams::PRETRAIN);
    let mut report = PretrainReport {
        loss_samples: Vec::new(),
    };

    for step in 0..config.steps {
        let mut grads = GradientRecord::new();
        let mut batch_loss = 0.0f64;
        let inv_batch = 1.0 / config.batch_size as f64;
        for _ in 0..config.batch_size {
            let idx = rng.random_range(0..dataset.len());
            let (x0, class) = &dataset[idx];
            let t = rng.random_range(1..=schedule.t_max());
            let eps = standard_normal_vector(arch.latent_dim, &mut rng);
            let noised = add_noise(x0, &eps, t, schedule)?;
            let trace = model.forward_trace(&noised.xt, t, &true_conditions[*class])?;
            let eps_f64 = eps.to_f64();
            batch_loss += mse_f64(&eps_f64, &trace.out) * inv_batch;
            // d(batch loss)/d(out) = 2 (out - eps) / (latent_dim * batch)
            let scale = 2.0 * inv_batch / arch.latent_dim as f64;
            let upstream: Vec<f64> = trace
                .out
                .iter()
                .zip(&eps_f64)
                .map(|(&o, &e)| (o - e) * scale)
                .collect();
            let result = model.backward_trace(&trace, &upstream, true);
            let p = result.params.expect("parameter gradients requested");
            grads.accumulate(ParamId::Hidden1Weight, f64_tensor(vec![arch.hidden_dim, arch.input_dim()], &p.w1)?)?;
            grads.accumulate(ParamId::Hidden1Bias, f64_tensor(vec![arch.hidden_dim], &p.b1)?)?;
            grads.accumulate(ParamId::Hidden2Weight, f64_tensor(vec![arch.hidden_dim, arch.hidden_dim], &p.w2)?)?;
            grads.accumulate(ParamId::Hidden2Bias, f64_tensor(vec![arch.hidden_dim], &p.b2)?)?;
            grads.accumulate(ParamId::OutputWeight, f64_tensor(vec![arch.latent_dim, arch.hidden_dim], &p.w3)?)?;
            grads.accumulate(ParamId::OutputBias, f64_tensor(vec![arch.latent_dim], &p.b3)?)?;
        }
        if !batch_loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: "pretraining batch loss is not finite".into(),
            });
        }
        if step % config.log_every == 0 || step + 1 == config.steps {
            report.loss_samples.push((step, batch_loss));
        }
        let mut params = model.params_map();
        optimizer.step(&mut params, &grads)?;
        model.set_params(params);
    }

    model.freeze();
    Ok((model, report))
}

/// Maps between image space and the latent space the diffusion runs in.
pub trait LatentCodec {
    fn encode(&self, x: &Tensor) -> Result<Tensor>;
    fn decode(&self, z: &Tensor) -> Result<Tensor>;
}

/// Desk-scale codec: data already lives in latent space.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(z.clone())
    }
}

/// decode(encode(x)); exactly `x` for the identity codec.
pub fn codec_roundtrip<C: LatentCodec>(codec: &C, x: &Tensor) -> Result<Tensor> {
    codec.decode(&codec.encode(x)?)
}

pub mod stubs {
    //! Verification stubs implementing [`Denoiser`] with closed-form
    //! behavior, used by oracle tests and fixtures.

    use super::*;

    /// Linear predictor `eps_hat = A xt + E cond`. Its least-squares
    /// optimum over the conditioning embedding has a closed form, which
    /// makes it the reference point for convergence checks.
    #[derive(Debug, Clone)]
    pub struct LinearDenoiser {
        a: Tensor,
        e: Tensor,
        max_timestep: usize,
    }

    impl LinearDenoiser {
        /// `a` must be `[latent, latent]`, `e` must be `[latent, cond]`.
        pub fn new(a: Tensor, e: Tensor, max_timestep: usize) -> Result<Self> {
            if a.shape().len() != 2 || a.shape()[0] != a.shape()[1] {
                return Err(Error::InvalidArgument("A must be a square matrix".into()));
            }
            if e.shape().len() != 2 || e.shape()[0] != a.shape()[0] {
                return Err(Error::InvalidArgument("E must have the same row count as A".into()));
            }
            Ok(Self { a, e, max_timestep })
        }

        pub fn matrices(&self) -> (&Tensor, &Tensor) {
            (&self.a, &self.e)
        }
    }

    impl Denoiser for LinearDenoiser {
        fn latent_dim(&self) -> usize {
            self.a.shape()[0]
        }

        fn cond_dim(&self) -> usize {
            self.e.shape()[1]
        }

        fn max_timestep(&self) -> usize {
            self.max_timestep
        }

        fn is_frozen(&self) -> bool {
            true
        }

        fn predict_f64(&self, xt: &Tensor, t: usize, cond: &ConditionEmbedding) -> Result<Vec<f64>> {
            if t == 0 || t > self.max_timestep {
                return Err(Error::InvalidArgument(format!("timestep {t} out of range")));
            }
            if xt.len() != self.latent_dim() || cond.dim() != self.cond_dim() {
                return Err(Error::ShapeMismatch {
                    context: "linear stub input",
                    expected: vec![self.latent_dim(), self.cond_dim()],
                    got: vec![xt.len(), cond.dim()],
                });
            }
            let latent = self.latent_dim();
            let cond_dim = self.cond_dim();
            let mut out = vec![0.0f64; latent];
            for (row, slot) in out.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for col in 0..latent {
                    acc += self.a.data()[row * latent + col] as f64 * xt.data()[col] as f64;
                }
                for col in 0..cond_dim {
                    acc += self.e.data()[row * cond_dim + col] as f64 * cond.vector().data()[col] as f64;
                }
                *slot = acc;
            }
            Ok(out)
        }

        fn condition_gradient(
            &self,
            _xt: &Tensor,
            _t: usize,
            _cond: &ConditionEmbedding,
            upstream: &[f64],
        ) -> Result<Tensor> {
            // d(u . (A xt + E c))/dc = E^T u
            let latent = self.latent_dim();
            let cond_dim = self.cond_dim();
            let mut grad = vec![0.0f64; cond_dim];
            for (col, slot) in grad.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for row in 0..latent {
                    acc += self.e.data()[row * cond_dim + col] as f64 * upstream[row];
                }
                *slot = acc;
            }
            f64_tensor(vec![cond_dim], &grad)
        }
    }

    /// Recovers the exact added noise by inverting the closed-form forward
    /// process for a known clean latent; ignores the condition entirely.
    #[derive(Debug, Clone)]
    pub struct ForwardInvertingOracle {
        x0: Tensor,
        schedule: NoiseSchedule,
        cond_dim: usize,
    }

    impl ForwardInvertingOracle {
        pub fn new(x0: Tensor, schedule: NoiseSchedule, cond_dim: usize) -> Self {
            Self {
                x0,
                schedule,
                cond_dim,
            }
        }
    }

    impl Denoiser for ForwardInvertingOracle {
        fn latent_dim(&self) -> usize {
            self.x0.len()
        }

        fn cond_dim(&self) -> usize {
            self.cond_dim
        }

        fn max_timestep(&self) -> usize {
            self.schedule.t_max()
        }

        fn is_frozen(&self) -> bool {
            true
        }

        fn predict_f64(&self, xt: &Tensor, t: usize, _cond: &ConditionEmbedding) -> Result<Vec<f64>> {
            let abar = self.schedule.alpha_bar(t)? as f64;
            let signal = abar.sqrt();
            let noise = (1.0 - abar).sqrt();
            Ok(xt
                .data()
                .iter()
                .zip(self.x0.data())
                .map(|(&x, &x0)| (x as f64 - signal * x0 as f64) / noise)
                .collect())
        }

        fn condition_gradient(
            &self,
            _xt: &Tensor,
            _t: usize,
            _cond: &ConditionEmbedding,
            _upstream: &[f64],
        ) -> Result<Tensor> {
            Ok(Tensor::zeros(vec![self.cond_dim]))
        }
    }

    /// Predicts zero noise for every input.
    #[derive(Debug, Clone, Copy)]
    pub struct ZeroDenoiser {
        pub latent_dim: usize,
        pub cond_dim: usize,
        pub max_timestep: usize,
    }

    impl Denoiser for ZeroDenoiser {
        fn latent_dim(&self) -> usize {
            self.latent_dim
        }

        fn cond_dim(&self) -> usize {
            self.cond_dim
        }

        fn max_timestep(&self) -> usize {
            self.max_timestep
        }

        fn is_frozen(&self) -> bool {
            true
        }

        fn predict_f64(&self, _xt: &Tensor, _t: usize, _cond: &ConditionEmbedding) -> Result<Vec<f64>> {
            Ok(vec![0.0; self.latent_dim])
        }

        fn condition_gradient(
            &self,
            _xt: &Tensor,
            _t: usize,
            _cond: &ConditionEmbedding,
            _upstream: &[f64],
        ) -> Result<Tensor> {
            Ok(Tensor::zeros(vec![self.cond_dim]))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;
    use crate::tensor::finite_difference_gradient;

    fn small_arch() -> Architecture {
        Architecture {
            latent_dim: 3,
            time_embed_dim: 4,
            cond_dim: 2,
            hidden_dim: 5,
            max_timestep: 20,
        }
    }

    fn cond(values: &[f32]) -> ConditionEmbedding {
        ConditionEmbedding::new(Tensor::vector(values.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn zero_model_predicts_zero() {
        let model = DenoiserModel::zeros(small_arch()).unwrap();
        let xt = Tensor::vector(vec![0.5, -0.3, 1.0]).unwrap();
        let out = model.predict(&xt, 3, &cond(&[0.7, -0.2])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn prediction_is_deterministic() {
        let model = DenoiserModel::init(small_arch(), 9).unwrap();
        let xt = Tensor::vector(vec![0.5, -0.3, 1.0]).unwrap();
        let c = cond(&[0.7, -0.2]);
        let a = model.predict(&xt, 7, &c).unwrap();
        let b = model.predict(&xt, 7, &c).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn forward_matches_straight_line_reimplementation() {
        // Independent scalar re-derivation of the forward pass.
        let arch = small_arch();
        let model = DenoiserModel::init(arch, 33).unwrap();
        let xt = Tensor::vector(vec![0.4, -0.9, 0.1]).unwrap();
        let c = cond(&[0.3, 0.8]);
        let t = 11usize;

        let mut input: Vec<f64> = Vec::new();
        input.extend(xt.data().iter().map(|&v| v as f64));
        let half = arch.time_embed_dim / 2;
        for i in 0..half {
            let freq = (arch.max_timestep as f64).powf(-(i as f64) / (half - 1) as f64);
            input.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (arch.max_timestep as f64).powf(-(i as f64) / (half - 1) as f64);
            input.push((t as f64 * freq).cos());
        }
        input.extend(c.vector().data().iter().map(|&v| v as f64));

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let dense = |w: &Tensor, b: &Tensor, x: &[f64]| -> Vec<f64> {
            let (rows, cols) = (w.shape()[0], w.shape()[1]);
            (0..rows)
                .map(|r| {
                    let mut acc = b.data()[r] as f64;
                    for cidx in 0..cols {
                        acc += w.data()[r * cols + cidx] as f64 * x[cidx];
                    }
                    acc
                })
                .collect()
        };
        let z1 = dense(&model.w1, &model.b1, &input);
        let a1: Vec<f64> = z1.iter().map(|&z| z * sig(z)).collect();
        let z2 = dense(&model.w2, &model.b2, &a1);
        let a2: Vec<f64> = z2.iter().map(|&z| z * sig(z)).collect();
        let expect = dense(&model.w3, &model.b3, &a2);

        let got = model.predict_f64(&xt, t, &c).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn input_contract_violations_rejected() {
        let model = DenoiserModel::init(small_arch(), 1).unwrap();
        let xt = Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap();
        let c = cond(&[0.0, 0.0]);
        assert!(model.predict(&Tensor::zeros(vec![2]), 1, &c).is_err());
        assert!(model.predict(&xt, 0, &c).is_err());
        assert!(model.predict(&xt, 21, &c).is_err());
        assert!(model.predict(&xt, 1, &cond(&[0.0])).is_err());
    }

    #[test]
    fn non_finite_output_detected() {
        let mut model = DenoiserModel::zeros(small_arch()).unwrap();
        let huge = 1e38f32;
        let mut params = model.params_map();
        let fill = |shape: &[usize]| {
            Tensor::new(shape.to_vec(), vec![huge; shape.iter().product()]).unwrap()
        };
        for (_, v) in params.iter_mut() {
            *v = fill(v.shape());
        }
        model.set_params(params);
        let xt = Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap();
        let err = model.predict(&xt, 1, &cond(&[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let model = DenoiserModel::init(small_arch(), 2).unwrap();
        let xt = Tensor::vector(vec![0.2, -0.1, 0.6]).unwrap();
        let rec = model
            .predict_noise_backward(&xt, 4, &cond(&[0.5, -0.5]), &Tensor::zeros(vec![3]), true)
            .unwrap();
        for (_, grad) in rec.iter() {
            assert!(grad.data().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn condition_gradient_matches_finite_differences() {
        let model = DenoiserModel::init(small_arch(), 5).unwrap();
        let xt = Tensor::vector(vec![0.9, -0.4, 0.2]).unwrap();
        let upstream = [0.3f64, -1.1, 0.7];
        let c0 = Tensor::vector(vec![0.25, -0.6]).unwrap();
        let analytic = model
            .condition_gradient(&xt, 9, &ConditionEmbedding::new(c0.clone()).unwrap(), &upstream)
            .unwrap();
        let fd = finite_difference_gradient(
            |c| {
                let out = model.predict_f64(&xt, 9, &ConditionEmbedding::new(c.clone())?)?;
                Ok(out.iter().zip(&upstream).map(|(o, u)| o * u).sum())
            },
            &c0,
            1e-3,
        )
        .unwrap();
        for (a, f) in analytic.data().iter().zip(fd.data()) {
            let denom = a.abs().max(1e-6);
            assert!((a - f).abs() / denom < 1e-3, "{a} vs {f}");
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let arch = small_arch();
        let base = DenoiserModel::init(arch, 6).unwrap();
        let xt = Tensor::vector(vec![0.1, 0.8, -0.5]).unwrap();
        let c = cond(&[0.4, 0.9]);
        let upstream_v = [1.0f64, -0.5, 0.25];
        let upstream_t = Tensor::vector(vec![1.0, -0.5, 0.25]).unwrap();
        let rec = base
            .predict_noise_backward(&xt, 2, &c, &upstream_t, true)
            .unwrap();
        for id in [ParamId::Hidden1Weight, ParamId::Hidden2Bias, ParamId::OutputWeight] {
            let analytic = rec.get(&id).unwrap();
            let original = base.params_map()[&id].clone();
            let fd = finite_difference_gradient(
                |p| {
                    let mut probe = base.clone();
                    let mut params = probe.params_map();
                    params.insert(id, p.clone());
                    probe.set_params(params);
                    let out = probe.predict_f64(&xt, 2, &c)?;
                    Ok(out.iter().zip(&upstream_v).map(|(o, u)| o * u).sum())
                },
                &original,
                1e-3,
            )
            .unwrap();
            for (a, f) in analytic.data().iter().zip(fd.data()) {
                assert!((a - f).abs() < 1e-3 * a.abs().max(1.0), "{id}: {a} vs {f}");
            }
        }
    }

    #[test]
    fn frozen_model_rejects_parameter_gradients() {
        let mut model = DenoiserModel::init(small_arch(), 3).unwrap();
        model.freeze();
        let xt = Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap();
        let up = Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap();
        let err = model
            .predict_noise_backward(&xt, 1, &cond(&[0.0, 0.0]), &up, true)
            .unwrap_err();
        assert!(matches!(err, Error::FrozenModel(_)));
        // Condition gradients remain available and the record holds only them.
        let rec = model
            .predict_noise_backward(&xt, 1, &cond(&[0.0, 0.0]), &up, false)
            .unwrap();
        assert_eq!(rec.len(), 1);
        assert!(rec.contains(&ParamId::Condition));
    }

    #[test]
    fn output_is_lipschitz_in_condition() {
        let model = DenoiserModel::init(small_arch(), 12).unwrap();
        let xt = Tensor::vector(vec![0.3, -0.2, 0.7]).unwrap();
        let c = Tensor::vector(vec![0.1, -0.3]).unwrap();
        let delta = Tensor::vector(vec![0.6, -0.8]).unwrap();
        let out_at = |cv: &Tensor| {
            model
                .predict_f64(&xt, 5, &ConditionEmbedding::new(cv.clone()).unwrap())
                .unwrap()
        };
        let base = out_at(&c);
        let change = |scale: f32| {
            let shifted = out_at(&c.add(&delta.scale(scale)).unwrap());
            shifted
                .iter()
                .zip(&base)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        // Estimate the local rate at a coarse scale, then verify finer
        // perturbations stay within a proportional bound.
        let rate = change(1e-1) / 1e-1;
        for scale in [1e-2f32, 1e-3] {
            assert!(change(scale) <= 2.0 * rate * scale as f64 + 1e-12);
        }
    }

    #[test]
    fn time_embedding_shape_and_range() {
        let emb = time_embedding(17, 8, 100);
        assert_eq!(emb.len(), 8);
        assert!(emb.iter().all(|v| v.abs() <= 1.0));
        // sin/cos pair of one frequency must satisfy the unit identity.
        for i in 0..4 {
            let s = emb[i];
            let c = emb[4 + i];
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pretrain_zero_steps_returns_frozen_init() {
        let arch = small_arch();
        let schedule = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        let data = vec![(Tensor::vector(vec![1.0, 0.0, 0.0]).unwrap(), 0usize)];
        let conds = make_class_conditions(1, 2, 0.5, 7);
        let cfg = PretrainConfig {
            steps: 0,
            seed: 7,
            ..PretrainConfig::default()
        };
        let (model, report) = pretrain_backbone(arch, &data, &conds, &schedule, &cfg).unwrap();
        assert!(model.is_frozen());
        assert!(report.loss_samples.is_empty());
        let reference = DenoiserModel::init(arch, 7).unwrap();
        assert_eq!(model.param_bytes()[..], reference.param_bytes()[..]);
    }

    fn two_class_fixture() -> (Architecture, NoiseSchedule, Vec<(Tensor, usize)>, Vec<ConditionEmbedding>) {
        let arch = Architecture {
            latent_dim: 4,
            time_embed_dim: 4,
            cond_dim: 4,
            hidden_dim: 24,
            max_timestep: 50,
        };
        let schedule = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let mut data = Vec::new();
        let mut rng = stream_rng(100, streams::DATASET);
        for class in 0..2usize {
            let proto: Vec<f32> = if class == 0 {
                vec![1.0, 1.0, -1.0, 0.5]
            } else {
                vec![-1.0, -0.5, 1.0, -1.0]
            };
            for _ in 0..16 {
                let noise = standard_normal_vector(4, &mut rng).scale(0.2);
                data.push((Tensor::vector(proto.clone()).unwrap().add(&noise).unwrap(), class));
            }
        }
        let conds = make_class_conditions(2, 4, 0.5, 100);
        (arch, schedule, data, conds)
    }

    #[test]
    fn pretraining_reduces_loss_and_discriminates_classes() {
        let (arch, schedule, data, conds) = two_class_fixture();
        let cfg = PretrainConfig {
            steps: 400,
            batch_size: 8,
            optim: AdamWConfig::with_lr(3e-3),
            seed: 100,
            log_every: 50,
        };
        let (model, report) = pretrain_backbone(arch, &data, &conds, &schedule, &cfg).unwrap();
        assert!(model.is_frozen());
        assert!(
            report.final_loss().unwrap() < report.initial_loss().unwrap(),
            "{:?}",
            report.loss_samples
        );

        // Held-out probes: true-condition denoising error beats the wrong
        // condition on average. This is the premise the classifier rests on.
        let mut rng = stream_rng(555, streams::CLASSIFIER);
        let mut true_err = 0.0f64;
        let mut wrong_err = 0.0f64;
        let n_probe = 200;
        for i in 0..n_probe {
            let class = i % 2;
            let proto: Vec<f32> = if class == 0 {
                vec![1.0, 1.0, -1.0, 0.5]
            } else {
                vec![-1.0, -0.5, 1.0, -1.0]
            };
            let x0 = Tensor::vector(proto)
                .unwrap()
                .add(&standard_normal_vector(4, &mut rng).scale(0.2))
                .unwrap();
            let t = rng.random_range(1..=50);
            let eps = standard_normal_vector(4, &mut rng);
            let xt = add_noise(&x0, &eps, t, &schedule).unwrap().xt;
            let errs: Vec<f64> = (0..2)
                .map(|c| {
                    let pred = model.predict(&xt, t, &conds[c]).unwrap();
                    crate::tensor::mse(&eps, &pred).unwrap()
                })
                .collect();
            true_err += errs[class];
            wrong_err += errs[1 - class];
        }
        assert!(
            (true_err / n_probe as f64) < (wrong_err / n_probe as f64),
            "true {true_err} vs wrong {wrong_err}"
        );
    }

    #[test]
    fn pretraining_detects_divergence() {
        let (arch, schedule, data, conds) = two_class_fixture();
        let cfg = PretrainConfig {
            steps: 2000,
            batch_size: 4,
            optim: AdamWConfig {
                lr: 1e12,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            seed: 100,
            log_every: 100,
        };
        let err = pretrain_backbone(arch, &data, &conds, &schedule, &cfg).unwrap_err();
        assert!(
            matches!(err, Error::Divergence { .. } | Error::NonFinite(_)),
            "{err}"
        );
    }

    #[test]
    fn identity_codec_roundtrip_is_exact() {
        let x = Tensor::vector(vec![0.25, -0.75, 3.0]).unwrap();
        let codec = IdentityCodec;
        let back = codec_roundtrip(&codec, &x).unwrap();
        assert_eq!(back.data(), x.data());
        assert_eq!(codec.encode(&x).unwrap().shape(), x.shape());
        let diff: f64 = back
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn model_file_roundtrip_is_byte_exact() {
        let (arch, schedule, data, conds) = two_class_fixture();
        let cfg = PretrainConfig {
            steps: 10,
            batch_size: 4,
            seed: 100,
            ..PretrainConfig::default()
        };
        let (model, _) = pretrain_backbone(arch, &data, &conds, &schedule, &cfg).unwrap();
        let mut bytes = Vec::new();
        model.save(&mut bytes).unwrap();
        let loaded = DenoiserModel::load(&mut bytes.as_slice()).unwrap();
        assert!(loaded.is_frozen());
        let mut bytes2 = Vec::new();
        loaded.save(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(loaded.cond_mean().data(), model.cond_mean().data());
    }

    #[test]
    fn model_file_rejects_corruption() {
        let model = DenoiserModel::init(small_arch(), 4).unwrap();
        let mut bytes = Vec::new();
        model.save(&mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            DenoiserModel::load(&mut bad_magic.as_slice()).unwrap_err(),
            Error::Format(_)
        ));

        let mut bad_version = bytes.clone();
        bad_version[7] = 99;
        assert!(matches!(
            DenoiserModel::load(&mut bad_version.as_slice()).unwrap_err(),
            Error::Format(_)
        ));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(DenoiserModel::load(&mut &truncated[..]).is_err());

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(DenoiserModel::load(&mut trailing.as_slice()).is_err());
    }

    #[test]
    fn linear_stub_predicts_and_differentiates() {
        let a = Tensor::matrix(2, 2, vec![0.5, -0.25, 0.1, 0.3]).unwrap();
        let e = Tensor::matrix(2, 2, vec![1.0, 0.2, -0.3, 0.4]).unwrap();
        let stub = LinearDenoiser::new(a, e, 10).unwrap();
        let xt = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let c = cond(&[0.2, -0.1]);
        let out = stub.predict_f64(&xt, 1, &c).unwrap();
        // Row 0: 0.5*1 - 0.25*(-2) + 1.0*0.2 + 0.2*(-0.1) = 1.18
        assert!((out[0] - 1.18).abs() < 1e-6);
        // Row 1: 0.1*1 + 0.3*(-2) + (-0.3)*0.2 + 0.4*(-0.1) = -0.6
        assert!((out[1] - -0.6).abs() < 1e-6);
        let grad = stub.condition_gradient(&xt, 1, &c, &[1.0, 2.0]).unwrap();
        // E^T [1,2] = [1.0*1 + (-0.3)*2, 0.2*1 + 0.4*2] = [0.4, 1.0]
        assert!((grad.data()[0] - 0.4).abs() < 1e-6);
        assert!((grad.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn forward_inverting_oracle_recovers_noise() {
        let schedule = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let x0 = Tensor::vector(vec![0.7, -0.2, 1.5]).unwrap();
        let oracle = ForwardInvertingOracle::new(x0.clone(), schedule.clone(), 2);
        let eps = Tensor::vector(vec![0.3, 1.1, -0.8]).unwrap();
        let noised = add_noise(&x0, &eps, 25, &schedule).unwrap();
        let recovered = oracle.predict(&noised.xt, 25, &cond(&[0.0, 0.0])).unwrap();
        for (r, e) in recovered.data().iter().zip(eps.data()) {
            assert!((r - e).abs() < 1e-5, "{r} vs {e}");
        }
        let g = oracle
            .condition_gradient(&noised.xt, 25, &cond(&[0.0, 0.0]), &[1.0, 1.0, 1.0])
            .unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
