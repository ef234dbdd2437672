//! Dense f32 arrays, the gradient record passed between the denoiser and
//! the optimizer, and a central-difference gradient oracle.
//!
//! Values are stored in 32-bit floats; reductions accumulate in 64-bit so
//! results stay deterministic and finite-difference checks stay meaningful.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Row-major dense array of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that the shape matches the data length and
    /// every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: shape.clone(),
                got: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new".into()));
        }
        Ok(Self { shape, data })
    }

    /// 1-D tensor from a value list.
    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// 2-D row-major tensor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Lifts the values to f64 for internal high-precision paths.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    fn check_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, other: &Tensor, context: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.check_same_shape(other, context)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    /// Scalar broadcast multiply.
    pub fn scale(&self, k: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * k).collect(),
        }
    }

    /// Matrix-vector product; `self` must be `[m, n]` and `x` length `n`.
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        let (m, n) = match self.shape.as_slice() {
            &[m, n] => (m, n),
            _ => {
                return Err(Error::ShapeMismatch {
                    context: "matvec: matrix must be 2-D",
                    expected: vec![0, 0],
                    got: self.shape.clone(),
                })
            }
        };
        if x.shape != [n] {
            return Err(Error::ShapeMismatch {
                context: "matvec: inner dimensions",
                expected: vec![n],
                got: x.shape.clone(),
            });
        }
        let mut out = vec![0.0f32; m];
        for (row, slot) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for col in 0..n {
                acc += self.data[row * n + col] as f64 * x.data[col] as f64;
            }
            *slot = acc as f32;
        }
        Ok(Tensor {
            shape: vec![m],
            data: out,
        })
    }
}

/// Mean squared difference between two same-shape tensors.
///
/// Reduces with the MEAN over coordinates, not the sum, so loss scales and
/// learning rates do not depend on the latent dimensionality.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("mse of empty tensors".into()));
    }
    Ok(mse_f64(&a.to_f64(), &b.to_f64()))
}

/// f64-path mean squared difference; callers guarantee equal lengths.
pub(crate) fn mse_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc / a.len() as f64
}

/// Central-difference gradient of a scalar function: per coordinate,
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
///
/// This is the independent oracle that reverse-mode gradients are checked
/// against; it must stay free of any reverse-mode code path.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
    }
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = (orig as f64 + h) as f32;
        let up = f(&probe)?;
        probe.data[i] = (orig as f64 - h) as f32;
        let down = f(&probe)?;
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite_difference_gradient evaluation".into()));
        }
        grad[i] = ((up - down) / (2.0 * h)) as f32;
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Identifies one trainable tensor in the fixed computation graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    Hidden1Weight,
    Hidden1Bias,
    Hidden2Weight,
    Hidden2Bias,
    OutputWeight,
    OutputBias,
    /// The conditioning embedding fed to a single denoiser call.
    Condition,
    /// A per-class prompt embedding.
    Prompt(usize),
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamId::Hidden1Weight => write!(f, "hidden1.weight"),
            ParamId::Hidden1Bias => write!(f, "hidden1.bias"),
            ParamId::Hidden2Weight => write!(f, "hidden2.weight"),
            ParamId::Hidden2Bias => write!(f, "hidden2.bias"),
            ParamId::OutputWeight => write!(f, "output.weight"),
            ParamId::OutputBias => write!(f, "output.bias"),
            ParamId::Condition => write!(f, "condition"),
            ParamId::Prompt(c) => write!(f, "prompt[{c}]"),
        }
    }
}

/// Gradients keyed by parameter id. Iteration order is the `ParamId`
/// ordering, so downstream consumers are deterministic.
#[derive(Debug, Clone, Default)]
pub struct GradientRecord {
    entries: BTreeMap<ParamId, Tensor>,
}

impl GradientRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.entries.insert(id, grad);
    }

    /// Adds `grad` into the entry for `id`, creating it if absent.
    pub fn accumulate(&mut self, id: ParamId, grad: Tensor) -> Result<()> {
        match self.entries.get_mut(&id) {
            Some(existing) => {
                *existing = existing.add(&grad)?;
            }
            None => {
                self.entries.insert(id, grad);
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &ParamId) -> Option<&Tensor> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &ParamId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.entries.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ParamId> {
        self.entries.keys()
    }
}
