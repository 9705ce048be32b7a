use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{shape_err, Result};

/// A list of tensors shaped like a parameter set.
///
/// Used for parameters, gradients, tangents and Hessian-vector products
/// alike. Flattening order is tensor-major, row-major within a tensor, which
/// for a network is layer-major because parameters are stored layer by layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    tensors: Vec<Tensor>,
}

impl GradientVector {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self { tensors: other.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    /// Vector of scalar tensors, one per entry.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self { tensors: values.iter().map(|&v| Tensor::scalar(v)).collect() }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(shape_err(format!("{:?} vs {:?}", self.shapes(), other.shapes())))
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild a vector with the shapes of `like` from a flat buffer.
    pub fn unflatten(like: &Self, flat: &[f64]) -> Result<Self> {
        if flat.len() != like.numel() {
            return Err(shape_err(format!("flat length {} vs {}", flat.len(), like.numel())));
        }
        let mut off = 0;
        let tensors = like
            .tensors
            .iter()
            .map(|t| {
                let n = t.len();
                let out = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec());
                off += n;
                out
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tensors })
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data().iter().copied())
    }

    pub fn get(&self, flat_index: usize) -> Option<f64> {
        let mut i = flat_index;
        for t in &self.tensors {
            if i < t.len() {
                return Some(t.data()[i]);
            }
            i -= t.len();
        }
        None
    }

    pub fn set(&mut self, flat_index: usize, v: f64) {
        let mut i = flat_index;
        for t in &mut self.tensors {
            if i < t.len() {
                t.data_mut()[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("flat index {flat_index} out of range");
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.iter().zip(other.iter()).fold(0.0, |acc, (a, b)| acc + a * b))
    }

    pub fn norm2(&self) -> f64 {
        self.iter().fold(0.0, |acc, a| acc + a * a)
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &Self) -> Result<()> {
        self.check_same_shape(x)?;
        for (a, b) in self.tensors.iter_mut().zip(&x.tensors) {
            for (p, &q) in a.data_mut().iter_mut().zip(b.data()) {
                *p += alpha * q;
            }
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { tensors: self.tensors.iter().map(|t| t.map(|x| alpha * x)).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { tensors: self.tensors.iter().map(|t| t.map(&f)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// `a + alpha * b` as a new vector.
pub fn add_scaled(a: &GradientVector, alpha: f64, b: &GradientVector) -> Result<GradientVector> {
    let mut out = a.clone();
    out.axpy(alpha, b)?;
    Ok(out)
}

/// Inner product in the deterministic flattening order.
pub fn dot(a: &GradientVector, b: &GradientVector) -> Result<f64> {
    a.dot(b)
}
