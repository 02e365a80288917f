//! Tensor storage and named parameter sets.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{NumericsError, Result};

/// Floating-point element type: `f32` for training, `f64` for verification.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor. All stored values are finite; constructors and
/// every graph operation enforce this.
#[derive(Debug, Clone)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite("Tensor::from_vec".into()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(x: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite");
        let data = (0..n)
            .map(|_| super::rf::<F>(dist.sample(rng)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], x: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![x; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, b: bool) {
        self.requires_grad = b;
    }

    pub fn with_requires_grad(mut self, b: bool) -> Self {
        self.requires_grad = b;
        self
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Option<Vec<F>>) {
        if let Some(ref v) = g {
            debug_assert_eq!(v.len(), self.data.len());
        }
        self.grad = g;
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Convert element precision, for `f64` verification of `f32` models.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| super::rf::<G>(x.to_f64().expect("finite")))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Bit-level equality of the value buffer.
    pub fn bits_eq(&self, other: &Tensor<F>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64().unwrap().to_bits() == b.to_f64().unwrap().to_bits())
    }
}

/// A named model tensor. `trainable == false` guarantees the data is
/// bit-identical across optimizer steps.
#[derive(Debug, Clone)]
pub struct Parameter<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub trainable: bool,
}

impl<F: Real> Parameter<F> {
    pub fn new(name: impl Into<String>, tensor: Tensor<F>) -> Self {
        let mut tensor = tensor;
        tensor.set_requires_grad(true);
        Parameter {
            name: name.into(),
            tensor,
            trainable: true,
        }
    }

    pub fn set_trainable(&mut self, b: bool) {
        self.trainable = b;
        self.tensor.set_requires_grad(b);
    }
}

/// Ordered collection of uniquely named parameters. Enumeration order is
/// insertion order and is the canonical checkpoint payload order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<F> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, p: Parameter<F>) -> Result<()> {
        if self.index.contains_key(&p.name) {
            return Err(NumericsError::DuplicateParam(p.name.clone()));
        }
        self.index.insert(p.name.clone(), self.params.len());
        self.params.push(p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<F>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| NumericsError::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<F>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(NumericsError::UnknownParam(name.into())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for p in &self.params {
            let mut q = Parameter::new(p.name.clone(), p.tensor.cast::<G>());
            q.set_trainable(p.trainable);
            out.push(q).expect("names already unique");
        }
        out
    }

    /// SHA-256 over names, shapes, and little-endian value bytes in
    /// canonical order; used for frozen-weight and reference-immutability
    /// checks.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in p.tensor.data() {
                h.update(x.to_f64().unwrap().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Digest restricted to the named subset, in canonical order.
    pub fn digest_subset(&self, names: &[&str]) -> [u8; 32] {
        let wanted: std::collections::HashSet<&str> = names.iter().copied().collect();
        let mut h = Sha256::new();
        for p in &self.params {
            if !wanted.contains(p.name.as_str()) {
                continue;
            }
            h.update(p.name.as_bytes());
            for &d in p.tensor.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for x in p.tensor.data() {
                h.update(x.to_f64().unwrap().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_shapes_and_nonfinite() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2], vec![1.0, f32::NAN]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn paramset_rejects_duplicates() {
        let mut set = ParamSet::<f32>::new();
        set.push(Parameter::new("w", Tensor::zeros(&[2]))).unwrap();
        let err = set.push(Parameter::new("w", Tensor::zeros(&[2])));
        assert!(matches!(err, Err(NumericsError::DuplicateParam(_))));
    }

    #[test]
    fn digest_changes_with_data() {
        let mut set = ParamSet::<f32>::new();
        set.push(Parameter::new("w", Tensor::zeros(&[2]))).unwrap();
        let d0 = set.digest();
        set.get_mut("w").unwrap().tensor.data_mut()[0] = 1.0;
        assert_ne!(d0, set.digest());
    }
}
