use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::autograd::Matrix;
use crate::error::{Error, Result};

/// A stored parameter: `f32` values, row-major, with an explicit shape.
///
/// Computation happens in `f64`; storage stays `f32` so checkpoints and
/// caches round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl ParamTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Shape(format!("dims {dims:?} overflow")))?;
        if dims.is_empty() || dims.len() > 2 {
            return Err(Error::Shape(format!("parameters are rank 1 or 2, got {dims:?}")));
        }
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(dims);
        t.data.fill(value);
        t
    }

    pub fn normal(dims: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(dims);
        let dist = Normal::new(0.0, std).expect("std is positive");
        t.data.iter_mut().for_each(|v| *v = dist.sample(rng) as f32);
        t
    }

    pub fn uniform(dims: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(dims);
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound is positive");
        t.data.iter_mut().for_each(|v| *v = dist.sample(rng) as f32);
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rank-1 tensors read as a single row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        let (r, c) = self.matrix_shape();
        Matrix::from_f32(r, c, &self.data)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let (_, c) = self.matrix_shape();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn hash_into(&self, name: &str, h: &mut Sha256) {
        h.update((name.len() as u32).to_le_bytes());
        h.update(name.as_bytes());
        h.update((self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            h.update((d as u32).to_le_bytes());
        }
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
    }
}

/// Anything that owns named parameters.
///
/// Names are dotted paths rooted at `prefix`; visiting order is fixed, so
/// checksums and checkpoints are deterministic.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor));

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(prefix, &mut |n, _| names.push(n.to_string()));
        names
    }

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    /// SHA-256 over every named tensor, hex encoded.
    fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        self.visit(prefix, &mut |n, t| t.hash_into(n, &mut h));
        hex::encode(h.finalize())
    }

    /// Replaces parameters from `(name, tensor)` pairs; every name must
    /// already exist with the same shape, and every parameter must be given.
    fn load_named(&mut self, prefix: &str, tensors: &[(String, ParamTensor)]) -> Result<()> {
        let lookup: std::collections::HashMap<&str, &ParamTensor> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut problem = None;
        let mut seen = 0usize;
        self.visit(prefix, &mut |name, current| {
            if problem.is_some() {
                return;
            }
            match lookup.get(name) {
                None => problem = Some(format!("missing tensor {name}")),
                Some(t) if t.dims() != current.dims() => {
                    problem = Some(format!(
                        "tensor {name} has dims {:?}, expected {:?}",
                        t.dims(),
                        current.dims()
                    ))
                }
                Some(_) => seen += 1,
            }
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if seen != lookup.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {seen}",
                lookup.len()
            )));
        }
        self.visit_mut(prefix, &mut |name, current| {
            *current = lookup[name].clone();
        });
        Ok(())
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, ParamTensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_validation() {
        assert!(ParamTensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(ParamTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(ParamTensor::new(vec![], vec![]).is_err());
        assert!(ParamTensor::new(vec![1, 1, 1], vec![0.0]).is_err());
        assert!(ParamTensor::new(vec![usize::MAX, 2], vec![]).is_err());
    }

    #[test]
    fn rank_one_is_a_row() {
        let t = ParamTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.matrix_shape(), (1, 3));
        assert_eq!(t.to_matrix().data, vec![1.0, 2.0, 3.0]);
    }
}
