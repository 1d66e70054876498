use super::encoder::{Binder, Linear};
use super::tensor::{join, Module, ParamTensor};
use crate::autograd::{Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::math::FeatureVector;
use crate::rng;

/// A stack of affine maps with a rectifier between consecutive maps,
/// bridging the student feature width to the teacher's.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    layers: Vec<Linear<ParamTensor>>,
}

impl ProjectorParams {
    /// `num_layers` affine maps `input → hidden → … → output`, each drawn
    /// uniformly from ±1/√fan_in (weights and biases).
    pub fn new(input: usize, hidden: usize, output: usize, num_layers: usize, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 || num_layers == 0 {
            return Err(Error::Config("projector dimensions and layer count must be positive".into()));
        }
        let mut rng = rng::stream(seed, "init.projector");
        let layers = (0..num_layers)
            .map(|i| {
                let fan_in = if i == 0 { input } else { hidden };
                let fan_out = if i + 1 == num_layers { output } else { hidden };
                let bound = (fan_in as f64).powf(-0.5);
                Linear {
                    weight: ParamTensor::uniform(&[fan_in, fan_out], bound, &mut rng),
                    bias: Some(ParamTensor::uniform(&[fan_out], bound, &mut rng)),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.dims()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.dims()[1]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn bind(&self, prefix: &str, binder: &mut Binder<'_>) -> Vec<Linear<Var>> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = join(prefix, &format!("layers.{i}"));
                Linear {
                    weight: binder.bind(&join(&p, "weight"), &l.weight),
                    bias: l.bias.as_ref().map(|b| binder.bind(&join(&p, "bias"), b)),
                }
            })
            .collect()
    }
}

impl Module for ProjectorParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layers.{i}"));
            f(&join(&p, "weight"), &l.weight);
            if let Some(b) = &l.bias {
                f(&join(&p, "bias"), b);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layers.{i}"));
            f(&join(&p, "weight"), &mut l.weight);
            if let Some(b) = &mut l.bias {
                f(&join(&p, "bias"), b);
            }
        }
    }
}

/// Graph form of [`project`] over a batch of rows.
pub fn projector_forward(g: &mut Graph, layers: &[Linear<Var>], x: Var) -> Var {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        if i > 0 {
            h = g.relu(h);
        }
        h = g.matmul(h, l.weight, false);
        if let Some(b) = l.bias {
            h = g.add_tiled(h, b);
        }
    }
    h
}

/// Maps one student feature into the teacher's feature space. The caller normalizes.
pub fn project(proj: &ProjectorParams, u: &FeatureVector) -> Result<FeatureVector> {
    if u.len() != proj.input_dim() {
        return Err(Error::Shape(format!(
            "projector expects {} inputs, got {}",
            proj.input_dim(),
            u.len()
        )));
    }
    let mut g = Graph::new();
    let never = |_: &str| false;
    let mut binder = Binder::new(&mut g, &never);
    let layers = proj.bind("", &mut binder);
    let x = g.constant(Matrix::from_vec(1, u.len(), u.as_slice().to_vec()));
    let y = projector_forward(&mut g, &layers, x);
    FeatureVector::new(g.value(y).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{l2_normalize, NORM_EPS};

    #[test]
    fn output_has_teacher_dim() {
        let p = ProjectorParams::new(32, 32, 64, 2, 3).unwrap();
        let u = FeatureVector::new((0..32).map(|i| (i as f64).sin()).collect()).unwrap();
        let out = project(&p, &u).unwrap();
        assert_eq!(out.len(), 64);
        let n = l2_normalize(&out, NORM_EPS).unwrap().norm();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_input_gives_bias_image() {
        let p = ProjectorParams::new(3, 4, 2, 2, 9).unwrap();
        let out = project(&p, &FeatureVector::zeros(3)).unwrap();
        let b1: Vec<f64> = p.layers[0].bias.as_ref().unwrap().data().iter().map(|&v| f64::from(v).max(0.0)).collect();
        let w2 = &p.layers[1].weight;
        let b2 = p.layers[1].bias.as_ref().unwrap();
        for j in 0..2 {
            let mut expected = f64::from(b2.data()[j]);
            for (i, h) in b1.iter().enumerate() {
                expected += h * f64::from(w2.data()[i * 2 + j]);
            }
            assert!((out.as_slice()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = ProjectorParams::new(3, 4, 2, 2, 9).unwrap();
        assert!(matches!(project(&p, &FeatureVector::zeros(4)), Err(Error::Shape(_))));
    }
}
