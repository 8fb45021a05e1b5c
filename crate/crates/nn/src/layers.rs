//! Parameter-declaring building blocks.
//!
//! Each layer only stores the names of its parameters; the tensors live in
//! a [`ParamSet`] so that online/target copies and optimizer state can be
//! handled uniformly.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::tensor::{Scalar, Tensor};

/// Weight initialisation policy used while declaring parameters.
pub enum Init<'r, R: Rng> {
    /// Glorot-uniform weights, normal(0, 0.02) embeddings.
    Random(&'r mut R),
    /// Every weight zero (layer-norm gains are still one).
    Zeros,
}

impl<R: Rng> Init<'_, R> {
    fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Vec<f64> {
        let n = fan_in * fan_out;
        match self {
            Init::Random(rng) => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let u = Uniform::new_inclusive(-a, a);
                (0..n).map(|_| u.sample(*rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
        }
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        match self {
            Init::Random(rng) => {
                let d = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| d.sample(*rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
        }
    }
}

fn tensor<T: Scalar>(shape: &[usize], values: Vec<f64>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), values.into_iter().map(T::lit).collect()).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: String,
    bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn declare<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: &mut Init<'_, R>,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        params.insert(&weight, tensor(&[fan_in, fan_out], init.glorot(fan_in, fan_out)))?;
        params.insert(&bias, Tensor::zeros(&[1, fan_out]))?;
        Ok(Linear { weight, bias, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let b = g.param(&self.bias)?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    pub fn weight_name(&self) -> &str {
        &self.weight
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

/// Linear layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub fn declare<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        dims: &[usize],
        act: Activation,
        init: &mut Init<'_, R>,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::declare(params, &format!("{name}.{i}"), w[0], w[1], init))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers, act })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last {
                x = match self.act {
                    Activation::Relu => g.relu(x),
                    Activation::Gelu => g.gelu(x),
                };
            }
        }
        Ok(x)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn declare<T: Scalar>(params: &mut ParamSet<T>, name: &str, dim: usize) -> Result<Self> {
        let gamma = format!("{name}.gamma");
        let beta = format!("{name}.beta");
        params.insert(&gamma, Tensor::full(&[1, dim], T::one()))?;
        params.insert(&beta, Tensor::zeros(&[1, dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(&self.gamma)?;
        let beta = g.param(&self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: String,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn declare<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        rows: usize,
        dim: usize,
        init: &mut Init<'_, R>,
    ) -> Result<Self> {
        let table = format!("{name}.table");
        params.insert(&table, tensor(&[rows, dim], init.normal(rows * dim, 0.02)))?;
        Ok(Embedding { table, rows, dim })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        let t = g.param(&self.table)?;
        g.embedding(t, ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::<f32>::new();
        Linear::declare(&mut p, "l", 10, 20, &mut Init::Random(&mut rng)).unwrap();
        let a = (6.0f32 / 30.0).sqrt();
        let w = p.get("l.weight").unwrap();
        assert_eq!(w.shape(), &[10, 20]);
        assert!(w.data().iter().all(|x| x.abs() <= a));
        assert!(p.get("l.bias").unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_init_mlp_outputs_zero() {
        let mut p = ParamSet::<f64>::new();
        let mlp = Mlp::declare::<f64, ChaCha8Rng>(&mut p, "m", &[3, 4, 2], Activation::Gelu, &mut Init::Zeros)
            .unwrap();
        let mut g = Graph::new(&p);
        let x = g.constant_row(&[1.0, -2.0, 3.0]);
        let y = mlp.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }
}
