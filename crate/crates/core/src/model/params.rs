use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{Float, Graph, Tensor, Var};

/// Named `f32` weights, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Registers every weight on `g` as a differentiable leaf.
    pub fn bind<T: Float>(&self, g: &mut Graph<T>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), g.param(t.cast())))
            .collect();
        Bound { vars }
    }

    /// Verifies that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (n, t) in &self.tensors {
            match other.tensors.get(n) {
                None => return Err(Error::Format(format!("missing weight {n}"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Format(format!(
                        "weight {n} has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|n| !self.tensors.contains_key(*n)) {
            return Err(Error::Format(format!("unexpected weight {extra}")));
        }
        Ok(())
    }
}

impl FromIterator<(String, Tensor<f32>)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<f32>)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Weights registered on a particular graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("unknown weight {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Points `name` at another node, e.g. a perturbed copy of the weight.
    pub fn replace(&mut self, name: &str, v: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => Err(Error::Argument(format!("unknown weight {name}"))),
        }
    }

    pub fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            w: self.get(&format!("{prefix}.w"))?,
            b: self.vars.get(&format!("{prefix}.b")).copied(),
        })
    }

    pub fn norm(&self, prefix: &str) -> Result<Norm> {
        Ok(Norm {
            gain: self.get(&format!("{prefix}.gain"))?,
            bias: self.get(&format!("{prefix}.bias"))?,
        })
    }

    pub fn mlp(&self, prefix: &str) -> Result<Mlp> {
        Ok(Mlp {
            fc1: self.linear(&format!("{prefix}.fc1"))?,
            fc2: self.linear(&format!("{prefix}.fc2"))?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Option<Var>,
}

impl Linear {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.w)?;
        match self.b {
            Some(b) => g.add_row(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: Var,
    pub bias: Var,
}

impl Norm {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, 1e-5);
        let s = g.mul_row(n, self.gain)?;
        g.add_row(s, self.bias)
    }
}

/// Two linear layers with a SiLU between them.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, h)
    }
}

/// How a weight matrix starts out.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Xavier,
    /// Xavier scaled by a factor.
    Scaled(f64),
    Zeros,
}

/// Builder used by the model to lay out its weights.
pub struct Initializer<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Initializer<'_, R> {
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize, init: Init) {
        let scale = match init {
            Init::Xavier => 1.0,
            Init::Scaled(s) => s,
            Init::Zeros => 0.0,
        };
        let limit = scale * (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| {
                if limit == 0.0 {
                    0.0
                } else {
                    self.rng.gen_range(-limit..limit) as f32
                }
            })
            .collect();
        self.store.insert(name, Tensor::new(&[rows, cols], data).unwrap());
    }

    pub fn vector(&mut self, name: &str, values: Vec<f32>) {
        let n = values.len();
        self.store.insert(name, Tensor::new(&[n], values).unwrap());
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, init: Init) {
        self.matrix(&format!("{prefix}.w"), fan_in, fan_out, init);
        self.vector(&format!("{prefix}.b"), vec![0.0; fan_out]);
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) {
        self.vector(&format!("{prefix}.gain"), vec![1.0; dim]);
        self.vector(&format!("{prefix}.bias"), vec![0.0; dim]);
    }

    pub fn mlp(&mut self, prefix: &str, fan_in: usize, hidden: usize, fan_out: usize, last: Init) {
        self.linear(&format!("{prefix}.fc1"), fan_in, hidden, Init::Xavier);
        self.linear(&format!("{prefix}.fc2"), hidden, fan_out, last);
    }
}
