//! Named trainable parameters and their gradients.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Matrix;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named dense array together with its accumulated gradient.
///
/// Values are kept as a matrix; `shape` records the logical rank
/// (`[n]` for vectors, `[r, c]` for matrices).
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Matrix) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape(format!(
                "parameter `{name}`: shape {shape:?} does not match {} values",
                values.len()
            )));
        }
        let grad = Matrix::zeros(values.rows(), values.cols());
        Ok(Self {
            name,
            shape,
            values,
            grad,
        })
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform { fan_in: usize },
    Normal { std: f64 },
    Constant(f64),
}

/// Ordered collection of parameters. Iteration order is insertion order,
/// which keeps checkpoints and optimiser state deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::Config(format!("duplicate parameter `{}`", param.name)));
        }
        let id = self.params.len();
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    /// Creates a `rows x cols` parameter initialised from `rng`. A single
    /// row is recorded as a rank-1 shape.
    pub fn add(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut RngState,
    ) -> Result<ParamId> {
        let n = rows * cols;
        let data: Vec<f64> = match init {
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Constant(c) => vec![c; n],
        };
        let shape = if rows == 1 { vec![cols] } else { vec![rows, cols] };
        self.insert(Parameter::new(name, shape, Matrix::from_vec(rows, cols, data)?)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].values
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so that their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let c = max_norm / norm;
            for p in &mut self.params {
                p.grad.scale_assign(c);
            }
        }
        norm
    }

    /// Checks that `other` has the same parameter names and shapes, in
    /// the same order.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "parameter count differs: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name {
                return Err(Error::Shape(format!(
                    "parameter `{}` does not match `{}`",
                    a.name, b.name
                )));
            }
            if a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?} vs {:?}",
                    a.name, a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Element-wise arithmetic mean of several stores with identical layout.
    pub fn average(stores: &[&ParamStore]) -> Result<ParamStore> {
        let first = stores
            .first()
            .ok_or_else(|| Error::Config("cannot average zero parameter sets".into()))?;
        for s in &stores[1..] {
            first.check_compatible(s)?;
        }
        let n = stores.len() as f64;
        let mut out = (*first).clone();
        for (i, p) in out.params.iter_mut().enumerate() {
            let mut acc = Matrix::zeros(p.values.rows(), p.values.cols());
            for s in stores {
                acc.add_assign(&s.params[i].values);
            }
            acc.scale_assign(1.0 / n);
            p.values = acc;
            p.grad.data_mut().fill(0.0);
        }
        Ok(out)
    }
}
