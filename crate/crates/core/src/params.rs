use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use symnet_tensor::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter arrays.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn census(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces a value by name, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::NotFound(format!("parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::InvalidArgument(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                value.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Registers every parameter on the tape once, borrowing its storage.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Result<Bound> {
        let vars = self
            .values
            .iter()
            .zip(&self.trainable)
            .map(|(v, &t)| tape.param(v, t))
            .collect::<symnet_tensor::Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// He-normal initializer scaled by `gain`.
pub fn he_normal<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
}

/// A `k x k` convolution with bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        gain: f64,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.weight"),
            he_normal(rng, &[k, k, cin, cout], k * k * cin, gain),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        Self { kernel, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, bound: &Bound, x: Var) -> Result<Var> {
        Ok(tape.conv2d(x, bound.var(self.kernel), Some(bound.var(self.bias)))?)
    }

    pub fn forward_relu<T: Real>(&self, tape: &mut Tape<'_, T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = self.forward(tape, bound, x)?;
        Ok(tape.relu(y)?)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.kernel, self.bias]
    }
}

/// Dense layer `x W + b` on row vectors.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        din: usize,
        dout: usize,
        gain: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal(rng, &[din, dout], din, gain), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, dout]), true);
        Self { weight, bias }
    }

    /// `x` is `n x din`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        let rows = tape.shape(y)[0];
        let b = if rows == 1 {
            bound.var(self.bias)
        } else {
            let flat = tape.reshape(bound.var(self.bias), &[tape.shape(bound.var(self.bias))[1]])?;
            let tiled = tape.broadcast_spatial(flat, rows, 1)?;
            let n = tape.shape(y)[1];
            tape.reshape(tiled, &[rows, n])?
        };
        Ok(tape.add(y, b)?)
    }
}
