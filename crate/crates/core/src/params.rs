//! Named parameter storage shared by every learned component.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Whether decoupled weight decay applies (false for biases and norm gains).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// How a new parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        dims: &[usize],
        init: Init,
        decay: bool,
    ) -> ParamId {
        let value = match init {
            Init::Zeros => Tensor::zeros(dims),
            Init::Ones => Tensor::full(dims, 1.0),
            Init::Normal(std) => {
                let n: usize = dims.iter().product();
                let dist = Normal::new(0.0, std).expect("finite std");
                let data = (0..n).map(|_| dist.sample(rng)).collect();
                Tensor::new(dims.to_vec(), data).expect("dims match")
            }
        };
        let n = value.numel();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: vec![0.0; n],
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, track_grad: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    let t = p.value.clone();
                    tape.leaf(if track_grad { t.with_grad() } else { t })
                })
                .collect(),
        )
    }

    /// Adds `scale · ∂loss/∂θ` from a swept tape into each parameter's grad buffer.
    pub fn accumulate(&mut self, tape: &Tape, bound: &Bound, scale: f64) {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(v) {
                for (acc, &x) in p.grad.iter_mut().zip(g) {
                    *acc += scale * x;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Copies values from `other`, which must carry the same names and dims.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_compatible(other.params.iter().map(|p| (p.name.as_str(), p.value.dims())))?;
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Verifies that `(name, dims)` pairs match this store exactly, in order.
    pub fn check_compatible<'a>(
        &self,
        entries: impl IntoIterator<Item = (&'a str, &'a [usize])>,
    ) -> Result<()> {
        let mut n = 0;
        for (i, (name, dims)) in entries.into_iter().enumerate() {
            let Some(p) = self.params.get(i) else {
                return Err(Error::Config(format!("unexpected parameter `{name}`")));
            };
            if p.name != name {
                return Err(Error::Config(format!(
                    "parameter {i} is `{}`, found `{name}`",
                    p.name
                )));
            }
            if p.value.dims() != dims {
                return Err(Error::Dimension {
                    name: name.to_string(),
                    expected: p.value.dims().to_vec(),
                    found: dims.to_vec(),
                });
            }
            n += 1;
        }
        if n != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {n}",
                self.params.len()
            )));
        }
        Ok(())
    }

    /// Overwrites every value with i.i.d. normal noise. Used by gradient checks
    /// so that no path is masked by zero initialization.
    pub fn randomize(&mut self, rng: &mut ChaCha8Rng, std: f64) {
        let dist = Normal::new(0.0, std).expect("finite std");
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = dist.sample(rng);
            }
        }
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| a.value.max_abs_diff(&b.value))
            .fold(0.0, f64::max)
    }

    pub fn values_bitwise_eq(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.dims() == b.value.dims()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Reuses caller-provided leaves, e.g. from a gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }
}

