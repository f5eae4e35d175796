use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// FNV-1a hash of a parameter name.
fn name_stream(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Handle to a parameter registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Initialization rule recorded at declaration time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    Uniform(f64),
    Normal(f64),
}

#[derive(Clone, Debug)]
struct Decl {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Named learnable parameters with their accumulated gradients.
///
/// Layers declare parameters (name, shape, init rule) first; values are
/// drawn by [`ParamStore::materialize`]. A declared-only store is enough to
/// count parameters without allocating them.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    decls: Vec<Decl>,
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.decls.iter().all(|d| d.name != name),
            "duplicate parameter {name}"
        );
        self.decls.push(Decl {
            name,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.decls.len() - 1)
    }

    /// Draws every declared value. Each parameter uses its own random
    /// stream keyed by its name, so values do not depend on which other
    /// parameters exist or the order they were declared in.
    pub fn materialize(&mut self, seed: u64) {
        self.values = self
            .decls
            .iter()
            .map(|d| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(name_stream(&d.name));
                let rng = &mut rng;
                let n: usize = d.shape.iter().product();
                let data: Vec<f64> = match d.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Constant(c) => vec![c; n],
                    Init::Uniform(bound) => {
                        (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                    }
                    Init::Normal(std) => {
                        let normal = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| normal.sample(rng)).collect()
                    }
                };
                Tensor::from_parts(d.shape.clone(), data)
            })
            .collect();
        self.grads = self.values.iter().map(|v| vec![0.0; v.numel()]).collect();
    }

    pub fn is_materialized(&self) -> bool {
        self.values.len() == self.decls.len()
    }

    pub fn len(&self) -> usize {
        self.decls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decls.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.decls.len()).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.decls
            .iter()
            .map(|d| d.shape.iter().product::<usize>())
            .sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.decls[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.decls[id.0].shape
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.decls.iter().position(|d| d.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        assert!(self.is_materialized(), "parameter store not materialized");
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        assert!(self.is_materialized(), "parameter store not materialized");
        &mut self.values[id.0]
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.shape(id) {
            return Err(Error::shape("set_value", self.shape(id), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn grads_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.grads
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Values and gradients side by side, for optimizers.
    pub(crate) fn values_and_grads_mut(&mut self) -> (&mut [Tensor], &mut [Vec<f64>]) {
        (&mut self.values, &mut self.grads)
    }

    /// Snapshot of all values keyed by name, in declaration order.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.decls
            .iter()
            .zip(&self.values)
            .map(|(d, v)| (d.name.clone(), v.clone()))
            .collect()
    }

    /// Replaces all values from a named snapshot; names and shapes must
    /// match the declarations exactly.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let mut problems = Vec::new();
        for d in &self.decls {
            match named.iter().find(|(n, _)| *n == d.name) {
                None => problems.push(format!("missing {}", d.name)),
                Some((_, t)) if t.shape() != d.shape.as_slice() => problems.push(format!(
                    "{}: expected shape {:?}, found {:?}",
                    d.name,
                    d.shape,
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for (n, _) in named {
            if !self.decls.iter().any(|d| d.name == *n) {
                problems.push(format!("unexpected {n}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        self.values = self
            .decls
            .iter()
            .map(|d| {
                named
                    .iter()
                    .find(|(n, _)| *n == d.name)
                    .map(|(_, t)| t.clone())
                    .expect("checked above")
            })
            .collect();
        self.grads = self.values.iter().map(|v| vec![0.0; v.numel()]).collect();
        Ok(())
    }
}
