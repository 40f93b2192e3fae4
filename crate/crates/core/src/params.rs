//! Named parameter storage shared by the encoder and the probes.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

/// Graph handles of every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor<F>) -> ParamId {
        t.set_requires_grad(true);
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Insert every parameter into `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.leaf(t.clone())).collect())
    }

    /// Copy gradients computed on `g` into the parameters' grad buffers.
    pub fn absorb_grads(&mut self, g: &Graph<F>, bound: &Bound) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            if let Some(grad) = g.grad(v) {
                t.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replace tensor values by name, checking that names and shapes agree.
    pub fn load_values(&mut self, named: &[(String, Tensor<F>)]) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Data(format!(
                "expected {} parameters, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let (_, src) = named
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::dim("load_values", self.tensors[i].shape(), src.shape()));
            }
            self.tensors[i].data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over the raw parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.f64().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Fan-based uniform initialization: `U(-gain/√fan_in, gain/√fan_in)`.
pub fn uniform_init(rng: &mut Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor<f32> {
    let limit = gain / (fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-limit, limit) as f32)
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape matches by construction")
}
