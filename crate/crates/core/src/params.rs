//! Named parameter storage and the small layer types built on it.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::tensor::{nn, Gradients, Graph, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Frozen entries are bound as constants and never updated.
    pub trainable: bool,
}

/// Ordered collection of named tensors. Insertion order is the binding order,
/// the serialization order and the optimizer-state order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.push(name, tensor, true)
    }

    pub fn add_frozen(&mut self, name: &str, tensor: Tensor) -> ParamId {
        self.push(name, tensor, false)
    }

    fn push(&mut self, name: &str, tensor: Tensor, trainable: bool) -> ParamId {
        debug_assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    /// Total number of scalars over trainable entries.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.data.len())
            .sum()
    }

    /// Places every entry on the graph as a leaf.
    pub fn bind(&self, g: &mut Graph) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.param(&e.tensor)
                } else {
                    g.constant(&e.tensor)
                }
            })
            .collect();
        Bindings { vars }
    }

    /// Binds trainable entries as slices of one flat `1 x P` variable, in
    /// store order. Used to finite-difference the whole model at once.
    pub fn bind_from_flat(&self, g: &mut Graph, flat: Var) -> Result<Bindings> {
        let mut off = 0;
        let mut vars = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if !e.trainable {
                vars.push(g.constant(&e.tensor));
                continue;
            }
            let n = e.tensor.data.len();
            let index = (off..off + n).collect();
            vars.push(g.gather(flat, index, e.tensor.rows, e.tensor.cols)?);
            off += n;
        }
        Ok(Bindings { vars })
    }

    /// Concatenates trainable entries into one row vector.
    pub fn flatten_trainable(&self) -> Tensor {
        let data = self
            .entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.tensor.data.iter().copied())
            .collect();
        Tensor::row_vector(data)
    }

    /// Reads each trainable entry's gradient; entries the loss does not reach
    /// get zeros.
    pub fn gradients(&self, bindings: &Bindings, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.entries
            .iter()
            .zip(&bindings.vars)
            .map(|(e, &v)| {
                e.trainable.then(|| {
                    grads
                        .get(v)
                        .map(|d| d.to_vec())
                        .unwrap_or_else(|| alloc::vec![0.0; e.tensor.data.len()])
                })
            })
            .collect()
    }
}

/// Graph variables for every entry of a [`ParamStore`], by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    /// Bindings of an empty store.
    pub fn empty() -> Self {
        Self { vars: Vec::new() }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Uniform Glorot initialization for an `fan_in x fan_out` weight.
pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor {
        rows: fan_in,
        cols: fan_out,
        data,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = store.add(&alloc::format!("{name}.weight"), glorot(fan_in, fan_out, rng));
        let b = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        nn::linear(g, x, p.get(self.w), p.get(self.b))
    }
}

/// `Linear → ReLU → Linear`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        Self {
            first: Linear::new(store, &alloc::format!("{name}.0"), dims.0, dims.1, rng),
            second: Linear::new(store, &alloc::format!("{name}.1"), dims.1, dims.2, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.first.forward(g, p, x)?;
        let h = g.relu(h);
        self.second.forward(g, p, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(&alloc::format!("{name}.gain"), Tensor::filled(1, dim, 1.0));
        let bias = store.add(&alloc::format!("{name}.bias"), Tensor::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        nn::layer_norm(g, x, p.get(self.gain), p.get(self.bias))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_binding_matches_direct_binding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        store.add_frozen("frozen", Tensor::filled(1, 2, 7.0));
        let x = Tensor::from_rows(&[alloc::vec![1.0, -2.0, 0.5]]).unwrap();

        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let xv = g.constant(&x);
        let y1 = lin.forward(&mut g, &b, xv).unwrap();

        let mut g2 = Graph::new();
        let flat = g2.param(&store.flatten_trainable());
        let b2 = store.bind_from_flat(&mut g2, flat).unwrap();
        let xv2 = g2.constant(&x);
        let y2 = lin.forward(&mut g2, &b2, xv2).unwrap();
        assert_eq!(g.value(y1), g2.value(y2));
        assert_eq!(store.num_trainable(), 8);
    }
}
