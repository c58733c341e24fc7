//! Named parameter storage and the pointwise layers built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Matrix;

/// Negative slope used by every LeakyReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in self.iter() {
            hasher.update(name.as_bytes());
            hasher.update((value.rows() as u64).to_le_bytes());
            hasher.update((value.cols() as u64).to_le_bytes());
            for v in value.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Binds the tensors of one [`ParamStore`] onto a [`Graph`] on first use.
pub struct Bound<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Bound<'s> {
    /// Parameters enter the tape as gradient-tracked leaves.
    pub fn trainable(store: &'s ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable: true,
        }
    }

    /// Parameters enter the tape as constants.
    pub fn frozen(store: &'s ParamStore) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable: false,
        }
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable { g.param(value) } else { g.constant(value) };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradients for every stored tensor, zero-filled for parameters that
    /// did not take part in the forward pass.
    pub fn grads(&self, grads: &Gradients) -> Vec<Matrix> {
        self.store
            .values()
            .iter()
            .zip(&self.vars)
            .map(|(value, var)| {
                var.and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Matrix::zeros(value.rows(), value.cols()))
            })
            .collect()
    }
}

/// Uniform fan-in initialisation: `U(−1/√fan_in, 1/√fan_in)`.
pub fn uniform_fan_in(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// A pointwise (1×1) linear layer `y = x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_width: usize,
    pub out_width: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_width: usize, out_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_fan_in(in_width, out_width, in_width, rng));
        let bias = store.add(format!("{name}.bias"), uniform_fan_in(1, out_width, in_width, rng));
        Self {
            weight,
            bias,
            in_width,
            out_width,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, in_width: usize, out_width: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Matrix::zeros(in_width, out_width));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, out_width));
        Self {
            weight,
            bias,
            in_width,
            out_width,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound, x: Var) -> Var {
        debug_assert_eq!(g.value(x).cols(), self.in_width, "linear input width");
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// The layer followed by a LeakyReLU.
    pub fn forward_act(&self, g: &mut Graph, p: &mut Bound, x: Var) -> Var {
        let y = self.forward(g, p, x);
        g.leaky_relu(y, LEAKY_SLOPE)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Cascaded linear layers with a LeakyReLU between consecutive layers and
/// no activation after the last one.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, widths: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].in_width
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_width)
    }

    pub fn forward(&self, g: &mut Graph, p: &mut Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = if i < last {
                layer.forward_act(g, p, h)
            } else {
                layer.forward(g, p, h)
            };
        }
        h
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }
}
