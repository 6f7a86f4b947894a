use crate::ndgrad::{GradError, Graph, ParameterStore, Tensor, Var};
use crate::stochastics::RngStream;

/// Decides which parameters enter a graph as trainable leaves.
///
/// Parameters whose group is not in `trainable` are placed on the tape as
/// constants, so they receive no gradient and cost nothing in the reverse pass.
#[derive(Clone, Copy, Debug)]
pub struct Binder<'a> {
    pub store: &'a ParameterStore,
    trainable: Option<&'a [&'a str]>,
}

impl<'a> Binder<'a> {
    /// Every parameter trainable.
    pub fn all(store: &'a ParameterStore) -> Self {
        Self { store, trainable: None }
    }

    /// Only the listed groups trainable.
    pub fn groups(store: &'a ParameterStore, groups: &'a [&'a str]) -> Self {
        Self {
            store,
            trainable: Some(groups),
        }
    }

    /// Nothing trainable; for evaluation and input gradients.
    pub fn frozen(store: &'a ParameterStore) -> Self {
        Self {
            store,
            trainable: Some(&[]),
        }
    }

    pub fn var(&self, g: &mut Graph, name: &str) -> Result<Var, GradError> {
        let group = self
            .store
            .group_of(name)
            .ok_or_else(|| GradError::UnknownParameter(name.to_string()))?;
        match self.trainable {
            Some(t) if !t.contains(&group) => g.frozen_param(self.store, name),
            _ => g.param(self.store, name),
        }
    }
}

/// How the weights of a freshly created layer are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal weights for ReLU layers, Glorot-style for linear outputs, zero biases.
    Random,
    /// Every weight and bias zero.
    Zero,
}

/// Fully connected network. Hidden layers use ReLU; the last layer is ReLU
/// too when `relu_out` is set, and linear otherwise.
#[derive(Clone, Debug)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
    relu_out: bool,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, input: usize, layers: &[usize], relu_out: bool) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(layers);
        Self {
            prefix: prefix.into(),
            sizes,
            relu_out,
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}/{layer}/w", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}/{layer}/b", self.prefix)
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn register(&self, store: &mut ParameterStore, group: &str, init: Init, rng: &mut RngStream) -> Result<(), GradError> {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let last = l + 1 == self.layers();
            let std = if last && !self.relu_out {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let w = match init {
                Init::Random => rng.normal_tensor(&[fan_in, fan_out]).map(|v| v * std),
                Init::Zero => Tensor::zeros(&[fan_in, fan_out]),
            };
            store.insert(self.weight_name(l), group, w)?;
            store.insert(self.bias_name(l), group, Tensor::zeros(&[fan_out]))?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder, x: Var) -> Result<Var, GradError> {
        self.forward_masked(g, b, x, &mut |_, _, h| Ok(h))
    }

    /// Forward pass with a hook applied after each hidden activation
    /// (used for dropout).
    pub fn forward_masked(
        &self,
        g: &mut Graph,
        b: &Binder,
        x: Var,
        hook: &mut dyn FnMut(&mut Graph, usize, Var) -> Result<Var, GradError>,
    ) -> Result<Var, GradError> {
        let mut h = x;
        for l in 0..self.layers() {
            let w = b.var(g, &self.weight_name(l))?;
            let bias = b.var(g, &self.bias_name(l))?;
            h = g.matmul(h, w)?;
            h = g.add_bias(h, bias)?;
            let last = l + 1 == self.layers();
            if !last || self.relu_out {
                h = g.relu(h)?;
            }
            if !last {
                h = hook(g, l, h)?;
            }
        }
        Ok(h)
    }
}
