//! Small parameterized building blocks expressed over [`Graph`] nodes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{normal, weight, ParamStore};
use crate::tensor::Tensor;

fn join(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// Affine map `x W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            prefix: prefix.into(),
            d_in,
            d_out,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        join(&self.prefix, "w")
    }

    pub fn bias_name(&self) -> String {
        join(&self.prefix, "b")
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(self.weight_name(), weight(rng, self.d_in, self.d_out));
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.d_out]));
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let y = g.matmul(x, w)?;
        if self.bias {
            let b = g.param(store, &self.bias_name())?;
            g.add_row(y, b)
        } else {
            Ok(y)
        }
    }
}

/// Layer-norm gain and bias over a width-`d` axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub prefix: String,
    pub d: usize,
}

impl Norm {
    pub fn new(prefix: impl Into<String>, d: usize) -> Self {
        Self {
            prefix: prefix.into(),
            d,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(join(&self.prefix, "gain"), Tensor::ones(&[self.d]));
        store.insert(join(&self.prefix, "bias"), Tensor::zeros(&[self.d]));
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, &join(&self.prefix, "gain"))?;
        let bias = g.param(store, &join(&self.prefix, "bias"))?;
        g.layer_norm(x, gain, bias)
    }
}

/// Pointwise nonlinearity used inside MLP blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `x * sigmoid(1.702 x)`.
    #[default]
    GeluLike,
    Relu,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Self::GeluLike => g.gelu_like(x),
            Self::Relu => g.relu(x),
        }
    }

    /// Numeric code stored in checkpoints.
    pub fn code(self) -> f32 {
        match self {
            Self::GeluLike => 0.0,
            Self::Relu => 1.0,
        }
    }
}

/// Two affine layers with a nonlinearity between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new(prefix: &str, d: usize, hidden: usize, act: Activation) -> Self {
        Self {
            fc1: Linear::new(join(prefix, "fc1"), d, hidden, true),
            fc2: Linear::new(join(prefix, "fc2"), hidden, d, true),
            act,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = self.act.apply(g, h)?;
        self.fc2.forward(g, store, h)
    }
}

/// Gated recurrent update over row-wise states.
///
/// `z = σ(x Wz + h Uz + bz)`, `r = σ(x Wr + h Ur + br)`,
/// `h~ = tanh(x Wh + (r ⊙ h) Uh + bh)`, `h' = (1 - z) ⊙ h + z ⊙ h~`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gru {
    pub prefix: String,
    pub d: usize,
}

impl Gru {
    pub fn new(prefix: impl Into<String>, d: usize) -> Self {
        Self {
            prefix: prefix.into(),
            d,
        }
    }

    pub fn name(&self, leaf: &str) -> String {
        join(&self.prefix, leaf)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for gate in ["z", "r", "h"] {
            store.insert(self.name(&format!("w{gate}")), weight(rng, self.d, self.d));
            store.insert(self.name(&format!("u{gate}")), weight(rng, self.d, self.d));
            store.insert(self.name(&format!("b{gate}")), Tensor::zeros(&[self.d]));
        }
    }

    /// Initializes every weight and bias from `N(0, std^2)`; handy for tests.
    pub fn init_normal<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R, std: f32) {
        for gate in ["z", "r", "h"] {
            for kind in ["w", "u"] {
                store.insert(self.name(&format!("{kind}{gate}")), normal(rng, &[self.d, self.d], std));
            }
            store.insert(self.name(&format!("b{gate}")), normal(rng, &[self.d], std));
        }
    }

    fn gate(&self, g: &mut Graph, store: &ParamStore, gate: &str, x: Var, h: Var) -> Result<Var> {
        let w = g.param(store, &self.name(&format!("w{gate}")))?;
        let u = g.param(store, &self.name(&format!("u{gate}")))?;
        let b = g.param(store, &self.name(&format!("b{gate}")))?;
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add_row(s, b)
    }

    pub fn step(&self, g: &mut Graph, store: &ParamStore, h: Var, x: Var) -> Result<Var> {
        let z = self.gate(g, store, "z", x, h)?;
        let z = g.sigmoid(z)?;
        let r = self.gate(g, store, "r", x, h)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h)?;
        let cand = self.gate(g, store, "h", x, rh)?;
        let cand = g.tanh(cand)?;
        // (1 - z) h + z h~ == h + z (h~ - h)
        let diff = g.sub(cand, h)?;
        let zd = g.mul(z, diff)?;
        g.add(h, zd)
    }
}

/// One GRU update on plain tensors (`h`, `x`: `[N, D]`).
pub fn gru_step(gru: &Gru, store: &ParamStore, h: &Tensor, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let hv = g.input(h.clone());
    let xv = g.input(x.clone());
    let out = gru.step(&mut g, store, hv, xv)?;
    Ok(g.value(out).clone())
}
