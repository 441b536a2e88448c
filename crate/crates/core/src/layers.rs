//! Parameterised building blocks shared by the fusion module and the
//! sequence backbone.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use crate::autograd::{AttentionSpec, Graph, Groups, ParamId, ParamStore, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Standard deviation of the Gaussian used for every weight matrix.
pub const INIT_STD: f64 = 0.02;

pub fn normal_init<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| T::of(dist.sample(rng)))
}

/// Dropout state for one forward pass. Evaluation mode never touches an RNG,
/// so eval passes are bitwise reproducible.
pub struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn eval() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut dyn RngCore) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => g.dropout(x, self.p, rng),
            _ => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), normal_init(fan_in, fan_out, INIT_STD, rng)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, d, T::one())),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, d)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "heads must divide the model width");
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            heads,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        keys_values: Var,
        query_groups: Groups,
        kv_groups: Groups,
        causal: bool,
    ) -> Var {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, keys_values);
        let v = self.value.forward(g, store, keys_values);
        let attended = g.attention(
            q,
            k,
            v,
            AttentionSpec {
                query_groups,
                kv_groups,
                heads: self.heads,
                causal,
            },
        );
        self.output.forward(g, store, attended)
    }
}

/// Two-layer position-wise network with a GELU in between.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), d, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, d, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.inner.forward(g, store, x);
        let h = g.gelu(h);
        self.outer.forward(g, store, h)
    }
}

/// Post-norm residual: `LN(x + dropout(sublayer))`.
pub fn add_and_norm<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    norm: &LayerNorm,
    x: Var,
    sublayer: Var,
    dropout: &mut Dropout<'_>,
) -> Var {
    let s = dropout.apply(g, sublayer);
    let sum = g.add(x, s);
    norm.forward(g, store, sum)
}
