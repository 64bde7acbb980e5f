//! Parameterised layers shared by the model components. Layers only hold
//! [`ParamId`]s; values live in the [`ParamStore`] passed through [`Ctx`].

use autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Graph plus the parameter values it reads.
pub struct Ctx<'g, 'p, T: Scalar> {
    pub g: &'g Graph<T>,
    pub store: &'p ParamStore<T>,
}

impl<'g, 'p, T: Scalar> Ctx<'g, 'p, T> {
    pub fn new(g: &'g Graph<T>, store: &'p ParamStore<T>) -> Self {
        Self { g, store }
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.g.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.g.constant(t)
    }
}

pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64c(dist.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights `N(0, std²)`, zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), normal(&[in_dim, out_dim], std, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    /// Fan-in scaled initialisation, `std = gain / sqrt(in_dim)`.
    pub fn fan_in<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, in_dim, out_dim, gain / (in_dim as f64).sqrt(), true, rng)
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.linear(cx.p(self.w), self.b.map(|b| cx.p(b)))
    }

    /// Plain-tensor evaluation, no graph.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.matmul(store.value(self.w));
        if let Some(b) = self.b {
            let b = store.value(b);
            for row in y.data_mut().chunks_mut(self.out_dim) {
                for (o, &bi) in row.iter_mut().zip(b.data()) {
                    *o += bi;
                }
            }
        }
        y
    }
}

/// Multi-head self-attention over a `[L, D]` sequence.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
    pub causal: bool,
    /// Rotary position base; `None` disables rotary embedding.
    pub rope_base: Option<f64>,
}

impl SelfAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        causal: bool,
        rope_base: Option<f64>,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        let qkv = Linear::fan_in(store, &format!("{name}.qkv"), dim, 3 * dim, 1.0, rng);
        let out = Linear::new(store, &format!("{name}.out"), dim, dim, out_std, true, rng);
        Self { qkv, out, heads, dim, causal, rope_base }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let len = x.shape()[0];
        let dh = self.dim / self.heads;
        let qkv = self.qkv.forward(cx, x);
        let head = |k: usize| {
            qkv.narrow(1, k * self.dim, self.dim)
                .reshape(&[len, self.heads, dh])
                .permute(&[1, 0, 2])
        };
        let (mut q, mut k, v) = (head(0), head(1), head(2));
        if let Some(base) = self.rope_base {
            q = q.rope(base);
            k = k.rope(base);
        }
        let scale = T::from_f64c(1.0 / (dh as f64).sqrt());
        let att = q.bmm(k, true).scale(scale).softmax(self.causal);
        let ctx = att.bmm(v, false).permute(&[1, 0, 2]).reshape(&[len, self.dim]);
        self.out.forward(cx, ctx)
    }
}

/// Two-layer GELU feed-forward.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        out_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::fan_in(store, &format!("{name}.fc1"), dim, hidden, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, out_std, true, rng),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.fc2.forward(cx, self.fc1.forward(cx, x).gelu())
    }
}
