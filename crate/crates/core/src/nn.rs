//! Layers built on the autodiff tape, each with a matching cache-free
//! `infer` path over plain slices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::kernels::{self, AttnDims};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Weight initialisation scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(d_in), 1/sqrt(d_in))`.
    FanIn,
    /// `N(0, std)`.
    Normal(f64),
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::FanIn => {
            let a = 1.0 / math::sqrt(shape[0] as f64);
            (0..n).map(|_| (2.0 * rng::uniform(rng) - 1.0) * a).collect()
        }
        Init::Normal(s) => (0..n).map(|_| rng::normal(rng) * s).collect(),
    };
    Tensor::from_vec(shape, data)
}

/// Learned table of `rows` vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut Rng) -> Self {
        let table = store.add(name, init_tensor(&[rows, dim], Init::Normal(0.02), rng), false);
        Self { table, rows, dim }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.embedding(t, ids)
    }

    pub fn row<'a>(&self, store: &'a ParamStore, id: usize) -> &'a [f64] {
        store.value(self.table).row(id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, init: Init, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.w"), init_tensor(&[d_in, d_out], init, rng), true);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out]), false));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.linear(x, w, b)
    }

    /// Row-batched forward on a flat slice.
    pub fn infer(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.d_in;
        let mut out = vec![0.0; rows * self.d_out];
        kernels::linear_forward(x, self.d_in, &store.value(self.w).data, self.b.map(|b| &store.value(b).data[..]), self.d_out, &mut out);
        out
    }

    pub fn macs(&self) -> u64 {
        (self.d_in * self.d_out) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), false);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false);
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (a, b) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, a, b)
    }

    pub fn infer(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let rows = x.len() / self.dim;
        let mut out = vec![0.0; x.len()];
        let (mut m, mut r) = (vec![0.0; rows], vec![0.0; rows]);
        kernels::layer_norm_forward(x, self.dim, &store.value(self.gamma).data, &store.value(self.beta).data, &mut out, &mut m, &mut r);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Gelu,
}

fn act_graph(g: &mut Graph, x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => g.relu(x),
        Activation::Gelu => g.gelu(x),
    }
}

fn act_inplace(x: &mut [f64], a: Activation) {
    match a {
        Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Gelu => x.iter_mut().for_each(|v| *v = math::gelu(*v)),
    }
}

/// Feed-forward stack; the activation sits between layers, not after the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub act: Activation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], act: Activation, rng: &mut Rng) -> Self {
        let layers = dims.windows(2).enumerate().map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, Init::FanIn, rng)).collect();
        Self { layers, act }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i + 1 < n {
                x = act_graph(g, x, self.act);
            }
        }
        x
    }

    pub fn infer(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let n = self.layers.len();
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.infer(store, &h);
            if i + 1 < n {
                act_inplace(&mut h, self.act);
            }
        }
        h
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, head_dim: usize, rng: &mut Rng) -> Self {
        let inner = heads * head_dim;
        let init = Init::Normal(0.02);
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, inner, false, init, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, inner, false, init, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, inner, false, init, rng),
            o: Linear::new(store, &format!("{name}.o"), inner, d_model, true, init, rng),
            heads,
            head_dim,
        }
    }

    fn dims(&self, batch: usize, q_len: usize, k_len: usize, causal: bool) -> AttnDims {
        AttnDims { batch, heads: self.heads, q_len, k_len, head_dim: self.head_dim, causal: causal.then_some(0) }
    }

    /// Returns `(output, attention node)`; `x` is `[batch*len, D]`.
    pub fn self_attend(&self, g: &mut Graph, x: Var, batch: usize, len: usize, causal: bool, dropout: f64) -> (Var, Var) {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, x);
        let v = self.v.forward(g, x);
        let a = g.attention(q, k, v, self.dims(batch, len, len, causal), dropout);
        (self.o.forward(g, a), a)
    }

    /// Queries from `xq` (`[batch*q_len, D]`) over keys from `xkv` (`[batch*k_len, D]`).
    #[allow(clippy::too_many_arguments)]
    pub fn cross_attend(&self, g: &mut Graph, xq: Var, xkv: Var, batch: usize, q_len: usize, k_len: usize, dropout: f64) -> (Var, Var) {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xkv);
        let v = self.v.forward(g, xkv);
        let a = g.attention(q, k, v, self.dims(batch, q_len, k_len, false), dropout);
        (self.o.forward(g, a), a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FfKind {
    /// `D -> 4D -> D` with GELU.
    Gelu,
    /// `D -> 2·4D`, gated GELU, `4D -> D`.
    Geglu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub kind: FfKind,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, mult: usize, kind: FfKind, rng: &mut Rng) -> Self {
        let hidden = d * mult;
        let up_out = match kind {
            FfKind::Gelu => hidden,
            FfKind::Geglu => 2 * hidden,
        };
        let init = Init::Normal(0.02);
        Self {
            kind,
            up: Linear::new(store, &format!("{name}.up"), d, up_out, true, init, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, true, init, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = match self.kind {
            FfKind::Gelu => g.gelu(h),
            FfKind::Geglu => g.geglu(h),
        };
        self.down.forward(g, h)
    }

    pub fn infer(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let mut h = self.up.infer(store, x);
        match self.kind {
            FfKind::Gelu => act_inplace(&mut h, Activation::Gelu),
            FfKind::Geglu => {
                let w = self.up.d_out;
                let half = w / 2;
                let rows = h.len() / w;
                let mut out = vec![0.0; rows * half];
                for r in 0..rows {
                    for j in 0..half {
                        out[r * half + j] = h[r * w + j] * math::gelu(h[r * w + half + j]);
                    }
                }
                h = out;
            }
        }
        self.down.infer(store, &h)
    }

    pub fn macs(&self) -> u64 {
        self.up.macs() + self.down.macs()
    }
}

/// Pre-LN Transformer block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

/// Per-layer key/value cache for incremental causal decoding.
#[derive(Clone, Debug, Default)]
pub struct LayerCache {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, head_dim: usize, ff: FfKind, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, heads, head_dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, 4, ff, rng),
        }
    }

    /// Returns `(output, attention node)`.
    pub fn forward(&self, g: &mut Graph, x: Var, batch: usize, len: usize, causal: bool, dropout: f64) -> (Var, Var) {
        let h = self.ln1.forward(g, x);
        let (a, node) = self.attn.self_attend(g, h, batch, len, causal, dropout);
        let a = g.dropout(a, dropout);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let f = self.ff.forward(g, h);
        let f = g.dropout(f, dropout);
        (g.add(x, f), node)
    }

    /// Appends one position per batch row to `cache` and returns the block output.
    /// `x` is `[batch, D]`; `cache` holds `[batch, len, inner]` keys and values.
    pub fn infer_step(&self, store: &ParamStore, x: &[f64], batch: usize, cache: &mut LayerCache, len: usize) -> Vec<f64> {
        let d = self.ln1.dim;
        let inner = self.attn.heads * self.attn.head_dim;
        let h = self.ln1.infer(store, x);
        let q = self.attn.q.infer(store, &h);
        let k = self.attn.k.infer(store, &h);
        let v = self.attn.v.infer(store, &h);
        let new_len = len + 1;
        // re-layout cache as [batch, new_len, inner]
        let mut kc = vec![0.0; batch * new_len * inner];
        let mut vc = vec![0.0; batch * new_len * inner];
        for b in 0..batch {
            if len > 0 {
                kc[b * new_len * inner..][..len * inner].copy_from_slice(&cache.k[b * len * inner..][..len * inner]);
                vc[b * new_len * inner..][..len * inner].copy_from_slice(&cache.v[b * len * inner..][..len * inner]);
            }
            kc[(b * new_len + len) * inner..][..inner].copy_from_slice(&k[b * inner..][..inner]);
            vc[(b * new_len + len) * inner..][..inner].copy_from_slice(&v[b * inner..][..inner]);
        }
        cache.k = kc;
        cache.v = vc;
        let dims = AttnDims { batch, heads: self.attn.heads, q_len: 1, k_len: new_len, head_dim: self.attn.head_dim, causal: None };
        let mut probs = vec![0.0; dims.probs_len()];
        let mut a = vec![0.0; batch * inner];
        kernels::attention_forward(&q, &cache.k, &cache.v, dims, None, &mut probs, &mut a);
        let a = self.attn.o.infer(store, &a);
        let mut x1 = x.to_vec();
        kernels::axpy(&mut x1, 1.0, &a);
        let h = self.ln2.infer(store, &x1);
        let f = self.ff.infer(store, &h);
        kernels::axpy(&mut x1, 1.0, &f);
        debug_assert_eq!(x1.len(), batch * d);
        x1
    }
}
