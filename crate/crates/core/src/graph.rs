//! Reverse-mode autodiff tape over coarse fused ops.
//!
//! A [`Graph`] borrows a [`ParamStore`] for one forward pass; every op
//! appends a node and [`Graph::backward`] walks the tape in reverse.

use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, AttnDims};
use crate::math;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

/// Saved state of a PPO objective row batch.
#[derive(Clone, Debug)]
pub struct PpoBatch {
    pub masks: Vec<bool>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub weights: Vec<f64>,
    pub clip_eps: f64,
    pub entropy_coef: f64,
}

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Geglu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<f64>, keep: Option<Vec<f64>> },
    Dropout { x: Var, keep: Vec<f64> },
    StraightThrough(Var),
    Sum(Var),
    WeightedSum(Vec<(Var, f64)>),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
    SmoothL1 { pred: Var, target: Vec<f64>, weights: Vec<f64> },
    SquaredError { pred: Var, target: Vec<f64>, weights: Vec<f64> },
    Ppo { logits: Var, batch: PpoBatch, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    dropout_rng: Option<Rng>,
}

/// Result of [`Graph::backward`]: gradients for every reached node and param.
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    pub params: Gradients,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].as_ref()
    }
}

impl<'s> Graph<'s> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: vec![None; store.len()], dropout_rng: None }
    }

    /// Training-mode graph with dropout drawn from `seed`.
    pub fn training(store: &'s ParamStore, seed: u64) -> Self {
        let mut g = Self::new(store);
        g.dropout_rng = Some(rng::seeded(seed));
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        match self.nodes[v.0].op {
            Op::Param(id) => self.store.value(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.value(v).shape
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf input that gradients are tracked for (probing, tests).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(Tensor::zeros(&[0]), Op::Param(id), true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (d_in, d_out) = {
            let ws = self.shape(w);
            (ws[0], ws[1])
        };
        let xv = self.value(x);
        assert_eq!(xv.cols(), d_in, "linear input width {} != {}", xv.cols(), d_in);
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = d_out;
        let mut out = Tensor::zeros(&shape);
        kernels::linear_forward(&xv.data, d_in, &self.value(w).data, b.map(|b| &self.value(b).data[..]), d_out, &mut out.data);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "add shape mismatch {:?} vs {:?}", av.shape, bv.shape);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(&av.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `a + b` where `b` is repeated over `a`'s leading elements.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = bv.len();
        assert!(n > 0 && av.len() % n == 0, "broadcast {:?} onto {:?}", bv.shape, av.shape);
        let mut out = av.clone();
        for chunk in out.data.chunks_mut(n) {
            kernels::axpy(chunk, 1.0, &bv.data);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddBroadcast(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len());
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(&av.shape.clone(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::from_vec(&av.shape.clone(), av.data.iter().map(|x| x * s).collect());
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::from_vec(&av.shape.clone(), av.data.iter().map(|&x| math::gelu(x)).collect());
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::from_vec(&av.shape.clone(), av.data.iter().map(|&x| x.max(0.0)).collect());
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Gated GELU: splits the trailing axis in halves `[a, g]` and returns `a * gelu(g)`.
    pub fn geglu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        assert!(c.is_multiple_of(2));
        let h = c / 2;
        let rows = xv.rows();
        let mut shape = xv.shape.clone();
        *shape.last_mut().unwrap() = h;
        let mut out = Tensor::zeros(&shape);
        for r in 0..rows {
            let xr = xv.row(r);
            let o = &mut out.data[r * h..(r + 1) * h];
            for i in 0..h {
                o[i] = xr[i] * math::gelu(xr[h + i]);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Geglu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let rows = xv.rows();
        let mut out = Tensor::zeros(&xv.shape.clone());
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        kernels::layer_norm_forward(&xv.data, d, &self.value(gamma).data, &self.value(beta).data, &mut out.data, &mut mean, &mut rstd);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }, rg)
    }

    /// Row lookup: output `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows(), "embedding index {id} out of range {}", tv.rows());
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Stacks row-blocks sharing a trailing width into `[total_rows, D]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let d = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(total * d);
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), d, "concat_rows width mismatch");
            data.extend_from_slice(&pv.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&[total, d], data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Selects rows of a `[R, D]` view by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Tensor::zeros(&[idx.len(), d]);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Multi-head scaled dot-product attention; see [`AttnDims`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims, dropout: f64) -> Var {
        let keep = self.dropout_mask(dims.probs_len(), dropout);
        let mut probs = vec![0.0; dims.probs_len()];
        let mut out = Tensor::zeros(&[dims.batch * dims.q_len, dims.inner()]);
        kernels::attention_forward(&self.value(q).data, &self.value(k).data, &self.value(v).data, dims, keep.as_deref(), &mut probs, &mut out.data);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, dims, probs, keep }, rg)
    }

    /// Attention weights of an attention node, laid out `[batch, heads, q_len, k_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], AttnDims)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, dims, .. } => Some((probs, *dims)),
            _ => None,
        }
    }

    fn dropout_mask(&mut self, n: usize, p: f64) -> Option<Vec<f64>> {
        if p <= 0.0 {
            return None;
        }
        let rng = self.dropout_rng.as_mut()?;
        let s = 1.0 / (1.0 - p);
        Some((0..n).map(|_| if rng::uniform(rng) < p { 0.0 } else { s }).collect())
    }

    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let n = self.value(x).len();
        match self.dropout_mask(n, p) {
            None => x,
            Some(keep) => {
                let xv = self.value(x);
                let data = xv.data.iter().zip(&keep).map(|(a, m)| a * m).collect();
                let out = Tensor::from_vec(&xv.shape.clone(), data);
                let rg = self.rg(x);
                self.push(out, Op::Dropout { x, keep }, rg)
            }
        }
    }

    /// Forward value `replacement`, backward identity into `x`.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor) -> Var {
        assert_eq!(self.value(x).shape, replacement.shape);
        let rg = self.rg(x);
        self.push(replacement, Op::StraightThrough(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ c_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|&(v, c)| self.value(v).item() * c).sum();
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// `Σ_r w_r · (−log softmax(logits_r)[t_r])` over rows of `[R, C]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        let c = lv.cols();
        let rows = lv.rows();
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let mut probs = lv.data.clone();
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &mut probs[r * c..(r + 1) * c];
            kernels::log_softmax_row(row);
            loss -= weights[r] * row[targets[r]];
            for x in row.iter_mut() {
                *x = math::exp(*x);
            }
        }
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs }, rg)
    }

    /// Elementwise weighted binary cross-entropy on logits, summed.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len());
        assert_eq!(lv.len(), weights.len());
        let loss = lv.data.iter().zip(targets).zip(weights).map(|((&x, &y), &w)| w * (math::softplus(x) - y * x)).sum();
        let rg = self.rg(logits);
        self.push(Tensor::scalar(loss), Op::BceLogits { logits, targets: targets.to_vec(), weights: weights.to_vec() }, rg)
    }

    /// Elementwise weighted smooth-L1 (Huber, δ = 1), summed.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], weights: &[f64]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len());
        let loss = pv.data.iter().zip(target).zip(weights).map(|((&p, &t), &w)| w * math::smooth_l1(p - t)).sum();
        let rg = self.rg(pred);
        self.push(Tensor::scalar(loss), Op::SmoothL1 { pred, target: target.to_vec(), weights: weights.to_vec() }, rg)
    }

    /// Elementwise weighted squared error against a constant target, summed.
    pub fn squared_error(&mut self, pred: Var, target: &[f64], weights: &[f64]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len());
        assert_eq!(pv.len(), weights.len());
        let loss = pv.data.iter().zip(target).zip(weights).map(|((&p, &t), &w)| w * (p - t) * (p - t)).sum();
        let rg = self.rg(pred);
        self.push(Tensor::scalar(loss), Op::SquaredError { pred, target: target.to_vec(), weights: weights.to_vec() }, rg)
    }

    /// Clipped surrogate plus entropy bonus, summed over rows:
    /// `Σ_r w_r [min(ρ A, clip(ρ, 1−ε, 1+ε) A) + η H(π_r)]` with masked softmax policies.
    pub fn ppo_objective(&mut self, logits: Var, batch: PpoBatch) -> Var {
        let lv = self.value(logits);
        let a = lv.cols();
        let rows = lv.rows();
        assert_eq!(batch.masks.len(), rows * a);
        let mut probs = vec![0.0; rows * a];
        let mut total = 0.0;
        for r in 0..rows {
            let p = &mut probs[r * a..(r + 1) * a];
            let mask = &batch.masks[r * a..(r + 1) * a];
            kernels::masked_softmax(lv.row(r), mask, p);
            let (surr, ent, _) = ppo_row_terms(p, &batch, r);
            total += batch.weights[r] * (surr + batch.entropy_coef * ent);
        }
        let rg = self.rg(logits);
        self.push(Tensor::scalar(total), Op::Ppo { logits, batch, probs }, rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut params = Gradients::empty(self.store.len());
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads, &mut params);
            grads[i] = Some(g);
        }
        Grads { nodes: grads, params }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], params: &mut Gradients) {
        match &self.nodes[i].op {
            Op::Input => {}
            Op::Param(id) => params.accumulate(*id, &g.data, &self.store.value(*id).shape),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (d_in, d_out) = (wv.shape[0], wv.shape[1]);
                let mut dx = self.rg(*x).then(|| vec![0.0; xv.len()]);
                let mut dw = self.rg(*w).then(|| vec![0.0; wv.len()]);
                let mut db = b.filter(|b| self.rg(*b)).map(|_| vec![0.0; d_out]);
                kernels::linear_backward(&xv.data, d_in, &wv.data, d_out, &g.data, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                if let Some(dx) = dx {
                    self.acc(grads, *x, &dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, &dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.acc(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, &g.data);
                self.acc(grads, *b, &g.data);
            }
            Op::AddBroadcast(a, b) => {
                self.acc(grads, *a, &g.data);
                if self.rg(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for chunk in g.data.chunks(n) {
                        kernels::axpy(&mut db, 1.0, chunk);
                    }
                    self.acc(grads, *b, &db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d: Vec<f64> = g.data.iter().zip(&bv.data).map(|(g, y)| g * y).collect();
                    self.acc(grads, *a, &d);
                }
                if self.rg(*b) {
                    let d: Vec<f64> = g.data.iter().zip(&av.data).map(|(g, x)| g * x).collect();
                    self.acc(grads, *b, &d);
                }
            }
            Op::Scale(a, s) => {
                let d: Vec<f64> = g.data.iter().map(|x| x * s).collect();
                self.acc(grads, *a, &d);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d: Vec<f64> = g.data.iter().zip(&av.data).map(|(g, &x)| g * math::gelu_grad(x)).collect();
                self.acc(grads, *a, &d);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d: Vec<f64> = g.data.iter().zip(&av.data).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.acc(grads, *a, &d);
            }
            Op::Geglu(x) => {
                let xv = self.value(*x);
                let c = xv.cols();
                let h = c / 2;
                let mut d = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    let xr = xv.row(r);
                    let gr = &g.data[r * h..(r + 1) * h];
                    let dr = &mut d[r * c..(r + 1) * c];
                    for j in 0..h {
                        dr[j] = gr[j] * math::gelu(xr[h + j]);
                        dr[h + j] = gr[j] * xr[j] * math::gelu_grad(xr[h + j]);
                    }
                }
                self.acc(grads, *x, &d);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                kernels::layer_norm_backward(&xv.data, d, &gv.data, mean, rstd, &g.data, &mut dx, &mut dg, &mut dbeta);
                self.acc(grads, *x, &dx);
                self.acc(grads, *gamma, &dg);
                self.acc(grads, *beta, &dbeta);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(&mut dt[id * d..(id + 1) * d], 1.0, &g.data[r * d..(r + 1) * d]);
                }
                self.acc(grads, *table, &dt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, &g.data[off..off + n]);
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    kernels::axpy(&mut dx[src * d..(src + 1) * d], 1.0, &g.data[r * d..(r + 1) * d]);
                }
                self.acc(grads, *x, &dx);
            }
            Op::Reshape(x) | Op::StraightThrough(x) => self.acc(grads, *x, &g.data),
            Op::Attention { q, k, v, dims, probs, keep } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                kernels::attention_backward(&qv.data, &kv.data, &vv.data, *dims, keep.as_deref(), probs, &g.data, &mut dq, &mut dk, &mut dv);
                self.acc(grads, *q, &dq);
                self.acc(grads, *k, &dk);
                self.acc(grads, *v, &dv);
            }
            Op::Dropout { x, keep } => {
                let d: Vec<f64> = g.data.iter().zip(keep).map(|(g, m)| g * m).collect();
                self.acc(grads, *x, &d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, &vec![g.item(); n]);
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.acc(grads, v, &[g.item() * c]);
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let c = self.value(*logits).cols();
                let gs = g.item();
                let mut d = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = &mut d[r * c..(r + 1) * c];
                    row[t] -= 1.0;
                    for x in row.iter_mut() {
                        *x *= w * gs;
                    }
                }
                self.acc(grads, *logits, &d);
            }
            Op::BceLogits { logits, targets, weights } => {
                let gs = g.item();
                let lv = self.value(*logits);
                let d: Vec<f64> = lv.data.iter().zip(targets).zip(weights).map(|((&x, &y), &w)| gs * w * (math::sigmoid(x) - y)).collect();
                self.acc(grads, *logits, &d);
            }
            Op::SmoothL1 { pred, target, weights } => {
                let gs = g.item();
                let pv = self.value(*pred);
                let d: Vec<f64> = pv.data.iter().zip(target).zip(weights).map(|((&p, &t), &w)| gs * w * math::smooth_l1_grad(p - t)).collect();
                self.acc(grads, *pred, &d);
            }
            Op::SquaredError { pred, target, weights } => {
                let gs = g.item();
                let pv = self.value(*pred);
                let d: Vec<f64> = pv.data.iter().zip(target).zip(weights).map(|((&p, &t), &w)| gs * w * 2.0 * (p - t)).collect();
                self.acc(grads, *pred, &d);
            }
            Op::Ppo { logits, batch, probs } => {
                let gs = g.item();
                let a = self.value(*logits).cols();
                let mut d = vec![0.0; probs.len()];
                for r in 0..probs.len() / a {
                    let p = &probs[r * a..(r + 1) * a];
                    let mask = &batch.masks[r * a..(r + 1) * a];
                    let (_, ent, dsurr_dlogp) = ppo_row_terms(p, batch, r);
                    let w = batch.weights[r] * gs;
                    let act = batch.actions[r];
                    let dr = &mut d[r * a..(r + 1) * a];
                    for j in 0..a {
                        if !mask[j] {
                            continue;
                        }
                        let onehot = if j == act { 1.0 } else { 0.0 };
                        let dlogp = onehot - p[j];
                        let dent = if p[j] > 0.0 { -p[j] * (math::ln(p[j]) + ent) } else { 0.0 };
                        dr[j] = w * (dsurr_dlogp * dlogp + batch.entropy_coef * dent);
                    }
                }
                self.acc(grads, *logits, &d);
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, d: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => kernels::axpy(&mut t.data, 1.0, d),
            slot @ None => {
                let shape = self.value(v).shape.clone();
                *slot = Some(Tensor::from_vec(&shape, d.to_vec()));
            }
        }
    }
}

/// Returns `(surrogate, entropy, d surrogate / d log π(a))` for one row.
fn ppo_row_terms(p: &[f64], batch: &PpoBatch, r: usize) -> (f64, f64, f64) {
    let act = batch.actions[r];
    let adv = batch.advantages[r];
    let logp = math::ln(p[act]);
    let ratio = math::exp(logp - batch.old_log_probs[r]);
    let clipped = ratio.clamp(1.0 - batch.clip_eps, 1.0 + batch.clip_eps);
    let s1 = ratio * adv;
    let s2 = clipped * adv;
    let (surr, d) = if s1 <= s2 { (s1, ratio * adv) } else { (s2, 0.0) };
    let ent = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * math::ln(x)).sum::<f64>();
    (surr, ent, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn fd_check<F>(store: &mut ParamStore, f: F, tol: f64)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let grads = {
            let mut g = Graph::new(store);
            let loss = f(&mut g);
            g.backward(loss).params
        };
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.value(id).len();
            for e in 0..n {
                let orig = store.value(id).data[e];
                store.value_mut(id).data[e] = orig + h;
                let lp = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                store.value_mut(id).data[e] = orig - h;
                let lm = {
                    let mut g = Graph::new(store);
                    let l = f(&mut g);
                    g.value(l).item()
                };
                store.value_mut(id).data[e] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads.get(id).map_or(0.0, |t| t.data[e]);
                let err = (fd - an).abs() / (1e-6 + fd.abs().max(an.abs()));
                assert!(err < tol || (fd - an).abs() < 1e-8, "param {} elem {e}: fd {fd} analytic {an}", store.entry(id).name);
            }
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng::normal(&mut r) * 0.5).collect())
    }

    #[test]
    fn linear_layernorm_gelu_gradients() {
        let mut s = ParamStore::new();
        let w = s.add("w", rand_tensor(&[3, 4], 1), true);
        let b = s.add("b", rand_tensor(&[4], 2), false);
        let gm = s.add("g", rand_tensor(&[4], 3), false);
        let bt = s.add("beta", rand_tensor(&[4], 4), false);
        let x = rand_tensor(&[5, 3], 5);
        let target: Vec<f64> = (0..20).map(|i| (i as f64) * 0.05).collect();
        fd_check(
            &mut s,
            |g| {
                let xi = g.input(x.clone());
                let (wv, bv, gv, btv) = (g.param(w), g.param(b), g.param(gm), g.param(bt));
                let h = g.linear(xi, wv, Some(bv));
                let h = g.layer_norm(h, gv, btv);
                let h = g.gelu(h);
                g.squared_error(h, &target, &[1.0; 20])
            },
            1e-6,
        );
    }

    #[test]
    fn attention_gradients_causal_and_cross() {
        let mut s = ParamStore::new();
        let wq = s.add("wq", rand_tensor(&[4, 4], 6), true);
        let wk = s.add("wk", rand_tensor(&[4, 4], 7), true);
        let wv = s.add("wv", rand_tensor(&[4, 4], 8), true);
        let x = rand_tensor(&[2 * 3, 4], 9);
        let t: Vec<f64> = (0..24).map(|i| ((i * 7) % 5) as f64 * 0.1).collect();
        for causal in [Some(0), None] {
            fd_check(
                &mut s,
                |g| {
                    let xi = g.input(x.clone());
                    let (a, b, c) = (g.param(wq), g.param(wk), g.param(wv));
                    let q = g.linear(xi, a, None);
                    let k = g.linear(xi, b, None);
                    let v = g.linear(xi, c, None);
                    let dims = AttnDims { batch: 2, heads: 2, q_len: 3, k_len: 3, head_dim: 2, causal };
                    let o = g.attention(q, k, v, dims, 0.0);
                    g.squared_error(o, &t, &[1.0; 24])
                },
                1e-5,
            );
        }
    }

    #[test]
    fn loss_op_gradients() {
        let mut s = ParamStore::new();
        let w = s.add("w", rand_tensor(&[3, 4], 10), true);
        let x = rand_tensor(&[4, 3], 11);
        fd_check(
            &mut s,
            |g| {
                let xi = g.input(x.clone());
                let wv = g.param(w);
                let l = g.linear(xi, wv, None);
                let ce = g.cross_entropy(l, &[0, 3, 2, 1], &[1.0, 0.5, 0.0, 2.0]);
                let bce = g.bce_with_logits(l, &[1.0; 16], &[0.3; 16]);
                let sl = g.smooth_l1(l, &[0.9; 16], &[1.0; 16]);
                let gg = g.geglu(l);
                let s2 = g.sum(gg);
                let e = g.embedding(wv, &[2, 0, 2]);
                let gr = g.gather_rows(e, &[1, 2, 2]);
                let cc = g.concat_rows(&[gr, e]);
                let s3 = g.sum(cc);
                g.weighted_sum(&[(ce, 1.0), (bce, 0.7), (sl, 1.3), (s2, 0.2), (s3, -0.1)])
            },
            1e-5,
        );
    }

    #[test]
    fn ppo_objective_gradient() {
        let mut s = ParamStore::new();
        let w = s.add("w", rand_tensor(&[3, 3], 12), true);
        let x = rand_tensor(&[4, 3], 13);
        let batch = PpoBatch {
            masks: vec![true, true, true, true, false, true, true, true, false, false, true, true],
            actions: vec![0, 2, 1, 2],
            old_log_probs: vec![-1.0, -0.3, -2.5, -0.9],
            advantages: vec![1.0, -0.5, 2.0, -1.5],
            weights: vec![1.0, 1.0, 0.5, 1.0],
            clip_eps: 0.2,
            entropy_coef: 0.01,
        };
        fd_check(
            &mut s,
            |g| {
                let xi = g.input(x.clone());
                let wv = g.param(w);
                let l = g.linear(xi, wv, None);
                g.ppo_objective(l, batch.clone())
            },
            1e-5,
        );
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input_with_grad(Tensor::from_vec(&[1, 2], vec![0.2, 0.1]));
        let st = g.straight_through(x, Tensor::from_vec(&[1, 2], vec![0.0, 0.0]));
        assert_eq!(g.value(st).data, vec![0.0, 0.0]);
        let l = g.squared_error(st, &[1.0, -1.0], &[1.0, 1.0]);
        let grads = g.backward(l);
        assert_eq!(grads.wrt(x).unwrap().data, vec![-2.0, 2.0]);
    }
}
