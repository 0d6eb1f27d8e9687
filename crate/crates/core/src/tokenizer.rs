//! Observation tokenizers: a VQ-VAE with an EMA codebook and a fixed-width
//! bins baseline, plus the continuous-action discretizer.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::math;
use crate::nn::{Activation, Mlp};
use crate::params::{Gradients, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqConfig {
    pub obs_dim: usize,
    pub hidden: usize,
    /// Tokens per observation.
    pub tokens: usize,
    pub code_dim: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub ema_decay: f64,
    pub ema_eps: f64,
}

impl VqConfig {
    pub fn new(obs_dim: usize) -> Self {
        Self { obs_dim, hidden: 512, tokens: 16, code_dim: 128, codebook_size: 512, beta: 10.0, ema_decay: 0.99, ema_eps: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// `[N, code_dim]`
    pub codes: Tensor,
    pub ema_counts: Vec<f64>,
    pub ema_sums: Tensor,
    pub initialized: bool,
    /// Codes hit since the last [`Codebook::reset_usage`].
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(n: usize, dim: usize, rng: &mut Rng) -> Self {
        let codes = Tensor::from_vec(&[n, dim], (0..n * dim).map(|_| rng::normal(rng)).collect());
        Self { ema_sums: codes.clone(), codes, ema_counts: vec![1.0; n], initialized: false, usage: vec![0; n] }
    }

    pub fn from_codes(codes: Tensor) -> Self {
        let n = codes.rows();
        Self { ema_sums: codes.clone(), ema_counts: vec![1.0; n], codes, initialized: true, usage: vec![0; n] }
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the nearest code; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..self.len() {
            let c = self.codes.row(j);
            let d: f64 = z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }

    /// Seeds every code from a random latent of `latents` (`[M, dim]` rows).
    pub fn init_from(&mut self, latents: &[f64], rng: &mut Rng) {
        let dim = self.codes.cols();
        let m = latents.len() / dim;
        let perm = rng::permutation(rng, m);
        for j in 0..self.len() {
            let src = perm[j % m];
            let row = self.codes.row_mut(j);
            row.copy_from_slice(&latents[src * dim..(src + 1) * dim]);
            if j >= m {
                for x in row.iter_mut() {
                    *x += 0.01 * rng::normal(rng);
                }
            }
        }
        self.ema_sums = self.codes.clone();
        self.ema_counts = vec![1.0; self.len()];
        self.initialized = true;
    }

    /// EMA step on codebook statistics given latents and their assigned codes.
    pub fn ema_update(&mut self, latents: &[f64], assignments: &[usize], decay: f64, eps: f64) {
        let dim = self.codes.cols();
        for &a in assignments {
            self.usage[a] += 1;
        }
        if decay >= 1.0 {
            return;
        }
        let n = self.len();
        let mut counts = vec![0.0; n];
        let mut sums = vec![0.0; n * dim];
        for (r, &a) in assignments.iter().enumerate() {
            counts[a] += 1.0;
            kernels::axpy(&mut sums[a * dim..(a + 1) * dim], 1.0, &latents[r * dim..(r + 1) * dim]);
        }
        for j in 0..n {
            self.ema_counts[j] = decay * self.ema_counts[j] + (1.0 - decay) * counts[j];
        }
        for (s, x) in self.ema_sums.data.iter_mut().zip(&sums) {
            *s = decay * *s + (1.0 - decay) * x;
        }
        let total: f64 = self.ema_counts.iter().sum();
        for j in 0..n {
            let smoothed = (self.ema_counts[j] + eps) / (total + n as f64 * eps) * total;
            for k in 0..dim {
                self.codes.data[j * dim + k] = self.ema_sums.data[j * dim + k] / smoothed;
            }
        }
    }

    /// Fraction of codes hit since the last reset.
    pub fn utilization(&self) -> f64 {
        self.usage.iter().filter(|&&u| u > 0).count() as f64 / self.len() as f64
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedObservation {
    pub tokens: Vec<usize>,
    pub reconstruction: Vec<f64>,
}

/// Loss terms of one tokenizer batch.
#[derive(Clone, Debug, PartialEq)]
pub struct VqLoss {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub latents: Vec<f64>,
    pub assignments: Vec<usize>,
}

impl VqLoss {
    pub fn value(&self, beta: f64) -> f64 {
        self.reconstruction + self.codebook + beta * self.commitment
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqTokenizer {
    pub config: VqConfig,
    pub store: ParamStore,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebook: Codebook,
}

impl VqTokenizer {
    pub fn new(config: VqConfig, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let (o, h, l) = (config.obs_dim, config.hidden, config.tokens * config.code_dim);
        let encoder = Mlp::new(&mut store, "enc", &[o, h, h, l], Activation::Gelu, rng);
        let decoder = Mlp::new(&mut store, "dec", &[l, h, h, o], Activation::Gelu, rng);
        let codebook = Codebook::new(config.codebook_size, config.code_dim, rng);
        Self { config, store, encoder, decoder, codebook }
    }

    /// Encoder latents, `[B*K, code_dim]` flattened.
    pub fn latents(&self, obs: &[f64]) -> Vec<f64> {
        self.encoder.infer(&self.store, obs)
    }

    pub fn quantize(&self, latents: &[f64]) -> Vec<usize> {
        latents.chunks(self.config.code_dim).map(|z| self.codebook.nearest(z)).collect()
    }

    /// Tokens for a row batch of observations (`K` per row).
    pub fn encode_batch(&self, obs: &[f64]) -> Result<Vec<usize>> {
        if !obs.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(self.quantize(&self.latents(obs)))
    }

    pub fn decode_batch(&self, tokens: &[usize]) -> Vec<f64> {
        let d = self.config.code_dim;
        let mut z = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            z.extend_from_slice(self.codebook.codes.row(t));
        }
        self.decoder.infer(&self.store, &z)
    }

    pub fn encode(&self, obs: &[f64]) -> Result<TokenizedObservation> {
        let tokens = self.encode_batch(obs)?;
        let reconstruction = self.decode_batch(&tokens);
        Ok(TokenizedObservation { tokens, reconstruction })
    }

    /// Seeds the codebook from this batch's latents if it has not been yet.
    pub fn ensure_init(&mut self, obs: &[f64], rng: &mut Rng) {
        if !self.codebook.initialized {
            let z = self.latents(obs);
            self.codebook.init_from(&z, rng);
        }
    }

    /// Loss report and parameter gradients on `obs` (`[B, obs_dim]`).
    pub fn loss_and_grads(&mut self, obs: &Tensor, rng: &mut Rng) -> (VqLoss, Gradients) {
        self.ensure_init(&obs.data, rng);
        let mut g = Graph::new(&self.store);
        let (total, report) = self.loss_on(&mut g, obs);
        let grads = g.backward(total).params;
        (report, grads)
    }

    /// Loss graph on an existing tape; see [`VqTokenizer::loss`].
    pub fn loss_on(&self, g: &mut Graph, obs: &Tensor) -> (Var, VqLoss) {
        let c = &self.config;
        let b = obs.rows();
        let x = g.input(obs.clone());
        let z = self.encoder.forward(g, x);
        let latents = g.value(z).data.clone();
        let assignments = self.quantize(&latents);
        let mut zq = Vec::with_capacity(latents.len());
        for &a in &assignments {
            zq.extend_from_slice(self.codebook.codes.row(a));
        }
        let zq = Tensor::from_vec(g.shape(z), zq);
        let st = g.straight_through(z, zq.clone());
        let recon = self.decoder.forward(g, st);
        let n_obs = (b * c.obs_dim) as f64;
        let n_lat = latents.len() as f64;
        let rec = g.squared_error(recon, &obs.data, &vec![1.0 / n_obs; obs.len()]);
        let commit = g.squared_error(z, &zq.data, &vec![1.0 / n_lat; latents.len()]);
        let total = g.weighted_sum(&[(rec, 1.0), (commit, c.beta)]);
        let commitment = g.value(commit).item();
        (total, VqLoss { reconstruction: g.value(rec).item(), codebook: commitment, commitment, latents, assignments })
    }

    pub fn ema_update(&mut self, latents: &[f64], assignments: &[usize]) {
        self.codebook.ema_update(latents, assignments, self.config.ema_decay, self.config.ema_eps);
    }
}

/// Per-dimension fixed-width binning with ranges fit from data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinsTokenizer {
    pub bins: usize,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl BinsTokenizer {
    pub fn new(bins: usize, low: Vec<f64>, high: Vec<f64>) -> Self {
        Self { bins, low, high }
    }

    /// Fits ranges from up to `limit` observations.
    pub fn fit<'a>(bins: usize, obs_dim: usize, data: impl Iterator<Item = &'a [f64]>, limit: usize) -> Self {
        let mut low = vec![f64::INFINITY; obs_dim];
        let mut high = vec![f64::NEG_INFINITY; obs_dim];
        for o in data.take(limit) {
            for k in 0..obs_dim {
                low[k] = low[k].min(o[k]);
                high[k] = high[k].max(o[k]);
            }
        }
        for k in 0..obs_dim {
            if !low[k].is_finite() || !high[k].is_finite() {
                low[k] = -1.0;
                high[k] = 1.0;
            } else if high[k] - low[k] < 1e-6 {
                low[k] -= 0.5;
                high[k] += 0.5;
            }
        }
        Self { bins, low, high }
    }

    pub fn obs_dim(&self) -> usize {
        self.low.len()
    }

    fn width(&self, k: usize) -> f64 {
        (self.high[k] - self.low[k]) / self.bins as f64
    }

    pub fn tokenize(&self, obs: &[f64]) -> Vec<usize> {
        obs.iter().enumerate().map(|(k, &x)| bin_index(x, self.low[k], self.width(k), self.bins)).collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Vec<f64> {
        let d = self.obs_dim();
        tokens.iter().enumerate().map(|(i, &t)| self.low[i % d] + (t as f64 + 0.5) * self.width(i % d)).collect()
    }
}

fn bin_index(x: f64, low: f64, width: f64, bins: usize) -> usize {
    let i = math::floor((x - low) / width);
    if i.is_nan() || i < 0.0 {
        0
    } else {
        (i as usize).min(bins - 1)
    }
}

/// Fixed-width binning of bounded continuous actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDiscretizer {
    pub low: f64,
    pub high: f64,
    pub bins: usize,
}

impl Default for ActionDiscretizer {
    fn default() -> Self {
        Self { low: -1.0, high: 1.0, bins: 256 }
    }
}

impl ActionDiscretizer {
    fn width(&self) -> f64 {
        (self.high - self.low) / self.bins as f64
    }

    pub fn discretize(&self, u: &[f64]) -> Vec<usize> {
        u.iter().map(|&x| bin_index(x, self.low, self.width(), self.bins)).collect()
    }

    pub fn continuous(&self, tokens: &[usize]) -> Vec<f64> {
        tokens.iter().map(|&t| self.low + (t as f64 + 0.5) * self.width()).collect()
    }
}

/// The observation tokenizer in use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ObsTokenizer {
    Vq(VqTokenizer),
    Bins(BinsTokenizer),
}

impl ObsTokenizer {
    pub fn tokens_per_obs(&self) -> usize {
        match self {
            Self::Vq(v) => v.config.tokens,
            Self::Bins(b) => b.obs_dim(),
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            Self::Vq(v) => v.config.codebook_size,
            Self::Bins(b) => b.bins,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            Self::Vq(v) => v.config.obs_dim,
            Self::Bins(b) => b.obs_dim(),
        }
    }

    /// Tokens for `[B, obs_dim]` rows, `tokens_per_obs` each.
    pub fn encode_batch(&self, obs: &[f64]) -> Result<Vec<usize>> {
        match self {
            Self::Vq(v) => v.encode_batch(obs),
            Self::Bins(b) => {
                if !obs.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite);
                }
                Ok(obs.chunks(b.obs_dim()).flat_map(|o| b.tokenize(o)).collect())
            }
        }
    }

    pub fn decode_batch(&self, tokens: &[usize]) -> Vec<f64> {
        match self {
            Self::Vq(v) => v.decode_batch(tokens),
            Self::Bins(b) => b.detokenize(tokens),
        }
    }

    /// `decode(encode(obs))`.
    pub fn reconstruct(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(&self.encode_batch(obs)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_vq(obs_dim: usize, tokens: usize, code_dim: usize, n: usize, seed: u64) -> VqTokenizer {
        let mut r = rng::seeded(seed);
        let cfg = VqConfig { obs_dim, hidden: 6, tokens, code_dim, codebook_size: n, beta: 10.0, ema_decay: 0.99, ema_eps: 1e-5 };
        VqTokenizer::new(cfg, &mut r)
    }

    #[test]
    fn nearest_neighbour_and_ties() {
        let cb = Codebook::from_codes(Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]));
        assert_eq!(cb.nearest(&[0.2, 0.1]), 0);
        assert_eq!(cb.nearest(&[0.5, 0.5]), 0);
        assert_eq!(cb.nearest(&[0.6, 0.5]), 1);
    }

    #[test]
    fn untrained_tokens_in_range() {
        let mut r = rng::seeded(0);
        let v = VqTokenizer::new(VqConfig { hidden: 32, ..VqConfig::new(12) }, &mut r);
        let obs: Vec<f64> = (0..12 * 4).map(|_| rng::normal(&mut r)).collect();
        let t = v.encode_batch(&obs).unwrap();
        assert_eq!(t.len(), 16 * 4);
        assert!(t.iter().all(|&x| x < 512));
        assert_eq!(v.encode_batch(&[f64::NAN; 12]).unwrap_err(), Error::NonFinite);
    }

    #[test]
    fn loss_matches_hand_oracle() {
        let mut v = toy_vq(3, 1, 2, 2, 5);
        v.codebook = Codebook::from_codes(Tensor::from_vec(&[2, 2], vec![0.3, -0.2, -1.0, 1.0]));
        let obs = Tensor::from_vec(&[1, 3], vec![0.5, -0.1, 0.7]);
        let (l, _) = v.loss_and_grads(&obs, &mut rng::seeded(0));
        let z = v.latents(&obs.data);
        let d0: f64 = (z[0] - 0.3).powi(2) + (z[1] + 0.2).powi(2);
        let d1: f64 = (z[0] + 1.0).powi(2) + (z[1] - 1.0).powi(2);
        let (code, dist) = if d0 <= d1 { ([0.3, -0.2], d0) } else { ([-1.0, 1.0], d1) };
        let rec = v.decoder.infer(&v.store, &code);
        let mse: f64 = rec.iter().zip(&obs.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 3.0;
        assert!((l.reconstruction - mse).abs() < 1e-12);
        assert!((l.codebook - dist / 2.0).abs() < 1e-12);
        assert!((l.value(10.0) - (mse + dist / 2.0 + 10.0 * dist / 2.0)).abs() < 1e-12);
        // doubling beta changes only the commitment contribution
        assert!((l.value(20.0) - l.value(10.0) - 10.0 * l.commitment).abs() < 1e-12);
    }

    #[test]
    fn terms_vanish_on_code() {
        let mut v = toy_vq(3, 2, 2, 4, 6);
        let obs = Tensor::from_vec(&[1, 3], vec![0.1, 0.2, 0.3]);
        let z = v.latents(&obs.data);
        v.codebook = Codebook::from_codes(Tensor::from_vec(&[4, 2], vec![z[0], z[1], z[2], z[3], 5.0, 5.0, -5.0, -5.0]));
        let (l, _) = v.loss_and_grads(&obs, &mut rng::seeded(0));
        assert_eq!(l.codebook, 0.0);
        assert_eq!(l.commitment, 0.0);
    }

    #[test]
    fn straight_through_matches_decoder_path_finite_difference() {
        let v = toy_vq(3, 2, 2, 4, 7);
        let obs = Tensor::from_vec(&[1, 3], vec![0.4, -0.3, 0.9]);
        let mut g = Graph::new(&v.store);
        let (_, l) = v.loss_on(&mut g, &obs);
        let zq: Vec<f64> = l.assignments.iter().flat_map(|&a| v.codebook.codes.row(a).to_vec()).collect();
        // gradient reaching the pre-quantization latent through the reconstruction term
        let mut g2 = Graph::new(&v.store);
        let q = g2.input_with_grad(Tensor::from_vec(&[1, 4], zq.clone()));
        let rec = v.decoder.forward(&mut g2, q);
        let loss = g2.squared_error(rec, &obs.data, &[1.0 / 3.0; 3]);
        let dq = g2.backward(loss).wrt(q).unwrap().data.clone();
        let h = 1e-6;
        for i in 0..4 {
            let f = |d: f64| {
                let mut zz = zq.clone();
                zz[i] += d;
                let r = v.decoder.infer(&v.store, &zz);
                r.iter().zip(&obs.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 3.0
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - dq[i]).abs() <= 1e-4 * fd.abs().max(1e-8), "{fd} vs {}", dq[i]);
        }
        // the estimator forwards that gradient unchanged to the encoder output
        let mut g3 = Graph::new(&v.store);
        let z = g3.input_with_grad(Tensor::from_vec(&[1, 4], v.latents(&obs.data)));
        let st = g3.straight_through(z, Tensor::from_vec(&[1, 4], zq));
        let rec = v.decoder.forward(&mut g3, st);
        let loss = g3.squared_error(rec, &obs.data, &[1.0 / 3.0; 3]);
        assert_eq!(g3.backward(loss).wrt(z).unwrap().data, dq);
    }

    #[test]
    fn ema_converges_to_assigned_mean() {
        let mut cb = Codebook::from_codes(Tensor::zeros(&[4, 2]));
        let lat = vec![1.0, 2.0, 3.0, 4.0];
        for _ in 0..3000 {
            cb.ema_update(&lat, &[3, 3], 0.99, 1e-5);
        }
        assert!((cb.codes.row(3)[0] - 2.0).abs() < 1e-3 && (cb.codes.row(3)[1] - 3.0).abs() < 1e-3);
        assert!(cb.ema_counts[0] < 1e-9);
        let frozen = cb.codes.clone();
        cb.ema_update(&[9.0, 9.0], &[0], 1.0, 1e-5);
        assert_eq!(cb.codes, frozen);
    }

    #[test]
    fn bins_and_actions() {
        let b = BinsTokenizer::new(4, vec![0.0], vec![1.0]);
        assert_eq!(b.tokenize(&[0.3]), vec![1]);
        assert_eq!(b.tokenize(&[-3.0]), vec![0]);
        assert_eq!(b.tokenize(&[7.0]), vec![3]);
        let a = ActionDiscretizer::default();
        assert_eq!(a.discretize(&[0.0, -1.0, 1.0]), vec![128, 0, 255]);
        let t = ObsTokenizer::Bins(BinsTokenizer::new(512, vec![-1.0; 30], vec![1.0; 30]));
        assert_eq!(t.tokens_per_obs(), 30);
    }

    proptest! {
        #[test]
        fn bins_round_trip_within_half_width(lo in -5.0f64..0.0, span in 0.1f64..10.0, frac in 0.0f64..1.0, m in 1usize..600) {
            let b = BinsTokenizer::new(m, vec![lo], vec![lo + span]);
            let x = lo + frac * span;
            let y = b.detokenize(&b.tokenize(&[x]))[0];
            prop_assert!((x - y).abs() <= 0.5 * span / m as f64 + 1e-12);
        }

        #[test]
        fn action_round_trip(u in -1.0f64..=1.0) {
            let a = ActionDiscretizer::default();
            let v = a.continuous(&a.discretize(&[u]))[0];
            prop_assert!((u - v).abs() <= 2.0 / 256.0);
        }

        #[test]
        fn quantization_is_idempotent(seed in 0u64..200) {
            let v = toy_vq(3, 2, 2, 8, seed);
            let mut r = rng::seeded(seed);
            let z: Vec<f64> = (0..4).map(|_| rng::normal(&mut r)).collect();
            let t1 = v.quantize(&z);
            let zq: Vec<f64> = t1.iter().flat_map(|&a| v.codebook.codes.row(a).to_vec()).collect();
            prop_assert_eq!(v.quantize(&zq), t1);
        }
    }
}
