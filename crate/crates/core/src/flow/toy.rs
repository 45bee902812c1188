//! Unconditional 2-D flow matching on a Gaussian mixture: the smallest
//! end-to-end check that training plus Euler sampling recovers a target
//! distribution.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{euler_integrate, fm_loss_graph, sample_t, LossTerm, SamplerConfig, VelocityField};
use crate::error::{Error, Result};
use crate::numerics::{Element, Graph, Tensor, Var};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};

/// Equal-weight isotropic mixture with modes evenly spaced on a circle.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub centers: Vec<[f64; 2]>,
    pub std: f64,
}

impl GaussianMixture {
    pub fn ring(modes: usize, radius: f64, std: f64) -> Self {
        let centers = (0..modes)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / modes as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self { centers, std }
    }

    /// `n` draws as an `[n, 2]` tensor.
    pub fn sample<T: Element, R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor<T> {
        let mut out = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let c = self.centers[rng.random_range(0..self.centers.len())];
            let z: Tensor<f64> = Tensor::randn(&[2], rng);
            out.push(T::from_f64_lossy(c[0] + self.std * z.data()[0]));
            out.push(T::from_f64_lossy(c[1] + self.std * z.data()[1]));
        }
        Tensor::new(&[n, 2], out).expect("sized")
    }

    pub fn nearest(&self, x: [f64; 2]) -> usize {
        let d = |c: &[f64; 2]| (c[0] - x[0]).powi(2) + (c[1] - x[1]).powi(2);
        (0..self.centers.len())
            .min_by(|&a, &b| d(&self.centers[a]).total_cmp(&d(&self.centers[b])))
            .expect("at least one mode")
    }

    /// Per-mode statistics of `points` (`[n, 2]`) under nearest-center
    /// assignment.
    pub fn assess<T: Element>(&self, points: &Tensor<T>) -> MixtureReport {
        let k = self.centers.len();
        let mut counts = vec![0usize; k];
        let mut sums = vec![[0.0f64; 2]; k];
        for row in points.data().chunks(2) {
            let x = [row[0].to_f64().unwrap(), row[1].to_f64().unwrap()];
            let m = self.nearest(x);
            counts[m] += 1;
            sums[m][0] += x[0];
            sums[m][1] += x[1];
        }
        let n = counts.iter().sum::<usize>().max(1) as f64;
        let tv = 0.5 * counts.iter().map(|&c| (c as f64 / n - 1.0 / k as f64).abs()).sum::<f64>();
        let mean_errors = (0..k)
            .map(|m| {
                if counts[m] == 0 {
                    return f64::INFINITY;
                }
                let c = counts[m] as f64;
                ((sums[m][0] / c - self.centers[m][0]).powi(2) + (sums[m][1] / c - self.centers[m][1]).powi(2)).sqrt()
            })
            .collect();
        MixtureReport { counts, total_variation: tv, mean_errors }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureReport {
    pub counts: Vec<usize>,
    /// Total variation between the mode histogram and uniform.
    pub total_variation: f64,
    /// Distance between each mode's empirical mean and its center.
    pub mean_errors: Vec<f64>,
}

impl MixtureReport {
    pub fn max_mean_error(&self) -> f64 {
        self.mean_errors.iter().copied().fold(0.0, f64::max)
    }
}

const TIME_FREQS: usize = 4;

fn time_features(t: f64) -> [f64; 1 + 2 * TIME_FREQS] {
    let mut f = [0.0; 1 + 2 * TIME_FREQS];
    f[0] = t;
    for k in 0..TIME_FREQS {
        let w = PI * (k + 1) as f64 * t;
        f[1 + 2 * k] = w.sin();
        f[2 + 2 * k] = w.cos();
    }
    f
}

/// `v(x, t)`: an MLP over `[x, time features]` with SiLU activations.
#[derive(Debug, Clone)]
pub struct MlpVelocity<T> {
    params: ParamStore<T>,
    layers: Vec<(ParamId, ParamId)>,
}

impl<T: Element> MlpVelocity<T> {
    pub fn new(hidden: usize, depth: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || depth == 0 {
            return Err(Error::Invalid("mlp needs positive width and depth".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let mut layers = Vec::new();
        let mut d_in = 2 + time_features(0.0).len();
        for l in 0..=depth {
            let d_out = if l == depth { 2 } else { hidden };
            let std = 1.0 / (d_in as f64).sqrt();
            let w = Tensor::<f64>::randn(&[d_in, d_out], &mut rng).map(|x| x * std).cast();
            let w = params.add(format!("layers.{l}.weight"), w);
            let b = params.add(format!("layers.{l}.bias"), Tensor::zeros(&[d_out]));
            layers.push((w, b));
            d_in = d_out;
        }
        Ok(Self { params, layers })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// `x` is `[n, 2]`; `t` holds one time per row.
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var, t: &[f64]) -> Result<Var> {
        let feats: Vec<f64> = t.iter().flat_map(|&t| time_features(t)).collect();
        let tf = g.constant(Tensor::from_f64(&[t.len(), feats.len() / t.len().max(1)], &feats)?);
        let mut h = g.concat(&[x, tf], 1)?;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = g.linear(h, p[w.0], Some(p[b.0]))?;
            if i + 1 < self.layers.len() {
                h = g.silu(h);
            }
        }
        Ok(h)
    }

    /// Flow-matching training on draws from `target`; returns the loss of
    /// every step.
    pub fn train(&mut self, target: &GaussianMixture, cfg: &ToyTrainConfig) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(AdamConfig::default(), self.params.tensors());
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let x1: Tensor<T> = target.sample(cfg.batch, &mut rng);
            let x0: Tensor<T> = Tensor::randn(&[cfg.batch, 2], &mut rng);
            let ts: Vec<f64> = (0..cfg.batch).map(|_| sample_t(&mut rng)).collect();
            let mut xt = x0.clone();
            for (i, &t) in ts.iter().enumerate() {
                let (a, b) = (T::from_f64_lossy(1.0 - t), T::from_f64_lossy(t));
                for j in 0..2 {
                    let k = 2 * i + j;
                    xt.data_mut()[k] = a * x0.data()[k] + b * x1.data()[k];
                }
            }
            let u = x1.zip_map(&x0, |a, b| a - b)?;
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let xv = g.constant(xt);
            let pred = self.forward_graph(&mut g, &p, xv, &ts)?;
            let loss = fm_loss_graph(&mut g, &[LossTerm { prediction: pred, target: &u, weights: None }])?;
            let value = g.value(loss).item().to_f64().unwrap();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("toy loss at step {step}")));
            }
            g.backward(loss)?;
            let mut grads: Vec<Tensor<T>> = p.iter().map(|&v| g.grad(v)).collect();
            clip_grad_norm(&mut grads, 1.0);
            let lr = cfg.lr * 0.5 * (1.0 + (PI * step as f64 / cfg.steps as f64).cos());
            adam.step(self.params.tensors_mut(), &grads, lr)?;
            losses.push(value);
        }
        Ok(losses)
    }

    /// `n` samples integrated from `N(0, I)` over `sampler.schedule`.
    pub fn sample(&self, n: usize, sampler: &SamplerConfig) -> Result<Tensor<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
        let z0 = vec![Tensor::randn(&[n, 2], &mut rng)];
        let mut out = euler_integrate(self, z0, &sampler.schedule, &|_| Ok(()))?;
        Ok(out.remove(0))
    }
}

impl<T: Element> VelocityField<T> for MlpVelocity<T> {
    fn velocity(&self, state: &[Tensor<T>], t: f64) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(state[0].clone());
        let n = state[0].shape()[0];
        let v = self.forward_graph(&mut g, &p, x, &vec![t; n])?;
        Ok(vec![g.value(v).clone()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Peak learning rate of a cosine decay.
    pub lr: f64,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self { steps: 4000, batch: 256, lr: 2e-3, seed: 0 }
    }
}
