//! Denoising diffusion over 3D poses with a pyramid-attention backbone.
//!
//! The backbone reads `h_k ⊕ f_c ⊕ f_k` per joint (noisy pose, 2D condition,
//! broadcast step embedding). In the default direct mode it predicts
//! `h_{k−1}` through an identity residual, so a zero output head is a no-op.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{load_weights, save_weights_with, PgFormer, PgFormerConfig};
use crate::nn::{Mode, Session};
use crate::tensor::{Tape, Tensor, Var};

/// Linear β schedule and its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// `steps` values of β spaced linearly from `start` to `end` inclusive.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| if steps == 1 { start } else { start + (end - start) * i as f64 / (steps - 1) as f64 })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("β = {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let last = *alpha_bars.last().unwrap();
            alpha_bars.push(last * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Total number of steps `K`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_k` for `1 ≤ k ≤ K`.
    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        1.0 - self.beta(k)
    }

    /// `ᾱ_k`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::Param(format!("step {k} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `h_k = √ᾱ_k·h0 + √(1−ᾱ_k)·ε`.
    pub fn forward_sample(&self, h0: &Tensor, k: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(k)?;
        self.marginal(h0, k, eps)
    }

    /// Closed-form marginal, also defined at `k = 0`.
    fn marginal(&self, h0: &Tensor, k: usize, eps: &Tensor) -> Result<Tensor> {
        if h0.shape() != eps.shape() {
            return Err(Error::shape("forward_sample", h0.shape(), eps.shape()));
        }
        let (a, b) = (self.alpha_bar(k).sqrt(), (1.0 - self.alpha_bar(k)).sqrt());
        let data = h0.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
        Tensor::new(h0.shape().to_vec(), data)
    }

    /// One Markov step `h_k = √α_k·h_{k−1} + √β_k·ε`.
    pub fn step(&self, prev: &Tensor, k: usize, eps: &Tensor) -> Result<Tensor> {
        self.check(k)?;
        if prev.shape() != eps.shape() {
            return Err(Error::shape("diffusion_step", prev.shape(), eps.shape()));
        }
        let (a, b) = (self.alpha(k).sqrt(), self.beta(k).sqrt());
        let data = prev.data().iter().zip(eps.data()).map(|(x, e)| a * x + b * e).collect();
        Tensor::new(prev.shape().to_vec(), data)
    }
}

/// Interleaved `[sin(k·ω_0), cos(k·ω_0), sin(k·ω_1), …]` with
/// `ω_i = 10000^(−2i/dim)`.
pub fn step_embedding(k: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Param(format!("step embedding dimension {dim} must be even and positive")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let arg = k as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Evenly spaced descending sub-sequence `K, K − K/S, …` of `count` steps.
pub fn ddim_steps(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(Error::Param(format!("cannot pick {count} of {total} diffusion steps")));
    }
    Ok((0..count).map(|i| total - i * total / count).collect())
}

pub fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// The network output is `h_{k−1}`.
    #[default]
    Direct,
    /// The network output is the noise `ε`.
    Epsilon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Backbone layout; its channel counts are derived and overwritten.
    pub backbone: PgFormerConfig,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub embed_dim: usize,
    pub samples: usize,
    pub init_std: f64,
    /// Decreasing DDIM sub-sequence; the chain ends at step 0.
    pub ddim_steps: Vec<usize>,
    pub parameterization: Parameterization,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            backbone: PgFormerConfig::gt(),
            steps: 50,
            beta_start: 1e-4,
            beta_end: 2e-3,
            embed_dim: 16,
            samples: 5,
            init_std: 0.05,
            ddim_steps: vec![50, 40, 30, 20, 10],
            parameterization: Parameterization::Direct,
        }
    }
}

impl DiffusionConfig {
    pub fn backbone_config(&self) -> PgFormerConfig {
        PgFormerConfig { in_channels: 3 + 2 + self.embed_dim, out_channels: 3, ..self.backbone.clone() }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Noisy inputs and regression targets for one training batch.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub noisy: Tensor,
    pub steps: Vec<usize>,
    pub target: Tensor,
}

pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub backbone: PgFormer,
    pub schedule: DiffusionSchedule,
    evaluations: AtomicUsize,
    rows: AtomicUsize,
}

impl DiffusionModel {
    /// Builds the backbone with its output head zeroed.
    pub fn build(config: &DiffusionConfig, seed: u64) -> Result<Self> {
        step_embedding(0, config.embed_dim)?;
        if config.samples == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        let schedule = config.schedule()?;
        validate_steps(&config.ddim_steps, schedule.steps())?;
        let mut backbone = PgFormer::build(&config.backbone_config(), seed)?;
        for id in [backbone.head.weight(), backbone.head.bias()] {
            backbone.store.get_mut(id).data_mut().fill(0.0);
        }
        Ok(Self {
            config: config.clone(),
            backbone,
            schedule,
            evaluations: AtomicUsize::new(0),
            rows: AtomicUsize::new(0),
        })
    }

    pub fn n_joints(&self) -> usize {
        self.backbone.n_joints()
    }

    /// Backbone forward passes run so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    /// Poses pushed through the backbone so far, summed over passes.
    pub fn rows_evaluated(&self) -> usize {
        self.rows.load(Ordering::Relaxed)
    }

    fn check_batch(&self, h: &Tensor, cond: &Tensor, steps: &[usize]) -> Result<(usize, usize)> {
        let n = self.n_joints();
        let (hs, cs) = (h.shape(), cond.shape());
        if hs.len() != 3 || hs[1] != n || hs[2] != 3 {
            return Err(Error::shape("diffusion input", hs, &[0, n, 3]));
        }
        if cs.len() != 3 || cs[0] != hs[0] || cs[1] != n || cs[2] != 2 {
            return Err(Error::shape("diffusion condition", cs, &[hs[0], n, 2]));
        }
        if steps.len() != hs[0] {
            return Err(Error::Contract(format!("{} steps for a batch of {}", steps.len(), hs[0])));
        }
        for &k in steps {
            self.schedule.check(k)?;
        }
        Ok((hs[0], n))
    }

    /// Network output on the tape: `ĥ_{k−1}` or `ε̂` by parameterization.
    pub fn forward(&self, s: &mut Session<'_>, h: &Tensor, cond: &Tensor, steps: &[usize]) -> Result<Var> {
        let (b, n) = self.check_batch(h, cond, steps)?;
        let e = self.config.embed_dim;
        let c = 5 + e;
        let mut input = Vec::with_capacity(b * n * c);
        for (bi, &k) in steps.iter().enumerate() {
            let emb = step_embedding(k, e)?;
            for j in 0..n {
                let r = bi * n + j;
                input.extend_from_slice(&h.data()[r * 3..r * 3 + 3]);
                input.extend_from_slice(&cond.data()[r * 2..r * 2 + 2]);
                input.extend_from_slice(&emb);
            }
        }
        let x = s.tape.constant(&[b, n, c], input)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.rows.fetch_add(b, Ordering::Relaxed);
        let out = self.backbone.forward(s, x)?;
        match self.config.parameterization {
            Parameterization::Direct => {
                let skip = s.tape.constant(h.shape(), h.data().to_vec())?;
                s.tape.add(skip, out)
            }
            Parameterization::Epsilon => Ok(out),
        }
    }

    fn predict(&self, h: &Tensor, cond: &Tensor, k: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &self.backbone.store, Mode::Eval);
        let steps = vec![k; h.shape().first().copied().unwrap_or(0)];
        let y = self.forward(&mut s, h, cond, &steps)?;
        let out = s.tape.tensor(y);
        if !out.all_finite() {
            return Err(Error::Numeric(format!("non-finite denoiser output at step {k}")));
        }
        Ok(out)
    }

    /// Deterministic move from step `k` to an earlier step `t`.
    pub fn ddim_step(&self, h: &Tensor, k: usize, t: usize, cond: &Tensor) -> Result<Tensor> {
        if t >= k {
            return Err(Error::Param(format!("DDIM target {t} is not before {k}")));
        }
        let pred = self.predict(h, cond, k)?;
        let s = &self.schedule;
        let (ak, bk) = (s.alpha_bar(k).sqrt(), (1.0 - s.alpha_bar(k)).sqrt());
        let (at, bt) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
        let data = match self.config.parameterization {
            Parameterization::Direct if t == k - 1 => return Ok(pred),
            Parameterization::Direct => {
                // [ak bk; ap bp]·[x0; ε] = [h_k; ĥ_{k−1}]
                let (ap, bp) = (s.alpha_bar(k - 1).sqrt(), (1.0 - s.alpha_bar(k - 1)).sqrt());
                let det = ak * bp - bk * ap;
                h.data()
                    .iter()
                    .zip(pred.data())
                    .map(|(hk, hp)| {
                        let x0 = (bp * hk - bk * hp) / det;
                        let eps = (ak * hp - ap * hk) / det;
                        at * x0 + bt * eps
                    })
                    .collect()
            }
            Parameterization::Epsilon => {
                h.data().iter().zip(pred.data()).map(|(hk, eps)| at * (hk - bk * eps) / ak + bt * eps).collect()
            }
        };
        Tensor::new(h.shape().to_vec(), data)
    }

    /// `h_{k−1}` from `h_k`.
    pub fn reverse_step(&self, h: &Tensor, k: usize, cond: &Tensor) -> Result<Tensor> {
        self.schedule.check(k)?;
        self.ddim_step(h, k, k - 1, cond)
    }

    /// Runs every chain in `init` along `steps` and then to step 0.
    ///
    /// The chains are stacked into one batch, so each step is a single
    /// backbone evaluation shared by all of them.
    pub fn ddim_sample(&self, init: &[Tensor], cond: &Tensor, steps: &[usize]) -> Result<Vec<Tensor>> {
        validate_steps(steps, self.schedule.steps())?;
        let first = init.first().ok_or(Error::Empty("no initial samples".into()))?;
        let per = first.shape()[0];
        let mut data = Vec::with_capacity(first.numel() * init.len());
        for t in init {
            if t.shape() != first.shape() {
                return Err(Error::shape("ddim_sample", t.shape(), first.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let mut shape = first.shape().to_vec();
        shape[0] *= init.len();
        let mut h = Tensor::new(shape.clone(), data)?;
        let mut cshape = cond.shape().to_vec();
        if cshape.is_empty() {
            return Err(Error::shape("ddim_sample", &cshape, &[per, self.n_joints(), 2]));
        }
        cshape[0] *= init.len();
        let cond = Tensor::new(cshape, cond.data().repeat(init.len()))?;
        for (i, &k) in steps.iter().enumerate() {
            let t = steps.get(i + 1).copied().unwrap_or(0);
            h = self.ddim_step(&h, k, t, &cond)?;
        }
        let chunk = first.numel();
        h.data().chunks(chunk).map(|c| Tensor::new(first.shape().to_vec(), c.to_vec())).collect()
    }

    /// Monte-Carlo estimate: `samples` chains from the encoder-seeded
    /// Gaussian, averaged.
    pub fn sample(&self, encoder: &PgFormer, pose2d: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let init = InitDistribution::new(pose2d, encoder, self.config.init_std)?;
        let draws: Vec<Tensor> = (0..self.config.samples).map(|_| init.sample(rng)).collect();
        let out = self.ddim_sample(&draws, pose2d, &self.config.ddim_steps)?;
        aggregate(&out)
    }

    /// Draws a step and noise per sample and builds `(h_k, target)` with
    /// shared-ε coupling between `h_k` and `h_{k−1}`.
    pub fn training_pair(&self, h0: &Tensor, rng: &mut ChaCha8Rng) -> Result<TrainingPair> {
        let b = h0.shape().first().copied().unwrap_or(0);
        let steps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=self.schedule.steps())).collect();
        let eps = standard_normal(h0.shape(), rng);
        self.training_pair_with(h0, &steps, &eps)
    }

    pub fn training_pair_with(&self, h0: &Tensor, steps: &[usize], eps: &Tensor) -> Result<TrainingPair> {
        let sh = h0.shape();
        if sh.len() != 3 || steps.len() != sh[0] || eps.shape() != sh {
            return Err(Error::shape("training_pair", sh, eps.shape()));
        }
        let per = sh[1] * sh[2];
        let mut noisy = Vec::with_capacity(h0.numel());
        let mut target = Vec::with_capacity(h0.numel());
        for (b, &k) in steps.iter().enumerate() {
            self.schedule.check(k)?;
            let s = &self.schedule;
            let (ak, bk) = (s.alpha_bar(k).sqrt(), (1.0 - s.alpha_bar(k)).sqrt());
            let (ap, bp) = (s.alpha_bar(k - 1).sqrt(), (1.0 - s.alpha_bar(k - 1)).sqrt());
            for i in b * per..(b + 1) * per {
                let (x, e) = (h0.data()[i], eps.data()[i]);
                noisy.push(ak * x + bk * e);
                target.push(match self.config.parameterization {
                    Parameterization::Direct => ap * x + bp * e,
                    Parameterization::Epsilon => e,
                });
            }
        }
        Ok(TrainingPair {
            noisy: Tensor::new(sh.to_vec(), noisy)?,
            steps: steps.to_vec(),
            target: Tensor::new(sh.to_vec(), target)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, None)
    }

    pub fn save_with(&self, path: &Path, provenance: Option<&serde_json::Value>) -> Result<()> {
        let config = serde_json::to_value(&self.config)?;
        save_weights_with(path, "diffusion", &config, provenance, &self.backbone.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, store) = load_weights(path)?;
        if manifest.kind != "diffusion" {
            return Err(Error::Data(format!("{} holds {} weights, expected diffusion", path.display(), manifest.kind)));
        }
        let config: DiffusionConfig = serde_json::from_value(manifest.config)?;
        let mut model = Self::build(&config, 0)?;
        model.backbone.store.load_from(&store)?;
        Ok(model)
    }
}

fn validate_steps(steps: &[usize], total: usize) -> Result<()> {
    if steps.is_empty() {
        return Err(Error::Param("empty DDIM step sequence".into()));
    }
    if steps.iter().any(|&k| k == 0 || k > total) || steps.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Param(format!("DDIM steps {steps:?} must strictly decrease within 1..={total}")));
    }
    Ok(())
}

/// Per-joint Gaussian around `[x_2d, y_2d, z_encoder]`.
#[derive(Clone, Debug)]
pub struct InitDistribution {
    pub mean: Tensor,
    pub std: f64,
}

impl InitDistribution {
    pub fn new(pose2d: &Tensor, encoder: &PgFormer, std: f64) -> Result<Self> {
        if !(std > 0.0) {
            return Err(Error::Param(format!("initial std {std} must be positive")));
        }
        let z = encoder.predict(pose2d)?;
        let mean = Tensor::from_fn(z.shape(), |i| {
            let (row, c) = (i / 3, i % 3);
            if c < 2 {
                pose2d.data()[row * 2 + c]
            } else {
                z.data()[i]
            }
        });
        Ok(Self { mean, std })
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let noise = standard_normal(self.mean.shape(), rng);
        Tensor::from_fn(self.mean.shape(), |i| self.mean.data()[i] + self.std * noise.data()[i])
    }
}

/// Coordinate-wise mean of the sampled poses.
pub fn aggregate(samples: &[Tensor]) -> Result<Tensor> {
    let first = samples.first().ok_or(Error::Empty("no samples to aggregate".into()))?;
    let mut acc = vec![0.0; first.numel()];
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::shape("aggregate", s.shape(), first.shape()));
        }
        for (a, v) in acc.iter_mut().zip(s.data()) {
            *a += v;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::new(first.shape().to_vec(), acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy(param: Parameterization) -> DiffusionModel {
        let cfg = DiffusionConfig {
            backbone: PgFormerConfig::toy(8, 1),
            embed_dim: 4,
            parameterization: param,
            ..DiffusionConfig::default()
        };
        DiffusionModel::build(&cfg, 3).unwrap()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Makes the zero-initialized head non-trivial.
    fn perturb(m: &mut DiffusionModel, seed: u64) {
        let mut r = rng(seed);
        for id in [m.backbone.head.weight(), m.backbone.head.bias()] {
            for v in m.backbone.store.get_mut(id).data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
    }

    #[test]
    fn even_ddim_subsequence() {
        assert_eq!(ddim_steps(50, 5).unwrap(), vec![50, 40, 30, 20, 10]);
        assert_eq!(ddim_steps(50, 50).unwrap(), (1..=50).rev().collect::<Vec<_>>());
        assert_eq!(ddim_steps(50, 1).unwrap(), vec![50]);
        assert!(ddim_steps(50, 0).is_err() && ddim_steps(50, 51).is_err());
        assert_eq!(DiffusionConfig::default().ddim_steps, ddim_steps(50, 5).unwrap());
    }

    #[test]
    fn default_schedule_values() {
        let s = DiffusionConfig::default().schedule().unwrap();
        assert_eq!(s.steps(), 50);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(50) - 2e-3).abs() < 1e-18);
        assert!((1..=50).all(|k| s.alpha_bar(k) < s.alpha_bar(k - 1)));
        assert!(s.alpha_bar(50) > 0.94 && s.alpha_bar(50) < 0.96);
    }

    #[test]
    fn constant_beta_power_law() {
        let s = DiffusionSchedule::from_betas(vec![0.01; 20]).unwrap();
        for k in 0..=20 {
            assert!((s.alpha_bar(k) - 0.99f64.powi(k as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_rejects_bad_beta() {
        assert!(DiffusionSchedule::from_betas(vec![0.0]).is_err());
        assert!(DiffusionSchedule::from_betas(vec![1.0]).is_err());
        assert!(DiffusionSchedule::linear(0, 1e-4, 2e-3).is_err());
    }

    #[test]
    fn zero_noise_scales_pose() {
        let s = DiffusionConfig::default().schedule().unwrap();
        let h0 = Tensor::from_fn(&[4, 3], |i| i as f64 - 5.0);
        let out = s.forward_sample(&h0, 25, &Tensor::zeros(&[4, 3])).unwrap();
        let a = s.alpha_bar(25).sqrt();
        assert!(out.data().iter().zip(h0.data()).all(|(o, x)| *o == a * x));
        assert!(s.forward_sample(&h0, 0, &Tensor::zeros(&[4, 3])).is_err());
        assert!(s.forward_sample(&h0, 51, &Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn embedding_layout() {
        let e = step_embedding(0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let (a, b) = (step_embedding(1, 8).unwrap(), step_embedding(2, 8).unwrap());
        assert!(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() > 0.0);
        assert!(step_embedding(1, 7).is_err());
    }

    #[test]
    fn embedding_regression_pin() {
        // slowest pair of a 16-wide embedding: ω = 10000^(−14/16)
        let e = step_embedding(50, 16).unwrap();
        let w = 10000f64.powf(-14.0 / 16.0);
        assert_eq!(e[14], (50.0 * w).sin());
        assert!((e[14] - 0.015811).abs() < 1e-6);
        assert_eq!(e[0], 50f64.sin());
    }

    #[test]
    fn zero_head_is_identity() {
        let m = toy(Parameterization::Direct);
        let h = standard_normal(&[2, 16, 3], &mut rng(1));
        let c = standard_normal(&[2, 16, 2], &mut rng(2));
        for k in [1, 25, 50] {
            assert_eq!(m.reverse_step(&h, k, &c).unwrap(), h);
        }
    }

    #[test]
    fn shape_errors() {
        let m = toy(Parameterization::Direct);
        let h = Tensor::zeros(&[1, 15, 3]);
        let c = Tensor::zeros(&[1, 15, 2]);
        assert!(matches!(m.reverse_step(&h, 3, &c), Err(Error::Shape { .. })));
        let h = Tensor::zeros(&[1, 16, 3]);
        let c = Tensor::zeros(&[1, 16, 2]);
        assert!(m.reverse_step(&h, 0, &c).is_err());
        assert!(m.ddim_sample(std::slice::from_ref(&h), &c, &[]).is_err());
        assert!(m.ddim_sample(std::slice::from_ref(&h), &c, &[10, 20]).is_err());
        assert!(m.ddim_sample(&[], &c, &[10]).is_err());
    }

    #[test]
    fn ddim_counts_and_determinism() {
        let mut m = toy(Parameterization::Direct);
        perturb(&mut m, 4);
        let c = standard_normal(&[1, 16, 2], &mut rng(5));
        let init: Vec<Tensor> = (0..5).map(|i| standard_normal(&[1, 16, 3], &mut rng(10 + i))).collect();
        let (before, rows) = (m.evaluations(), m.rows_evaluated());
        let a = m.ddim_sample(&init, &c, &[50, 40, 30, 20, 10]).unwrap();
        assert_eq!(m.evaluations() - before, 5);
        assert_eq!(m.rows_evaluated() - rows, 5 * 5);
        assert_eq!(a.len(), 5);
        let b = m.ddim_sample(&init, &c, &[50, 40, 30, 20, 10]).unwrap();
        assert_eq!(a, b);
        // one chain on its own gives the same answer as inside the stack
        let solo = m.ddim_sample(&init[2..3], &c, &[50, 40, 30, 20, 10]).unwrap();
        assert!(solo[0].max_abs_diff(&a[2]) < 1e-12);
    }

    #[test]
    fn full_subsequence_equals_stepwise_chain() {
        for param in [Parameterization::Direct, Parameterization::Epsilon] {
            let mut m = toy(param);
            perturb(&mut m, 6);
            let c = standard_normal(&[2, 16, 2], &mut rng(7));
            let h = standard_normal(&[2, 16, 3], &mut rng(8));
            let steps: Vec<usize> = (1..=50).rev().collect();
            let fast = m.ddim_sample(std::slice::from_ref(&h), &c, &steps).unwrap();
            let mut slow = h.clone();
            for k in (1..=50).rev() {
                slow = m.reverse_step(&slow, k, &c).unwrap();
            }
            assert_eq!(fast[0], slow);
        }
    }

    #[test]
    fn ddim_recovers_clean_pose_with_oracle_noise() {
        // a model whose ε̂ is exact sends any h_k straight back to h0
        let s = DiffusionConfig::default().schedule().unwrap();
        let h0 = Tensor::from_fn(&[6], |i| i as f64 * 0.1);
        let eps = Tensor::from_fn(&[6], |i| 1.0 - i as f64 * 0.3);
        let hk = s.forward_sample(&h0, 40, &eps).unwrap();
        let (ak, bk) = (s.alpha_bar(40).sqrt(), (1.0 - s.alpha_bar(40)).sqrt());
        for i in 0..6 {
            let x0 = (hk.data()[i] - bk * eps.data()[i]) / ak;
            assert!((x0 - h0.data()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn training_pair_shared_noise() {
        let m = toy(Parameterization::Direct);
        let h0 = standard_normal(&[3, 16, 3], &mut rng(9));
        let eps = standard_normal(&[3, 16, 3], &mut rng(10));
        let p = m.training_pair_with(&h0, &[1, 7, 50], &eps).unwrap();
        let s = &m.schedule;
        let h7 = s.forward_sample(&h0, 7, &eps).unwrap();
        let h6 = s.forward_sample(&h0, 6, &eps).unwrap();
        assert_eq!(&p.noisy.data()[48..96], &h7.data()[48..96]);
        assert_eq!(&p.target.data()[48..96], &h6.data()[48..96]);
        // k = 1 targets the clean pose
        assert_eq!(&p.target.data()[..48], &h0.data()[..48]);
    }

    #[test]
    fn init_distribution_mean_and_errors() {
        let m = toy(Parameterization::Direct);
        let enc = PgFormer::build(&PgFormerConfig::toy(8, 1), 1).unwrap();
        let pose = standard_normal(&[1, 16, 2], &mut rng(11));
        let d = InitDistribution::new(&pose, &enc, 0.05).unwrap();
        let z = enc.predict(&pose).unwrap();
        for j in 0..16 {
            assert_eq!(d.mean.data()[j * 3], pose.data()[j * 2]);
            assert_eq!(d.mean.data()[j * 3 + 1], pose.data()[j * 2 + 1]);
            assert_eq!(d.mean.data()[j * 3 + 2], z.data()[j * 3 + 2]);
        }
        assert!(InitDistribution::new(&pose, &enc, 0.0).is_err());
        let tiny = InitDistribution::new(&pose, &enc, 1e-300).unwrap();
        assert!(tiny.sample(&mut rng(1)).max_abs_diff(&tiny.mean) < 1e-290);
        let _ = m;
    }

    #[test]
    fn aggregate_cases() {
        let p = Tensor::from_fn(&[2, 3], |i| i as f64);
        assert_eq!(aggregate(&[p.clone(), p.clone()]).unwrap(), p);
        let neg = Tensor::from_fn(&[2, 3], |i| -(i as f64));
        assert!(aggregate(&[p.clone(), neg]).unwrap().data().iter().all(|v| *v == 0.0));
        let many: Vec<Tensor> = (0..5).map(|i| standard_normal(&[2, 3], &mut rng(i))).collect();
        let mean = aggregate(&many).unwrap();
        for c in 0..6 {
            let want = many.iter().map(|t| t.data()[c]).sum::<f64>() / 5.0;
            assert!((mean.data()[c] - want).abs() < 1e-15);
        }
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        let mut m = toy(Parameterization::Epsilon);
        perturb(&mut m, 12);
        m.save(&path).unwrap();
        let back = DiffusionModel::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.backbone.store, m.backbone.store);
        assert!(PgFormer::load(&path).is_err());
    }
}
