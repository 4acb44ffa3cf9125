//! Losses, Adam, learning-rate schedules and the training loops.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PoseRecord};
use crate::diffusion::{standard_normal, DiffusionModel, InitDistribution, TrainingPair};
use crate::error::{Error, Result};
use crate::eval::mpjpe;
use crate::model::PgFormer;
use crate::nn::{apply_stat_updates, mix_seed, Gradients, Mode, ParamStore, Session};
use crate::skeleton::SkeletonGraph;
use crate::tensor::{Tape, Tensor, Var};

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

/// `λ·Σ|d|/B + (1−λ)·Σd²/B` with `d = pred − target`.
pub fn pose_loss(s: &mut Session<'_>, pred: Var, target: &Tensor, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Param(format!("loss weight {lambda} outside [0, 1]")));
    }
    if s.tape.shape(pred) != target.shape() {
        return Err(Error::shape("pose_loss", s.tape.shape(pred), target.shape()));
    }
    check_finite(target, "target")?;
    if s.tape.value(pred).iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("prediction contains non-finite values".into()));
    }
    let batch = target.shape().first().copied().unwrap_or(1).max(1) as f64;
    let t = s.tape.constant(target.shape(), target.data().to_vec())?;
    let d = s.tape.sub(pred, t)?;
    let l1 = s.tape.abs(d);
    let l1 = s.tape.sum(l1);
    let l2 = s.tape.square(d);
    let l2 = s.tape.sum(l2);
    let l1 = s.tape.scale(l1, lambda / batch);
    let l2 = s.tape.scale(l2, (1.0 - lambda) / batch);
    s.tape.add(l1, l2)
}

/// Plain-value form of [`pose_loss`].
pub fn pose_loss_value(pred: &Tensor, target: &Tensor, lambda: f64) -> Result<f64> {
    check_finite(pred, "prediction")?;
    let store = ParamStore::new();
    let mut tape = Tape::new();
    let mut s = Session::new(&mut tape, &store, Mode::Eval);
    let p = s.tape.leaf(pred);
    let l = pose_loss(&mut s, p, target, lambda)?;
    Ok(s.tape.scalar(l))
}

/// Mean over the batch of `‖g_θ(h_k, f_k, f_c) − target‖²`.
pub fn diffusion_loss(s: &mut Session<'_>, model: &DiffusionModel, pair: &TrainingPair, cond: &Tensor) -> Result<Var> {
    let out = model.forward(s, &pair.noisy, cond, &pair.steps)?;
    let batch = pair.target.shape()[0].max(1) as f64;
    let t = s.tape.constant(pair.target.shape(), pair.target.data().to_vec())?;
    let d = s.tape.sub(out, t)?;
    let sq = s.tape.square(d);
    let total = s.tape.sum(sq);
    Ok(s.tape.scale(total, 1.0 / batch))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam update of one tensor at step `t ≥ 1`.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let c1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

/// Moment buffers for every tensor of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        Self { t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update; parameters without a gradient see a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let mut dense: Vec<Option<&[f64]>> = vec![None; store.len()];
        for (id, g) in &grads.grads {
            dense[id.0] = Some(g);
        }
        for id in store.trainable_ids() {
            let i = id.0;
            let zero;
            let g = match dense[i] {
                Some(g) => g,
                None => {
                    zero = vec![0.0; self.m[i].len()];
                    &zero
                }
            };
            adam_update(store.get_mut(id).data_mut(), g, &mut self.m[i], &mut self.v[i], self.t, lr);
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LrSchedule {
    /// Multiply by 0.96 every 4 epochs.
    #[default]
    #[serde(rename = "decay4pct_per_4epochs")]
    Decay4PctPer4Epochs,
    /// Multiply by 0.9 every 50,000 optimizer steps.
    #[serde(rename = "mul0.9_per_50k_steps")]
    Mul09Per50kSteps,
    /// Multiply by 0.9 every 10 epochs.
    #[serde(rename = "mul0.9_per_10_epochs")]
    Mul09Per10Epochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr0: f64,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub flip_augment: bool,
    pub seed: u64,
    /// Held-out share of the data when no validation set is given.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::gt()
    }
}

impl TrainConfig {
    /// Ground-truth-keypoint run: λ = 0.025, batch 64.
    pub fn gt() -> Self {
        Self {
            lambda: 0.025,
            lr0: 1e-3,
            schedule: LrSchedule::Decay4PctPer4Epochs,
            batch_size: 64,
            epochs: 20,
            flip_augment: true,
            seed: 0,
            val_fraction: 0.1,
        }
    }

    /// Detected-keypoint run: λ = 0.1, batch 256, 0.9 every 50k steps.
    pub fn cpn() -> Self {
        Self { lambda: 0.1, batch_size: 256, schedule: LrSchedule::Mul09Per50kSteps, ..Self::gt() }
    }

    /// Diffusion run: batch 2048, 0.9 every 10 epochs.
    pub fn diffusion() -> Self {
        Self { lambda: 0.0, batch_size: 2048, schedule: LrSchedule::Mul09Per10Epochs, ..Self::gt() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr0)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("validation fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

pub fn lr_at(cfg: &TrainConfig, epoch: usize, step: u64) -> f64 {
    let exponent = match cfg.schedule {
        LrSchedule::Decay4PctPer4Epochs => return cfg.lr0 * 0.96f64.powi((epoch / 4) as i32),
        LrSchedule::Mul09Per50kSteps => step / 50_000,
        LrSchedule::Mul09Per10Epochs => (epoch / 10) as u64,
    };
    cfg.lr0 * 0.9f64.powi(exponent as i32)
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mpjpe_mm: Option<f64>,
}

/// Records mirrored across the sagittal plane, in both 2D and 3D.
pub fn flip_records(graph: &SkeletonGraph, ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for r in &mut out.records {
        *r = PoseRecord {
            id: format!("{}_flip", r.id),
            joints2d: graph.flip_points(&r.joints2d),
            joints3d: graph.flip_points(&r.joints3d),
            action_tag: r.action_tag.clone(),
        };
    }
    out
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let per: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gathered rows match shape")
}

fn diverged(epoch: usize, step: u64, loss: f64) -> Error {
    Error::Numeric(format!("training diverged at epoch {epoch}, step {step}: loss {loss}"))
}

/// One optimizer step of the lifter on `(x, y)`; returns the loss.
pub fn pose_step(
    model: &mut PgFormer,
    adam: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    lambda: f64,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, grads) = {
        let mut s = Session::new(&mut tape, &model.store, Mode::Train { seed });
        let xv = s.tape.leaf(x);
        let pred = model.forward(&mut s, xv)?;
        let loss = pose_loss(&mut s, pred, y, lambda)?;
        let value = s.tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss {value}")));
        }
        (value, s.backward(loss)?)
    };
    adam.step(&mut model.store, &grads, lr);
    apply_stat_updates(&mut model.store, &grads.stat_updates);
    Ok(loss)
}

/// One optimizer step of the denoiser.
pub fn diffusion_step(
    model: &mut DiffusionModel,
    adam: &mut Adam,
    pair: &TrainingPair,
    cond: &Tensor,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, grads) = {
        let mut s = Session::new(&mut tape, &model.backbone.store, Mode::Train { seed });
        let loss = diffusion_loss(&mut s, model, pair, cond)?;
        let value = s.tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("loss {value}")));
        }
        (value, s.backward(loss)?)
    };
    adam.step(&mut model.backbone.store, &grads, lr);
    apply_stat_updates(&mut model.backbone.store, &grads.stat_updates);
    Ok(loss)
}

/// Eval-mode predictions in chunks, converted to millimeters.
pub fn predict_mm(model: &PgFormer, inputs: &Tensor, chunk: usize) -> Result<Tensor> {
    let b = inputs.shape()[0];
    let mut out = Vec::with_capacity(b * model.n_joints() * 3);
    for start in (0..b).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(b)).collect();
        let y = model.predict(&gather(inputs, &idx))?;
        out.extend(y.data().iter().map(|v| v * 1000.0));
    }
    Tensor::new(vec![b, model.n_joints(), 3], out)
}

/// Root-aligned MPJPE of the lifter on a dataset, millimeters.
pub fn evaluate(model: &PgFormer, ds: &Dataset) -> Result<f64> {
    let root = model.skeleton.graph.root();
    let pred = predict_mm(model, &ds.inputs(), 256)?;
    mpjpe(&pred, &ds.joints3d_mm(), root)
}

fn emit(log: &mut Option<&mut dyn Write>, record: &EpochLog) -> Result<()> {
    if let Some(w) = log {
        writeln!(w, "{}", serde_json::to_string(record)?)?;
        w.flush()?;
    }
    Ok(())
}

/// Trains the lifter; each epoch appends one JSON line to `log`.
pub fn train_pgformer(
    model: &mut PgFormer,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set has no records".into()));
    }
    if train.n_joints != model.n_joints() {
        return Err(Error::Data(format!("data has {} joints, model expects {}", train.n_joints, model.n_joints())));
    }
    let root = model.skeleton.graph.root();
    let mut pool = train.clone();
    if cfg.flip_augment {
        pool.records.extend(flip_records(&model.skeleton.graph, train).records);
    }
    let (inputs, targets) = (pool.inputs(), pool.targets(root));
    let mut adam = Adam::new(&model.store);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch, step);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let lr = if cfg.schedule == LrSchedule::Mul09Per50kSteps { lr_at(cfg, epoch, step) } else { lr };
            let x = gather(&inputs, batch);
            let y = gather(&targets, batch);
            let seed = mix_seed(cfg.seed ^ 0x5EED, step);
            let loss = pose_step(model, &mut adam, &x, &y, cfg.lambda, lr, seed).map_err(|e| {
                if e.is_numeric() {
                    diverged(epoch, step, f64::NAN)
                } else {
                    e
                }
            })?;
            total += loss * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        let record = EpochLog {
            epoch,
            step,
            lr,
            train_loss: total / seen as f64,
            val_mpjpe_mm: val.filter(|v| !v.is_empty()).map(|v| evaluate(model, v)).transpose()?,
        };
        emit(&mut log, &record)?;
        history.push(record);
    }
    Ok(history)
}

/// Root-aligned MPJPE of the full sampler on a dataset. Without an encoder
/// the chains start from the closed-form noised ground truth at step `K`.
pub fn evaluate_diffusion(model: &DiffusionModel, encoder: Option<&PgFormer>, ds: &Dataset, seed: u64) -> Result<f64> {
    let root = model.backbone.skeleton.graph.root();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cond = ds.inputs();
    let pred = match encoder {
        Some(enc) => model.sample(enc, &cond, &mut rng)?,
        None => {
            let h0 = ds.targets(root);
            let k = model.schedule.steps();
            let init: Vec<Tensor> = (0..model.config.samples)
                .map(|_| model.schedule.forward_sample(&h0, k, &standard_normal(h0.shape(), &mut rng)))
                .collect::<Result<_>>()?;
            let out = model.ddim_sample(&init, &cond, &model.config.ddim_steps)?;
            crate::diffusion::aggregate(&out)?
        }
    };
    let pred = Tensor::from_fn(pred.shape(), |i| pred.data()[i] * 1000.0);
    mpjpe(&pred, &ds.joints3d_mm(), root)
}

/// Trains the denoiser on ground-truth poses conditioned on their 2D inputs.
pub fn train_diffusion(
    model: &mut DiffusionModel,
    train: &Dataset,
    val: Option<&Dataset>,
    encoder: Option<&PgFormer>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set has no records".into()));
    }
    if train.n_joints != model.n_joints() {
        return Err(Error::Data(format!("data has {} joints, model expects {}", train.n_joints, model.n_joints())));
    }
    let root = model.backbone.skeleton.graph.root();
    let mut pool = train.clone();
    if cfg.flip_augment {
        pool.records.extend(flip_records(&model.backbone.skeleton.graph, train).records);
    }
    let (cond, h0) = (pool.inputs(), pool.targets(root));
    let mut adam = Adam::new(&model.backbone.store);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xD1FF));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg, epoch, step);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let (mut total, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let lr = if cfg.schedule == LrSchedule::Mul09Per50kSteps { lr_at(cfg, epoch, step) } else { lr };
            let pair = model.training_pair(&gather(&h0, batch), &mut rng)?;
            let c = gather(&cond, batch);
            let seed = mix_seed(cfg.seed ^ 0x5EED, step);
            let loss = diffusion_step(model, &mut adam, &pair, &c, lr, seed).map_err(|e| {
                if e.is_numeric() {
                    diverged(epoch, step, f64::NAN)
                } else {
                    e
                }
            })?;
            total += loss * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        let val_mpjpe_mm = match val.filter(|v| !v.is_empty()) {
            Some(v) => Some(evaluate_diffusion(model, encoder, v, mix_seed(cfg.seed, 0xE7A1))?),
            None => None,
        };
        let record = EpochLog { epoch, step, lr, train_loss: total / seen as f64, val_mpjpe_mm };
        emit(&mut log, &record)?;
        history.push(record);
    }
    Ok(history)
}

/// Encoder-seeded initial distribution for a batch of 2D poses.
pub fn init_for(encoder: &PgFormer, pose2d: &Tensor, std: f64) -> Result<InitDistribution> {
    InitDistribution::new(pose2d, encoder, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::diffusion::DiffusionConfig;
    use crate::model::PgFormerConfig;
    use crate::nn::{check_store_gradients, ParamId};
    use rand::Rng;

    #[test]
    fn loss_examples() {
        let p = Tensor::from_fn(&[2, 16, 3], |i| i as f64 * 0.1);
        for l in [0.0, 0.025, 0.5, 1.0] {
            assert_eq!(pose_loss_value(&p, &p, l).unwrap(), 0.0);
        }
        let t = Tensor::zeros(&[1, 1, 3]);
        let d = Tensor::new(vec![1, 1, 3], vec![3.0, 4.0, 0.0]).unwrap();
        assert_eq!(pose_loss_value(&d, &t, 1.0).unwrap(), 7.0);
        assert_eq!(pose_loss_value(&d, &t, 0.0).unwrap(), 25.0);
        assert_eq!(pose_loss_value(&d, &t, 0.5).unwrap(), 16.0);
        let nan = Tensor::new(vec![1, 1, 3], vec![f64::NAN, 0.0, 0.0]).unwrap();
        assert!(matches!(pose_loss_value(&nan, &t, 0.1), Err(Error::Numeric(_))));
        assert!(matches!(pose_loss_value(&t, &nan, 0.1), Err(Error::Numeric(_))));
        assert!(pose_loss_value(&t, &t, 1.5).is_err());
    }

    #[test]
    fn loss_permutation_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Tensor::from_fn(&[2, 4, 3], |_| rng.random_range(-1.0..1.0));
        let t = Tensor::from_fn(&[2, 4, 3], |_| rng.random_range(-1.0..1.0));
        let perm = [2, 0, 3, 1];
        let permute = |x: &Tensor| {
            Tensor::from_fn(&[2, 4, 3], |i| {
                let (b, j, c) = (i / 12, (i / 3) % 4, i % 3);
                x.data()[b * 12 + perm[j] * 3 + c]
            })
        };
        let a = pose_loss_value(&p, &t, 0.3).unwrap();
        let b = pose_loss_value(&permute(&p), &permute(&t), 0.3).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn adam_hand_trace() {
        let (mut x, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adam_update(&mut x, &[2.0], &mut m, &mut v, 1, 0.1);
        // first bias-corrected step is lr·g/(|g|+ε)
        assert!((x[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        let (mut x, mut m, mut v) = ([1.0, 5.0], [0.0; 2], [0.0; 2]);
        adam_update(&mut x, &[0.0, 0.0], &mut m, &mut v, 1, 0.1);
        assert_eq!(x, [1.0, 5.0]);
        let (mut x, mut m, mut v) = ([0.3, 0.3], [0.0; 2], [0.0; 2]);
        for t in 1..5 {
            adam_update(&mut x, &[0.7, 0.7], &mut m, &mut v, t, 0.01);
        }
        assert_eq!(x[0], x[1]);
    }

    #[test]
    fn schedules() {
        let mut c = TrainConfig { lr0: 1.0, ..TrainConfig::gt() };
        assert_eq!(lr_at(&c, 3, 0), 1.0);
        assert_eq!(lr_at(&c, 4, 0), 0.96);
        c.schedule = LrSchedule::Mul09Per50kSteps;
        assert_eq!(lr_at(&c, 99, 49_999), 1.0);
        assert_eq!(lr_at(&c, 0, 50_000), 0.9);
        c.schedule = LrSchedule::Mul09Per10Epochs;
        assert!((lr_at(&c, 20, 0) - 0.81).abs() < 1e-15);
        for s in [LrSchedule::Decay4PctPer4Epochs, LrSchedule::Mul09Per50kSteps, LrSchedule::Mul09Per10Epochs] {
            c.schedule = s;
            let mut prev = f64::INFINITY;
            for e in 0..60 {
                let lr = lr_at(&c, e, e as u64 * 4000);
                assert!(lr <= prev);
                prev = lr;
            }
        }
        let json = serde_json::to_string(&LrSchedule::Mul09Per50kSteps).unwrap();
        assert_eq!(json, "\"mul0.9_per_50k_steps\"");
    }

    #[test]
    fn published_defaults() {
        assert_eq!(TrainConfig::gt().lambda, 0.025);
        assert_eq!(TrainConfig::gt().batch_size, 64);
        assert_eq!(TrainConfig::cpn().lambda, 0.1);
        assert_eq!(TrainConfig::cpn().batch_size, 256);
        assert_eq!(TrainConfig::diffusion().batch_size, 2048);
    }

    #[test]
    fn one_epoch_log() {
        let ds = synth_generate(&SynthConfig { samples: 32, ..SynthConfig::default() }).unwrap();
        let mut model = PgFormer::build(&PgFormerConfig::toy(8, 1), 0).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, flip_augment: false, ..TrainConfig::gt() };
        let mut buf = Vec::new();
        let hist = train_pgformer(&mut model, &ds, Some(&ds), &cfg, Some(&mut buf)).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(hist[0].step, 4);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        let back: EpochLog = serde_json::from_str(text.trim()).unwrap();
        assert_eq!(back, hist[0]);
    }

    #[test]
    fn flip_doubles_steps() {
        let ds = synth_generate(&SynthConfig { samples: 16, ..SynthConfig::default() }).unwrap();
        let mut model = PgFormer::build(&PgFormerConfig::toy(8, 1), 0).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, flip_augment: true, ..TrainConfig::gt() };
        let hist = train_pgformer(&mut model, &ds, None, &cfg, None).unwrap();
        assert_eq!(hist[0].step, 4);
        assert_eq!(hist[0].val_mpjpe_mm, None);
    }

    #[test]
    fn flip_consistency_on_symmetric_model() {
        // all-zero weights give a constant output, so mirrored pairs score alike
        let ds = synth_generate(&SynthConfig { samples: 8, ..SynthConfig::default() }).unwrap();
        let mut model = PgFormer::build(&PgFormerConfig::toy(8, 1), 0).unwrap();
        for e in model.store.entries_mut() {
            if e.trainable {
                e.tensor.data_mut().fill(0.0);
            }
        }
        let g = &model.skeleton.graph;
        let flipped = flip_records(g, &ds);
        let loss = |d: &Dataset| pose_loss_value(&model.predict(&d.inputs()).unwrap(), &d.targets(0), 0.3).unwrap();
        assert!((loss(&ds) - loss(&flipped)).abs() < 1e-12);
        // flip(model(flip(x))) = model(x)
        let y = model.predict(&ds.inputs()).unwrap();
        let yf = model.predict(&flipped.inputs()).unwrap();
        let first = Tensor::new(vec![16, 3], yf.data()[..48].to_vec()).unwrap();
        let back = g.flip_pose(&first).unwrap();
        assert!(back.data().iter().zip(&y.data()[..48]).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synth_generate(&SynthConfig { samples: 24, ..SynthConfig::default() }).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::gt() };
        let run = || {
            let mut model = PgFormer::build(&PgFormerConfig::toy(8, 1), 3).unwrap();
            let h = train_pgformer(&mut model, &ds, None, &cfg, None).unwrap();
            (h.last().unwrap().train_loss, model.store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(sa, sb);
    }

    #[test]
    fn divergence_is_reported() {
        let mut ds = synth_generate(&SynthConfig { samples: 8, ..SynthConfig::default() }).unwrap();
        ds.records[3].joints3d[4][1] = f64::INFINITY;
        let mut model = PgFormer::build(&PgFormerConfig::toy(8, 1), 0).unwrap();
        let cfg = TrainConfig { epochs: 1, batch_size: 8, flip_augment: false, ..TrainConfig::gt() };
        match train_pgformer(&mut model, &ds, None, &cfg, None) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("epoch 0, step 0")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn diffusion_loss_identity_and_oracle() {
        let cfg = DiffusionConfig { backbone: PgFormerConfig::toy(8, 1), embed_dim: 4, ..DiffusionConfig::default() };
        let model = DiffusionModel::build(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h0 = standard_normal(&[3, 16, 3], &mut rng);
        let cond = standard_normal(&[3, 16, 2], &mut rng);
        let pair = model.training_pair(&h0, &mut rng).unwrap();
        let store = model.backbone.store.clone();
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let l = diffusion_loss(&mut s, &model, &pair, &cond).unwrap();
        let want: f64 =
            pair.noisy.data().iter().zip(pair.target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 3.0;
        assert!((s.tape.scalar(l) - want).abs() < 1e-15);
        // a pair whose target equals its input is fit perfectly by the identity
        let perfect = TrainingPair { target: pair.noisy.clone(), ..pair };
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &store, Mode::Eval);
        let l = diffusion_loss(&mut s, &model, &perfect, &cond).unwrap();
        assert_eq!(s.tape.scalar(l), 0.0);
    }

    #[test]
    fn diffusion_loss_gradients() {
        let cfg = DiffusionConfig { backbone: PgFormerConfig::toy(8, 1), embed_dim: 4, ..DiffusionConfig::default() };
        let mut model = DiffusionModel::build(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in [model.backbone.head.weight(), model.backbone.head.bias()] {
            for v in model.backbone.store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
        let h0 = Tensor::from_fn(&[2, 16, 3], |_| 1e-2 * rng.random_range(-1.0..1.0));
        let cond = standard_normal(&[2, 16, 2], &mut rng);
        let pair = model.training_pair(&h0, &mut rng).unwrap();
        let store = model.backbone.store.clone();
        let err = check_store_gradients(&store, &[], 1e-5, |s, _| {
            let l = diffusion_loss(s, &model, &pair, &cond)?;
            Ok(s.tape.scale(l, 1e-3))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adam_skips_untouched_as_zero_grad() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::full(&[2], 1.0), true);
        let b = store.add("b", Tensor::full(&[2], 1.0), true);
        let mut adam = Adam::new(&store);
        let grads = Gradients { grads: vec![(a, vec![1.0, -1.0])], stat_updates: vec![] };
        adam.step(&mut store, &grads, 0.1);
        assert!(store.get(a).data()[0] < 1.0 && store.get(a).data()[1] > 1.0);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
        let _: ParamId = b;
    }
}
