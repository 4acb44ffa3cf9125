//! Parameter storage and the per-forward session that binds weights to a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// False for running statistics and other non-learned buffers.
    pub trainable: bool,
}

/// Flat, ordered collection of every weight and buffer of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), tensor: tensor.with_requires_grad(trainable), trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|id| self.entries[id.0].trainable).collect()
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Overwrites every tensor from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Data(format!(
                "weights hold {} tensors, model expects {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Data(format!(
                    "weight {} {:?} does not match expected {} {:?}",
                    src.name,
                    src.tensor.shape(),
                    dst.name,
                    dst.tensor.shape()
                )));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// Train mode enables dropout and batch statistics; eval mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { seed: u64 },
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Running-statistic update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

/// One forward pass: a tape, the weights it reads, and the mode.
pub struct Session<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    stat_updates: Vec<StatUpdate>,
    attention: Option<Vec<Tensor>>,
}

impl<'a> Session<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode) -> Self {
        Self { tape, bound: vec![None; store.len()], store, mode, stat_updates: Vec::new(), attention: None }
    }

    /// Uses caller-provided tape leaves for the trainable parameters, in
    /// [`ParamStore::trainable_ids`] order. Gradient checks perturb these.
    pub fn with_bound(tape: &'a mut Tape, store: &'a ParamStore, mode: Mode, trainable_vars: &[Var]) -> Result<Self> {
        let ids = store.trainable_ids();
        if ids.len() != trainable_vars.len() {
            return Err(Error::Contract(format!(
                "{} bound vars for {} trainable tensors",
                trainable_vars.len(),
                ids.len()
            )));
        }
        let mut s = Self::new(tape, store, mode);
        for (id, v) in ids.into_iter().zip(trainable_vars) {
            s.bound[id.0] = Some(*v);
        }
        Ok(s)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape leaf for a stored tensor, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Leaf vars of the trainable parameters that were touched.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.store.trainable_ids().into_iter().filter_map(|id| self.bound[id.0].map(|v| (id, v))).collect()
    }

    /// Dropout whose mask depends only on the session seed and `site`.
    pub fn dropout(&mut self, x: Var, p: f64, site: u64) -> Result<Var> {
        match self.mode {
            Mode::Eval => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Param(format!("dropout rate {p} outside [0, 1)")));
                }
                Ok(x)
            }
            Mode::Train { seed } => self.tape.dropout(x, p, mix_seed(seed, site)),
        }
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Starts recording per-layer attention weights.
    pub fn capture_attention(&mut self) {
        self.attention = Some(Vec::new());
    }

    pub(crate) fn push_attention(&mut self, weights: Tensor) {
        if let Some(list) = &mut self.attention {
            list.push(weights);
        }
    }

    pub fn take_attention(&mut self) -> Vec<Tensor> {
        self.attention.take().unwrap_or_default()
    }

    /// Runs backward from `loss` and collects the gradient of every trainable
    /// parameter that took part in the forward pass.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.tape.backward(loss)?;
        let mut grads = Vec::new();
        for id in self.store.trainable_ids() {
            if let Some(v) = self.bound[id.0] {
                if let Some(g) = self.tape.grad(v) {
                    grads.push((id, g.to_vec()));
                }
            }
        }
        Ok(Gradients { grads, stat_updates: self.stat_updates })
    }
}

/// Output of [`Session::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub grads: Vec<(ParamId, Vec<f64>)>,
    pub stat_updates: Vec<StatUpdate>,
}

/// SplitMix64-style combination of a seed and a stream index.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Glorot-uniform matrix `fan_in × fan_out`, repeated `blocks` times along rows.
pub(crate) fn xavier(rng: &mut ChaCha8Rng, blocks: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[blocks * fan_in, fan_out], |_| rng.random_range(-limit..limit))
}

/// Hands out distinct dropout stream ids while a model is being built.
#[derive(Debug, Default)]
pub(crate) struct SiteCounter(u64);

impl SiteCounter {
    pub(crate) fn next(&mut self) -> u64 {
        self.0 += 1;
        self.0
    }
}

/// Dense map of the channel axis, shared by every joint.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    d_in: usize,
    d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, 1, d_in, d_out), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true),
            d_in,
            d_out,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let prev = s.tape.set_tag("linear");
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        let y = s.tape.matmul(x, w).and_then(|y| s.tape.add_bias(y, b));
        s.tape.set_tag(prev);
        y
    }
}

/// Learnable per-channel affine normalization parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
            eps: NORM_EPS,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.tape.layer_norm(x, g, b, self.eps)
    }
}

/// Batch norm over every row of the input, per channel, with running stats.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[dim]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[dim], 1.0), false),
            eps: NORM_EPS,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        if s.mode().is_train() {
            let (y, stats) = s.tape.batch_norm(x, g, b, self.eps, None)?;
            s.record_stats(StatUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats: stats.expect("training batch norm yields stats"),
            });
            Ok(y)
        } else {
            let store = s.store();
            let mean = store.get(self.running_mean).data().to_vec();
            let var = store.get(self.running_var).data().to_vec();
            let (y, _) = s.tape.batch_norm(x, g, b, self.eps, Some((&mean, &var)))?;
            Ok(y)
        }
    }
}

/// Folds batch statistics into the running buffers.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        for (r, m) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, v) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
    }
}

/// Worst finite-difference error over every trainable tensor of `store`
/// (plus `extra` inputs), for a loss built by `f`.
pub fn check_store_gradients<F>(store: &ParamStore, extra: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: FnMut(&mut Session<'_>, &[Var]) -> Result<Var>,
{
    Ok(check_store_gradients_in(store, extra, h, Mode::Eval, f)?.max_rel_error)
}

/// [`check_store_gradients`] under an explicit mode, with the full report.
/// Training mode is differentiable too: dropout masks are fixed by the seed.
pub fn check_store_gradients_in<F>(
    store: &ParamStore,
    extra: &[Tensor],
    h: f64,
    mode: Mode,
    mut f: F,
) -> Result<crate::tensor::GradReport>
where
    F: FnMut(&mut Session<'_>, &[Var]) -> Result<Var>,
{
    let ids = store.trainable_ids();
    let mut inputs: Vec<Tensor> = ids.iter().map(|id| store.get(*id).clone()).collect();
    inputs.extend(extra.iter().cloned());
    let n = ids.len();
    crate::tensor::finite_diff_report(&inputs, h, |tape, vars| {
        let mut s = Session::with_bound(tape, store, mode, &vars[..n])?;
        f(&mut s, &vars[n..])
    })
}

/// Random projection `Σ r_i y_i` scaled to keep the loss magnitude near
/// `1e-3`, so round-off in the loss value stays below the error floor.
pub fn probe_loss(s: &mut Session<'_>, y: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = s.tape.shape(y).to_vec();
    let n = s.tape.value(y).len().max(1);
    let scale = 1e-3 / (n as f64).sqrt();
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    let rv = s.tape.constant(&shape, r)?;
    let p = s.tape.mul(y, rv)?;
    Ok(s.tape.sum(p))
}
