//! The assembled lifter: joint embedding, alternating Local Perception and
//! Pyramid Graph Attention blocks, and an output head.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::{LocalPerception, VanillaGConv};
use crate::nn::{Linear, Mode, ParamId, ParamStore, Session, SiteCounter};
use crate::pga::{split_attention, AttentionMap, AttentionScale, PgaConfig, PgaLayer};
use crate::skeleton::{scaled_laplacian, Skeleton};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgFormerConfig {
    /// Skeleton asset id, `skeleton16` or `skeleton17`.
    pub skeleton: String,
    pub n_joints: usize,
    pub hidden: usize,
    /// Number of (Local Perception, PGA) pairs.
    pub n_layers: usize,
    /// Chebyshev polynomial degree; each layer uses `cheb_order + 1` terms.
    pub cheb_order: usize,
    pub heads: usize,
    pub attn_dropout: f64,
    pub dropout: f64,
    /// Hidden width of the PGA graph-conv sub-layer as a multiple of `hidden`;
    /// 0 selects a single `hidden → hidden` conv.
    pub ffn_expansion: usize,
    pub attention_scale: AttentionScale,
    /// False replaces every PGA block with the identity.
    pub use_pga: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Layer type of the input embedding and the output head.
    pub io_layers: IoLayers,
    /// Adds a learned `[N, hidden]` offset after the embedding so layers
    /// with weights shared across joints can tell the joints apart.
    pub joint_embedding: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IoLayers {
    /// Per-joint dense layers.
    #[default]
    Dense,
    /// Vanilla graph convolutions over the normalized adjacency. Its null
    /// space (the degree-weighted joint mean) cannot vary per sample.
    GraphConv,
}

/// Output-head weights start this much smaller than Xavier so the
/// untrained model predicts poses near the origin.
pub const HEAD_INIT_SCALE: f64 = 0.01;

impl Default for PgFormerConfig {
    fn default() -> Self {
        Self::gt()
    }
}

impl PgFormerConfig {
    /// Ground-truth-keypoint setting: 96 channels, 5 layer pairs.
    pub fn gt() -> Self {
        Self {
            skeleton: "skeleton16".into(),
            n_joints: 16,
            hidden: 96,
            n_layers: 5,
            cheb_order: 2,
            heads: 4,
            attn_dropout: 0.05,
            dropout: 0.25,
            ffn_expansion: 2,
            attention_scale: AttentionScale::PerHead,
            use_pga: true,
            in_channels: 2,
            out_channels: 3,
            io_layers: IoLayers::Dense,
            joint_embedding: true,
        }
    }

    /// Detected-keypoint setting: 256 channels, 4 layer pairs.
    pub fn cpn() -> Self {
        Self { hidden: 256, n_layers: 4, ..Self::gt() }
    }

    /// Small model for tests and gradient checks.
    pub fn toy(hidden: usize, n_layers: usize) -> Self {
        Self { hidden, n_layers, ..Self::gt() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden size {} is not divisible by {} heads", self.hidden, self.heads)));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for p in [self.attn_dropout, self.dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn skeleton(&self) -> Result<Skeleton> {
        let skel = Skeleton::by_name(&self.skeleton)?;
        if skel.n_joints() != self.n_joints {
            return Err(Error::Config(format!(
                "skeleton {} has {} joints, config says {}",
                self.skeleton,
                skel.n_joints(),
                self.n_joints
            )));
        }
        Ok(skel)
    }

    fn pga(&self) -> PgaConfig {
        PgaConfig {
            dim: self.hidden,
            heads: self.heads,
            attn_dropout: self.attn_dropout,
            proj_dropout: self.dropout,
            ffn_hidden: (self.ffn_expansion > 0).then(|| self.ffn_expansion * self.hidden),
            scale: self.attention_scale,
        }
    }
}

/// One (Local Perception, PGA) pair; `pga` is `None` in the identity ablation.
#[derive(Clone, Debug)]
pub struct Block {
    pub local: LocalPerception,
    pub pga: Option<PgaLayer>,
}

#[derive(Clone, Debug)]
pub enum IoLayer {
    Dense(Linear),
    Graph(VanillaGConv),
}

impl IoLayer {
    fn new(
        kind: IoLayers,
        store: &mut ParamStore,
        name: &str,
        adj: &Tensor,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        match kind {
            IoLayers::Dense => Self::Dense(Linear::new(store, name, d_in, d_out, rng)),
            IoLayers::GraphConv => Self::Graph(VanillaGConv::new(store, name, adj, d_in, d_out, rng)),
        }
    }

    pub fn weight(&self) -> ParamId {
        match self {
            Self::Dense(l) => l.weight,
            Self::Graph(g) => g.weight,
        }
    }

    pub fn bias(&self) -> ParamId {
        match self {
            Self::Dense(l) => l.bias,
            Self::Graph(g) => g.bias,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        match self {
            Self::Dense(l) => l.forward(s, x),
            Self::Graph(g) => g.forward(s, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PgFormer {
    pub config: PgFormerConfig,
    pub skeleton: Skeleton,
    pub store: ParamStore,
    pub embed: IoLayer,
    pub joint_embed: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub head: IoLayer,
}

impl PgFormer {
    pub fn build(config: &PgFormerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let skeleton = config.skeleton()?;
        let adj = skeleton.graph.normalized_adjacency()?;
        let lap = scaled_laplacian(&adj)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sites = SiteCounter::default();
        let mut store = ParamStore::new();
        let d = config.hidden;
        let io = config.io_layers;
        let embed = IoLayer::new(io, &mut store, "embed", &adj, config.in_channels, d, &mut rng);
        let joint_embed =
            config.joint_embedding.then(|| store.add("joint_embed", Tensor::zeros(&[config.n_joints, d]), true));
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let local = LocalPerception::new(
                &mut store,
                &format!("blocks.{i}.local"),
                &lap,
                config.cheb_order + 1,
                d,
                &mut rng,
            )?;
            let pga = if config.use_pga {
                Some(PgaLayer::new(
                    &mut store,
                    &format!("blocks.{i}.pga"),
                    &adj,
                    &skeleton.scheme,
                    config.pga(),
                    &mut rng,
                    &mut sites,
                )?)
            } else {
                None
            };
            blocks.push(Block { local, pga });
        }
        let head = IoLayer::new(io, &mut store, "head", &adj, d, config.out_channels, &mut rng);
        for v in store.get_mut(head.weight()).data_mut() {
            *v *= HEAD_INIT_SCALE;
        }
        Ok(Self { config: config.clone(), skeleton, store, embed, joint_embed, blocks, head })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn n_joints(&self) -> usize {
        self.config.n_joints
    }

    /// `[B, N, in] → [B, N, out]` on the session's tape.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let sh = s.tape.shape(x).to_vec();
        if sh.len() != 3 || sh[1] != self.config.n_joints || sh[2] != self.config.in_channels {
            return Err(Error::shape("forward", &sh, &[0, self.config.n_joints, self.config.in_channels]));
        }
        let mut h = self.embed.forward(s, x)?;
        if let Some(id) = self.joint_embed {
            let p = s.param(id);
            h = s.tape.add_bias(h, p)?;
        }
        for block in &self.blocks {
            h = block.local.forward(s, h)?;
            if let Some(pga) = &block.pga {
                h = pga.forward(s, h)?;
            }
        }
        self.head.forward(s, h)
    }

    /// Eval-mode forward of a plain tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &self.store, Mode::Eval);
        let xv = s.tape.leaf(x);
        let y = self.forward(&mut s, xv)?;
        let out = s.tape.tensor(y);
        if !out.all_finite() {
            return Err(Error::Numeric("model output is not finite".into()));
        }
        Ok(out)
    }

    /// Per-head attention maps of every PGA block for sample `sample` of `x`.
    pub fn attention_maps(&self, x: &Tensor, sample: usize) -> Result<Vec<AttentionMap>> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &self.store, Mode::Eval);
        s.capture_attention();
        let xv = s.tape.leaf(x);
        self.forward(&mut s, xv)?;
        let captured = s.take_attention();
        let rows = self.skeleton.graph.names().to_vec();
        let cols = self.skeleton.scheme.fused_labels(&rows);
        split_attention(&captured, self.config.heads, sample, &rows, &cols)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with(path, None)
    }

    pub fn save_with(&self, path: &Path, provenance: Option<&serde_json::Value>) -> Result<()> {
        save_weights_with(path, "pgformer", &serde_json::to_value(&self.config)?, provenance, &self.store)
    }

    /// Rebuilds the model from the manifest's config and loads its tensors.
    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, store) = load_weights(path)?;
        if manifest.kind != "pgformer" {
            return Err(Error::Data(format!("{} holds {} weights, expected pgformer", path.display(), manifest.kind)));
        }
        let config: PgFormerConfig = serde_json::from_value(manifest.config)?;
        let mut model = Self::build(&config, 0)?;
        model.store.load_from(&store)?;
        Ok(model)
    }
}

/// Flop-order estimates of one forward pass, per sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Complexity {
    /// `[N·d² + (N + ΣM)·d²]·l`.
    pub pgformer: f64,
    /// `21/4·N·d²·l`, i.e. `21·N·d²` at four layers.
    pub graphsh: f64,
    /// `12·N·d²·l`, i.e. `48·N·d²` at four layers.
    pub multiscale: f64,
}

impl Complexity {
    pub fn ratio_to_graphsh(&self) -> f64 {
        self.pgformer / self.graphsh
    }
}

pub fn complexity_estimate(config: &PgFormerConfig) -> Result<Complexity> {
    config.validate()?;
    let skel = config.skeleton()?;
    let n = config.n_joints as f64;
    let fused = skel.scheme.fused_len() as f64;
    let dd = (config.hidden * config.hidden) as f64;
    let l = config.n_layers as f64;
    Ok(Complexity { pgformer: (n + fused) * dd * l, graphsh: 21.0 / 4.0 * n * dd * l, multiscale: 12.0 * n * dd * l })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: usize,
    #[serde(default = "yes")]
    pub trainable: bool,
}

fn yes() -> bool {
    true
}

/// JSON side of a weights file; the raw values live in `<path>.bin`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub kind: String,
    pub config: serde_json::Value,
    /// Settings of the run that produced the weights, e.g. the training config.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

pub fn blob_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".bin");
    PathBuf::from(p)
}

/// Writes the manifest to `path` and little-endian f64 data to `<path>.bin`.
pub fn save_weights(path: &Path, kind: &str, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    save_weights_with(path, kind, config, None, store)
}

/// [`save_weights`] with an extra provenance record in the manifest.
pub fn save_weights_with(
    path: &Path,
    kind: &str,
    config: &serde_json::Value,
    provenance: Option<&serde_json::Value>,
    store: &ParamStore,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut blob = Vec::new();
    for e in store.entries() {
        tensors.push(TensorEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            dtype: "f64".into(),
            byte_offset: blob.len(),
            trainable: e.trainable,
        });
        for v in e.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest =
        WeightsManifest { kind: kind.into(), config: config.clone(), provenance: provenance.cloned(), tensors };
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    fs::File::create(blob_path(path))?.write_all(&blob)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(WeightsManifest, ParamStore)> {
    let manifest: WeightsManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let blob = fs::read(blob_path(path))?;
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        if t.dtype != "f64" {
            return Err(Error::Data(format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
        }
        let len = crate::tensor::numel(&t.shape) * 8;
        let bytes = blob
            .get(t.byte_offset..t.byte_offset + len)
            .ok_or_else(|| Error::Data(format!("tensor {} runs past the end of the blob", t.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        store.add(t.name.clone(), Tensor::new(t.shape.clone(), data)?, t.trainable);
    }
    let expected: usize = manifest.tensors.iter().map(|t| crate::tensor::numel(&t.shape) * 8).sum();
    if blob.len() != expected {
        return Err(Error::Data(format!("weight blob holds {} bytes, manifest describes {expected}", blob.len())));
    }
    Ok((manifest, store))
}
