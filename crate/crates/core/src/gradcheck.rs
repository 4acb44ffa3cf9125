//! Finite-difference checks of every differentiable building block, grouped
//! by module so the command line can run any subset.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::diffusion::{DiffusionConfig, DiffusionModel};
use crate::error::{Error, Result};
use crate::gcn::{ChebConv, LocalPerception, VanillaGConv};
use crate::model::{IoLayers, PgFormer, PgFormerConfig};
use crate::nn::{check_store_gradients_in, probe_loss, Linear, Mode, ParamStore, SiteCounter};
use crate::pga::{AttentionScale, PgaConfig, PgaLayer};
use crate::skeleton::{scaled_laplacian, Skeleton};
use crate::tensor::{finite_diff_report, GradReport, Tape, Tensor, Var};
use crate::training::{diffusion_loss, pose_loss};

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GradcheckModule {
    All,
    Tensor,
    Gcn,
    Pga,
    Model,
    Diffusion,
}

impl GradcheckModule {
    pub const NAMES: [&'static str; 6] = ["all", "tensor", "gcn", "pga", "model", "diffusion"];

    fn includes(self, other: GradcheckModule) -> bool {
        self == GradcheckModule::All || self == other
    }
}

impl FromStr for GradcheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Self::All,
            "tensor" => Self::Tensor,
            "gcn" => Self::Gcn,
            "pga" => Self::Pga,
            "model" => Self::Model,
            "diffusion" => Self::Diffusion,
            other => {
                return Err(Error::Param(format!("unknown module {other}; expected one of {}", Self::NAMES.join(", "))))
            }
        })
    }
}

impl fmt::Display for GradcheckModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = [Self::All, Self::Tensor, Self::Gcn, Self::Pga, Self::Model, Self::Diffusion]
            .iter()
            .position(|m| m == self)
            .expect("listed");
        f.write_str(Self::NAMES[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckCase {
    pub module: GradcheckModule,
    pub name: &'static str,
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinks: usize,
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// Largest error over a set of cases.
pub fn worst(cases: &[GradcheckCase]) -> f64 {
    cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for inputs of kinked functions.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `1e-3 · Σ r_i y_i / √n` on a bare tape.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let n = tape.value(y).len().max(1);
    let scale = 1e-3 / (n as f64).sqrt();
    let r = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    let rv = tape.constant(&shape, r)?;
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

fn tensor_cases(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, GradReport)>> {
    let h = GRADCHECK_STEP;
    let mut out = Vec::new();
    let a = uniform(&[2, 3, 4], rng);
    let b = uniform(&[4, 5], rng);
    out.push((
        "matmul",
        finite_diff_report(&[a.clone(), b], h, |t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        })?,
    ));
    for trans in [false, true] {
        let k = uniform(&[2, 4, 5], rng);
        let other = if trans { uniform(&[2, 6, 5], rng) } else { uniform(&[2, 5, 6], rng) };
        let name = if trans { "bmm_transposed" } else { "bmm" };
        out.push((
            name,
            finite_diff_report(&[k, other], h, |t, v| {
                let y = t.bmm(v[0], v[1], trans)?;
                project(t, y, 2)
            })?,
        ));
    }
    let mat: Arc<[f64]> = uniform(&[3, 3], rng).data().into();
    out.push((
        "node_mix",
        finite_diff_report(std::slice::from_ref(&a), h, |t, v| {
            let y = t.node_mix(&mat, 3, v[0])?;
            project(t, y, 3)
        })?,
    ));
    let c = uniform(&[2, 3, 4], rng);
    out.push((
        "add_sub_mul",
        finite_diff_report(&[a.clone(), c.clone()], h, |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let y = t.mul(s, d)?;
            let y = t.scale(y, 0.7);
            project(t, y, 4)
        })?,
    ));
    let bias = uniform(&[4], rng);
    let joint_bias = uniform(&[3, 4], rng);
    out.push((
        "add_bias",
        finite_diff_report(&[a.clone(), bias, joint_bias], h, |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            let y = t.add_bias(y, v[2])?;
            project(t, y, 5)
        })?,
    ));
    let k = off_kink(&[2, 3, 4], rng);
    out.push((
        "relu_abs_square",
        finite_diff_report(&[k], h, |t, v| {
            let r = t.relu(v[0]);
            let a = t.abs(v[0]);
            let q = t.square(v[0]);
            let y = t.add(r, a)?;
            let y = t.add(y, q)?;
            project(t, y, 6)
        })?,
    ));
    out.push((
        "sum_mean",
        finite_diff_report(std::slice::from_ref(&a), h, |t, v| {
            let q = t.square(v[0]);
            let s = t.sum(q);
            let m = t.mean(q);
            let y = t.add(s, m)?;
            Ok(t.scale(y, 1e-3))
        })?,
    ));
    out.push((
        "softmax",
        finite_diff_report(std::slice::from_ref(&a), h, |t, v| {
            let y = t.softmax(v[0])?;
            project(t, y, 7)
        })?,
    ));
    let gamma = uniform(&[4], rng);
    let beta = uniform(&[4], rng);
    out.push((
        "layer_norm",
        finite_diff_report(&[a.clone(), gamma.clone(), beta.clone()], h, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 8)
        })?,
    ));
    out.push((
        "batch_norm_batch_stats",
        finite_diff_report(&[a.clone(), gamma.clone(), beta.clone()], h, |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, None)?;
            project(t, y, 9)
        })?,
    ));
    let (mean, var) = ([0.1, -0.2, 0.3, 0.0], [0.5, 1.5, 2.0, 0.9]);
    out.push((
        "batch_norm_running_stats",
        finite_diff_report(&[a.clone(), gamma, beta], h, |t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, Some((&mean, &var)))?;
            project(t, y, 10)
        })?,
    ));
    out.push((
        "dropout",
        finite_diff_report(std::slice::from_ref(&a), h, |t, v| {
            let y = t.dropout(v[0], 0.3, 11)?;
            project(t, y, 11)
        })?,
    ));
    let e = uniform(&[2, 5, 4], rng);
    out.push((
        "concat",
        finite_diff_report(&[a.clone(), e], h, |t, v| {
            let y = t.concat(&[v[0], v[1]], 1)?;
            project(t, y, 12)
        })?,
    ));
    let wide = uniform(&[2, 3, 8], rng);
    out.push((
        "split_merge_heads",
        finite_diff_report(&[wide], h, |t, v| {
            let s = t.split_heads(v[0], 2)?;
            let q = t.square(s);
            let y = t.merge_heads(q, 2)?;
            project(t, y, 13)
        })?,
    ));
    Ok(out)
}

fn gcn_cases(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, GradReport)>> {
    let h = GRADCHECK_STEP;
    let skel = Skeleton::h36m16();
    let adj = skel.graph.normalized_adjacency()?;
    let lap = scaled_laplacian(&adj)?;
    let x = uniform(&[2, 16, 8], rng);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let conv = VanillaGConv::new(&mut store, "g", &adj, 8, 6, rng);
    out.push((
        "vanilla_gconv",
        check_store_gradients_in(&store, std::slice::from_ref(&x), h, Mode::Eval, |s, v| {
            let y = conv.forward(s, v[0])?;
            probe_loss(s, y, 20)
        })?,
    ));

    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "l", 8, 6, rng);
    out.push((
        "linear",
        check_store_gradients_in(&store, std::slice::from_ref(&x), h, Mode::Eval, |s, v| {
            let y = lin.forward(s, v[0])?;
            probe_loss(s, y, 21)
        })?,
    ));

    let mut store = ParamStore::new();
    let cheb = ChebConv::new(&mut store, "c", &lap, 3, 8, 6, rng)?;
    out.push((
        "cheb_conv",
        check_store_gradients_in(&store, std::slice::from_ref(&x), h, Mode::Eval, |s, v| {
            let y = cheb.forward(s, v[0])?;
            probe_loss(s, y, 22)
        })?,
    ));

    let mut store = ParamStore::new();
    let block = LocalPerception::new(&mut store, "lp", &lap, 3, 8, rng)?;
    for (id, v) in [(block.bn1.running_mean, 0.1), (block.bn1.running_var, 1.7)] {
        store.get_mut(id).data_mut().fill(v);
    }
    out.push((
        "local_perception_eval",
        check_store_gradients_in(&store, std::slice::from_ref(&x), h, Mode::Eval, |s, v| {
            let y = block.forward(s, v[0])?;
            probe_loss(s, y, 23)
        })?,
    ));
    out.push((
        "local_perception_train",
        check_store_gradients_in(&store, &[x], h, Mode::Train { seed: 24 }, |s, v| {
            let y = block.forward(s, v[0])?;
            probe_loss(s, y, 24)
        })?,
    ));
    Ok(out)
}

fn pga_cases(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, GradReport)>> {
    let h = GRADCHECK_STEP;
    let mut out = Vec::new();
    for (name, skel, scale) in [
        ("pga_block_16", Skeleton::h36m16(), AttentionScale::PerHead),
        ("pga_block_17_full_scale", Skeleton::h36m17(), AttentionScale::Full),
    ] {
        let n = skel.n_joints();
        let adj = skel.graph.normalized_adjacency()?;
        let mut store = ParamStore::new();
        let cfg = PgaConfig { scale, ..PgaConfig::new(8, 4) };
        let layer = PgaLayer::new(&mut store, "pga", &adj, &skel.scheme, cfg, rng, &mut SiteCounter::default())?;
        let x = uniform(&[2, n, 8], rng);
        out.push((
            name,
            check_store_gradients_in(&store, &[x], h, Mode::Eval, |s, v| {
                let y = layer.forward(s, v[0])?;
                probe_loss(s, y, 30)
            })?,
        ));
    }
    let skel = Skeleton::h36m16();
    let adj = skel.graph.normalized_adjacency()?;
    let mut store = ParamStore::new();
    let layer =
        PgaLayer::new(&mut store, "pga", &adj, &skel.scheme, PgaConfig::new(8, 2), rng, &mut SiteCounter::default())?;
    let x = uniform(&[2, 16, 8], rng);
    out.push((
        "pyramid_fusion",
        check_store_gradients_in(&store, std::slice::from_ref(&x), h, Mode::Eval, |s, v| {
            let y = layer.pyramid_fuse(s, v[0])?.fused;
            probe_loss(s, y, 31)
        })?,
    ));
    out.push((
        "pga_block_train",
        check_store_gradients_in(&store, &[x], h, Mode::Train { seed: 32 }, |s, v| {
            let y = layer.forward(s, v[0])?;
            probe_loss(s, y, 32)
        })?,
    ));
    Ok(out)
}

fn model_cases(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, GradReport)>> {
    let h = GRADCHECK_STEP;
    let mut out = Vec::new();
    let mut m = PgFormer::build(&PgFormerConfig::toy(8, 1), rng.random())?;
    // a non-zero joint offset and head so every path carries gradient
    if let Some(id) = m.joint_embed {
        let t = uniform(&[16, 8], rng);
        m.store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    let hw = m.head.weight();
    for v in m.store.get_mut(hw).data_mut() {
        *v *= 50.0;
    }
    let x = uniform(&[2, 16, 2], rng);
    let target = uniform(&[2, 16, 3], rng);
    out.push((
        "pgformer_toy_eval",
        check_store_gradients_in(&m.store, std::slice::from_ref(&x), h, Mode::Eval, |s, v| {
            let y = m.forward(s, v[0])?;
            probe_loss(s, y, 40)
        })?,
    ));
    // bring the loss near 1e-3 so round-off stays under the error floor
    let loss_scale = {
        let mut tape = Tape::new();
        let mut s = crate::nn::Session::new(&mut tape, &m.store, Mode::Train { seed: 41 });
        let xv = s.tape.leaf(&x);
        let y = m.forward(&mut s, xv)?;
        let l = pose_loss(&mut s, y, &target, 0.025)?;
        1e-3 / s.tape.scalar(l).max(1e-12)
    };
    out.push((
        "pgformer_toy_train_pose_loss",
        check_store_gradients_in(&m.store, std::slice::from_ref(&x), h, Mode::Train { seed: 41 }, |s, v| {
            let y = m.forward(s, v[0])?;
            let l = pose_loss(s, y, &target, 0.025)?;
            Ok(s.tape.scale(l, loss_scale))
        })?,
    ));
    let graph_io = PgFormerConfig { io_layers: IoLayers::GraphConv, use_pga: false, ..PgFormerConfig::toy(8, 1) };
    let g = PgFormer::build(&graph_io, rng.random())?;
    out.push((
        "pgformer_graph_io_ablation",
        check_store_gradients_in(&g.store, &[x], h, Mode::Eval, |s, v| {
            let y = g.forward(s, v[0])?;
            probe_loss(s, y, 42)
        })?,
    ));
    Ok(out)
}

fn diffusion_cases(rng: &mut ChaCha8Rng) -> Result<Vec<(&'static str, GradReport)>> {
    let cfg = DiffusionConfig { backbone: PgFormerConfig::toy(8, 1), embed_dim: 4, ..DiffusionConfig::default() };
    let mut model = DiffusionModel::build(&cfg, rng.random())?;
    for id in [model.backbone.head.weight(), model.backbone.head.bias()] {
        for v in model.backbone.store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    let h0 = Tensor::from_fn(&[2, 16, 3], |_| 0.1 * rng.random_range(-1.0..1.0));
    let cond = uniform(&[2, 16, 2], rng);
    let pair = model.training_pair(&h0, rng)?;
    let store = model.backbone.store.clone();
    let loss_scale = {
        let mut tape = Tape::new();
        let mut s = crate::nn::Session::new(&mut tape, &store, Mode::Eval);
        let l = diffusion_loss(&mut s, &model, &pair, &cond)?;
        1e-3 / s.tape.scalar(l).max(1e-12)
    };
    let report = check_store_gradients_in(&store, &[], GRADCHECK_STEP, Mode::Eval, |s, _| {
        let l = diffusion_loss(s, &model, &pair, &cond)?;
        Ok(s.tape.scale(l, loss_scale))
    })?;
    Ok(vec![("denoiser_loss", report)])
}

/// Runs every case of `module`; each case reports its worst relative error.
pub fn run_gradchecks(module: GradcheckModule, seed: u64) -> Result<Vec<GradcheckCase>> {
    type Suite = fn(&mut ChaCha8Rng) -> Result<Vec<(&'static str, GradReport)>>;
    let suites: [(GradcheckModule, Suite); 5] = [
        (GradcheckModule::Tensor, tensor_cases),
        (GradcheckModule::Gcn, gcn_cases),
        (GradcheckModule::Pga, pga_cases),
        (GradcheckModule::Model, model_cases),
        (GradcheckModule::Diffusion, diffusion_cases),
    ];
    let mut out = Vec::new();
    for (m, run) in suites {
        if module.includes(m) {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::nn::mix_seed(seed, m as u64));
            for (name, r) in run(&mut rng)? {
                out.push(GradcheckCase {
                    module: m,
                    name,
                    max_rel_error: r.max_rel_error,
                    checked: r.checked,
                    kinks: r.kinks,
                });
            }
        }
    }
    Ok(out)
}
