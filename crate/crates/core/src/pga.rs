//! Pyramid Graph Attention.
//!
//! Queries come from the joint-level features; keys and values come from the
//! fused pyramid `LayerNorm(concat(H, AvgPool₁(H), AvgPool₂(H)))`, so every
//! joint attends over joints, body parts and body regions at once. A residual
//! graph-convolution sub-layer stands in for the transformer MLP.

use std::fmt::Write as _;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::VanillaGConv;
use crate::nn::{xavier, LayerNorm, ParamId, ParamStore, Session, SiteCounter};
use crate::skeleton::PoolingScheme;
use crate::tensor::{Tensor, Var};

/// Denominator of the attention logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScale {
    /// `√(D/h)`, the usual multi-head scaling.
    #[default]
    PerHead,
    /// `√D` over the full model width.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgaConfig {
    pub dim: usize,
    pub heads: usize,
    /// Dropout on the attention weights.
    pub attn_dropout: f64,
    /// Dropout after the attention output and after the graph-conv sub-layer.
    pub proj_dropout: f64,
    /// Hidden width of the trailing graph conv; `None` uses a single D→D conv.
    pub ffn_hidden: Option<usize>,
    pub scale: AttentionScale,
}

impl PgaConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            attn_dropout: 0.05,
            proj_dropout: 0.25,
            ffn_hidden: Some(2 * dim),
            scale: AttentionScale::PerHead,
        }
    }
}

/// Fused pyramid sequence plus the start offset of each segment.
#[derive(Clone, Debug)]
pub struct PyramidFeatures {
    pub fused: Var,
    /// `[0, N, N + M_1, …]`: where the joint, part and region spans begin.
    pub offsets: Vec<usize>,
}

/// Pooling operators of a scheme, ready for [`crate::Tape::node_mix`].
#[derive(Clone, Debug)]
pub struct Pyramid {
    pools: Vec<(Arc<[f64]>, usize)>,
    n: usize,
}

impl Pyramid {
    pub fn new(scheme: &PoolingScheme) -> Result<Self> {
        let pools = (0..scheme.levels().len())
            .map(|l| {
                let p = scheme.pooling_matrix(l)?;
                let rows = p.shape()[0];
                Ok((Arc::from(p.into_data()), rows))
            })
            .collect::<Result<_>>()?;
        Ok(Self { pools, n: scheme.n_joints() })
    }

    pub fn fused_len(&self) -> usize {
        self.n + self.pools.iter().map(|(_, m)| m).sum::<usize>()
    }

    /// `concat(H, P_1, …, P_n)` along the node axis, before normalization.
    pub fn concat(&self, s: &mut Session<'_>, h: Var) -> Result<PyramidFeatures> {
        let sh = s.tape.shape(h).to_vec();
        if sh.len() != 3 || sh[1] != self.n {
            return Err(Error::shape("pyramid_fuse", &sh, &[0, self.n, 0]));
        }
        let prev = s.tape.set_tag("pool");
        let mut parts = vec![h];
        let mut offsets = vec![0, self.n];
        for (mat, rows) in &self.pools {
            parts.push(s.tape.node_mix(mat, *rows, h)?);
            offsets.push(offsets.last().unwrap() + rows);
        }
        offsets.pop();
        let fused = s.tape.concat(&parts, 1)?;
        s.tape.set_tag(prev);
        Ok(PyramidFeatures { fused, offsets })
    }
}

/// One Pyramid Graph Attention block.
#[derive(Clone, Debug)]
pub struct PgaLayer {
    pub cfg: PgaConfig,
    pub norm_attn: LayerNorm,
    pub fuse_norm: LayerNorm,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub norm_ffn: LayerNorm,
    pub ffn: Vec<VanillaGConv>,
    pyramid: Pyramid,
    sites: [u64; 3],
}

impl PgaLayer {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        adj: &Tensor,
        scheme: &PoolingScheme,
        cfg: PgaConfig,
        rng: &mut ChaCha8Rng,
        sites: &mut SiteCounter,
    ) -> Result<Self> {
        let d = cfg.dim;
        if cfg.heads == 0 || d % cfg.heads != 0 {
            return Err(Error::Config(format!("hidden size {d} is not divisible by {} heads", cfg.heads)));
        }
        for p in [cfg.attn_dropout, cfg.proj_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Param(format!("dropout rate {p} outside [0, 1)")));
            }
        }
        let mut proj = |store: &mut ParamStore, tag: &str| {
            (
                store.add(format!("{name}.{tag}.weight"), xavier(rng, 1, d, d), true),
                store.add(format!("{name}.{tag}.bias"), Tensor::zeros(&[d]), true),
            )
        };
        let (wq, bq) = proj(store, "q");
        let (wk, bk) = proj(store, "k");
        let (wv, bv) = proj(store, "v");
        let (wo, bo) = proj(store, "out");
        let norm_attn = LayerNorm::new(store, &format!("{name}.norm_attn"), d);
        let fuse_norm = LayerNorm::new(store, &format!("{name}.fuse_norm"), d);
        let norm_ffn = LayerNorm::new(store, &format!("{name}.norm_ffn"), d);
        let ffn = match cfg.ffn_hidden {
            Some(hidden) => vec![
                VanillaGConv::new(store, &format!("{name}.ffn1"), adj, d, hidden, rng),
                VanillaGConv::new(store, &format!("{name}.ffn2"), adj, hidden, d, rng),
            ],
            None => vec![VanillaGConv::new(store, &format!("{name}.ffn"), adj, d, d, rng)],
        };
        Ok(Self {
            cfg,
            norm_attn,
            fuse_norm,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            norm_ffn,
            ffn,
            pyramid: Pyramid::new(scheme)?,
            sites: [sites.next(), sites.next(), sites.next()],
        })
    }

    pub fn fused_len(&self) -> usize {
        self.pyramid.fused_len()
    }

    /// Layer-normalized pyramid sequence built from `h`.
    pub fn pyramid_fuse(&self, s: &mut Session<'_>, h: Var) -> Result<PyramidFeatures> {
        let mut p = self.pyramid.concat(s, h)?;
        p.fused = self.fuse_norm.forward(s, p.fused)?;
        Ok(p)
    }

    fn project(&self, s: &mut Session<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (s.param(w), s.param(b));
        let y = s.tape.matmul(x, w)?;
        s.tape.add_bias(y, b)
    }

    /// `MHSA(LN(H)W_Q, P W_K, P W_V)` before the residual add.
    pub fn attention_core(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let heads = self.cfg.heads;
        let hn = self.norm_attn.forward(s, h)?;
        let pyramid = self.pyramid_fuse(s, hn)?;
        let prev = s.tape.set_tag("attn_q");
        let q = self.project(s, hn, self.wq, self.bq)?;
        s.tape.set_tag("attn_kv");
        let k = self.project(s, pyramid.fused, self.wk, self.bk)?;
        let v = self.project(s, pyramid.fused, self.wv, self.bv)?;
        let (qh, kh, vh) =
            (s.tape.split_heads(q, heads)?, s.tape.split_heads(k, heads)?, s.tape.split_heads(v, heads)?);
        s.tape.set_tag("attn_scores");
        let logits = s.tape.bmm(qh, kh, true)?;
        let denom = match self.cfg.scale {
            AttentionScale::PerHead => (self.cfg.dim / heads) as f64,
            AttentionScale::Full => self.cfg.dim as f64,
        };
        let logits = s.tape.scale(logits, 1.0 / denom.sqrt());
        let weights = s.tape.softmax(logits)?;
        let captured = s.tape.tensor(weights);
        s.push_attention(captured);
        let weights = s.dropout(weights, self.cfg.attn_dropout, self.sites[0])?;
        let mixed = s.tape.bmm(weights, vh, false)?;
        let merged = s.tape.merge_heads(mixed, heads)?;
        s.tape.set_tag("attn_out");
        let out = self.project(s, merged, self.wo, self.bo)?;
        s.tape.set_tag(prev);
        Ok(out)
    }

    /// `H_out = H + Dropout(MHSA(…))`.
    pub fn attention(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let out = self.attention_core(s, h)?;
        let out = s.dropout(out, self.cfg.proj_dropout, self.sites[1])?;
        s.tape.add(h, out)
    }

    /// Full block: `F = H_out + Dropout(ReLU(Gconv(LN(H))))`.
    pub fn forward(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let h_out = self.attention(s, h)?;
        let mut g = self.norm_ffn.forward(s, h)?;
        for (i, conv) in self.ffn.iter().enumerate() {
            g = conv.forward(s, g)?;
            if i + 1 < self.ffn.len() {
                g = s.tape.relu(g);
            }
        }
        let g = s.tape.relu(g);
        let g = s.dropout(g, self.cfg.proj_dropout, self.sites[2])?;
        s.tape.add(h_out, g)
    }
}

/// Attention weights of one head of one block for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// `[N, N + ΣM]`, each row a probability vector.
    pub weights: Tensor,
}

impl AttentionMap {
    /// Header row of column labels, then one labelled row per query joint.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query");
        for c in &self.col_labels {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        let cols = self.col_labels.len();
        for (r, label) in self.row_labels.iter().enumerate() {
            out.push_str(label);
            for v in &self.weights.data()[r * cols..(r + 1) * cols] {
                let _ = write!(out, ",{v:.8e}");
            }
            out.push('\n');
        }
        out
    }
}

/// Splits captured `[B·h, N, M]` weights into per-head maps for sample `b`.
pub fn split_attention(
    captured: &[Tensor],
    heads: usize,
    sample: usize,
    row_labels: &[String],
    col_labels: &[String],
) -> Result<Vec<AttentionMap>> {
    let mut maps = Vec::new();
    for (layer, t) in captured.iter().enumerate() {
        let s = t.shape();
        let (n, m) = (s[1], s[2]);
        if s[0] < (sample + 1) * heads || row_labels.len() != n || col_labels.len() != m {
            return Err(Error::shape("split_attention", s, &[heads, row_labels.len(), col_labels.len()]));
        }
        for head in 0..heads {
            let start = ((sample * heads) + head) * n * m;
            let weights = Tensor::new(vec![n, m], t.data()[start..start + n * m].to_vec())?;
            maps.push(AttentionMap {
                layer,
                head,
                row_labels: row_labels.to_vec(),
                col_labels: col_labels.to_vec(),
                weights,
            });
        }
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{check_store_gradients, probe_loss, Mode};
    use crate::skeleton::{PoolingLevel, Skeleton};
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn layer(skel: &Skeleton, dim: usize, heads: usize, seed: u64) -> (ParamStore, PgaLayer) {
        let mut store = ParamStore::new();
        let adj = skel.graph.normalized_adjacency().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = PgaLayer::new(
            &mut store,
            "pga",
            &adj,
            &skel.scheme,
            PgaConfig::new(dim, heads),
            &mut rng,
            &mut SiteCounter::default(),
        )
        .unwrap();
        (store, l)
    }

    /// Four joints on a path, one pooling level of two pairs.
    fn toy() -> Skeleton {
        let graph = crate::SkeletonGraph::new(
            "toy",
            4,
            vec![[0, 1], [1, 2], [2, 3]],
            0,
            vec![0, 1, 2, 3],
            (0..4).map(|i| format!("j{i}")).collect(),
        )
        .unwrap();
        let scheme =
            PoolingScheme::new(4, vec![PoolingLevel { names: vec![], groups: vec![vec![0, 1], vec![2, 3]] }]).unwrap();
        Skeleton { graph, scheme }
    }

    fn eval<T>(store: &ParamStore, f: impl FnOnce(&mut Session<'_>) -> T) -> T {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, store, Mode::Eval);
        f(&mut s)
    }

    #[test]
    fn constant_input_fuses_to_zero() {
        let skel = Skeleton::h36m16();
        let (store, l) = layer(&skel, 8, 4, 1);
        let x = Tensor::full(&[1, 16, 8], 0.7);
        let fused = eval(&store, |s| {
            let v = s.tape.leaf(&x);
            let p = l.pyramid_fuse(s, v).unwrap();
            s.tape.tensor(p.fused)
        });
        assert_eq!(fused.shape(), &[1, 28, 8]);
        assert!(fused.data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn pooled_rows_are_group_means() {
        let skel = Skeleton::h36m16();
        let (store, l) = layer(&skel, 4, 2, 2);
        let x = random(&[2, 16, 4], 3);
        let (fused, offsets) = eval(&store, |s| {
            let v = s.tape.leaf(&x);
            let p = l.pyramid.concat(s, v).unwrap();
            (s.tape.tensor(p.fused), p.offsets)
        });
        assert_eq!(offsets, vec![0, 16, 24]);
        // joint segment retained exactly
        for b in 0..2 {
            assert_eq!(&fused.data()[b * 28 * 4..b * 28 * 4 + 64], &x.data()[b * 64..(b + 1) * 64]);
        }
        for (li, level) in skel.scheme.levels().iter().enumerate() {
            for (g, members) in level.groups.iter().enumerate() {
                for c in 0..4 {
                    let mean: f64 =
                        members.iter().map(|j| x.data()[64 + j * 4 + c]).sum::<f64>() / members.len() as f64;
                    let got = fused.data()[28 * 4 + (offsets[li + 1] + g) * 4 + c];
                    assert!((got - mean).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_output_projection_is_residual() {
        let skel = Skeleton::h36m16();
        let (mut store, l) = layer(&skel, 8, 4, 4);
        store.get_mut(l.wo).data_mut().fill(0.0);
        let x = random(&[2, 16, 8], 5);
        let y = eval(&store, |s| {
            let v = s.tape.leaf(&x);
            let y = l.attention(s, v).unwrap();
            s.tape.tensor(y)
        });
        assert_eq!(y, x);
    }

    #[test]
    fn all_zero_weights_identity_block() {
        let skel = Skeleton::h36m16();
        let (mut store, l) = layer(&skel, 8, 4, 6);
        for e in store.entries_mut() {
            if e.name.ends_with(".weight") {
                e.tensor.data_mut().fill(0.0);
            }
        }
        let x = random(&[3, 16, 8], 7);
        let y = eval(&store, |s| {
            let v = s.tape.leaf(&x);
            let y = l.forward(s, v).unwrap();
            s.tape.tensor(y)
        });
        assert_eq!(y, x);
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let skel = Skeleton::h36m16();
        let (mut store, l) = layer(&skel, 8, 1, 8);
        store.get_mut(l.wq).data_mut().fill(0.0);
        let x = random(&[1, 16, 8], 9);
        let (weights, core, vprime) = eval(&store, |s| {
            s.capture_attention();
            let v = s.tape.leaf(&x);
            let core = l.attention_core(s, v).unwrap();
            let att = s.take_attention();
            // V' recomputed from the same normalized input
            let hn = l.norm_attn.forward(s, v).unwrap();
            let p = l.pyramid_fuse(s, hn).unwrap();
            let vp = l.project(s, p.fused, l.wv, l.bv).unwrap();
            (att[0].clone(), s.tape.tensor(core), s.tape.tensor(vp))
        });
        assert!(weights.data().iter().all(|w| (w - 1.0 / 28.0).abs() < 1e-15));
        // pre-projection rows are the mean of V' rows; check through W_out
        let mean: Vec<f64> = (0..8).map(|c| (0..28).map(|r| vprime.data()[r * 8 + c]).sum::<f64>() / 28.0).collect();
        let wo = store.get(l.wo);
        let bo = store.get(l.bo).data();
        let want = Tensor::new(vec![1, 8], mean).unwrap().matmul(wo).unwrap();
        for n in 0..16 {
            for c in 0..8 {
                let got = core.data()[n * 8 + c];
                assert!((got - want.data()[c] - bo[c]).abs() < 1e-12);
            }
        }
    }

    /// Naive triple loop over queries, keys and channels.
    fn brute_force(store: &ParamStore, l: &PgaLayer, skel: &Skeleton, x: &Tensor) -> Vec<f64> {
        let (n, d, h) = (skel.n_joints(), l.cfg.dim, l.cfg.heads);
        let dh = d / h;
        let ln = |rows: &[Vec<f64>], g: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    let m = r.iter().sum::<f64>() / d as f64;
                    let var = r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
                    (0..d).map(|c| (r[c] - m) / (var + 1e-5).sqrt() * g[c] + b[c]).collect()
                })
                .collect()
        };
        let lin = |rows: &[Vec<f64>], w: &Tensor, b: &[f64]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| (0..d).map(|o| b[o] + (0..d).map(|i| r[i] * w.data()[i * d + o]).sum::<f64>()).collect())
                .collect()
        };
        let get = |id: ParamId| store.get(id).data().to_vec();
        let mut out = Vec::new();
        for b in 0..x.shape()[0] {
            let rows: Vec<Vec<f64>> = (0..n).map(|j| x.data()[(b * n + j) * d..(b * n + j + 1) * d].to_vec()).collect();
            let hn = ln(&rows, &get(l.norm_attn.gamma), &get(l.norm_attn.beta));
            let mut seq = hn.clone();
            for level in skel.scheme.levels() {
                for members in &level.groups {
                    let mut m = vec![0.0; d];
                    for &j in members {
                        for c in 0..d {
                            m[c] += hn[j][c] / members.len() as f64;
                        }
                    }
                    seq.push(m);
                }
            }
            let p = ln(&seq, &get(l.fuse_norm.gamma), &get(l.fuse_norm.beta));
            let q = lin(&hn, store.get(l.wq), &get(l.bq));
            let k = lin(&p, store.get(l.wk), &get(l.bk));
            let v = lin(&p, store.get(l.wv), &get(l.bv));
            let mut concat = vec![vec![0.0; d]; n];
            for head in 0..h {
                for i in 0..n {
                    let logits: Vec<f64> = (0..p.len())
                        .map(|j| {
                            (0..dh).map(|c| q[i][head * dh + c] * k[j][head * dh + c]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                    for (j, l) in logits.iter().enumerate() {
                        let a = (l - mx).exp() / z;
                        for c in 0..dh {
                            concat[i][head * dh + c] += a * v[j][head * dh + c];
                        }
                    }
                }
            }
            let o = lin(&concat, store.get(l.wo), &get(l.bo));
            for i in 0..n {
                for c in 0..d {
                    out.push(rows[i][c] + o[i][c]);
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_loops_on_toy_graph() {
        let skel = toy();
        for (dim, heads, seed) in [(4, 1, 10), (4, 2, 11), (2, 2, 12)] {
            let (store, l) = layer(&skel, dim, heads, seed);
            let x = random(&[2, 4, dim], seed + 100);
            let y = eval(&store, |s| {
                let v = s.tape.leaf(&x);
                let y = l.attention(s, v).unwrap();
                s.tape.tensor(y)
            });
            let want = brute_force(&store, &l, &skel, &x);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let skel = Skeleton::h36m16();
        let (store, l) = layer(&skel, 8, 4, 13);
        let x = random(&[2, 16, 8], 14).reshape(&[2, 16, 8]).unwrap();
        let att = eval(&store, |s| {
            s.capture_attention();
            let v = s.tape.leaf(&x);
            l.forward(s, v).unwrap();
            s.take_attention()
        });
        assert_eq!(att[0].shape(), &[8, 16, 28]);
        for row in att[0].data().chunks(28) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn block_gradients() {
        let skel = Skeleton::h36m16();
        let (store, l) = layer(&skel, 8, 4, 15);
        let x = random(&[2, 16, 8], 16);
        let err = check_store_gradients(&store, &[x], 1e-5, |s, xs| {
            let y = l.forward(s, xs[0])?;
            probe_loss(s, y, 17)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn eval_block_is_deterministic_and_train_differs() {
        let skel = Skeleton::h36m16();
        let (store, l) = layer(&skel, 8, 4, 18);
        let x = random(&[2, 16, 8], 19);
        let run = |mode: Mode| {
            let mut tape = Tape::new();
            let mut s = Session::new(&mut tape, &store, mode);
            let v = s.tape.leaf(&x);
            let y = l.forward(&mut s, v).unwrap();
            s.tape.tensor(y)
        };
        assert_eq!(run(Mode::Eval), run(Mode::Eval));
        assert_eq!(run(Mode::Train { seed: 3 }), run(Mode::Train { seed: 3 }));
        assert_ne!(run(Mode::Train { seed: 3 }), run(Mode::Eval));
    }

    #[test]
    fn heads_must_divide_dim() {
        let skel = Skeleton::h36m16();
        let mut store = ParamStore::new();
        let adj = skel.graph.normalized_adjacency().unwrap();
        let r = PgaLayer::new(
            &mut store,
            "p",
            &adj,
            &skel.scheme,
            PgaConfig::new(10, 4),
            &mut ChaCha8Rng::seed_from_u64(0),
            &mut SiteCounter::default(),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn csv_layout() {
        let map = AttentionMap {
            layer: 0,
            head: 0,
            row_labels: vec!["a".into(), "b".into()],
            col_labels: vec!["x".into(), "y".into()],
            weights: Tensor::from_rows(&[vec![0.25, 0.75], vec![0.5, 0.5]]),
        };
        let csv = map.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "query,x,y");
        assert_eq!(lines[1], "a,2.50000000e-1,7.50000000e-1");
    }
}
