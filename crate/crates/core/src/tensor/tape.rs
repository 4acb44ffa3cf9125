use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch norm call.
///
/// `var` is the unbiased estimate, ready for a running-average update.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    NodeMix { mat: Arc<[f64]>, rows: usize, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    Relu(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64>, train: bool },
    Mask { x: Var, mask: Vec<f64> },
    Concat { inputs: Vec<Var>, axis: usize },
    Heads { x: Var, heads: usize, split: bool },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
    finite: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the tape is always topologically
/// sorted. One tape belongs to one thread; weights are copied in as leaves.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: BTreeMap<&'static str, u64>,
    tag: &'static str,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), macs: BTreeMap::new(), tag: "untagged" }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label under which subsequent matrix products are counted.
    pub fn set_tag(&mut self, tag: &'static str) -> &'static str {
        std::mem::replace(&mut self.tag, tag)
    }

    /// Multiply-accumulate counts of every product kernel, keyed by tag.
    pub fn macs_by_tag(&self) -> &BTreeMap<&'static str, u64> {
        &self.macs
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    fn count(&mut self, macs: usize) {
        *self.macs.entry(self.tag).or_insert(0) += macs as u64;
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let finite = if cfg!(debug_assertions) {
            let ok = data.iter().all(|v| v.is_finite());
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].finite);
            assert!(ok || !inputs_finite, "kernel produced non-finite values from finite inputs");
            ok
        } else {
            true
        };
        self.nodes.push(Node { shape, data, op, requires_grad, finite, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_from(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape("constant", shape, &[data.len()]));
        }
        Ok(self.leaf_from(shape.to_vec(), data, false))
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        let finite = data.iter().all(|v| v.is_finite());
        self.nodes.push(Node { shape, data, op: Op::Leaf, requires_grad, finite, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape")
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a leaf, or zeros when no gradient reached it.
    pub fn grad_or_zero(&self, v: Var) -> Vec<f64> {
        self.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.nodes[v.0].data.len()])
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    // ---- products ----

    /// `a[.., k] · b[k, n]`, leading dimensions of `a` flattened.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = numel(&sa) / k.max(1);
        let mut out = vec![0.0; rows * n];
        gemm(rows, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out, false);
        self.count(rows * k * n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(shape, out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product `a[B,m,k] · b[B,k,n]`, or `a · bᵀ` for `b[B,n,k]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("bmm", &sa, &sb);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n, b_strides) = if trans_b { (sb[2], sb[1], (1, sb[2])) } else { (sb[1], sb[2], (sb[2], 1)) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    (k, 1),
                    &bv[i * k * n..],
                    b_strides,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.count(batch * m * k * n);
        Ok(self.push(vec![batch, m, n], out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// Mixes nodes with a constant matrix: `out[b] = mat · x[b]` for `x[B,N,D]`.
    pub fn node_mix(&mut self, mat: &Arc<[f64]>, rows: usize, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || rows == 0 || mat.len() != rows * sx[1] {
            return Err(Error::shape("node_mix", &[rows, mat.len() / rows.max(1)], &sx));
        }
        let (batch, n, d) = (sx[0], sx[1], sx[2]);
        let mut out = vec![0.0; batch * rows * d];
        {
            let xv = self.value(x);
            for b in 0..batch {
                gemm(
                    rows,
                    n,
                    d,
                    mat,
                    (n, 1),
                    &xv[b * n * d..],
                    (d, 1),
                    &mut out[b * rows * d..(b + 1) * rows * d],
                    false,
                );
            }
        }
        self.count(batch * rows * n * d);
        Ok(self.push(vec![batch, rows, d], out, Op::NodeMix { mat: Arc::clone(mat), rows, x }, &[x]))
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a, b])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sb.is_empty() || sb.len() > sx.len() || sb[..] != sx[sx.len() - sb.len()..] {
            return Err(Error::shape("add_bias", &sx, &sb));
        }
        let c: usize = sb.iter().product();
        let bv = self.value(bias);
        let data = self.value(x).iter().enumerate().map(|(i, v)| v + bv[i % c]).collect();
        Ok(self.push(sx, data, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- normalization and attention kernels ----

    /// Softmax over the last dimension, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        let mut data = self.value(x).to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(shape, data, Op::Softmax(x), &[x]))
    }

    /// Normalizes each row over the last dimension, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::Contract("layer_norm of a scalar".into()))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Per-channel normalization over every row of `x`.
    ///
    /// With `running = None` batch statistics are used and returned; otherwise
    /// the supplied (mean, variance) pair is applied as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::Contract("batch_norm of a scalar".into()))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.len() / c.max(1);
        if rows == 0 {
            return Err(Error::Empty("batch_norm over an empty batch".into()));
        }
        let train = running.is_none();
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![0.0; c];
                for row in xv.chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in xv.chunks(c) {
                    for j in 0..c {
                        var[j] += (row[j] - mean[j]).powi(2);
                    }
                }
                let unbiased = var.iter().map(|v| if rows > 1 { v / (rows - 1) as f64 } else { 0.0 }).collect();
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, v) in xv.iter().enumerate() {
            let j = i % c;
            let h = (v - mean[j]) * rstd[j];
            xhat[i] = h;
            out[i] = h * g[j] + b[j];
        }
        let y = self.push(shape, out, Op::BatchNorm { x, gamma, beta, xhat, rstd, train }, &[x, gamma, beta]);
        Ok((y, stats))
    }

    /// Inverted dropout with a mask drawn from a ChaCha stream seeded by `seed`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.value(x).len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::Mask { x, mask }, &[x]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::Empty("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let same_rest =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, data, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// `[B, N, h·d] → [B·h, N, d]`, one slab per attention head.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::shape("split_heads", &s, &[heads]));
        }
        let (b, n, dh) = (s[0], s[1], s[2] / heads);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ni in 0..n {
                for h in 0..heads {
                    let src = (bi * n + ni) * s[2] + h * dh;
                    let dst = ((bi * heads + h) * n + ni) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        Ok(self.push(vec![b * heads, n, dh], out, Op::Heads { x, heads, split: true }, &[x]))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::shape("merge_heads", &s, &[heads]));
        }
        let (b, n, dh) = (s[0] / heads, s[1], s[2]);
        let d = dh * heads;
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ni in 0..n {
                for h in 0..heads {
                    let dst = (bi * n + ni) * d + h * dh;
                    let src = ((bi * heads + h) * n + ni) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        Ok(self.push(vec![b, n, d], out, Op::Heads { x, heads, split: false }, &[x]))
    }

    // ---- reverse pass ----

    /// Back-propagates from a scalar `loss` into every reachable leaf.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.nodes[v.0].data.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (k, n) = (self.shape(*b)[0], self.shape(*b)[1]);
                let rows = g.len() / n.max(1);
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let da = self.slot(grads, *a);
                    gemm(rows, n, k, g, (n, 1), bv, (1, n), da, true);
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let db = self.slot(grads, *b);
                    gemm(k, rows, n, av, (1, k), g, (n, 1), db, true);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let da = self.slot(grads, *a);
                    let bt = if *trans_b { (k, 1) } else { (1, n) };
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..],
                            (n, 1),
                            &bv[t * k * n..],
                            bt,
                            &mut da[t * m * k..(t + 1) * m * k],
                            true,
                        );
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let db = self.slot(grads, *b);
                    for t in 0..batch {
                        let dst = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, &g[t * m * n..], (1, n), &av[t * m * k..], (k, 1), dst, true);
                        } else {
                            gemm(k, m, n, &av[t * m * k..], (1, k), &g[t * m * n..], (n, 1), dst, true);
                        }
                    }
                }
            }
            Op::NodeMix { mat, rows, x } => {
                if self.wants(*x) {
                    let sx = self.shape(*x);
                    let (batch, n, d) = (sx[0], sx[1], sx[2]);
                    let dx = self.slot(grads, *x);
                    for t in 0..batch {
                        gemm(
                            n,
                            *rows,
                            d,
                            mat,
                            (1, n),
                            &g[t * rows * d..],
                            (d, 1),
                            &mut dx[t * n * d..(t + 1) * n * d],
                            true,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(self.slot(grads, v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(self.slot(grads, *a), g);
                }
                if self.wants(*b) {
                    let db = self.slot(grads, *b);
                    db.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    let da = self.slot(grads, *a);
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    let db = self.slot(grads, *b);
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    add_into(self.slot(grads, *x), g);
                }
                if self.wants(*bias) {
                    let db = self.slot(grads, *bias);
                    let c = db.len();
                    for (j, v) in g.iter().enumerate() {
                        db[j % c] += v;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let dx = self.slot(grads, *x);
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            dx[j] += g[j];
                        }
                    }
                }
            }
            Op::Abs(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let dx = self.slot(grads, *x);
                    for j in 0..g.len() {
                        let s = if xv[j] > 0.0 {
                            1.0
                        } else if xv[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        dx[j] += s * g[j];
                    }
                }
            }
            Op::Square(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let dx = self.slot(grads, *x);
                    for j in 0..g.len() {
                        dx[j] += 2.0 * xv[j] * g[j];
                    }
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = &node.data;
                    let c = *node.shape.last().unwrap();
                    let dx = self.slot(grads, *x);
                    for r in 0..y.len() / c {
                        let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = *node.shape.last().unwrap();
                let rows = g.len() / c;
                if self.wants(*gamma) {
                    let dg = self.slot(grads, *gamma);
                    for (j, v) in g.iter().enumerate() {
                        dg[j % c] += v * xhat[j];
                    }
                }
                if self.wants(*beta) {
                    let db = self.slot(grads, *beta);
                    for (j, v) in g.iter().enumerate() {
                        db[j % c] += v;
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma);
                    let dx = self.slot(grads, *x);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let base = r * c;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[base + j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[base + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            dx[base + j] += rstd[r] * (dxhat[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, rstd, train } => {
                let c = *node.shape.last().unwrap();
                let rows = g.len() / c;
                if self.wants(*gamma) {
                    let dg = self.slot(grads, *gamma);
                    for (j, v) in g.iter().enumerate() {
                        dg[j % c] += v * xhat[j];
                    }
                }
                if self.wants(*beta) {
                    let db = self.slot(grads, *beta);
                    for (j, v) in g.iter().enumerate() {
                        db[j % c] += v;
                    }
                }
                if self.wants(*x) {
                    let gam = self.value(*gamma);
                    let dx = self.slot(grads, *x);
                    if *train {
                        let mut m1 = vec![0.0; c];
                        let mut m2 = vec![0.0; c];
                        for (j, v) in g.iter().enumerate() {
                            let ch = j % c;
                            let dh = v * gam[ch];
                            m1[ch] += dh;
                            m2[ch] += dh * xhat[j];
                        }
                        for ch in 0..c {
                            m1[ch] /= rows as f64;
                            m2[ch] /= rows as f64;
                        }
                        for (j, v) in g.iter().enumerate() {
                            let ch = j % c;
                            dx[j] += rstd[ch] * (v * gam[ch] - m1[ch] - xhat[j] * m2[ch]);
                        }
                    } else {
                        for (j, v) in g.iter().enumerate() {
                            let ch = j % c;
                            dx[j] += v * gam[ch] * rstd[ch];
                        }
                    }
                }
            }
            Op::Mask { x, mask } => {
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    for j in 0..g.len() {
                        dx[j] += g[j] * mask[j];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if self.wants(*v) {
                        let dv = self.slot(grads, *v);
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut dv[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Heads { x, heads, split } => {
                if self.wants(*x) {
                    let s = self.shape(*x).to_vec();
                    let dx = self.slot(grads, *x);
                    let heads = *heads;
                    if *split {
                        let (b, n, dh) = (s[0], s[1], s[2] / heads);
                        for bi in 0..b {
                            for ni in 0..n {
                                for h in 0..heads {
                                    let xs = (bi * n + ni) * s[2] + h * dh;
                                    let os = ((bi * heads + h) * n + ni) * dh;
                                    add_into(&mut dx[xs..xs + dh], &g[os..os + dh]);
                                }
                            }
                        }
                    } else {
                        let (b, n, dh) = (s[0] / heads, s[1], s[2]);
                        let d = dh * heads;
                        for bi in 0..b {
                            for ni in 0..n {
                                for h in 0..heads {
                                    let os = (bi * n + ni) * d + h * dh;
                                    let xs = ((bi * heads + h) * n + ni) * dh;
                                    add_into(&mut dx[xs..xs + dh], &g[os..os + dh]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, shape: &[usize], data: &[f64], rg: bool) -> Var {
        t.leaf_from(shape.to_vec(), data.to_vec(), rg)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[0.0, 0.0], false);
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[-1.0, 2.0], false);
        let y = t.relu(x);
        assert_eq!(t.value(y), &[0.0, 2.0]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 4], &[3.0; 4], false);
        let g = leaf(&mut t, &[4], &[1.0; 4], false);
        let b = leaf(&mut t, &[4], &[0.0; 4], false);
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_loss_gradient() {
        // loss = sum(W·x) with x fixed → dL/dW[i][j] = x[j]
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3, 1], &[1.0, 2.0, 3.0], false);
        let w = leaf(&mut t, &[2, 3], &[0.5; 6], true);
        let y = t.matmul(w, x).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_accumulates_and_rejects_vectors() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, -2.0], true);
        let s = t.square(x);
        let l = t.sum(s);
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, -8.0]);
        assert!(matches!(t.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn detached_leaf_has_zero_grad() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2], &[1.0, 2.0], true);
        let b = leaf(&mut t, &[2], &[3.0, 4.0], true);
        let l = t.sum(a);
        t.backward(l).unwrap();
        assert_eq!(t.grad_or_zero(b), vec![0.0, 0.0]);
    }

    #[test]
    fn dropout_validation() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[4], &[1.0; 4], false);
        assert!(matches!(t.dropout(x, 1.0, 0), Err(Error::Param(_))));
        assert_eq!(t.dropout(x, 0.0, 0).unwrap(), x);
        let y = t.dropout(x, 0.5, 7).unwrap();
        assert!(t.value(y).iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn batch_norm_empty_batch() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[0, 2], &[], false);
        let g = leaf(&mut t, &[2], &[1.0; 2], false);
        let b = leaf(&mut t, &[2], &[0.0; 2], false);
        assert!(matches!(t.batch_norm(x, g, b, 1e-5, None), Err(Error::Empty(_))));
    }

    #[test]
    fn heads_round_trip() {
        let mut t = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = leaf(&mut t, &[2, 3, 4], &data, false);
        let s = t.split_heads(x, 2).unwrap();
        assert_eq!(t.shape(s), &[4, 3, 2]);
        // batch 0, head 1, node 0 holds channels 2..4 of node 0
        assert_eq!(&t.value(s)[6..8], &[2.0, 3.0]);
        let m = t.merge_heads(s, 2).unwrap();
        assert_eq!(t.value(m), &data[..]);
    }

    #[test]
    fn concat_middle_axis() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 1, 2], &[1.0, 2.0, 3.0, 4.0], false);
        let b = leaf(&mut t, &[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0], false);
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.shape(c), &[2, 3, 2]);
        assert_eq!(t.value(c), &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn mac_counter_tags() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 3], &[1.0; 6], false);
        let b = leaf(&mut t, &[3, 4], &[1.0; 12], false);
        t.set_tag("proj");
        t.matmul(a, b).unwrap();
        assert_eq!(t.macs_by_tag()["proj"], 24);
        assert_eq!(t.total_macs(), 24);
    }
}
