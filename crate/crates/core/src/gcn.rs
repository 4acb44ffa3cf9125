//! Graph convolutions over the skeleton and the residual Local Perception block.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{xavier, BatchNorm, ParamId, ParamStore, Session};
use crate::tensor::{Tensor, Var};

fn check_nodes(s: &Session<'_>, h: Var, n: usize, d: usize, op: &'static str) -> Result<()> {
    let sh = s.tape.shape(h);
    if sh.len() != 3 || sh[1] != n || sh[2] != d {
        return Err(Error::shape(op, sh, &[0, n, d]));
    }
    Ok(())
}

/// `Ã·H·W + b` per batch element, with a fixed propagation matrix `Ã`.
///
/// The weight is stored `d_in × d_out`; this is the row-major transpose of the
/// `W H Ã` column layout, so the two agree for symmetric `Ã`.
#[derive(Clone, Debug)]
pub struct VanillaGConv {
    pub weight: ParamId,
    pub bias: ParamId,
    adj: Arc<[f64]>,
    n: usize,
    d_in: usize,
    d_out: usize,
}

impl VanillaGConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        adj: &Tensor,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = adj.shape()[0];
        Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, 1, d_in, d_out), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true),
            adj: adj.data().into(),
            n,
            d_in,
            d_out,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }

    /// Pre-activation output; callers apply the nonlinearity.
    pub fn forward(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        check_nodes(s, h, self.n, self.d_in, "gconv_vanilla")?;
        let prev = s.tape.set_tag("gconv");
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        // mix on the narrower side; the product is associative
        let y = if self.d_out < self.d_in {
            let hw = s.tape.matmul(h, w)?;
            s.tape.node_mix(&self.adj, self.n, hw)?
        } else {
            let ah = s.tape.node_mix(&self.adj, self.n, h)?;
            s.tape.matmul(ah, w)?
        };
        let out = s.tape.add_bias(y, b);
        s.tape.set_tag(prev);
        out
    }
}

/// `T_0 … T_{terms−1}` of a matrix argument via `T_k = 2·L·T_{k−1} − T_{k−2}`.
pub fn chebyshev_basis(lap: &Tensor, terms: usize) -> Result<Vec<Tensor>> {
    let n = lap.shape()[0];
    let mut basis = Vec::with_capacity(terms);
    if terms >= 1 {
        basis.push(Tensor::eye(n));
    }
    if terms >= 2 {
        basis.push(lap.clone());
    }
    for k in 2..terms {
        let mut next = lap.matmul(&basis[k - 1])?;
        for (v, prev) in next.data_mut().iter_mut().zip(basis[k - 2].data()) {
            *v = 2.0 * *v - prev;
        }
        basis.push(next);
    }
    Ok(basis)
}

/// `Σ_{k<terms} T_k(L̃)·H·W_k + b`.
///
/// The weights `W_0 … W_{terms−1}` are stacked row-wise in one
/// `[terms·d_in, d_out]` tensor.
#[derive(Clone, Debug)]
pub struct ChebConv {
    pub weight: ParamId,
    pub bias: ParamId,
    polys: Vec<Arc<[f64]>>,
    n: usize,
    terms: usize,
    d_in: usize,
    d_out: usize,
}

impl ChebConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        lap: &Tensor,
        terms: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if terms == 0 {
            return Err(Error::Param("Chebyshev convolution needs at least one term".into()));
        }
        let polys = chebyshev_basis(lap, terms)?.into_iter().skip(1).map(|t| Arc::from(t.into_data())).collect();
        Ok(Self {
            weight: store.add(format!("{name}.weight"), xavier(rng, terms, d_in, d_out), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true),
            polys,
            n: lap.shape()[0],
            terms,
            d_in,
            d_out,
        })
    }

    pub fn terms(&self) -> usize {
        self.terms
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_in, self.d_out)
    }

    pub fn forward(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        check_nodes(s, h, self.n, self.d_in, "gconv_cheb")?;
        let prev = s.tape.set_tag("cheb");
        let mut parts = vec![h];
        for t in &self.polys {
            parts.push(s.tape.node_mix(t, self.n, h)?);
        }
        let stacked = if parts.len() == 1 { h } else { s.tape.concat(&parts, 2)? };
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.tape.matmul(stacked, w)?;
        let out = s.tape.add_bias(y, b);
        s.tape.set_tag(prev);
        out
    }
}

/// `h + ReLU(BN(Cheb(ReLU(BN(Cheb(h))))))`.
#[derive(Clone, Debug)]
pub struct LocalPerception {
    pub conv1: ChebConv,
    pub bn1: BatchNorm,
    pub conv2: ChebConv,
    pub bn2: BatchNorm,
}

impl LocalPerception {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        lap: &Tensor,
        terms: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv1: ChebConv::new(store, &format!("{name}.conv1"), lap, terms, dim, dim, rng)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), dim),
            conv2: ChebConv::new(store, &format!("{name}.conv2"), lap, terms, dim, dim, rng)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), dim),
        })
    }

    pub fn forward(&self, s: &mut Session<'_>, h: Var) -> Result<Var> {
        let x = self.conv1.forward(s, h)?;
        let x = self.bn1.forward(s, x)?;
        let x = s.tape.relu(x);
        let x = self.conv2.forward(s, x)?;
        let x = self.bn2.forward(s, x)?;
        let x = s.tape.relu(x);
        s.tape.add(h, x)
    }
}
