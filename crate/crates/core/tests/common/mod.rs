//! Independent reference implementations shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use pgformer::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const JOINTS: usize = 16;

/// Random pose pair in millimeters, `gt` around a random camera offset and
/// `pred` perturbed by a per-pair noise level.
pub fn pose_pair(seed: u64, batch: usize) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = rng.random_range(1.0..200.0);
    let mut gt = Vec::with_capacity(batch * JOINTS * 3);
    let mut pred = Vec::with_capacity(batch * JOINTS * 3);
    for _ in 0..batch {
        let offset: [f64; 3] =
            [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0), rng.random_range(3000.0..6000.0)];
        for _ in 0..JOINTS {
            for c in 0..3 {
                let g = offset[c] + rng.random_range(-900.0..900.0);
                gt.push(g);
                pred.push(g + rng.random_range(-noise..noise));
            }
        }
    }
    let shape = [batch, JOINTS, 3];
    (Tensor::new(shape.to_vec(), pred).unwrap(), Tensor::new(shape.to_vec(), gt).unwrap())
}

fn at(t: &Tensor, b: usize, j: usize) -> [f64; 3] {
    let n = t.shape()[1];
    let i = (b * n + j) * 3;
    [t.data()[i], t.data()[i + 1], t.data()[i + 2]]
}

/// Root-aligned per-joint errors by explicit loops.
pub fn brute_errors(pred: &Tensor, gt: &Tensor, root: usize) -> Vec<Vec<f64>> {
    let (b, n) = (gt.shape()[0], gt.shape()[1]);
    let mut out = vec![vec![0.0; n]; b];
    for s in 0..b {
        let (pr, gr) = (at(pred, s, root), at(gt, s, root));
        for j in 0..n {
            let (p, g) = (at(pred, s, j), at(gt, s, j));
            let mut acc = 0.0;
            for c in 0..3 {
                let d = (p[c] - pr[c]) - (g[c] - gr[c]);
                acc += d * d;
            }
            out[s][j] = acc.sqrt();
        }
    }
    out
}

pub fn brute_mpjpe(pred: &Tensor, gt: &Tensor, root: usize) -> f64 {
    let errs = brute_errors(pred, gt, root);
    let mut sum = 0.0;
    let mut count = 0usize;
    for row in &errs {
        for e in row {
            sum += e;
            count += 1;
        }
    }
    sum / count as f64
}

/// Percent of joints under `threshold`; a perfect joint always counts.
pub fn brute_pck(pred: &Tensor, gt: &Tensor, root: usize, threshold: f64) -> f64 {
    let errs = brute_errors(pred, gt, root);
    let mut hit = 0usize;
    let mut count = 0usize;
    for row in &errs {
        for &e in row {
            count += 1;
            if e == 0.0 || e < threshold {
                hit += 1;
            }
        }
    }
    100.0 * hit as f64 / count as f64
}

/// Mean of the PCK fraction at 0, 5, ..., 150 mm.
pub fn brute_auc(pred: &Tensor, gt: &Tensor, root: usize) -> f64 {
    let mut total = 0.0;
    let mut t = 0;
    while t <= 150 {
        total += brute_pck(pred, gt, root, t as f64) / 100.0;
        t += 5;
    }
    total / 31.0
}

/// Same pose with every sample shifted by its own random translation.
pub fn translate(t: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, n) = (t.shape()[0], t.shape()[1]);
    let shifts: Vec<[f64; 3]> = (0..b).map(|_| std::array::from_fn(|_| rng.random_range(-2000.0..2000.0))).collect();
    Tensor::from_fn(t.shape(), |i| t.data()[i] + shifts[i / (n * 3)][i % 3])
}

pub const DRAWS: usize = 10_000;

/// Per-coordinate sample mean and unbiased variance of `draw` over DRAWS calls.
pub fn moments(n: usize, mut draw: impl FnMut() -> Tensor) -> (Vec<f64>, Vec<f64>) {
    let samples: Vec<Tensor> = (0..DRAWS).map(|_| draw()).collect();
    let mut mean = vec![0.0; n];
    for s in &samples {
        for (acc, v) in mean.iter_mut().zip(s.data()) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= DRAWS as f64);
    let mut var = vec![0.0; n];
    for s in &samples {
        for ((acc, v), m) in var.iter_mut().zip(s.data()).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= (DRAWS - 1) as f64);
    (mean, var)
}
