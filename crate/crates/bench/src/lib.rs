//! Seeded inputs shared by the benchmarks.

use pitune_core::geometry::CoordinateSet;
use pitune_core::moe::MoeLayer;
use pitune_core::nn::{AttentionLayerParams, FfnParams};
use pitune_core::{KernelBank, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random walk with 3.8 Å steps, roughly the alpha-carbon spacing.
pub fn chain(n: usize, seed: u64) -> CoordinateSet {
    let mut r = rng(seed);
    let mut p = [0.0f64; 3];
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        pts.push(p);
        let v: [f64; 3] = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-9);
        for a in 0..3 {
            p[a] += 3.8 * v[a] / norm;
        }
    }
    CoordinateSet::new(pts).expect("finite coordinates")
}

pub fn bank(k: usize, d: usize, seed: u64) -> KernelBank {
    KernelBank::init(k, d, &mut rng(seed))
}

pub fn attention(d: usize, heads: usize, seed: u64) -> AttentionLayerParams {
    let mut r = rng(seed);
    let std = 1.0 / (d as f64).sqrt();
    AttentionLayerParams {
        w_q: Mat::randn(d, d, std, &mut r),
        w_k: Mat::randn(d, d, std, &mut r),
        w_v: Mat::randn(d, d, std, &mut r),
        heads,
    }
}

pub fn moe_layer(d: usize, n_e: usize, k: usize, seed: u64) -> MoeLayer {
    let mut r = rng(seed);
    MoeLayer {
        experts: (0..n_e).map(|_| FfnParams::init(d, 4 * d, &mut r)).collect(),
        gate: Mat::randn(d, n_e, 0.02, &mut r),
        k,
    }
}
