use crate::points::PointSet;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Collocation points and how they were drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub points: PointSet,
    pub sampler: Sampler,
    pub seed: Option<u64>,
}

impl CollocationSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Sobol,
    Lhs,
}

/// Primitive polynomial data (degree `s`, coefficients `a`, initial direction
/// integers `m`) for dimensions 2 and 3, after the dimension-1 van der Corput
/// sequence.
const DIRECTION_DATA: [(u32, u32, [u32; 2]); 2] = [(1, 0, [1, 0]), (2, 1, [1, 3])];
const BITS: usize = 32;

fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = 1 << (31 - i);
        }
        return v;
    }
    let (s, a, m) = DIRECTION_DATA[dim - 1];
    let s = s as usize;
    for i in 0..s {
        v[i] = m[i] << (31 - i);
    }
    for i in s..BITS {
        let mut x = v[i - s] ^ (v[i - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                x ^= v[i - k];
            }
        }
        v[i] = x;
    }
    v
}

/// First `n` points of the Sobol sequence (Gray-code order) after dropping
/// `skip` leading points, mapped affinely onto `bounds`. Point 0 is the
/// origin, so `skip = 1` starts at `0.5`.
pub fn sobol_points(n: usize, bounds: &[(f64, f64)], skip: usize) -> CollocationSet {
    let dims = bounds.len();
    assert!((1..=3).contains(&dims), "Sobol sampler supports 1 to 3 dimensions");
    let dirs: Vec<[u32; BITS]> = (0..dims).map(direction_numbers).collect();
    let mut x = vec![0u32; dims];
    let mut coords = Vec::with_capacity(n * dims);
    let scale = 1.0 / (1u64 << 32) as f64;
    for i in 0..(n + skip) {
        if i > 0 {
            // index i differs from i-1 in the lowest zero bit of i-1
            let c = (!(i - 1)).trailing_zeros() as usize;
            for d in 0..dims {
                x[d] ^= dirs[d][c];
            }
        }
        if i >= skip {
            for d in 0..dims {
                let (lo, hi) = bounds[d];
                coords.push(lo + (hi - lo) * x[d] as f64 * scale);
            }
        }
    }
    CollocationSet {
        points: PointSet::new(dims, coords),
        sampler: Sampler::Sobol,
        seed: None,
    }
}

/// Latin hypercube: each axis is cut into `n` equal bins and every bin holds
/// exactly one point, uniformly placed inside it.
pub fn lhs_points(n: usize, bounds: &[(f64, f64)], seed: u64) -> CollocationSet {
    let dims = bounds.len();
    assert!((1..=3).contains(&dims), "LHS sampler supports 1 to 3 dimensions");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = vec![0.0; n * dims];
    for (d, &(lo, hi)) in bounds.iter().enumerate() {
        let mut bins: Vec<usize> = (0..n).collect();
        bins.shuffle(&mut rng);
        let w = (hi - lo) / n as f64;
        for (i, &b) in bins.iter().enumerate() {
            let u: f64 = rng.gen();
            // stay strictly inside the bin even after rounding
            coords[i * dims + d] = (lo + w * (b as f64 + u)).min(lo + w * (b as f64 + 1.0)).min(hi);
        }
    }
    CollocationSet {
        points: PointSet::new(dims, coords),
        sampler: Sampler::Lhs,
        seed: Some(seed),
    }
}
