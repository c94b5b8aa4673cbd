//! Sets of multivariate Taylor coefficients tracked by the engine.

use std::collections::HashMap;

/// Highest total derivative order the engine supports.
pub const MAX_ORDER: u32 = 5;

pub type MultiIndex = Vec<u32>;

pub fn total_order(alpha: &[u32]) -> u32 {
    alpha.iter().sum()
}

/// `alpha! = prod(alpha_i!)`, the factor between a Taylor coefficient and the
/// corresponding partial derivative.
pub fn multi_factorial(alpha: &[u32]) -> f64 {
    alpha
        .iter()
        .map(|&k| (1..=k).map(f64::from).product::<f64>())
        .product()
}

/// A downward-closed set of multi-indices over `dim` input coordinates together
/// with the convolution tables needed to multiply truncated Taylor polynomials
/// restricted to that set.
///
/// Index 0 is always the zero multi-index (the value itself); entries are sorted
/// by total order so every recurrence can run front to back.
#[derive(Debug, Clone)]
pub struct DerivStructure {
    dim: usize,
    indices: Vec<MultiIndex>,
    degree: Vec<u32>,
    lookup: HashMap<MultiIndex, usize>,
    /// For each alpha: all ordered pairs (beta, gamma) with beta + gamma = alpha.
    products: Vec<Vec<(usize, usize)>>,
    /// For each alpha != 0: pairs (beta, gamma) with beta != 0 and the weight
    /// |beta| / |alpha|, used by the activation recurrences.
    euler: Vec<Vec<(usize, usize, f64)>>,
    /// Index ranges of equal total order, ascending.
    groups: Vec<std::ops::Range<usize>>,
}

impl DerivStructure {
    /// Smallest downward-closed set containing every requested multi-index.
    pub fn closure(dim: usize, requested: &[MultiIndex]) -> DerivStructure {
        let mut set: Vec<MultiIndex> = vec![vec![0; dim]];
        let mut seen: std::collections::HashSet<MultiIndex> = set.iter().cloned().collect();
        let mut stack: Vec<MultiIndex> = requested.to_vec();
        while let Some(alpha) = stack.pop() {
            assert_eq!(alpha.len(), dim, "multi-index dimension mismatch");
            if !seen.insert(alpha.clone()) {
                continue;
            }
            for i in 0..dim {
                if alpha[i] > 0 {
                    let mut lower = alpha.clone();
                    lower[i] -= 1;
                    stack.push(lower);
                }
            }
            set.push(alpha);
        }
        set.sort_by(|a, b| total_order(a).cmp(&total_order(b)).then_with(|| b.cmp(a)));
        Self::from_sorted(dim, set)
    }

    /// Pure derivatives along one coordinate up to `order`.
    pub fn univariate(dim: usize, direction: usize, order: u32) -> DerivStructure {
        let mut alpha = vec![0; dim];
        alpha[direction] = order;
        Self::closure(dim, &[alpha])
    }

    fn from_sorted(dim: usize, indices: Vec<MultiIndex>) -> DerivStructure {
        let lookup: HashMap<MultiIndex, usize> = indices
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        let degree: Vec<u32> = indices.iter().map(|a| total_order(a)).collect();
        let mut products = Vec::with_capacity(indices.len());
        let mut euler = Vec::with_capacity(indices.len());
        for alpha in &indices {
            let mut pairs = Vec::new();
            let mut weighted = Vec::new();
            let k = total_order(alpha);
            for (ib, beta) in indices.iter().enumerate() {
                if beta.iter().zip(alpha).any(|(b, a)| b > a) {
                    continue;
                }
                let gamma: MultiIndex = alpha.iter().zip(beta).map(|(a, b)| a - b).collect();
                let ig = lookup[&gamma];
                pairs.push((ib, ig));
                let kb = total_order(beta);
                if kb > 0 && k > 0 {
                    weighted.push((ib, ig, f64::from(kb) / f64::from(k)));
                }
            }
            products.push(pairs);
            euler.push(weighted);
        }
        let mut starts = vec![0];
        for i in 1..indices.len() {
            if degree[i] != degree[i - 1] {
                starts.push(i);
            }
        }
        starts.push(indices.len());
        let groups = starts.windows(2).map(|w| w[0]..w[1]).collect();
        DerivStructure {
            dim,
            indices,
            degree,
            lookup,
            products,
            euler,
            groups,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn max_order(&self) -> u32 {
        *self.degree.last().unwrap_or(&0)
    }

    pub fn index_of(&self, alpha: &[u32]) -> Option<usize> {
        self.lookup.get(alpha).copied()
    }

    pub fn multi_index(&self, i: usize) -> &[u32] {
        &self.indices[i]
    }

    pub(crate) fn products(&self, i: usize) -> &[(usize, usize)] {
        &self.products[i]
    }

    pub(crate) fn euler(&self, i: usize) -> &[(usize, usize, f64)] {
        &self.euler[i]
    }

    /// Index ranges of equal total order, ascending. The first range is `0..1`.
    pub(crate) fn order_groups(&self) -> &[std::ops::Range<usize>] {
        &self.groups
    }
}
