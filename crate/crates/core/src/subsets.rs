//! Uniform S-subsets of `{0, .., A-1}` drawn without replacement, plus
//! exhaustive enumeration for exact expectations.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::RngStream;

/// Largest number of subsets `enumerate_subsets` will materialize.
pub const MAX_ENUMERATION: u64 = 1_000_000;

/// A size-S subset of the A mixture components, stored as sorted indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubsetDraw {
    indices: Vec<usize>,
    a: usize,
}

impl SubsetDraw {
    pub fn new(mut indices: Vec<usize>, a: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.is_empty() || indices.len() > a {
            return Err(contract(format!(
                "subset size {} outside [1, {a}]",
                indices.len()
            )));
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(contract("subset indices must be distinct"));
        }
        if indices[indices.len() - 1] >= a {
            return Err(contract(format!("subset index out of range for A = {a}")));
        }
        Ok(Self { indices, a })
    }

    /// The full set `{0, .., A-1}`.
    pub fn full(a: usize) -> Self {
        Self { indices: (0..a).collect(), a }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn a(&self) -> usize {
        self.a
    }

    pub fn s(&self) -> usize {
        self.indices.len()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.indices.binary_search(&k).is_ok()
    }

    /// Indicator view `H ∈ {0,1}^A`.
    pub fn indicator(&self) -> Vec<u8> {
        let mut h = vec![0u8; self.a];
        for &i in &self.indices {
            h[i] = 1;
        }
        h
    }
}

fn check_sizes(a: usize, s: usize) -> Result<()> {
    if s < 1 || s > a {
        return Err(contract(format!("need 1 <= S <= A, got S = {s}, A = {a}")));
    }
    Ok(())
}

/// Draws one subset uniformly from all `C(A, S)` subsets via a partial
/// Fisher–Yates shuffle.
pub fn sample_subset(a: usize, s: usize, rng: &mut RngStream) -> Result<SubsetDraw> {
    check_sizes(a, s)?;
    if s == a {
        return Ok(SubsetDraw::full(a));
    }
    let mut pool: Vec<usize> = (0..a).collect();
    for i in 0..s {
        let j = i + rng.below(a - i);
        pool.swap(i, j);
    }
    pool.truncate(s);
    pool.sort_unstable();
    Ok(SubsetDraw { indices: pool, a })
}

/// `C(n, k)` as u64, `None` on overflow.
pub fn binomial(n: u64, k: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return None;
        }
    }
    Some(acc as u64)
}

/// Every S-subset of `{0, .., A-1}` exactly once, in lexicographic order.
pub fn enumerate_subsets(a: usize, s: usize) -> Result<Vec<SubsetDraw>> {
    check_sizes(a, s)?;
    let count = binomial(a as u64, s as u64)
        .filter(|&c| c <= MAX_ENUMERATION)
        .ok_or_else(|| {
            Error::OracleScale(format!("C({a}, {s}) exceeds {MAX_ENUMERATION} subsets"))
        })?;
    let mut out = Vec::with_capacity(count as usize);
    let mut cur: Vec<usize> = (0..s).collect();
    loop {
        out.push(SubsetDraw { indices: cur.clone(), a });
        // advance to the next combination
        let mut i = s;
        while i > 0 && cur[i - 1] == a - s + (i - 1) {
            i -= 1;
        }
        if i == 0 {
            break;
        }
        cur[i - 1] += 1;
        for j in i..s {
            cur[j] = cur[j - 1] + 1;
        }
    }
    debug_assert_eq!(out.len() as u64, count);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_enumerations() {
        let e = enumerate_subsets(3, 2).unwrap();
        let idx: Vec<Vec<usize>> = e.iter().map(|d| d.indices().to_vec()).collect();
        assert_eq!(idx, vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert_eq!(enumerate_subsets(4, 1).unwrap().len(), 4);
        assert_eq!(enumerate_subsets(10, 4).unwrap().len(), 210);
        assert_eq!(enumerate_subsets(5, 5).unwrap(), vec![SubsetDraw::full(5)]);
    }

    #[test]
    fn enumeration_scale_guard() {
        assert!(matches!(enumerate_subsets(40, 20), Err(Error::OracleScale(_))));
        assert!(enumerate_subsets(3, 4).is_err());
        assert!(enumerate_subsets(3, 0).is_err());
    }

    #[test]
    fn counting_identity() {
        for a in 1..=8usize {
            for s in 1..=a {
                let subsets = enumerate_subsets(a, s).unwrap();
                let expect = binomial(a as u64 - 1, s as u64 - 1).unwrap() as usize;
                for k in 0..a {
                    assert_eq!(subsets.iter().filter(|d| d.contains(k)).count(), expect);
                }
            }
        }
    }

    #[test]
    fn full_subset_is_forced() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..10 {
            assert_eq!(sample_subset(4, 4, &mut rng).unwrap(), SubsetDraw::full(4));
        }
    }

    #[test]
    fn bad_sizes_rejected() {
        let mut rng = RngStream::new(3, 0);
        assert!(sample_subset(3, 4, &mut rng).is_err());
        assert!(sample_subset(3, 0, &mut rng).is_err());
        assert!(SubsetDraw::new(vec![1, 1], 3).is_err());
        assert!(SubsetDraw::new(vec![3], 3).is_err());
    }

    #[test]
    fn uniformity_chi_square() {
        // A=3, S=2: 30,000 draws over 3 cells, 2 dof; p > 0.001 ⇔ χ² < 13.816.
        let mut rng = RngStream::new(99, 1);
        let mut counts = [0usize; 3];
        let all = enumerate_subsets(3, 2).unwrap();
        for _ in 0..30_000 {
            let d = sample_subset(3, 2, &mut rng).unwrap();
            counts[all.iter().position(|x| *x == d).unwrap()] += 1;
        }
        let expected = 10_000.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 13.816, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn inclusion_frequency_is_s_over_a() {
        let mut rng = RngStream::new(5, 5);
        let n = 100_000;
        let mut hits = 0usize;
        for _ in 0..n {
            if sample_subset(5, 2, &mut rng).unwrap().contains(3) {
                hits += 1;
            }
        }
        let p = hits as f64 / n as f64;
        let se = (0.4f64 * 0.6 / n as f64).sqrt();
        assert!((p - 0.4).abs() < 4.0 * se, "p = {p}");
    }

    proptest! {
        #[test]
        fn samples_are_valid(a in 1usize..40, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let s = 1 + ((a - 1) as f64 * frac) as usize;
            let d = sample_subset(a, s, &mut RngStream::new(seed, 0)).unwrap();
            prop_assert_eq!(d.s(), s);
            prop_assert!(d.indices().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(d.indices().iter().all(|&i| i < a));
            prop_assert_eq!(d.indicator().iter().map(|&h| h as usize).sum::<usize>(), s);
        }
    }
}
