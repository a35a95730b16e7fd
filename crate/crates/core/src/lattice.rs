//! Lattice points on circles of integer-square radius.
//!
//! For `n` a sum of two squares, `Λ_n = {λ ∈ Z² : |λ|² = n}` indexes the
//! frequencies of the eigenspace with eigenvalue `E_n = 4π²n`. Everything the
//! variance and limit formulas need from the arithmetic side lives here: the
//! point count `N_n`, the half set `Λ_n⁺` carrying the independent
//! coefficients, the fourth Fourier coefficient of the spectral measure and the
//! spectral correlation counts `|S_{2K}(n)|`.

use std::collections::HashMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer lattice point `(λ₁, λ₂)`.
pub type Point = (i64, i64);

/// Default cap on `N_n` for the `|S_6|` count.
pub const DEFAULT_S6_CAP: usize = 64;

/// Exact integer square root (floor).
pub fn isqrt(n: u64) -> u64 {
    let mut r = (n as f64).sqrt() as u64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// An admissible frequency `n ∈ S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Frequency {
    n: u64,
}

impl Frequency {
    /// Checks representability by scanning `a ∈ [0, ⌊√n⌋]`.
    pub fn new(n: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be positive".into()));
        }
        let top = isqrt(n);
        let representable = (0..=top).any(|a| {
            let rest = n - a * a;
            let b = isqrt(rest);
            b * b == rest
        });
        if representable {
            Ok(Self { n })
        } else {
            Err(Error::NotInS(n))
        }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// Laplace eigenvalue `E_n = 4π²n`.
    pub fn energy(&self) -> f64 {
        4.0 * PI * PI * self.n as f64
    }
}

/// `Λ_n` in lexicographic order together with the half set `Λ_n⁺`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticePointSet {
    frequency: Frequency,
    points: Vec<Point>,
    half_points: Vec<Point>,
}

impl LatticePointSet {
    pub fn frequency(&self) -> Frequency {
        self.frequency
    }

    pub fn n(&self) -> u64 {
        self.frequency.n
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    /// `Λ_n⁺`: points with `λ₂ > 0`, plus `(√n, 0)` when `n` is a square.
    pub fn half_points(&self) -> &[Point] {
        &self.half_points
    }

    /// `N_n = |Λ_n| = r₂(n)`.
    pub fn cardinality(&self) -> usize {
        self.points.len()
    }

    pub fn contains(&self, p: Point) -> bool {
        self.points.binary_search(&p).is_ok()
    }

    /// Position of `p` in the half set, if present.
    pub fn half_index(&self, p: Point) -> Option<usize> {
        self.half_points.iter().position(|&q| q == p)
    }
}

/// All integer solutions of `λ₁² + λ₂² = n`, sorted lexicographically.
pub fn enumerate_lattice_points(n: u64) -> Result<LatticePointSet> {
    let frequency = Frequency::new(n)?;
    let top = isqrt(n);
    let mut points = Vec::new();
    for a in 0..=top {
        let rest = n - a * a;
        let b = isqrt(rest);
        if b * b != rest {
            continue;
        }
        let (a, b) = (a as i64, b as i64);
        for sa in [-1, 1] {
            for sb in [-1, 1] {
                points.push((sa * a, sb * b));
            }
        }
    }
    points.sort_unstable();
    points.dedup();

    let root = isqrt(n);
    let square = root * root == n;
    let half_points = points
        .iter()
        .copied()
        .filter(|&(l1, l2)| l2 > 0 || (square && l2 == 0 && l1 == root as i64))
        .collect();

    Ok(LatticePointSet {
        frequency,
        points,
        half_points,
    })
}

/// `(n, N_n)` for every `n ≤ limit` in `S`, ascending.
pub fn sum_two_squares_table(limit: u64) -> Vec<(u64, usize)> {
    (1..=limit)
        .filter_map(|n| enumerate_lattice_points(n).ok())
        .map(|set| (set.n(), set.cardinality()))
        .collect()
}

/// `μ̂_n(4) = (1/N_n) Σ_λ cos(4θ_λ)`.
///
/// The sine part cancels under `λ ↦ −λ`, so only the real part is returned.
/// The sign is kept; callers that need `|μ̂_n(4)|` take it themselves.
pub fn mu_hat_4(set: &LatticePointSet) -> Result<f64> {
    if set.cardinality() == 0 {
        return Err(Error::EmptyLattice);
    }
    let total: f64 = set
        .points
        .iter()
        .map(|&(l1, l2)| (4.0 * (l2 as f64).atan2(l1 as f64)).cos())
        .sum();
    Ok(total / set.cardinality() as f64)
}

/// `μ̂_n(4)` through `cos 4θ = (λ₁⁴ − 6λ₁²λ₂² + λ₂⁴)/n²`, in exact integer arithmetic.
pub fn mu_hat_4_algebraic(set: &LatticePointSet) -> Result<f64> {
    if set.cardinality() == 0 {
        return Err(Error::EmptyLattice);
    }
    let num: i128 = set
        .points
        .iter()
        .map(|&(a, b)| {
            let (a2, b2) = ((a * a) as i128, (b * b) as i128);
            a2 * a2 - 6 * a2 * b2 + b2 * b2
        })
        .sum();
    let n = set.n() as f64;
    Ok(num as f64 / (n * n * set.cardinality() as f64))
}

fn add(p: Point, q: Point) -> Point {
    (p.0 + q.0, p.1 + q.1)
}

/// `|S_{2K}(n)|` with the default cap on `N_n` for `K = 3`.
pub fn spectral_correlation_count(set: &LatticePointSet, k: u32) -> Result<u64> {
    spectral_correlation_count_with_cap(set, k, DEFAULT_S6_CAP)
}

/// Number of ordered `2K`-tuples of `Λ_n` summing to zero.
///
/// `K = 2` matches pair sums against their negatives; `K = 3` builds a
/// multimap of 3-tuple sums (`O(N³)` entries) and refuses when `N_n > cap`.
pub fn spectral_correlation_count_with_cap(set: &LatticePointSet, k: u32, cap: usize) -> Result<u64> {
    let big_n = set.cardinality();
    if big_n == 0 {
        return Err(Error::EmptyLattice);
    }
    let pts = &set.points;
    match k {
        1 => Ok(pts.iter().filter(|&&(a, b)| set.contains((-a, -b))).count() as u64),
        2 => {
            let mut pair_sums: HashMap<Point, u64> = HashMap::new();
            for &p in pts {
                for &q in pts {
                    *pair_sums.entry(add(p, q)).or_default() += 1;
                }
            }
            Ok(pair_sums
                .iter()
                .map(|(&(x, y), &c)| c * pair_sums.get(&(-x, -y)).copied().unwrap_or(0))
                .sum())
        }
        3 => {
            if big_n > cap {
                return Err(Error::CorrelationCap {
                    order: 6,
                    n_points: big_n,
                    cap,
                });
            }
            let mut triple_sums: HashMap<Point, u64> = HashMap::new();
            for &p in pts {
                for &q in pts {
                    let pq = add(p, q);
                    for &r in pts {
                        *triple_sums.entry(add(pq, r)).or_default() += 1;
                    }
                }
            }
            // Per-key partial products are integers, so the reduction order is irrelevant.
            let entries: Vec<(&Point, &u64)> = triple_sums.iter().collect();
            Ok(entries
                .par_iter()
                .map(|(&(x, y), &c)| c * triple_sums.get(&(-x, -y)).copied().unwrap_or(0))
                .sum())
        }
        other => Err(Error::UnsupportedOrder(other)),
    }
}

/// `∫_𝕋 r_n^{2K} = |S_{2K}(n)| / N_n^{2K}`.
pub fn correlation_moment(set: &LatticePointSet, k: u32) -> Result<f64> {
    let count = spectral_correlation_count(set, k)?;
    let big_n = set.cardinality() as f64;
    Ok(count as f64 / big_n.powi(2 * k as i32))
}

/// A frequency with its point count and `μ̂_n(4)`, as returned by [`select_frequencies`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyInfo {
    pub frequency: Frequency,
    pub n_points: usize,
    pub mu4: f64,
}

/// Every `n ≤ limit` in `S` with `N_n ≥ min_points` and, when a target is
/// given, `||μ̂_n(4)| − target| ≤ tol`. Sorted by `N_n`, then `n`.
pub fn select_frequencies(limit: u64, min_points: usize, target_mu4: Option<f64>, tol: f64) -> Vec<FrequencyInfo> {
    let mut out: Vec<FrequencyInfo> = (1..=limit)
        .filter_map(|n| enumerate_lattice_points(n).ok())
        .filter(|set| set.cardinality() >= min_points)
        .filter_map(|set| {
            let mu4 = mu_hat_4(&set).ok()?;
            if let Some(t) = target_mu4 {
                if (mu4.abs() - t).abs() > tol {
                    return None;
                }
            }
            Some(FrequencyInfo {
                frequency: set.frequency(),
                n_points: set.cardinality(),
                mu4,
            })
        })
        .collect();
    out.sort_by_key(|f| (f.n_points, f.frequency.n()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_points(n: i64) -> Vec<Point> {
        let r = (n as f64).sqrt() as i64 + 1;
        let mut v = Vec::new();
        for a in -r..=r {
            for b in -r..=r {
                if a * a + b * b == n {
                    v.push((a, b));
                }
            }
        }
        v
    }

    #[test]
    fn n1_points_and_half() {
        let set = enumerate_lattice_points(1).unwrap();
        assert_eq!(set.points(), &[(-1, 0), (0, -1), (0, 1), (1, 0)]);
        assert_eq!(set.cardinality(), 4);
        assert_eq!(set.half_points(), &[(0, 1), (1, 0)]);
    }

    #[test]
    fn n3_not_in_s() {
        assert!(matches!(enumerate_lattice_points(3), Err(Error::NotInS(3))));
        assert!(brute_points(3).is_empty());
    }

    #[test]
    fn n25_points() {
        let set = enumerate_lattice_points(25).unwrap();
        assert_eq!(set.cardinality(), 12);
        let mut brute = brute_points(25);
        brute.sort();
        assert_eq!(set.points(), brute.as_slice());
        for p in [(3, 4), (-3, -4), (4, -3), (5, 0), (0, -5)] {
            assert!(set.contains(p));
        }
        assert!(set.half_points().contains(&(5, 0)));
        assert!(!set.half_points().contains(&(-5, 0)));
        assert_eq!(set.half_points().len(), 6);
    }

    #[test]
    fn table_examples() {
        assert_eq!(sum_two_squares_table(5), vec![(1, 4), (2, 4), (4, 4), (5, 8)]);
        assert_eq!(sum_two_squares_table(1), vec![(1, 4)]);
        assert_eq!(*sum_two_squares_table(25).last().unwrap(), (25, 12));
        for (n, count) in sum_two_squares_table(200) {
            assert_eq!(brute_points(n as i64).len(), count);
        }
    }

    #[test]
    fn mu4_examples() {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(mu_hat_4(&enumerate_lattice_points(1).unwrap()).unwrap(), 1.0));
        assert!(close(mu_hat_4(&enumerate_lattice_points(2).unwrap()).unwrap(), -1.0));
        assert!(close(mu_hat_4(&enumerate_lattice_points(5).unwrap()).unwrap(), -7.0 / 25.0));
    }

    #[test]
    fn mu4_angle_matches_algebraic() {
        for (n, _) in sum_two_squares_table(3000) {
            let set = enumerate_lattice_points(n).unwrap();
            let a = mu_hat_4(&set).unwrap();
            let b = mu_hat_4_algebraic(&set).unwrap();
            assert!((a - b).abs() < 1e-12, "n={n}: {a} vs {b}");
        }
    }

    #[test]
    fn correlation_counts_small() {
        let s5 = enumerate_lattice_points(5).unwrap();
        assert_eq!(spectral_correlation_count(&s5, 1).unwrap(), 8);
        assert_eq!(spectral_correlation_count(&s5, 2).unwrap(), 168);
        let s25 = enumerate_lattice_points(25).unwrap();
        assert_eq!(spectral_correlation_count(&s25, 2).unwrap(), 396);
        assert!((correlation_moment(&s5, 2).unwrap() - 168.0 / 4096.0).abs() < 1e-15);
        assert!((correlation_moment(&s25, 1).unwrap() - 1.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn s6_matches_exhaustive_enumeration() {
        // Oracle: all 6-tuples.
        for n in [5u64, 25] {
            let set = enumerate_lattice_points(n).unwrap();
            let p = set.points();
            let mut brute = 0u64;
            for a in p {
                for b in p {
                    for c in p {
                        for d in p {
                            for e in p {
                                for f in p {
                                    if a.0 + b.0 + c.0 + d.0 + e.0 + f.0 == 0
                                        && a.1 + b.1 + c.1 + d.1 + e.1 + f.1 == 0
                                    {
                                        brute += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            assert_eq!(spectral_correlation_count(&set, 3).unwrap(), brute, "n={n}");
        }
        let s5 = enumerate_lattice_points(5).unwrap();
        let m = correlation_moment(&s5, 3).unwrap();
        assert!((m - spectral_correlation_count(&s5, 3).unwrap() as f64 / 8f64.powi(6)).abs() < 1e-15);
    }

    #[test]
    fn correlation_errors() {
        let s5 = enumerate_lattice_points(5).unwrap();
        assert!(matches!(spectral_correlation_count(&s5, 4), Err(Error::UnsupportedOrder(4))));
        assert!(matches!(spectral_correlation_count(&s5, 0), Err(Error::UnsupportedOrder(0))));
        let s1105 = enumerate_lattice_points(1105).unwrap();
        assert!(matches!(
            spectral_correlation_count_with_cap(&s1105, 3, 16),
            Err(Error::CorrelationCap { n_points: 32, cap: 16, .. })
        ));
    }

    #[test]
    fn selection_examples() {
        let sel = select_frequencies(1200, 32, None, 0.0);
        assert!(sel.iter().any(|f| f.frequency.n() == 1105 && f.n_points == 32));
        let sel = select_frequencies(30, 12, None, 0.0);
        assert!(sel.iter().any(|f| f.frequency.n() == 25));
        assert!(select_frequencies(5, 100, None, 0.0).is_empty());
        let sel = select_frequencies(200, 4, Some(1.0), 1e-9);
        assert!(sel.iter().all(|f| (f.mu4.abs() - 1.0).abs() <= 1e-9));
        assert!(sel.iter().any(|f| f.frequency.n() == 1));
        assert!(sel.windows(2).all(|w| (w[0].n_points, w[0].frequency.n()) <= (w[1].n_points, w[1].frequency.n())));
    }

    #[test]
    fn energy_scaling() {
        let f = Frequency::new(5).unwrap();
        assert!((f.energy() - 20.0 * PI * PI).abs() < 1e-12);
        assert!(Frequency::new(0).is_err());
    }
}
