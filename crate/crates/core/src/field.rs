//! Gaussian coefficients and synthesis of the arithmetic random wave.
//!
//! The field is `T_n(x) = N_n^{-1/2} Σ_{λ∈Λ_n} a_λ e^{2πi⟨λ,x⟩}` with
//! `a_{−λ} = conj(a_λ)`. Only the half set `Λ_n⁺` is stored, and synthesis
//! uses the real form
//!
//! ```text
//! T_n(x) = (2/√N_n) Σ_{λ∈Λ_n⁺} (b_λ cos φ_λ(x) − c_λ sin φ_λ(x)),   φ_λ(x) = 2π⟨λ,x⟩
//! ```
//!
//! Derivatives are returned normalized by `√(E_n/2)` so each has unit variance.
//!
//! Coefficient streams are keyed by `(master_seed, replicate)`: a ChaCha8
//! generator seeded from the master seed and switched to stream `replicate`,
//! consumed in canonical `Λ_n⁺` order (`b_λ` then `c_λ`). A replicate's draws are
//! therefore independent of which thread runs it or in which order.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{Frequency, LatticePointSet, Point};

/// Where a coefficient vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Random { master_seed: u64, replicate: u64 },
    /// Hand-assigned fixture; excluded from statistical estimators.
    Fixture,
}

/// One realization: `a_λ` for every `λ ∈ Λ_n⁺`, in the set's canonical order.
#[derive(Debug, Clone)]
pub struct WaveCoefficients {
    lattice: Arc<LatticePointSet>,
    values: Vec<Complex64>,
    provenance: Provenance,
}

impl WaveCoefficients {
    pub fn lattice(&self) -> &LatticePointSet {
        &self.lattice
    }

    pub fn lattice_arc(&self) -> &Arc<LatticePointSet> {
        &self.lattice
    }

    /// Coefficients aligned with [`LatticePointSet::half_points`].
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn is_random(&self) -> bool {
        matches!(self.provenance, Provenance::Random { .. })
    }

    /// `a_λ` for any `λ ∈ Λ_n`, using `a_{−λ} = conj(a_λ)`.
    pub fn get(&self, p: Point) -> Option<Complex64> {
        if let Some(i) = self.lattice.half_index(p) {
            return Some(self.values[i]);
        }
        self.lattice.half_index((-p.0, -p.1)).map(|i| self.values[i].conj())
    }

    /// Multiply every coefficient by a real factor.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            lattice: Arc::clone(&self.lattice),
            values: self.values.iter().map(|a| a * factor).collect(),
            provenance: self.provenance,
        }
    }

    /// `(|a_λ|²)` over `Λ_n⁺`.
    pub fn moduli_squared(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(|a| a.norm_sqr())
    }
}

/// The generator for replicate `replicate` of `master_seed`.
pub fn replicate_rng(master_seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replicate);
    rng
}

/// Draw `b_λ, c_λ ~ N(0, 1/2)` i.i.d. for every `λ ∈ Λ_n⁺`.
pub fn sample_coefficients(set: &Arc<LatticePointSet>, master_seed: u64, replicate: u64) -> Result<WaveCoefficients> {
    if set.cardinality() == 0 {
        return Err(Error::EmptyLattice);
    }
    let mut rng = replicate_rng(master_seed, replicate);
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    let values = (0..set.half_points().len())
        .map(|_| {
            let b = normal.sample(&mut rng);
            let c = normal.sample(&mut rng);
            Complex64::new(b, c)
        })
        .collect();
    Ok(WaveCoefficients {
        lattice: Arc::clone(set),
        values,
        provenance: Provenance::Random { master_seed, replicate },
    })
}

/// Fixture coefficients; keys must lie in `Λ_n⁺`, unassigned entries are zero.
pub fn deterministic_coefficients(set: &Arc<LatticePointSet>, assignments: &[(Point, Complex64)]) -> Result<WaveCoefficients> {
    let mut values = vec![Complex64::new(0.0, 0.0); set.half_points().len()];
    for &(p, a) in assignments {
        let i = set.half_index(p).ok_or(Error::KeyOutsideHalfSet(p.0, p.1))?;
        values[i] = a;
    }
    Ok(WaveCoefficients {
        lattice: Arc::clone(set),
        values,
        provenance: Provenance::Fixture,
    })
}

/// `T_n` and optionally its normalized gradient on the grid `x = (j/M, k/M)`.
///
/// Arrays are row-major with index `j * M + k`, where `j` runs along `x₁`.
#[derive(Debug, Clone)]
pub struct FieldGrid {
    resolution: usize,
    values: Vec<f64>,
    grad1: Option<Vec<f64>>,
    grad2: Option<Vec<f64>>,
    frequency: Frequency,
}

impl FieldGrid {
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grad1(&self) -> Option<&[f64]> {
        self.grad1.as_deref()
    }

    pub fn grad2(&self) -> Option<&[f64]> {
        self.grad2.as_deref()
    }

    pub fn has_gradient(&self) -> bool {
        self.grad1.is_some() && self.grad2.is_some()
    }

    pub fn frequency(&self) -> Frequency {
        self.frequency
    }

    pub fn at(&self, j: usize, k: usize) -> f64 {
        self.values[j * self.resolution + k]
    }

    /// Build a grid from raw row-major samples (used for fixtures and file IO).
    pub fn from_parts(
        frequency: Frequency,
        resolution: usize,
        values: Vec<f64>,
        gradient: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<Self> {
        let cells = resolution * resolution;
        if values.len() != cells || gradient.as_ref().is_some_and(|(a, b)| a.len() != cells || b.len() != cells) {
            return Err(Error::InvalidArgument(format!("grid arrays must have {cells} entries")));
        }
        let (grad1, grad2) = match gradient {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        Ok(Self {
            resolution,
            values,
            grad1,
            grad2,
            frequency,
        })
    }

    /// A copy with every sample negated.
    pub fn negated(&self) -> Self {
        let neg = |v: &Vec<f64>| v.iter().map(|x| -x).collect::<Vec<_>>();
        Self {
            resolution: self.resolution,
            values: neg(&self.values),
            grad1: self.grad1.as_ref().map(neg),
            grad2: self.grad2.as_ref().map(neg),
            frequency: self.frequency,
        }
    }
}

/// Equal-weight average over the grid, summed in row-major order.
pub fn grid_average(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Average of `f(i)` over all grid indices, in row-major order.
pub fn grid_average_by(cells: usize, f: impl Fn(usize) -> f64) -> f64 {
    (0..cells).map(f).sum::<f64>() / cells as f64
}

/// Synthesize `T_n` on an `M × M` grid.
///
/// Phase factors come from one table of `e^{2πit/M}` indexed by
/// `(λ_i · j) mod M`, combined by angle addition, so no transcendental is
/// evaluated inside the `O(N M²)` loop.
pub fn evaluate_field(coeffs: &WaveCoefficients, m: usize, with_gradient: bool) -> Result<FieldGrid> {
    if m < 2 {
        return Err(Error::GridTooSmall { got: m, need: 2 });
    }
    let set = coeffs.lattice();
    let big_n = set.cardinality() as f64;
    let amp = 2.0 / big_n.sqrt();
    let grad_amp = amp * (2.0 / set.n() as f64).sqrt();

    let cos_t: Vec<f64> = (0..m).map(|t| (2.0 * PI * t as f64 / m as f64).cos()).collect();
    let sin_t: Vec<f64> = (0..m).map(|t| (2.0 * PI * t as f64 / m as f64).sin()).collect();
    let mi = m as i64;
    let phase = |l: i64, j: usize| -> usize { (l * j as i64).rem_euclid(mi) as usize };

    struct Mode {
        l1: i64,
        b: f64,
        c: f64,
        l1f: f64,
        l2f: f64,
        cb: Vec<f64>,
        sb: Vec<f64>,
    }
    let modes: Vec<Mode> = set
        .half_points()
        .iter()
        .zip(coeffs.values())
        .filter(|(_, a)| a.re != 0.0 || a.im != 0.0)
        .map(|(&(l1, l2), a)| Mode {
            l1,
            b: a.re,
            c: a.im,
            l1f: l1 as f64,
            l2f: l2 as f64,
            cb: (0..m).map(|k| cos_t[phase(l2, k)]).collect(),
            sb: (0..m).map(|k| sin_t[phase(l2, k)]).collect(),
        })
        .collect();

    let mut values = vec![0.0; m * m];
    let mut grad1 = if with_gradient { vec![0.0; m * m] } else { Vec::new() };
    let mut grad2 = if with_gradient { vec![0.0; m * m] } else { Vec::new() };

    let fill_row = |j: usize, row: &mut [f64], g1: Option<&mut [f64]>, g2: Option<&mut [f64]>| {
        match (g1, g2) {
            (Some(g1), Some(g2)) => {
                for mode in &modes {
                    let (ca, sa) = (cos_t[phase(mode.l1, j)], sin_t[phase(mode.l1, j)]);
                    // b cos(φa+φb) − c sin(φa+φb) = u cb − v sb
                    // b sin(φa+φb) + c cos(φa+φb) = v cb + u sb
                    let u = mode.b * ca - mode.c * sa;
                    let v = mode.b * sa + mode.c * ca;
                    for k in 0..m {
                        let (cb, sb) = (mode.cb[k], mode.sb[k]);
                        row[k] += u * cb - v * sb;
                        let w = v * cb + u * sb;
                        g1[k] -= mode.l1f * w;
                        g2[k] -= mode.l2f * w;
                    }
                }
                g1.iter_mut().for_each(|x| *x *= grad_amp);
                g2.iter_mut().for_each(|x| *x *= grad_amp);
            }
            _ => {
                for mode in &modes {
                    let (ca, sa) = (cos_t[phase(mode.l1, j)], sin_t[phase(mode.l1, j)]);
                    let u = mode.b * ca - mode.c * sa;
                    let v = mode.b * sa + mode.c * ca;
                    for k in 0..m {
                        row[k] += u * mode.cb[k] - v * mode.sb[k];
                    }
                }
            }
        }
        row.iter_mut().for_each(|x| *x *= amp);
    };

    if with_gradient {
        values
            .par_chunks_mut(m)
            .zip(grad1.par_chunks_mut(m))
            .zip(grad2.par_chunks_mut(m))
            .enumerate()
            .for_each(|(j, ((row, g1), g2))| fill_row(j, row, Some(g1), Some(g2)));
    } else {
        values
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(j, row)| fill_row(j, row, None, None));
    }

    Ok(FieldGrid {
        resolution: m,
        values,
        grad1: with_gradient.then_some(grad1),
        grad2: with_gradient.then_some(grad2),
        frequency: set.frequency(),
    })
}

/// `T_n(x)` at one point by direct summation over `Λ_n⁺`.
pub fn evaluate_at(coeffs: &WaveCoefficients, x: (f64, f64)) -> f64 {
    let set = coeffs.lattice();
    let amp = 2.0 / (set.cardinality() as f64).sqrt();
    amp * set
        .half_points()
        .iter()
        .zip(coeffs.values())
        .map(|(&(l1, l2), a)| {
            let phi = 2.0 * PI * (l1 as f64 * x.0 + l2 as f64 * x.1);
            a.re * phi.cos() - a.im * phi.sin()
        })
        .sum::<f64>()
}

/// `r_n(x) = (1/N_n) Σ_λ cos(2π⟨λ,x⟩)`.
pub fn covariance(set: &LatticePointSet, x: (f64, f64)) -> f64 {
    let sum: f64 = set
        .points()
        .iter()
        .map(|&(l1, l2)| (2.0 * PI * (l1 as f64 * x.0 + l2 as f64 * x.1)).cos())
        .sum();
    sum / set.cardinality() as f64
}

/// Termwise derivatives of `r_n` at `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceDerivatives {
    pub d1: f64,
    pub d2: f64,
    pub d11: f64,
    pub d12: f64,
    pub d22: f64,
}

pub fn covariance_derivatives(set: &LatticePointSet, x: (f64, f64)) -> CovarianceDerivatives {
    let mut d = CovarianceDerivatives {
        d1: 0.0,
        d2: 0.0,
        d11: 0.0,
        d12: 0.0,
        d22: 0.0,
    };
    for &(l1, l2) in set.points() {
        let (w1, w2) = (2.0 * PI * l1 as f64, 2.0 * PI * l2 as f64);
        let phi = w1 * x.0 + w2 * x.1;
        let (s, c) = phi.sin_cos();
        d.d1 -= w1 * s;
        d.d2 -= w2 * s;
        d.d11 -= w1 * w1 * c;
        d.d12 -= w1 * w2 * c;
        d.d22 -= w2 * w2 * c;
    }
    let inv = 1.0 / set.cardinality() as f64;
    d.d1 *= inv;
    d.d2 *= inv;
    d.d11 *= inv;
    d.d12 *= inv;
    d.d22 *= inv;
    d
}

/// `r_n` sampled on the `M × M` grid.
///
/// With every `a_λ = 1` the field equals `√N_n · r_n`, so this reuses the synthesis kernel.
pub fn covariance_grid(set: &Arc<LatticePointSet>, m: usize) -> Result<Vec<f64>> {
    let ones: Vec<(Point, Complex64)> = set.half_points().iter().map(|&p| (p, Complex64::new(1.0, 0.0))).collect();
    let coeffs = deterministic_coefficients(set, &ones)?;
    let grid = evaluate_field(&coeffs, m, false)?;
    let scale = 1.0 / (set.cardinality() as f64).sqrt();
    Ok(grid.values.into_iter().map(|v| v * scale).collect())
}

/// Magic bytes opening a binary grid file.
pub const GRID_MAGIC: [u8; 8] = *b"AWGRID01";

/// Flag bit set when the two normalized gradient arrays follow the values.
pub const GRID_FLAG_GRADIENT: u64 = 1;

/// Write a grid as a little-endian binary block.
///
/// Layout: `GRID_MAGIC`, then `n`, `M`, `flags` as `u64`; then `M²` `f64`
/// values in row-major order, followed by `∂̃₁T` and `∂̃₂T` when
/// `flags & GRID_FLAG_GRADIENT` is set.
pub fn write_grid_binary<W: Write>(grid: &FieldGrid, mut out: W) -> Result<()> {
    out.write_all(&GRID_MAGIC)?;
    let flags = if grid.has_gradient() { GRID_FLAG_GRADIENT } else { 0 };
    for word in [grid.frequency.n(), grid.resolution as u64, flags] {
        out.write_all(&word.to_le_bytes())?;
    }
    let arrays = std::iter::once(Some(&grid.values)).chain([grid.grad1.as_ref(), grid.grad2.as_ref()]);
    for arr in arrays.flatten() {
        let mut buf = Vec::with_capacity(arr.len() * 8);
        arr.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a block written by [`write_grid_binary`].
pub fn read_grid_binary<R: Read>(mut input: R) -> Result<FieldGrid> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if magic != GRID_MAGIC {
        return Err(Error::InvalidArgument("not a grid file (bad magic)".into()));
    }
    let mut word = [0u8; 8];
    let mut header = [0u64; 3];
    for h in header.iter_mut() {
        input.read_exact(&mut word)?;
        *h = u64::from_le_bytes(word);
    }
    let [n, m, flags] = header;
    if flags & !GRID_FLAG_GRADIENT != 0 {
        return Err(Error::InvalidArgument(format!("unknown grid flags {flags:#x}")));
    }
    let m = usize::try_from(m).map_err(|_| Error::InvalidArgument("grid size overflows".into()))?;
    let mut read_array = || -> Result<Vec<f64>> {
        let mut buf = vec![0u8; m * m * 8];
        input.read_exact(&mut buf)?;
        Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let values = read_array()?;
    let gradient = if flags & GRID_FLAG_GRADIENT != 0 {
        Some((read_array()?, read_array()?))
    } else {
        None
    };
    FieldGrid::from_parts(Frequency::new(n)?, m, values, gradient)
}

/// Write a grid as CSV with columns `j, k, x1, x2, value[, grad1, grad2]`.
pub fn write_grid_csv<W: Write>(grid: &FieldGrid, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let m = grid.resolution;
    let mut header = vec!["j", "k", "x1", "x2", "value"];
    if grid.has_gradient() {
        header.extend(["grad1", "grad2"]);
    }
    w.write_record(&header)?;
    for j in 0..m {
        for k in 0..m {
            let i = j * m + k;
            let mut rec = vec![
                j.to_string(),
                k.to_string(),
                (j as f64 / m as f64).to_string(),
                (k as f64 / m as f64).to_string(),
                grid.values[i].to_string(),
            ];
            if let (Some(a), Some(b)) = (&grid.grad1, &grid.grad2) {
                rec.push(a[i].to_string());
                rec.push(b[i].to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::enumerate_lattice_points;

    fn set(n: u64) -> Arc<LatticePointSet> {
        Arc::new(enumerate_lattice_points(n).unwrap())
    }

    #[test]
    fn determinism_and_stream_independence() {
        let s = set(25);
        let a = sample_coefficients(&s, 42, 3).unwrap();
        let b = sample_coefficients(&s, 42, 3).unwrap();
        let c = sample_coefficients(&s, 42, 4).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
        assert_eq!(a.values().len(), 6);
    }

    #[test]
    fn gaussian_moments_of_coefficients() {
        let s = set(1);
        let draws = 100_000u64;
        let mut b = Vec::with_capacity(draws as usize);
        let mut a4 = Vec::with_capacity(draws as usize);
        for r in 0..draws {
            let c = sample_coefficients(&s, 7, r).unwrap();
            b.push(c.values()[0].re);
            a4.push(c.values()[0].norm_sqr().powi(2));
        }
        let n = draws as f64;
        let mean = b.iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * (0.5 / n).sqrt(), "mean {mean}");
        let var = b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // Var of sample variance for N(0, σ²) is 2σ⁴/(n−1).
        assert!((var - 0.5).abs() < 3.0 * (2.0 * 0.25 / n).sqrt(), "var {var}");
        // |a|² ~ Exp(1): E|a|⁴ = 2, Var|a|⁴ = 24 − 4 = 20.
        let m4 = a4.iter().sum::<f64>() / n;
        assert!((m4 - 2.0).abs() < 3.0 * (20.0 / n).sqrt(), "E|a|^4 {m4}");
    }

    #[test]
    fn fixtures_map_to_closed_forms() {
        let s = set(1);
        let f = deterministic_coefficients(&s, &[((1, 0), Complex64::new(1.0, 0.0))]).unwrap();
        assert!(!f.is_random());
        let g = evaluate_field(&f, 8, false).unwrap();
        for j in 0..8 {
            for k in 0..8 {
                let want = (2.0 * PI * j as f64 / 8.0).cos();
                assert!((g.at(j, k) - want).abs() <= 1e-12);
            }
        }
        let f = deterministic_coefficients(&s, &[((0, 1), Complex64::new(0.0, -1.0))]).unwrap();
        let g = evaluate_field(&f, 8, false).unwrap();
        for j in 0..8 {
            for k in 0..8 {
                let want = (2.0 * PI * k as f64 / 8.0).sin();
                assert!((g.at(j, k) - want).abs() <= 1e-12);
            }
        }
        let zero = deterministic_coefficients(&s, &[]).unwrap();
        let g = evaluate_field(&zero, 8, true).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixture_key_outside_half_set() {
        let s = set(1);
        let err = deterministic_coefficients(&s, &[((-1, 0), Complex64::new(1.0, 0.0))]);
        assert!(matches!(err, Err(Error::KeyOutsideHalfSet(-1, 0))));
    }

    #[test]
    fn grid_too_small() {
        let s = set(5);
        let c = sample_coefficients(&s, 1, 0).unwrap();
        assert!(matches!(evaluate_field(&c, 1, false), Err(Error::GridTooSmall { got: 1, .. })));
    }

    #[test]
    fn origin_value_is_sum_of_real_parts() {
        let s = set(65);
        let c = sample_coefficients(&s, 9, 1).unwrap();
        let g = evaluate_field(&c, 16, false).unwrap();
        let want = 2.0 / (s.cardinality() as f64).sqrt() * c.values().iter().map(|a| a.re).sum::<f64>();
        assert!((g.at(0, 0) - want).abs() < 1e-12);
    }

    #[test]
    fn table_synthesis_matches_direct_sum() {
        let s = set(325);
        let c = sample_coefficients(&s, 3, 11).unwrap();
        let m = 37;
        let g = evaluate_field(&c, m, false).unwrap();
        for &(j, k) in &[(0, 0), (1, 5), (17, 36), (36, 2), (20, 20)] {
            let direct = evaluate_at(&c, (j as f64 / m as f64, k as f64 / m as f64));
            assert!((g.at(j, k) - direct).abs() < 1e-11);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = set(25);
        let c = sample_coefficients(&s, 5, 0).unwrap();
        let m = 64;
        let g = evaluate_field(&c, m, true).unwrap();
        let norm = (s.frequency().energy() / 2.0).sqrt();
        let h = 1e-6;
        for &(j, k) in &[(3, 7), (10, 50), (31, 31)] {
            let x = (j as f64 / m as f64, k as f64 / m as f64);
            let d1 = (evaluate_at(&c, (x.0 + h, x.1)) - evaluate_at(&c, (x.0 - h, x.1))) / (2.0 * h);
            let d2 = (evaluate_at(&c, (x.0, x.1 + h)) - evaluate_at(&c, (x.0, x.1 - h))) / (2.0 * h);
            assert!((g.grad1().unwrap()[j * m + k] - d1 / norm).abs() < 1e-6);
            assert!((g.grad2().unwrap()[j * m + k] - d2 / norm).abs() < 1e-6);
        }
    }

    #[test]
    fn covariance_examples() {
        let s1 = set(1);
        assert!((covariance(&s1, (0.0, 0.0)) - 1.0).abs() < 1e-15);
        assert!(covariance(&s1, (0.5, 0.0)).abs() < 1e-15);
        let s = set(25);
        let d = covariance_derivatives(&s, (0.0, 0.0));
        assert!(d.d1.abs() < 1e-12 && d.d2.abs() < 1e-12);
        // r is even with Hessian −(4π²/N)Σλλᵀ = −(E_n/2)·I at the origin.
        assert!((d.d11 + s.frequency().energy() / 2.0).abs() < 1e-9);
        assert!(d.d12.abs() < 1e-9);
    }

    #[test]
    fn covariance_derivatives_match_finite_differences() {
        let s = set(65);
        let x = (0.13, 0.41);
        let h = 1e-5;
        let d = covariance_derivatives(&s, x);
        let r = |a: f64, b: f64| covariance(&s, (a, b));
        let fd1 = (r(x.0 + h, x.1) - r(x.0 - h, x.1)) / (2.0 * h);
        let fd11 = (r(x.0 + h, x.1) - 2.0 * r(x.0, x.1) + r(x.0 - h, x.1)) / (h * h);
        let fd12 = (r(x.0 + h, x.1 + h) - r(x.0 + h, x.1 - h) - r(x.0 - h, x.1 + h) + r(x.0 - h, x.1 - h)) / (4.0 * h * h);
        assert!((d.d1 - fd1).abs() < 1e-5 * d.d1.abs().max(1.0));
        assert!((d.d11 - fd11).abs() < 1e-3 * d.d11.abs().max(1.0));
        assert!((d.d12 - fd12).abs() < 1e-3 * d.d12.abs().max(1.0));
    }

    #[test]
    fn covariance_quadrature_gives_inverse_cardinality() {
        for n in [5u64, 25, 65] {
            let s = set(n);
            let m = (4.0 * (n as f64).sqrt()).ceil() as usize + 1;
            let r = covariance_grid(&s, m).unwrap();
            let avg = r.iter().map(|v| v * v).sum::<f64>() / (m * m) as f64;
            assert!((avg - 1.0 / s.cardinality() as f64).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn exact_quadrature_rule_for_trig_polynomials() {
        // T² has per-axis frequencies ≤ 2√n; M ≥ 2F+1 integrates it exactly.
        let s = set(65);
        let c = sample_coefficients(&s, 2, 2).unwrap();
        let f = 2.0 * (65f64).sqrt();
        let m = (2.0 * f).ceil() as usize + 1;
        let g = evaluate_field(&c, m, false).unwrap();
        let avg = g.values().iter().map(|v| v * v).sum::<f64>() / (m * m) as f64;
        let exact = 2.0 / s.cardinality() as f64 * c.moduli_squared().sum::<f64>();
        assert!((avg - exact).abs() < 1e-12 * exact);
    }

    #[test]
    fn binary_grid_round_trip() {
        let set = Arc::new(enumerate_lattice_points(25).unwrap());
        let c = sample_coefficients(&set, 8, 3).unwrap();
        for grad in [false, true] {
            let g = evaluate_field(&c, 16, grad).unwrap();
            let mut buf = Vec::new();
            write_grid_binary(&g, &mut buf).unwrap();
            assert_eq!(buf.len(), 32 + 16 * 16 * 8 * if grad { 3 } else { 1 });
            assert_eq!(&buf[..8], b"AWGRID01");
            let back = read_grid_binary(buf.as_slice()).unwrap();
            assert_eq!(back.values(), g.values());
            assert_eq!(back.grad1(), g.grad1());
            assert_eq!(back.frequency().n(), 25);
            buf[0] = b'X';
            assert!(read_grid_binary(buf.as_slice()).is_err());
        }
        let g = evaluate_field(&c, 4, true).unwrap();
        let mut out = Vec::new();
        write_grid_csv(&g, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 17);
        assert!(text.starts_with("j,k,x1,x2,value,grad1,grad2"));
    }
}
