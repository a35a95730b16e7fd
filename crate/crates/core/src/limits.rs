//! Limit laws and distances: the non-Gaussian law `M_η`, the singular Gaussian
//! vector `Z(η)`, one-dimensional 1-Wasserstein distances and log-log rate fits.

use nalgebra::{Matrix4, SymmetricEigen, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::statistics::Statistics;

use crate::chaos::sigma_n;
use crate::error::{Error, Result};

const EIGEN_CLAMP: f64 = 1e-12;

fn check_eta(eta: f64) -> Result<f64> {
    if !(eta.abs() <= 1.0) {
        return Err(Error::InvalidArgument(format!("|eta| must be at most 1, got {eta}")));
    }
    Ok(eta.abs())
}

/// `M_η = (2 − (1+η)X₁² − (1−η)X₂²) / (2√(1+η²))` with `X₁, X₂` i.i.d. standard normal.
///
/// The law depends on `|η|` only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MEtaLaw {
    eta: f64,
}

impl MEtaLaw {
    pub fn new(eta: f64) -> Result<Self> {
        Ok(Self { eta: check_eta(eta)? })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Deterministic map from a pair of normals, used by samplers and tests.
    pub fn from_normals(&self, x1: f64, x2: f64) -> f64 {
        let e = self.eta;
        (2.0 - (1.0 + e) * x1 * x1 - (1.0 - e) * x2 * x2) / (2.0 * (1.0 + e * e).sqrt())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x1: f64 = rng.sample(StandardNormal);
        let x2: f64 = rng.sample(StandardNormal);
        self.from_normals(x1, x2)
    }

    pub fn sample_many<R: Rng + ?Sized>(&self, rng: &mut R, draws: usize) -> Vec<f64> {
        (0..draws).map(|_| self.sample(rng)).collect()
    }

    /// Upper end of the support, `1/√(1+η²)`.
    pub fn support_max(&self) -> f64 {
        1.0 / (1.0 + self.eta * self.eta).sqrt()
    }

    /// `κ_r = (−1/(2s))^r ((1+η)^r + (1−η)^r) 2^{r−1}(r−1)!`, `s = √(1+η²)`, for `r ≥ 2`; `κ₁ = 0`.
    pub fn cumulant(&self, r: u32) -> f64 {
        if r < 2 {
            return 0.0;
        }
        let s = (1.0 + self.eta * self.eta).sqrt();
        let lead = (-1.0 / (2.0 * s)).powi(r as i32);
        let pw = (1.0 + self.eta).powi(r as i32) + (1.0 - self.eta).powi(r as i32);
        let fact: f64 = (1..r).map(f64::from).product();
        lead * pw * 2f64.powi(r as i32 - 1) * fact
    }

    /// `E[M_η^r]` from the cumulants.
    pub fn raw_moment(&self, r: u32) -> f64 {
        let kappa: Vec<f64> = (0..=r).map(|k| self.cumulant(k)).collect();
        let mut m = vec![1.0; r as usize + 1];
        for j in 1..=r as usize {
            let mut binom = 1.0;
            let mut acc = 0.0;
            for k in 1..=j {
                acc += binom * kappa[k] * m[j - k];
                binom = binom * (j - k) as f64 / k as f64;
            }
            m[j] = acc;
        }
        m[r as usize]
    }
}

/// Draw one `M_η`; `|η| > 1` is rejected.
pub fn sample_m_eta<R: Rng + ?Sized>(eta: f64, rng: &mut R) -> Result<f64> {
    Ok(MEtaLaw::new(eta)?.sample(rng))
}

/// The covariance `Σ(η)` of the limiting vector.
pub fn sigma_eta(eta: f64) -> Matrix4<f64> {
    sigma_n(eta)
}

/// Centered Gaussian vector with covariance `Σ(η)`, factored by eigendecomposition.
#[derive(Debug, Clone)]
pub struct LimitGaussian {
    eta: f64,
    covariance: Matrix4<f64>,
    eigenvalues: Vector4<f64>,
    factor: Matrix4<f64>,
}

impl LimitGaussian {
    pub fn new(eta: f64) -> Result<Self> {
        let eta = check_eta(eta)?;
        let covariance = sigma_eta(eta);
        let eig = SymmetricEigen::new(covariance);
        let eigenvalues = eig.eigenvalues.map(|v| if v < EIGEN_CLAMP { 0.0 } else { v });
        let factor = eig.eigenvectors * Matrix4::from_diagonal(&eigenvalues.map(f64::sqrt));
        Ok(Self {
            eta,
            covariance,
            eigenvalues,
            factor,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn covariance(&self) -> &Matrix4<f64> {
        &self.covariance
    }

    /// Clamped eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> [f64; 4] {
        let mut e: [f64; 4] = self.eigenvalues.into();
        e.sort_by(f64::total_cmp);
        e
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 4] {
        let g = Vector4::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let mut z: [f64; 4] = (self.factor * g).into();
        // The kernel direction (−1, 1, 1, 0) carries roundoff only.
        let drift = (z[1] + z[2] - z[0]) / 3.0;
        z[0] += drift;
        z[1] -= drift;
        z[2] -= drift;
        z
    }
}

/// Draw one vector from `N(0, Σ(η))`.
pub fn sample_limit_vector<R: Rng + ?Sized>(eta: f64, rng: &mut R) -> Result<[f64; 4]> {
    Ok(LimitGaussian::new(eta)?.sample(rng))
}

/// `q(z) = 1 + z₁² − 2z₂² − 2z₃² − 4z₄²`.
pub fn q_statistic(z: &[f64; 4]) -> f64 {
    1.0 + z[0] * z[0] - 2.0 * z[1] * z[1] - 2.0 * z[2] * z[2] - 4.0 * z[3] * z[3]
}

fn sorted(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty sample".into()));
    }
    if samples.iter().any(|x| x.is_nan()) {
        return Err(Error::InvalidArgument("sample contains NaN".into()));
    }
    let mut v = samples.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    Ok(v)
}

/// 1-Wasserstein distance between two empirical measures on the line.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    let a = sorted(a)?;
    let b = sorted(b)?;
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        return Ok(s / a.len() as f64);
    }
    // ∫ |F_A − F_B| over the merged support.
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < a.len() && a[i] == next {
            i += 1;
        }
        while j < b.len() && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(total)
}

/// Quantile coupling against `N(0,1)`: `(1/m) Σ |x_(i) − Φ⁻¹((i − ½)/m)|`.
pub fn wasserstein1_vs_standard_normal(samples: &[f64]) -> Result<f64> {
    let x = sorted(samples)?;
    let normal = Normal::standard();
    let m = x.len() as f64;
    let s: f64 = x
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - normal.inverse_cdf((i as f64 + 0.5) / m)).abs())
        .sum();
    Ok(s / m)
}

/// Ordinary least squares on `(log N, log d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

pub fn rate_slope(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!("rate fit needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidArgument("rate fit needs positive values".into()));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = ((&xs).mean(), (&ys).mean());
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("rate fit needs distinct N values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(RateFit {
        slope,
        intercept,
        residual: (ss / xs.len() as f64).sqrt(),
    })
}

/// `(x − center)/scale` elementwise.
pub fn standardize(samples: &[f64], center: f64, scale: f64) -> Result<Vec<f64>> {
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
    }
    Ok(samples.iter().map(|x| (x - center) / scale).collect())
}

/// Sample mean, unbiased variance and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
}

pub fn summarize(samples: &[f64]) -> Result<SampleSummary> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("summary needs at least 2 samples".into()));
    }
    let mean = samples.mean();
    let variance = samples.variance();
    Ok(SampleSummary {
        count: samples.len(),
        mean,
        variance,
        std_error: (variance / samples.len() as f64).sqrt(),
    })
}

/// Pearson correlation of two equal-length samples.
pub fn correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs two samples of equal length ≥ 2".into()));
    }
    Ok(a.covariance(b) / (a.std_dev() * b.std_dev()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn m_eta_forced_origin() {
        for eta in [0.0, 0.3, -0.7, 1.0] {
            let law = MEtaLaw::new(eta).unwrap();
            assert!((law.from_normals(0.0, 0.0) - 1.0 / (1.0 + eta * eta).sqrt()).abs() < 1e-15);
        }
        assert!(MEtaLaw::new(1.5).is_err());
        assert!(sample_m_eta(f64::NAN, &mut rng(0)).is_err());
    }

    #[test]
    fn m_eta_analytic_moments() {
        for eta in [0.0, 0.4, 1.0] {
            let law = MEtaLaw::new(eta).unwrap();
            assert!(law.raw_moment(1).abs() < 1e-15);
            assert!((law.raw_moment(2) - 1.0).abs() < 1e-14);
            let k3 = law.cumulant(3);
            assert!((law.raw_moment(3) - k3).abs() < 1e-14);
            assert!((law.raw_moment(4) - (law.cumulant(4) + 3.0)).abs() < 1e-12);
        }
        // η = 1: M = (1 − X²)/√2, E[M³] = −(E[X⁶] − 3E[X⁴] + 3E[X²] − 1)/2^{3/2} = −8/2^{3/2}.
        let law = MEtaLaw::new(1.0).unwrap();
        assert!((law.raw_moment(3) + 8.0 / 2f64.powf(1.5)).abs() < 1e-12);
    }

    #[test]
    fn m_eta_sample_moments() {
        let draws = 1_000_000;
        for (seed, eta) in [0.0, 0.5, 1.0].into_iter().enumerate() {
            let law = MEtaLaw::new(eta).unwrap();
            let x = law.sample_many(&mut rng(seed as u64), draws);
            for r in 1..=4u32 {
                let m: f64 = x.iter().map(|v| v.powi(r as i32)).sum::<f64>() / draws as f64;
                let want = law.raw_moment(r);
                let se = ((law.raw_moment(2 * r) - want * want) / draws as f64).sqrt();
                assert!((m - want).abs() < 3.0 * se, "η={eta} r={r}: {m} vs {want} (se {se})");
            }
            if eta == 1.0 {
                assert!(x.iter().all(|&v| v <= 1.0 / 2f64.sqrt()));
            }
        }
    }

    #[test]
    fn sigma_eigenvalues() {
        for i in 0..=20 {
            let eta = i as f64 / 20.0;
            let g = LimitGaussian::new(eta).unwrap();
            let raw = SymmetricEigen::new(sigma_eta(eta)).eigenvalues;
            let mut got: Vec<f64> = raw.iter().copied().collect();
            got.sort_by(f64::total_cmp);
            let mut want = vec![0.0, 1.5, (1.0 - eta) / 8.0, (1.0 + eta) / 4.0];
            want.sort_by(f64::total_cmp);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "η={eta}: {got:?} vs {want:?}");
            }
            assert!(g.eigenvalues().iter().all(|&v| v >= 0.0));
        }
        let e = LimitGaussian::new(1.0).unwrap().eigenvalues();
        for (a, b) in e.iter().zip([0.0, 0.0, 0.5, 1.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn limit_vector_covariance_and_kernel() {
        let eta = 0.3;
        let g = LimitGaussian::new(eta).unwrap();
        let mut r = rng(17);
        let draws = 100_000;
        let zs: Vec<[f64; 4]> = (0..draws).map(|_| g.sample(&mut r)).collect();
        for z in &zs {
            assert!((z[1] + z[2] - z[0]).abs() < 1e-10);
        }
        let sigma = sigma_eta(eta);
        for i in 0..4 {
            for j in 0..4 {
                let prod: Vec<f64> = zs.iter().map(|z| z[i] * z[j]).collect();
                let s = summarize(&prod).unwrap();
                assert!(
                    (s.mean - sigma[(i, j)]).abs() < 3.0 * s.std_error + 1e-12,
                    "Σ[{i}{j}] {} vs {}",
                    s.mean,
                    sigma[(i, j)]
                );
            }
        }
        assert!(sample_limit_vector(2.0, &mut r).is_err());
    }

    #[test]
    fn q_statistic_values() {
        assert_eq!(q_statistic(&[0.0; 4]), 1.0);
        assert_eq!(q_statistic(&[1.0, 1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn q_of_limit_vector_matches_m_eta_moments() {
        let draws = 1_000_000;
        for eta in [0.2, 0.8] {
            let g = LimitGaussian::new(eta).unwrap();
            let law = MEtaLaw::new(eta).unwrap();
            let mut r = rng(5);
            let s = (1.0 + eta * eta).sqrt();
            let q: Vec<f64> = (0..draws).map(|_| q_statistic(&g.sample(&mut r)) / s).collect();
            let m = law.sample_many(&mut rng(6), draws);
            let (sq, sm) = (summarize(&q).unwrap(), summarize(&m).unwrap());
            assert!((sq.mean - sm.mean).abs() < 3.0 * (sq.std_error.powi(2) + sm.std_error.powi(2)).sqrt());
            let v_se = |x: &[f64], mean: f64, var: f64| {
                let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / x.len() as f64;
                ((m4 - var * var) / x.len() as f64).sqrt()
            };
            let se = (v_se(&q, sq.mean, sq.variance).powi(2) + v_se(&m, sm.mean, sm.variance).powi(2)).sqrt();
            assert!((sq.variance - sm.variance).abs() < 3.0 * se, "η={eta}: {} vs {}", sq.variance, sm.variance);
        }
    }

    #[test]
    fn wasserstein_basic() {
        let a = vec![0.3, -1.0, 2.5, 0.0];
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + 0.75).collect();
        assert!((wasserstein1(&a, &b).unwrap() - 0.75).abs() < 1e-15);
        assert!(wasserstein1(&[], &a).is_err());
        assert!(wasserstein1(&[f64::NAN], &a).is_err());
        // Unequal sizes: δ₀ vs ½δ₀ + ½δ₁ is ½.
        assert!((wasserstein1(&[0.0], &[0.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        // Replicating a multiset leaves the measure unchanged.
        let doubled: Vec<f64> = a.iter().chain(&a).copied().collect();
        assert!(wasserstein1(&a, &doubled).unwrap().abs() < 1e-15);
        let three: Vec<f64> = b.iter().chain(&b).chain(&b).copied().collect();
        assert!((wasserstein1(&a, &three).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_normal_fluctuations() {
        let m = 100_000;
        let mut r = rng(99);
        let mut d: Vec<f64> = (0..100)
            .map(|_| {
                let a: Vec<f64> = (0..m).map(|_| r.sample(StandardNormal)).collect();
                let b: Vec<f64> = (0..m).map(|_| r.sample(StandardNormal)).collect();
                wasserstein1(&a, &b).unwrap()
            })
            .collect();
        d.sort_by(f64::total_cmp);
        assert!(d[98] <= 0.02, "99th percentile {}", d[98]);
    }

    #[test]
    fn wasserstein_against_normal() {
        let normal = Normal::standard();
        let m = 1000;
        let q: Vec<f64> = (0..m).map(|i| normal.inverse_cdf((i as f64 + 0.5) / m as f64)).collect();
        assert!(wasserstein1_vs_standard_normal(&q).unwrap() < 1e-12);
        let zeros = vec![0.0; 200_000];
        let d = wasserstein1_vs_standard_normal(&zeros).unwrap();
        assert!((d - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-3);
        assert!(wasserstein1_vs_standard_normal(&[]).is_err());
    }

    #[test]
    fn rate_fits() {
        let pts: Vec<(f64, f64)> = [8.0, 16.0, 32.0, 64.0].iter().map(|&n: &f64| (n, n.powf(-0.5))).collect();
        let f = rate_slope(&pts).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12 && f.residual < 1e-12 && f.intercept.abs() < 1e-12);
        let pts: Vec<(f64, f64)> = [8.0, 16.0, 32.0].iter().map(|&n: &f64| (n, 3.0 * n.powf(-0.25))).collect();
        let f = rate_slope(&pts).unwrap();
        assert!((f.slope + 0.25).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!(rate_slope(&pts[..2]).is_err());
        assert!(rate_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
    }

    #[test]
    fn standardize_contract() {
        let x = vec![1.0, 2.0, 4.0, 7.0];
        assert_eq!(standardize(&x, 0.0, 1.0).unwrap(), x);
        let s = summarize(&x).unwrap();
        let z = summarize(&standardize(&x, s.mean, s.variance.sqrt()).unwrap()).unwrap();
        assert!(z.mean.abs() < 1e-15 && (z.variance - 1.0).abs() < 1e-14);
        assert!(standardize(&x, 0.0, 0.0).is_err());
        assert!(correlation(&x, &x).unwrap() > 0.999_999);
    }

    fn sample_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..40)
    }

    proptest! {
        #[test]
        fn w1_symmetric_and_zero_on_self(a in sample_vec(), b in sample_vec()) {
            let ab = wasserstein1(&a, &b).unwrap();
            let ba = wasserstein1(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab));
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn w1_triangle(a in sample_vec(), b in sample_vec(), c in sample_vec()) {
            let ab = wasserstein1(&a, &b).unwrap();
            let bc = wasserstein1(&b, &c).unwrap();
            let ac = wasserstein1(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12 * (1.0 + ab + bc));
        }

        #[test]
        fn w1_translation(a in sample_vec(), b in sample_vec(), c in -50.0f64..50.0) {
            let d = wasserstein1(&a, &b).unwrap();
            let a2: Vec<f64> = a.iter().map(|x| x + c).collect();
            let b2: Vec<f64> = b.iter().map(|x| x + c).collect();
            let d2 = wasserstein1(&a2, &b2).unwrap();
            prop_assert!((d - d2).abs() <= 1e-9 * (1.0 + d));
            let shift = wasserstein1(&a, &a2).unwrap();
            prop_assert!((shift - c.abs()).abs() <= 1e-9 * (1.0 + c.abs()));
        }
    }
}
