//! Wiener-chaos machinery for the Leray measure and the nodal length.
//!
//! Two independent routes are provided for each projection:
//!
//! * **quadrature**: grid averages of Hermite polynomials of `T_n` and its
//!   normalized gradient. A grid with `M ≥ 4q√n + 1` integrates the
//!   degree-`2q` trigonometric integrands exactly.
//! * **closed form**: algebraic expressions in the coefficients `a_λ`,
//!   i.e. `Z_n[2] = −(2π)^{-1/2} N_n^{-1} Σ_{Λ⁺}(|a_λ|² − 1)` and the
//!   `W`-vector representation of `L_n[4]`.
//!
//! The two share no intermediate values, so their agreement is a real check.
//! Hermite polynomials are the probabilists' ones (`H₂(t) = t² − 1`).

use std::f64::consts::PI;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{covariance_grid, FieldGrid, WaveCoefficients};
use crate::lattice::LatticePointSet;

/// Largest `k + m` accepted by [`alpha`].
pub const ALPHA_MAX_ORDER: u32 = 12;

/// Default truncation for the Leray variance series.
pub const DEFAULT_Q_MAX: u32 = 8;

/// `1/√(2π)`, the mean Leray measure.
pub fn expected_leray() -> f64 {
    1.0 / (2.0 * PI).sqrt()
}

/// `H_k(t)` via `H_k = t H_{k−1} − (k−1) H_{k−2}`.
pub fn hermite(k: usize, t: f64) -> f64 {
    let (mut prev, mut cur) = (1.0, t);
    if k == 0 {
        return prev;
    }
    for j in 2..=k {
        let next = t * cur - (j - 1) as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Fill `out[j] = H_j(t)` for `j < out.len()`.
pub fn hermite_all(t: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = t;
    }
    for j in 2..out.len() {
        out[j] = t * out[j - 1] - (j - 1) as f64 * out[j - 2];
    }
}

/// `H_j(0)` exactly: zero for odd `j`, `(−1)^{j/2} (j−1)!!` for even `j`.
pub fn hermite_zero(j: u32) -> i128 {
    if j % 2 == 1 {
        return 0;
    }
    let dfact: i128 = (1..j as i128).step_by(2).product();
    if (j / 2).is_multiple_of(2) {
        dfact
    } else {
        -dfact
    }
}

/// `n!` in exact arithmetic (`n ≤ 34`).
pub fn factorial(n: u32) -> u128 {
    assert!(n <= 34, "{n}! overflows u128");
    (1..=n as u128).product()
}

fn binomial(n: u32, k: u32) -> u128 {
    let k = k.min(n - k);
    (0..k as u128).fold(1u128, |acc, i| acc * (n as u128 - i) / (i + 1))
}

/// `β_{2q} = H_{2q}(0)/√(2π)`.
pub fn beta(q: u32) -> f64 {
    hermite_zero(2 * q) as f64 / (2.0 * PI).sqrt()
}

fn std_normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * PI).sqrt()
}

/// Coefficients of the ε-window: `β^ε_0 = (1/2ε)∫_{−ε}^{ε} φ`, `β^ε_{2q} = −φ(ε) H_{2q−1}(ε)/ε`.
pub fn beta_eps(q: u32, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    if q == 0 {
        Ok(statrs::function::erf::erf(epsilon / 2f64.sqrt()) / (2.0 * epsilon))
    } else {
        Ok(-std_normal_pdf(epsilon) * hermite(2 * q as usize - 1, epsilon) / epsilon)
    }
}

/// `β_{2q}² / (2q)!`, via `c_q = c_{q−1} (2q−1)/(2q)` from `c_0 = 1/(2π)`.
pub fn beta_sq_over_factorial(q: u32) -> f64 {
    (1..=q).fold(1.0 / (2.0 * PI), |c, j| c * (2 * j - 1) as f64 / (2 * j) as f64)
}

/// `p_N(x) = Σ_j (−1)^{j+N} C(N,j) (2j+1)!/(j!)² x^j`, by Horner's rule.
pub fn swinging_polynomial(big_n: u32, x: f64) -> f64 {
    let coeff = |j: u32| -> f64 {
        let swing = factorial(2 * j + 1) / (factorial(j) * factorial(j));
        let mag = (binomial(big_n, j) * swing) as f64;
        if (j + big_n).is_multiple_of(2) {
            mag
        } else {
            -mag
        }
    };
    (0..=big_n).rev().fold(0.0, |acc, j| acc * x + coeff(j))
}

/// `α_{2k,2m} = √(π/2) (2k)!(2m)!/(k! m!) 2^{−(k+m)} p_{k+m}(1/4)`.
pub fn alpha(k: u32, m: u32) -> Result<f64> {
    if k + m > ALPHA_MAX_ORDER {
        return Err(Error::OutOfRange(format!(
            "alpha({k}, {m}): k + m must be at most {ALPHA_MAX_ORDER}"
        )));
    }
    let ratio = (factorial(2 * k) * factorial(2 * m)) as f64 / (factorial(k) * factorial(m)) as f64;
    Ok((PI / 2.0).sqrt() * ratio * 0.5f64.powi((k + m) as i32) * swinging_polynomial(k + m, 0.25))
}

/// Cached `H_j(0)`, `β_{2q}` and `α_{2k,2m}` up to `q_max`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChaosCoefficients {
    q_max: u32,
    hermite_zero: Vec<f64>,
    beta: Vec<f64>,
    alpha: Vec<Vec<f64>>,
}

impl ChaosCoefficients {
    pub fn new(q_max: u32) -> Result<Self> {
        if q_max > ALPHA_MAX_ORDER {
            return Err(Error::OutOfRange(format!("q_max {q_max} > {ALPHA_MAX_ORDER}")));
        }
        let hermite_zero = (0..=2 * q_max).map(|j| hermite_zero(j) as f64).collect();
        let beta = (0..=q_max).map(beta).collect();
        let alpha = (0..=q_max)
            .map(|k| (0..=q_max - k).map(|m| alpha(k, m)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            q_max,
            hermite_zero,
            beta,
            alpha,
        })
    }

    pub fn q_max(&self) -> u32 {
        self.q_max
    }

    pub fn beta(&self, q: u32) -> f64 {
        self.beta[q as usize]
    }

    pub fn alpha(&self, k: u32, m: u32) -> f64 {
        self.alpha[k as usize][m as usize]
    }

    pub fn hermite_zero(&self, j: u32) -> f64 {
        self.hermite_zero[j as usize]
    }
}

/// `Σ_{q=1..Q} β_{2q}²/(2q)! x^{2q}`, which increases to `1/(2π√(1−x²)) − 1/(2π)`.
pub fn dirac_kernel_partial_sum(x: f64, q_terms: u32) -> Result<f64> {
    if !(x.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("|x| must be < 1, got {x}")));
    }
    let x2 = x * x;
    let mut c = 1.0 / (2.0 * PI);
    let mut pow = 1.0;
    let mut sum = 0.0;
    for q in 1..=q_terms {
        c *= (2 * q - 1) as f64 / (2 * q) as f64;
        pow *= x2;
        sum += c * pow;
    }
    Ok(sum)
}

/// Smallest odd `M` with `M ≥ 4q√n + 1`.
pub fn exact_grid_size(n: u64, q: u32) -> usize {
    let m = (4.0 * q as f64 * (n as f64).sqrt() + 1.0).ceil() as usize;
    if m.is_multiple_of(2) {
        m + 1
    } else {
        m
    }
}

/// Whether an `M`-grid integrates degree-`2q` chaos integrands exactly.
pub fn grid_is_exact(m: usize, n: u64, q: u32) -> bool {
    m as f64 >= 4.0 * q as f64 * (n as f64).sqrt() + 1.0
}

/// A quadrature value tagged with whether the exactness rule held.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub value: f64,
    /// `false` means the grid was below `4q√n + 1` and the value carries aliasing error.
    pub exact: bool,
}

/// `Z_n[2q] = β_{2q}/(2q)! · ∫ H_{2q}(T_n)`, by grid average.
pub fn leray_chaos_projection(grid: &FieldGrid, q: u32) -> Result<Projection> {
    if q == 0 || 2 * q > 34 {
        return Err(Error::OutOfRange(format!("leray chaos order q={q} (need 1 ≤ q ≤ 17)")));
    }
    let deg = 2 * q as usize;
    let mut h = vec![0.0; deg + 1];
    let sum: f64 = grid
        .values()
        .iter()
        .map(|&t| {
            hermite_all(t, &mut h);
            h[deg]
        })
        .sum();
    let avg = sum / grid.values().len() as f64;
    Ok(Projection {
        value: beta(q) / factorial(2 * q) as f64 * avg,
        exact: grid_is_exact(grid.resolution(), grid.frequency().n(), q),
    })
}

/// `Z_n[2] = −(1/√(2π)) (1/N_n) Σ_{λ∈Λ_n⁺} (|a_λ|² − 1)`.
pub fn leray_second_chaos(coeffs: &WaveCoefficients) -> f64 {
    let big_n = coeffs.lattice().cardinality() as f64;
    let s: f64 = coeffs.moduli_squared().map(|x| x - 1.0).sum();
    -s / (big_n * (2.0 * PI).sqrt())
}

/// `Var(Z_n[2]) = 1/(4π N_n)`.
pub fn leray_variance_second(n_points: usize) -> f64 {
    1.0 / (4.0 * PI * n_points as f64)
}

/// `Σ_{q=1..Q} β_{2q}²/(2q)! ∫ r_n^{2q}`, with the moments of `r_n` by grid quadrature.
pub fn leray_total_variance(set: &std::sync::Arc<LatticePointSet>, q_terms: u32, m: usize) -> Result<f64> {
    if q_terms == 0 {
        return Err(Error::InvalidArgument("need at least one chaos term".into()));
    }
    if !grid_is_exact(m, set.n(), q_terms) {
        return Err(Error::GridTooSmall {
            got: m,
            need: exact_grid_size(set.n(), q_terms),
        });
    }
    let r = covariance_grid(set, m)?;
    let cells = r.len() as f64;
    let r2: Vec<f64> = r.iter().map(|v| v * v).collect();
    let mut pow = vec![1.0; r.len()];
    let mut total = 0.0;
    for q in 1..=q_terms {
        pow.iter_mut().zip(&r2).for_each(|(p, s)| *p *= s);
        let moment = pow.iter().sum::<f64>() / cells;
        total += beta_sq_over_factorial(q) * moment;
    }
    Ok(total)
}

/// `W(n) = (N_n/2)^{-1/2} Σ_{Λ⁺} (|a_λ|² − 1) (1, λ₁²/n, λ₂²/n, λ₁λ₂/n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WVector {
    pub w: [f64; 4],
}

impl WVector {
    /// `W₁² − 2W₂² − 2W₃² − 4W₄²`.
    pub fn quartic_part(&self) -> f64 {
        let [w1, w2, w3, w4] = self.w;
        w1 * w1 - 2.0 * w2 * w2 - 2.0 * w3 * w3 - 4.0 * w4 * w4
    }

    /// `p(W₁, W₂, W₄) = 1 − x² − 4y² + 4xy − 4z²`.
    pub fn polynomial_p(&self) -> f64 {
        let [x, y, _, z] = self.w;
        1.0 - x * x - 4.0 * y * y + 4.0 * x * y - 4.0 * z * z
    }
}

pub fn w_vector(coeffs: &WaveCoefficients) -> WVector {
    let set = coeffs.lattice();
    let n = set.n() as f64;
    let scale = 1.0 / (set.cardinality() as f64 / 2.0).sqrt();
    let mut w = [0.0; 4];
    for (&(l1, l2), a2) in set.half_points().iter().zip(coeffs.moduli_squared()) {
        let d = a2 - 1.0;
        let (l1, l2) = (l1 as f64, l2 as f64);
        w[0] += d;
        w[1] += d * l1 * l1 / n;
        w[2] += d * l2 * l2 / n;
        w[3] += d * l1 * l2 / n;
    }
    w.iter_mut().for_each(|x| *x *= scale);
    WVector { w }
}

/// Covariance of `W(n)`, or of its Gaussian limit when `mu4 = η`.
pub fn sigma_n(mu4: f64) -> Matrix4<f64> {
    let d = (3.0 + mu4) / 8.0;
    let o = (1.0 - mu4) / 8.0;
    Matrix4::new(
        1.0, 0.5, 0.5, 0.0, //
        0.5, d, o, 0.0, //
        0.5, o, d, 0.0, //
        0.0, 0.0, 0.0, o,
    )
}

/// `(1/2)(1/N_n) Σ_{λ∈Λ_n} |a_λ|⁴` (each `Λ⁺` term stands for `±λ`).
pub fn fourth_moment_part(coeffs: &WaveCoefficients) -> f64 {
    let big_n = coeffs.lattice().cardinality() as f64;
    coeffs.moduli_squared().map(|x| x * x).sum::<f64>() / big_n
}

/// `ψ_n = (1/2)(1/N_n) Σ_{λ∈Λ_n} (|a_λ|⁴ − 2)`.
pub fn psi(coeffs: &WaveCoefficients) -> f64 {
    let big_n = coeffs.lattice().cardinality() as f64;
    coeffs.moduli_squared().map(|x| x * x - 2.0).sum::<f64>() / big_n
}

fn fourth_chaos_prefactor(set: &LatticePointSet) -> f64 {
    let big_n = set.cardinality() as f64;
    (set.frequency().energy() / (big_n * big_n)).sqrt() / 512f64.sqrt()
}

/// `L_n[4]` through `p(Ŵ) + ψ_n`, with `Ŵ = (W₁, W₂, W₄)`.
pub fn nodal_fourth_chaos_polynomial_form(coeffs: &WaveCoefficients) -> f64 {
    fourth_chaos_prefactor(coeffs.lattice()) * (w_vector(coeffs).polynomial_p() + psi(coeffs))
}

/// `L_n[4] = √(E_n/N_n²) (1/√512) (W₁² − 2W₂² − 2W₃² − 4W₄² + (1/2N_n) Σ_λ |a_λ|⁴)`.
pub fn nodal_fourth_chaos_closed(coeffs: &WaveCoefficients) -> f64 {
    let w = w_vector(coeffs);
    let pre = fourth_chaos_prefactor(coeffs.lattice());
    let fourth = fourth_moment_part(coeffs);
    let value = pre * (w.quartic_part() + fourth);
    let poly = pre * (w.polynomial_p() + psi(coeffs));
    let scale = pre * (w.w.iter().map(|x| x * x).sum::<f64>() + fourth + 1.0);
    debug_assert!(
        (value - poly).abs() <= 1e-10 * scale,
        "closed forms disagree: {value} vs {poly}"
    );
    value
}

/// `L_n[4]` from the six grid integrals of `H₄(T)`, `H₄(∂̃ᵢT)`, `H₂H₂` products.
pub fn nodal_fourth_chaos_quadrature(grid: &FieldGrid) -> Result<Projection> {
    let (g1, g2) = match (grid.grad1(), grid.grad2()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::MissingGradient),
    };
    let t = grid.values();
    let h2 = |x: f64| x * x - 1.0;
    let h4 = |x: f64| {
        let x2 = x * x;
        x2 * x2 - 6.0 * x2 + 3.0
    };
    let mut acc = [0.0f64; 6];
    for i in 0..t.len() {
        let (x, y, z) = (t[i], g1[i], g2[i]);
        let (hx, hy, hz) = (h2(x), h2(y), h2(z));
        acc[0] += h4(x);
        acc[1] += h4(y);
        acc[2] += h4(z);
        acc[3] += hx * hy;
        acc[4] += hx * hz;
        acc[5] += hy * hz;
    }
    let cells = t.len() as f64;
    let [i0, i1, i2, i3, i4, i5] = acc.map(|s| s / cells);
    let pre = grid.frequency().energy().sqrt() / (128.0 * 2f64.sqrt());
    Ok(Projection {
        value: pre * (8.0 * i0 - i1 - i2 - 8.0 * i3 - 8.0 * i4 - 2.0 * i5),
        exact: grid_is_exact(grid.resolution(), grid.frequency().n(), 2),
    })
}

/// `L_n[2q]` for `q ∈ {2, 3, 4}` from the general triple-sum expansion, by grid average.
pub fn nodal_chaos_projection(grid: &FieldGrid, q: u32) -> Result<Projection> {
    if !(2..=4).contains(&q) {
        return Err(Error::OutOfRange(format!("nodal chaos order q={q} (supported: 2, 3, 4)")));
    }
    let (g1, g2) = match (grid.grad1(), grid.grad2()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::MissingGradient),
    };
    let table = ChaosCoefficients::new(q)?;
    // (degree of T, degree of ∂̃₁T, degree of ∂̃₂T, coefficient)
    let mut terms = Vec::new();
    for u in 0..=q {
        for k in 0..=u {
            let c = table.alpha(k, u - k) * table.beta(q - u)
                / (factorial(2 * k) * factorial(2 * u - 2 * k) * factorial(2 * q - 2 * u)) as f64;
            terms.push(((2 * q - 2 * u) as usize, (2 * k) as usize, (2 * u - 2 * k) as usize, c));
        }
    }
    let deg = 2 * q as usize + 1;
    let (mut ht, mut h1, mut h2) = (vec![0.0; deg], vec![0.0; deg], vec![0.0; deg]);
    let t = grid.values();
    let mut sum = 0.0;
    for i in 0..t.len() {
        hermite_all(t[i], &mut ht);
        hermite_all(g1[i], &mut h1);
        hermite_all(g2[i], &mut h2);
        sum += terms.iter().map(|&(a, b, c, w)| w * ht[a] * h1[b] * h2[c]).sum::<f64>();
    }
    let pre = (grid.frequency().energy() / 2.0).sqrt();
    Ok(Projection {
        value: pre * sum / t.len() as f64,
        exact: grid_is_exact(grid.resolution(), grid.frequency().n(), q),
    })
}

/// `c_n = (1 + μ̂_n(4)²)/512`.
pub fn c_n(mu4: f64) -> f64 {
    (1.0 + mu4 * mu4) / 512.0
}

/// `Var(L_n[4]) = E_n/(512 N_n²) (1 + μ̂_n(4)² + 34/N_n)`.
pub fn var_fourth_exact(n: u64, n_points: usize, mu4: f64) -> f64 {
    let energy = 4.0 * PI * PI * n as f64;
    let big_n = n_points as f64;
    energy / (512.0 * big_n * big_n) * (1.0 + mu4 * mu4 + 34.0 / big_n)
}

/// `Var(L_n[4])` computed from the closed form: `E_n/(512 N_n²) (1 + μ̂_n(4)² − 2/N_n)`.
///
/// The pieces are `Var(W₁² − 2W₂² − 2W₃² − 4W₄²) = 1 + μ̂² + 12/N_n`,
/// `Var((1/2N_n)Σ|a_λ|⁴) = 10/N_n` and their covariance `−12/N_n`.
pub fn var_fourth_closed_form(n: u64, n_points: usize, mu4: f64) -> f64 {
    let energy = 4.0 * PI * PI * n as f64;
    let big_n = n_points as f64;
    energy / (512.0 * big_n * big_n) * (1.0 + mu4 * mu4 - 2.0 / big_n)
}

/// Leading-order nodal variance `c_n E_n / N_n²`.
pub fn nodal_variance_leading(n: u64, n_points: usize, mu4: f64) -> f64 {
    let big_n = n_points as f64;
    c_n(mu4) * 4.0 * PI * PI * n as f64 / (big_n * big_n)
}
