//! Deterministic numerical kernels shared by the simulator, the safety layer
//! and the optimizer.
//!
//! Everything here is 64-bit floating point. Random numbers come from
//! [`RngStream`], a ChaCha8 generator whose stream id is derived from a
//! slash-separated name path, so `"episode-3/host-noise"` is reproducible on
//! its own and independent of `"episode-3/ego-noise"`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

// ---------------------------------------------------------------------------
// Random streams
// ---------------------------------------------------------------------------

/// Seeded, named random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    path: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_path(seed, String::new())
    }

    fn with_path(seed: u64, path: String) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(fnv1a(path.as_bytes()));
        Self { seed, path, rng }
    }

    /// Independent child stream. The child depends only on the root seed and
    /// the full name path, never on how much the parent has been consumed.
    pub fn substream(&self, name: &str) -> RngStream {
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}/{}", self.path, name)
        };
        Self::with_path(self.seed, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw on `[lo, hi)`; returns `lo` for an empty range.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return lo;
        }
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        self.rng.random_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// 64-bit FNV-1a. Stable across platforms and compiler versions, unlike
/// `std::hash::DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// ---------------------------------------------------------------------------
// Gaussian helpers
// ---------------------------------------------------------------------------

/// Standard normal CDF, `0.5 * erfc(-z / sqrt(2))`.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / SQRT_2PI
}

// Acklam's rational approximation (relative error ~1.15e-9 before refinement).
const ICDF_A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const ICDF_B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const ICDF_C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const ICDF_D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];
const ICDF_P_LOW: f64 = 0.02425;

/// Inverse of the standard normal CDF on the open interval (0, 1).
///
/// Rational approximation followed by one Halley refinement step. The upper
/// half is computed by reflection so that `Φ⁻¹(1-η) = -Φ⁻¹(η)` holds exactly
/// whenever `1-η` is representable.
pub fn inv_std_normal_cdf(eta: f64) -> Result<f64> {
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::domain(format!(
            "inverse normal CDF needs eta in (0,1), got {eta}"
        )));
    }
    if eta == 0.5 {
        return Ok(0.0);
    }
    if eta > 0.5 {
        return Ok(-lower_inv_cdf(1.0 - eta));
    }
    Ok(lower_inv_cdf(eta))
}

fn lower_inv_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 0.5);
    let x = if p < ICDF_P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        let num = ((((ICDF_C[0] * q + ICDF_C[1]) * q + ICDF_C[2]) * q + ICDF_C[3]) * q
            + ICDF_C[4])
            * q
            + ICDF_C[5];
        let den = (((ICDF_D[0] * q + ICDF_D[1]) * q + ICDF_D[2]) * q + ICDF_D[3]) * q + 1.0;
        num / den
    } else {
        let q = p - 0.5;
        let r = q * q;
        let num = (((((ICDF_A[0] * r + ICDF_A[1]) * r + ICDF_A[2]) * r + ICDF_A[3]) * r
            + ICDF_A[4])
            * r
            + ICDF_A[5])
            * q;
        let den = ((((ICDF_B[0] * r + ICDF_B[1]) * r + ICDF_B[2]) * r + ICDF_B[3]) * r
            + ICDF_B[4])
            * r
            + 1.0;
        num / den
    };
    // Halley step
    let e = std_normal_cdf(x) - p;
    let u = e * SQRT_2PI * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Draws `mean + sqrt(var) * z` componentwise with `z ~ N(0, I)`.
///
/// One standard normal is consumed per component even when its variance is
/// zero, so the stream position never depends on the covariance.
pub fn sample_gaussian(rng: &mut RngStream, mean: &[f64], var: &[f64]) -> Result<Vec<f64>> {
    crate::error::ensure_dim(mean.len(), var.len())?;
    if let Some(v) = var.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::domain(format!("variance must be finite and >= 0, got {v}")));
    }
    Ok(mean
        .iter()
        .zip(var)
        .map(|(m, v)| {
            let z = rng.standard_normal();
            m + v.sqrt() * z
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final residual norm `‖Hx - b‖`.
    pub residual: f64,
}

/// Conjugate gradients for `Hx = b` with `H` given only through `matvec`.
///
/// Starts from `x = 0` and stops when `‖r‖ <= tol·‖b‖` or after `iters`
/// iterations. `H` must be symmetric positive definite.
pub fn conjugate_gradient<F>(matvec: F, b: &[f64], iters: usize, tol: f64) -> CgSolution
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let threshold = tol * norm(b);
    let mut k = 0;
    while k < iters && rr.sqrt() > threshold {
        let hp = matvec(&p);
        let php = dot(&p, &hp);
        if !(php > 0.0) {
            break;
        }
        let step = rr / php;
        axpy(step, &p, &mut x);
        axpy(-step, &hp, &mut r);
        let rr_next = dot(&r, &r);
        let beta = rr_next / rr;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_next;
        k += 1;
    }
    CgSolution {
        x,
        iterations: k,
        residual: rr.sqrt(),
    }
}

/// Solves a small dense system by Gaussian elimination with partial
/// pivoting. Returns `None` when the matrix is numerically singular.
pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, bi)| {
            let mut r = row.clone();
            r.push(*bi);
            r
        })
        .collect();
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[pivot][col].abs() <= 1e-13 * scale {
            return None;
        }
        m.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                let (upper, lower) = m.split_at_mut(row);
                for (a, b) in lower[0][col..].iter_mut().zip(&upper[col][col..]) {
                    *a -= f * b;
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    Some(x)
}

/// Central-difference gradient, `(f(θ+h·eᵢ) - f(θ-h·eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}
