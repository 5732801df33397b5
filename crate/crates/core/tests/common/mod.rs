//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rampsafe::numerics::RngStream;
use rampsafe::optimizer::CgSettings;
use rampsafe::policy::{MlpSpec, PolicyParams};
use rampsafe::rollout::{RolloutBatch, StepRecord};
use rampsafe::safety::{Axis, SafetyConstraint};

pub const CG: CgSettings = CgSettings { iters: 200, tol: 1e-14 };

/// `min gᵀΔ  s.t.  ½ΔᵀHΔ ≤ δ,  z_i + c_iᵀΔ ≤ 0` with a known strictly
/// feasible point.
#[derive(Debug, Clone)]
pub struct QpInstance {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub c: Vec<DVector<f64>>,
    pub z: Vec<f64>,
    pub delta: f64,
    pub interior: DVector<f64>,
}

impl QpInstance {
    pub fn random(rng: &mut RngStream, max_dim: usize, max_cons: usize) -> Self {
        let n = 2 + rng.index(max_dim - 1);
        let m = rng.index(max_cons + 1);
        let a = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
        let h = a.transpose() * &a + DMatrix::identity(n, n) * 0.5;
        let g = DVector::from_fn(n, |_, _| rng.standard_normal());
        let delta = rng.uniform(0.05, 1.0);
        let dir = DVector::from_fn(n, |_, _| rng.standard_normal());
        let q = 0.5 * dir.dot(&(&h * &dir));
        let rho = rng.uniform(0.0, 0.5);
        let interior = &dir * (rho * delta / q).sqrt();
        let c: Vec<DVector<f64>> = (0..m).map(|_| DVector::from_fn(n, |_, _| rng.standard_normal())).collect();
        let z = c
            .iter()
            .map(|ci| -ci.dot(&interior) - rng.uniform(0.01, 1.0) * ci.norm() * (2.0 * delta).sqrt() * 0.5)
            .collect();
        Self {
            h,
            g,
            c,
            z,
            delta,
            interior,
        }
    }

    pub fn hvp(&self) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
        move |v: &[f64]| (&self.h * DVector::from_column_slice(v)).as_slice().to_vec()
    }

    pub fn g_vec(&self) -> Vec<f64> {
        self.g.as_slice().to_vec()
    }

    pub fn c_cols(&self) -> Vec<Vec<f64>> {
        self.c.iter().map(|c| c.as_slice().to_vec()).collect()
    }

    pub fn quad(&self, d: &DVector<f64>) -> f64 {
        0.5 * d.dot(&(&self.h * d))
    }

    /// Largest violation of the KKT conditions at `(Δ, λ, ν)`.
    pub fn kkt_residual(&self, step: &[f64], lambda: f64, nu: &[f64]) -> f64 {
        let d = DVector::from_column_slice(step);
        let mut stat = &self.g + &self.h * &d * lambda;
        for (ci, &ni) in self.c.iter().zip(nu) {
            stat += ci * ni;
        }
        let q = self.quad(&d);
        let mut worst = stat.amax();
        worst = worst.max((q - self.delta).max(0.0));
        worst = worst.max((lambda * (q - self.delta)).abs());
        worst = worst.max((-lambda).max(0.0));
        for ((ci, &zi), &ni) in self.c.iter().zip(&self.z).zip(nu) {
            let s = zi + ci.dot(&d);
            worst = worst.max(s.max(0.0)).max((ni * s).abs()).max((-ni).max(0.0));
        }
        worst
    }
}

/// Log-barrier interior-point solve of the instance from its interior point.
pub fn barrier_qp_oracle(inst: &QpInstance) -> (f64, DVector<f64>) {
    let n = inst.g.len();
    let phi = |d: &DVector<f64>, t: f64| -> f64 {
        let slack_q = inst.delta - inst.quad(d);
        if slack_q <= 0.0 {
            return f64::INFINITY;
        }
        let mut v = t * inst.g.dot(d) - slack_q.ln();
        for (ci, &zi) in inst.c.iter().zip(&inst.z) {
            let s = -zi - ci.dot(d);
            if s <= 0.0 {
                return f64::INFINITY;
            }
            v -= s.ln();
        }
        v
    };
    let mut d = inst.interior.clone();
    let mut t = 1.0;
    while t < 1e12 {
        for _ in 0..200 {
            let hd = &inst.h * &d;
            let sq = inst.delta - inst.quad(&d);
            let mut grad = &inst.g * t + &hd / sq;
            let mut hess = &inst.h / sq + &hd * hd.transpose() / (sq * sq);
            for (ci, &zi) in inst.c.iter().zip(&inst.z) {
                let s = -zi - ci.dot(&d);
                grad += ci / s;
                hess += ci * ci.transpose() / (s * s);
            }
            let step = hess.clone().lu().solve(&(-&grad)).expect("barrier Hessian is non-singular");
            let decrement = -grad.dot(&step);
            if decrement < 1e-14 {
                break;
            }
            let f0 = phi(&d, t);
            let mut s = 1.0;
            while phi(&(&d + &step * s), t) > f0 - 0.25 * s * decrement {
                s *= 0.5;
                if s < 1e-20 {
                    break;
                }
            }
            d += &step * s;
        }
        t *= 4.0;
    }
    assert_eq!(d.len(), n);
    (inst.g.dot(&d), d)
}

/// `min ½ΔᵀHΔ  s.t.  z_i + c_iᵀΔ ≤ 0` by Dykstra's alternating projections
/// in the `H`-metric.
pub fn dykstra_delta_min(h: &DMatrix<f64>, c: &[DVector<f64>], z: &[f64]) -> f64 {
    let l = h.clone().cholesky().expect("H is SPD").l();
    let l_inv = l.clone().try_inverse().expect("L invertible");
    let rows: Vec<DVector<f64>> = c.iter().map(|ci| &l_inv * ci).collect();
    let n = h.nrows();
    let mut y = DVector::zeros(n);
    let mut corr = vec![DVector::<f64>::zeros(n); rows.len()];
    for _ in 0..200_000 {
        let prev = y.clone();
        for (k, (a, &zk)) in rows.iter().zip(z).enumerate() {
            let x = &y + &corr[k];
            let viol = a.dot(&x) + zk;
            let proj = if viol > 0.0 { &x - a * (viol / a.norm_squared()) } else { x.clone() };
            corr[k] = &x - &proj;
            y = proj;
        }
        if (&y - &prev).amax() < 1e-15 {
            break;
        }
    }
    0.5 * y.norm_squared()
}

/// Central-difference gradient with step `h`.
pub fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Hessian with step `h`.
pub fn fd_hessian(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> DMatrix<f64> {
    let n = x.len();
    let eval = |i: usize, si: f64, j: usize, sj: f64| {
        let mut p = x.to_vec();
        p[i] += si * h;
        p[j] += sj * h;
        f(&p)
    };
    DMatrix::from_fn(n, n, |i, j| {
        (eval(i, 1.0, j, 1.0) - eval(i, 1.0, j, -1.0) - eval(i, -1.0, j, 1.0) + eval(i, -1.0, j, -1.0)) / (4.0 * h * h)
    })
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

pub fn random_policy(rng: &mut RngStream, obs_dim: usize, hidden: Vec<usize>) -> PolicyParams {
    let spec = MlpSpec::new(obs_dim, hidden, 1);
    let p = PolicyParams::init(spec, -0.3, 0.5, rng).unwrap();
    let theta: Vec<f64> = p.theta.iter().map(|t| t + 0.1 * rng.standard_normal()).collect();
    p.with_theta(theta).unwrap()
}

/// Batch with random observations, actions, advantages and one coupled
/// constraint row per step.
pub fn random_batch(rng: &mut RngStream, obs_dim: usize, n: usize) -> RolloutBatch {
    let steps = (0..n)
        .map(|i| {
            let psi = rng.uniform(-3.0, 3.0);
            StepRecord {
                episode: i,
                obs: (0..obs_dim).map(|_| rng.standard_normal()).collect(),
                raw_action: vec![rng.standard_normal()],
                filtered_action: [0.0; 2],
                action_map: vec![[psi.cos(), psi.sin()]],
                action_offset: [rng.standard_normal(), rng.standard_normal()],
                reward: rng.standard_normal(),
                ret: rng.standard_normal(),
                advantage: rng.standard_normal(),
                constraints: vec![SafetyConstraint {
                    axis: Axis::Coupled,
                    a: [rng.standard_normal(), rng.standard_normal()],
                    b: rng.standard_normal(),
                }],
                done: true,
                infeasible: false,
            }
        })
        .collect();
    RolloutBatch { steps, episodes: vec![] }
}

/// Mann–Kendall statistic S and its two-sided normal-approximation z score
/// (no tie correction).
pub fn mann_kendall(xs: &[f64]) -> (i64, f64) {
    let n = xs.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += match xs[j].partial_cmp(&xs[i]) {
                Some(std::cmp::Ordering::Greater) => 1,
                Some(std::cmp::Ordering::Less) => -1,
                _ => 0,
            };
        }
    }
    let nf = n as f64;
    let var = nf * (nf - 1.0) * (2.0 * nf + 5.0) / 18.0;
    let z = if s > 0 {
        (s as f64 - 1.0) / var.sqrt()
    } else if s < 0 {
        (s as f64 + 1.0) / var.sqrt()
    } else {
        0.0
    };
    (s, z)
}
