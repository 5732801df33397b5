//! Constrained trust-region policy update.
//!
//! Solves, for the linearized problem around the current parameters,
//!
//! ```text
//! min gᵀΔ   s.t.  ½ΔᵀHΔ ≤ δ,   z + CᵀΔ ≤ 0
//! ```
//!
//! through its dual. With `r = gᵀH⁻¹g`, `p = CᵀH⁻¹g`, `S = CᵀH⁻¹C` and a
//! candidate active set `A`, the dual optimum is available in closed form:
//!
//! ```text
//! λ = √((r − pᵀS⁻¹p) / (2δ − zᵀS⁻¹z)),   ν_A = S⁻¹(λz_A − p_A)
//! Δ = −H⁻¹(g + Cν) / λ
//! ```
//!
//! With at most a handful of constraints every active set is enumerated and
//! the best KKT-consistent candidate is kept. When the linearized problem
//! has no solution inside the trust region a retrieval step descends on the
//! violated constraints instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{conjugate_gradient, dot, norm, solve_dense};
use crate::policy::{
    constraint_gradient, constraint_surrogate, critic_update, mean_kl, policy_gradient, CriticConfig, CriticParams,
    FisherOperator, GradNormalization, PolicyParams,
};
use crate::rollout::RolloutBatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustRegionConfig {
    /// KL radius δ, nats.
    pub max_kl: f64,
    pub damping: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub backtrack_coef: f64,
    pub max_backtracks: usize,
    /// Line search accepts sampled KL up to `kl_slack·δ`.
    pub kl_slack: f64,
    pub line_search: bool,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            max_kl: 0.01,
            damping: 0.1,
            cg_iters: 20,
            cg_tol: 1e-10,
            backtrack_coef: 0.5,
            max_backtracks: 10,
            kl_slack: 1.5,
            line_search: true,
        }
    }
}

impl TrustRegionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_kl > 0.0
            && self.max_kl.is_finite()
            && self.damping > 0.0
            && self.damping.is_finite()
            && self.cg_iters > 0
            && self.backtrack_coef > 0.0
            && self.backtrack_coef < 1.0
            && self.kl_slack >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid trust-region config: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    Kkt,
    Retrieval,
    #[default]
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepReport {
    pub mode: StepMode,
    pub lambda: f64,
    pub nu: Vec<f64>,
    pub delta_min: f64,
    pub feasible: bool,
    /// `CᵀΔθ` per constraint for the proposed full step.
    pub predicted_constraint_change: Vec<f64>,
    pub z: Vec<f64>,
    /// Constraint slacks re-estimated at the accepted parameters.
    pub z_after: Vec<f64>,
    pub grad_norm: f64,
    pub kl: f64,
    pub backtracks: usize,
    pub step_fraction: f64,
    pub accepted: bool,
    pub critic_loss_before: f64,
    pub critic_loss_after: f64,
    pub diagnostic: Option<String>,
}

/// Settings for the linear solves against `H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgSettings {
    pub iters: usize,
    pub tol: f64,
}

impl From<&TrustRegionConfig> for CgSettings {
    fn from(cfg: &TrustRegionConfig) -> Self {
        Self {
            iters: cfg.cg_iters,
            tol: cfg.cg_tol,
        }
    }
}

fn solve_h<F: Fn(&[f64]) -> Vec<f64>>(hvp: &F, b: &[f64], cg: CgSettings) -> Result<Vec<f64>> {
    if norm(b) == 0.0 {
        return Ok(vec![0.0; b.len()]);
    }
    let sol = conjugate_gradient(hvp, b, cg.iters, cg.tol);
    if sol.iterations == 0 || sol.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain(format!(
            "conjugate gradient broke down (iterations {}, residual {})",
            sol.iterations, sol.residual
        )));
    }
    Ok(sol.x)
}

/// Relative tolerance for KKT sign and feasibility tests in the dual.
const DUAL_TOL: f64 = 1e-9;
/// Columns of `C` with norm at or below this are treated as absent.
const ZERO_COLUMN: f64 = 1e-12;

fn subsets(m: usize) -> impl Iterator<Item = Vec<usize>> {
    (0u32..1 << m).map(move |mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
}

fn sub_matrix(s: &[Vec<f64>], idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| idx.iter().map(|&j| s[i][j]).collect()).collect()
}

fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Gram matrix `S = CᵀH⁻¹C` together with `H⁻¹C`.
struct Gram {
    hinv_c: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
}

impl Gram {
    fn new<F: Fn(&[f64]) -> Vec<f64>>(hvp: &F, c: &[Vec<f64>], cg: CgSettings) -> Result<Self> {
        let hinv_c = c.iter().map(|col| solve_h(hvp, col, cg)).collect::<Result<Vec<_>>>()?;
        let m = c.len();
        let mut s = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in i..m {
                // Symmetrize against CG round-off.
                let v = 0.5 * (dot(&c[i], &hinv_c[j]) + dot(&c[j], &hinv_c[i]));
                s[i][j] = v;
                s[j][i] = v;
            }
        }
        Ok(Self { hinv_c, s })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub feasible: bool,
    /// `min ½ΔᵀHΔ` over the linearized feasible set; `∞` if it is empty.
    pub delta_min: f64,
    /// Dual optimum of the feasibility problem.
    pub nu: Vec<f64>,
    pub diagnostic: Option<String>,
}

/// Smallest trust-region size for which the linearized constraints can be
/// met, via `max_{ν≥0} −½νᵀSν + νᵀz`.
pub fn feasibility_check<F>(hvp: F, c: &[Vec<f64>], z: &[f64], delta: f64, cg: CgSettings) -> Feasibility
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let m = c.len();
    let mut active_cols = Vec::new();
    for i in 0..m {
        if norm(&c[i]) > ZERO_COLUMN {
            active_cols.push(i);
        } else if z[i] > 0.0 {
            return Feasibility {
                feasible: false,
                delta_min: f64::INFINITY,
                nu: vec![0.0; m],
                diagnostic: Some(format!("constraint {i} violated with zero gradient")),
            };
        }
    }
    if z.iter().all(|v| *v <= 0.0) {
        return Feasibility {
            feasible: true,
            delta_min: 0.0,
            nu: vec![0.0; m],
            diagnostic: None,
        };
    }
    let cols: Vec<Vec<f64>> = active_cols.iter().map(|&i| c[i].clone()).collect();
    let gram = match Gram::new(&hvp, &cols, cg) {
        Ok(g) => g,
        Err(e) => {
            return Feasibility {
                feasible: false,
                delta_min: f64::INFINITY,
                nu: vec![0.0; m],
                diagnostic: Some(e.to_string()),
            }
        }
    };
    let zc = pick(z, &active_cols);
    match feasibility_dual(&gram.s, &zc) {
        Some((delta_min, nu_c)) => {
            let mut nu = vec![0.0; m];
            for (k, &i) in active_cols.iter().enumerate() {
                nu[i] = nu_c[k];
            }
            Feasibility {
                feasible: delta_min <= delta,
                delta_min,
                nu,
                diagnostic: None,
            }
        }
        None => Feasibility {
            feasible: false,
            delta_min: f64::INFINITY,
            nu: vec![0.0; m],
            diagnostic: Some("linearized constraints have no common solution".into()),
        },
    }
}

/// Active-set solution of `max_{ν≥0} −½νᵀSν + νᵀz`; returns the optimal
/// value and `ν`, or `None` if the primal is infeasible.
fn feasibility_dual(s: &[Vec<f64>], z: &[f64]) -> Option<(f64, Vec<f64>)> {
    let m = z.len();
    let scale = z.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    let mut best: Option<(f64, Vec<f64>)> = None;
    for set in subsets(m) {
        let nu_a = if set.is_empty() {
            Vec::new()
        } else {
            match solve_dense(&sub_matrix(s, &set), &pick(z, &set)) {
                Some(v) => v,
                None => continue,
            }
        };
        if nu_a.iter().any(|v| *v < -DUAL_TOL * scale) {
            continue;
        }
        let mut nu = vec![0.0; m];
        for (k, &i) in set.iter().enumerate() {
            nu[i] = nu_a[k].max(0.0);
        }
        let primal_ok = (0..m).all(|i| {
            let snu: f64 = (0..m).map(|j| s[i][j] * nu[j]).sum();
            z[i] - snu <= DUAL_TOL * scale
        });
        if !primal_ok {
            continue;
        }
        let value = 0.5 * dot(&nu, z);
        if best.as_ref().is_none_or(|(b, _)| value > *b) {
            best = Some((value, nu));
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktSolution {
    pub step: Vec<f64>,
    pub lambda: f64,
    pub nu: Vec<f64>,
    /// Linearized objective change `gᵀΔ`.
    pub objective: f64,
    pub predicted_constraint_change: Vec<f64>,
}

/// Exact solution of the linearized trust-region problem. Expects the
/// feasibility check to have passed; returns an error if no active set is
/// KKT-consistent.
pub fn kkt_step<F>(g: &[f64], c: &[Vec<f64>], z: &[f64], hvp: F, delta: f64, cg: CgSettings) -> Result<KktSolution>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let m = c.len();
    let n = g.len();
    let hinv_g = solve_h(&hvp, g, cg)?;
    let gram = Gram::new(&hvp, c, cg)?;
    let s = &gram.s;
    let r = dot(g, &hinv_g);
    let p: Vec<f64> = c.iter().map(|col| dot(col, &hinv_g)).collect();
    let usable: Vec<bool> = c.iter().map(|col| norm(col) > ZERO_COLUMN).collect();

    let zscale = z.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    let rscale = r.max(f64::MIN_POSITIVE);
    let mut best: Option<(f64, f64, Vec<f64>, Vec<usize>)> = None;

    for set in subsets(m) {
        if set.iter().any(|&i| !usable[i]) {
            continue;
        }
        let (s_inv_z, s_inv_p) = if set.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let sa = sub_matrix(s, &set);
            match (solve_dense(&sa, &pick(z, &set)), solve_dense(&sa, &pick(&p, &set))) {
                (Some(a), Some(b)) => (a, b),
                _ => continue,
            }
        };
        let za = pick(z, &set);
        let pa = pick(&p, &set);
        let r_eff = r - dot(&pa, &s_inv_p);
        let zsz = dot(&za, &s_inv_z);

        let candidate = if r_eff > 1e-12 * rscale && r > 0.0 {
            let denom = 2.0 * delta - zsz;
            if !(denom > 0.0) {
                continue;
            }
            let lambda = (r_eff / denom).sqrt();
            let nu_a: Vec<f64> = s_inv_z.iter().zip(&s_inv_p).map(|(a, b)| lambda * a - b).collect();
            (lambda, nu_a)
        } else if !set.is_empty() || r == 0.0 {
            // Objective lies in the span of the active constraints (or is
            // zero): the step is pinned by the constraints alone.
            if zsz > 2.0 * delta * (1.0 + DUAL_TOL) {
                continue;
            }
            (0.0, s_inv_p.iter().map(|v| -v).collect())
        } else {
            continue;
        };
        let (lambda, nu_a) = candidate;
        let nscale = nu_a.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
        if nu_a.iter().any(|v| *v < -DUAL_TOL * nscale) {
            continue;
        }
        let mut nu = vec![0.0; m];
        for (k, &i) in set.iter().enumerate() {
            nu[i] = nu_a[k].max(0.0);
        }
        let change = predicted_change(s, &p, &nu, lambda, &set, &s_inv_z);
        let feasible = (0..m).all(|i| z[i] + change[i] <= DUAL_TOL * zscale);
        if !feasible {
            continue;
        }
        let objective = if lambda > 0.0 {
            -(r + dot(&p, &nu)) / lambda
        } else {
            -dot(&pa, &s_inv_z)
        };
        if best.as_ref().is_none_or(|(b, ..)| objective < *b) {
            best = Some((objective, lambda, nu, set));
        }
    }

    let (objective, lambda, nu, set) =
        best.ok_or_else(|| Error::domain("no KKT-consistent active set for the trust-region problem"))?;
    let mut step = vec![0.0; n];
    if lambda > 0.0 {
        for (i, v) in step.iter_mut().enumerate() {
            let cnu: f64 = (0..m).map(|k| gram.hinv_c[k][i] * nu[k]).sum();
            *v = -(hinv_g[i] + cnu) / lambda;
        }
    } else {
        if let Some(w) = solve_dense(&sub_matrix(s, &set), &pick(z, &set)) {
            for (k, &col) in set.iter().enumerate() {
                for (v, h) in step.iter_mut().zip(&gram.hinv_c[col]) {
                    *v -= w[k] * h;
                }
            }
        }
    }
    let predicted_constraint_change = c.iter().map(|col| dot(col, &step)).collect();
    Ok(KktSolution {
        step,
        lambda,
        nu,
        objective,
        predicted_constraint_change,
    })
}

/// `CᵀΔ` for every constraint given the dual point.
fn predicted_change(s: &[Vec<f64>], p: &[f64], nu: &[f64], lambda: f64, set: &[usize], s_inv_z: &[f64]) -> Vec<f64> {
    let m = p.len();
    (0..m)
        .map(|i| {
            if lambda > 0.0 {
                let snu: f64 = (0..m).map(|j| s[i][j] * nu[j]).sum();
                -(p[i] + snu) / lambda
            } else {
                -set.iter().enumerate().map(|(k, &j)| s[i][j] * s_inv_z[k]).sum::<f64>()
            }
        })
        .collect()
}

/// Steepest descent on the constraint, scaled to the trust-region boundary:
/// `Δ = −√(2δ / CᵀH⁻¹C)·H⁻¹C`.
pub fn retrieval_step<F>(c: &[f64], hvp: F, delta: f64, cg: CgSettings) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(norm(c) > ZERO_COLUMN) {
        return Err(Error::domain("retrieval step needs a non-zero constraint gradient"));
    }
    let hinv_c = solve_h(&hvp, c, cg)?;
    let q = dot(c, &hinv_c);
    if !(q > 0.0) {
        return Err(Error::domain(format!("CᵀH⁻¹C = {q} is not positive")));
    }
    let scale = (2.0 * delta / q).sqrt();
    Ok(hinv_c.iter().map(|v| -scale * v).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateConfig {
    #[serde(default)]
    pub trust_region: TrustRegionConfig,
    #[serde(default)]
    pub critic: CriticConfig,
    #[serde(default)]
    pub grad_normalization: GradNormalization,
    #[serde(default)]
    pub constraint_normalization: GradNormalization,
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub actor: PolicyParams,
    pub critic: CriticParams,
    pub report: StepReport,
}

/// Fits the critic to the batch returns and sets `advantage = G − V(s)`.
/// Returns the new critic and the losses before and after fitting.
pub fn fit_critic_and_advantages(
    batch: &mut RolloutBatch,
    critic: &CriticParams,
    cfg: &CriticConfig,
) -> Result<(CriticParams, f64, f64)> {
    let (fitted, losses) = critic_update(batch, critic, cfg)?;
    for step in batch.steps.iter_mut() {
        step.advantage = step.ret - fitted.value(&step.obs)?;
    }
    let before = losses.first().copied().unwrap_or(0.0);
    let after = losses.last().copied().unwrap_or(0.0);
    Ok((fitted, before, after))
}

/// One full update: critic fit, advantages, then [`policy_step`].
pub fn sapo_update(
    batch: &mut RolloutBatch,
    actor: &PolicyParams,
    critic: &CriticParams,
    cfg: &UpdateConfig,
) -> Result<UpdateOutcome> {
    let (critic, before, after) = fit_critic_and_advantages(batch, critic, &cfg.critic)?;
    let (actor, mut report) = policy_step(batch, actor, cfg)?;
    report.critic_loss_before = before;
    report.critic_loss_after = after;
    Ok(UpdateOutcome { actor, critic, report })
}

/// Actor update from a batch whose advantages are already set.
pub fn policy_step(batch: &RolloutBatch, actor: &PolicyParams, cfg: &UpdateConfig) -> Result<(PolicyParams, StepReport)> {
    let tr = &cfg.trust_region;
    tr.validate()?;
    let cg = CgSettings::from(tr);
    let delta = tr.max_kl;

    let g = policy_gradient(batch, actor, cfg.grad_normalization)?;
    let m = batch.constraint_count();
    let cons = (0..m)
        .map(|k| constraint_gradient(batch, actor, k, cfg.constraint_normalization))
        .collect::<Result<Vec<_>>>()?;
    let c: Vec<Vec<f64>> = cons.iter().map(|cg| cg.grad.vec.clone()).collect();
    let z: Vec<f64> = cons.iter().map(|cg| cg.z).collect();

    let mut report = StepReport {
        z: z.clone(),
        z_after: z.clone(),
        grad_norm: g.raw_norm,
        nu: vec![0.0; m],
        step_fraction: 0.0,
        ..Default::default()
    };

    let fisher = FisherOperator::new(batch, actor, tr.damping)?;
    let hvp = |v: &[f64]| fisher.apply(v);

    let feas = feasibility_check(hvp, &c, &z, delta, cg);
    report.delta_min = feas.delta_min;
    report.feasible = feas.feasible;
    report.diagnostic = feas.diagnostic.clone();

    let step = if feas.feasible {
        if g.zero && z.iter().all(|v| *v <= 0.0) {
            None
        } else {
            match kkt_step(&g.vec, &c, &z, hvp, delta, cg) {
                Ok(sol) => {
                    report.mode = StepMode::Kkt;
                    report.lambda = sol.lambda;
                    report.nu = sol.nu;
                    report.predicted_constraint_change = sol.predicted_constraint_change;
                    Some(sol.step)
                }
                Err(e) => {
                    report.diagnostic = Some(format!("kkt solve failed, retrieving: {e}"));
                    retrieve(&c, &z, hvp, delta, cg, &mut report)
                }
            }
        }
    } else {
        retrieve(&c, &z, hvp, delta, cg, &mut report)
    };

    let Some(step) = step.filter(|s| s.iter().any(|v| *v != 0.0)) else {
        report.mode = StepMode::Skipped;
        return Ok((actor.clone(), report));
    };

    let mut fraction = 1.0;
    for attempt in 0..=tr.max_backtracks {
        let theta: Vec<f64> = actor.theta.iter().zip(&step).map(|(t, d)| t + fraction * d).collect();
        let cand = actor.with_theta(theta)?;
        let kl = mean_kl(batch, actor, &cand)?;
        let z_new = (0..m)
            .map(|k| constraint_surrogate(batch, &cand, k).map(|(j, b, _)| j - b))
            .collect::<Result<Vec<_>>>()?;
        let no_worse = z_new
            .iter()
            .zip(&z)
            .all(|(new, old)| *new <= old.max(0.0) + 1e-12 * (1.0 + old.abs()));
        if !tr.line_search || (kl.is_finite() && kl <= tr.kl_slack * delta && no_worse) {
            report.kl = kl;
            report.z_after = z_new;
            report.backtracks = attempt;
            report.step_fraction = fraction;
            report.accepted = true;
            return Ok((cand, report));
        }
        fraction *= tr.backtrack_coef;
    }
    report.backtracks = tr.max_backtracks;
    report.diagnostic = Some("line search rejected every step size".into());
    Ok((actor.clone(), report))
}

fn retrieve<F: Fn(&[f64]) -> Vec<f64>>(
    c: &[Vec<f64>],
    z: &[f64],
    hvp: F,
    delta: f64,
    cg: CgSettings,
    report: &mut StepReport,
) -> Option<Vec<f64>> {
    let n = c.first().map_or(0, |col| col.len());
    let mut combined = vec![0.0; n];
    for (col, &zi) in c.iter().zip(z) {
        if zi > 0.0 {
            for (a, b) in combined.iter_mut().zip(col) {
                *a += b;
            }
        }
    }
    match retrieval_step(&combined, hvp, delta, cg) {
        Ok(step) => {
            report.mode = StepMode::Retrieval;
            report.predicted_constraint_change = c.iter().map(|col| dot(col, &step)).collect();
            Some(step)
        }
        Err(e) => {
            report.diagnostic = Some(format!("retrieval skipped: {e}"));
            None
        }
    }
}
