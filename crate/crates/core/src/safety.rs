//! Probabilistic control-barrier-function safety layer.
//!
//! For an ego vehicle `e` and another vehicle `m` the barrier is
//! `h = Δx² − R²` (per axis) or `h = ‖Δp‖² − R²` (coupled). The CBF condition
//! `ḣ + αh ≥ 0` under the Euler model reads
//!
//! ```text
//! 2Δxᵀ(Δv + u·Δt + Δε) + αh ≥ 0,     Δε ~ N(Δε̂, ΔΣ)
//! ```
//!
//! Requiring it with probability `η` gives the linear constraint `A·u ≤ b`
//! with `A = −2Δxᵀ·Δt` and
//! `b = 2Δxᵀ(Δv + Δε̂) + αh − Φ⁻¹(η)·‖ΔΣ^{1/2}·2Δx‖`.
//!
//! [`safety_filter`] projects a nominal command onto `{A·u ≤ b} ∩ box`.

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlInput, NoiseModel, VehicleState};
use crate::error::{Error, Result};
use crate::numerics::{inv_std_normal_cdf, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CbfMode {
    /// One constraint on the 2-vector `u` from `h = ‖Δp‖² − R²`.
    Coupled,
    /// Independent x and y barriers, both enforced.
    #[default]
    Decoupled,
}

/// Scale of the variance margin subtracted from `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChanceMargin {
    /// `Φ⁻¹(η)·‖ΔΣ^{1/2}·2Δx‖`: the margin under which `A·u = b` holds with
    /// probability exactly `η`.
    #[default]
    Exact,
    /// `Φ⁻¹(η)·√(ΔxᵀΔΣΔx)`: half the exact margin. Satisfaction probability
    /// at the active constraint is `Φ(Φ⁻¹(η)/2)`.
    Unscaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbfConfig {
    /// Class-K gain, 1/s.
    pub alpha: f64,
    /// Required satisfaction probability.
    pub eta: f64,
    /// Safety radius, m.
    pub r_safe: f64,
    /// Control period entering `A`, s.
    pub dt: f64,
    pub u_min: f64,
    pub u_max: f64,
    #[serde(default)]
    pub mode: CbfMode,
    #[serde(default)]
    pub margin: ChanceMargin,
}

impl Default for CbfConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            eta: 0.99,
            r_safe: 8.0,
            dt: 0.01,
            u_min: -5.0,
            u_max: 3.0,
            mode: CbfMode::Decoupled,
            margin: ChanceMargin::Exact,
        }
    }
}

impl CbfConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha > 0.0
            && (0.5..1.0).contains(&self.eta)
            && self.r_safe > 0.0
            && self.dt > 0.0
            && self.u_min < self.u_max
            && [self.alpha, self.r_safe, self.dt, self.u_min, self.u_max]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "cbf config needs alpha>0, 0.5<=eta<1, r_safe>0, dt>0, u_min<u_max; got {self:?}"
            )))
        }
    }

    /// Constraint axes generated per vehicle pair in this mode.
    pub fn axes(&self) -> &'static [Axis] {
        match self.mode {
            CbfMode::Coupled => &[Axis::Coupled],
            CbfMode::Decoupled => &[Axis::X, Axis::Y],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    X,
    Y,
    Coupled,
}

impl Axis {
    fn mask(self) -> [f64; 2] {
        match self {
            Axis::X => [1.0, 0.0],
            Axis::Y => [0.0, 1.0],
            Axis::Coupled => [1.0, 1.0],
        }
    }
}

/// Linear constraint `a·u ≤ b` on the ego acceleration. For per-axis
/// constraints the off-axis entry of `a` is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyConstraint {
    pub axis: Axis,
    pub a: [f64; 2],
    pub b: f64,
}

impl SafetyConstraint {
    pub fn value(&self, u: &ControlInput) -> f64 {
        self.a[0] * u.ux + self.a[1] * u.uy
    }

    pub fn is_satisfied(&self, u: &ControlInput, tol: f64) -> bool {
        self.value(u) <= self.b + tol
    }
}

/// Relative state between the ego vehicle and one other vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGeometry {
    /// `p_e − p_m`, m.
    pub dx: [f64; 2],
    /// `v_e − v_m`, m/s.
    pub dv: [f64; 2],
    /// `ε̂_e − ε̂_m`, m/s.
    pub eps_mean: [f64; 2],
    /// Diagonal of `Σ_e + Σ_m`, (m/s)².
    pub eps_var: [f64; 2],
}

impl PairGeometry {
    pub fn between(
        ego: &VehicleState,
        ego_noise: &NoiseModel,
        other: &VehicleState,
        other_noise: &NoiseModel,
    ) -> Self {
        Self {
            dx: [ego.x - other.x, ego.y - other.y],
            dv: [ego.vx - other.vx, ego.vy - other.vy],
            eps_mean: [
                ego_noise.mean[0] - other_noise.mean[0],
                ego_noise.mean[1] - other_noise.mean[1],
            ],
            eps_var: [
                ego_noise.var[0] + other_noise.var[0],
                ego_noise.var[1] + other_noise.var[1],
            ],
        }
    }

    pub fn distance(&self) -> f64 {
        self.dx[0].hypot(self.dx[1])
    }
}

fn masked_dot(mask: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    mask[0] * a[0] * b[0] + mask[1] * a[1] * b[1]
}

pub fn barrier(pair: &PairGeometry, cfg: &CbfConfig, axis: Axis) -> f64 {
    let m = axis.mask();
    masked_dot(m, pair.dx, pair.dx) - cfg.r_safe * cfg.r_safe
}

/// Linearized chance constraint for one axis (or the coupled form).
pub fn chance_constraint(pair: &PairGeometry, cfg: &CbfConfig, axis: Axis) -> Result<SafetyConstraint> {
    let m = axis.mask();
    let h = barrier(pair, cfg, axis);
    let a = [-2.0 * m[0] * pair.dx[0] * cfg.dt, -2.0 * m[1] * pair.dx[1] * cfg.dt];
    let drift = [pair.dv[0] + pair.eps_mean[0], pair.dv[1] + pair.eps_mean[1]];
    let quad = masked_dot(m, pair.dx, [pair.dx[0] * pair.eps_var[0], pair.dx[1] * pair.eps_var[1]]);
    if quad < 0.0 {
        return Err(Error::domain(format!("negative relative variance in {pair:?}")));
    }
    let scale = match cfg.margin {
        ChanceMargin::Exact => 2.0,
        ChanceMargin::Unscaled => 1.0,
    };
    let z = inv_std_normal_cdf(cfg.eta)?;
    let b = 2.0 * masked_dot(m, pair.dx, drift) + cfg.alpha * h - z * scale * quad.sqrt();
    let c = SafetyConstraint { axis, a, b };
    if !(c.b.is_finite() && c.a.iter().all(|v| v.is_finite())) {
        return Err(Error::domain(format!("non-finite constraint from {pair:?}")));
    }
    Ok(c)
}

/// All constraints for one pair under `cfg.mode`.
pub fn pair_constraints(pair: &PairGeometry, cfg: &CbfConfig) -> Result<Vec<SafetyConstraint>> {
    cfg.axes().iter().map(|&ax| chance_constraint(pair, cfg, ax)).collect()
}

/// `2Δxᵀ(Δv + u·Δt + Δε) + αh` for a realized relative noise `Δε`.
/// Non-negative means the CBF condition held.
pub fn cbf_condition(pair: &PairGeometry, cfg: &CbfConfig, axis: Axis, u: &ControlInput, deps: [f64; 2]) -> f64 {
    let m = axis.mask();
    let rate = [
        pair.dv[0] + u.ux * cfg.dt + deps[0],
        pair.dv[1] + u.uy * cfg.dt + deps[1],
    ];
    2.0 * masked_dot(m, pair.dx, rate) + cfg.alpha * barrier(pair, cfg, axis)
}

/// Fraction of `n` relative-noise draws for which the CBF condition holds
/// under command `u`.
pub fn verify_chance_constraint_mc(
    pair: &PairGeometry,
    cfg: &CbfConfig,
    axis: Axis,
    u: &ControlInput,
    n: usize,
    rng: &mut RngStream,
) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    let sd = [pair.eps_var[0].sqrt(), pair.eps_var[1].sqrt()];
    let hits = (0..n)
        .filter(|_| {
            let deps = [
                pair.eps_mean[0] + sd[0] * rng.standard_normal(),
                pair.eps_mean[1] + sd[1] * rng.standard_normal(),
            ];
            cbf_condition(pair, cfg, axis, u, deps) >= 0.0
        })
        .count();
    hits as f64 / n as f64
}

// ---------------------------------------------------------------------------
// Filter
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterOutput {
    pub u: ControlInput,
    /// The constraint set had no point inside the box; `u` is then the box
    /// point with the smallest worst-case (normalized) violation.
    pub infeasible: bool,
}

const FEAS_TOL: f64 = 1e-9;

fn tol_for(c: &SafetyConstraint) -> f64 {
    FEAS_TOL * (1.0 + c.b.abs())
}

/// Minimizes `‖u − ū‖²` subject to the box and every `a·u ≤ b`.
///
/// Axis-aligned constraint sets are solved in closed form per axis; general
/// 2-D sets by enumerating candidate active sets, which is exact for a
/// strictly convex QP in the plane.
pub fn safety_filter(nominal: &ControlInput, constraints: &[SafetyConstraint], cfg: &CbfConfig) -> FilterOutput {
    // A zero row cannot be fixed by any u; record infeasibility and drop it.
    let mut degenerate_violation = false;
    let active: Vec<SafetyConstraint> = constraints
        .iter()
        .filter(|c| {
            let zero = c.a[0].abs() < 1e-15 && c.a[1].abs() < 1e-15;
            if zero && c.b < -tol_for(c) {
                degenerate_violation = true;
            }
            !zero
        })
        .copied()
        .collect();

    let aligned = active.iter().all(|c| c.a[0] == 0.0 || c.a[1] == 0.0);
    let mut out = if aligned {
        filter_per_axis(nominal, &active, cfg)
    } else {
        filter_planar(nominal, &active, cfg)
    };
    out.infeasible |= degenerate_violation;
    out
}

fn filter_per_axis(nominal: &ControlInput, cs: &[SafetyConstraint], cfg: &CbfConfig) -> FilterOutput {
    let mut infeasible = false;
    let mut u = [0.0; 2];
    for (k, nom) in [nominal.ux, nominal.uy].into_iter().enumerate() {
        // lower bounds from a<0, upper bounds from a>0
        let mut lower = f64::NEG_INFINITY;
        let mut upper = f64::INFINITY;
        for c in cs.iter().filter(|c| c.a[k] != 0.0) {
            let bound = c.b / c.a[k];
            if c.a[k] < 0.0 {
                lower = lower.max(bound);
            } else {
                upper = upper.min(bound);
            }
        }
        let lo = lower.max(cfg.u_min);
        let hi = upper.min(cfg.u_max);
        let slack = FEAS_TOL * (1.0 + lo.abs().max(hi.abs()));
        if lo <= hi + slack {
            u[k] = nom.clamp(lo.min(hi), hi.max(lo));
        } else {
            infeasible = true;
            // max(lower − u, u − upper) is minimized at the midpoint.
            let target = match (lower.is_finite(), upper.is_finite()) {
                (true, true) => 0.5 * (lower + upper),
                (true, false) => cfg.u_max,
                (false, true) => cfg.u_min,
                (false, false) => nom,
            };
            u[k] = target.clamp(cfg.u_min, cfg.u_max);
        }
    }
    FilterOutput {
        u: ControlInput::new(u[0], u[1]),
        infeasible,
    }
}

fn box_rows(cfg: &CbfConfig) -> [SafetyConstraint; 4] {
    let c = |a: [f64; 2], b: f64| SafetyConstraint { axis: Axis::Coupled, a, b };
    [
        c([1.0, 0.0], cfg.u_max),
        c([-1.0, 0.0], -cfg.u_min),
        c([0.0, 1.0], cfg.u_max),
        c([0.0, -1.0], -cfg.u_min),
    ]
}

fn intersect(p: &SafetyConstraint, q: &SafetyConstraint) -> Option<[f64; 2]> {
    let det = p.a[0] * q.a[1] - p.a[1] * q.a[0];
    let scale = (p.a[0].hypot(p.a[1])) * (q.a[0].hypot(q.a[1]));
    if det.abs() <= 1e-12 * scale {
        return None;
    }
    Some([
        (p.b * q.a[1] - q.b * p.a[1]) / det,
        (p.a[0] * q.b - q.a[0] * p.b) / det,
    ])
}

fn filter_planar(nominal: &ControlInput, cs: &[SafetyConstraint], cfg: &CbfConfig) -> FilterOutput {
    let mut rows: Vec<SafetyConstraint> = cs.to_vec();
    rows.extend_from_slice(&box_rows(cfg));
    let nom = nominal.as_array();

    let mut candidates = vec![nom];
    for r in &rows {
        let nn = r.a[0] * r.a[0] + r.a[1] * r.a[1];
        let excess = (r.a[0] * nom[0] + r.a[1] * nom[1] - r.b) / nn;
        candidates.push([nom[0] - excess * r.a[0], nom[1] - excess * r.a[1]]);
    }
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if let Some(p) = intersect(&rows[i], &rows[j]) {
                candidates.push(p);
            }
        }
    }
    let feasible = |p: &[f64; 2]| {
        rows.iter()
            .all(|r| r.a[0] * p[0] + r.a[1] * p[1] <= r.b + tol_for(r))
    };
    let dist2 = |p: &[f64; 2]| (p[0] - nom[0]).powi(2) + (p[1] - nom[1]).powi(2);
    let best = candidates
        .iter()
        .filter(|p| feasible(p))
        .min_by(|a, b| dist2(a).total_cmp(&dist2(b)));
    if let Some(p) = best {
        let u = [p[0].clamp(cfg.u_min, cfg.u_max), p[1].clamp(cfg.u_min, cfg.u_max)];
        return FilterOutput {
            u: ControlInput::new(u[0], u[1]),
            infeasible: false,
        };
    }
    FilterOutput {
        u: least_violating_box_point(nom, cs, cfg),
        infeasible: true,
    }
}

/// Box point minimizing `max_i (aᵢ·u − bᵢ)/‖aᵢ‖`, ties broken by distance
/// to the nominal command.
fn least_violating_box_point(nom: [f64; 2], cs: &[SafetyConstraint], cfg: &CbfConfig) -> ControlInput {
    let unit: Vec<SafetyConstraint> = cs
        .iter()
        .map(|c| {
            let n = c.a[0].hypot(c.a[1]);
            SafetyConstraint {
                axis: c.axis,
                a: [c.a[0] / n, c.a[1] / n],
                b: c.b / n,
            }
        })
        .collect();
    let worst = |p: &[f64; 2]| {
        unit.iter()
            .map(|c| c.a[0] * p[0] + c.a[1] * p[1] - c.b)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (lo, hi) = (cfg.u_min, cfg.u_max);
    let mut candidates = vec![[lo, lo], [lo, hi], [hi, lo], [hi, hi]];
    let edges = box_rows(cfg);
    // Equal-violation lines between constraint pairs, cut with box edges.
    for i in 0..unit.len() {
        for j in i + 1..unit.len() {
            let diff = SafetyConstraint {
                axis: Axis::Coupled,
                a: [unit[i].a[0] - unit[j].a[0], unit[i].a[1] - unit[j].a[1]],
                b: unit[i].b - unit[j].b,
            };
            for e in &edges {
                let edge_line = SafetyConstraint { axis: e.axis, a: e.a, b: e.b };
                if let Some(p) = intersect(&diff, &edge_line) {
                    candidates.push(p);
                }
            }
            for k in j + 1..unit.len() {
                let diff2 = SafetyConstraint {
                    axis: Axis::Coupled,
                    a: [unit[i].a[0] - unit[k].a[0], unit[i].a[1] - unit[k].a[1]],
                    b: unit[i].b - unit[k].b,
                };
                if let Some(p) = intersect(&diff, &diff2) {
                    candidates.push(p);
                }
            }
        }
    }
    let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    let in_box = |p: &[f64; 2]| p.iter().all(|v| *v >= lo - slack && *v <= hi + slack);
    let dist2 = |p: &[f64; 2]| (p[0] - nom[0]).powi(2) + (p[1] - nom[1]).powi(2);
    let best = candidates
        .into_iter()
        .filter(in_box)
        .map(|p| [p[0].clamp(lo, hi), p[1].clamp(lo, hi)])
        .min_by(|a, b| {
            let (wa, wb) = (worst(a), worst(b));
            if (wa - wb).abs() <= 1e-12 * (1.0 + wa.abs()) {
                dist2(a).total_cmp(&dist2(b))
            } else {
                wa.total_cmp(&wb)
            }
        })
        .unwrap_or([nom[0].clamp(lo, hi), nom[1].clamp(lo, hi)]);
    ControlInput::new(best[0], best[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked_cfg() -> CbfConfig {
        CbfConfig {
            alpha: 0.75,
            eta: 0.99,
            r_safe: 8.0,
            dt: 0.1,
            u_min: -10.0,
            u_max: 10.0,
            mode: CbfMode::Decoupled,
            margin: ChanceMargin::Exact,
        }
    }

    fn worked_pair() -> PairGeometry {
        PairGeometry {
            dx: [10.0, 0.0],
            dv: [-2.0, 0.0],
            eps_mean: [0.0, 0.0],
            eps_var: [0.02, 0.0],
        }
    }

    #[test]
    fn barrier_values() {
        let cfg = worked_cfg();
        let mut p = worked_pair();
        p.dx = [8.0, 0.0];
        assert_eq!(barrier(&p, &cfg, Axis::X), 0.0);
        p.dx = [10.0, 0.0];
        assert_eq!(barrier(&p, &cfg, Axis::X), 36.0);
        p.dx = [6.0, 8.0];
        assert_eq!(barrier(&p, &cfg, Axis::Coupled), 36.0);
    }

    #[test]
    fn worked_example_with_unscaled_margin() {
        // b = -40 + 27 - Φ⁻¹(0.99)·√2
        let cfg = CbfConfig {
            margin: ChanceMargin::Unscaled,
            ..worked_cfg()
        };
        let c = chance_constraint(&worked_pair(), &cfg, Axis::X).unwrap();
        assert!((c.a[0] + 2.0).abs() < 1e-12 && c.a[1] == 0.0);
        assert!((c.b + 16.290).abs() < 1e-3, "b = {}", c.b);
        assert!((c.b / c.a[0] - 8.145).abs() < 1e-3);
    }

    #[test]
    fn worked_example_with_exact_margin() {
        // b = -40 + 27 - Φ⁻¹(0.99)·2·√2
        let c = chance_constraint(&worked_pair(), &worked_cfg(), Axis::X).unwrap();
        let expect = -13.0 - 2.326_347_874_040_841 * 2.0 * 2.0_f64.sqrt();
        assert!((c.b - expect).abs() < 1e-9, "b = {}", c.b);
    }

    #[test]
    fn median_chance_constraint_ignores_variance() {
        let cfg = CbfConfig { eta: 0.5, ..worked_cfg() };
        let mut p = worked_pair();
        let with_var = chance_constraint(&p, &cfg, Axis::X).unwrap();
        p.eps_var = [0.0, 0.0];
        let without = chance_constraint(&p, &cfg, Axis::X).unwrap();
        assert_eq!(with_var.b, without.b);
    }

    #[test]
    fn static_separated_pair_admits_zero_command() {
        let cfg = worked_cfg();
        let p = PairGeometry {
            dx: [12.0, 0.0],
            dv: [0.0, 0.0],
            eps_mean: [0.0, 0.0],
            eps_var: [0.0, 0.0],
        };
        let c = chance_constraint(&p, &cfg, Axis::X).unwrap();
        assert!((c.b - cfg.alpha * (144.0 - 64.0)).abs() < 1e-12);
        assert!(c.is_satisfied(&ControlInput::default(), 0.0));
    }

    #[test]
    fn mc_without_noise_is_binary() {
        let cfg = worked_cfg();
        let mut p = worked_pair();
        p.eps_var = [0.0, 0.0];
        let c = chance_constraint(&p, &cfg, Axis::X).unwrap();
        let bound = c.b / c.a[0];
        let mut rng = RngStream::new(1);
        let ok = verify_chance_constraint_mc(&p, &cfg, Axis::X, &ControlInput::new(bound + 1.0, 0.0), 10_000, &mut rng);
        let bad = verify_chance_constraint_mc(&p, &cfg, Axis::X, &ControlInput::new(bound - 1.0, 0.0), 10_000, &mut rng);
        assert_eq!((ok, bad), (1.0, 0.0));
    }

    #[test]
    fn mc_at_active_constraint_matches_eta() {
        let cfg = worked_cfg();
        let p = worked_pair();
        let c = chance_constraint(&p, &cfg, Axis::X).unwrap();
        let u = ControlInput::new(c.b / c.a[0], 0.0);
        let n = 100_000;
        let mut rng = RngStream::new(77);
        let prob = verify_chance_constraint_mc(&p, &cfg, Axis::X, &u, n, &mut rng);
        let se = (cfg.eta * (1.0 - cfg.eta) / n as f64).sqrt();
        assert!((prob - cfg.eta).abs() <= 3.0 * se, "prob {prob}");
    }

    #[test]
    fn filter_projects_onto_lower_bound() {
        let cfg = worked_cfg();
        let c = SafetyConstraint { axis: Axis::X, a: [-2.0, 0.0], b: -16.29 };
        let out = safety_filter(&ControlInput::default(), &[c], &cfg);
        assert!((out.u.ux - 8.145).abs() < 1e-12);
        assert_eq!(out.u.uy, 0.0);
        assert!(!out.infeasible);
    }

    #[test]
    fn filter_without_constraints_clamps() {
        let cfg = worked_cfg();
        let out = safety_filter(&ControlInput::new(15.0, -3.0), &[], &cfg);
        assert_eq!(out.u, ControlInput::new(10.0, -3.0));
        assert!(!out.infeasible);
    }

    #[test]
    fn filter_flags_box_infeasibility() {
        let cfg = worked_cfg();
        let c = SafetyConstraint { axis: Axis::X, a: [-1.0, 0.0], b: -12.0 };
        let out = safety_filter(&ControlInput::default(), &[c], &cfg);
        assert_eq!(out.u.ux, 10.0);
        assert!(out.infeasible);
    }

    #[test]
    fn planar_filter_matches_hand_projection() {
        let cfg = worked_cfg();
        // u_x + u_y >= 4 from nominal 0 -> (2, 2)
        let c = SafetyConstraint { axis: Axis::Coupled, a: [-1.0, -1.0], b: -4.0 };
        let out = safety_filter(&ControlInput::default(), &[c], &cfg);
        assert!((out.u.ux - 2.0).abs() < 1e-12 && (out.u.uy - 2.0).abs() < 1e-12);
        assert!(!out.infeasible);
    }

    #[test]
    fn planar_infeasible_picks_least_violation() {
        let cfg = worked_cfg();
        // u_x + u_y >= 30 cannot be met in [-10,10]^2; best corner is (10,10)
        let c = SafetyConstraint { axis: Axis::Coupled, a: [-1.0, -1.0], b: -30.0 };
        let out = safety_filter(&ControlInput::default(), &[c], &cfg);
        assert!(out.infeasible);
        assert_eq!(out.u, ControlInput::new(10.0, 10.0));
    }

    #[test]
    fn zero_row_with_negative_bound_flags_infeasible() {
        let cfg = worked_cfg();
        let c = SafetyConstraint { axis: Axis::X, a: [0.0, 0.0], b: -1.0 };
        let out = safety_filter(&ControlInput::new(1.0, 2.0), &[c], &cfg);
        assert!(out.infeasible);
        assert_eq!(out.u, ControlInput::new(1.0, 2.0));
    }

    #[test]
    fn bound_monotone_in_eta_and_alpha() {
        let p = worked_pair();
        let mut prev = f64::INFINITY;
        for eta in [0.5, 0.6, 0.8, 0.9, 0.99, 0.999] {
            let cfg = CbfConfig { eta, ..worked_cfg() };
            let b = chance_constraint(&p, &cfg, Axis::X).unwrap().b;
            assert!(b < prev || eta == 0.5);
            prev = b;
        }
        // h > 0: larger alpha relaxes
        let b1 = chance_constraint(&p, &CbfConfig { alpha: 0.5, ..worked_cfg() }, Axis::X).unwrap().b;
        let b2 = chance_constraint(&p, &CbfConfig { alpha: 2.0, ..worked_cfg() }, Axis::X).unwrap().b;
        assert!(b2 > b1);
        // h < 0: larger alpha tightens
        let mut close = p;
        close.dx = [5.0, 0.0];
        let b1 = chance_constraint(&close, &CbfConfig { alpha: 0.5, ..worked_cfg() }, Axis::X).unwrap().b;
        let b2 = chance_constraint(&close, &CbfConfig { alpha: 2.0, ..worked_cfg() }, Axis::X).unwrap().b;
        assert!(b2 < b1);
    }

    #[test]
    fn config_validation() {
        assert!(CbfConfig::default().validate().is_ok());
        assert!(CbfConfig { eta: 1.0, ..Default::default() }.validate().is_err());
        assert!(CbfConfig { eta: 0.4, ..Default::default() }.validate().is_err());
        assert!(CbfConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        assert!(CbfConfig { u_min: 3.0, u_max: 3.0, ..Default::default() }.validate().is_err());
    }
}
