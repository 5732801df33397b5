//! Online ramp-merging scenario.
//!
//! The mainline runs along +x. The ego starts at the bottom of an on-ramp
//! that heads north, bends right along a circular arc and joins the mainline
//! tangentially at the merge point; the ego path then continues along the
//! mainline past the goal. A non-reactive host drives the mainline at its
//! target speed.
//!
//! The policy chooses a longitudinal acceleration once every
//! `action_repeat` physics ticks. On every tick the nominal command is that
//! acceleration along the path tangent plus a lateral tracking term
//! (curvature feedforward and a PD law on the lateral offset); the safety
//! filter then projects it onto the chance constraints and the result is
//! applied unmodified.

use std::fmt::Write as _;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::dynamics::{step_with_noise, ControlInput, NoiseModel, VehicleState};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::policy::{sample_action, PolicyParams};
use crate::rollout::{EpisodeSummary, RolloutBatch, StepRecord};
use crate::safety::{
    barrier, cbf_condition, pair_constraints, safety_filter, Axis, CbfConfig, CbfMode, FilterOutput, PairGeometry,
    SafetyConstraint,
};

pub const KMH: f64 = 1.0 / 3.6;
pub const OBS_DIM: usize = 10;

/// Divisors applied to the raw observation before it reaches the networks.
pub const OBS_SCALE: [f64; OBS_DIM] = [50.0, 10.0, 1.0, 50.0, 10.0, 50.0, 50.0, 10.0, 10.0, 5.0];

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Piece {
    Line { start: [f64; 2], dir: [f64; 2], len: f64 },
    /// Arc swept from `start_angle` by `sweep` radians (positive = left turn).
    Arc { center: [f64; 2], radius: f64, start_angle: f64, sweep: f64 },
}

impl Piece {
    fn len(&self) -> f64 {
        match *self {
            Piece::Line { len, .. } => len,
            Piece::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Point, unit tangent and signed curvature at local arc length `sigma`.
    fn eval(&self, sigma: f64) -> ([f64; 2], [f64; 2], f64) {
        match *self {
            Piece::Line { start, dir, .. } => ([start[0] + sigma * dir[0], start[1] + sigma * dir[1]], dir, 0.0),
            Piece::Arc { center, radius, start_angle, sweep } => {
                let sign = sweep.signum();
                let phi = start_angle + sign * sigma / radius;
                let point = [center[0] + radius * phi.cos(), center[1] + radius * phi.sin()];
                let tangent = [-sign * phi.sin(), sign * phi.cos()];
                (point, tangent, sign / radius)
            }
        }
    }

    /// Local arc length of the closest point, optionally unclamped at
    /// either end.
    fn closest(&self, p: [f64; 2], open_start: bool, open_end: bool) -> f64 {
        let raw = match *self {
            Piece::Line { start, dir, .. } => (p[0] - start[0]) * dir[0] + (p[1] - start[1]) * dir[1],
            Piece::Arc { center, radius, start_angle, sweep } => {
                let psi = (p[1] - center[1]).atan2(p[0] - center[0]);
                let mut d = sweep.signum() * (psi - start_angle);
                // Angular offset from the start in the sweep direction,
                // centred on the arc's midpoint.
                let mid = 0.5 * sweep.abs();
                while d - mid > std::f64::consts::PI {
                    d -= 2.0 * std::f64::consts::PI;
                }
                while d - mid <= -std::f64::consts::PI {
                    d += 2.0 * std::f64::consts::PI;
                }
                d * radius
            }
        };
        let lo = if open_start { f64::NEG_INFINITY } else { 0.0 };
        let hi = if open_end { f64::INFINITY } else { self.len() };
        raw.clamp(lo, hi)
    }
}

/// Arc-length parametrized centerline made of lines and circular arcs.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pieces: Vec<(f64, Piece)>,
    length: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    /// Signed distance to the centerline, positive to the left.
    pub offset: f64,
    pub point: [f64; 2],
    pub tangent: [f64; 2],
    /// Signed curvature, positive for left turns, 1/m.
    pub curvature: f64,
}

impl Projection {
    pub fn normal(&self) -> [f64; 2] {
        [-self.tangent[1], self.tangent[0]]
    }
}

impl Path {
    fn from_pieces(pieces: Vec<Piece>) -> Self {
        let mut s = 0.0;
        let pieces = pieces
            .into_iter()
            .map(|p| {
                let s0 = s;
                s += p.len();
                (s0, p)
            })
            .collect();
        Self { pieces, length: s }
    }

    /// Straight line from `start` in direction `dir` (normalized here).
    pub fn line(start: [f64; 2], dir: [f64; 2], len: f64) -> Self {
        let n = dir[0].hypot(dir[1]);
        Self::from_pieces(vec![Piece::Line {
            start,
            dir: [dir[0] / n, dir[1] / n],
            len,
        }])
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Closest centerline point. The path is extended along its end
    /// tangents, so `s` may be negative or exceed the length.
    pub fn project(&self, p: [f64; 2]) -> Projection {
        let last = self.pieces.len() - 1;
        let mut best: Option<(f64, f64, usize)> = None;
        for (i, (_, piece)) in self.pieces.iter().enumerate() {
            let sigma = piece.closest(p, i == 0, i == last);
            let (q, _, _) = piece.eval(sigma);
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if best.is_none_or(|(bd, _, _)| d < bd) {
                best = Some((d, sigma, i));
            }
        }
        let (_, sigma, i) = best.expect("path has at least one piece");
        let (s0, piece) = self.pieces[i];
        let (point, tangent, curvature) = piece.eval(sigma);
        let normal = [-tangent[1], tangent[0]];
        Projection {
            s: s0 + sigma,
            offset: (p[0] - point[0]) * normal[0] + (p[1] - point[1]) * normal[1],
            point,
            tangent,
            curvature,
        }
    }

    fn locate(&self, s: f64) -> ([f64; 2], [f64; 2], f64) {
        let idx = self.pieces.iter().rposition(|(s0, _)| *s0 <= s).unwrap_or(0);
        let (s0, piece) = self.pieces[idx];
        piece.eval(s - s0)
    }

    pub fn point_at(&self, s: f64) -> [f64; 2] {
        self.locate(s).0
    }

    pub fn tangent_at(&self, s: f64) -> [f64; 2] {
        self.locate(s).1
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn env_cbf() -> CbfConfig {
    CbfConfig {
        mode: CbfMode::Coupled,
        ..CbfConfig::default()
    }
}

fn default_noise() -> NoiseModel {
    NoiseModel::isotropic(0.01)
}

/// Scenario parameters. Distances in m, times in s, accelerations in m/s²;
/// the two speeds with a `_kmh` suffix are in km/h.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub physics_dt: f64,
    /// Physics ticks per policy decision.
    pub action_repeat: usize,
    pub ramp_start: [f64; 2],
    /// Length of the straight northbound ramp section.
    pub ramp_straight: f64,
    /// Radius of the arc joining the ramp to the mainline.
    pub ramp_radius: f64,
    pub mainline_start_x: f64,
    pub mainline_end_x: f64,
    /// Goal distance past the merge point along the mainline.
    pub goal_distance: f64,
    pub host_speed_kmh: f64,
    pub host_start_x: f64,
    /// Uniform range of the host's initial offset along the mainline.
    pub host_offset_range: [f64; 2],
    /// Host speed-tracking gain, 1/s.
    pub host_gain: f64,
    pub ego_desired_speed_kmh: f64,
    pub ego_initial_speed: f64,
    /// Lateral correction gain, 1/s (desired lateral velocity is
    /// `−lateral_gain·offset`).
    pub lateral_gain: f64,
    /// Gain of the inner lateral-velocity loop, 1/s.
    pub lateral_damping: f64,
    pub reward_pos_weight: f64,
    pub reward_vel_weight: f64,
    pub ego_noise: NoiseModel,
    pub host_noise: NoiseModel,
    pub cbf: CbfConfig,
    pub safety_filter: bool,
    /// Evaluation episode length in policy steps.
    pub horizon: usize,
    /// Training rollouts start at a uniform time in this range, with both
    /// vehicles advanced at their nominal speeds.
    pub start_time_range: [f64; 2],
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            physics_dt: 0.01,
            action_repeat: 10,
            ramp_start: [90.0, -100.0],
            ramp_straight: 40.0,
            ramp_radius: 60.0,
            mainline_start_x: -100.0,
            mainline_end_x: 400.0,
            goal_distance: 100.0,
            host_speed_kmh: 40.0,
            host_start_x: 0.0,
            host_offset_range: [-30.0, 30.0],
            host_gain: 1.0,
            ego_desired_speed_kmh: 35.0,
            ego_initial_speed: 8.0,
            lateral_gain: 1.0,
            lateral_damping: 5.0,
            reward_pos_weight: 0.01,
            reward_vel_weight: 0.1,
            ego_noise: default_noise(),
            host_noise: default_noise(),
            cbf: env_cbf(),
            safety_filter: true,
            horizon: 400,
            start_time_range: [0.0, 16.0],
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("scenario: {msg}")));
        self.cbf.validate()?;
        self.ego_noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.host_noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !(self.physics_dt > 0.0) || !self.physics_dt.is_finite() {
            return bad("physics_dt must be > 0");
        }
        if (self.cbf.dt - self.physics_dt).abs() > 1e-12 {
            return bad("cbf.dt must equal physics_dt");
        }
        if self.action_repeat == 0 || self.horizon == 0 {
            return bad("action_repeat and horizon must be >= 1");
        }
        if !(self.ramp_straight >= 0.0 && self.ramp_radius > 0.0 && self.goal_distance > 0.0) {
            return bad("ramp_straight >= 0, ramp_radius > 0 and goal_distance > 0 required");
        }
        let merge_x = self.merge_point()[0];
        if !(self.mainline_start_x < merge_x && merge_x + self.goal_distance < self.mainline_end_x) {
            return bad("merge point and goal must lie inside the mainline");
        }
        let [lo, hi] = self.host_offset_range;
        if !(lo <= hi) || !(self.host_start_x + hi < self.mainline_end_x) || self.host_start_x + lo < self.mainline_start_x
        {
            return bad("host start plus offset range must lie on the mainline");
        }
        let [t0, t1] = self.start_time_range;
        if !(0.0 <= t0 && t0 <= t1) {
            return bad("start_time_range must satisfy 0 <= lo <= hi");
        }
        if !(self.host_speed_kmh > 0.0 && self.ego_desired_speed_kmh > 0.0 && self.ego_initial_speed >= 0.0) {
            return bad("speeds must be positive");
        }
        if !(self.host_gain > 0.0 && self.lateral_gain > 0.0 && self.lateral_damping > 0.0) {
            return bad("controller gains must be positive");
        }
        if !(self.reward_pos_weight >= 0.0 && self.reward_vel_weight >= 0.0) {
            return bad("reward weights must be >= 0");
        }
        Ok(())
    }

    pub fn merge_point(&self) -> [f64; 2] {
        [
            self.ramp_start[0] + self.ramp_radius,
            self.ramp_start[1] + self.ramp_straight + self.ramp_radius,
        ]
    }

    pub fn goal_point(&self) -> [f64; 2] {
        let m = self.merge_point();
        [m[0] + self.goal_distance, m[1]]
    }

    pub fn host_speed(&self) -> f64 {
        self.host_speed_kmh * KMH
    }

    pub fn ego_desired_speed(&self) -> f64 {
        self.ego_desired_speed_kmh * KMH
    }

    /// Ramp, arc, then mainline to its end.
    pub fn ego_path(&self) -> Path {
        let [sx, sy] = self.ramp_start;
        let r = self.ramp_radius;
        let top = sy + self.ramp_straight;
        let merge = self.merge_point();
        Path::from_pieces(vec![
            Piece::Line {
                start: [sx, sy],
                dir: [0.0, 1.0],
                len: self.ramp_straight,
            },
            Piece::Arc {
                center: [sx + r, top],
                radius: r,
                start_angle: std::f64::consts::PI,
                sweep: -std::f64::consts::FRAC_PI_2,
            },
            Piece::Line {
                start: merge,
                dir: [1.0, 0.0],
                len: self.mainline_end_x - merge[0],
            },
        ])
    }

    pub fn mainline(&self) -> Path {
        let y = self.merge_point()[1];
        Path::line([self.mainline_start_x, y], [1.0, 0.0], self.mainline_end_x - self.mainline_start_x)
    }

    pub fn policy_dt(&self) -> f64 {
        self.physics_dt * self.action_repeat as f64
    }
}

/// `−(w_p·‖p − goal‖ + w_v·|speed − v_des|)`.
pub fn reward(ego: &VehicleState, cfg: &ScenarioConfig) -> f64 {
    let g = cfg.goal_point();
    let dist = (ego.x - g[0]).hypot(ego.y - g[1]);
    -(cfg.reward_pos_weight * dist + cfg.reward_vel_weight * (ego.speed() - cfg.ego_desired_speed()).abs())
}

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

/// One physics tick, as written to trajectory files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub ego: VehicleState,
    pub host: VehicleState,
    pub raw_action: f64,
    pub filtered: [f64; 2],
    /// Barrier value per constraint axis, before the tick.
    pub h: Vec<f64>,
    pub infeasible: bool,
}

/// What one policy step produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvStep {
    pub reward: f64,
    pub done: bool,
    pub reached_goal: bool,
    /// Quantities at decision time (first tick of the step).
    pub constraints: Vec<SafetyConstraint>,
    pub action_map: [f64; 2],
    pub action_offset: [f64; 2],
    pub filtered: [f64; 2],
    pub infeasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub min_distance: f64,
    pub cbf_checks: usize,
    pub cbf_violations: usize,
    pub infeasible_ticks: usize,
    pub merge_time: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OnlineEnv {
    cfg: ScenarioConfig,
    path: Path,
    s_merge: f64,
    s_goal: f64,
    ego: VehicleState,
    host: VehicleState,
    host_offset: f64,
    offset_rng: RngStream,
    ego_rng: RngStream,
    host_rng: RngStream,
    t: f64,
    steps: usize,
    prev_action: f64,
    reached_goal: bool,
    stats: EpisodeStats,
    record: Option<Vec<TickRecord>>,
}

impl OnlineEnv {
    pub fn new(cfg: ScenarioConfig, rng: &RngStream) -> Result<Self> {
        cfg.validate()?;
        let path = cfg.ego_path();
        let s_merge = path.project(cfg.merge_point()).s;
        let s_goal = path.project(cfg.goal_point()).s;
        let mut env = Self {
            path,
            s_merge,
            s_goal,
            ego: VehicleState::new(0.0, 0.0, 0.0, 0.0),
            host: VehicleState::new(0.0, 0.0, 0.0, 0.0),
            host_offset: 0.0,
            offset_rng: rng.substream("host-offset"),
            ego_rng: rng.substream("ego-noise"),
            host_rng: rng.substream("host-noise"),
            t: 0.0,
            steps: 0,
            prev_action: 0.0,
            reached_goal: false,
            stats: EpisodeStats::default(),
            record: None,
            cfg,
        };
        env.reset();
        Ok(env)
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn ego(&self) -> &VehicleState {
        &self.ego
    }

    pub fn host(&self) -> &VehicleState {
        &self.host
    }

    pub fn host_offset(&self) -> f64 {
        self.host_offset
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    pub fn merge_arc_length(&self) -> f64 {
        self.s_merge
    }

    /// Starts collecting per-tick records (the current state included).
    pub fn start_recording(&mut self) {
        self.record = Some(Vec::new());
    }

    pub fn take_record(&mut self) -> Vec<TickRecord> {
        self.record.take().unwrap_or_default()
    }

    /// Ego at the ramp start, host at its start plus a fresh random offset.
    pub fn reset(&mut self) -> [f64; OBS_DIM] {
        self.reset_at(0.0)
    }

    /// Like [`reset`](Self::reset) but with both vehicles advanced by `t0`
    /// seconds at their nominal speeds.
    pub fn reset_at(&mut self, t0: f64) -> [f64; OBS_DIM] {
        let [lo, hi] = self.cfg.host_offset_range;
        self.host_offset = self.offset_rng.uniform(lo, hi);
        let v0 = self.cfg.ego_initial_speed;
        let s = v0 * t0;
        let p = self.path.point_at(s);
        let tan = self.path.tangent_at(s);
        self.ego = VehicleState::new(p[0], p[1], v0 * tan[0], v0 * tan[1]);
        let vh = self.cfg.host_speed();
        let host_x = (self.cfg.host_start_x + self.host_offset + vh * t0).min(self.cfg.mainline_end_x);
        self.host = VehicleState::new(host_x, self.cfg.merge_point()[1], vh, 0.0);
        self.t = 0.0;
        self.steps = 0;
        self.prev_action = 0.0;
        self.reached_goal = false;
        self.stats = EpisodeStats {
            min_distance: self.distance(),
            ..Default::default()
        };
        if let Some(rec) = self.record.as_mut() {
            rec.clear();
        }
        self.observation()
    }

    /// Overrides both vehicle states (tests and external drivers).
    pub fn set_states(&mut self, ego: VehicleState, host: VehicleState) {
        self.ego = ego;
        self.host = host;
        self.stats.min_distance = self.stats.min_distance.min(self.distance());
    }

    pub fn distance(&self) -> f64 {
        (self.ego.x - self.host.x).hypot(self.ego.y - self.host.y)
    }

    pub fn pair(&self) -> PairGeometry {
        PairGeometry::between(&self.ego, &self.cfg.ego_noise, &self.host, &self.cfg.host_noise)
    }

    /// Raw observation in the documented order: ego arc length to merge,
    /// ego speed, ego lateral offset, host distance to merge, host speed,
    /// Δx, Δy, Δvx, Δvy (ego minus host), previous action.
    pub fn observation(&self) -> [f64; OBS_DIM] {
        let proj = self.path.project(self.ego.position());
        let merge = self.cfg.merge_point();
        [
            self.s_merge - proj.s,
            self.ego.speed(),
            proj.offset,
            merge[0] - self.host.x,
            self.host.speed(),
            self.ego.x - self.host.x,
            self.ego.y - self.host.y,
            self.ego.vx - self.host.vx,
            self.ego.vy - self.host.vy,
            self.prev_action,
        ]
    }

    pub fn features(&self) -> Vec<f64> {
        scale_features(&self.observation())
    }

    /// Nominal command split into its action-proportional direction and the
    /// lateral tracking term.
    fn nominal_parts(&self) -> ([f64; 2], [f64; 2]) {
        let proj = self.path.project(self.ego.position());
        let t = proj.tangent;
        let n = proj.normal();
        let v = self.ego.velocity();
        let v_t = v[0] * t[0] + v[1] * t[1];
        let v_n = v[0] * n[0] + v[1] * n[1];
        let a_n = proj.curvature * v_t * v_t - self.cfg.lateral_damping * (v_n + self.cfg.lateral_gain * proj.offset);
        (t, [a_n * n[0], a_n * n[1]])
    }

    fn host_command(&self) -> ControlInput {
        let c = &self.cfg;
        let y_err = self.host.y - c.merge_point()[1];
        let ux = c.host_gain * (c.host_speed() - self.host.vx);
        let uy = -c.lateral_damping * (self.host.vy + c.lateral_gain * y_err);
        ControlInput::new(ux.clamp(c.cbf.u_min, c.cbf.u_max), uy.clamp(c.cbf.u_min, c.cbf.u_max))
    }

    /// Applies `action` (longitudinal acceleration) for `action_repeat`
    /// ticks.
    pub fn step(&mut self, action: f64) -> Result<EnvStep> {
        if !action.is_finite() {
            return Err(Error::domain(format!("non-finite action {action}")));
        }
        let cfg = self.cfg.clone();
        let dt = cfg.physics_dt;
        let axes = cfg.cbf.axes();
        let mut decision: Option<Decision> = None;
        for _ in 0..cfg.action_repeat {
            let (dir, lat) = self.nominal_parts();
            let nominal = ControlInput::new(action * dir[0] + lat[0], action * dir[1] + lat[1]);
            let pair = self.pair();
            let constraints = pair_constraints(&pair, &cfg.cbf)?;
            let out = if cfg.safety_filter {
                safety_filter(&nominal, &constraints, &cfg.cbf)
            } else {
                safety_filter(&nominal, &[], &cfg.cbf)
            };
            let eps_e = cfg.ego_noise.sample(&mut self.ego_rng)?;
            let eps_h = cfg.host_noise.sample(&mut self.host_rng)?;
            let deps = [eps_e[0] - eps_h[0], eps_e[1] - eps_h[1]];
            self.stats.cbf_checks += 1;
            if axes.iter().any(|&ax| cbf_condition(&pair, &cfg.cbf, ax, &out.u, deps) < 0.0) {
                self.stats.cbf_violations += 1;
            }
            if out.infeasible {
                self.stats.infeasible_ticks += 1;
            }
            let h: Vec<f64> = axes.iter().map(|&ax| barrier(&pair, &cfg.cbf, ax)).collect();
            let host_u = self.host_command();
            self.ego = step_with_noise(&self.ego, &out.u, eps_e, cfg.ego_noise.channel, dt)?;
            self.host = step_with_noise(&self.host, &host_u, eps_h, cfg.host_noise.channel, dt)?;
            self.t += dt;
            self.stats.min_distance = self.stats.min_distance.min(self.distance());
            if let Some(rec) = self.record.as_mut() {
                rec.push(TickRecord {
                    t: self.t,
                    ego: self.ego,
                    host: self.host,
                    raw_action: action,
                    filtered: out.u.as_array(),
                    h,
                    infeasible: out.infeasible,
                });
            }
            if decision.is_none() {
                decision = Some((constraints, dir, lat, out));
            }
            if self.host.x >= cfg.mainline_end_x {
                let [lo, hi] = cfg.host_offset_range;
                self.host_offset = self.offset_rng.uniform(lo, hi);
                let x = cfg.host_start_x + self.host_offset;
                self.host = VehicleState::new(x, cfg.merge_point()[1], self.host.vx, 0.0);
            }
            let s = self.path.project(self.ego.position()).s;
            if self.stats.merge_time.is_none() && s >= self.s_merge {
                self.stats.merge_time = Some(self.t);
            }
            if s >= self.s_goal {
                self.reached_goal = true;
                break;
            }
        }
        self.steps += 1;
        self.prev_action = action.clamp(cfg.cbf.u_min, cfg.cbf.u_max);
        let (constraints, dir, lat, out) = decision.expect("action_repeat >= 1");
        Ok(EnvStep {
            reward: reward(&self.ego, &cfg),
            done: self.reached_goal || self.steps >= cfg.horizon,
            reached_goal: self.reached_goal,
            constraints,
            action_map: dir,
            action_offset: lat,
            filtered: out.u.as_array(),
            infeasible: out.infeasible,
        })
    }
}

/// Constraints, action direction, lateral term and filter output of the
/// first tick of a decision.
type Decision = (Vec<SafetyConstraint>, [f64; 2], [f64; 2], FilterOutput);

pub fn scale_features(obs: &[f64; OBS_DIM]) -> Vec<f64> {
    obs.iter().zip(OBS_SCALE).map(|(v, s)| v / s).collect()
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSpec {
    pub episodes: usize,
    /// Policy steps per episode (episodes may end earlier at the goal).
    pub length: usize,
    pub gamma: f64,
    /// Start at a random time in the scenario's start range.
    pub random_start: bool,
    /// Sample actions; otherwise act with the policy mean.
    pub stochastic: bool,
    pub record: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Rollouts {
    pub batch: RolloutBatch,
    /// Per-episode tick records when recording was requested.
    pub trajectories: Vec<Vec<TickRecord>>,
}

/// Runs `spec.episodes` independent episodes; episode `i` draws all of its
/// randomness from `rng.substream("episode/i")`.
pub fn collect_rollouts(
    actor: &PolicyParams,
    cfg: &ScenarioConfig,
    spec: &RolloutSpec,
    rng: &RngStream,
) -> Result<Rollouts> {
    if spec.episodes == 0 || spec.length == 0 {
        return Err(Error::domain("rollouts need at least one episode and one step"));
    }
    if actor.obs_dim() != OBS_DIM || actor.action_dim() != 1 {
        return Err(Error::Dimension {
            expected: OBS_DIM,
            got: actor.obs_dim(),
        });
    }
    let mut out = Rollouts::default();
    for i in 0..spec.episodes {
        let erng = rng.substream(&format!("episode/{i}"));
        let mut env = OnlineEnv::new(cfg.clone(), &erng.substream("env"))?;
        let t0 = if spec.random_start {
            let [lo, hi] = cfg.start_time_range;
            erng.substream("start").uniform(lo, hi)
        } else {
            0.0
        };
        if spec.record {
            env.start_recording();
        }
        env.reset_at(t0);
        let mut prng = erng.substream("policy");
        let mut steps_taken = 0;
        let mut done = false;
        while steps_taken < spec.length && !done {
            let obs = env.features();
            let (mean, std) = actor.forward(&obs)?;
            let action = if spec.stochastic {
                sample_action(&mean, &std, &mut prng)?
            } else {
                mean
            };
            let res = env.step(action[0])?;
            steps_taken += 1;
            done = res.done;
            out.batch.steps.push(StepRecord {
                episode: i,
                obs,
                raw_action: action,
                filtered_action: res.filtered,
                action_map: vec![res.action_map],
                action_offset: res.action_offset,
                reward: res.reward,
                ret: 0.0,
                advantage: 0.0,
                constraints: res.constraints,
                done: done || steps_taken == spec.length,
                infeasible: res.infeasible,
            });
        }
        let stats = *env.stats();
        out.batch.episodes.push(EpisodeSummary {
            index: i,
            seed: rng.seed(),
            initial_offset: env.host_offset(),
            min_distance: stats.min_distance,
            steps: steps_taken,
            terminated_early: steps_taken < spec.length,
            reached_goal: env.reached_goal,
            merge_time: stats.merge_time,
            cbf_checks: stats.cbf_checks,
            cbf_violations: stats.cbf_violations,
            infeasible_ticks: stats.infeasible_ticks,
            mean_tracking_error: None,
        });
        if spec.record {
            out.trajectories.push(env.take_record());
        }
    }
    out.batch.compute_returns(spec.gamma);
    Ok(out)
}

/// Column names for the per-axis barrier values under `cbf`.
pub fn barrier_columns(cbf: &CbfConfig) -> Vec<&'static str> {
    cbf.axes()
        .iter()
        .map(|ax| match ax {
            Axis::X => "h_x",
            Axis::Y => "h_y",
            Axis::Coupled => "h",
        })
        .collect()
}

/// Trajectory CSV: one row per physics tick.
pub fn trajectory_csv(ticks: &[TickRecord], cbf: &CbfConfig) -> String {
    let mut s = String::from(
        "t,ego_x,ego_y,ego_vx,ego_vy,host_x,host_y,host_vx,host_vy,raw_action,filtered_ux,filtered_uy",
    );
    for c in barrier_columns(cbf) {
        s.push(',');
        s.push_str(c);
    }
    s.push_str(",infeasible\n");
    for r in ticks {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.ego.x,
            r.ego.y,
            r.ego.vx,
            r.ego.vy,
            r.host.x,
            r.host.y,
            r.host.vx,
            r.host.vy,
            r.raw_action,
            r.filtered[0],
            r.filtered[1]
        );
        for h in &r.h {
            let _ = write!(s, ",{h}");
        }
        let _ = writeln!(s, ",{}", u8::from(r.infeasible));
    }
    s
}

pub fn write_trajectory_csv(path: &FsPath, ticks: &[TickRecord], cbf: &CbfConfig) -> Result<()> {
    std::fs::write(path, trajectory_csv(ticks, cbf)).map_err(|e| Error::io(path, e))
}
