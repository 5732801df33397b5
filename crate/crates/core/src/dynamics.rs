//! Stochastic double-integrator vehicle model.
//!
//! Per step of length `dt` (forward Euler):
//!
//! ```text
//! v' = v + u·dt
//! p' = p + (v + ε)·dt        ε ~ N(ε̂, Σ), Σ diagonal
//! ```
//!
//! The noise enters the position channel. [`NoiseChannel::Velocity`] is an
//! alternative that perturbs `v'` by `ε` instead; it is off by default.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_gaussian, RngStream};

/// Below this speed the heading is frozen instead of re-derived.
pub const HEADING_SPEED_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    /// Radians in (-π, π].
    pub heading: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        let heading = if vx.hypot(vy) > HEADING_SPEED_EPS {
            normalize_angle(vy.atan2(vx))
        } else {
            0.0
        };
        Self { x, y, vx, vy, heading }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.vx, self.vy]
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.vx, self.vy, self.heading]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Acceleration command in m/s².
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub ux: f64,
    pub uy: f64,
}

impl ControlInput {
    pub fn new(ux: f64, uy: f64) -> Self {
        Self { ux, uy }
    }

    /// Scalar acceleration `a` along heading `psi`.
    pub fn along(a: f64, psi: f64) -> Self {
        Self {
            ux: a * psi.cos(),
            uy: a * psi.sin(),
        }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.ux, self.uy]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseChannel {
    #[default]
    Position,
    Velocity,
}

/// Additive Gaussian motion noise with diagonal covariance, in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub mean: [f64; 2],
    pub var: [f64; 2],
    #[serde(default)]
    pub channel: NoiseChannel,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self::zero()
    }
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self {
            mean: [0.0; 2],
            var: [0.0; 2],
            channel: NoiseChannel::Position,
        }
    }

    pub fn isotropic(var: f64) -> Self {
        Self {
            mean: [0.0; 2],
            var: [var; 2],
            channel: NoiseChannel::Position,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.var.iter().any(|v| !(*v >= 0.0) || !v.is_finite())
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::domain(format!(
                "noise model needs finite mean and variances >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<[f64; 2]> {
        let e = sample_gaussian(rng, &self.mean, &self.var)?;
        Ok([e[0], e[1]])
    }
}

/// Wraps an angle into (-π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

fn check_inputs(state: &VehicleState, u: &ControlInput, dt: f64) -> Result<()> {
    if !state.is_finite() || !u.ux.is_finite() || !u.uy.is_finite() {
        return Err(Error::domain(format!(
            "non-finite dynamics input: state={state:?} u={u:?}"
        )));
    }
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::domain(format!("dt must be finite and >= 0, got {dt}")));
    }
    Ok(())
}

/// Advances one vehicle by `dt` with an explicit noise realization `eps`.
pub fn step_with_noise(
    state: &VehicleState,
    u: &ControlInput,
    eps: [f64; 2],
    channel: NoiseChannel,
    dt: f64,
) -> Result<VehicleState> {
    check_inputs(state, u, dt)?;
    if dt == 0.0 {
        return Ok(*state);
    }
    let (mut vx, mut vy) = (state.vx + u.ux * dt, state.vy + u.uy * dt);
    let (x, y) = match channel {
        NoiseChannel::Position => (
            state.x + (state.vx + eps[0]) * dt,
            state.y + (state.vy + eps[1]) * dt,
        ),
        NoiseChannel::Velocity => {
            vx += eps[0];
            vy += eps[1];
            (state.x + state.vx * dt, state.y + state.vy * dt)
        }
    };
    let heading = if vx.hypot(vy) > HEADING_SPEED_EPS {
        normalize_angle(vy.atan2(vx))
    } else {
        state.heading
    };
    Ok(VehicleState { x, y, vx, vy, heading })
}

/// One noisy step; `ε` is drawn from `noise` using `rng`.
pub fn step(
    state: &VehicleState,
    u: &ControlInput,
    noise: &NoiseModel,
    dt: f64,
    rng: &mut RngStream,
) -> Result<VehicleState> {
    check_inputs(state, u, dt)?;
    noise.validate()?;
    if dt == 0.0 {
        return Ok(*state);
    }
    let eps = noise.sample(rng)?;
    step_with_noise(state, u, eps, noise.channel, dt)
}

pub fn step_deterministic(state: &VehicleState, u: &ControlInput, dt: f64) -> Result<VehicleState> {
    step_with_noise(state, u, [0.0, 0.0], NoiseChannel::Position, dt)
}
