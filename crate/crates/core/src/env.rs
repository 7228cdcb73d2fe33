//! Fixed-timestep cart-pole physics.
//!
//! Frictionless cart with a uniform pole hinged on top, integrated with
//! explicit Euler. Positions advance with the pre-step velocities, then the
//! velocities advance with the accelerations evaluated at the pre-step state.
//! Angles are radians internally, `0` is upright and positive is clockwise
//! (the pole tip moves towards `+x`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Failure angle in degrees. Strictly greater fails.
pub const FAILURE_ANGLE_DEG: f64 = 12.0;

/// Reward for entering a failure state.
pub const FAILURE_REWARD: f64 = -1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsParams {
    pub track_length: f64,
    pub pole_length: f64,
    pub pole_mass: f64,
    pub cart_mass: f64,
    pub dt: f64,
    pub force_magnitude: f64,
    pub gravity: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            track_length: 4.4,
            pole_length: 1.0,
            pole_mass: 0.1,
            cart_mass: 1.0,
            dt: 0.02,
            force_magnitude: 10.0,
            gravity: 9.8,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("track_length", self.track_length),
            ("pole_length", self.pole_length),
            ("pole_mass", self.pole_mass),
            ("cart_mass", self.cart_mass),
            ("dt", self.dt),
            ("force_magnitude", self.force_magnitude),
            ("gravity", self.gravity),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "physics.{name} must be strictly positive, got {value}"
                )));
            }
        }
        Ok(())
    }

    pub fn half_track(&self) -> f64 {
        self.track_length / 2.0
    }

    fn half_pole(&self) -> f64 {
        self.pole_length / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContinuousState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub time_index: u64,
}

impl ContinuousState {
    /// Reflection through the track center. Keeps the time index.
    pub fn mirror(&self) -> Self {
        Self {
            x: -self.x,
            x_dot: -self.x_dot,
            theta: -self.theta,
            theta_dot: -self.theta_dot,
            time_index: self.time_index,
        }
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta.to_degrees()
    }

    pub fn theta_dot_deg(&self) -> f64 {
        self.theta_dot.to_degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    PushLeft,
    PushRight,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::PushLeft, Action::PushRight];

    pub fn index(self) -> usize {
        match self {
            Action::PushLeft => 0,
            Action::PushRight => 1,
        }
    }

    pub fn from_index(index: usize) -> Action {
        if index == 0 {
            Action::PushLeft
        } else {
            Action::PushRight
        }
    }

    pub fn opposite(self) -> Action {
        match self {
            Action::PushLeft => Action::PushRight,
            Action::PushRight => Action::PushLeft,
        }
    }

    fn sign(self) -> f64 {
        match self {
            Action::PushLeft => -1.0,
            Action::PushRight => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_state: ContinuousState,
    pub reward: f64,
    pub failed: bool,
}

pub fn initial_state() -> ContinuousState {
    ContinuousState::default()
}

pub fn is_failure(state: &ContinuousState, params: &PhysicsParams) -> bool {
    state.theta.abs() > FAILURE_ANGLE_DEG.to_radians() || state.x.abs() > params.half_track()
}

/// Advances one time slice under a push of the given action.
pub fn step(state: &ContinuousState, action: Action, params: &PhysicsParams) -> Result<StepOutcome> {
    if is_failure(state, params) {
        return Err(Error::FailingState);
    }
    let next_state = integrate(state, action.sign() * params.force_magnitude, params);
    let failed = is_failure(&next_state, params);
    Ok(StepOutcome {
        next_state,
        reward: if failed { FAILURE_REWARD } else { 0.0 },
        failed,
    })
}

fn integrate(state: &ContinuousState, force: f64, params: &PhysicsParams) -> ContinuousState {
    let total_mass = params.cart_mass + params.pole_mass;
    let half_pole = params.half_pole();
    let (sin, cos) = state.theta.sin_cos();

    // Written so that negating (force, theta, theta_dot) negates both
    // accelerations bit-for-bit.
    let temp = (force + params.pole_mass * half_pole * state.theta_dot * state.theta_dot * sin) / total_mass;
    let theta_acc = (params.gravity * sin - cos * temp)
        / (half_pole * (4.0 / 3.0 - params.pole_mass * cos * cos / total_mass));
    let x_acc = temp - params.pole_mass * half_pole * theta_acc * cos / total_mass;

    ContinuousState {
        x: state.x + params.dt * state.x_dot,
        x_dot: state.x_dot + params.dt * x_acc,
        theta: state.theta + params.dt * state.theta_dot,
        theta_dot: state.theta_dot + params.dt * theta_acc,
        time_index: state.time_index + 1,
    }
}
