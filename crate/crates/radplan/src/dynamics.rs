//! Kinematic bicycle forward model and its inverse.

use crate::types::{wrap_angle, Action, ActionSequence, AgentState, Trajectory};
use crate::{Error, Result};

/// Speeds below this are treated as standstill when inverting steering.
pub const SPEED_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BicycleParams {
    /// Wheelbase, meters.
    pub wheelbase: f64,
    /// Integration step, seconds.
    pub dt: f64,
}

impl Default for BicycleParams {
    fn default() -> Self {
        BicycleParams {
            wheelbase: 2.8,
            dt: 0.1,
        }
    }
}

/// One explicit-Euler step. Every right-hand side reads the pre-update state:
/// position advances with the old speed and heading, and the heading rate
/// uses the old speed.
pub fn euler_step(state: &AgentState, action: &Action, params: &BicycleParams) -> AgentState {
    let AgentState {
        x,
        y,
        heading,
        speed,
    } = *state;
    AgentState {
        x: x + speed * heading.cos() * params.dt,
        y: y + speed * heading.sin() * params.dt,
        heading: wrap_angle(heading + speed / params.wheelbase * action.steer.tan() * params.dt),
        speed: speed + action.accel * params.dt,
    }
}

/// Integrate an action sequence from an initial state. The returned trajectory
/// contains the initial state followed by one state per action.
pub fn rollout(
    initial: &AgentState,
    actions: &ActionSequence,
    params: &BicycleParams,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(actions.len() + 1);
    states.push(*initial);
    for (i, action) in actions.steps.iter().enumerate() {
        if !action.accel.is_finite() || !action.steer.is_finite() {
            return Err(Error::NonFinite(format!("action at step {i}")));
        }
        let next = euler_step(states.last().expect("non-empty"), action, params);
        states.push(next);
    }
    Trajectory::all_valid(states)
}

/// Outcome of inverting a trajectory: the recovered actions plus whether any
/// step had to be clamped into bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseDynamics {
    pub actions: ActionSequence,
    pub clamped: bool,
}

/// Recover per-step (acceleration, steering) from consecutive states:
/// u = dh/dt and steer = atan(L * dtheta / (h * dt)), with the heading
/// difference wrapped into (-pi, pi]. Below [`SPEED_EPS`] the steering is
/// zero. Out-of-bound actions are clamped and reported through the flag.
pub fn inverse_dynamics(
    traj: &Trajectory,
    params: &BicycleParams,
    bounds: &crate::types::ActionBounds,
) -> Result<InverseDynamics> {
    if traj.len() < 2 {
        return Err(Error::Shape("inverse dynamics needs at least two states".into()));
    }
    let mut clamped = false;
    let mut steps = Vec::with_capacity(traj.len() - 1);
    for w in traj.states.windows(2) {
        let (cur, next) = (&w[0], &w[1]);
        let mut accel = (next.speed - cur.speed) / params.dt;
        let mut steer = if cur.speed.abs() < SPEED_EPS {
            0.0
        } else {
            let dtheta = wrap_angle(next.heading - cur.heading);
            (params.wheelbase * dtheta / (cur.speed * params.dt)).atan()
        };
        if accel.abs() > bounds.accel_max {
            accel = accel.clamp(-bounds.accel_max, bounds.accel_max);
            clamped = true;
        }
        if steer.abs() > bounds.steer_max {
            steer = steer.clamp(-bounds.steer_max, bounds.steer_max);
            clamped = true;
        }
        steps.push(Action { accel, steer });
    }
    Ok(InverseDynamics {
        actions: ActionSequence::new(steps),
        clamped,
    })
}
