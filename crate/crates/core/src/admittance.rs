//! Discrete-time admittance control of the human and autonomy channels and
//! the shared-control tick.
//!
//! Both channels integrate a generalized force into a momentum-like
//! accumulator and divide by the virtual mass:
//!
//! * human: `u_h = M⁻¹ ∫ (k ⊙ e + d ⊙ ė) dt`
//! * autonomy: `u_r = M⁻¹ ∫ w_a dt`
//!
//! Integration is explicit Euler at a fixed `dt`. Each accumulator is clamped
//! componentwise to `windup_limit` and may decay with an exponential leak
//! (off by default). Output twists are clamped to `velocity_limit`.

use crate::arbitration::{blend, ArbitrationMatrix};
use crate::geometry::{integrate_pose, pose_error, Pose, PoseError, Twist, Vec6, Wrench};
use serde::{Deserialize, Serialize};

/// Nominal control period (100 Hz).
pub const DEFAULT_DT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmittanceParams {
    /// diagonal virtual mass (kg ×3, kg·m² ×3)
    pub mass: Vec6,
    pub stiffness: Vec6,
    pub damping: Vec6,
    pub velocity_limit: Vec6,
    /// componentwise bound on both accumulators
    pub windup_limit: f64,
    /// exponential leak rate of the human accumulator (1/s)
    #[serde(default)]
    pub leak_h: f64,
    /// exponential leak rate of the autonomy accumulator (1/s)
    #[serde(default)]
    pub leak_r: f64,
}

impl Default for AdmittanceParams {
    fn default() -> Self {
        AdmittanceParams {
            mass: Vec6::new(1.0, 1.0, 1.0, 0.2, 0.2, 0.2),
            stiffness: Vec6::repeat(50.0),
            damping: Vec6::repeat(10.0),
            velocity_limit: Vec6::new(0.5, 0.5, 0.5, 2.0, 2.0, 2.0),
            windup_limit: 10.0,
            leak_h: 0.0,
            leak_r: 0.0,
        }
    }
}

impl AdmittanceParams {
    /// Defaults with a damped autonomy channel, used by the experiment
    /// presets. Without a leak the autonomy integral turns the centring field
    /// into an undamped oscillator.
    pub fn assistive() -> Self {
        AdmittanceParams { leak_r: 20.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.mass.iter().any(|m| !(*m > 0.0)) {
            return Err("mass components must be > 0".into());
        }
        if self.stiffness.iter().chain(self.damping.iter()).any(|v| !(*v >= 0.0)) {
            return Err("stiffness and damping must be >= 0".into());
        }
        if self.velocity_limit.iter().any(|v| !(*v > 0.0)) {
            return Err("velocity_limit components must be > 0".into());
        }
        if !(self.windup_limit > 0.0) {
            return Err("windup_limit must be > 0".into());
        }
        if !(self.leak_h >= 0.0 && self.leak_r >= 0.0) {
            return Err("leak rates must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegratorState {
    pub accum_h: Vec6,
    pub accum_r: Vec6,
    /// previous pose error; `None` before the first tick of a trial
    pub prev_e: Option<PoseError>,
}

impl IntegratorState {
    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

fn accumulate(accum: &mut Vec6, input: &Vec6, leak: f64, limit: f64, dt: f64) {
    let decay = if leak > 0.0 { (-leak * dt).exp() } else { 1.0 };
    for j in 0..6 {
        accum[j] = (accum[j] * decay + input[j] * dt).clamp(-limit, limit);
    }
}

fn to_twist(accum: &Vec6, params: &AdmittanceParams) -> Twist {
    let v = Vec6::from_fn(|j, _| {
        let lim = params.velocity_limit[j];
        (accum[j] / params.mass[j]).clamp(-lim, lim)
    });
    Twist::from_vec6(&v)
}

/// Human-channel command from the pose error and its rate.
pub fn human_command(
    e: &PoseError,
    e_dot: &Vec6,
    params: &AdmittanceParams,
    state: &mut IntegratorState,
    dt: f64,
) -> Twist {
    let input = params.stiffness.component_mul(e.as_vec6()) + params.damping.component_mul(e_dot);
    accumulate(&mut state.accum_h, &input, params.leak_h, params.windup_limit, dt);
    to_twist(&state.accum_h, params)
}

/// Autonomy-channel command from the assistive wrench.
pub fn autonomy_command(w_a: &Wrench, params: &AdmittanceParams, state: &mut IntegratorState, dt: f64) -> Twist {
    accumulate(&mut state.accum_r, &w_a.to_vec6(), params.leak_r, params.windup_limit, dt);
    to_twist(&state.accum_r, params)
}

/// Everything one controller tick produces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TickOutput {
    pub u_h: Twist,
    pub u_r: Twist,
    pub u_sc: Twist,
    pub robot: Pose,
}

/// Pose error backward difference; zero on the first tick of a trial.
pub fn error_rate(e: &PoseError, state: &mut IntegratorState, dt: f64) -> Vec6 {
    let rate = match state.prev_e {
        Some(prev) => (e.0 - prev.0) / dt,
        None => Vec6::zeros(),
    };
    state.prev_e = Some(*e);
    rate
}

/// One shared-control step: both channel commands, their blend and the
/// resulting robot pose.
pub fn control_tick(
    handle_input: &Pose,
    robot: &Pose,
    w_a: &Wrench,
    a: &ArbitrationMatrix,
    params: &AdmittanceParams,
    state: &mut IntegratorState,
    dt: f64,
) -> TickOutput {
    debug_assert!(dt > 0.0);
    let e = pose_error(handle_input, robot);
    let e_dot = error_rate(&e, state, dt);
    let u_h = human_command(&e, &e_dot, params, state, dt);
    let u_r = autonomy_command(w_a, params, state, dt);
    let u_sc = blend(&u_r, &u_h, a);
    TickOutput { u_h, u_r, u_sc, robot: integrate_pose(robot, &u_sc, dt) }
}
