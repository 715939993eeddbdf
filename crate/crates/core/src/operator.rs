//! Scripted operators that stand in for human subjects.
//!
//! An operator pursues a point `lookahead` ahead of the (delayed) observed
//! robot along the wire, advancing its intent at `nominal_speed`, and adds a
//! bounded seeded tremor on top.

use crate::course::WireCourse;
use crate::geometry::{Pose, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::TAU;
use thiserror::Error;

pub const OPERATOR_PRESETS: &[&str] = &["novice", "typical", "expert"];

/// World-axis tremor weights `(travel, depth, vertical)`; their norm is below
/// one, so the tremor never exceeds the configured amplitude.
const TREMOR_AXIS_WEIGHTS: [f64; 3] = [0.3, 0.8, 0.5];

/// Tremor fades in over this long at the start of a trial (s).
const TREMOR_RAMP: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum InputError {
    #[error("live input source disconnected")]
    Disconnected,
}

/// Something that produces the operator's handle pose every tick.
pub trait InputSource {
    fn next_input(&mut self, observed_robot: &Pose, course: &WireCourse, t: f64) -> Result<Pose, InputError>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorPolicy {
    pub lookahead: f64,
    pub nominal_speed: f64,
    pub tremor_amplitude: f64,
    pub tremor_frequency: f64,
    pub reaction_delay: f64,
    pub noise_seed: u64,
}

impl OperatorPolicy {
    pub fn preset(name: &str) -> Option<OperatorPolicy> {
        let p = match name {
            "novice" => OperatorPolicy {
                lookahead: 0.03,
                nominal_speed: 0.04,
                tremor_amplitude: 0.018,
                tremor_frequency: 0.8,
                reaction_delay: 0.35,
                noise_seed: 0,
            },
            "typical" => OperatorPolicy {
                lookahead: 0.03,
                nominal_speed: 0.05,
                tremor_amplitude: 0.014,
                tremor_frequency: 0.6,
                reaction_delay: 0.2,
                noise_seed: 0,
            },
            "expert" => OperatorPolicy {
                lookahead: 0.03,
                nominal_speed: 0.05,
                tremor_amplitude: 0.0005,
                tremor_frequency: 0.5,
                reaction_delay: 0.1,
                noise_seed: 0,
            },
            _ => return None,
        };
        Some(p)
    }

    pub fn with_seed(self, noise_seed: u64) -> Self {
        OperatorPolicy { noise_seed, ..self }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lookahead > 0.0) {
            return Err("lookahead must be > 0".into());
        }
        if !(self.nominal_speed > 0.0) {
            return Err("nominal_speed must be > 0".into());
        }
        if !(self.tremor_amplitude >= 0.0) {
            return Err("tremor_amplitude must be >= 0".into());
        }
        if !(self.tremor_frequency > 0.0) {
            return Err("tremor_frequency must be > 0".into());
        }
        if !(self.reaction_delay >= 0.0) {
            return Err("reaction_delay must be >= 0".into());
        }
        Ok(())
    }
}

/// Bounded band-limited noise: per world axis a weighted pair of sinusoids
/// with seeded phases and slightly seeded frequencies.
#[derive(Clone, Debug)]
struct Tremor {
    amplitude: f64,
    /// per axis: (freq1, phase1, freq2, phase2)
    axes: [(f64, f64, f64, f64); 3],
}

impl Tremor {
    fn new(amplitude: f64, frequency: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axes = std::array::from_fn(|_| {
            let f1 = frequency * rng.random_range(0.8..1.2);
            let f2 = 2.3 * frequency * rng.random_range(0.8..1.2);
            (f1, rng.random_range(0.0..TAU), f2, rng.random_range(0.0..TAU))
        });
        Tremor { amplitude, axes }
    }

    fn offset(&self, t: f64) -> Vec3 {
        if self.amplitude == 0.0 {
            return Vec3::zeros();
        }
        let ramp = (t / TREMOR_RAMP).clamp(0.0, 1.0);
        let v = Vec3::from_fn(|j, _| {
            let (f1, p1, f2, p2) = self.axes[j];
            let raw = 0.6 * (TAU * f1 * t + p1).sin() + 0.4 * (TAU * f2 * t + p2).sin();
            TREMOR_AXIS_WEIGHTS[j] * raw
        });
        v * (self.amplitude * ramp)
    }
}

/// Runtime state of one scripted operator.
#[derive(Clone, Debug)]
pub struct Operator {
    policy: OperatorPolicy,
    tremor: Tremor,
    intent_s: f64,
    last_t: Option<f64>,
    observations: VecDeque<(f64, Pose)>,
}

impl Operator {
    pub fn new(policy: OperatorPolicy, course: &WireCourse) -> Self {
        Operator {
            policy,
            tremor: Tremor::new(policy.tremor_amplitude, policy.tremor_frequency, policy.noise_seed),
            intent_s: course.start_s(),
            last_t: None,
            observations: VecDeque::new(),
        }
    }

    pub fn policy(&self) -> &OperatorPolicy {
        &self.policy
    }

    /// Arc position the operator is currently aiming at.
    pub fn intent_s(&self) -> f64 {
        self.intent_s
    }

    /// Zero-order hold of the robot pose `reaction_delay` in the past.
    fn delayed_observation(&mut self, observed: &Pose, t: f64) -> Pose {
        self.observations.push_back((t, *observed));
        let cutoff = t - self.policy.reaction_delay;
        while self.observations.len() > 1 && self.observations[1].0 <= cutoff {
            self.observations.pop_front();
        }
        self.observations[0].1
    }

    /// Handle pose commanded at time `t`.
    pub fn policy_step(&mut self, observed_robot: &Pose, course: &WireCourse, t: f64) -> Pose {
        let seen = self.delayed_observation(observed_robot, t);
        let dt = self.last_t.map_or(0.0, |t0| (t - t0).max(0.0));
        self.last_t = Some(t);
        let (robot_s, _, _) = course.nearest(&seen.position);
        let target_s = (robot_s + self.policy.lookahead).min(course.total_length());
        let advanced = (self.intent_s + self.policy.nominal_speed * dt).min(target_s);
        self.intent_s = self.intent_s.max(advanced);
        let nominal = course.pose_at(self.intent_s);
        Pose::new(nominal.position + self.tremor.offset(t), nominal.orientation)
    }
}

impl InputSource for Operator {
    fn next_input(&mut self, observed_robot: &Pose, course: &WireCourse, t: f64) -> Result<Pose, InputError> {
        Ok(self.policy_step(observed_robot, course, t))
    }
}
