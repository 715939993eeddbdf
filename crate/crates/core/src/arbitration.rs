//! User-editable arbitration: the five factors, θ, the mask `W`, the diagonal
//! blending matrix and the blending law itself.

use crate::apf::FieldParams;
use crate::geometry::{Twist, Vec6};
use nalgebra::{Matrix6x3, Vector3};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Factor bounds and quantum on the UI scale (`[10, 100]`, steps of 5). The
/// internal scale is the UI value divided by 100.
pub const UI_MIN: u8 = 10;
pub const UI_MAX: u8 = 100;
pub const UI_STEP: u8 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum FactorError {
    #[error("unknown factor `{0}`")]
    UnknownFactor(String),
    #[error("factor `{factor}` = {value} must be a multiple of 0.05 in [0.1, 1.0]")]
    OutOfRange { factor: FactorId, value: f64 },
    #[error("unknown edit direction `{0}` (expected `+` or `-`)")]
    Direction(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorId {
    Speed,
    DepthAssist,
    Turnability,
    Safety,
    Responsiveness,
}

impl FactorId {
    pub const ALL: [FactorId; 5] =
        [FactorId::Speed, FactorId::DepthAssist, FactorId::Turnability, FactorId::Safety, FactorId::Responsiveness];

    pub fn as_str(self) -> &'static str {
        match self {
            FactorId::Speed => "speed",
            FactorId::DepthAssist => "depth_assist",
            FactorId::Turnability => "turnability",
            FactorId::Safety => "safety",
            FactorId::Responsiveness => "responsiveness",
        }
    }
}

impl fmt::Display for FactorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FactorId {
    type Err = FactorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FactorId::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| FactorError::UnknownFactor(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditDirection {
    #[serde(rename = "+")]
    Increase,
    #[serde(rename = "-")]
    Decrease,
}

impl FromStr for EditDirection {
    type Err = FactorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "+" => Ok(EditDirection::Increase),
            "-" | "−" => Ok(EditDirection::Decrease),
            other => Err(FactorError::Direction(other.to_string())),
        }
    }
}

/// The five editable factors, stored on the UI scale so that every value is
/// an exact multiple of the quantum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "FactorValues", into = "FactorValues")]
pub struct FactorSet {
    ui: [u8; 5],
}

/// Internal-scale view used for (de)serialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorValues {
    pub speed: f64,
    pub depth_assist: f64,
    pub turnability: f64,
    pub safety: f64,
    pub responsiveness: f64,
}

impl From<FactorSet> for FactorValues {
    fn from(f: FactorSet) -> Self {
        FactorValues {
            speed: f.get(FactorId::Speed),
            depth_assist: f.get(FactorId::DepthAssist),
            turnability: f.get(FactorId::Turnability),
            safety: f.get(FactorId::Safety),
            responsiveness: f.get(FactorId::Responsiveness),
        }
    }
}

impl TryFrom<FactorValues> for FactorSet {
    type Error = FactorError;

    fn try_from(v: FactorValues) -> Result<Self, Self::Error> {
        FactorSet::new(v.speed, v.depth_assist, v.turnability, v.safety, v.responsiveness)
    }
}

impl Default for FactorSet {
    fn default() -> Self {
        FactorSet { ui: [50; 5] }
    }
}

fn to_ui(factor: FactorId, value: f64) -> Result<u8, FactorError> {
    let steps = value * 20.0;
    let rounded = steps.round();
    if !value.is_finite() || (steps - rounded).abs() > 1e-6 || !(2.0..=20.0).contains(&rounded) {
        return Err(FactorError::OutOfRange { factor, value });
    }
    Ok(rounded as u8 * UI_STEP)
}

impl FactorSet {
    pub fn new(
        speed: f64,
        depth_assist: f64,
        turnability: f64,
        safety: f64,
        responsiveness: f64,
    ) -> Result<Self, FactorError> {
        let values = [speed, depth_assist, turnability, safety, responsiveness];
        let mut ui = [0u8; 5];
        for (slot, (id, v)) in ui.iter_mut().zip(FactorId::ALL.into_iter().zip(values)) {
            *slot = to_ui(id, v)?;
        }
        Ok(FactorSet { ui })
    }

    fn index(id: FactorId) -> usize {
        FactorId::ALL.iter().position(|f| *f == id).unwrap()
    }

    /// Internal-scale value in `[0.1, 1.0]`.
    pub fn get(&self, id: FactorId) -> f64 {
        f64::from(self.ui[Self::index(id)]) / 100.0
    }

    /// UI-scale value in `[10, 100]`.
    pub fn ui(&self, id: FactorId) -> u8 {
        self.ui[Self::index(id)]
    }

    pub fn with(mut self, id: FactorId, value: f64) -> Result<Self, FactorError> {
        self.ui[Self::index(id)] = to_ui(id, value)?;
        Ok(self)
    }

    pub fn speed(&self) -> f64 {
        self.get(FactorId::Speed)
    }

    pub fn depth_assist(&self) -> f64 {
        self.get(FactorId::DepthAssist)
    }

    pub fn turnability(&self) -> f64 {
        self.get(FactorId::Turnability)
    }

    pub fn safety(&self) -> f64 {
        self.get(FactorId::Safety)
    }

    pub fn responsiveness(&self) -> f64 {
        self.get(FactorId::Responsiveness)
    }
}

/// `θ = (speed, 1 − depth_assist, turnability)`; components one and three in
/// `[0.1, 1]`, component two in `[0, 0.9]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta(pub [f64; 3]);

pub const THETA_BOUNDS: [(f64, f64); 3] = [(0.1, 1.0), (0.0, 0.9), (0.1, 1.0)];

impl Theta {
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::from(self.0)
    }

    pub fn clamped(v: [f64; 3]) -> Theta {
        Theta(std::array::from_fn(|i| v[i].clamp(THETA_BOUNDS[i].0, THETA_BOUNDS[i].1)))
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().zip(THETA_BOUNDS).all(|(v, (lo, hi))| (lo..=hi).contains(v))
    }
}

/// Rows `(x, y, z, roll, pitch, yaw)`, columns `(speed, depth, turn)`.
pub fn mask_w() -> Matrix6x3<f64> {
    Matrix6x3::new(
        1.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, //
        1.0, 0.0, 0.0, //
        0.0, 0.2, 0.8, //
        0.4, 0.0, 0.6, //
        0.2, 0.0, 0.8,
    )
}

/// Diagonal blending matrix `A = diag(α)`, `α_j` the human authority on axis
/// `j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArbitrationMatrix {
    pub alpha: Vec6,
}

impl ArbitrationMatrix {
    pub fn identity() -> Self {
        ArbitrationMatrix { alpha: Vec6::repeat(1.0) }
    }

    pub fn uniform(a: f64) -> Self {
        ArbitrationMatrix { alpha: Vec6::repeat(a.clamp(0.0, 1.0)) }
    }

    pub fn from_alpha(alpha: Vec6) -> Self {
        ArbitrationMatrix { alpha: alpha.map(|a| a.clamp(0.0, 1.0)) }
    }

    pub fn matrix(&self) -> nalgebra::Matrix6<f64> {
        nalgebra::Matrix6::from_diagonal(&self.alpha)
    }
}

pub fn theta_from_factors(f: &FactorSet) -> Theta {
    Theta([f.speed(), 1.0 - f.depth_assist(), f.turnability()])
}

/// `α = W θ`, clamped into `[0, 1]`.
pub fn alpha_from_theta(theta: &Theta) -> ArbitrationMatrix {
    ArbitrationMatrix::from_alpha(mask_w() * theta.as_vector())
}

/// `u_sc = (I − A) u_r + A u_h`, componentwise over `[linear; angular]`.
pub fn blend(u_r: &Twist, u_h: &Twist, a: &ArbitrationMatrix) -> Twist {
    let r = u_r.to_vec6();
    let h = u_h.to_vec6();
    let out = Vec6::from_fn(|j, _| (1.0 - a.alpha[j]) * r[j] + a.alpha[j] * h[j]);
    Twist::from_vec6(&out)
}

/// One quantum step of a single factor, clamped to the valid range.
pub fn apply_factor_edit(f: &FactorSet, which: FactorId, direction: EditDirection) -> FactorSet {
    let mut out = *f;
    let i = FactorSet::index(which);
    out.ui[i] = match direction {
        EditDirection::Increase => (out.ui[i] + UI_STEP).min(UI_MAX),
        EditDirection::Decrease => out.ui[i].saturating_sub(UI_STEP).max(UI_MIN),
    };
    out
}

/// Safety scales the field saturation `f_max`; responsiveness scales the
/// human-channel stiffness.
pub fn apply_gain_factors(f: &FactorSet, base_field: &FieldParams, base_stiffness: &Vec6) -> (FieldParams, Vec6) {
    let field = FieldParams { f_max: f.safety() * base_field.f_max, ..*base_field };
    (field, base_stiffness * f.responsiveness())
}
