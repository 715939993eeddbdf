//! Heuristic assist-as-needed adaptation of θ between trials.
//!
//! After each trial the mean assistive wrench is projected onto the three
//! arbitration parameters through the pseudo-inverse of the mask, compared
//! with a reference taken from an expert run, and θ is scaled by `1 + χ`.

use crate::arbitration::{mask_w, Theta};
use crate::geometry::Wrench;
use crate::session::{Outcome, TrialLog};
use nalgebra::{Matrix3x6, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Below this distance from the reference the previous-trial ratio is
/// treated as one.
pub const RATIO_EPSILON: f64 = 1e-9;

/// Reference components smaller than this are treated as zero.
pub const REFERENCE_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AdaptError {
    #[error("desired error component {0} is zero; the change rate is undefined")]
    ZeroReference(usize),
    #[error("chi_nom = {0} must lie in (0, 1)")]
    NominalRate(f64),
    #[error("expert trial ended with outcome {0:?}; a successful run is required")]
    ExpertFailed(Outcome),
    #[error("expert log has no ticks")]
    EmptyLog,
}

/// Moore–Penrose pseudo-inverse of the 6×3 mask.
pub fn pinv_mask() -> Matrix3x6<f64> {
    mask_w().pseudo_inverse(1e-12).expect("mask SVD")
}

/// `r̄ = W† w̄`
pub fn trial_error(mean_wrench: &Wrench) -> [f64; 3] {
    (pinv_mask() * mean_wrench.to_vec6()).into()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Componentwise change rate
/// `χ = χ_nom · (r̄ − r_d)/r_d · (|r̄ − r_d| / |r̄_prev − r_d|)^sign(r_d − r̄)`.
///
/// The ratio factor is one when there is no previous trial or the previous
/// error sat on the reference. `χ = 0` whenever `r̄ = r_d`.
pub fn change_rate(
    r_now: &[f64; 3],
    r_prev: Option<&[f64; 3]>,
    r_d: &[f64; 3],
    chi_nom: f64,
) -> Result<[f64; 3], AdaptError> {
    let mut chi = [0.0; 3];
    for i in 0..3 {
        if r_d[i].abs() < REFERENCE_EPSILON {
            return Err(AdaptError::ZeroReference(i));
        }
        let gap = r_now[i] - r_d[i];
        if gap == 0.0 {
            continue;
        }
        let ratio = match r_prev {
            Some(prev) if (prev[i] - r_d[i]).abs() >= RATIO_EPSILON => gap.abs() / (prev[i] - r_d[i]).abs(),
            _ => 1.0,
        };
        chi[i] = chi_nom * gap / r_d[i] * ratio.powf(sign(r_d[i] - r_now[i]));
    }
    Ok(chi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptState {
    pub theta: Theta,
    pub r_prev: Option<[f64; 3]>,
    pub r_desired: [f64; 3],
    pub chi_nom: f64,
    pub trial_index: u32,
}

impl AdaptState {
    pub fn new(theta: Theta, r_desired: [f64; 3], chi_nom: f64) -> Result<Self, AdaptError> {
        if !(chi_nom > 0.0 && chi_nom < 1.0) {
            return Err(AdaptError::NominalRate(chi_nom));
        }
        if let Some(i) = r_desired.iter().position(|r| r.abs() < REFERENCE_EPSILON) {
            return Err(AdaptError::ZeroReference(i));
        }
        Ok(AdaptState { theta: Theta::clamped(theta.0), r_prev: None, r_desired, chi_nom, trial_index: 0 })
    }
}

/// `θ ← clamp((1 + χ) ⊙ θ)`, then shifts the error history.
pub fn update_theta(state: &AdaptState, r_now: &[f64; 3]) -> Result<AdaptState, AdaptError> {
    let chi = change_rate(r_now, state.r_prev.as_ref(), &state.r_desired, state.chi_nom)?;
    Ok(apply_change(state, &chi, r_now))
}

fn apply_change(state: &AdaptState, chi: &[f64; 3], r_now: &[f64; 3]) -> AdaptState {
    let scaled = std::array::from_fn(|i| (1.0 + chi[i]) * state.theta.0[i]);
    AdaptState {
        theta: Theta::clamped(scaled),
        r_prev: Some(*r_now),
        trial_index: state.trial_index + 1,
        ..state.clone()
    }
}

/// Desired error vector from an expert demonstration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertReference {
    pub r_d: [f64; 3],
    /// e.g. components that are zero, which the change rate divides by
    pub warnings: Vec<String>,
}

pub fn expert_reference(expert_log: &TrialLog) -> Result<ExpertReference, AdaptError> {
    if expert_log.outcome != Outcome::Success {
        return Err(AdaptError::ExpertFailed(expert_log.outcome));
    }
    let mean = expert_log.mean_wrench().ok_or(AdaptError::EmptyLog)?;
    let r_d = trial_error(&mean);
    let warnings = r_d
        .iter()
        .enumerate()
        .filter(|(_, r)| r.abs() < REFERENCE_EPSILON)
        .map(|(i, _)| format!("r_d component {i} is zero; adaptation cannot use this reference"))
        .collect();
    Ok(ExpertReference { r_d, warnings })
}

pub fn to_vector(r: &[f64; 3]) -> Vector3<f64> {
    Vector3::from(*r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arbitration::THETA_BOUNDS;
    use crate::geometry::Vec6;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3;
    use proptest::prelude::*;

    /// Normal-equation least squares, independent of the SVD route.
    fn lstsq_oracle(w: &Vec6) -> Vector3<f64> {
        let m = mask_w();
        let normal: Matrix3<f64> = m.transpose() * m;
        normal.try_inverse().unwrap() * (m.transpose() * w)
    }

    #[test]
    fn pinv_is_left_inverse() {
        let p = pinv_mask();
        assert_abs_diff_eq!(p * mask_w(), Matrix3::identity(), epsilon = 1e-9);
        let x = Vector3::new(0.3, 0.6, 0.9);
        assert_abs_diff_eq!(p * (mask_w() * x), x, epsilon = 1e-9);
        assert_eq!(p * Vec6::zeros(), Vector3::zeros());
    }

    #[test]
    fn trial_error_examples() {
        assert_eq!(trial_error(&Wrench::zero()), [0.0; 3]);
        let w = Wrench::from_vec6(&(mask_w() * Vector3::new(1.0, 1.0, 1.0)));
        assert_abs_diff_eq!(to_vector(&trial_error(&w)), Vector3::new(1.0, 1.0, 1.0), epsilon = 1e-9);
    }

    #[test]
    fn change_rate_examples() {
        let chi = change_rate(&[1.0; 3], Some(&[2.0; 3]), &[1.0; 3], 0.1).unwrap();
        assert_eq!(chi, [0.0; 3]);
        let chi = change_rate(&[1.5; 3], Some(&[2.0; 3]), &[1.0; 3], 0.1).unwrap();
        for c in chi {
            assert_abs_diff_eq!(c, 0.1, epsilon = 1e-12);
        }
        let chi = change_rate(&[0.5; 3], Some(&[0.75; 3]), &[1.0; 3], 0.1).unwrap();
        for c in chi {
            assert_abs_diff_eq!(c, -0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn first_trial_uses_unit_ratio() {
        let chi = change_rate(&[1.5, 0.5, 1.0], None, &[1.0; 3], 0.1).unwrap();
        assert_abs_diff_eq!(chi[0], 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(chi[1], -0.05, epsilon = 1e-15);
        assert_eq!(chi[2], 0.0);
    }

    #[test]
    fn zero_reference_is_rejected() {
        assert_eq!(change_rate(&[1.0; 3], None, &[1.0, 0.0, 1.0], 0.1), Err(AdaptError::ZeroReference(1)));
        assert!(AdaptState::new(Theta([0.5; 3]), [0.0, 1.0, 1.0], 0.1).is_err());
        assert!(AdaptState::new(Theta([0.5; 3]), [1.0; 3], 1.5).is_err());
    }

    #[test]
    fn update_examples() {
        let s = AdaptState::new(Theta([0.5; 3]), [1.0; 3], 0.1).unwrap();
        let same = update_theta(&s, &[1.0; 3]).unwrap();
        assert_eq!(same.theta, s.theta);
        assert_eq!(same.trial_index, 1);
        assert_eq!(same.r_prev, Some([1.0; 3]));

        let up = apply_change(&s, &[0.1; 3], &[1.0; 3]);
        for v in up.theta.0 {
            assert_abs_diff_eq!(v, 0.55, epsilon = 1e-15);
        }
        let high = AdaptState { theta: Theta([0.95, 0.5, 0.5]), ..s.clone() };
        assert_eq!(apply_change(&high, &[0.2, 0.0, 0.0], &[1.0; 3]).theta.0[0], 1.0);
    }

    #[test]
    fn fixed_point_over_many_trials() {
        let mut s = AdaptState::new(Theta([0.4, 0.3, 0.7]), [0.2, -0.1, 0.05], 0.1).unwrap();
        let theta0 = s.theta;
        for _ in 0..20 {
            s = update_theta(&s, &[0.2, -0.1, 0.05]).unwrap();
            assert_eq!(s.theta, theta0);
        }
    }

    proptest! {
        #[test]
        fn pinv_matches_least_squares(w in prop::array::uniform6(-5.0..5.0f64)) {
            let w = Vec6::from_row_slice(&w);
            let r = to_vector(&trial_error(&Wrench::from_vec6(&w)));
            prop_assert!((r - lstsq_oracle(&w)).norm() < 1e-9);
        }

        #[test]
        fn rate_bounded_when_improving(
            r_d in prop::array::uniform3(0.1..2.0f64),
            u in prop::array::uniform3(-1.0..1.0f64),
            v in prop::array::uniform3(0.0..1.0f64),
            flip in prop::array::uniform3(any::<bool>()),
            chi_nom in 0.01..0.99f64,
        ) {
            // both trial errors within r_d of the reference, the current one
            // no farther from it than the previous one
            let r_now: [f64; 3] = std::array::from_fn(|i| r_d[i] + u[i] * r_d[i]);
            let r_prev: [f64; 3] = std::array::from_fn(|i| {
                let gap = (r_now[i] - r_d[i]).abs();
                let prev_gap = gap + v[i] * (r_d[i] - gap);
                if flip[i] { r_d[i] - prev_gap } else { r_d[i] + prev_gap }
            });
            let chi = change_rate(&r_now, Some(&r_prev), &r_d, chi_nom).unwrap();
            for c in chi {
                prop_assert!(c.abs() <= chi_nom * (1.0 + 1e-9));
            }
        }

        #[test]
        fn theta_stays_in_range(
            theta in prop::array::uniform3(0.0..1.0f64),
            r_d in prop::array::uniform3(0.05..1.0f64),
            seq in prop::collection::vec(prop::array::uniform3(-3.0..3.0f64), 1..30),
        ) {
            let mut s = AdaptState::new(Theta(theta), r_d, 0.3).unwrap();
            for r in &seq {
                s = update_theta(&s, r).unwrap();
                for (v, (lo, hi)) in s.theta.0.iter().zip(THETA_BOUNDS) {
                    prop_assert!(*v >= lo && *v <= hi);
                }
            }
        }

        #[test]
        fn update_depends_only_on_theta_and_history(
            r_d in prop::array::uniform3(0.05..1.0f64),
            seq in prop::collection::vec(prop::array::uniform3(-1.0..1.0f64), 2..10),
        ) {
            let s0 = AdaptState::new(Theta([0.5; 3]), r_d, 0.1).unwrap();
            let run = || seq.iter().fold(s0.clone(), |s, r| update_theta(&s, r).unwrap());
            prop_assert_eq!(run(), run());
        }
    }
}
