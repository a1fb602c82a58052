//! Adaptive imagination scheduling.
//!
//! Each step the agent computes a trajectory uncertainty `u_t` (action
//! entropy mixed with a revisit ratio) and a visual similarity `s_t` (cosine
//! between the previous imagined embedding and the current observation
//! embedding), then picks static (instruction-driven) imagination when
//! `u_t < τ_u` and `s_t > τ_s`, dynamic (observation-driven) otherwise.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Static,
    Dynamic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeDecision {
    pub mode: Mode,
    pub u_t: f64,
    pub s_t: f64,
    pub tau_u: f64,
    pub tau_s: f64,
    pub step: usize,
}

/// Shannon entropy of the action distribution, normalized by ln(n) so the
/// uniform distribution scores 1. A single-action policy scores 0.
pub fn action_entropy(policy: &[f64]) -> Result<f64> {
    if policy.is_empty() {
        return Err(Error::Contract("empty policy vector".into()));
    }
    if policy.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Contract("policy has negative or non-finite entries".into()));
    }
    let sum: f64 = policy.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("policy sums to {sum}, not 1")));
    }
    if policy.len() == 1 {
        return Ok(0.0);
    }
    let h: f64 = policy.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok((h / (policy.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Revisit ratio: the fraction of the last `window` entries of the visited
/// history that land on a viewpoint already seen earlier in the history.
pub fn path_deviation(history: &[u32], window: usize) -> f64 {
    assert!(window >= 1, "window must be at least 1");
    if history.is_empty() {
        return 0.0;
    }
    let take = window.min(history.len());
    let start = history.len() - take;
    let mut revisits = 0usize;
    for i in start..history.len() {
        if history[..i].contains(&history[i]) {
            revisits += 1;
        }
    }
    revisits as f64 / take as f64
}

/// u_t = alpha·entropy + (1−alpha)·deviation.
pub fn trajectory_uncertainty(entropy: f64, deviation: f64, alpha: f64) -> Result<f64> {
    for (name, v) in [("entropy", entropy), ("deviation", deviation), ("alpha", alpha)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("{name} = {v} outside [0,1]")));
        }
    }
    Ok(alpha * entropy + (1.0 - alpha) * deviation)
}

/// Cosine similarity, with the convention that a zero vector on either side
/// yields 0.
pub fn visual_similarity(imagined: &[f64], observed: &[f64]) -> f64 {
    let dot: f64 = imagined.iter().zip(observed).map(|(a, b)| a * b).sum();
    let na: f64 = imagined.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = observed.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mode selection. Step 0 bootstraps to static with (u, s) = (0, 1); after
/// that the rule is strict: static iff u_t < τ_u and s_t > τ_s.
pub fn select_mode(u_t: f64, s_t: f64, tau_u: f64, tau_s: f64, step: usize) -> ModeDecision {
    if step == 0 {
        return ModeDecision { mode: Mode::Static, u_t: 0.0, s_t: 1.0, tau_u, tau_s, step };
    }
    let mode = if u_t < tau_u && s_t > tau_s { Mode::Static } else { Mode::Dynamic };
    ModeDecision { mode, u_t, s_t, tau_u, tau_s, step }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn entropy_uniform_is_one() {
        let e = action_entropy(&[0.25; 4]).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        assert_eq!(action_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn entropy_half_half_over_four() {
        // oracle: -(0.5 ln 0.5 + 0.5 ln 0.5) / ln 4 = ln 2 / ln 4 = 0.5
        let e = action_entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((e - 0.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_singleton_and_invalid() {
        assert_eq!(action_entropy(&[1.0]).unwrap(), 0.0);
        assert!(action_entropy(&[0.3, 0.3]).is_err());
        assert!(action_entropy(&[-0.5, 1.5]).is_err());
        assert!(action_entropy(&[]).is_err());
    }

    #[test]
    fn deviation_cases() {
        assert_eq!(path_deviation(&[1, 2, 3, 4], 4), 0.0);
        assert_eq!(path_deviation(&[1, 2, 1, 2], 4), 0.5);
        assert_eq!(path_deviation(&[1], 4), 0.0);
        assert_eq!(path_deviation(&[], 4), 0.0);
        // window restricts which steps are judged, not what counts as seen
        assert_eq!(path_deviation(&[1, 2, 3, 1], 2), 0.5);
    }

    #[test]
    fn uncertainty_mix() {
        assert_eq!(trajectory_uncertainty(0.0, 0.0, 0.5).unwrap(), 0.0);
        assert_eq!(trajectory_uncertainty(1.0, 1.0, 0.3).unwrap(), 1.0);
        let u = trajectory_uncertainty(0.4, 0.8, 0.5).unwrap();
        assert!((u - 0.6).abs() < 1e-12);
        assert!(trajectory_uncertainty(1.2, 0.0, 0.5).is_err());
    }

    #[test]
    fn similarity_conventions() {
        assert_eq!(visual_similarity(&[1.0, 0.0], &[2.0, 0.0]), 1.0);
        assert_eq!(visual_similarity(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert!((visual_similarity(&[1.0, 1.0], &[-1.0, -1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(visual_similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn select_mode_quadrants() {
        let d = select_mode(0.2, 0.9, 0.5, 0.6, 3);
        assert_eq!(d.mode, Mode::Static);
        assert_eq!(select_mode(0.6, 0.9, 0.5, 0.6, 3).mode, Mode::Dynamic);
        // exact boundary goes dynamic (strict inequalities)
        assert_eq!(select_mode(0.5, 0.6, 0.5, 0.6, 3).mode, Mode::Dynamic);
        assert_eq!(select_mode(0.5, 0.9, 0.5, 0.6, 3).mode, Mode::Dynamic);
        assert_eq!(select_mode(0.2, 0.6, 0.5, 0.6, 3).mode, Mode::Dynamic);
    }

    #[test]
    fn step_zero_bootstraps_static() {
        let d = select_mode(0.99, -1.0, 0.5, 0.6, 0);
        assert_eq!(d.mode, Mode::Static);
        assert_eq!(d.u_t, 0.0);
        assert_eq!(d.s_t, 1.0);
    }

    proptest! {
        #[test]
        fn entropy_is_permutation_invariant(mut v in proptest::collection::vec(0.01f64..1.0, 2..6)) {
            let sum: f64 = v.iter().sum();
            for x in &mut v {
                *x /= sum;
            }
            let e1 = action_entropy(&v).unwrap();
            v.reverse();
            let e2 = action_entropy(&v).unwrap();
            prop_assert!((e1 - e2).abs() < 1e-9);
        }

        #[test]
        fn mode_is_monotone(u in 0.0f64..1.0, s in -1.0f64..1.0, du in 0.0f64..0.5, ds in 0.0f64..0.5) {
            let base = select_mode(u, s, 0.5, 0.6, 2).mode;
            if base == Mode::Static {
                // lowering u or raising s never flips static -> dynamic
                prop_assert_eq!(select_mode((u - du).max(0.0), s, 0.5, 0.6, 2).mode, Mode::Static);
                prop_assert_eq!(select_mode(u, (s + ds).min(1.0), 0.5, 0.6, 2).mode, Mode::Static);
            }
        }
    }
}
