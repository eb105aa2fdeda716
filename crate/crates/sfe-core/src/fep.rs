//! Envelope-protection command modification laws.
//!
//! Two strategies act on reference commands before they reach a control
//! loop. The state-constraint law clamps each protected reference into
//! the admissible interval read from the envelope database, so it only
//! acts once a command crosses the binarized boundary. The
//! probabilistic law adds a correction proportional to both the envelope
//! metric deficit and the metric gradient, nudging commands up the
//! membership slope continuously, with no hard boundary.

use serde::{Deserialize, Serialize};

/// Membership threshold of the binarized envelope: mu0 = e^{-k0^2 / 2}.
pub fn binarize_threshold(k0: f64) -> f64 {
    (-0.5 * k0 * k0).exp()
}

/// Binarization setting for the state-constraint law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScbConfig {
    pub k0: f64,
}

impl Default for ScbConfig {
    fn default() -> Self {
        ScbConfig { k0: 3.0 }
    }
}

/// Probabilistic protection gains for one control loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbFepConfig {
    /// Metric value above which the law stays inactive.
    pub m0: f64,
    /// Diagonal compensation gain per protected channel.
    pub k_fep: Vec<f64>,
}

impl ProbFepConfig {
    /// Outer-loop protection over (alpha, beta).
    pub fn outer_default() -> Self {
        ProbFepConfig { m0: 0.0, k_fep: vec![0.80, 0.80] }
    }

    /// Inner-loop protection over (p, q, r).
    pub fn inner_default() -> Self {
        ProbFepConfig { m0: 0.0, k_fep: vec![0.05, 0.05, 0.05] }
    }
}

/// State-constraint protection: elementwise clamp of the reference into
/// [x_min, x_max].
pub fn scb_protect(x_ref: &[f64], x_min: &[f64], x_max: &[f64]) -> Vec<f64> {
    assert_eq!(x_ref.len(), x_min.len());
    assert_eq!(x_ref.len(), x_max.len());
    x_ref
        .iter()
        .zip(x_min.iter().zip(x_max.iter()))
        .map(|(&r, (&lo, &hi))| r.max(lo).min(hi))
        .collect()
}

/// Probabilistic protection: x_fep = x_ref + chi with
/// chi = -(M_env - M0) * K_fep * J_env^T while M_env <= M0, zero above.
///
/// `j_env` carries only the protected channels' gradient components, in
/// the same order as the gains.
pub fn prob_protect(x_ref: &[f64], m_env: f64, j_env: &[f64], config: &ProbFepConfig) -> Vec<f64> {
    assert_eq!(x_ref.len(), j_env.len());
    assert_eq!(x_ref.len(), config.k_fep.len());
    if m_env > config.m0 {
        return x_ref.to_vec();
    }
    let deficit = -(m_env - config.m0);
    x_ref
        .iter()
        .zip(j_env.iter().zip(config.k_fep.iter()))
        .map(|(&r, (&g, &k))| r + deficit * k * g)
        .collect()
}

/// A priori bound on the probabilistic modification magnitude:
/// ||chi|| <= |ln(epsilon) - M0| * max gain * max gradient norm. The
/// metric never drops below ln(epsilon), so the deficit factor is
/// bounded; the gain matrix is diagonal, so its operator norm is the
/// largest entry.
pub fn prob_modification_bound(
    epsilon: f64,
    config: &ProbFepConfig,
    max_gradient_norm: f64,
) -> f64 {
    let kmax = config.k_fep.iter().fold(0.0f64, |m, &k| m.max(k.abs()));
    (epsilon.ln() - config.m0).abs() * kmax * max_gradient_norm
}
