//! Rigid-body flight dynamics with affine control effectiveness.
//!
//! State convention (body axes, flat earth, ft-slug-s units):
//! velocities (u, v, w) ft/s, rates (p, q, r) rad/s, Euler angles
//! (phi, theta, psi) rad, position (x_n, y_e) ft and altitude h ft
//! (positive up). Backward-time dynamics are the elementwise negation
//! of the forward field, so reverse reachability reuses the same
//! integrator.

mod model;
mod pendulum;

pub use model::{AircraftModel, EffectivenessScale, EffectorSpec, ModelConfigError, ThrustSpec};
pub use pendulum::Pendulum2d;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Standard gravity, ft/s^2.
pub const G: f64 = 32.17405;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("state outside aero validity domain: {var} = {value:.6} not in [{lo:.6}, {hi:.6}]")]
    DomainViolation { var: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("pitch attitude {theta_deg:.2} deg exceeds the +/-85 deg Euler-kinematics guard")]
    GimbalGuard { theta_deg: f64 },
    #[error("non-finite value produced during {context}")]
    NonFinite { context: &'static str },
    #[error("ground speed is zero; wind-axis angles undefined")]
    ZeroGroundSpeed,
    #[error("control vector has {got} effectors, model expects {expect}")]
    ControlDimension { got: usize, expect: usize },
}

/// 12-component rigid-body state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub phi: f64,
    pub theta: f64,
    pub psi: f64,
    pub x_n: f64,
    pub y_e: f64,
    pub h: f64,
}

impl StateVector {
    pub const DIM: usize = 12;

    pub fn zeros() -> Self {
        StateVector {
            u: 0.0, v: 0.0, w: 0.0,
            p: 0.0, q: 0.0, r: 0.0,
            phi: 0.0, theta: 0.0, psi: 0.0,
            x_n: 0.0, y_e: 0.0, h: 0.0,
        }
    }

    pub fn to_array(&self) -> [f64; 12] {
        [
            self.u, self.v, self.w, self.p, self.q, self.r,
            self.phi, self.theta, self.psi, self.x_n, self.y_e, self.h,
        ]
    }

    pub fn from_array(a: &[f64; 12]) -> Self {
        StateVector {
            u: a[0], v: a[1], w: a[2], p: a[3], q: a[4], r: a[5],
            phi: a[6], theta: a[7], psi: a[8], x_n: a[9], y_e: a[10], h: a[11],
        }
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.to_array())
    }

    pub fn from_dvector(v: &DVector<f64>) -> Self {
        let mut a = [0.0; 12];
        a.copy_from_slice(v.as_slice());
        Self::from_array(&a)
    }

    pub fn ground_speed(&self) -> f64 {
        (self.u * self.u + self.v * self.v + self.w * self.w).sqrt()
    }
}

/// Envelope-space coordinates, the canonical 7 dimensions in fixed order
/// (p, q, r, alpha, beta, vg, h). Angles in rad, rates rad/s, vg ft/s, h ft.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeCoords {
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub alpha: f64,
    pub beta: f64,
    pub vg: f64,
    pub h: f64,
}

impl EnvelopeCoords {
    pub const DIM: usize = 7;
    pub const DIM_NAMES: [&'static str; 7] = ["p", "q", "r", "alpha", "beta", "vg", "h"];

    pub fn to_array(&self) -> [f64; 7] {
        [self.p, self.q, self.r, self.alpha, self.beta, self.vg, self.h]
    }

    pub fn from_array(a: &[f64; 7]) -> Self {
        EnvelopeCoords { p: a[0], q: a[1], r: a[2], alpha: a[3], beta: a[4], vg: a[5], h: a[6] }
    }

    /// Component by canonical dimension name; None for unknown names.
    pub fn by_name(&self, name: &str) -> Option<f64> {
        let a = self.to_array();
        Self::DIM_NAMES.iter().position(|n| *n == name).map(|i| a[i])
    }
}

/// Wind-axis projection of a body-frame state. Errors on zero ground speed.
pub fn state_to_envelope_coords(x: &StateVector) -> Result<EnvelopeCoords, ModelError> {
    let vg = x.ground_speed();
    if vg <= 0.0 {
        return Err(ModelError::ZeroGroundSpeed);
    }
    Ok(EnvelopeCoords {
        p: x.p,
        q: x.q,
        r: x.r,
        alpha: x.w.atan2(x.u),
        beta: (x.v / vg).asin(),
        vg,
        h: x.h,
    })
}

/// Effector deflections plus thrust, the full control input of an
/// aircraft model. Deflections in rad, thrust in lbf.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVector {
    pub delta: Vec<f64>,
    pub thrust: f64,
}

impl ControlVector {
    /// Packs into a flat vector with thrust in the last slot, the layout
    /// used by the effectiveness matrix columns.
    pub fn to_dvector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.delta.len() + 1);
        v.rows_mut(0, self.delta.len()).copy_from_slice(&self.delta);
        v[self.delta.len()] = self.thrust;
        v
    }

    pub fn from_dvector(v: &DVector<f64>) -> Self {
        let m = v.len() - 1;
        ControlVector { delta: v.as_slice()[..m].to_vec(), thrust: v[m] }
    }
}

/// Position and slew limits of one effector. Rates are magnitudes:
/// `rate_min` bounds downward travel per second, `rate_max` upward.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EffectorLimits {
    pub delta_min: f64,
    pub delta_max: f64,
    pub rate_min: f64,
    pub rate_max: f64,
}

impl EffectorLimits {
    pub fn validate(&self, name: &str) -> Result<(), ModelConfigError> {
        if !(self.delta_min < self.delta_max) {
            return Err(ModelConfigError::BadLimits {
                name: name.to_string(),
                why: "delta_min must be strictly below delta_max",
            });
        }
        if self.rate_min < 0.0 || self.rate_max < 0.0 {
            return Err(ModelConfigError::BadLimits {
                name: name.to_string(),
                why: "rate limits must be non-negative",
            });
        }
        Ok(())
    }
}

/// Admissible deflection increments over one step of length `dt`,
/// combining position and slew limits:
/// lower = max(delta_min, d0 - rate_min dt) - d0,
/// upper = min(delta_max, d0 + rate_max dt) - d0.
/// Both are zero-width only when the effector is pinned.
pub fn admissible_increment_bounds(limits: &EffectorLimits, delta0: f64, dt: f64) -> (f64, f64) {
    let lo = limits.delta_min.max(delta0 - limits.rate_min * dt) - delta0;
    let hi = limits.delta_max.min(delta0 + limits.rate_max * dt) - delta0;
    // A start value outside the position band (never produced by the
    // samplers, but reachable through user-supplied initial controls)
    // degenerates to the pull-back increment toward the band.
    if lo > hi {
        if delta0 > limits.delta_max { (hi, hi) } else { (lo, lo) }
    } else {
        (lo, hi)
    }
}

/// Control-affine dynamics x' = b(x) + A(x) u seen through a flat-vector
/// interface. `exploration_effectiveness` exposes the columns of A
/// restricted to the directly-driven velocity rows (the rows random
/// exploration weights are drawn over); for the aircraft these are
/// (u, v, w, p, q, r) after dividing forces and moments through the
/// generalized inertia.
pub trait ControlAffineSystem: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn exploration_dim(&self) -> usize;
    /// Position/slew limits for every packed input slot, so
    /// `limits().len() == input_dim()`.
    fn limits(&self) -> Vec<EffectorLimits>;
    /// Inputs excluded from exploration keep zero increments during
    /// Monte Carlo sampling. Defaults to exploring everything.
    fn exploration_mask(&self) -> Vec<bool> {
        vec![true; self.input_dim()]
    }
    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError>;
    fn exploration_effectiveness(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DMatrix<f64>, ModelError>;
}

/// One fixed-step RK4 step of the forward or (negated) backward field,
/// controls held constant across the step. Non-finite results are
/// reported as integration failures rather than propagated.
pub fn integrate_step<S: ControlAffineSystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
    direction: Direction,
) -> Result<DVector<f64>, ModelError> {
    let s = direction.sign();
    let k1 = sys.derivative(x, u)? * s;
    let k2 = sys.derivative(&(x + &k1 * (dt / 2.0)), u)? * s;
    let k3 = sys.derivative(&(x + &k2 * (dt / 2.0)), u)? * s;
    let k4 = sys.derivative(&(x + &k3 * dt), u)? * s;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { context: "rk4 step" });
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn envelope_coords_from_worked_velocity_triple() {
        // Frozen from an independent evaluation of alpha = atan2(w, u),
        // beta = asin(v / vg), vg = ||(u, v, w)||.
        let x = StateVector { u: 600.0, v: 60.0, w: 100.0, h: 15000.0, ..StateVector::zeros() };
        let e = state_to_envelope_coords(&x).unwrap();
        assert_relative_eq!(e.vg, 611.228271597445, max_relative = 1e-12);
        assert_relative_eq!(e.alpha, 0.165148677414627, max_relative = 1e-12);
        assert_relative_eq!(e.beta, 0.0983213355501047, max_relative = 1e-12);
        assert_eq!(e.h, 15000.0);
        assert_eq!(e.p, 0.0);
    }

    #[test]
    fn envelope_coords_reject_zero_speed() {
        let x = StateVector::zeros();
        assert!(matches!(state_to_envelope_coords(&x), Err(ModelError::ZeroGroundSpeed)));
    }

    #[test]
    fn increment_bounds_combine_position_and_rate() {
        let lim = EffectorLimits { delta_min: -0.5, delta_max: 0.5, rate_min: 1.0, rate_max: 2.0 };
        // Rate-limited on both sides.
        let (lo, hi) = admissible_increment_bounds(&lim, 0.0, 0.1);
        assert_relative_eq!(lo, -0.1);
        assert_relative_eq!(hi, 0.2);
        // Position-limited above.
        let (lo, hi) = admissible_increment_bounds(&lim, 0.45, 0.1);
        assert_relative_eq!(lo, -0.1);
        assert_relative_eq!(hi, 0.05);
        // Pinned at the stop still admits the downward move.
        let (lo, hi) = admissible_increment_bounds(&lim, 0.5, 0.1);
        assert_relative_eq!(lo, -0.1);
        assert_relative_eq!(hi, 0.0);
    }

    #[test]
    fn control_vector_packs_thrust_last() {
        let u = ControlVector { delta: vec![0.1, -0.2], thrust: 4000.0 };
        let v = u.to_dvector();
        assert_eq!(v.len(), 3);
        assert_eq!(v[2], 4000.0);
        assert_eq!(ControlVector::from_dvector(&v), u);
    }

    #[test]
    fn coords_by_name_follows_canonical_order() {
        let e = EnvelopeCoords { p: 1.0, q: 2.0, r: 3.0, alpha: 4.0, beta: 5.0, vg: 6.0, h: 7.0 };
        assert_eq!(e.by_name("p"), Some(1.0));
        assert_eq!(e.by_name("alpha"), Some(4.0));
        assert_eq!(e.by_name("h"), Some(7.0));
        assert_eq!(e.by_name("gamma"), None);
    }
}
