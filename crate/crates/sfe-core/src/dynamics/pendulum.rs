//! Two-state bounded-torque pendulum.
//!
//! theta' = omega
//! omega' = -omega0_sq sin(theta) - damping omega + tau / inertia
//!
//! Low-dimensional enough for exhaustive bang-bang enumeration, which is
//! what makes it useful: the Monte Carlo reachability sampler is checked
//! against the brute-force oracle on this system.

use super::{ControlAffineSystem, EffectorLimits, ModelError};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct Pendulum2d {
    pub inertia: f64,
    pub omega0_sq: f64,
    pub damping: f64,
    limits: [EffectorLimits; 1],
}

impl Pendulum2d {
    pub fn new(inertia: f64, omega0_sq: f64, damping: f64, tau_max: f64, tau_rate: f64) -> Self {
        Pendulum2d {
            inertia,
            omega0_sq,
            damping,
            limits: [EffectorLimits {
                delta_min: -tau_max,
                delta_max: tau_max,
                rate_min: tau_rate,
                rate_max: tau_rate,
            }],
        }
    }

    /// Reference instance used throughout the validation suite: unit
    /// inertia, omega0^2 = 9 s^-2, light damping, |tau| <= 2.5 with an
    /// effectively unlimited slew rate so each sampler step can reach
    /// either torque extreme.
    pub fn reference() -> Self {
        Pendulum2d::new(1.0, 9.0, 0.15, 2.5, 1.0e6)
    }

    /// The rest equilibrium (hanging, zero torque).
    pub fn trim_state(&self) -> DVector<f64> {
        DVector::zeros(2)
    }

    pub fn trim_control(&self) -> DVector<f64> {
        DVector::zeros(1)
    }
}

impl ControlAffineSystem for Pendulum2d {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn exploration_dim(&self) -> usize {
        1
    }

    fn limits(&self) -> Vec<EffectorLimits> {
        self.limits.to_vec()
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let theta = x[0];
        let omega = x[1];
        let tau = u[0];
        let omega_dot = -self.omega0_sq * theta.sin() - self.damping * omega + tau / self.inertia;
        let d = DVector::from_vec(vec![omega, omega_dot]);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { context: "pendulum derivative" });
        }
        Ok(d)
    }

    fn exploration_effectiveness(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> Result<DMatrix<f64>, ModelError> {
        // Only the omega row is directly driven.
        Ok(DMatrix::from_element(1, 1, 1.0 / self.inertia))
    }
}
