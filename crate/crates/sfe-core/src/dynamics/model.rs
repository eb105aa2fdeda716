//! Aircraft surrogate model: polynomial base aerodynamics plus affine
//! per-effector effectiveness columns, loaded from a JSON config.
//!
//! Force and moment build-up, body axes:
//!
//!   [F; M] = qbar S diag(1,1,1, b, cbar, b) c_base(x)
//!          + sum_i col_i(x, T) delta_i
//!          + T e_thrust
//!
//! where col_i scales with dynamic pressure for aerodynamic surfaces and
//! with current thrust for vectoring effectors, so the model is exactly
//! affine in the control vector (delta, T) at fixed thrust scaling.

use super::{
    ControlAffineSystem, ControlVector, Direction, EffectorLimits, ModelError, StateVector, G,
};
use crate::atmosphere;
use crate::polynomial::{AeroVars, Poly};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelConfigError {
    #[error("cannot read model config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse model config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported model schema version {got}, this build reads {want}")]
    SchemaVersion { got: u32, want: u32 },
    #[error("effector {name}: {why}")]
    BadLimits { name: String, why: &'static str },
    #[error("inertia matrix is not invertible")]
    SingularInertia,
    #[error("mass must be positive, got {0}")]
    BadMass(f64),
    #[error("duplicate effector name {0}")]
    DuplicateEffector(String),
    #[error("trim effector {0} is not a declared effector")]
    UnknownTrimEffector(String),
    #[error("model needs at least one effector")]
    NoEffectors,
}

/// What multiplies an effector's coefficient polynomials into forces
/// (lbf) and moments (ft lbf).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectivenessScale {
    /// qbar S for forces; qbar S b (roll, yaw) or qbar S cbar (pitch)
    /// for moments. Coefficients are per-rad non-dimensional slopes.
    DynamicPressure,
    /// Current thrust for forces (per-rad), thrust times a built-in arm
    /// for moments (coefficients carry the arm in ft).
    Thrust,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectorEffectiveness {
    pub scale: EffectivenessScale,
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub fx: Poly,
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub fy: Poly,
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub fz: Poly,
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub mx: Poly,
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub my: Poly,
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub mz: Poly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectorSpec {
    pub name: String,
    pub delta_min: f64,
    pub delta_max: f64,
    pub rate_min: f64,
    pub rate_max: f64,
    pub effectiveness: EffectorEffectiveness,
}

impl EffectorSpec {
    pub fn limits(&self) -> EffectorLimits {
        EffectorLimits {
            delta_min: self.delta_min,
            delta_max: self.delta_max,
            rate_min: self.rate_min,
            rate_max: self.rate_max,
        }
    }
}

fn default_thrust_direction() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThrustSpec {
    #[serde(rename = "T_max")]
    pub t_max: f64,
    pub vectoring: bool,
    /// Body-frame thrust line, normalized on load.
    #[serde(default = "default_thrust_direction")]
    pub direction: [f64; 3],
    /// Slew limit in lbf/s; defaults to traversing the full range in 1 s.
    #[serde(default)]
    pub rate_limit: Option<f64>,
    /// Whether reachability sampling may vary thrust. Defaults to the
    /// vectoring flag: vectored-thrust airframes owe part of their
    /// envelope to engine authority.
    #[serde(default)]
    pub explore: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Geometry {
    #[serde(rename = "S")]
    pub s: f64,
    pub b: f64,
    pub cbar: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BaseAero {
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub cx: Poly,
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub cy: Poly,
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub cz: Poly,
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub cl: Poly,
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub cm: Poly,
    #[serde(default, skip_serializing_if = "Poly::is_zero")]
    pub cn: Poly,
}

fn default_alpha_bound() -> f64 {
    1.745
}
fn default_beta_bound() -> f64 {
    0.95
}
fn default_mach_lo() -> f64 {
    0.02
}
fn default_mach_hi() -> f64 {
    2.5
}

/// Aero validity box. Evaluation outside raises a domain violation
/// instead of extrapolating.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AeroDomain {
    #[serde(default = "default_alpha_bound")]
    pub alpha_abs_max: f64,
    #[serde(default = "default_beta_bound")]
    pub beta_abs_max: f64,
    #[serde(default = "default_mach_lo")]
    pub mach_min: f64,
    #[serde(default = "default_mach_hi")]
    pub mach_max: f64,
}

impl Default for AeroDomain {
    fn default() -> Self {
        AeroDomain {
            alpha_abs_max: default_alpha_bound(),
            beta_abs_max: default_beta_bound(),
            mach_min: default_mach_lo(),
            mach_max: default_mach_hi(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelConfig {
    schema_version: u32,
    name: String,
    mass: f64,
    inertia: [[f64; 3]; 3],
    geometry: Geometry,
    effectors: Vec<EffectorSpec>,
    base_aero: BaseAero,
    thrust: ThrustSpec,
    #[serde(default)]
    domain: AeroDomain,
    /// Effectors the trim solver is allowed to use, by name.
    #[serde(default)]
    trim_effectors: Vec<String>,
}

/// Validated, ready-to-evaluate aircraft model.
#[derive(Debug, Clone)]
pub struct AircraftModel {
    pub name: String,
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    pub inertia_inv: Matrix3<f64>,
    pub geometry: Geometry,
    pub effectors: Vec<EffectorSpec>,
    pub base_aero: BaseAero,
    pub thrust: ThrustSpec,
    pub domain: AeroDomain,
    pub trim_effectors: Vec<String>,
    pub(crate) limits: Vec<EffectorLimits>,
    thrust_dir: Vector3<f64>,
}

impl AircraftModel {
    pub fn from_json(text: &str) -> Result<Self, ModelConfigError> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        Self::from_config(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The bundled over-actuated tailless fighter surrogate.
    pub fn builtin_generic_fighter() -> Self {
        Self::from_json(include_str!("../../models/generic_fighter.json"))
            .expect("bundled model config must parse")
    }

    fn from_config(cfg: ModelConfig) -> Result<Self, ModelConfigError> {
        if cfg.schema_version != MODEL_SCHEMA_VERSION {
            return Err(ModelConfigError::SchemaVersion {
                got: cfg.schema_version,
                want: MODEL_SCHEMA_VERSION,
            });
        }
        if !(cfg.mass > 0.0) {
            return Err(ModelConfigError::BadMass(cfg.mass));
        }
        if cfg.effectors.is_empty() {
            return Err(ModelConfigError::NoEffectors);
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &cfg.effectors {
            if !seen.insert(e.name.clone()) {
                return Err(ModelConfigError::DuplicateEffector(e.name.clone()));
            }
            e.limits().validate(&e.name)?;
        }
        for t in &cfg.trim_effectors {
            if !seen.contains(t) {
                return Err(ModelConfigError::UnknownTrimEffector(t.clone()));
            }
        }
        let inertia = Matrix3::from_fn(|i, j| cfg.inertia[i][j]);
        let inertia_inv = inertia.try_inverse().ok_or(ModelConfigError::SingularInertia)?;
        let limits = cfg.effectors.iter().map(|e| e.limits()).collect();
        let dir = Vector3::new(cfg.thrust.direction[0], cfg.thrust.direction[1], cfg.thrust.direction[2]);
        let norm = dir.norm();
        let thrust_dir = if norm > 0.0 { dir / norm } else { Vector3::x() };
        Ok(AircraftModel {
            name: cfg.name,
            mass: cfg.mass,
            inertia,
            inertia_inv,
            geometry: cfg.geometry,
            effectors: cfg.effectors,
            base_aero: cfg.base_aero,
            thrust: cfg.thrust,
            domain: cfg.domain,
            trim_effectors: cfg.trim_effectors,
            limits,
            thrust_dir,
        })
    }

    pub fn n_effectors(&self) -> usize {
        self.effectors.len()
    }

    pub fn effector_index(&self, name: &str) -> Option<usize> {
        self.effectors.iter().position(|e| e.name == name)
    }

    pub fn effector_limits(&self) -> &[EffectorLimits] {
        &self.limits
    }

    pub fn thrust_rate_limit(&self) -> f64 {
        self.thrust.rate_limit.unwrap_or(self.thrust.t_max)
    }

    pub fn explore_thrust(&self) -> bool {
        self.thrust.explore.unwrap_or(self.thrust.vectoring)
    }

    /// Copy of the model with one effector removed. Panics if the name is
    /// unknown or belongs to the trim set (removing those would change
    /// the trim problem, not just the reachable set).
    pub fn without_effector(&self, name: &str) -> AircraftModel {
        assert!(
            !self.trim_effectors.iter().any(|t| t == name),
            "cannot remove trim effector {name}"
        );
        let idx = self.effector_index(name).unwrap_or_else(|| panic!("no effector {name}"));
        let mut m = self.clone();
        m.effectors.remove(idx);
        m.limits.remove(idx);
        m
    }

    fn aero_vars(&self, x: &StateVector, vg: f64, mach: f64) -> AeroVars {
        let two_v = 2.0 * vg;
        AeroVars {
            alpha: x.w.atan2(x.u),
            beta: (x.v / vg).asin(),
            phat: x.p * self.geometry.b / two_v,
            qhat: x.q * self.geometry.cbar / two_v,
            rhat: x.r * self.geometry.b / two_v,
            mach,
        }
    }

    fn check_domain(&self, vars: &AeroVars) -> Result<(), ModelError> {
        let d = &self.domain;
        if vars.alpha.abs() > d.alpha_abs_max {
            return Err(ModelError::DomainViolation {
                var: "alpha",
                value: vars.alpha,
                lo: -d.alpha_abs_max,
                hi: d.alpha_abs_max,
            });
        }
        if vars.beta.abs() > d.beta_abs_max {
            return Err(ModelError::DomainViolation {
                var: "beta",
                value: vars.beta,
                lo: -d.beta_abs_max,
                hi: d.beta_abs_max,
            });
        }
        if vars.mach < d.mach_min || vars.mach > d.mach_max {
            return Err(ModelError::DomainViolation {
                var: "mach",
                value: vars.mach,
                lo: d.mach_min,
                hi: d.mach_max,
            });
        }
        Ok(())
    }

    fn effector_column(
        &self,
        spec: &EffectorSpec,
        vars: &AeroVars,
        qbar_s: f64,
        thrust: f64,
    ) -> Vector6<f64> {
        let e = &spec.effectiveness;
        let raw = Vector6::new(
            e.fx.eval(vars),
            e.fy.eval(vars),
            e.fz.eval(vars),
            e.mx.eval(vars),
            e.my.eval(vars),
            e.mz.eval(vars),
        );
        match e.scale {
            EffectivenessScale::DynamicPressure => {
                let b = self.geometry.b;
                let c = self.geometry.cbar;
                Vector6::new(
                    qbar_s * raw[0],
                    qbar_s * raw[1],
                    qbar_s * raw[2],
                    qbar_s * b * raw[3],
                    qbar_s * c * raw[4],
                    qbar_s * b * raw[5],
                )
            }
            EffectivenessScale::Thrust => raw * thrust,
        }
    }

    /// Total body-frame forces (lbf) and moments (ft lbf) for the given
    /// state and controls.
    pub fn forces_moments(
        &self,
        x: &StateVector,
        u: &ControlVector,
    ) -> Result<Vector6<f64>, ModelError> {
        if u.delta.len() != self.n_effectors() {
            return Err(ModelError::ControlDimension {
                got: u.delta.len(),
                expect: self.n_effectors(),
            });
        }
        let vg = x.ground_speed();
        if vg <= 0.0 {
            return Err(ModelError::ZeroGroundSpeed);
        }
        let mach = atmosphere::mach(vg, x.h);
        let vars = self.aero_vars(x, vg, mach);
        self.check_domain(&vars)?;
        let qbar_s = atmosphere::dynamic_pressure(vg, x.h) * self.geometry.s;
        let b = self.geometry.b;
        let c = self.geometry.cbar;
        let base = &self.base_aero;
        let mut fm = Vector6::new(
            qbar_s * base.cx.eval(&vars),
            qbar_s * base.cy.eval(&vars),
            qbar_s * base.cz.eval(&vars),
            qbar_s * b * base.cl.eval(&vars),
            qbar_s * c * base.cm.eval(&vars),
            qbar_s * b * base.cn.eval(&vars),
        );
        for (i, spec) in self.effectors.iter().enumerate() {
            fm += self.effector_column(spec, &vars, qbar_s, u.thrust) * u.delta[i];
        }
        let t = self.thrust_dir * u.thrust;
        fm[0] += t[0];
        fm[1] += t[1];
        fm[2] += t[2];
        Ok(fm)
    }

    /// Control effectiveness J_d: the 6 x (m+1) matrix of force/moment
    /// sensitivities to each effector deflection, thrust in the last
    /// column. Exact for this model class, no finite differencing.
    pub fn control_effectiveness(
        &self,
        x: &StateVector,
        u: &ControlVector,
    ) -> Result<DMatrix<f64>, ModelError> {
        if u.delta.len() != self.n_effectors() {
            return Err(ModelError::ControlDimension {
                got: u.delta.len(),
                expect: self.n_effectors(),
            });
        }
        let vg = x.ground_speed();
        if vg <= 0.0 {
            return Err(ModelError::ZeroGroundSpeed);
        }
        let mach = atmosphere::mach(vg, x.h);
        let vars = self.aero_vars(x, vg, mach);
        self.check_domain(&vars)?;
        let qbar_s = atmosphere::dynamic_pressure(vg, x.h) * self.geometry.s;
        let m = self.n_effectors();
        let mut jd = DMatrix::zeros(6, m + 1);
        // Thrust column: engine line plus the thrust-scaled effectors'
        // contribution at their current deflections.
        let mut tcol = Vector6::new(
            self.thrust_dir[0],
            self.thrust_dir[1],
            self.thrust_dir[2],
            0.0,
            0.0,
            0.0,
        );
        for (i, spec) in self.effectors.iter().enumerate() {
            let col = self.effector_column(spec, &vars, qbar_s, u.thrust);
            jd.set_column(i, &DVector::from_column_slice(col.as_slice()));
            if spec.effectiveness.scale == EffectivenessScale::Thrust && u.thrust != 0.0 {
                tcol += col * (u.delta[i] / u.thrust);
            } else if spec.effectiveness.scale == EffectivenessScale::Thrust {
                // At zero thrust the column is zero; recover the slope
                // directly from the polynomials.
                let e = &spec.effectiveness;
                tcol += Vector6::new(
                    e.fx.eval(&vars),
                    e.fy.eval(&vars),
                    e.fz.eval(&vars),
                    e.mx.eval(&vars),
                    e.my.eval(&vars),
                    e.mz.eval(&vars),
                ) * u.delta[i];
            }
        }
        jd.set_column(m, &DVector::from_column_slice(tcol.as_slice()));
        Ok(jd)
    }

    /// Generalized inverse inertia blockdiag(1/m I3, J^-1), mapping
    /// forces/moments to translational/rotational accelerations.
    pub fn j_tilde_inv(&self) -> DMatrix<f64> {
        let mut jt = DMatrix::zeros(6, 6);
        for i in 0..3 {
            jt[(i, i)] = 1.0 / self.mass;
        }
        for i in 0..3 {
            for j in 0..3 {
                jt[(i + 3, j + 3)] = self.inertia_inv[(i, j)];
            }
        }
        jt
    }

    /// Forward-time state derivative.
    pub fn eval_dynamics(
        &self,
        x: &StateVector,
        u: &ControlVector,
        direction: Direction,
    ) -> Result<StateVector, ModelError> {
        if x.theta.abs() > 85.0_f64.to_radians() {
            return Err(ModelError::GimbalGuard { theta_deg: x.theta.to_degrees() });
        }
        let fm = self.forces_moments(x, u)?;
        let (sph, cph) = x.phi.sin_cos();
        let (sth, cth) = x.theta.sin_cos();
        let (sps, cps) = x.psi.sin_cos();
        let tth = sth / cth;

        let udot = x.r * x.v - x.q * x.w - G * sth + fm[0] / self.mass;
        let vdot = x.p * x.w - x.r * x.u + G * sph * cth + fm[1] / self.mass;
        let wdot = x.q * x.u - x.p * x.v + G * cph * cth + fm[2] / self.mass;

        let omega = Vector3::new(x.p, x.q, x.r);
        let moments = Vector3::new(fm[3], fm[4], fm[5]);
        let omega_dot = self.inertia_inv * (moments - omega.cross(&(self.inertia * omega)));

        let phidot = x.p + tth * (x.q * sph + x.r * cph);
        let thetadot = x.q * cph - x.r * sph;
        let psidot = (x.q * sph + x.r * cph) / cth;

        let xdot_n = x.u * cth * cps + x.v * (sph * sth * cps - cph * sps)
            + x.w * (cph * sth * cps + sph * sps);
        let ydot_e = x.u * cth * sps + x.v * (sph * sth * sps + cph * cps)
            + x.w * (cph * sth * sps - sph * cps);
        let hdot = x.u * sth - x.v * sph * cth - x.w * cph * cth;

        let s = direction.sign();
        let out = StateVector {
            u: s * udot,
            v: s * vdot,
            w: s * wdot,
            p: s * omega_dot[0],
            q: s * omega_dot[1],
            r: s * omega_dot[2],
            phi: s * phidot,
            theta: s * thetadot,
            psi: s * psidot,
            x_n: s * xdot_n,
            y_e: s * ydot_e,
            h: s * hdot,
        };
        if out.to_array().iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { context: "eval_dynamics" });
        }
        Ok(out)
    }

    /// Typed RK4 step, controls held over the step.
    pub fn step(
        &self,
        x: &StateVector,
        u: &ControlVector,
        dt: f64,
        direction: Direction,
    ) -> Result<StateVector, ModelError> {
        let next = super::integrate_step(self, &x.to_dvector(), &u.to_dvector(), dt, direction)?;
        Ok(StateVector::from_dvector(&next))
    }
}

impl ControlAffineSystem for AircraftModel {
    fn state_dim(&self) -> usize {
        StateVector::DIM
    }

    fn input_dim(&self) -> usize {
        self.n_effectors() + 1
    }

    fn exploration_dim(&self) -> usize {
        6
    }

    fn limits(&self) -> Vec<EffectorLimits> {
        self.packed_input_limits()
    }

    fn exploration_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.n_effectors()];
        m.push(self.explore_thrust());
        m
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        let xs = StateVector::from_dvector(x);
        let us = ControlVector::from_dvector(u);
        Ok(self.eval_dynamics(&xs, &us, Direction::Forward)?.to_dvector())
    }

    fn exploration_effectiveness(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DMatrix<f64>, ModelError> {
        let xs = StateVector::from_dvector(x);
        let us = ControlVector::from_dvector(u);
        let jd = self.control_effectiveness(&xs, &us)?;
        Ok(self.j_tilde_inv() * jd)
    }
}

// The thrust slot needs limits too when thrust is explored; the sampler
// asks for them separately since they are not an EffectorSpec.
impl AircraftModel {
    pub fn thrust_limits(&self) -> EffectorLimits {
        EffectorLimits {
            delta_min: 0.0,
            delta_max: self.thrust.t_max,
            rate_min: self.thrust_rate_limit(),
            rate_max: self.thrust_rate_limit(),
        }
    }

    /// Limits for the packed input vector (effectors then thrust).
    pub fn packed_input_limits(&self) -> Vec<EffectorLimits> {
        let mut ls = self.limits.clone();
        ls.push(self.thrust_limits());
        ls
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn level_state(h: f64, vg: f64) -> StateVector {
        StateVector { u: vg, h, ..StateVector::zeros() }
    }

    fn bare_model_json(extra_effector: &str) -> String {
        format!(
            r#"{{
            "schema_version": 1,
            "name": "test-bare",
            "mass": 650.0,
            "inertia": [[9500.0,0.0,0.0],[0.0,55000.0,0.0],[0.0,0.0,63000.0]],
            "geometry": {{"S": 300.0, "b": 30.0, "cbar": 11.0}},
            "effectors": [
                {{"name": "elevon", "delta_min": -0.5, "delta_max": 0.5,
                  "rate_min": 1.4, "rate_max": 1.4,
                  "effectiveness": {{"scale": "dynamic_pressure",
                    "fz": [{{"c": -0.35}}], "my": [{{"c": -0.05}}]}}}}{extra_effector}
            ],
            "base_aero": {{}},
            "thrust": {{"T_max": 25000.0, "vectoring": false}}
        }}"#
        )
    }

    #[test]
    fn gravity_only_acceleration_when_aero_is_zero() {
        let m = AircraftModel::from_json(&bare_model_json("")).unwrap();
        let x = level_state(10000.0, 500.0);
        let u = ControlVector { delta: vec![0.0], thrust: 0.0 };
        // The returned StateVector holds derivatives slot-for-slot; the w
        // slot is wdot = g cos(theta) cos(phi) = g at level attitude.
        let d = m.eval_dynamics(&x, &u, Direction::Forward).unwrap();
        assert_relative_eq!(d.w, G, max_relative = 1e-12);
        assert_relative_eq!(d.u, 0.0);
        assert_relative_eq!(d.v, 0.0);
        assert_eq!(d.p, 0.0);
        assert_eq!(d.q, 0.0);
        assert_eq!(d.r, 0.0);
        assert_relative_eq!(d.x_n, 500.0);
        assert_eq!(d.h, 0.0);
    }

    #[test]
    fn backward_field_is_elementwise_negation() {
        let m = AircraftModel::builtin_generic_fighter();
        let x = StateVector {
            u: 700.0, v: 30.0, w: 60.0, p: 0.4, q: -0.2, r: 0.1,
            phi: 0.15, theta: 0.1, psi: -0.3, x_n: 0.0, y_e: 0.0, h: 18000.0,
        };
        let u = ControlVector { delta: vec![0.05; m.n_effectors()], thrust: 6000.0 };
        let f = m.eval_dynamics(&x, &u, Direction::Forward).unwrap().to_array();
        let b = m.eval_dynamics(&x, &u, Direction::Backward).unwrap().to_array();
        for i in 0..12 {
            assert_relative_eq!(f[i], -b[i], max_relative = 1e-15);
        }
    }

    #[test]
    fn dynamics_affine_in_controls_matches_effectiveness() {
        // f(x, u1) - f(x, u0) = Jtilde^-1 J_d (u1 - u0), exactly, when the
        // effectiveness columns are state-only (thrust held fixed here so
        // vectoring columns stay constant).
        let m = AircraftModel::builtin_generic_fighter();
        let x = StateVector {
            u: 800.0, v: 10.0, w: 40.0, p: 0.2, q: 0.1, r: -0.05,
            phi: 0.05, theta: 0.06, psi: 0.0, x_n: 0.0, y_e: 0.0, h: 20000.0,
        };
        let n = m.n_effectors();
        let thrust = 5000.0;
        let u0 = ControlVector { delta: vec![0.02; n], thrust };
        let mut d1 = vec![0.02; n];
        for (i, v) in d1.iter_mut().enumerate() {
            *v += 0.01 * (i as f64 + 1.0);
        }
        let u1 = ControlVector { delta: d1, thrust };
        let f0 = m.eval_dynamics(&x, &u0, Direction::Forward).unwrap().to_dvector();
        let f1 = m.eval_dynamics(&x, &u1, Direction::Forward).unwrap().to_dvector();
        let jd = m.control_effectiveness(&x, &u0).unwrap();
        let du = u1.to_dvector() - u0.to_dvector();
        let pred = m.j_tilde_inv() * jd * du;
        // Only the six velocity rows respond to controls.
        for i in 0..6 {
            assert_relative_eq!(f1[i] - f0[i], pred[i], epsilon = 1e-8, max_relative = 1e-8);
        }
        for i in 6..12 {
            assert_eq!(f1[i], f0[i]);
        }
    }

    #[test]
    fn thrust_column_is_axial_unit_force_at_zero_incidence() {
        let m = AircraftModel::from_json(&bare_model_json("")).unwrap();
        let x = level_state(15000.0, 600.0);
        let u = ControlVector { delta: vec![0.0], thrust: 4000.0 };
        let jd = m.control_effectiveness(&x, &u).unwrap();
        let tcol = jd.column(1);
        assert_relative_eq!(tcol[0], 1.0, max_relative = 1e-12);
        for i in 1..6 {
            assert_relative_eq!(tcol[i], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rk4_step_matches_closed_form_ballistic_arc() {
        // With zero aero and zero thrust the only forcing is gravity, so
        // w(t) = g t, x_n(t) = u t exactly and h(t) = -g t^2/2 to the
        // accuracy of the small-angle coupling terms.
        let m = AircraftModel::from_json(&bare_model_json("")).unwrap();
        let x = level_state(12000.0, 500.0);
        let u = ControlVector { delta: vec![0.0], thrust: 0.0 };
        let dt = 0.01;
        let next = m.step(&x, &u, dt, Direction::Forward).unwrap();
        // w(t) = G t, h(t) = -G t^2 / 2 (+O(t^4) coupling), x_n = u t.
        assert_relative_eq!(next.w, G * dt, max_relative = 1e-9);
        assert_relative_eq!(next.x_n, 500.0 * dt, max_relative = 1e-9);
        assert_relative_eq!(next.h - 12000.0, -0.5 * G * dt * dt, max_relative = 1e-6);
    }

    #[test]
    fn forward_backward_roundtrip_within_tolerance() {
        let m = AircraftModel::builtin_generic_fighter();
        let x = StateVector {
            u: 850.0, v: 5.0, w: 35.0, p: 0.1, q: 0.05, r: 0.02,
            phi: 0.1, theta: 0.04, psi: 0.2, x_n: 100.0, y_e: -50.0, h: 20000.0,
        };
        let u = ControlVector { delta: vec![0.01; m.n_effectors()], thrust: 4000.0 };
        let dt = 0.01;
        let fwd = m.step(&x, &u, dt, Direction::Forward).unwrap();
        let back = m.step(&fwd, &u, dt, Direction::Backward).unwrap();
        let a = x.to_array();
        let b = back.to_array();
        for i in 0..12 {
            let scale = a[i].abs().max(1.0);
            assert!(
                (a[i] - b[i]).abs() / scale < 1e-6,
                "component {i}: {} vs {}",
                a[i],
                b[i]
            );
        }
    }

    #[test]
    fn domain_violation_is_reported_not_extrapolated() {
        let m = AircraftModel::builtin_generic_fighter();
        // Flying backward-and-up: alpha = atan2(500, -100) = 1.77 rad,
        // past the 1.745 rad validity bound.
        let x = StateVector { u: -100.0, w: 500.0, h: 20000.0, ..StateVector::zeros() };
        let u = ControlVector { delta: vec![0.0; m.n_effectors()], thrust: 0.0 };
        match m.eval_dynamics(&x, &u, Direction::Forward) {
            Err(ModelError::DomainViolation { var: "alpha", .. }) => {}
            other => panic!("expected alpha domain violation, got {other:?}"),
        }
    }

    #[test]
    fn gimbal_guard_trips_past_85_degrees() {
        let m = AircraftModel::builtin_generic_fighter();
        let x = StateVector { u: 600.0, theta: 1.52, h: 20000.0, ..StateVector::zeros() };
        let u = ControlVector { delta: vec![0.0; m.n_effectors()], thrust: 0.0 };
        assert!(matches!(
            m.eval_dynamics(&x, &u, Direction::Forward),
            Err(ModelError::GimbalGuard { .. })
        ));
    }

    #[test]
    fn builtin_fighter_shape() {
        let m = AircraftModel::builtin_generic_fighter();
        assert!(m.n_effectors() >= 6);
        assert!(m.effector_index("ytv").is_some());
        assert!(m.thrust.vectoring);
        assert!(m.explore_thrust());
        assert!(!m.trim_effectors.is_empty());
        for t in &m.trim_effectors {
            assert!(m.effector_index(t).is_some());
        }
    }

    #[test]
    fn schema_version_mismatch_rejected() {
        let bad = bare_model_json("").replace("\"schema_version\": 1", "\"schema_version\": 99");
        assert!(matches!(
            AircraftModel::from_json(&bad),
            Err(ModelConfigError::SchemaVersion { got: 99, .. })
        ));
    }

    #[test]
    fn without_effector_drops_column() {
        let m = AircraftModel::builtin_generic_fighter();
        let n = m.n_effectors();
        let m2 = m.without_effector("ytv");
        assert_eq!(m2.n_effectors(), n - 1);
        assert!(m2.effector_index("ytv").is_none());
    }
}
