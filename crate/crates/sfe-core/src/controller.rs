//! Two-loop dynamic-inversion flight controller with envelope
//! protection hooks.
//!
//! The outer loop tracks aerodynamic angles (phi, alpha, beta) with
//! ordinary NDI driven by PID virtual controls; the inner loop tracks
//! body rates (p, q, r) with incremental NDI allocated through a
//! weighted minimum-norm pseudo-inverse; a separate auto-throttle
//! regulates ground speed incrementally. Reference commands pass
//! through an envelope-protection stage (none, state-constraint clamp,
//! or probabilistic modification) and the outer loop runs a
//! pseudo-control-hedging reference model so inner-loop protection is
//! fed back instead of fought by the integrators.

use crate::dynamics::{
    state_to_envelope_coords, AircraftModel, ControlVector, Direction, EffectorLimits,
    ModelError, StateVector, admissible_increment_bounds, G,
};
use crate::envelope::{ConstraintQuery, EnvelopeDatabase, EnvelopeError, MetricQuery};
use crate::fep::{prob_protect, ProbFepConfig, ScbConfig};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("{stage}: matrix is singular or near-singular")]
    Singular { stage: &'static str },
    #[error("thrust has no speed authority; holding previous setting")]
    ThrottleHold,
    #[error("controller gains must be non-negative ({which})")]
    BadGains { which: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

/// Complete gain table: inner loop (p, q, r), outer loop (phi, alpha,
/// beta), PCH reference-model gains per outer channel, and the
/// auto-throttle proportional gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopGains {
    pub inner: [ChannelGains; 3],
    pub outer: [ChannelGains; 3],
    pub k_ref: [f64; 3],
    pub k_throttle: f64,
}

impl Default for LoopGains {
    fn default() -> Self {
        let g = |kp, ki, kd| ChannelGains { kp, ki, kd };
        LoopGains {
            inner: [g(6.50, 0.0, 0.0), g(6.50, 0.0, 0.0), g(5.80, 0.0, 0.50)],
            outer: [g(2.00, 0.50, 0.90), g(2.00, 0.50, 0.90), g(1.60, 0.30, 0.0)],
            // Reference-model gains track the outer proportional gains.
            k_ref: [2.00, 2.00, 1.60],
            k_throttle: 1.00,
        }
    }
}

impl LoopGains {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let ok = |g: &ChannelGains| g.kp >= 0.0 && g.ki >= 0.0 && g.kd >= 0.0;
        if !self.inner.iter().all(ok) {
            return Err(ControllerError::BadGains { which: "inner" });
        }
        if !self.outer.iter().all(ok) {
            return Err(ControllerError::BadGains { which: "outer" });
        }
        if !self.k_ref.iter().all(|&k| k >= 0.0) || self.k_throttle < 0.0 {
            return Err(ControllerError::BadGains { which: "k_ref/throttle" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
}

/// One PID channel: nu = Kp e + Ki (trapezoidal integral of e) +
/// Kd (backward difference of e). The integral absorbs the current
/// error before use; `freeze_integral` skips that update (anti-windup
/// while envelope protection is rewriting this channel's reference).
pub fn pid_virtual_control(
    e: f64,
    gains: &ChannelGains,
    dt: f64,
    state: &mut PidState,
    freeze_integral: bool,
) -> f64 {
    if !freeze_integral {
        state.integral += 0.5 * (e + state.prev_error) * dt;
    }
    let derivative = (e - state.prev_error) / dt;
    let nu = gains.kp * e + gains.ki * state.integral + gains.kd * derivative;
    state.prev_error = e;
    nu
}

/// First-order measurement filter, y' = (u - y) / tau, discretized with
/// forward Euler at the control rate. The first sample initializes the
/// state so startup carries no artificial transient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LowPass {
    state: Option<f64>,
}

impl LowPass {
    pub fn update(&mut self, u: f64, dt: f64, tau: f64) -> f64 {
        let y = match self.state {
            None => u,
            Some(y) => y + dt / tau * (u - y),
        };
        self.state = Some(y);
        y
    }
}

/// Affine outer-loop dynamics at the current state:
/// d/dt [phi alpha beta] = b1 + A1 [p q r]. `accel` is the body-frame
/// specific force (accelerometer measurement, force over mass).
pub fn outer_loop_dynamics(
    x: &StateVector,
    accel: &Vector3<f64>,
) -> Result<(Matrix3<f64>, Vector3<f64>), ControllerError> {
    let (u, v, w) = (x.u, x.v, x.w);
    let uw2 = u * u + w * w;
    let vg2 = uw2 + v * v;
    if uw2 < 1e-6 || vg2 < 1e-6 {
        return Err(ControllerError::Singular { stage: "outer dynamics" });
    }
    if x.theta.abs() > 85.0_f64.to_radians() {
        return Err(ControllerError::Singular { stage: "outer dynamics" });
    }
    let uw = uw2.sqrt();
    let (sph, cph) = x.phi.sin_cos();
    let (sth, cth) = x.theta.sin_cos();
    let tth = sth / cth;
    // Accelerometer measurements plus gravity components.
    let ax = accel[0] - G * sth;
    let ay = accel[1] + G * sph * cth;
    let az = accel[2] + G * cph * cth;

    let b = Vector3::new(
        0.0,
        (u * az - w * ax) / uw2,
        ((-u * v / vg2) * ax + (1.0 - v * v / vg2) * ay - (v * w / vg2) * az) / uw,
    );
    let a1 = Matrix3::new(
        1.0,
        sph * tth,
        cph * tth,
        -u * v / uw2,
        1.0,
        -v * w / uw2,
        w / uw,
        0.0,
        -u / uw,
    );
    Ok((a1, b))
}

/// Outer-loop NDI: x2_ref = A1^-1 (nu1 - b1).
pub fn outer_loop_inversion(
    x: &StateVector,
    accel: &Vector3<f64>,
    nu1: &Vector3<f64>,
) -> Result<Vector3<f64>, ControllerError> {
    let (a1, b) = outer_loop_dynamics(x, accel)?;
    let lu = a1.lu();
    lu.solve(&(nu1 - b)).ok_or(ControllerError::Singular { stage: "outer inversion" })
}

/// Inner-loop INDI: allocate the incremental moment demand
/// J (nu2 - measured rate accelerations) over the effectors through a
/// weighted minimum-norm pseudo-inverse of the moment effectiveness,
/// then clip the increment to the admissible bounds and add it to the
/// current deflections.
#[allow(clippy::too_many_arguments)]
pub fn inner_loop_indi(
    nu2: &Vector3<f64>,
    rate_accel_meas: &Vector3<f64>,
    inertia: &Matrix3<f64>,
    jdm: &DMatrix<f64>,
    weights: Option<&[f64]>,
    delta0: &[f64],
    limits: &[EffectorLimits],
    dt: f64,
) -> Result<Vec<f64>, ControllerError> {
    let m = jdm.ncols();
    assert_eq!(jdm.nrows(), 3);
    assert_eq!(delta0.len(), m);
    assert_eq!(limits.len(), m);
    let demand = inertia * (nu2 - rate_accel_meas);

    // W^-1 B^T (B W^-1 B^T)^-1 demand, with diagonal weights.
    let winv: Vec<f64> = match weights {
        Some(ws) => {
            assert_eq!(ws.len(), m);
            ws.iter().map(|&w| 1.0 / w).collect()
        }
        None => vec![1.0; m],
    };
    let mut bwbt = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            bwbt[(i, j)] = (0..m).map(|k| jdm[(i, k)] * winv[k] * jdm[(j, k)]).sum();
        }
    }
    let chol = bwbt
        .cholesky()
        .ok_or(ControllerError::Singular { stage: "inner allocation" })?;
    let lambda = chol.solve(&demand);
    let mut inc = DVector::zeros(m);
    for k in 0..m {
        inc[k] = winv[k] * (0..3).map(|i| jdm[(i, k)] * lambda[i]).sum::<f64>();
    }

    let mut delta = Vec::with_capacity(m);
    for k in 0..m {
        let (lo, hi) = admissible_increment_bounds(&limits[k], delta0[k], dt);
        delta.push(delta0[k] + inc[k].clamp(lo, hi));
    }
    Ok(delta)
}

/// Pseudo-control hedging reference model, forward Euler:
/// x_com' = x_com + dt (K_ref (x_fep - x_com) - nu_h); returns the new
/// state and the feed-forward term nu_ref = K_ref (x_fep - x_com).
pub fn pch_update(
    x_fep: &Vector3<f64>,
    x_com: &Vector3<f64>,
    nu_h: &Vector3<f64>,
    k_ref: &[f64; 3],
    dt: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let nu_ref = Vector3::new(
        k_ref[0] * (x_fep[0] - x_com[0]),
        k_ref[1] * (x_fep[1] - x_com[1]),
        k_ref[2] * (x_fep[2] - x_com[2]),
    );
    (x_com + (nu_ref - nu_h) * dt, nu_ref)
}

/// Speed sensitivity to thrust, a_T = (1/m)(cos a cos b dFx/dT +
/// sin b dFy/dT + sin a cos b dFz/dT), from the thrust column of the
/// control effectiveness.
pub fn thrust_speed_effectiveness(
    model: &AircraftModel,
    x: &StateVector,
    u: &ControlVector,
) -> Result<f64, ControllerError> {
    let jd = model.control_effectiveness(x, u)?;
    let tcol = jd.column(model.n_effectors());
    let vg = x.ground_speed();
    if vg <= 0.0 {
        return Err(ControllerError::Model(ModelError::ZeroGroundSpeed));
    }
    let alpha = x.w.atan2(x.u);
    let beta = (x.v / vg).asin();
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    Ok((ca * cb * tcol[0] + sb * tcol[1] + sa * cb * tcol[2]) / model.mass)
}

/// Incremental auto-throttle: T_com = T0 + (k_T (V_ref - V_g) -
/// measured V_g rate) / a_T, clamped to [0, T_max]. Loses authority
/// (near-zero a_T) as an error so the caller can hold T0.
pub fn autothrottle(
    v_ref: f64,
    v_g: f64,
    vdot_meas: f64,
    a_t: f64,
    t0: f64,
    k_t: f64,
    t_max: f64,
) -> Result<f64, ControllerError> {
    if a_t.abs() < 1e-9 {
        return Err(ControllerError::ThrottleHold);
    }
    Ok((t0 + (k_t * (v_ref - v_g) - vdot_meas) / a_t).clamp(0.0, t_max))
}

/// Which protection law modifies the references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FepMode {
    None,
    Scb,
    Prob,
}

impl FepMode {
    pub fn tag(self) -> &'static str {
        match self {
            FepMode::None => "none",
            FepMode::Scb => "scb",
            FepMode::Prob => "prob",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub gains: LoopGains,
    /// Control period, seconds.
    pub dt: f64,
    /// Measurement filter time constant, seconds.
    pub sensor_tau: f64,
    pub scb: ScbConfig,
    pub prob_outer: ProbFepConfig,
    pub prob_inner: ProbFepConfig,
    /// Optional allocation weights per effector (identity if absent).
    pub weights: Option<Vec<f64>>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            gains: LoopGains::default(),
            dt: 0.01,
            sensor_tau: 0.02,
            scb: ScbConfig::default(),
            prob_outer: ProbFepConfig::outer_default(),
            prob_inner: ProbFepConfig::inner_default(),
            weights: None,
        }
    }
}

/// Mutable controller memory carried between steps.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub outer_pid: [PidState; 3],
    pub inner_pid: [PidState; 3],
    /// PCH reference-model state for (phi, alpha, beta).
    pub x_com: Vector3<f64>,
    /// Effector commands applied over the previous period.
    pub delta0: Vec<f64>,
    /// Thrust command applied over the previous period.
    pub t0: f64,
    /// Hedge computed on the previous step, consumed by this step's
    /// reference-model update.
    pub prev_nu_h: Vector3<f64>,
    /// Outer channels whose reference the FEP rewrote last step; those
    /// integrators freeze this step.
    pub frozen_outer: [bool; 3],
    rate_accel_filters: [LowPass; 3],
    vdot_filter: LowPass,
}

impl ControllerState {
    /// Fresh state at the initial condition: the reference model starts
    /// on the measured angles and the increment baselines start on the
    /// actual initial controls.
    pub fn init(x0: &StateVector, u0: &ControlVector) -> Self {
        let alpha = x0.w.atan2(x0.u);
        let vg = x0.ground_speed();
        let beta = if vg > 0.0 { (x0.v / vg).asin() } else { 0.0 };
        ControllerState {
            outer_pid: Default::default(),
            inner_pid: Default::default(),
            x_com: Vector3::new(x0.phi, alpha, beta),
            delta0: u0.delta.clone(),
            t0: u0.thrust,
            prev_nu_h: Vector3::zeros(),
            frozen_outer: [false; 3],
            rate_accel_filters: Default::default(),
            vdot_filter: Default::default(),
        }
    }
}

/// Reference inputs for one control period, already prefiltered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInput {
    pub phi_ref: f64,
    pub alpha_ref: f64,
    pub beta_ref: f64,
    pub v_ref: f64,
}

/// Everything one step produced, for actuation and logging.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub delta_com: Vec<f64>,
    pub t_com: f64,
    pub x1_ref: Vector3<f64>,
    pub x1_fep: Vector3<f64>,
    pub x1_com: Vector3<f64>,
    pub x2_ref: Vector3<f64>,
    pub x2_fep: Vector3<f64>,
    pub nu_h: Vector3<f64>,
    /// Envelope metric at the measured state; NaN when no database was
    /// consulted.
    pub m_env: f64,
    pub throttle_held: bool,
}

/// Gradient component for a named state dimension, zero when the
/// database grid does not carry that dimension.
fn channel_gradient(db: &EnvelopeDatabase, mq: &MetricQuery, name: &str) -> f64 {
    db.grid
        .dims()
        .iter()
        .position(|d| d.name == name)
        .map_or(0.0, |j| mq.j_env[j])
}

/// Constraint interval for a named dimension, None when the field does
/// not protect it.
fn channel_interval(
    db: &EnvelopeDatabase,
    cq: &ConstraintQuery,
    name: &str,
) -> Option<(f64, f64)> {
    cq.dims
        .iter()
        .position(|&j| db.grid.dims()[j].name == name)
        .map(|k| (cq.lo[k], cq.hi[k]))
}

/// One control period. Stage order: outer PID, outer FEP, PCH, outer
/// inversion, inner FEP, hedge computation, inner PID, INDI allocation,
/// auto-throttle. With `FepMode::None` the protection and hedging
/// stages are bypassed entirely: references pass through and the PCH
/// reference model is pinned to them, so the loop behaves as a plain
/// two-loop NDI controller.
pub fn controller_step(
    model: &AircraftModel,
    x: &StateVector,
    input: &StepInput,
    mode: FepMode,
    db: Option<&EnvelopeDatabase>,
    cfg: &ControllerConfig,
    st: &mut ControllerState,
) -> Result<StepOutput, ControllerError> {
    let dt = cfg.dt;
    let u_prev = ControlVector { delta: st.delta0.clone(), thrust: st.t0 };

    // Measurements: specific force, filtered rate accelerations,
    // filtered speed rate.
    let fm = model.forces_moments(x, &u_prev)?;
    let accel = Vector3::new(fm[0], fm[1], fm[2]) / model.mass;
    let xdot = model.eval_dynamics(x, &u_prev, Direction::Forward)?;
    let rate_accel = Vector3::new(
        st.rate_accel_filters[0].update(xdot.p, dt, cfg.sensor_tau),
        st.rate_accel_filters[1].update(xdot.q, dt, cfg.sensor_tau),
        st.rate_accel_filters[2].update(xdot.r, dt, cfg.sensor_tau),
    );
    let vg = x.ground_speed();
    let vdot_raw = (x.u * xdot.u + x.v * xdot.v + x.w * xdot.w) / vg;
    let vdot = st.vdot_filter.update(vdot_raw, dt, cfg.sensor_tau);

    let alpha = x.w.atan2(x.u);
    let beta = (x.v / vg).asin();
    let x1_meas = Vector3::new(x.phi, alpha, beta);
    let x2_meas = Vector3::new(x.p, x.q, x.r);
    let x1_ref = Vector3::new(input.phi_ref, input.alpha_ref, input.beta_ref);

    // Envelope query at the measured state (protected modes only).
    let coords = state_to_envelope_coords(x)?;
    let metric_query = match (mode, db) {
        (FepMode::None, _) | (_, None) => None,
        (_, Some(d)) => Some(d.query_metric(&coords)?),
    };

    // Outer PID tracks the reference model; channels the FEP rewrote
    // last step keep their integrators frozen (the mask necessarily
    // lags one step because the PID stage precedes the FEP stage).
    let tracked = if mode == FepMode::None { x1_ref } else { st.x_com };
    let mut nu1 = Vector3::zeros();
    for c in 0..3 {
        nu1[c] = pid_virtual_control(
            tracked[c] - x1_meas[c],
            &cfg.gains.outer[c],
            dt,
            &mut st.outer_pid[c],
            st.frozen_outer[c],
        );
    }

    // Outer FEP on the (alpha, beta) references; phi is never touched.
    let x1_fep = match mode {
        FepMode::None => x1_ref,
        FepMode::Scb => {
            let d = db.ok_or(ControllerError::Singular { stage: "missing database" })?;
            let cq = d.query_constraints(&coords)?;
            let mut out = x1_ref;
            if let Some((lo, hi)) = channel_interval(d, &cq, "alpha") {
                out[1] = out[1].clamp(lo, hi);
            }
            if let Some((lo, hi)) = channel_interval(d, &cq, "beta") {
                out[2] = out[2].clamp(lo, hi);
            }
            out
        }
        FepMode::Prob => {
            let d = db.ok_or(ControllerError::Singular { stage: "missing database" })?;
            let mq = metric_query.as_ref().expect("queried in prob mode");
            let grad =
                [channel_gradient(d, mq, "alpha"), channel_gradient(d, mq, "beta")];
            let prot =
                prob_protect(&[x1_ref[1], x1_ref[2]], mq.m_env, &grad, &cfg.prob_outer);
            Vector3::new(x1_ref[0], prot[0], prot[1])
        }
    };
    st.frozen_outer = [false, x1_fep[1] != x1_ref[1], x1_fep[2] != x1_ref[2]];

    // PCH reference model, driven by the previous step's hedge. With
    // protection off the model is pinned to the reference.
    let (x1_com, nu_ref) = if mode == FepMode::None {
        (x1_ref, Vector3::zeros())
    } else {
        let (next, nu_ref) = pch_update(&x1_fep, &st.x_com, &st.prev_nu_h, &cfg.gains.k_ref, dt);
        let current = st.x_com;
        st.x_com = next;
        (current, nu_ref)
    };
    let _ = x1_com;
    let nu1 = nu1 + nu_ref;

    // Outer inversion to body-rate references.
    let x2_ref = outer_loop_inversion(x, &accel, &nu1)?;

    // Inner FEP on the (p, q, r) references.
    let x2_fep = match mode {
        FepMode::None => x2_ref,
        FepMode::Scb => {
            let d = db.ok_or(ControllerError::Singular { stage: "missing database" })?;
            let cq = d.query_constraints(&coords)?;
            let mut out = x2_ref;
            for (c, name) in ["p", "q", "r"].iter().enumerate() {
                if let Some((lo, hi)) = channel_interval(d, &cq, name) {
                    out[c] = out[c].clamp(lo, hi);
                }
            }
            out
        }
        FepMode::Prob => {
            let d = db.ok_or(ControllerError::Singular { stage: "missing database" })?;
            let mq = metric_query.as_ref().expect("queried in prob mode");
            let grad = [
                channel_gradient(d, mq, "p"),
                channel_gradient(d, mq, "q"),
                channel_gradient(d, mq, "r"),
            ];
            let prot = prob_protect(
                &[x2_ref[0], x2_ref[1], x2_ref[2]],
                mq.m_env,
                &grad,
                &cfg.prob_inner,
            );
            Vector3::new(prot[0], prot[1], prot[2])
        }
    };

    // Hedge: the outer-loop virtual control lost to inner protection.
    let nu_h = if mode == FepMode::None {
        Vector3::zeros()
    } else {
        let (a1, _) = outer_loop_dynamics(x, &accel)?;
        a1 * (x2_ref - x2_fep)
    };
    st.prev_nu_h = nu_h;

    // Inner PID and INDI allocation.
    let mut nu2 = Vector3::zeros();
    for c in 0..3 {
        nu2[c] = pid_virtual_control(
            x2_fep[c] - x2_meas[c],
            &cfg.gains.inner[c],
            dt,
            &mut st.inner_pid[c],
            false,
        );
    }
    let jd = model.control_effectiveness(x, &u_prev)?;
    let m = model.n_effectors();
    let jdm = jd.view((3, 0), (3, m)).into_owned();
    let delta_com = inner_loop_indi(
        &nu2,
        &rate_accel,
        &model.inertia,
        &jdm,
        cfg.weights.as_deref(),
        &st.delta0,
        model.effector_limits(),
        dt,
    )?;

    // Auto-throttle; holds the previous thrust when authority is lost.
    let a_t = thrust_speed_effectiveness(model, x, &u_prev)?;
    let (t_com, throttle_held) = match autothrottle(
        input.v_ref,
        vg,
        vdot,
        a_t,
        st.t0,
        cfg.gains.k_throttle,
        model.thrust.t_max,
    ) {
        Ok(t) => (t, false),
        Err(ControllerError::ThrottleHold) => (st.t0, true),
        Err(e) => return Err(e),
    };

    st.delta0 = delta_com.clone();
    st.t0 = t_com;

    Ok(StepOutput {
        delta_com,
        t_com,
        x1_ref,
        x1_fep,
        x1_com: tracked,
        x2_ref,
        x2_fep,
        nu_h,
        m_env: metric_query.map_or(f64::NAN, |mq| mq.m_env),
        throttle_held,
    })
}
