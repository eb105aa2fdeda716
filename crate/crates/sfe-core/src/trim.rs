//! Steady straight-and-level trim.
//!
//! A trim point at (h, Mach) zeroes the six velocity-rate derivatives
//! with phi = 0, theta = alpha (level flight path), beta = 0 and zero
//! body rates. Free variables are thrust, the model's declared trim
//! effectors and alpha; the remaining freedom is spent minimizing
//!
//!   J = (T / T_max)^2 + k_trim * sum(delta_i^2)
//!
//! via a quadratic-penalty method: minimize J + rho ||residual||^2 with
//! a BFGS-style quasi-Newton inner loop (numerical central-difference
//! gradients) and rho escalated by 10 per outer round for five rounds.
//! Residuals are normalized (translational derivatives divided by g,
//! rotational in rad/s^2) and the converged max-norm must be <= 1e-6.

use crate::atmosphere;
use crate::dynamics::{
    AircraftModel, ControlVector, Direction, EnvelopeCoords, StateVector, G,
};
use crate::spline::BicubicSpline;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrimError {
    #[error("trim did not converge at h={h:.0} ft, M={mach:.3}: residual {residual:.3e}")]
    NotConverged { h: f64, mach: f64, residual: f64 },
    #[error("model rejected trim candidate state: {0}")]
    Model(#[from] crate::dynamics::ModelError),
    #[error("trim table build failed: {failed} of {total} nodes unconverged (limit 10%)")]
    TooManyFailures { failed: usize, total: usize },
    #[error("model declares no trim effectors")]
    NoTrimEffectors,
    #[error("trim table io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trim table parse: {0}")]
    Parse(String),
    #[error("spline: {0}")]
    Spline(#[from] crate::spline::SplineError),
}

#[derive(Debug, Clone)]
pub struct TrimConfig {
    /// Deflection weight in the trim cost.
    pub k_trim: f64,
    /// Convergence gate on the normalized residual max-norm.
    pub tol: f64,
    /// Initial quadratic-penalty weight.
    pub penalty0: f64,
    /// Outer continuation rounds, penalty scaled by 10 each.
    pub rounds: usize,
    /// Inner quasi-Newton iteration cap per round.
    pub max_iters: usize,
}

impl Default for TrimConfig {
    fn default() -> Self {
        TrimConfig { k_trim: 1.0, tol: 1e-6, penalty0: 1e4, rounds: 5, max_iters: 250 }
    }
}

/// One converged trim solution.
#[derive(Debug, Clone)]
pub struct TrimPoint {
    pub h: f64,
    pub mach: f64,
    pub alpha: f64,
    pub thrust: f64,
    /// Deflections of the trim effectors, in the model's declared order.
    pub deflections: Vec<f64>,
    /// Normalized residual max-norm at the solution.
    pub residual: f64,
    /// Trim cost J at the solution.
    pub cost: f64,
}

impl TrimPoint {
    /// Full aircraft state at this trim point (non-trim effectors zero).
    pub fn state(&self) -> StateVector {
        let v = self.mach * atmosphere::speed_of_sound(self.h);
        StateVector {
            u: v * self.alpha.cos(),
            v: 0.0,
            w: v * self.alpha.sin(),
            p: 0.0,
            q: 0.0,
            r: 0.0,
            phi: 0.0,
            theta: self.alpha,
            psi: 0.0,
            x_n: 0.0,
            y_e: 0.0,
            h: self.h,
        }
    }

    pub fn controls(&self, model: &AircraftModel) -> ControlVector {
        let mut delta = vec![0.0; model.n_effectors()];
        for (k, name) in model.trim_effectors.iter().enumerate() {
            let idx = model.effector_index(name).expect("validated at model load");
            delta[idx] = self.deflections[k];
        }
        ControlVector { delta, thrust: self.thrust }
    }
}

/// Normalized trim residual: (udot, vdot, wdot)/g and (pdot, qdot, rdot)
/// at the candidate point.
fn residual_vector(
    model: &AircraftModel,
    h: f64,
    mach: f64,
    alpha: f64,
    thrust: f64,
    deflections: &[f64],
) -> Result<DVector<f64>, TrimError> {
    let tp = TrimPoint {
        h,
        mach,
        alpha,
        thrust,
        deflections: deflections.to_vec(),
        residual: 0.0,
        cost: 0.0,
    };
    let x = tp.state();
    let u = tp.controls(model);
    let d = model.eval_dynamics(&x, &u, Direction::Forward)?;
    Ok(DVector::from_vec(vec![d.u / G, d.v / G, d.w / G, d.p, d.q, d.r]))
}

/// Variables are packed normalized: z = [T / T_max, deflections..., alpha].
struct TrimProblem<'a> {
    model: &'a AircraftModel,
    h: f64,
    mach: f64,
    k_trim: f64,
    rho: f64,
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl TrimProblem<'_> {
    fn n(&self) -> usize {
        self.model.trim_effectors.len() + 2
    }

    fn unpack(&self, z: &DVector<f64>) -> (f64, Vec<f64>, f64) {
        let k = self.model.trim_effectors.len();
        let thrust = z[0] * self.model.thrust.t_max;
        let defl = z.as_slice()[1..1 + k].to_vec();
        let alpha = z[1 + k];
        (thrust, defl, alpha)
    }

    fn cost_only(&self, z: &DVector<f64>) -> f64 {
        let (_, defl, _) = self.unpack(z);
        z[0] * z[0] + self.k_trim * defl.iter().map(|d| d * d).sum::<f64>()
    }

    fn penalized(&self, z: &DVector<f64>) -> f64 {
        let (thrust, defl, alpha) = self.unpack(z);
        match residual_vector(self.model, self.h, self.mach, alpha, thrust, &defl) {
            Ok(r) => self.cost_only(z) + self.rho * r.norm_squared(),
            // Out-of-domain candidates get a steep but finite wall so the
            // line search backs off instead of aborting.
            Err(_) => 1e12 * (1.0 + z.norm_squared()),
        }
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let mut g = DVector::zeros(n);
        for i in 0..n {
            let step = 1e-6 * z[i].abs().max(1.0);
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += step;
            zm[i] -= step;
            g[i] = (self.penalized(&zp) - self.penalized(&zm)) / (2.0 * step);
        }
        g
    }

    fn clamp(&self, z: &mut DVector<f64>) {
        for i in 0..z.len() {
            z[i] = z[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    /// Projected BFGS with backtracking Armijo line search.
    fn minimize(&self, z0: &DVector<f64>, max_iters: usize) -> DVector<f64> {
        let n = self.n();
        let mut z = z0.clone();
        self.clamp(&mut z);
        let mut h_inv = DMatrix::<f64>::identity(n, n);
        let mut g = self.gradient(&z);
        let mut f = self.penalized(&z);
        for _ in 0..max_iters {
            if g.amax() < 1e-9 {
                break;
            }
            let mut d = -(&h_inv * &g);
            if d.dot(&g) > -1e-14 * d.norm() * g.norm() {
                d = -g.clone();
                h_inv = DMatrix::identity(n, n);
            }
            let gd = g.dot(&d);
            let mut t = 1.0;
            let mut z_new = z.clone();
            let mut f_new = f;
            let mut ok = false;
            for _ in 0..50 {
                z_new = &z + &d * t;
                self.clamp(&mut z_new);
                f_new = self.penalized(&z_new);
                if f_new <= f + 1e-4 * t * gd || f_new < f - 1e-18 {
                    ok = true;
                    break;
                }
                t *= 0.5;
            }
            if !ok || (f - f_new).abs() <= 1e-18 * f.abs().max(1.0) {
                break;
            }
            let g_new = self.gradient(&z_new);
            let s = &z_new - &z;
            let y = &g_new - &g;
            let sy = s.dot(&y);
            if sy > 1e-12 {
                // Standard BFGS inverse update.
                let rho = 1.0 / sy;
                let i_mat = DMatrix::<f64>::identity(n, n);
                let left = &i_mat - &s * y.transpose() * rho;
                let right = &i_mat - &y * s.transpose() * rho;
                h_inv = &left * h_inv * &right + &s * s.transpose() * rho;
            }
            z = z_new;
            g = g_new;
            f = f_new;
        }
        z
    }
}

impl TrimProblem<'_> {
    fn residual_at(&self, z: &DVector<f64>) -> Option<DVector<f64>> {
        let (thrust, defl, alpha) = self.unpack(z);
        residual_vector(self.model, self.h, self.mach, alpha, thrust, &defl).ok()
    }

    /// 6 x n Jacobian of the residual, central differences.
    fn residual_jacobian(&self, z: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.n();
        let mut jac = DMatrix::zeros(6, n);
        for i in 0..n {
            let step = 1e-6 * z[i].abs().max(1.0);
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += step;
            zm[i] -= step;
            let rp = self.residual_at(&zp)?;
            let rm = self.residual_at(&zm)?;
            jac.set_column(i, &((rp - rm) / (2.0 * step)));
        }
        Some(jac)
    }

    /// Min-norm Newton step onto the constraint manifold:
    /// dz = -J^T (J J^T + lambda I)^-1 r.
    fn restore(&self, z: &DVector<f64>, sweeps: usize) -> DVector<f64> {
        let mut z = z.clone();
        for _ in 0..sweeps {
            let (Some(r), Some(jac)) = (self.residual_at(&z), self.residual_jacobian(&z)) else {
                return z;
            };
            if r.amax() < 1e-12 {
                break;
            }
            let jjt = &jac * jac.transpose() + DMatrix::identity(6, 6) * 1e-12;
            let Some(sol) = jjt.lu().solve(&r) else { return z };
            z -= jac.transpose() * sol;
            self.clamp(&mut z);
        }
        z
    }

    /// Exact gradient of the trim cost in packed coordinates.
    fn cost_gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let k = self.model.trim_effectors.len();
        let mut g = DVector::zeros(self.n());
        g[0] = 2.0 * z[0];
        for i in 0..k {
            g[1 + i] = 2.0 * self.k_trim * z[1 + i];
        }
        g
    }

    /// Newton descent along the trim-feasible manifold. The cost is an
    /// exact quadratic, so one reduced Newton step per restoration pass
    /// converges fast and lands every start on the same minimizer, which
    /// keeps grid sweeps consistent between warm and cold starts.
    fn polish(&self, z0: &DVector<f64>) -> DVector<f64> {
        let n = self.n();
        let k = self.model.trim_effectors.len();
        let mut hess = DMatrix::zeros(n, n);
        hess[(0, 0)] = 2.0;
        for i in 0..k {
            hess[(1 + i, 1 + i)] = 2.0 * self.k_trim;
        }
        let mut z = self.restore(z0, 8);
        for _ in 0..100 {
            let Some(jac) = self.residual_jacobian(&z) else { return z };
            let g = self.cost_gradient(&z);
            // Null-space basis of the constraint Jacobian (right singular
            // vectors past the numerical rank).
            // Null-space basis of the constraint Jacobian from the
            // eigenvectors of J^T J with (relatively) zero eigenvalue;
            // this covers any effector count, unlike the 6-row V^T of a
            // direct SVD.
            let eig = (jac.transpose() * &jac).symmetric_eigen();
            let lmax = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
            let null_cols: Vec<usize> =
                (0..n).filter(|&i| eig.eigenvalues[i] <= lmax * 1e-16).collect();
            if null_cols.is_empty() {
                break;
            }
            let mut basis = DMatrix::zeros(n, null_cols.len());
            for (c, &i) in null_cols.iter().enumerate() {
                basis.set_column(c, &eig.eigenvectors.column(i).into_owned());
            }
            let g_red = basis.transpose() * &g;
            if g_red.amax() < 1e-11 {
                break;
            }
            let h_red = basis.transpose() * &hess * &basis;
            let step = match h_red.clone().cholesky() {
                Some(ch) => -(&basis * ch.solve(&g_red)),
                None => -(&basis * &g_red),
            };
            let f0 = self.cost_only(&z);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let mut z_try = &z + &step * t;
                self.clamp(&mut z_try);
                let z_try = self.restore(&z_try, 6);
                let feasible =
                    self.residual_at(&z_try).map(|r| r.amax() < 1e-9).unwrap_or(false);
                if feasible && self.cost_only(&z_try) < f0 - 1e-16 {
                    z = z_try;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        self.restore(&z, 8)
    }
}

/// Physics-free coarse seed: scan alpha, set thrust from the x-force
/// balance, keep whichever candidate leaves the smallest residual.
fn initial_guess(model: &AircraftModel, h: f64, mach: f64, k: usize) -> DVector<f64> {
    let mut best = (f64::INFINITY, 0.05, 0.1);
    for i in 0..24 {
        let alpha = -0.05 + 0.025 * i as f64;
        for tfrac in [0.02, 0.08, 0.2, 0.4, 0.7] {
            let thrust = tfrac * model.thrust.t_max;
            if let Ok(r) = residual_vector(model, h, mach, alpha, thrust, &vec![0.0; k]) {
                let score = r.norm();
                if score < best.0 {
                    best = (score, alpha, tfrac);
                }
            }
        }
    }
    let mut z = DVector::zeros(k + 2);
    z[0] = best.2;
    z[k + 1] = best.1;
    z
}

/// Solve one trim point. `seed` (packed z-vector) warm-starts the solver
/// when sweeping a grid.
pub fn solve_trim(
    model: &AircraftModel,
    h: f64,
    mach: f64,
    config: &TrimConfig,
    seed: Option<&DVector<f64>>,
) -> Result<TrimPoint, TrimError> {
    let k = model.trim_effectors.len();
    if k == 0 {
        return Err(TrimError::NoTrimEffectors);
    }
    let mut lo = DVector::zeros(k + 2);
    let mut hi = DVector::zeros(k + 2);
    lo[0] = 0.0;
    hi[0] = 1.0;
    for (j, name) in model.trim_effectors.iter().enumerate() {
        let idx = model.effector_index(name).expect("validated");
        let lim = &model.effector_limits()[idx];
        lo[1 + j] = lim.delta_min;
        hi[1 + j] = lim.delta_max;
    }
    lo[k + 1] = -0.5;
    hi[k + 1] = model.domain.alpha_abs_max.min(1.2);

    let mut z = match seed {
        Some(s) => s.clone(),
        None => initial_guess(model, h, mach, k),
    };
    let mut rho = config.penalty0;
    for _ in 0..config.rounds {
        let prob = TrimProblem {
            model,
            h,
            mach,
            k_trim: config.k_trim,
            rho,
            lo: lo.clone(),
            hi: hi.clone(),
        };
        z = prob.minimize(&z, config.max_iters);
        rho *= 10.0;
    }

    let prob = TrimProblem { model, h, mach, k_trim: config.k_trim, rho, lo, hi };
    // The penalty rounds park in the right basin but can stall along the
    // nearly-flat feasible valley (penalty curvature dwarfs the cost
    // gradient there). A reduced-gradient polish finishes the job: drive
    // the residual to machine level with Gauss-Newton restoration steps,
    // then descend the exact cost gradient projected onto the constraint
    // tangent space until the projected gradient vanishes.
    z = prob.polish(&z);
    let (thrust, deflections, alpha) = prob.unpack(&z);
    let r = residual_vector(model, h, mach, alpha, thrust, &deflections)?;
    let residual = r.amax();
    if residual > config.tol {
        return Err(TrimError::NotConverged { h, mach, residual });
    }
    Ok(TrimPoint {
        h,
        mach,
        alpha,
        thrust,
        deflections,
        residual,
        cost: prob.cost_only(&z),
    })
}

/// Rectangular trim table with spline interpolants in (h, Mach).
#[derive(Debug, Clone)]
pub struct TrimSet {
    pub h_knots: Vec<f64>,
    pub mach_knots: Vec<f64>,
    pub trim_effectors: Vec<String>,
    pub k_trim: f64,
    /// Row-major node values (h outer, mach inner), one table per
    /// quantity: alpha, thrust, then each trim effector.
    pub points: Vec<TrimPoint>,
    alpha_spline: BicubicSpline,
    thrust_spline: BicubicSpline,
    effector_splines: Vec<BicubicSpline>,
}

/// Per-axis tolerances of the trim-membership box.
#[derive(Debug, Clone, Copy)]
pub struct TrimBoxTolerances {
    /// rad/s, applied to each of p, q, r.
    pub rate: f64,
    /// rad, applied to alpha (about its trim value) and beta (about 0).
    pub angle: f64,
    /// ft of altitude outside the table rectangle.
    pub h: f64,
    /// Mach outside the table rectangle.
    pub mach: f64,
}

impl Default for TrimBoxTolerances {
    fn default() -> Self {
        TrimBoxTolerances { rate: 0.02, angle: 0.01, h: 100.0, mach: 0.01 }
    }
}

impl TrimSet {
    pub fn h_range(&self) -> (f64, f64) {
        (self.h_knots[0], *self.h_knots.last().unwrap())
    }

    pub fn mach_range(&self) -> (f64, f64) {
        (self.mach_knots[0], *self.mach_knots.last().unwrap())
    }

    pub fn alpha(&self, h: f64, mach: f64) -> f64 {
        self.alpha_spline.eval(h_axis(h), mach_axis(mach))
    }

    pub fn thrust(&self, h: f64, mach: f64) -> f64 {
        self.thrust_spline.eval(h_axis(h), mach_axis(mach))
    }

    pub fn deflections(&self, h: f64, mach: f64) -> Vec<f64> {
        self.effector_splines.iter().map(|s| s.eval(h_axis(h), mach_axis(mach))).collect()
    }

    /// Interpolated trim state and controls at an interior (h, Mach).
    pub fn state_controls(
        &self,
        model: &AircraftModel,
        h: f64,
        mach: f64,
    ) -> (StateVector, ControlVector) {
        let tp = TrimPoint {
            h,
            mach,
            alpha: self.alpha(h, mach),
            thrust: self.thrust(h, mach),
            deflections: self.deflections(h, mach),
            residual: 0.0,
            cost: 0.0,
        };
        (tp.state(), tp.controls(model))
    }

    /// Fuzzy trim membership: 1 at the trim point, 0 on the tolerance-box
    /// surface, negative outside. The max-norm box spans p, q, r, alpha
    /// (about its interpolated trim value) and beta; states whose (h, M)
    /// fall outside the table rectangle accrue extra normalized distance
    /// so the level is strictly negative there.
    pub fn level(&self, x: &EnvelopeCoords, tol: &TrimBoxTolerances) -> f64 {
        let mach = x.vg / atmosphere::speed_of_sound(x.h);
        let (h0, h1) = self.h_range();
        let (m0, m1) = self.mach_range();
        let hc = x.h.clamp(h0, h1);
        let mc = mach.clamp(m0, m1);
        let alpha_trim = self.alpha(hc, mc);
        let mut worst: f64 = 0.0;
        for v in [x.p, x.q, x.r] {
            worst = worst.max(v.abs() / tol.rate);
        }
        worst = worst.max((x.alpha - alpha_trim).abs() / tol.angle);
        worst = worst.max(x.beta.abs() / tol.angle);
        worst = worst.max((x.h - hc).abs() / tol.h);
        worst = worst.max((mach - mc).abs() / tol.mach);
        1.0 - worst
    }

    /// Draw (h, Mach) uniformly over the table rectangle.
    pub fn sample_hm<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let (h0, h1) = self.h_range();
        let (m0, m1) = self.mach_range();
        (rng.gen_range(h0..=h1), rng.gen_range(m0..=m1))
    }

    /// Draw a trim-set member uniformly over the (h, Mach) rectangle.
    pub fn sample_state<R: Rng>(
        &self,
        model: &AircraftModel,
        rng: &mut R,
    ) -> (StateVector, ControlVector) {
        let (h, m) = self.sample_hm(rng);
        self.state_controls(model, h, m)
    }
}

/// Sweep the (h, Mach) grid. Nodes are visited in a serpentine order so
/// each solve warm-starts from its predecessor; failed nodes get a second
/// attempt seeded from the nearest converged neighbor. More than 10%
/// failures aborts the build.
pub fn build_trim_set(
    model: &AircraftModel,
    h_range: (f64, f64),
    mach_range: (f64, f64),
    nh: usize,
    nm: usize,
    config: &TrimConfig,
) -> Result<TrimSet, TrimError> {
    assert!(nh >= 2 && nm >= 2, "trim grid needs at least 2x2 nodes");
    let k = model.trim_effectors.len();
    if k == 0 {
        return Err(TrimError::NoTrimEffectors);
    }
    let h_knots: Vec<f64> =
        (0..nh).map(|i| h_range.0 + (h_range.1 - h_range.0) * i as f64 / (nh - 1) as f64).collect();
    let mach_knots: Vec<f64> = (0..nm)
        .map(|j| mach_range.0 + (mach_range.1 - mach_range.0) * j as f64 / (nm - 1) as f64)
        .collect();

    let mut solutions: Vec<Option<TrimPoint>> = vec![None; nh * nm];
    let mut carry: Option<DVector<f64>> = None;
    for i in 0..nh {
        let cols: Vec<usize> =
            if i % 2 == 0 { (0..nm).collect() } else { (0..nm).rev().collect() };
        for j in cols {
            let sol = solve_trim(model, h_knots[i], mach_knots[j], config, carry.as_ref());
            match sol {
                Ok(tp) => {
                    carry = Some(pack(&tp, model));
                    solutions[i * nm + j] = Some(tp);
                }
                Err(_) => {
                    // Cold restart for the next node; retry pass follows.
                    carry = None;
                }
            }
        }
    }

    // Retry failures seeded from the nearest converged node.
    let failed_idx: Vec<usize> =
        (0..nh * nm).filter(|&n| solutions[n].is_none()).collect();
    for n in failed_idx {
        let (i, j) = (n / nm, n % nm);
        let seed = nearest_converged(&solutions, nh, nm, i, j).map(|tp| pack(tp, model));
        if let Ok(tp) =
            solve_trim(model, h_knots[i], mach_knots[j], config, seed.as_ref())
        {
            solutions[n] = Some(tp);
        }
    }

    let failed = solutions.iter().filter(|s| s.is_none()).count();
    let total = nh * nm;
    if failed * 10 > total {
        return Err(TrimError::TooManyFailures { failed, total });
    }
    // Any residual holes inherit the nearest converged solution's values
    // re-solved; if that also failed above, fill from the neighbor
    // directly so the spline stays defined (within the 10% allowance).
    for n in 0..total {
        if solutions[n].is_none() {
            let (i, j) = (n / nm, n % nm);
            let tp = nearest_converged(&solutions, nh, nm, i, j)
                .expect("at least 90% of nodes converged")
                .clone();
            solutions[n] = Some(TrimPoint { h: h_knots[i], mach: mach_knots[j], ..tp });
        }
    }

    let points: Vec<TrimPoint> = solutions.into_iter().map(|s| s.unwrap()).collect();
    trim_set_from_points(points, h_knots, mach_knots, model.trim_effectors.clone(), config.k_trim)
}

fn pack(tp: &TrimPoint, model: &AircraftModel) -> DVector<f64> {
    let k = tp.deflections.len();
    let mut z = DVector::zeros(k + 2);
    z[0] = tp.thrust / model.thrust.t_max;
    for (i, d) in tp.deflections.iter().enumerate() {
        z[1 + i] = *d;
    }
    z[k + 1] = tp.alpha;
    z
}

fn nearest_converged<'a>(
    solutions: &'a [Option<TrimPoint>],
    nh: usize,
    nm: usize,
    i: usize,
    j: usize,
) -> Option<&'a TrimPoint> {
    let mut best: Option<(usize, &TrimPoint)> = None;
    for ii in 0..nh {
        for jj in 0..nm {
            if let Some(tp) = &solutions[ii * nm + jj] {
                let d = ii.abs_diff(i).pow(2) + jj.abs_diff(j).pow(2);
                if best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, tp));
                }
            }
        }
    }
    best.map(|(_, tp)| tp)
}

/// Spline abscissa for the altitude axis. Trim quantities are close to
/// affine in 1/dynamic pressure, so interpolating against 1/rho(h) and
/// -1/M^2 (both strictly increasing) removes most of the curvature and
/// lets coarse grids meet the interpolation-slack budget.
fn h_axis(h: f64) -> f64 {
    1.0 / atmosphere::density(h)
}

/// Spline abscissa for the Mach axis. See [`h_axis`].
fn mach_axis(mach: f64) -> f64 {
    -1.0 / (mach * mach)
}

fn trim_set_from_points(
    points: Vec<TrimPoint>,
    h_knots: Vec<f64>,
    mach_knots: Vec<f64>,
    trim_effectors: Vec<String>,
    k_trim: f64,
) -> Result<TrimSet, TrimError> {
    let nm = mach_knots.len();
    let sx: Vec<f64> = h_knots.iter().map(|&h| h_axis(h)).collect();
    let sy: Vec<f64> = mach_knots.iter().map(|&m| mach_axis(m)).collect();
    let grid =
        |f: &dyn Fn(&TrimPoint) -> f64| -> Vec<f64> { points.iter().map(|p| f(p)).collect() };
    let alpha_spline = BicubicSpline::fit(&sx, &sy, &grid(&|p| p.alpha))?;
    let thrust_spline = BicubicSpline::fit(&sx, &sy, &grid(&|p| p.thrust))?;
    let mut effector_splines = Vec::new();
    for e in 0..trim_effectors.len() {
        effector_splines.push(BicubicSpline::fit(&sx, &sy, &grid(&|p| p.deflections[e]))?);
    }
    debug_assert_eq!(points.len(), h_knots.len() * nm);
    Ok(TrimSet {
        h_knots,
        mach_knots,
        trim_effectors,
        k_trim,
        points,
        alpha_spline,
        thrust_spline,
        effector_splines,
    })
}

fn fmt17(v: f64) -> String {
    format!("{:.16e}", v)
}

/// Serialize the table as CSV: one row per node, row-major (h outer),
/// 17 significant digits so reload is bit-exact.
pub fn trim_set_to_csv(ts: &TrimSet) -> String {
    let mut out = String::from("h,mach,alpha,T");
    for e in &ts.trim_effectors {
        out.push(',');
        out.push_str(e);
    }
    out.push_str(",residual,J\n");
    for p in &ts.points {
        let mut row = vec![fmt17(p.h), fmt17(p.mach), fmt17(p.alpha), fmt17(p.thrust)];
        row.extend(p.deflections.iter().map(|d| fmt17(*d)));
        row.push(fmt17(p.residual));
        row.push(fmt17(p.cost));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Rebuild a TrimSet from its CSV form. The node set must be a complete
/// rectangular grid; knots are recovered from the distinct coordinates.
pub fn trim_set_from_csv(text: &str, k_trim: f64) -> Result<TrimSet, TrimError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| TrimError::Parse("empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 6 || cols[0] != "h" || cols[1] != "mach" || cols[2] != "alpha" || cols[3] != "T"
    {
        return Err(TrimError::Parse(format!("unexpected header: {header}")));
    }
    let n_eff = cols.len() - 6;
    let trim_effectors: Vec<String> = cols[4..4 + n_eff].iter().map(|s| s.to_string()).collect();
    let mut points = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let f: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| TrimError::Parse(format!("row {}: {e}", lineno + 2)))?;
        if f.len() != cols.len() {
            return Err(TrimError::Parse(format!(
                "row {}: {} fields, expected {}",
                lineno + 2,
                f.len(),
                cols.len()
            )));
        }
        points.push(TrimPoint {
            h: f[0],
            mach: f[1],
            alpha: f[2],
            thrust: f[3],
            deflections: f[4..4 + n_eff].to_vec(),
            residual: f[4 + n_eff],
            cost: f[5 + n_eff],
        });
    }
    let mut h_knots: Vec<f64> = points.iter().map(|p| p.h).collect();
    let mut seen = std::collections::BTreeSet::new();
    h_knots.retain(|h| seen.insert(h.to_bits()));
    let mut mach_knots: Vec<f64> = points.iter().map(|p| p.mach).collect();
    let mut seen = std::collections::BTreeSet::new();
    mach_knots.retain(|m| seen.insert(m.to_bits()));
    h_knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mach_knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if points.len() != h_knots.len() * mach_knots.len() {
        return Err(TrimError::Parse(format!(
            "{} rows do not form a {} x {} grid",
            points.len(),
            h_knots.len(),
            mach_knots.len()
        )));
    }
    // Re-sort points into row-major knot order.
    points.sort_by(|a, b| {
        (a.h, a.mach).partial_cmp(&(b.h, b.mach)).unwrap()
    });
    trim_set_from_points(points, h_knots, mach_knots, trim_effectors, k_trim)
}

/// Default estimation trim-set envelope: h 10000..30000 ft, Mach 0.4..1.2.
pub const DEFAULT_H_RANGE: (f64, f64) = (10000.0, 30000.0);
pub const DEFAULT_MACH_RANGE: (f64, f64) = (0.4, 1.2);
/// Default grid density; dense enough that interpolated trim states keep
/// their dynamics residual a comfortable margin under 1e-3 over the
/// default rectangle.
pub const DEFAULT_TRIM_GRID: (usize, usize) = (9, 17);
