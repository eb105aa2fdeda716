//! Monte Carlo reachability sampling.
//!
//! Trajectories start from random trim states and apply, at every step,
//! the control increment that is extremal along a random exploration
//! direction: draw W over the (u, v, w, p, q, r) acceleration axes, and
//! per effector take the upper admissible increment when the projected
//! effectiveness opposes W, the lower one otherwise. Forward trajectories
//! chart where the aircraft can get to; backward trajectories chart where
//! it can return from. Endpoint states at t = T_f feed the density
//! estimator.

use crate::dynamics::{
    admissible_increment_bounds, integrate_step, state_to_envelope_coords, ControlAffineSystem,
    Direction, EnvelopeCoords, ModelError, StateVector,
};
use crate::trim::TrimSet;
use crate::AircraftModel;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Attempts allowed per trajectory slot before the run is declared
/// degenerate. Generous; the discard-rate gate below trips first on any
/// realistic configuration.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Error)]
pub enum McError {
    #[error(
        "time horizon {t_f} s exceeds the 1.5 s guard; long horizons \
         drift far from the trim premise and need an explicit override"
    )]
    HorizonGuard { t_f: f64 },
    #[error("invalid sampler step: dt = {dt}, T_f = {t_f}")]
    BadStep { dt: f64, t_f: f64 },
    #[error("T_f = {t_f} is not an integer multiple of dt = {dt}")]
    NonIntegralHorizon { t_f: f64, dt: f64 },
    #[error("sample count must be positive")]
    NoSamples,
    #[error(
        "{discarded} of {attempted} trajectories discarded (> 20%); \
         the trim set or horizon leaves too little of the domain reachable"
    )]
    ExcessiveDiscards { discarded: usize, attempted: usize },
    #[error("trajectory {id} exhausted its retry budget")]
    RetryBudget { id: u64 },
    #[error("sample file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Exploration weight distribution; anything symmetric around zero keeps
/// both increment signs equally likely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightDistribution {
    #[default]
    Normal,
    /// Random signs only: W_j in {-1, +1}.
    UniformSign,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Trajectory horizon in seconds.
    pub t_f: f64,
    /// Integration step in seconds.
    pub dt: f64,
    /// Number of completed trajectories per direction.
    pub n: usize,
    /// Master seed; per-trajectory streams derive from it.
    pub seed: u64,
    pub w_dist: WeightDistribution,
    /// Lifts the 1.5 s horizon guard.
    pub allow_long_horizon: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            t_f: 1.5,
            dt: 0.01,
            n: 10_000,
            seed: 0,
            w_dist: WeightDistribution::Normal,
            allow_long_horizon: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), McError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() || self.t_f < 0.0 || !self.t_f.is_finite() {
            return Err(McError::BadStep { dt: self.dt, t_f: self.t_f });
        }
        if self.t_f > 0.0 && self.dt > self.t_f {
            return Err(McError::BadStep { dt: self.dt, t_f: self.t_f });
        }
        if self.t_f > 1.5 + 1e-12 && !self.allow_long_horizon {
            return Err(McError::HorizonGuard { t_f: self.t_f });
        }
        let steps = (self.t_f / self.dt).round();
        if (steps * self.dt - self.t_f).abs() > 1e-9 * self.t_f.max(1.0) {
            return Err(McError::NonIntegralHorizon { t_f: self.t_f, dt: self.dt });
        }
        if self.n == 0 {
            return Err(McError::NoSamples);
        }
        Ok(())
    }

    /// Integration step count; `validate` guarantees exactness.
    pub fn steps(&self) -> usize {
        (self.t_f / self.dt).round() as usize
    }
}

/// One completed trajectory: where it started on the trim table and
/// where it ended up in envelope coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub id: u64,
    pub direction: Direction,
    pub h0: f64,
    pub mach0: f64,
    pub endpoint: EnvelopeCoords,
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    pub direction: Direction,
    pub config: SamplerConfig,
    pub samples: Vec<TrajectorySample>,
    /// Trajectories that left the model domain or failed to integrate
    /// and were re-drawn.
    pub discarded: usize,
}

/// Sidecar description of a sample run, for the metadata file written
/// next to the CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleSetMeta {
    pub direction: String,
    pub config: SamplerConfig,
    pub completed: usize,
    pub discarded: usize,
}

impl SampleSet {
    pub fn meta(&self) -> SampleSetMeta {
        SampleSetMeta {
            direction: self.direction.tag().to_string(),
            config: self.config.clone(),
            completed: self.samples.len(),
            discarded: self.discarded,
        }
    }

    /// Endpoint matrix in EnvelopeCoords order, one row per sample.
    pub fn endpoints(&self) -> Vec<[f64; EnvelopeCoords::DIM]> {
        self.samples.iter().map(|s| s.endpoint.to_array()).collect()
    }
}

/// Exploration weights: independent draws, one per acceleration axis,
/// resampled every integration step.
pub fn sample_exploration_weights<R: Rng>(
    rng: &mut R,
    dim: usize,
    dist: WeightDistribution,
) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| match dist {
        WeightDistribution::Normal => rng.sample(StandardNormal),
        WeightDistribution::UniformSign => {
            if rng.gen::<bool>() {
                1.0
            } else {
                -1.0
            }
        }
    })
}

/// Extremal control increment for one step: per input slot, exactly the
/// upper admissible increment when W resolved through the effectiveness
/// column is negative, exactly the lower one when positive (upper on the
/// measure-zero tie). Masked slots get zero.
pub fn sample_extreme_control<S: ControlAffineSystem + ?Sized>(
    w: &DVector<f64>,
    sys: &S,
    x: &DVector<f64>,
    u0: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, ModelError> {
    let eff = sys.exploration_effectiveness(x, u0)?;
    let limits = sys.limits();
    let mask = sys.exploration_mask();
    let mut inc = DVector::zeros(sys.input_dim());
    for i in 0..sys.input_dim() {
        if !mask[i] {
            continue;
        }
        let (lo, hi) = admissible_increment_bounds(&limits[i], u0[i], dt);
        let s = w.dot(&eff.column(i));
        inc[i] = if s > 0.0 { lo } else { hi };
    }
    Ok(inc)
}

/// Roll one bang-bang trajectory out to the horizon and return the final
/// state. Any model error along the way (domain exit, non-finite values)
/// bubbles up so the caller can discard the trajectory.
pub fn simulate_trajectory<S: ControlAffineSystem + ?Sized, R: Rng>(
    sys: &S,
    x0: &DVector<f64>,
    u0: &DVector<f64>,
    config: &SamplerConfig,
    direction: Direction,
    rng: &mut R,
) -> Result<DVector<f64>, ModelError> {
    let mut x = x0.clone();
    let mut u = u0.clone();
    for _ in 0..config.steps() {
        let w = sample_exploration_weights(rng, sys.exploration_dim(), config.w_dist);
        let inc = sample_extreme_control(&w, sys, &x, &u, config.dt)?;
        u += inc;
        x = integrate_step(sys, &x, &u, config.dt, direction)?;
    }
    Ok(x)
}

/// Run the full sample set for one direction. Trajectories get
/// independent RNG streams derived from the master seed, so the result
/// is a pure function of (model, trimset, config, direction): equal
/// seeds give bitwise-equal sample sets regardless of thread schedule.
/// Discarded trajectories are re-drawn on fresh streams; a discard rate
/// above 20% aborts with an error instead of quietly degrading the
/// density estimate.
pub fn run_monte_carlo(
    model: &AircraftModel,
    trimset: &TrimSet,
    config: &SamplerConfig,
    direction: Direction,
) -> Result<SampleSet, McError> {
    config.validate()?;
    let n = config.n as u64;
    let results: Vec<Result<(TrajectorySample, usize), McError>> = (0..n)
        .into_par_iter()
        .map(|id| {
            let mut discards = 0usize;
            for attempt in 0..MAX_ATTEMPTS {
                let stream = id + attempt * n;
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ stream);
                let (h0, mach0) = trimset.sample_hm(&mut rng);
                let (x0, u0) = trimset.state_controls(model, h0, mach0);
                let rollout = simulate_trajectory(
                    model,
                    &x0.to_dvector(),
                    &u0.to_dvector(),
                    config,
                    direction,
                    &mut rng,
                );
                let endpoint = rollout
                    .and_then(|xf| state_to_envelope_coords(&StateVector::from_dvector(&xf)));
                match endpoint {
                    Ok(endpoint) => {
                        return Ok((
                            TrajectorySample { id, direction, h0, mach0, endpoint },
                            discards,
                        ))
                    }
                    Err(_) => discards += 1,
                }
            }
            Err(McError::RetryBudget { id })
        })
        .collect();

    let mut samples = Vec::with_capacity(config.n);
    let mut discarded = 0usize;
    for r in results {
        let (s, d) = r?;
        samples.push(s);
        discarded += d;
    }
    samples.sort_by_key(|s| s.id);
    let attempted = config.n + discarded;
    if 5 * discarded > attempted {
        return Err(McError::ExcessiveDiscards { discarded, attempted });
    }
    Ok(SampleSet { direction, config: config.clone(), samples, discarded })
}

fn fmt17(v: f64) -> String {
    format!("{:.16e}", v)
}

/// CSV rows of endpoints with their trim origins; 17 significant digits
/// so a reload is bit-exact.
pub fn sample_set_to_csv(set: &SampleSet) -> String {
    let mut out = String::from("id,direction,h0,mach0,p,q,r,alpha,beta,vg,h\n");
    for s in &set.samples {
        let e = s.endpoint.to_array();
        let mut row = vec![s.id.to_string(), s.direction.tag().to_string()];
        row.push(fmt17(s.h0));
        row.push(fmt17(s.mach0));
        row.extend(e.iter().map(|v| fmt17(*v)));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parse a sample CSV back into samples plus their shared direction.
pub fn sample_set_from_csv(text: &str) -> Result<(Direction, Vec<TrajectorySample>), McError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| McError::Parse { line: 1, msg: "empty file".into() })?;
    if header.trim() != "id,direction,h0,mach0,p,q,r,alpha,beta,vg,h" {
        return Err(McError::Parse { line: 1, msg: format!("unexpected header: {header}") });
    }
    let mut direction: Option<Direction> = None;
    let mut samples = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 11 {
            return Err(McError::Parse {
                line: lineno,
                msg: format!("expected 11 fields, got {}", fields.len()),
            });
        }
        let id: u64 = fields[0]
            .parse()
            .map_err(|e| McError::Parse { line: lineno, msg: format!("id: {e}") })?;
        let dir = match fields[1] {
            "fwd" => Direction::Forward,
            "bwd" => Direction::Backward,
            other => {
                return Err(McError::Parse {
                    line: lineno,
                    msg: format!("unknown direction tag {other:?}"),
                })
            }
        };
        match direction {
            None => direction = Some(dir),
            Some(d) if d == dir => {}
            Some(_) => {
                return Err(McError::Parse {
                    line: lineno,
                    msg: "mixed directions in one sample file".into(),
                })
            }
        }
        let mut vals = [0.0f64; 9];
        for (k, f) in fields[2..].iter().enumerate() {
            vals[k] = f
                .parse()
                .map_err(|e| McError::Parse { line: lineno, msg: format!("field {k}: {e}") })?;
        }
        let coords: [f64; EnvelopeCoords::DIM] = vals[2..9].try_into().unwrap();
        samples.push(TrajectorySample {
            id,
            direction: dir,
            h0: vals[0],
            mach0: vals[1],
            endpoint: EnvelopeCoords::from_array(&coords),
        });
    }
    let direction = direction
        .ok_or_else(|| McError::Parse { line: 2, msg: "no sample rows".into() })?;
    Ok((direction, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Pendulum2d;
    use crate::trim::{build_trim_set, TrimConfig};

    fn fighter_trimset() -> (AircraftModel, TrimSet) {
        let m = AircraftModel::builtin_generic_fighter();
        let ts =
            build_trim_set(&m, (18000.0, 22000.0), (0.75, 0.95), 3, 5, &TrimConfig::default())
                .unwrap();
        (m, ts)
    }

    #[test]
    fn weight_draws_match_distribution_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sum = [0.0f64; 6];
        let mut sumsq = [0.0f64; 6];
        let mut pos = [0usize; 6];
        for _ in 0..n {
            let w = sample_exploration_weights(&mut rng, 6, WeightDistribution::Normal);
            for j in 0..6 {
                sum[j] += w[j];
                sumsq[j] += w[j] * w[j];
                if w[j] > 0.0 {
                    pos[j] += 1;
                }
            }
        }
        for j in 0..6 {
            let mean = sum[j] / n as f64;
            let var = sumsq[j] / n as f64 - mean * mean;
            assert!(mean.abs() <= 0.02, "component {j} mean {mean}");
            assert!((0.97..=1.03).contains(&var), "component {j} variance {var}");
            let freq = pos[j] as f64 / n as f64;
            assert!((freq - 0.5).abs() <= 0.01, "component {j} sign frequency {freq}");
        }
    }

    #[test]
    fn uniform_sign_weights_are_pure_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w = sample_exploration_weights(&mut rng, 4, WeightDistribution::UniformSign);
            assert!(w.iter().all(|v| *v == 1.0 || *v == -1.0));
        }
    }

    #[test]
    fn extreme_rule_picks_exact_bounds() {
        // One-effector pendulum: effectiveness column is (1/I) > 0, so
        // the increment sign is decided by W alone.
        let p = Pendulum2d::reference();
        let x = DVector::from_vec(vec![0.1, 0.0]);
        let u = DVector::from_vec(vec![0.3]);
        let dt = 0.01;
        let (lo, hi) = admissible_increment_bounds(&p.limits()[0], u[0], dt);

        let w_neg = DVector::from_vec(vec![-0.5]);
        let inc = sample_extreme_control(&w_neg, &p, &x, &u, dt).unwrap();
        assert_eq!(inc[0], hi);

        let w_pos = DVector::from_vec(vec![0.3]);
        let inc = sample_extreme_control(&w_pos, &p, &x, &u, dt).unwrap();
        assert_eq!(inc[0], lo);

        let w_zero = DVector::from_vec(vec![0.0]);
        let inc = sample_extreme_control(&w_zero, &p, &x, &u, dt).unwrap();
        assert_eq!(inc[0], hi, "tie breaks to the upper bound");
    }

    #[test]
    fn increments_are_bang_bang_on_the_fighter() {
        let (m, ts) = fighter_trimset();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let limits = ControlAffineSystem::limits(&m);
        let mask = m.exploration_mask();
        let (x0, u0) = ts.sample_state(&m, &mut rng);
        let mut x = x0.to_dvector();
        let mut u = u0.to_dvector();
        let dt = 0.01;
        for _ in 0..40 {
            let w = sample_exploration_weights(&mut rng, 6, WeightDistribution::Normal);
            let inc = sample_extreme_control(&w, &m, &x, &u, dt).unwrap();
            for i in 0..m.input_dim() {
                if !mask[i] {
                    assert_eq!(inc[i], 0.0);
                    continue;
                }
                let (lo, hi) = admissible_increment_bounds(&limits[i], u[i], dt);
                assert!(
                    inc[i] == lo || inc[i] == hi,
                    "slot {i}: increment {} is interior to [{lo}, {hi}]",
                    inc[i]
                );
            }
            u += inc;
            x = integrate_step(&m, &x, &u, dt, Direction::Forward).unwrap();
        }
    }

    #[test]
    fn zero_horizon_returns_trim_point() {
        let (m, ts) = fighter_trimset();
        let config = SamplerConfig { t_f: 0.0, n: 8, ..SamplerConfig::default() };
        let set = run_monte_carlo(&m, &ts, &config, Direction::Forward).unwrap();
        assert_eq!(set.samples.len(), 8);
        for s in &set.samples {
            // Endpoint is the initial trim state expressed in envelope
            // coordinates: level flight at the drawn origin.
            assert_eq!(s.endpoint.h, s.h0);
            assert_eq!(s.endpoint.p, 0.0);
            assert_eq!(s.endpoint.beta, 0.0);
        }
    }

    #[test]
    fn zero_limits_degenerate_to_drift() {
        let (m, ts) = fighter_trimset();
        let mut frozen = m.clone();
        for l in frozen.limits.iter_mut() {
            l.rate_min = 0.0;
            l.rate_max = 0.0;
        }
        frozen.thrust.rate_limit = Some(0.0);
        let config = SamplerConfig { t_f: 0.5, n: 4, ..SamplerConfig::default() };
        let set = run_monte_carlo(&frozen, &ts, &config, Direction::Forward).unwrap();

        for s in &set.samples {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ s.id);
            let (h0, mach0) = ts.sample_hm(&mut rng);
            let (x0, u0) = ts.state_controls(&frozen, h0, mach0);
            let mut x = x0.to_dvector();
            let u = u0.to_dvector();
            for _ in 0..config.steps() {
                x = integrate_step(&frozen, &x, &u, config.dt, Direction::Forward).unwrap();
            }
            let drift = state_to_envelope_coords(&StateVector::from_dvector(&x)).unwrap();
            assert_eq!(s.endpoint.to_array(), drift.to_array());
        }
    }

    #[test]
    fn equal_seeds_give_bitwise_equal_sets() {
        let (m, ts) = fighter_trimset();
        let config = SamplerConfig { t_f: 0.3, n: 64, seed: 42, ..SamplerConfig::default() };
        let a = run_monte_carlo(&m, &ts, &config, Direction::Forward).unwrap();
        let b = run_monte_carlo(&m, &ts, &config, Direction::Forward).unwrap();
        assert_eq!(sample_set_to_csv(&a), sample_set_to_csv(&b));
        let c = run_monte_carlo(&m, &ts, &config, Direction::Backward).unwrap();
        assert_ne!(sample_set_to_csv(&a), sample_set_to_csv(&c));
    }

    #[test]
    fn longer_horizon_does_not_shrink_the_cloud() {
        let (m, ts) = fighter_trimset();
        let short = SamplerConfig { t_f: 0.75, n: 300, seed: 5, ..SamplerConfig::default() };
        let long = SamplerConfig { t_f: 1.5, n: 300, seed: 5, ..SamplerConfig::default() };
        let a = run_monte_carlo(&m, &ts, &short, Direction::Forward).unwrap();
        let b = run_monte_carlo(&m, &ts, &long, Direction::Forward).unwrap();
        let range = |set: &SampleSet, j: usize| {
            let vals: Vec<f64> = set.endpoints().iter().map(|e| e[j]).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        };
        for j in 0..EnvelopeCoords::DIM {
            let (ra, rb) = (range(&a, j), range(&b, j));
            assert!(
                rb >= ra * 0.95,
                "axis {j}: range shrank from {ra} to {rb} when doubling the horizon"
            );
        }
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let (m, ts) = fighter_trimset();
        let config = SamplerConfig { t_f: 0.2, n: 16, seed: 9, ..SamplerConfig::default() };
        let set = run_monte_carlo(&m, &ts, &config, Direction::Backward).unwrap();
        let csv = sample_set_to_csv(&set);
        let (dir, samples) = sample_set_from_csv(&csv).unwrap();
        assert_eq!(dir, Direction::Backward);
        assert_eq!(samples.len(), set.samples.len());
        for (a, b) in samples.iter().zip(set.samples.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn horizon_guard_blocks_long_runs() {
        let config = SamplerConfig { t_f: 2.0, ..SamplerConfig::default() };
        assert!(matches!(config.validate(), Err(McError::HorizonGuard { .. })));
        let config = SamplerConfig { t_f: 2.0, allow_long_horizon: true, ..SamplerConfig::default() };
        assert!(config.validate().is_ok());
        let config = SamplerConfig { t_f: 0.105, dt: 0.01, ..SamplerConfig::default() };
        assert!(matches!(config.validate(), Err(McError::NonIntegralHorizon { .. })));
    }

    #[test]
    fn cramped_domain_trips_the_discard_gate() {
        let (m, ts) = fighter_trimset();
        let mut cramped = m.clone();
        // Barely wider than the trim alpha band: extreme pitch inputs
        // leave it within a few steps, so nearly everything discards.
        cramped.domain.alpha_abs_max = 0.08;
        let config = SamplerConfig { t_f: 1.0, n: 40, ..SamplerConfig::default() };
        let err = run_monte_carlo(&cramped, &ts, &config, Direction::Forward).unwrap_err();
        assert!(matches!(
            err,
            McError::ExcessiveDiscards { .. } | McError::RetryBudget { .. }
        ));
    }
}
