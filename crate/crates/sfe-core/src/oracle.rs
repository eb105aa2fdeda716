//! Exhaustive bang-bang reachability on small systems.
//!
//! The Monte Carlo estimator explores with extreme controls that may
//! switch every integration step. On systems with one or two states
//! the same control class can be enumerated outright on a coarser
//! switching grid, giving a ground-truth point cloud to check the
//! sampled envelope against. Each control input sits at one of its two
//! levels over each of `n_s` equal intervals; every combination is
//! integrated and every interval-boundary state is collected, which
//! realizes the "reached at any time up to the horizon" part of the
//! reachable-set definition on the switch grid.
//!
//! The oracle ignores slew limits (levels are the position extremes),
//! so its control class contains the rate-limited one the sampler
//! uses; the finite switch grid cuts the other way, and that gap is
//! what the dilation policy of `estimate_switching_slack` covers.

use crate::dynamics::{integrate_step, ControlAffineSystem, Direction, ModelError};
use nalgebra::DVector;
use rayon::prelude::*;
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("enumeration needs {needed} control sequences, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u64 },
    #[error("bad oracle configuration: {0}")]
    BadConfig(&'static str),
    #[error("no {0} given")]
    Empty(&'static str),
    #[error("point has {got} coordinates, cloud is {expect}-dimensional")]
    DimensionMismatch { got: usize, expect: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const DEFAULT_SWITCH_INTERVALS: usize = 8;
pub const DEFAULT_SEQUENCE_BUDGET: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub t_f: f64,
    /// Equal switch intervals over the horizon.
    pub n_s: usize,
    /// RK4 steps per switch interval.
    pub substeps: usize,
    /// Cap on the number of enumerated control sequences.
    pub budget: u64,
    pub direction: Direction,
    /// Per-input (low, high) levels; the position limits if absent.
    pub levels: Option<Vec<(f64, f64)>>,
}

impl OracleConfig {
    /// Eight switch intervals, substeps sized to keep the integration
    /// step at or below 0.01 s, forward time, default budget.
    pub fn new(t_f: f64) -> Self {
        let n_s = DEFAULT_SWITCH_INTERVALS;
        let substeps = ((t_f / n_s as f64) / 0.01).ceil().max(1.0) as usize;
        OracleConfig {
            t_f,
            n_s,
            substeps,
            budget: DEFAULT_SEQUENCE_BUDGET,
            direction: Direction::Forward,
            levels: None,
        }
    }
}

/// Deduplicated reachable states, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-dimension population standard deviation, with flat
    /// dimensions mapped to a unit scale so normalized distances stay
    /// finite.
    pub fn per_dim_scales(&self) -> Vec<f64> {
        let n = self.points.len().max(1) as f64;
        (0..self.dim)
            .map(|j| {
                let mean = self.points.iter().map(|p| p[j]).sum::<f64>() / n;
                let var =
                    self.points.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / n;
                let s = var.sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect()
    }
}

struct Enumeration<'a> {
    n_s: usize,
    substeps: usize,
    dt_sub: f64,
    direction: Direction,
    branches: usize,
    par_depth: usize,
    u0: &'a DVector<f64>,
    explored: &'a [usize],
    levels: &'a [(f64, f64)],
}

impl Enumeration<'_> {
    fn branch_control(&self, code: usize) -> DVector<f64> {
        let mut u = self.u0.clone();
        for (bit, &slot) in self.explored.iter().enumerate() {
            u[slot] = if (code >> bit) & 1 == 0 {
                self.levels[slot].0
            } else {
                self.levels[slot].1
            };
        }
        u
    }
}

fn explore<S: ControlAffineSystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    level: usize,
    ctx: &Enumeration,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut points = vec![x.as_slice().to_vec()];
    if level == ctx.n_s {
        return Ok(points);
    }
    let advance = |code: usize| -> Result<Vec<Vec<f64>>, ModelError> {
        let u = ctx.branch_control(code);
        let mut xs = x.clone();
        for _ in 0..ctx.substeps {
            xs = integrate_step(sys, &xs, &u, ctx.dt_sub, ctx.direction)?;
        }
        explore(sys, &xs, level + 1, ctx)
    };
    // Shallow levels fan out across threads; the indexed collect keeps
    // branch order, so the output is schedule-independent.
    let children: Vec<Vec<Vec<f64>>> = if level < ctx.par_depth {
        (0..ctx.branches).into_par_iter().map(advance).collect::<Result<_, _>>()?
    } else {
        (0..ctx.branches).map(advance).collect::<Result<_, _>>()?
    };
    for c in children {
        points.extend(c);
    }
    Ok(points)
}

/// Enumerate every piecewise-extreme control sequence from every given
/// initial state and collect all interval-boundary states, first
/// occurrence kept when branches coincide bitwise.
pub fn brute_force_reachable<S: ControlAffineSystem + ?Sized>(
    sys: &S,
    initial_states: &[DVector<f64>],
    u0: &DVector<f64>,
    config: &OracleConfig,
) -> Result<PointCloud, OracleError> {
    if initial_states.is_empty() {
        return Err(OracleError::Empty("initial states"));
    }
    if !(config.t_f > 0.0) || config.n_s == 0 || config.substeps == 0 {
        return Err(OracleError::BadConfig("horizon, intervals and substeps must be positive"));
    }
    let m = sys.input_dim();
    if u0.len() != m {
        return Err(OracleError::BadConfig("u0 length differs from the input dimension"));
    }
    for x0 in initial_states {
        if x0.len() != sys.state_dim() {
            return Err(OracleError::BadConfig("initial state length differs from the state dimension"));
        }
    }
    let mask = sys.exploration_mask();
    let explored: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
    let levels: Vec<(f64, f64)> = match &config.levels {
        Some(l) => {
            if l.len() != m {
                return Err(OracleError::BadConfig("levels length differs from the input dimension"));
            }
            l.clone()
        }
        None => sys.limits().iter().map(|l| (l.delta_min, l.delta_max)).collect(),
    };

    // Enumeration size per initial state is branches^n_s with
    // branches = 2^m_eff.
    let bits = config.n_s.saturating_mul(explored.len());
    let needed = if bits >= 128 { u128::MAX } else { 1u128 << bits };
    if needed > config.budget as u128 {
        return Err(OracleError::BudgetExceeded { needed, budget: config.budget });
    }

    let branches = 1usize << explored.len();
    let mut par_depth = 0usize;
    let mut fanout = 1usize;
    while par_depth < config.n_s && fanout < 256 {
        fanout = fanout.saturating_mul(branches);
        par_depth += 1;
    }
    let ctx = Enumeration {
        n_s: config.n_s,
        substeps: config.substeps,
        dt_sub: config.t_f / config.n_s as f64 / config.substeps as f64,
        direction: config.direction,
        branches,
        par_depth,
        u0,
        explored: &explored,
        levels: &levels,
    };

    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut points = Vec::new();
    for x0 in initial_states {
        for p in explore(sys, x0, 0, &ctx)? {
            let key: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
            if seen.insert(key) {
                points.push(p);
            }
        }
    }
    Ok(PointCloud { dim: sys.state_dim(), points })
}

/// Integrate one explicit control sequence on the oracle's grid and
/// return the interval-boundary states, initial state included. When
/// the sequence's values match an enumeration branch, every returned
/// state lands in the oracle cloud bitwise.
pub fn simulate_bang_bang<S: ControlAffineSystem + ?Sized>(
    sys: &S,
    x0: &DVector<f64>,
    sequence: &[DVector<f64>],
    config: &OracleConfig,
) -> Result<Vec<DVector<f64>>, OracleError> {
    if sequence.len() != config.n_s {
        return Err(OracleError::BadConfig("sequence length differs from the interval count"));
    }
    let dt_sub = config.t_f / config.n_s as f64 / config.substeps as f64;
    let mut out = Vec::with_capacity(config.n_s + 1);
    out.push(x0.clone());
    let mut x = x0.clone();
    for u in sequence {
        for _ in 0..config.substeps {
            x = integrate_step(sys, &x, u, dt_sub, config.direction)?;
        }
        out.push(x.clone());
    }
    Ok(out)
}

fn nearest_normalized_distance(p: &[f64], cloud: &PointCloud, scales: &[f64]) -> f64 {
    let mut best2 = f64::INFINITY;
    for q in &cloud.points {
        let mut d2 = 0.0;
        for j in 0..p.len() {
            let e = (p[j] - q[j]) / scales[j];
            d2 += e * e;
            if d2 >= best2 {
                break;
            }
        }
        if d2 < best2 {
            best2 = d2;
        }
    }
    best2.sqrt()
}

/// Fraction of sample points whose nearest cloud point lies within
/// `dilation`, distances taken in the cloud's per-dimension scales.
/// Monotone non-decreasing in the dilation.
pub fn containment_fraction(
    samples: &[Vec<f64>],
    cloud: &PointCloud,
    dilation: f64,
) -> Result<f64, OracleError> {
    if samples.is_empty() {
        return Err(OracleError::Empty("samples"));
    }
    if cloud.is_empty() {
        return Err(OracleError::Empty("cloud points"));
    }
    if let Some(s) = samples.iter().find(|s| s.len() != cloud.dim) {
        return Err(OracleError::DimensionMismatch { got: s.len(), expect: cloud.dim });
    }
    let scales = cloud.per_dim_scales();
    let inside = samples
        .par_iter()
        .filter(|s| nearest_normalized_distance(s, cloud, &scales) <= dilation)
        .count();
    Ok(inside as f64 / samples.len() as f64)
}

/// Cloud growth from halving the switch count: the largest normalized
/// nearest-neighbor distance from a fine-grid point to the coarse-grid
/// cloud, with the coarse run taking twice the substeps so both use the
/// same integration step. Growth shrinks geometrically under further
/// refinement for smooth dynamics, so twice this value is the dilation
/// used when checking sampled endpoints against the cloud.
pub fn estimate_switching_slack<S: ControlAffineSystem + ?Sized>(
    sys: &S,
    initial_states: &[DVector<f64>],
    u0: &DVector<f64>,
    config: &OracleConfig,
) -> Result<f64, OracleError> {
    if config.n_s < 2 || config.n_s % 2 != 0 {
        return Err(OracleError::BadConfig("slack estimation needs an even interval count"));
    }
    let fine = brute_force_reachable(sys, initial_states, u0, config)?;
    let coarse_cfg = OracleConfig {
        n_s: config.n_s / 2,
        substeps: config.substeps * 2,
        ..config.clone()
    };
    let coarse = brute_force_reachable(sys, initial_states, u0, &coarse_cfg)?;
    let scales = fine.per_dim_scales();
    let growth = fine
        .points
        .par_iter()
        .map(|p| nearest_normalized_distance(p, &coarse, &scales))
        .reduce(|| 0.0, f64::max);
    Ok(growth)
}

/// One row per point, 17 significant digits. `names` labels the columns
/// when it matches the dimension; positional names otherwise.
pub fn cloud_to_csv(cloud: &PointCloud, names: &[&str]) -> String {
    let header: Vec<String> = if names.len() == cloud.dim {
        names.iter().map(|s| s.to_string()).collect()
    } else {
        (0..cloud.dim).map(|j| format!("x{j}")).collect()
    };
    let mut out = header.join(",");
    out.push('\n');
    for p in &cloud.points {
        let row: Vec<String> = p.iter().map(|v| format!("{:.16e}", v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{EffectorLimits, Pendulum2d};
    use crate::mc::{simulate_trajectory, SamplerConfig, WeightDistribution};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct DoubleIntegrator;

    impl ControlAffineSystem for DoubleIntegrator {
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
            vec![EffectorLimits { delta_min: -1.0, delta_max: 1.0, rate_min: 1e9, rate_max: 1e9 }]
        }
        fn derivative(
            &self,
            x: &DVector<f64>,
            u: &DVector<f64>,
        ) -> Result<DVector<f64>, ModelError> {
            Ok(DVector::from_vec(vec![x[1], u[0]]))
        }
        fn exploration_effectiveness(
            &self,
            _x: &DVector<f64>,
            _u: &DVector<f64>,
        ) -> Result<DMatrix<f64>, ModelError> {
            Ok(DMatrix::from_element(1, 1, 1.0))
        }
    }

    #[test]
    fn single_interval_gives_two_branches_plus_the_start() {
        let p = Pendulum2d::reference();
        let mut cfg = OracleConfig::new(0.5);
        cfg.n_s = 1;
        cfg.substeps = 50;
        let cloud =
            brute_force_reachable(&p, &[p.trim_state()], &p.trim_control(), &cfg).unwrap();
        assert_eq!(cloud.len(), 3);
        assert_ne!(cloud.points[1], cloud.points[2]);
        // The start itself is in the cloud.
        assert_eq!(cloud.points[0], vec![0.0, 0.0]);
    }

    #[test]
    fn zero_authority_collapses_to_the_drift_trajectory() {
        let p = Pendulum2d::reference();
        let x0 = DVector::from_vec(vec![0.3, 0.0]);
        let mut cfg = OracleConfig::new(1.0);
        cfg.n_s = 4;
        cfg.substeps = 25;
        cfg.levels = Some(vec![(0.0, 0.0)]);
        let cloud = brute_force_reachable(&p, &[x0.clone()], &p.trim_control(), &cfg).unwrap();
        assert_eq!(cloud.len(), cfg.n_s + 1);
        let drift = simulate_bang_bang(
            &p,
            &x0,
            &vec![DVector::zeros(1); cfg.n_s],
            &cfg,
        )
        .unwrap();
        for (got, want) in cloud.points.iter().zip(drift.iter()) {
            assert_eq!(got.as_slice(), want.as_slice());
        }
    }

    #[test]
    fn double_integrator_reaches_half_at_unit_horizon() {
        let sys = DoubleIntegrator;
        let mut cfg = OracleConfig::new(1.0);
        cfg.n_s = 4;
        cfg.substeps = 25;
        let cloud =
            brute_force_reachable(&sys, &[DVector::zeros(2)], &DVector::zeros(1), &cfg).unwrap();
        let max_pos = cloud.points.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        // Bang at +1 for the whole horizon: x = t^2 / 2.
        assert_relative_eq!(max_pos, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn aligned_bang_bang_states_land_in_the_cloud_bitwise() {
        let p = Pendulum2d::reference();
        let mut cfg = OracleConfig::new(1.0);
        cfg.n_s = 4;
        cfg.substeps = 25;
        let cloud =
            brute_force_reachable(&p, &[p.trim_state()], &p.trim_control(), &cfg).unwrap();
        let tau = |v: f64| DVector::from_vec(vec![v]);
        let seq = vec![tau(2.5), tau(-2.5), tau(-2.5), tau(2.5)];
        let states = simulate_bang_bang(&p, &p.trim_state(), &seq, &cfg).unwrap();
        for s in &states {
            assert!(
                cloud.points.iter().any(|q| q.as_slice() == s.as_slice()),
                "boundary state missing from the cloud"
            );
        }
        let as_rows: Vec<Vec<f64>> = states.iter().map(|s| s.as_slice().to_vec()).collect();
        assert_eq!(containment_fraction(&as_rows, &cloud, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn containment_rejects_empties_and_spots_outliers() {
        let cloud = PointCloud { dim: 2, points: vec![vec![0.0, 0.0], vec![1.0, 0.0]] };
        assert!(matches!(
            containment_fraction(&[], &cloud, 1.0),
            Err(OracleError::Empty("samples"))
        ));
        let empty = PointCloud { dim: 2, points: vec![] };
        assert!(matches!(
            containment_fraction(&[vec![0.0, 0.0]], &empty, 1.0),
            Err(OracleError::Empty(_))
        ));
        assert!(matches!(
            containment_fraction(&[vec![0.0]], &cloud, 1.0),
            Err(OracleError::DimensionMismatch { got: 1, expect: 2 })
        ));
        let far = vec![vec![50.0, 50.0]];
        assert_eq!(containment_fraction(&far, &cloud, 1e-9).unwrap(), 0.0);
    }

    #[test]
    fn containment_is_monotone_in_dilation() {
        let p = Pendulum2d::reference();
        let mut cfg = OracleConfig::new(1.0);
        cfg.n_s = 4;
        cfg.substeps = 25;
        let cloud =
            brute_force_reachable(&p, &[p.trim_state()], &p.trim_control(), &cfg).unwrap();
        let samples: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let t = i as f64 / 39.0;
                vec![0.4 * (6.0 * t).sin(), 1.2 * (9.0 * t).cos()]
            })
            .collect();
        let mut prev = 0.0;
        for dil in [0.0, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0] {
            let f = containment_fraction(&samples, &cloud, dil).unwrap();
            assert!(f >= prev, "fraction dropped from {prev} to {f} at dilation {dil}");
            prev = f;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn budget_guard_trips_before_enumerating() {
        let p = Pendulum2d::reference();
        let mut cfg = OracleConfig::new(1.5);
        cfg.n_s = 25;
        assert!(matches!(
            brute_force_reachable(&p, &[p.trim_state()], &p.trim_control(), &cfg),
            Err(OracleError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn coarse_cloud_is_a_bitwise_subset_of_the_fine_cloud() {
        let p = Pendulum2d::reference();
        let mut fine_cfg = OracleConfig::new(1.0);
        fine_cfg.n_s = 4;
        fine_cfg.substeps = 25;
        let fine =
            brute_force_reachable(&p, &[p.trim_state()], &p.trim_control(), &fine_cfg).unwrap();
        let coarse_cfg =
            OracleConfig { n_s: 2, substeps: 50, ..fine_cfg.clone() };
        let coarse =
            brute_force_reachable(&p, &[p.trim_state()], &p.trim_control(), &coarse_cfg).unwrap();
        for q in &coarse.points {
            assert!(fine.points.iter().any(|f| f == q));
        }
        let slack =
            estimate_switching_slack(&p, &[p.trim_state()], &p.trim_control(), &fine_cfg)
                .unwrap();
        assert!(slack.is_finite() && slack > 0.0);
    }

    #[test]
    fn sampled_pendulum_endpoints_stay_inside_the_dilated_cloud() {
        let p = Pendulum2d::reference();
        let cfg = OracleConfig::new(1.5);
        let x0 = [p.trim_state()];
        let cloud = brute_force_reachable(&p, &x0, &p.trim_control(), &cfg).unwrap();
        let slack = estimate_switching_slack(&p, &x0, &p.trim_control(), &cfg).unwrap();

        let sampler = SamplerConfig {
            t_f: 1.5,
            dt: 0.01,
            n: 300,
            seed: 11,
            w_dist: WeightDistribution::Normal,
            allow_long_horizon: false,
        };
        let samples: Vec<Vec<f64>> = (0..sampler.n as u64)
            .map(|id| {
                let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed ^ id);
                simulate_trajectory(
                    &p,
                    &p.trim_state(),
                    &p.trim_control(),
                    &sampler,
                    Direction::Forward,
                    &mut rng,
                )
                .unwrap()
                .as_slice()
                .to_vec()
            })
            .collect();
        let frac = containment_fraction(&samples, &cloud, 2.0 * slack).unwrap();
        assert_eq!(frac, 1.0, "containment {frac} below 1 at dilation {}", 2.0 * slack);
    }

    #[test]
    fn csv_export_has_one_labeled_row_per_point() {
        let cloud = PointCloud { dim: 2, points: vec![vec![0.5, -1.0], vec![0.25, 2.0]] };
        let csv = cloud_to_csv(&cloud, &["theta", "omega"]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "theta,omega");
        assert!(lines[1].starts_with("5.0000000000000000e-1"));
        let fallback = cloud_to_csv(&cloud, &[]);
        assert!(fallback.starts_with("x0,x1\n"));
    }
}
