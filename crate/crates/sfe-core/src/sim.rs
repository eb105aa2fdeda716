//! Closed-loop scenario execution: maneuver command generation,
//! prefiltering, fixed-step simulation with the two-loop controller,
//! and CSV logging of every quantity the envelope-protection analysis
//! needs.

use crate::controller::{
    controller_step, ControllerConfig, ControllerError, ControllerState, FepMode, StepInput,
};
use crate::dynamics::{
    state_to_envelope_coords, AircraftModel, ControlVector, Direction, EnvelopeCoords,
    StateVector,
};
use crate::envelope::{EnvelopeDatabase, GridSpec};
use crate::trim::{solve_trim, TrimConfig, TrimError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("fep mode {0} needs an envelope database")]
    MissingDatabase(&'static str),
    #[error("maneuver segments on channel {channel:?} overlap at t = {t}")]
    OverlappingSegments { channel: CommandChannel, t: f64 },
    #[error("segment duration must be positive, got {0}")]
    BadSegment(f64),
    #[error("simulation horizon and control period must be positive")]
    BadTiming,
    #[error(transparent)]
    Trim(#[from] TrimError),
    #[error("CSV parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// Command channels a maneuver can drive. Values are offsets from the
/// trim reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandChannel {
    Phi,
    Alpha,
    Beta,
}

/// One triangular command segment: linear rise from zero to `peak` over
/// the first half of `duration`, linear fall back to zero over the
/// second half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub channel: CommandChannel,
    pub start: f64,
    pub duration: f64,
    pub peak: f64,
}

impl Segment {
    fn value(&self, t: f64) -> f64 {
        let tau = t - self.start;
        if tau <= 0.0 || tau >= self.duration {
            return 0.0;
        }
        let half = 0.5 * self.duration;
        if tau <= half {
            self.peak * tau / half
        } else {
            self.peak * (self.duration - tau) / half
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManeuverSpec {
    pub segments: Vec<Segment>,
    /// First-order prefilter cutoff, rad/s.
    pub prefilter_cutoff: f64,
}

pub const DEFAULT_PREFILTER_CUTOFF: f64 = 2.0;

impl ManeuverSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        for s in &self.segments {
            if !(s.duration > 0.0) {
                return Err(SimError::BadSegment(s.duration));
            }
        }
        for ch in [CommandChannel::Phi, CommandChannel::Alpha, CommandChannel::Beta] {
            let mut segs: Vec<&Segment> =
                self.segments.iter().filter(|s| s.channel == ch).collect();
            segs.sort_by(|a, b| a.start.partial_cmp(&b.start).unwrap());
            for w in segs.windows(2) {
                if w[0].start + w[0].duration > w[1].start + 1e-12 {
                    return Err(SimError::OverlappingSegments { channel: ch, t: w[1].start });
                }
            }
        }
        Ok(())
    }

    /// Raw (unfiltered) command offset on one channel.
    pub fn raw_command(&self, channel: CommandChannel, t: f64) -> f64 {
        self.segments
            .iter()
            .filter(|s| s.channel == channel)
            .map(|s| s.value(t))
            .sum()
    }

    /// Copy with every peak multiplied by `factor`; the published
    /// magnitudes target a different airframe, so surrogate scenarios
    /// scale them.
    pub fn scaled(&self, factor: f64) -> ManeuverSpec {
        ManeuverSpec {
            segments: self
                .segments
                .iter()
                .map(|s| Segment { peak: s.peak * factor, ..*s })
                .collect(),
            prefilter_cutoff: self.prefilter_cutoff,
        }
    }
}

/// Triangular alpha command, 4 s base, 90 deg peak.
pub fn maneuver_a() -> ManeuverSpec {
    ManeuverSpec {
        segments: vec![Segment {
            channel: CommandChannel::Alpha,
            start: 0.0,
            duration: 4.0,
            peak: 90.0_f64.to_radians(),
        }],
        prefilter_cutoff: DEFAULT_PREFILTER_CUTOFF,
    }
}

/// Two opposite 50 deg alpha triangles (6 s base each) with the same
/// beta pattern lagging 2 s behind.
pub fn maneuver_b() -> ManeuverSpec {
    let peak = 50.0_f64.to_radians();
    let tri = |channel, start: f64, sign: f64| Segment {
        channel,
        start,
        duration: 6.0,
        peak: sign * peak,
    };
    ManeuverSpec {
        segments: vec![
            tri(CommandChannel::Alpha, 0.0, 1.0),
            tri(CommandChannel::Alpha, 6.0, -1.0),
            tri(CommandChannel::Beta, 2.0, 1.0),
            tri(CommandChannel::Beta, 8.0, -1.0),
        ],
        prefilter_cutoff: DEFAULT_PREFILTER_CUTOFF,
    }
}

/// First-order low-pass reference filter, zero initial state,
/// discretized exactly (zero-order hold).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prefilter {
    cutoff: f64,
    state: f64,
}

impl Prefilter {
    pub fn new(cutoff: f64) -> Self {
        Prefilter { cutoff, state: 0.0 }
    }

    pub fn step(&mut self, u: f64, dt: f64) -> f64 {
        self.state += (1.0 - (-self.cutoff * dt).exp()) * (u - self.state);
        self.state
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub fep_mode: FepMode,
    pub t_end: f64,
    /// Initial trimmed flight condition.
    pub h0: f64,
    pub mach0: f64,
    pub controller: ControllerConfig,
    pub maneuver: ManeuverSpec,
    /// Recorded for provenance; the closed loop itself is deterministic.
    pub seed: u64,
}

impl SimConfig {
    pub fn new(fep_mode: FepMode, maneuver: ManeuverSpec, t_end: f64) -> Self {
        SimConfig {
            fep_mode,
            t_end,
            h0: 20000.0,
            mach0: 0.85,
            controller: ControllerConfig::default(),
            maneuver,
            seed: 0,
        }
    }
}

/// One logged control period.
#[derive(Debug, Clone, PartialEq)]
pub struct SimRow {
    pub t: f64,
    pub state: StateVector,
    pub coords: EnvelopeCoords,
    pub x1_ref: [f64; 3],
    pub x1_fep: [f64; 3],
    pub x1_com: [f64; 3],
    pub x2_ref: [f64; 3],
    pub x2_fep: [f64; 3],
    pub delta_com: Vec<f64>,
    pub t_com: f64,
    pub nu_h: [f64; 3],
    pub m_env: f64,
    pub loc: bool,
    pub diverged: bool,
    pub throttle_held: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub mode: FepMode,
    pub dt: f64,
    pub effector_names: Vec<String>,
    pub rows: Vec<SimRow>,
    /// Any row tripped the loss-of-control flag.
    pub loc_flagged: bool,
    /// Run truncated by a non-finite state or a controller failure.
    pub diverged: bool,
}

/// Per-rate envelope-grid spans the loss-of-control flag compares
/// against. Taken from the run's database grid when one is loaded so
/// paired runs share one flag definition, from the builtin grid
/// otherwise; a rate dim absent from a reduced grid goes unflagged.
struct RateBounds {
    p: Option<(f64, f64)>,
    q: Option<(f64, f64)>,
    r: Option<(f64, f64)>,
}

impl RateBounds {
    fn from_run(db: Option<&EnvelopeDatabase>) -> Self {
        let builtin;
        let dims = match db {
            Some(d) => d.grid.dims(),
            None => {
                builtin = GridSpec::default7();
                builtin.dims()
            }
        };
        let find = |name: &str| {
            dims.iter().find(|d| d.name == name).map(|d| (d.min, d.max))
        };
        RateBounds { p: find("p"), q: find("q"), r: find("r") }
    }
}

/// Loss-of-control flag: any body rate beyond twice its grid span, or
/// alpha outside +-90 deg.
fn loc_flag(coords: &EnvelopeCoords, bounds: &RateBounds) -> bool {
    let over = |v: f64, b: Option<(f64, f64)>| match b {
        Some((lo, hi)) => v < 2.0 * lo || v > 2.0 * hi,
        None => false,
    };
    over(coords.p, bounds.p)
        || over(coords.q, bounds.q)
        || over(coords.r, bounds.r)
        || coords.alpha.abs() > 90.0_f64.to_radians()
}

/// Fixed-step closed-loop run from trimmed flight.
///
/// Logs every control period, including the initial condition. LOC
/// only raises a flag; the run keeps going until the horizon, a
/// non-finite state, or a controller failure (the last two truncate the
/// log with the diverged flag set).
pub fn run_closed_loop(
    model: &AircraftModel,
    cfg: &SimConfig,
    db: Option<&EnvelopeDatabase>,
) -> Result<SimLog, SimError> {
    if cfg.fep_mode != FepMode::None && db.is_none() {
        return Err(SimError::MissingDatabase(cfg.fep_mode.tag()));
    }
    cfg.maneuver.validate()?;
    let dt = cfg.controller.dt;
    if !(dt > 0.0) || !(cfg.t_end > 0.0) {
        return Err(SimError::BadTiming);
    }

    let tp = solve_trim(model, cfg.h0, cfg.mach0, &TrimConfig::default(), None)?;
    let mut x = tp.state();
    let u0 = tp.controls(model);
    let trim_alpha = tp.alpha;
    let v_ref = x.ground_speed();
    let mut st = ControllerState::init(&x, &u0);

    let mut filters = [
        Prefilter::new(cfg.maneuver.prefilter_cutoff),
        Prefilter::new(cfg.maneuver.prefilter_cutoff),
        Prefilter::new(cfg.maneuver.prefilter_cutoff),
    ];

    let steps = (cfg.t_end / dt).floor() as usize;
    let mut rows = Vec::with_capacity(steps + 1);
    let bounds = RateBounds::from_run(db);
    let mut loc_any = false;
    let mut diverged = false;

    for k in 0..=steps {
        let t = k as f64 * dt;
        let raw = [
            cfg.maneuver.raw_command(CommandChannel::Phi, t),
            cfg.maneuver.raw_command(CommandChannel::Alpha, t),
            cfg.maneuver.raw_command(CommandChannel::Beta, t),
        ];
        let input = StepInput {
            phi_ref: filters[0].step(raw[0], dt),
            alpha_ref: trim_alpha + filters[1].step(raw[1], dt),
            beta_ref: filters[2].step(raw[2], dt),
            v_ref,
        };

        let coords = match state_to_envelope_coords(&x) {
            Ok(c) => c,
            Err(_) => {
                diverged = true;
                break;
            }
        };
        let loc = loc_flag(&coords, &bounds);
        loc_any |= loc;

        let step = controller_step(model, &x, &input, cfg.fep_mode, db, &cfg.controller, &mut st);
        let out = match step {
            Ok(o) => o,
            Err(_) => {
                diverged = true;
                rows.push(SimRow {
                    t,
                    state: x.clone(),
                    coords,
                    x1_ref: [input.phi_ref, input.alpha_ref, input.beta_ref],
                    x1_fep: [f64::NAN; 3],
                    x1_com: [f64::NAN; 3],
                    x2_ref: [f64::NAN; 3],
                    x2_fep: [f64::NAN; 3],
                    delta_com: st.delta0.clone(),
                    t_com: st.t0,
                    nu_h: [f64::NAN; 3],
                    m_env: f64::NAN,
                    loc,
                    diverged: true,
                    throttle_held: false,
                });
                break;
            }
        };

        // The logged metric is re-derived from the state for every
        // mode, protected or not, so paired runs are comparable.
        let m_env = match db {
            Some(d) => d.query_metric(&coords).map(|q| q.m_env).unwrap_or(f64::NAN),
            None => f64::NAN,
        };

        rows.push(SimRow {
            t,
            state: x.clone(),
            coords,
            x1_ref: [out.x1_ref[0], out.x1_ref[1], out.x1_ref[2]],
            x1_fep: [out.x1_fep[0], out.x1_fep[1], out.x1_fep[2]],
            x1_com: [out.x1_com[0], out.x1_com[1], out.x1_com[2]],
            x2_ref: [out.x2_ref[0], out.x2_ref[1], out.x2_ref[2]],
            x2_fep: [out.x2_fep[0], out.x2_fep[1], out.x2_fep[2]],
            delta_com: out.delta_com.clone(),
            t_com: out.t_com,
            nu_h: [out.nu_h[0], out.nu_h[1], out.nu_h[2]],
            m_env,
            loc,
            diverged: false,
            throttle_held: out.throttle_held,
        });

        if k == steps {
            break;
        }
        let u = ControlVector { delta: out.delta_com, thrust: out.t_com };
        match model.step(&x, &u, dt, Direction::Forward) {
            Ok(next) if next.to_array().iter().all(|v| v.is_finite()) => x = next,
            _ => {
                diverged = true;
                break;
            }
        }
    }

    Ok(SimLog {
        mode: cfg.fep_mode,
        dt,
        effector_names: model.effectors.iter().map(|e| e.name.clone()).collect(),
        rows,
        loc_flagged: loc_any,
        diverged,
    })
}

fn fmt17(v: f64) -> String {
    format!("{:.16e}", v)
}

/// CSV export, one row per control period, 17 significant digits,
/// fixed column order given by the header.
pub fn log_to_csv(log: &SimLog) -> String {
    let mut header = vec![
        "t".to_string(),
        "u".into(),
        "v".into(),
        "w".into(),
        "p".into(),
        "q".into(),
        "r".into(),
        "phi".into(),
        "theta".into(),
        "psi".into(),
        "x_n".into(),
        "y_e".into(),
        "h".into(),
    ];
    for n in EnvelopeCoords::DIM_NAMES {
        header.push(format!("env_{n}"));
    }
    for tag in ["ref", "fep", "com"] {
        for ch in ["phi", "alpha", "beta"] {
            header.push(format!("{ch}_{tag}"));
        }
    }
    for tag in ["ref", "fep"] {
        for ch in ["p", "q", "r"] {
            header.push(format!("{ch}_{tag}"));
        }
    }
    for n in &log.effector_names {
        header.push(format!("delta_{n}"));
    }
    header.push("t_com".into());
    for ch in ["phi", "alpha", "beta"] {
        header.push(format!("nu_h_{ch}"));
    }
    header.push("m_env".into());
    header.push("fep".into());
    header.push("loc".into());
    header.push("diverged".into());
    header.push("throttle_held".into());

    let mut out = header.join(",");
    out.push('\n');
    for r in &log.rows {
        let mut f: Vec<String> = Vec::with_capacity(header.len());
        f.push(fmt17(r.t));
        f.extend(r.state.to_array().iter().map(|&v| fmt17(v)));
        f.extend(r.coords.to_array().iter().map(|&v| fmt17(v)));
        f.extend(r.x1_ref.iter().map(|&v| fmt17(v)));
        f.extend(r.x1_fep.iter().map(|&v| fmt17(v)));
        f.extend(r.x1_com.iter().map(|&v| fmt17(v)));
        f.extend(r.x2_ref.iter().map(|&v| fmt17(v)));
        f.extend(r.x2_fep.iter().map(|&v| fmt17(v)));
        f.extend(r.delta_com.iter().map(|&v| fmt17(v)));
        f.push(fmt17(r.t_com));
        f.extend(r.nu_h.iter().map(|&v| fmt17(v)));
        f.push(fmt17(r.m_env));
        f.push(log.mode.tag().to_string());
        f.push((r.loc as u8).to_string());
        f.push((r.diverged as u8).to_string());
        f.push((r.throttle_held as u8).to_string());
        out.push_str(&f.join(","));
        out.push('\n');
    }
    out
}

/// Reload an exported log. The effector names come back from the
/// delta_* headers; mode and dt are reconstructed from the rows.
pub fn log_from_csv(text: &str) -> Result<SimLog, SimError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or(SimError::Parse { line: 1, msg: "empty file".into() })?;
    let cols: Vec<&str> = header.split(',').collect();
    let effector_names: Vec<String> = cols
        .iter()
        .filter_map(|c| c.strip_prefix("delta_"))
        .map(|s| s.to_string())
        .collect();
    let m = effector_names.len();
    let expect = 13 + 7 + 9 + 6 + m + 1 + 3 + 1 + 4;
    if cols.len() != expect {
        return Err(SimError::Parse {
            line: 1,
            msg: format!("expected {expect} columns, found {}", cols.len()),
        });
    }

    let mut rows = Vec::new();
    let mut mode = FepMode::None;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != expect {
            return Err(SimError::Parse {
                line: idx + 1,
                msg: format!("expected {expect} fields, found {}", f.len()),
            });
        }
        let num = |s: &str| -> Result<f64, SimError> {
            s.parse().map_err(|e| SimError::Parse { line: idx + 1, msg: format!("{e}: {s}") })
        };
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = at;
            at += n;
            (s, at)
        };
        let (s, e) = take(1);
        let t = num(f[s..e][0])?;
        let (s, e) = take(12);
        let mut st = [0.0; 12];
        for (i, v) in f[s..e].iter().enumerate() {
            st[i] = num(v)?;
        }
        let (s, e) = take(7);
        let mut ec = [0.0; 7];
        for (i, v) in f[s..e].iter().enumerate() {
            ec[i] = num(v)?;
        }
        let tri = |f: &[&str]| -> Result<[f64; 3], SimError> {
            Ok([num(f[0])?, num(f[1])?, num(f[2])?])
        };
        let (s, e) = take(3);
        let x1_ref = tri(&f[s..e])?;
        let (s, e) = take(3);
        let x1_fep = tri(&f[s..e])?;
        let (s, e) = take(3);
        let x1_com = tri(&f[s..e])?;
        let (s, e) = take(3);
        let x2_ref = tri(&f[s..e])?;
        let (s, e) = take(3);
        let x2_fep = tri(&f[s..e])?;
        let (s, e) = take(m);
        let delta_com: Vec<f64> =
            f[s..e].iter().map(|v| num(v)).collect::<Result<_, _>>()?;
        let (s, e) = take(1);
        let t_com = num(f[s..e][0])?;
        let (s, e) = take(3);
        let nu_h = tri(&f[s..e])?;
        let (s, e) = take(1);
        let m_env = num(f[s..e][0])?;
        let (s, e) = take(1);
        mode = match f[s..e][0] {
            "none" => FepMode::None,
            "scb" => FepMode::Scb,
            "prob" => FepMode::Prob,
            other => {
                return Err(SimError::Parse {
                    line: idx + 1,
                    msg: format!("unknown fep mode {other:?}"),
                })
            }
        };
        let (s, e) = take(1);
        let loc = f[s..e][0] == "1";
        let (s, e) = take(1);
        let diverged = f[s..e][0] == "1";
        let (s, _) = take(1);
        let throttle_held = f[s] == "1";

        rows.push(SimRow {
            t,
            state: StateVector::from_array(&st),
            coords: EnvelopeCoords::from_array(&ec),
            x1_ref,
            x1_fep,
            x1_com,
            x2_ref,
            x2_fep,
            delta_com,
            t_com,
            nu_h,
            m_env,
            loc,
            diverged,
            throttle_held,
        });
    }
    let dt = if rows.len() >= 2 { rows[1].t - rows[0].t } else { 0.0 };
    Ok(SimLog {
        mode,
        dt,
        effector_names,
        loc_flagged: rows.iter().any(|r| r.loc),
        diverged: rows.iter().any(|r| r.diverged),
        rows,
    })
}
