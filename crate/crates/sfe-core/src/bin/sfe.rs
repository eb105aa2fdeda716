//! `sfe`: command-line front end over the envelope toolkit.
//!
//! Subcommands cover the full pipeline: `trim` solves the trim table,
//! `estimate` samples reachable endpoints, `build-db` fits densities
//! and writes the envelope database, `simulate` runs the protected
//! closed loop, `query` reads one state out of a database. Every
//! subcommand writes a `<out>.meta.json` sidecar recording the resolved
//! configuration, input digests, and the output digest, so a run can be
//! reproduced byte for byte.
//!
//! Exit codes: 0 success, 1 usage or I/O, 2 numerical or convergence
//! failure, 3 loss-of-control flagged in simulation.

use clap::{Parser, Subcommand, ValueEnum};
use sfe_core::density::{build_membership_field, KdeModel};
use sfe_core::dynamics::{AircraftModel, Direction, EnvelopeCoords};
use sfe_core::envelope::{
    build_constraint_field, build_prob_field, EnvelopeDatabase, GridDim, GridSpec,
};
use sfe_core::mc::{run_monte_carlo, sample_set_from_csv, sample_set_to_csv, SamplerConfig};
use sfe_core::sim::{log_to_csv, maneuver_a, maneuver_b, ManeuverSpec, SimConfig, SimError};
use sfe_core::trim::{
    build_trim_set, trim_set_from_csv, trim_set_to_csv, TrimConfig, TrimError,
};
use sfe_core::{
    controller::{ControllerConfig, FepMode},
    mc::McError,
    sim::run_closed_loop,
};
use sha2::{Digest, Sha256};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERIC: u8 = 2;
const EXIT_LOC: u8 = 3;

#[derive(Parser)]
#[command(name = "sfe", version, about = "Safe-flight-envelope estimation and protection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the trim table over an altitude x Mach grid.
    Trim(TrimArgs),
    /// Sample reachable endpoints by Monte Carlo from the trim set.
    Estimate(EstimateArgs),
    /// Fit endpoint densities and write the envelope database.
    BuildDb(BuildDbArgs),
    /// Run a closed-loop maneuver with optional envelope protection.
    Simulate(SimulateArgs),
    /// Query metric, gradient, and constraints at one state.
    Query(QueryArgs),
}

#[derive(clap::Args)]
struct TrimArgs {
    /// Aircraft model JSON; the builtin airframe if omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Altitude span, ft.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"],
          default_values_t = [10000.0, 30000.0])]
    h_range: Vec<f64>,
    /// Mach span.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"],
          default_values_t = [0.4, 1.2])]
    mach_range: Vec<f64>,
    /// Node counts as NxM (altitude x Mach).
    #[arg(long, default_value = "9x17")]
    grid: String,
    /// Deflection weight in the trim cost.
    #[arg(long, default_value_t = 1.0)]
    k_trim: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirArg {
    Fwd,
    Bwd,
}

#[derive(clap::Args)]
struct EstimateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Trim-table CSV from `sfe trim`.
    #[arg(long)]
    trimset: PathBuf,
    /// Time horizon, s.
    #[arg(long, default_value_t = 1.5)]
    tf: f64,
    /// Integration step, s.
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    /// Trajectories to keep.
    #[arg(long, default_value_t = 10000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum)]
    direction: DirArg,
    /// Permit horizons beyond the 1.5 s guard.
    #[arg(long)]
    allow_long_horizon: bool,
    /// Deflection weight the trim table was built with.
    #[arg(long, default_value_t = 1.0)]
    k_trim: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct BuildDbArgs {
    /// Forward sample CSV.
    #[arg(long)]
    fwd: PathBuf,
    /// Backward sample CSV.
    #[arg(long)]
    bwd: PathBuf,
    /// Grid as `default7` or comma-joined `name:min:max:count` dims.
    #[arg(long, default_value = "default7")]
    grid: String,
    /// Density floor of the log metric.
    #[arg(long, default_value_t = 1e-6)]
    epsilon: f64,
    /// Binarization quantile multiplier for the constraint tables.
    #[arg(long, default_value_t = 3.0)]
    k0: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FepArg {
    None,
    Scb,
    Prob,
}

impl FepArg {
    fn mode(self) -> FepMode {
        match self {
            FepArg::None => FepMode::None,
            FepArg::Scb => FepMode::Scb,
            FepArg::Prob => FepMode::Prob,
        }
    }
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Envelope database; required for scb and prob modes.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Scenario file (JSON): maneuver, fep, t_end, scale, seed, initial
    /// condition, controller section. Explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `a`, `b`, or a maneuver JSON path.
    #[arg(long)]
    maneuver: Option<String>,
    #[arg(long, value_enum)]
    fep: Option<FepArg>,
    /// Simulation horizon, s.
    #[arg(long)]
    t_end: Option<f64>,
    /// Multiplier on every commanded peak.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

/// On-disk scenario shape; every field optional so a file can pin just
/// the parts it cares about.
#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    /// `"a"`, `"b"`, a maneuver JSON path, or inline segments.
    maneuver: Option<serde_json::Value>,
    fep: Option<FepMode>,
    t_end: Option<f64>,
    scale: Option<f64>,
    seed: Option<u64>,
    h0: Option<f64>,
    mach0: Option<f64>,
    controller: Option<ControllerConfig>,
}

#[derive(clap::Args)]
struct QueryArgs {
    #[arg(long)]
    db: PathBuf,
    /// Comma-joined `p,q,r,alpha,beta,vg,h`.
    #[arg(long)]
    state: String,
}

struct CmdFail {
    code: u8,
    msg: String,
}

fn usage<E: Display>(e: E) -> CmdFail {
    CmdFail { code: EXIT_USAGE, msg: e.to_string() }
}

fn numeric<E: Display>(e: E) -> CmdFail {
    CmdFail { code: EXIT_NUMERIC, msg: e.to_string() }
}

fn trim_fail(e: TrimError) -> CmdFail {
    match e {
        TrimError::Io(_) | TrimError::Parse(_) | TrimError::NoTrimEffectors => usage(e),
        _ => numeric(e),
    }
}

fn mc_fail(e: McError) -> CmdFail {
    match e {
        McError::Parse { .. }
        | McError::NoSamples
        | McError::BadStep { .. }
        | McError::NonIntegralHorizon { .. } => usage(e),
        _ => numeric(e),
    }
}

fn sim_fail(e: SimError) -> CmdFail {
    match e {
        SimError::MissingDatabase(_)
        | SimError::OverlappingSegments { .. }
        | SimError::BadSegment(_)
        | SimError::BadTiming
        | SimError::Parse { .. } => usage(e),
        SimError::Trim(t) => trim_fail(t),
        SimError::Controller(c) => numeric(c),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_file(path: &Path) -> Result<(String, serde_json::Value), CmdFail> {
    let bytes = std::fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let digest = sha256_hex(&bytes);
    let text = String::from_utf8(bytes)
        .map_err(|_| usage(format!("{}: not valid UTF-8", path.display())))?;
    Ok((text, serde_json::json!({ "path": path.display().to_string(), "sha256": digest })))
}

fn read_binary(path: &Path) -> Result<(Vec<u8>, serde_json::Value), CmdFail> {
    let bytes = std::fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let digest = sha256_hex(&bytes);
    Ok((bytes, serde_json::json!({ "path": path.display().to_string(), "sha256": digest })))
}

fn load_model(path: &Option<PathBuf>) -> Result<(AircraftModel, serde_json::Value), CmdFail> {
    match path {
        Some(p) => {
            let (text, meta) = read_file(p)?;
            let model = AircraftModel::from_json(&text)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?;
            Ok((model, meta))
        }
        None => Ok((
            AircraftModel::builtin_generic_fighter(),
            serde_json::json!({ "builtin": "generic_fighter" }),
        )),
    }
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<String, CmdFail> {
    std::fs::write(path, bytes).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(bytes))
}

/// Deterministic sidecar next to the output: resolved config plus its
/// digest, input digests, output digest, tool version. No timestamps,
/// so reruns of identical invocations produce identical sidecars.
fn write_meta(
    out: &Path,
    subcommand: &str,
    config: serde_json::Value,
    inputs: serde_json::Value,
    output_sha256: &str,
) -> Result<(), CmdFail> {
    let config_text = serde_json::to_string(&config).expect("config serializes");
    let meta = serde_json::json!({
        "tool": "sfe",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "config": config,
        "config_sha256": sha256_hex(config_text.as_bytes()),
        "inputs": inputs,
        "output_sha256": output_sha256,
    });
    let mut text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    text.push('\n');
    let mut side = out.as_os_str().to_owned();
    side.push(".meta.json");
    std::fs::write(&side, text)
        .map_err(|e| usage(format!("{}: {e}", PathBuf::from(&side).display())))?;
    Ok(())
}

fn parse_trim_grid(s: &str) -> Result<(usize, usize), CmdFail> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(format!("grid {s:?} is not NxM")))?;
    let nh: usize = a.trim().parse().map_err(|_| usage(format!("bad node count {a:?}")))?;
    let nm: usize = b.trim().parse().map_err(|_| usage(format!("bad node count {b:?}")))?;
    if nh < 2 || nm < 2 {
        return Err(usage("trim grid needs at least 2 nodes per axis"));
    }
    Ok((nh, nm))
}

fn parse_grid_spec(s: &str) -> Result<GridSpec, CmdFail> {
    if s == "default7" {
        return Ok(GridSpec::default7());
    }
    let mut dims = Vec::new();
    for part in s.split(',') {
        let f: Vec<&str> = part.split(':').collect();
        if f.len() != 4 {
            return Err(usage(format!("grid dim {part:?} is not name:min:max:count")));
        }
        let min: f64 =
            f[1].parse().map_err(|_| usage(format!("bad grid bound {:?}", f[1])))?;
        let max: f64 =
            f[2].parse().map_err(|_| usage(format!("bad grid bound {:?}", f[2])))?;
        let count: usize =
            f[3].parse().map_err(|_| usage(format!("bad grid count {:?}", f[3])))?;
        if count < 2 || !(max > min) {
            return Err(usage(format!("grid dim {part:?} needs max > min and count >= 2")));
        }
        let step = (max - min) / (count - 1) as f64;
        dims.push(GridDim { name: f[0].to_string(), min, max, step });
    }
    GridSpec::new(dims).map_err(usage)
}

fn cmd_trim(a: &TrimArgs) -> Result<u8, CmdFail> {
    let (model, model_meta) = load_model(&a.model)?;
    let (nh, nm) = parse_trim_grid(&a.grid)?;
    let config = TrimConfig { k_trim: a.k_trim, ..TrimConfig::default() };
    let ts = build_trim_set(
        &model,
        (a.h_range[0], a.h_range[1]),
        (a.mach_range[0], a.mach_range[1]),
        nh,
        nm,
        &config,
    )
    .map_err(trim_fail)?;
    let csv = trim_set_to_csv(&ts);
    let digest = write_output(&a.out, csv.as_bytes())?;
    write_meta(
        &a.out,
        "trim",
        serde_json::json!({
            "h_range": a.h_range,
            "mach_range": a.mach_range,
            "grid": { "nh": nh, "nm": nm },
            "k_trim": a.k_trim,
        }),
        serde_json::json!({ "model": model_meta }),
        &digest,
    )?;
    println!("trim table: {nh} x {nm} nodes -> {}", a.out.display());
    Ok(0)
}

fn cmd_estimate(a: &EstimateArgs) -> Result<u8, CmdFail> {
    let (model, model_meta) = load_model(&a.model)?;
    let (trim_text, trim_meta) = read_file(&a.trimset)?;
    let ts = trim_set_from_csv(&trim_text, a.k_trim).map_err(trim_fail)?;
    let config = SamplerConfig {
        t_f: a.tf,
        dt: a.dt,
        n: a.n,
        seed: a.seed,
        allow_long_horizon: a.allow_long_horizon,
        ..SamplerConfig::default()
    };
    let direction = match a.direction {
        DirArg::Fwd => Direction::Forward,
        DirArg::Bwd => Direction::Backward,
    };
    let set = run_monte_carlo(&model, &ts, &config, direction).map_err(mc_fail)?;
    let csv = sample_set_to_csv(&set);
    let digest = write_output(&a.out, csv.as_bytes())?;
    write_meta(
        &a.out,
        "estimate",
        serde_json::json!({
            "sampler": set.meta(),
            "direction": direction.tag(),
            "k_trim": a.k_trim,
        }),
        serde_json::json!({ "model": model_meta, "trimset": trim_meta }),
        &digest,
    )?;
    println!(
        "{} endpoints ({} discarded) -> {}",
        set.samples.len(),
        set.discarded,
        a.out.display()
    );
    Ok(0)
}

/// Dimensions the protection laws clamp; grid dims with these names get
/// constraint tables.
const PROTECTED_DIMS: [&str; 5] = ["p", "q", "r", "alpha", "beta"];

fn cmd_build_db(a: &BuildDbArgs) -> Result<u8, CmdFail> {
    let grid = parse_grid_spec(&a.grid)?;
    let mut name_slots = Vec::with_capacity(grid.d());
    for dim in grid.dims() {
        let slot = EnvelopeCoords::DIM_NAMES
            .iter()
            .position(|n| *n == dim.name)
            .ok_or_else(|| usage(format!("grid dim {:?} is not an envelope coordinate", dim.name)))?;
        name_slots.push(slot);
    }

    let load = |path: &Path, want: Direction| -> Result<(Vec<f64>, usize, serde_json::Value), CmdFail> {
        let (text, meta) = read_file(path)?;
        let (dir, samples) = sample_set_from_csv(&text).map_err(mc_fail)?;
        if dir != want {
            return Err(usage(format!(
                "{}: contains {} samples, expected {}",
                path.display(),
                dir.tag(),
                want.tag()
            )));
        }
        let mut flat = Vec::with_capacity(samples.len() * name_slots.len());
        for s in &samples {
            let e = s.endpoint.to_array();
            for &slot in &name_slots {
                flat.push(e[slot]);
            }
        }
        Ok((flat, samples.len(), meta))
    };

    let (fwd_flat, fwd_n, fwd_meta) = load(&a.fwd, Direction::Forward)?;
    let (bwd_flat, bwd_n, bwd_meta) = load(&a.bwd, Direction::Backward)?;
    let d = grid.d();
    let fwd_kde = KdeModel::fit(fwd_flat, d).map_err(numeric)?;
    let bwd_kde = KdeModel::fit(bwd_flat, d).map_err(numeric)?;
    let field = build_membership_field(&fwd_kde, &bwd_kde, &grid).map_err(numeric)?;

    let peak = field
        .values
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.partial_cmp(y.1).expect("memberships are finite"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let peak_coords = field.grid.node_coords(peak);

    let protected: Vec<usize> = grid
        .dims()
        .iter()
        .enumerate()
        .filter(|(_, dim)| PROTECTED_DIMS.contains(&dim.name.as_str()))
        .map(|(j, _)| j)
        .collect();
    let mut db = build_prob_field(&field, a.epsilon).map_err(numeric)?;
    if !protected.is_empty() {
        let cf = build_constraint_field(&field, a.k0, &protected).map_err(numeric)?;
        db = db.with_constraints(cf);
    }

    let bytes = db.to_bytes();
    let digest = write_output(&a.out, &bytes)?;
    write_meta(
        &a.out,
        "build-db",
        serde_json::json!({
            "grid": a.grid,
            "epsilon": a.epsilon,
            "k0": a.k0,
            "fwd_samples": fwd_n,
            "bwd_samples": bwd_n,
        }),
        serde_json::json!({ "fwd": fwd_meta, "bwd": bwd_meta }),
        &digest,
    )?;

    let fmt_band = |b: &[f64]| {
        b.iter().map(|v| format!("{v:.6e}")).collect::<Vec<_>>().join(", ")
    };
    println!("grid: {d} dims, {} nodes", grid.total_nodes());
    println!("fwd bandwidths: [{}]", fmt_band(fwd_kde.bandwidths()));
    println!("bwd bandwidths: [{}]", fmt_band(bwd_kde.bandwidths()));
    let peak_desc: Vec<String> = grid
        .dims()
        .iter()
        .zip(peak_coords.iter())
        .map(|(dim, v)| format!("{}={v:.6}", dim.name))
        .collect();
    println!("peak membership at {}", peak_desc.join(", "));
    println!("database -> {}", a.out.display());
    Ok(0)
}

fn named_maneuver(source: &str) -> Result<(ManeuverSpec, serde_json::Value), CmdFail> {
    match source {
        "a" => Ok((maneuver_a(), serde_json::json!({ "builtin": "a" }))),
        "b" => Ok((maneuver_b(), serde_json::json!({ "builtin": "b" }))),
        path => {
            let p = PathBuf::from(path);
            let (text, meta) = read_file(&p)?;
            let spec: ManeuverSpec = serde_json::from_str(&text)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?;
            Ok((spec, meta))
        }
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<u8, CmdFail> {
    let (scenario, scenario_meta) = match &a.config {
        Some(p) => {
            let (text, meta) = read_file(p)?;
            let sc: ScenarioFile = serde_json::from_str(&text)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?;
            (Some(sc), meta)
        }
        None => (None, serde_json::Value::Null),
    };
    let sc = scenario.as_ref();

    let mode = match (a.fep, sc.and_then(|s| s.fep)) {
        (Some(f), _) => f.mode(),
        (None, Some(m)) => m,
        (None, None) => FepMode::None,
    };
    if mode != FepMode::None && a.db.is_none() {
        return Err(usage(format!("--fep {} needs --db", mode.tag())));
    }
    let (model, model_meta) = load_model(&a.model)?;
    let (db, db_meta) = match &a.db {
        Some(p) => {
            let (bytes, meta) = read_binary(p)?;
            let db = EnvelopeDatabase::from_bytes(&bytes)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?;
            (Some(db), meta)
        }
        None => (None, serde_json::Value::Null),
    };
    let (maneuver, maneuver_meta) = match (&a.maneuver, sc.and_then(|s| s.maneuver.as_ref())) {
        (Some(name), _) => named_maneuver(name)?,
        (None, Some(serde_json::Value::String(name))) => named_maneuver(name)?,
        (None, Some(inline)) => {
            let spec: ManeuverSpec = serde_json::from_value(inline.clone())
                .map_err(|e| usage(format!("scenario maneuver: {e}")))?;
            (spec, serde_json::json!({ "inline": true }))
        }
        (None, None) => return Err(usage("no maneuver given (--maneuver or scenario file)")),
    };
    let scale = a.scale.or(sc.and_then(|s| s.scale)).unwrap_or(1.0);
    let t_end = a.t_end.or(sc.and_then(|s| s.t_end)).unwrap_or(12.0);
    let seed = a.seed.or(sc.and_then(|s| s.seed)).unwrap_or(0);

    let mut cfg = SimConfig::new(mode, maneuver.scaled(scale), t_end);
    cfg.seed = seed;
    if let Some(s) = sc {
        if let Some(h0) = s.h0 {
            cfg.h0 = h0;
        }
        if let Some(m0) = s.mach0 {
            cfg.mach0 = m0;
        }
        if let Some(c) = &s.controller {
            cfg.controller = c.clone();
        }
    }
    let log = run_closed_loop(&model, &cfg, db.as_ref()).map_err(sim_fail)?;
    let csv = log_to_csv(&log);
    let digest = write_output(&a.out, csv.as_bytes())?;
    write_meta(
        &a.out,
        "simulate",
        serde_json::json!({
            "fep": mode.tag(),
            "maneuver": a.maneuver,
            "scale": scale,
            "t_end": t_end,
            "seed": seed,
            "h0": cfg.h0,
            "mach0": cfg.mach0,
            "controller": serde_json::to_value(&cfg.controller).map_err(numeric)?,
        }),
        serde_json::json!({
            "model": model_meta,
            "db": db_meta,
            "maneuver": maneuver_meta,
            "scenario": scenario_meta,
        }),
        &digest,
    )?;
    println!(
        "{} rows, loc={}, diverged={} -> {}",
        log.rows.len(),
        log.loc_flagged,
        log.diverged,
        a.out.display()
    );
    // Loss of control dominates the exit status; a diverged run without
    // the flag is reported as a numerical failure.
    if log.loc_flagged {
        Ok(EXIT_LOC)
    } else if log.diverged {
        Ok(EXIT_NUMERIC)
    } else {
        Ok(0)
    }
}

fn cmd_query(a: &QueryArgs) -> Result<u8, CmdFail> {
    let (bytes, _) = read_binary(&a.db)?;
    let db = EnvelopeDatabase::from_bytes(&bytes)
        .map_err(|e| usage(format!("{}: {e}", a.db.display())))?;
    let parts: Vec<&str> = a.state.split(',').collect();
    if parts.len() != EnvelopeCoords::DIM {
        return Err(usage(format!(
            "state needs {} comma-joined values ({}), got {}",
            EnvelopeCoords::DIM,
            EnvelopeCoords::DIM_NAMES.join(","),
            parts.len()
        )));
    }
    let mut vals = [0.0; EnvelopeCoords::DIM];
    for (i, p) in parts.iter().enumerate() {
        vals[i] = p
            .trim()
            .parse()
            .map_err(|_| usage(format!("bad state component {p:?}")))?;
    }
    let x = EnvelopeCoords::from_array(&vals);
    let mq = db.query_metric(&x).map_err(usage)?;
    let mut clamped = mq.clamped;
    let constraints = match db.query_constraints(&x) {
        Ok(cq) => {
            clamped |= cq.clamped;
            let mut obj = serde_json::Map::new();
            for (k, &j) in cq.dims.iter().enumerate() {
                obj.insert(
                    db.grid.dims()[j].name.clone(),
                    serde_json::json!([cq.lo[k], cq.hi[k]]),
                );
            }
            serde_json::Value::Object(obj)
        }
        Err(_) => serde_json::Value::Null,
    };
    let j_env: serde_json::Map<String, serde_json::Value> = db
        .grid
        .dims()
        .iter()
        .zip(mq.j_env.iter())
        .map(|(dim, &g)| (dim.name.clone(), serde_json::json!(g)))
        .collect();
    let line = serde_json::json!({
        "m_env": mq.m_env,
        "j_env": j_env,
        "constraints": constraints,
        "clamped": if clamped { 1 } else { 0 },
    });
    println!("{line}");
    Ok(0)
}

fn main() -> ExitCode {
    // Thread-count override applies to every parallel stage.
    if let Ok(v) = std::env::var("SFE_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version requests land here as non-error output.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::Trim(a) => cmd_trim(a),
        Cmd::Estimate(a) => cmd_estimate(a),
        Cmd::BuildDb(a) => cmd_build_db(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Query(a) => cmd_query(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("sfe: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
