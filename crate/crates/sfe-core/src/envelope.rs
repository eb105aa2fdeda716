//! Gridded envelope database.
//!
//! A rectilinear grid over named state dimensions carries the envelope
//! metric M_env = ln(max(mu, epsilon)) and, optionally, per-node state
//! constraints derived from a binarized membership cut. Queries
//! interpolate the metric multilinearly, differentiate the interpolant
//! with grid-step finite differences, and look constraints up at the
//! nearest node. The whole database serializes to a checksummed binary
//! blob that reloads bit-identically.

use crate::density::MembershipField;
use crate::dynamics::EnvelopeCoords;
use crate::fep::binarize_threshold;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DB_MAGIC: &[u8; 6] = b"SFEDB\x01";
pub const DB_SCHEMA_VERSION: u32 = 1;
/// Default floor under the membership value inside the metric log.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EnvelopeError {
    #[error("grid needs at least one dimension")]
    EmptyGrid,
    #[error("dimension {name:?}: span {span} is not an integral multiple of step {step}")]
    NonIntegralSpan { name: String, span: f64, step: f64 },
    #[error("dimension {name:?} needs at least 2 nodes")]
    TooFewNodes { name: String },
    #[error("dimension {name:?}: bounds and step must be finite with min < max, step > 0")]
    BadDimension { name: String },
    #[error("duplicate dimension name {name:?}")]
    DuplicateName { name: String },
    #[error("value array has {got} entries, grid has {want} nodes")]
    LengthMismatch { got: usize, want: usize },
    #[error("epsilon must lie in (0, 1), got {0}")]
    BadEpsilon(f64),
    #[error("binarized envelope is empty at threshold {threshold}")]
    EmptyBinarized { threshold: f64 },
    #[error("protected dimension index {0} out of range")]
    BadProtectedDim(usize),
    #[error("grid dimension {name:?} is not an envelope state coordinate")]
    UnknownDimension { name: String },
    #[error("database carries no constraint payload")]
    NoConstraints,
    #[error("not an envelope database (bad magic)")]
    BadMagic,
    #[error("unsupported database schema version {0}")]
    BadVersion(u32),
    #[error("database file truncated")]
    Truncated,
    #[error("database checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed database payload: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDim {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl GridDim {
    pub fn count(&self) -> usize {
        ((self.max - self.min) / self.step).round() as usize + 1
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.min + self.step * i as f64
    }
}

/// Rectilinear evaluation grid with named dimensions, nodes at
/// min + i*step per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dims: Vec<GridDim>,
}

impl GridSpec {
    pub fn new(dims: Vec<GridDim>) -> Result<Self, EnvelopeError> {
        if dims.is_empty() {
            return Err(EnvelopeError::EmptyGrid);
        }
        for (i, d) in dims.iter().enumerate() {
            if !(d.step > 0.0)
                || !d.step.is_finite()
                || !d.min.is_finite()
                || !d.max.is_finite()
                || !(d.min < d.max)
                || d.name.is_empty()
            {
                return Err(EnvelopeError::BadDimension { name: d.name.clone() });
            }
            let span = d.max - d.min;
            let ratio = span / d.step;
            if (ratio - ratio.round()).abs() > 1e-9 {
                return Err(EnvelopeError::NonIntegralSpan {
                    name: d.name.clone(),
                    span,
                    step: d.step,
                });
            }
            if d.count() < 2 {
                return Err(EnvelopeError::TooFewNodes { name: d.name.clone() });
            }
            if dims[..i].iter().any(|o| o.name == d.name) {
                return Err(EnvelopeError::DuplicateName { name: d.name.clone() });
            }
        }
        Ok(GridSpec { dims })
    }

    /// Full seven-dimensional envelope grid: body rates p, q within
    /// +-150 deg/s step 30, r within +-60 step 30; alpha within +-60 deg
    /// step 5; beta within +-45 step 5; ground speed 400..1300 ft/s step
    /// 180; altitude 10000..30000 ft step 5000. Angles are stored in
    /// radians.
    pub fn default7() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        let dim = |name: &str, min: f64, max: f64, step: f64| GridDim {
            name: name.to_string(),
            min,
            max,
            step,
        };
        GridSpec::new(vec![
            dim("p", -150.0 * deg, 150.0 * deg, 30.0 * deg),
            dim("q", -150.0 * deg, 150.0 * deg, 30.0 * deg),
            dim("r", -60.0 * deg, 60.0 * deg, 30.0 * deg),
            dim("alpha", -60.0 * deg, 60.0 * deg, 5.0 * deg),
            dim("beta", -45.0 * deg, 45.0 * deg, 5.0 * deg),
            dim("vg", 400.0, 1300.0, 180.0),
            dim("h", 10000.0, 30000.0, 5000.0),
        ])
        .expect("builtin grid is valid")
    }

    pub fn dims(&self) -> &[GridDim] {
        &self.dims
    }

    pub fn d(&self) -> usize {
        self.dims.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.dims.iter().map(|d| d.count()).collect()
    }

    pub fn total_nodes(&self) -> usize {
        self.dims.iter().map(|d| d.count()).product()
    }

    /// Row-major strides, last dimension fastest.
    pub fn strides(&self) -> Vec<usize> {
        let counts = self.counts();
        let mut s = vec![1usize; counts.len()];
        for j in (0..counts.len().saturating_sub(1)).rev() {
            s[j] = s[j + 1] * counts[j + 1];
        }
        s
    }

    pub fn node_coords(&self, flat: usize) -> Vec<f64> {
        let strides = self.strides();
        self.dims
            .iter()
            .zip(strides.iter().zip(self.counts().iter()))
            .map(|(d, (&s, &n))| d.coord(flat / s % n))
            .collect()
    }

    pub fn axis_values(&self, j: usize) -> Vec<f64> {
        (0..self.dims[j].count()).map(|i| self.dims[j].coord(i)).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.dims.iter().position(|d| d.name == name)
    }
}

/// Cell location of a scalar coordinate: base node index and the
/// fractional position inside the cell, with values landing within 1e-9
/// steps of a node snapped exactly onto it.
fn locate(dim: &GridDim, x: f64) -> (usize, f64) {
    let n = dim.count();
    let u = (x - dim.min) / dim.step;
    let r = u.round();
    if (u - r).abs() <= 1e-9 {
        let i = (r as isize).clamp(0, n as isize - 1) as usize;
        return (i.min(n - 2), if i == n - 1 { 1.0 } else { 0.0 });
    }
    let i = (u.floor() as isize).clamp(0, n as isize - 2) as usize;
    (i, (u - i as f64).clamp(0.0, 1.0))
}

/// Multilinear interpolation of `values` at `x` (already clamped into
/// the grid box).
fn interp(grid: &GridSpec, values: &[f64], x: &[f64]) -> f64 {
    let d = grid.d();
    let strides = grid.strides();
    let mut base = vec![0usize; d];
    let mut frac = vec![0.0f64; d];
    for j in 0..d {
        let (i, t) = locate(&grid.dims[j], x[j]);
        base[j] = i;
        frac[j] = t;
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut idx = 0usize;
        for j in 0..d {
            let hi = (corner >> j) & 1 == 1;
            w *= if hi { frac[j] } else { 1.0 - frac[j] };
            idx += (base[j] + hi as usize) * strides[j];
        }
        if w != 0.0 {
            acc += w * values[idx];
        }
    }
    acc
}

/// Metric query result: interpolated metric, its finite-difference
/// gradient per grid dimension, and whether the query point had to be
/// clamped into the grid box.
#[derive(Debug, Clone)]
pub struct MetricQuery {
    pub m_env: f64,
    pub j_env: Vec<f64>,
    pub clamped: bool,
}

/// Constraint query result: per protected dimension, the admissible
/// interval at the nearest grid node.
#[derive(Debug, Clone)]
pub struct ConstraintQuery {
    /// Indices into the grid's dimension list.
    pub dims: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub clamped: bool,
}

/// Per-node admissible intervals for a set of protected dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintField {
    /// Protected dimensions as indices into the grid dims.
    pub dims: Vec<usize>,
    /// lo[k][node], hi[k][node] in the dims order above.
    pub lo: Vec<Vec<f64>>,
    pub hi: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeDatabase {
    pub grid: GridSpec,
    /// ln(max(mu, epsilon)) per node, row-major, last dimension fastest.
    pub metric: Vec<f64>,
    /// Floor used when the metric was built; not persisted in the binary
    /// format (the metric values already embed it), so loads get the
    /// default.
    pub epsilon: f64,
    pub constraints: Option<ConstraintField>,
}

/// Log-metric field over the membership grid: ln(max(mu, epsilon)).
pub fn build_prob_field(
    membership: &MembershipField,
    epsilon: f64,
) -> Result<EnvelopeDatabase, EnvelopeError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(EnvelopeError::BadEpsilon(epsilon));
    }
    let metric = membership.values.iter().map(|&mu| mu.max(epsilon).ln()).collect();
    Ok(EnvelopeDatabase {
        grid: membership.grid.clone(),
        metric,
        epsilon,
        constraints: None,
    })
}

/// Per-node admissible intervals of the binarized envelope.
///
/// Inside nodes (mu >= threshold) take the span of their contiguous
/// above-threshold run along each protected axis, holding every other
/// coordinate fixed; runs stop at the first below-threshold node so
/// disjoint envelope lobes never tunnel into each other. Outside nodes
/// copy the constraints of the nearest inside node, nearest in Euclidean
/// distance over step-normalized (index) coordinates.
pub fn build_constraint_field(
    membership: &MembershipField,
    k0: f64,
    protected: &[usize],
) -> Result<ConstraintField, EnvelopeError> {
    let grid = &membership.grid;
    let d = grid.d();
    let total = grid.total_nodes();
    for &k in protected {
        if k >= d {
            return Err(EnvelopeError::BadProtectedDim(k));
        }
    }
    let threshold = binarize_threshold(k0);
    let inside: Vec<bool> = membership.values.iter().map(|&mu| mu >= threshold).collect();
    if !inside.iter().any(|&b| b) {
        return Err(EnvelopeError::EmptyBinarized { threshold });
    }

    let counts = grid.counts();
    let strides = grid.strides();
    let mut lo = vec![vec![f64::NAN; total]; protected.len()];
    let mut hi = vec![vec![f64::NAN; total]; protected.len()];

    // Contiguous-run scan along each protected axis.
    for (k, &j) in protected.iter().enumerate() {
        let nj = counts[j];
        let sj = strides[j];
        for_each_line(&counts, &strides, j, |line_base| {
            let mut i = 0usize;
            while i < nj {
                if !inside[line_base + i * sj] {
                    i += 1;
                    continue;
                }
                let start = i;
                while i + 1 < nj && inside[line_base + (i + 1) * sj] {
                    i += 1;
                }
                let (a, b) = (grid.dims[j].coord(start), grid.dims[j].coord(i));
                for t in start..=i {
                    lo[k][line_base + t * sj] = a;
                    hi[k][line_base + t * sj] = b;
                }
                i += 1;
            }
        });
    }

    // Outside nodes inherit the nearest inside node's intervals.
    let site = nearest_inside_sites(&inside, &counts, &strides);
    for node in 0..total {
        if !inside[node] {
            let s = site[node];
            for k in 0..protected.len() {
                lo[k][node] = lo[k][s];
                hi[k][node] = hi[k][s];
            }
        }
    }

    Ok(ConstraintField { dims: protected.to_vec(), lo, hi })
}

/// Visit the base flat index of every grid line along dimension `j`
/// (all index combinations with i_j = 0).
fn for_each_line(counts: &[usize], strides: &[usize], j: usize, mut f: impl FnMut(usize)) {
    let d = counts.len();
    let mut idx = vec![0usize; d];
    loop {
        let base: usize = (0..d).map(|k| idx[k] * strides[k]).sum();
        f(base);
        // Odometer over all dims except j.
        let mut k = d;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            if k == j {
                continue;
            }
            idx[k] += 1;
            if idx[k] < counts[k] {
                break;
            }
            idx[k] = 0;
        }
    }
}

/// Flat index of the nearest `true` node for every node, distances taken
/// in index space (one step = one unit per dimension). Separable squared
/// distance transform, one lower-envelope pass per dimension, carrying
/// the winning site through each pass.
fn nearest_inside_sites(inside: &[bool], counts: &[usize], strides: &[usize]) -> Vec<usize> {
    let total = inside.len();
    let mut dist2: Vec<f64> =
        inside.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let mut site: Vec<usize> =
        (0..total).map(|i| if inside[i] { i } else { usize::MAX }).collect();

    for j in 0..counts.len() {
        let nj = counts[j];
        let sj = strides[j];
        let mut f = vec![0.0f64; nj];
        let mut s = vec![0usize; nj];
        let mut out_d = vec![0.0f64; nj];
        let mut out_s = vec![0usize; nj];
        // Lower-envelope working arrays.
        let mut v = vec![0usize; nj];
        let mut z = vec![0.0f64; nj + 1];
        for_each_line(counts, strides, j, |base| {
            for t in 0..nj {
                f[t] = dist2[base + t * sj];
                s[t] = site[base + t * sj];
            }
            lower_envelope(&f, &s, &mut v, &mut z, &mut out_d, &mut out_s);
            for t in 0..nj {
                dist2[base + t * sj] = out_d[t];
                site[base + t * sj] = out_s[t];
            }
        });
    }
    site
}

/// 1-D pass of the squared distance transform: out_d[q] = min_p f[p] +
/// (q-p)^2 with the argmin's site tag copied to out_s. Infinite f values
/// (no site yet on that slot) never win.
fn lower_envelope(
    f: &[f64],
    s: &[usize],
    v: &mut [usize],
    z: &mut [f64],
    out_d: &mut [f64],
    out_s: &mut [usize],
) {
    let n = f.len();
    let mut k = 0usize;
    let mut any = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !any {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            any = true;
            continue;
        }
        let mut sx;
        loop {
            let p = v[k];
            sx = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if sx > z[k] {
                break;
            }
            if k == 0 {
                break;
            }
            k -= 1;
        }
        if sx <= z[k] {
            // The new parabola dominates everything kept so far.
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            k = 0;
        } else {
            k += 1;
            v[k] = q;
            z[k] = sx;
            z[k + 1] = f64::INFINITY;
        }
    }
    if !any {
        out_d.copy_from_slice(f);
        out_s.copy_from_slice(s);
        return;
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        out_d[q] = f[p] + dq * dq;
        out_s[q] = s[p];
    }
}

impl EnvelopeDatabase {
    pub fn with_constraints(mut self, constraints: ConstraintField) -> Self {
        self.constraints = Some(constraints);
        self
    }

    /// Query coordinates in grid-dimension order, mapped from the state
    /// by dimension name so reduced grids work unchanged.
    fn query_point(&self, x: &EnvelopeCoords) -> Result<(Vec<f64>, bool), EnvelopeError> {
        let mut pt = Vec::with_capacity(self.grid.d());
        let mut clamped = false;
        for dim in self.grid.dims() {
            let v = x
                .by_name(&dim.name)
                .ok_or_else(|| EnvelopeError::UnknownDimension { name: dim.name.clone() })?;
            let c = v.clamp(dim.min, dim.max);
            if c != v {
                clamped = true;
            }
            pt.push(c);
        }
        Ok((pt, clamped))
    }

    /// Interpolated metric and its gradient. Outside points are clamped
    /// onto the grid box and flagged; the gradient uses central
    /// differences of the interpolant with the grid step, one-sided at
    /// the box faces.
    pub fn query_metric(&self, x: &EnvelopeCoords) -> Result<MetricQuery, EnvelopeError> {
        let (pt, clamped) = self.query_point(x)?;
        let m_env = interp(&self.grid, &self.metric, &pt);
        let mut j_env = Vec::with_capacity(self.grid.d());
        let mut probe = pt.clone();
        for (j, dim) in self.grid.dims().iter().enumerate() {
            let xp = (pt[j] + dim.step).min(dim.max);
            let xm = (pt[j] - dim.step).max(dim.min);
            probe[j] = xp;
            let mp = interp(&self.grid, &self.metric, &probe);
            probe[j] = xm;
            let mm = interp(&self.grid, &self.metric, &probe);
            probe[j] = pt[j];
            j_env.push((mp - mm) / (xp - xm));
        }
        Ok(MetricQuery { m_env, j_env, clamped })
    }

    /// Constraints at the grid node nearest to the query point; never
    /// interpolated.
    pub fn query_constraints(&self, x: &EnvelopeCoords) -> Result<ConstraintQuery, EnvelopeError> {
        let cf = self.constraints.as_ref().ok_or(EnvelopeError::NoConstraints)?;
        let (pt, clamped) = self.query_point(x)?;
        let strides = self.grid.strides();
        let mut node = 0usize;
        for (j, dim) in self.grid.dims().iter().enumerate() {
            let n = dim.count();
            let i = (((pt[j] - dim.min) / dim.step).round() as isize).clamp(0, n as isize - 1);
            node += i as usize * strides[j];
        }
        Ok(ConstraintQuery {
            dims: cf.dims.clone(),
            lo: cf.lo.iter().map(|a| a[node]).collect(),
            hi: cf.hi.iter().map(|a| a[node]).collect(),
            clamped,
        })
    }

    /// Binary serialization: magic, schema version, dimension table,
    /// payload kind, metric array, optional constraint payload, trailing
    /// CRC32 of everything before it. Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DB_MAGIC);
        out.extend_from_slice(&DB_SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.grid.d() as u32).to_le_bytes());
        for dim in self.grid.dims() {
            let name = dim.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&dim.min.to_le_bytes());
            out.extend_from_slice(&dim.max.to_le_bytes());
            out.extend_from_slice(&dim.step.to_le_bytes());
        }
        let kind: u8 = if self.constraints.is_some() { 2 } else { 1 };
        out.push(kind);
        for v in &self.metric {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(cf) = &self.constraints {
            out.extend_from_slice(&(cf.dims.len() as u32).to_le_bytes());
            for &j in &cf.dims {
                out.extend_from_slice(&(j as u32).to_le_bytes());
            }
            for k in 0..cf.dims.len() {
                for v in &cf.lo[k] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for v in &cf.hi[k] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&out);
        out.extend_from_slice(&hasher.finalize().to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(DB_MAGIC.len())?;
        if magic != DB_MAGIC {
            return Err(EnvelopeError::BadMagic);
        }
        let version = cur.u32()?;
        if version != DB_SCHEMA_VERSION {
            return Err(EnvelopeError::BadVersion(version));
        }
        let d = cur.u32()? as usize;
        if d == 0 {
            return Err(EnvelopeError::EmptyGrid);
        }
        let mut dims = Vec::with_capacity(d);
        for _ in 0..d {
            let len = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| EnvelopeError::Malformed("dimension name is not UTF-8"))?;
            let min = cur.f64()?;
            let max = cur.f64()?;
            let step = cur.f64()?;
            dims.push(GridDim { name, min, max, step });
        }
        let grid = GridSpec::new(dims)?;
        let total = grid.total_nodes();
        let kind = cur.u8()?;
        if kind != 1 && kind != 2 {
            return Err(EnvelopeError::Malformed("unknown payload kind"));
        }
        let metric = cur.f64_array(total)?;
        let constraints = if kind == 2 {
            let k = cur.u32()? as usize;
            let mut pdims = Vec::with_capacity(k);
            for _ in 0..k {
                let j = cur.u32()? as usize;
                if j >= grid.d() {
                    return Err(EnvelopeError::BadProtectedDim(j));
                }
                pdims.push(j);
            }
            let mut lo = Vec::with_capacity(k);
            let mut hi = Vec::with_capacity(k);
            for _ in 0..k {
                lo.push(cur.f64_array(total)?);
                hi.push(cur.f64_array(total)?);
            }
            Some(ConstraintField { dims: pdims, lo, hi })
        } else {
            None
        };
        let crc_stored = cur.u32()?;
        if cur.pos != bytes.len() {
            return Err(EnvelopeError::Malformed("trailing bytes after checksum"));
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&bytes[..bytes.len() - 4]);
        if hasher.finalize() != crc_stored {
            return Err(EnvelopeError::ChecksumMismatch);
        }
        Ok(EnvelopeDatabase { grid, metric, epsilon: DEFAULT_EPSILON, constraints })
    }

    /// CSV view of the metric field: one row per node in storage order.
    pub fn metric_to_csv(&self) -> String {
        let mut out = String::new();
        for dim in self.grid.dims() {
            out.push_str(&dim.name);
            out.push(',');
        }
        out.push_str("m_env\n");
        for node in 0..self.grid.total_nodes() {
            for c in self.grid.node_coords(node) {
                out.push_str(&format!("{:.16e},", c));
            }
            out.push_str(&format!("{:.16e}\n", self.metric[node]));
        }
        out
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EnvelopeError> {
        if self.pos + n > self.bytes.len() {
            return Err(EnvelopeError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, EnvelopeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, EnvelopeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, EnvelopeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, EnvelopeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_array(&mut self, n: usize) -> Result<Vec<f64>, EnvelopeError> {
        let raw = self.take(8 * n)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dim(name: &str, min: f64, max: f64, step: f64) -> GridDim {
        GridDim { name: name.to_string(), min, max, step }
    }

    fn membership(grid: GridSpec, values: Vec<f64>) -> MembershipField {
        MembershipField { grid, values, norm: 1.0 }
    }

    #[test]
    fn default_grid_shape_matches_published_table() {
        let g = GridSpec::default7();
        assert_eq!(g.counts(), vec![11, 11, 5, 25, 19, 6, 5]);
        assert_eq!(g.total_nodes(), 8_621_250);
        let names: Vec<&str> = g.dims().iter().map(|d| d.name.as_str()).collect();
        assert_eq!(names, ["p", "q", "r", "alpha", "beta", "vg", "h"]);
        assert_relative_eq!(g.dims()[3].max, 60.0f64.to_radians(), max_relative = 1e-15);
    }

    #[test]
    fn grid_validation_rejects_bad_specs() {
        assert!(matches!(GridSpec::new(vec![]), Err(EnvelopeError::EmptyGrid)));
        assert!(matches!(
            GridSpec::new(vec![dim("x", 0.0, 1.0, 0.3)]),
            Err(EnvelopeError::NonIntegralSpan { .. })
        ));
        assert!(matches!(
            GridSpec::new(vec![dim("x", 0.0, 1.0, 1.0), dim("x", 0.0, 1.0, 1.0)]),
            Err(EnvelopeError::DuplicateName { .. })
        ));
        assert!(matches!(
            GridSpec::new(vec![dim("x", 0.0, 0.0, 1.0)]),
            Err(EnvelopeError::BadDimension { .. })
        ));
    }

    #[test]
    fn prob_field_applies_log_floor() {
        let g = GridSpec::new(vec![dim("x", 0.0, 3.0, 1.0)]).unwrap();
        let m = membership(g, vec![1.0, 0.0, (-2.0f64).exp(), 0.5]);
        let db = build_prob_field(&m, 1e-6).unwrap();
        assert_eq!(db.metric[0], 0.0);
        assert_relative_eq!(db.metric[1], -13.8155105579643, max_relative = 1e-12);
        assert_relative_eq!(db.metric[2], -2.0, max_relative = 1e-12);
        assert!(matches!(build_prob_field(&m, 0.0), Err(EnvelopeError::BadEpsilon(_))));
        assert!(matches!(build_prob_field(&m, 1.0), Err(EnvelopeError::BadEpsilon(_))));
    }

    fn coords(alpha: f64, q: f64) -> EnvelopeCoords {
        EnvelopeCoords { p: 0.0, q, r: 0.0, alpha, beta: 0.0, vg: 0.0, h: 0.0 }
    }

    fn toy_2d() -> EnvelopeDatabase {
        // alpha in 0..4 step 1 (5 nodes), q in 0..3 step 1 (4 nodes),
        // metric = 0.5*alpha - 0.25*q, exactly linear.
        let g = GridSpec::new(vec![dim("alpha", 0.0, 4.0, 1.0), dim("q", 0.0, 3.0, 1.0)]).unwrap();
        let mut vals = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                vals.push(0.5 * i as f64 - 0.25 * j as f64);
            }
        }
        EnvelopeDatabase { grid: g, metric: vals, epsilon: DEFAULT_EPSILON, constraints: None }
    }

    #[test]
    fn node_queries_return_stored_values_exactly() {
        let db = toy_2d();
        for i in 0..5 {
            for j in 0..4 {
                let q = db.query_metric(&coords(i as f64, j as f64)).unwrap();
                assert_eq!(q.m_env, db.metric[i * 4 + j]);
                assert!(!q.clamped);
            }
        }
    }

    #[test]
    fn linear_field_gradient_is_exact() {
        let db = toy_2d();
        for (a, q) in [(0.5, 0.5), (2.3, 1.7), (0.0, 0.0), (4.0, 3.0), (3.9, 0.1)] {
            let res = db.query_metric(&coords(a, q)).unwrap();
            assert_relative_eq!(res.m_env, 0.5 * a - 0.25 * q, epsilon = 1e-12);
            assert_relative_eq!(res.j_env[0], 0.5, epsilon = 1e-9);
            assert_relative_eq!(res.j_env[1], -0.25, epsilon = 1e-9);
        }
    }

    #[test]
    fn outside_queries_clamp_and_flag() {
        let db = toy_2d();
        let res = db.query_metric(&coords(7.0, -2.0)).unwrap();
        assert!(res.clamped);
        let edge = db.query_metric(&coords(4.0, 0.0)).unwrap();
        assert_eq!(res.m_env, edge.m_env);
    }

    #[test]
    fn unknown_dimension_names_are_rejected() {
        let g = GridSpec::new(vec![dim("spam", 0.0, 1.0, 1.0)]).unwrap();
        let db = EnvelopeDatabase {
            grid: g,
            metric: vec![0.0, 1.0],
            epsilon: DEFAULT_EPSILON,
            constraints: None,
        };
        assert!(matches!(
            db.query_metric(&coords(0.0, 0.0)),
            Err(EnvelopeError::UnknownDimension { .. })
        ));
    }

    #[test]
    fn reduced_grids_map_coordinates_by_name() {
        // 1-D grid over q only; alpha in the state must be ignored.
        let g = GridSpec::new(vec![dim("q", -1.0, 1.0, 0.5)]).unwrap();
        let db = EnvelopeDatabase {
            grid: g,
            metric: vec![0.0, 1.0, 4.0, 1.0, 0.0],
            epsilon: DEFAULT_EPSILON,
            constraints: None,
        };
        let res = db.query_metric(&coords(123.0, 0.25)).unwrap();
        assert_relative_eq!(res.m_env, 2.5, epsilon = 1e-12);
    }

    #[test]
    fn contiguous_run_constraints_in_one_dimension() {
        let g = GridSpec::new(vec![dim("alpha", 0.0, 6.0, 1.0)]).unwrap();
        // Inside nodes at indices 2..=4 (threshold with k0=1 is ~0.6065).
        let mu = vec![0.0, 0.1, 0.7, 0.9, 0.65, 0.2, 0.0];
        let m = membership(g, mu);
        let cf = build_constraint_field(&m, 1.0, &[0]).unwrap();
        for t in 2..=4 {
            assert_eq!(cf.lo[0][t], 2.0);
            assert_eq!(cf.hi[0][t], 4.0);
        }
        // Outside nodes copy the run bounds of the nearest inside node.
        for t in [0usize, 1, 5, 6] {
            assert_eq!(cf.lo[0][t], 2.0);
            assert_eq!(cf.hi[0][t], 4.0);
        }
    }

    #[test]
    fn single_inside_node_pins_constraints_to_itself() {
        let g =
            GridSpec::new(vec![dim("alpha", 0.0, 2.0, 1.0), dim("q", 0.0, 2.0, 1.0)]).unwrap();
        let mut mu = vec![0.0; 9];
        mu[4] = 1.0;
        let m = membership(g, mu);
        let cf = build_constraint_field(&m, 3.0, &[0, 1]).unwrap();
        for node in 0..9 {
            assert_eq!(cf.lo[0][node], 1.0);
            assert_eq!(cf.hi[0][node], 1.0);
            assert_eq!(cf.lo[1][node], 1.0);
            assert_eq!(cf.hi[1][node], 1.0);
        }
    }

    #[test]
    fn empty_binarized_envelope_is_an_error() {
        let g = GridSpec::new(vec![dim("x", 0.0, 2.0, 1.0)]).unwrap();
        let m = membership(g, vec![0.0, 0.001, 0.0]);
        assert!(matches!(
            build_constraint_field(&m, 1.0, &[0]),
            Err(EnvelopeError::EmptyBinarized { .. })
        ));
    }

    #[test]
    fn gaussian_bump_constraints_match_per_line_scan() {
        // 2-D bump; oracle recomputes every node's run bounds directly.
        let g = GridSpec::new(vec![dim("alpha", -2.0, 2.0, 0.5), dim("q", -2.0, 2.0, 0.5)])
            .unwrap();
        let (na, nq) = (9usize, 9usize);
        let mut mu = vec![0.0; na * nq];
        for i in 0..na {
            for j in 0..nq {
                let a = -2.0 + 0.5 * i as f64;
                let q = -2.0 + 0.5 * j as f64;
                mu[i * nq + j] = (-(a * a + 1.8 * q * q) / 1.1).exp();
            }
        }
        let k0 = 1.0;
        let thr = binarize_threshold(k0);
        let m = membership(g.clone(), mu.clone());
        let cf = build_constraint_field(&m, k0, &[0, 1]).unwrap();
        for i in 0..na {
            for j in 0..nq {
                let node = i * nq + j;
                if mu[node] < thr {
                    continue;
                }
                // Walk the alpha axis from this node.
                let (mut a0, mut a1) = (i, i);
                while a0 > 0 && mu[(a0 - 1) * nq + j] >= thr {
                    a0 -= 1;
                }
                while a1 + 1 < na && mu[(a1 + 1) * nq + j] >= thr {
                    a1 += 1;
                }
                assert_eq!(cf.lo[0][node], g.dims()[0].coord(a0));
                assert_eq!(cf.hi[0][node], g.dims()[0].coord(a1));
                let (mut q0, mut q1) = (j, j);
                while q0 > 0 && mu[i * nq + q0 - 1] >= thr {
                    q0 -= 1;
                }
                while q1 + 1 < nq && mu[i * nq + q1 + 1] >= thr {
                    q1 += 1;
                }
                assert_eq!(cf.lo[1][node], g.dims()[1].coord(q0));
                assert_eq!(cf.hi[1][node], g.dims()[1].coord(q1));
                // The node's own coordinates sit inside its intervals.
                let c = g.node_coords(node);
                assert!(cf.lo[0][node] <= c[0] && c[0] <= cf.hi[0][node]);
                assert!(cf.lo[1][node] <= c[1] && c[1] <= cf.hi[1][node]);
            }
        }
    }

    #[test]
    fn outside_nodes_copy_a_true_nearest_inside_node() {
        // Irregular inside set; verify the chosen site is at the
        // brute-force minimal distance (ties allowed either way).
        let g = GridSpec::new(vec![
            dim("alpha", 0.0, 4.0, 1.0),
            dim("beta", 0.0, 3.0, 1.0),
            dim("q", 0.0, 2.0, 1.0),
        ])
        .unwrap();
        let counts = g.counts();
        let total = g.total_nodes();
        let mut mu = vec![0.0; total];
        // A few scattered inside nodes.
        for &flat in &[0usize, 17, 23, 40, 41, 55] {
            mu[flat] = 1.0;
        }
        let m = membership(g.clone(), mu.clone());
        let thr = binarize_threshold(1.0);
        let inside: Vec<bool> = mu.iter().map(|&v| v >= thr).collect();
        let site = nearest_inside_sites(&inside, &counts, &g.strides());
        let unravel = |flat: usize| {
            let s = g.strides();
            (0..3).map(|k| (flat / s[k] % counts[k]) as f64).collect::<Vec<f64>>()
        };
        for node in 0..total {
            let nc = unravel(node);
            let best: f64 = (0..total)
                .filter(|&c| inside[c])
                .map(|c| {
                    let cc = unravel(c);
                    (0..3).map(|k| (nc[k] - cc[k]).powi(2)).sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            let sc = unravel(site[node]);
            let got: f64 = (0..3).map(|k| (nc[k] - sc[k]).powi(2)).sum();
            assert!(inside[site[node]]);
            assert_eq!(got, best, "node {node}: site distance {got} vs best {best}");
        }
        // And the constraint field actually copies that site's intervals.
        let cf = build_constraint_field(&m, 1.0, &[0, 1, 2]).unwrap();
        for node in 0..total {
            if !inside[node] {
                let s = site[node];
                for k in 0..3 {
                    assert_eq!(cf.lo[k][node], cf.lo[k][s]);
                    assert_eq!(cf.hi[k][node], cf.hi[k][s]);
                }
            }
        }
    }

    #[test]
    fn constraint_queries_use_nearest_node() {
        let g = GridSpec::new(vec![dim("alpha", 0.0, 4.0, 1.0)]).unwrap();
        let mu = vec![0.0, 0.8, 0.9, 0.8, 0.0];
        let m = membership(g.clone(), mu);
        let cf = build_constraint_field(&m, 1.0, &[0]).unwrap();
        let db = EnvelopeDatabase {
            grid: g,
            metric: vec![0.0; 5],
            epsilon: DEFAULT_EPSILON,
            constraints: Some(cf),
        };
        let q = db.query_constraints(&coords(2.4, 0.0)).unwrap();
        assert_eq!(q.lo, vec![1.0]);
        assert_eq!(q.hi, vec![3.0]);
        assert!(!q.clamped);
        let q = db.query_constraints(&coords(9.0, 0.0)).unwrap();
        assert_eq!(q.lo, vec![1.0]);
        assert!(q.clamped);
        let bare = toy_2d();
        assert!(matches!(
            bare.query_constraints(&coords(0.0, 0.0)),
            Err(EnvelopeError::NoConstraints)
        ));
    }

    fn toy_db_with_constraints() -> EnvelopeDatabase {
        let g = GridSpec::new(vec![dim("alpha", 0.0, 3.0, 1.0), dim("q", -1.0, 1.0, 1.0)])
            .unwrap();
        let mu: Vec<f64> = (0..12).map(|i| ((i % 5) as f64) / 5.0 + 0.05).collect();
        let m = membership(g.clone(), mu.clone());
        let cf = build_constraint_field(&m, 1.0, &[1]).unwrap();
        build_prob_field(&m, 1e-6).unwrap().with_constraints(cf)
    }

    #[test]
    fn serialization_roundtrip_is_bit_identical() {
        let db = toy_db_with_constraints();
        let bytes = db.to_bytes();
        let back = EnvelopeDatabase::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, db);
        let bare = toy_2d();
        let bytes = bare.to_bytes();
        assert_eq!(EnvelopeDatabase::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn corrupted_payload_fails_the_checksum() {
        let db = toy_db_with_constraints();
        let mut bytes = db.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            EnvelopeDatabase::from_bytes(&bytes),
            Err(EnvelopeError::ChecksumMismatch)
        ));
    }

    #[test]
    fn truncated_and_foreign_files_are_distinct_errors() {
        let db = toy_db_with_constraints();
        let bytes = db.to_bytes();
        assert!(matches!(
            EnvelopeDatabase::from_bytes(&bytes[..bytes.len() - 9]),
            Err(EnvelopeError::Truncated)
        ));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(EnvelopeDatabase::from_bytes(&wrong), Err(EnvelopeError::BadMagic)));
        let mut futuristic = bytes.clone();
        futuristic[6] = 9;
        assert!(matches!(
            EnvelopeDatabase::from_bytes(&futuristic),
            Err(EnvelopeError::BadVersion(9))
        ));
    }

    #[test]
    fn dimension_names_survive_verbatim() {
        let g = GridSpec::new(vec![dim("vg", 100.0, 200.0, 50.0)]).unwrap();
        let db = EnvelopeDatabase {
            grid: g,
            metric: vec![-1.0, -2.0, -3.0],
            epsilon: DEFAULT_EPSILON,
            constraints: None,
        };
        let back = EnvelopeDatabase::from_bytes(&db.to_bytes()).unwrap();
        assert_eq!(back.grid.dims()[0].name, "vg");
    }

    #[test]
    fn metric_csv_lists_nodes_in_storage_order() {
        let db = toy_2d();
        let csv = db.metric_to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "alpha,q,m_env");
        let first = lines.next().unwrap();
        let fields: Vec<f64> = first.split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(fields, vec![0.0, 0.0, 0.0]);
        assert_eq!(csv.lines().count(), 1 + db.grid.total_nodes());
    }
}
