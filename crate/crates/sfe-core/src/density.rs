//! Kernel density estimation over trajectory endpoints and the fuzzy
//! membership field fusing the forward and backward densities.
//!
//! The estimator is a product Gaussian kernel with per-dimension
//! Silverman bandwidths. Grid evaluation runs in parallel over slabs of
//! the leading dimension; every node accumulates its sample
//! contributions in the same fixed order regardless of how slabs land
//! on threads, so results are bitwise reproducible. On large grids the
//! kernel support is truncated at four bandwidths per dimension, which
//! bounds the dropped mass per node by N*exp(-8) kernel terms.

use crate::envelope::GridSpec;
use rayon::prelude::*;
use thiserror::Error;

/// Kernel support radius, in bandwidths, used when truncation is on.
pub const TRUNCATION_RADIUS: f64 = 4.0;
/// Grid size above which `build_membership_field` enables truncation.
pub const TRUNCATION_NODE_THRESHOLD: usize = 100_000;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("need at least {want} samples, got {got}")]
    TooFewSamples { got: usize, want: usize },
    #[error("sample array of length {len} is not a whole number of {d}-dimensional rows")]
    BadLayout { len: usize, d: usize },
    #[error("sample {index} has a non-finite component")]
    BadSample { index: usize },
    #[error("dimension {dim} has zero sample variance, bandwidth undefined")]
    DegenerateDimension { dim: usize },
    #[error("bandwidth for dimension {dim} must be finite and positive")]
    BadBandwidth { dim: usize },
    #[error("operand dimension {got} does not match expected {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("empty envelope: the density product vanishes on the whole grid")]
    EmptyEnvelope,
}

/// Per-dimension Silverman bandwidths h_j = sigma_j *
/// (4 / ((d + 2) N))^(1 / (d + 4)) with the unbiased (N-1) standard
/// deviation.
pub fn silverman_bandwidths(samples: &[f64], d: usize) -> Result<Vec<f64>, DensityError> {
    if d == 0 || samples.len() % d != 0 {
        return Err(DensityError::BadLayout { len: samples.len(), d });
    }
    let n = samples.len() / d;
    if n < 2 {
        return Err(DensityError::TooFewSamples { got: n, want: 2 });
    }
    let factor = (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0));
    let mut h = Vec::with_capacity(d);
    for j in 0..d {
        let mean = (0..n).map(|i| samples[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (samples[i * d + j] - mean).powi(2)).sum::<f64>()
            / (n as f64 - 1.0);
        let sigma = var.sqrt();
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(DensityError::DegenerateDimension { dim: j });
        }
        h.push(sigma * factor);
    }
    Ok(h)
}

/// Fitted product-Gaussian density over N samples in d dimensions.
#[derive(Debug, Clone)]
pub struct KdeModel {
    samples: Vec<f64>,
    n: usize,
    d: usize,
    bandwidths: Vec<f64>,
}

impl KdeModel {
    /// Fit with Silverman bandwidths. `samples` is row-major N x d.
    pub fn fit(samples: Vec<f64>, d: usize) -> Result<Self, DensityError> {
        let h = silverman_bandwidths(&samples, d)?;
        Self::with_bandwidths(samples, d, h)
    }

    pub fn with_bandwidths(
        samples: Vec<f64>,
        d: usize,
        bandwidths: Vec<f64>,
    ) -> Result<Self, DensityError> {
        if d == 0 || samples.len() % d != 0 {
            return Err(DensityError::BadLayout { len: samples.len(), d });
        }
        let n = samples.len() / d;
        if n == 0 {
            return Err(DensityError::TooFewSamples { got: 0, want: 1 });
        }
        if let Some(bad) = samples.iter().position(|v| !v.is_finite()) {
            return Err(DensityError::BadSample { index: bad / d });
        }
        if bandwidths.len() != d {
            return Err(DensityError::DimensionMismatch { got: bandwidths.len(), want: d });
        }
        for (j, &h) in bandwidths.iter().enumerate() {
            if !(h > 0.0) || !h.is_finite() {
                return Err(DensityError::BadBandwidth { dim: j });
            }
        }
        Ok(KdeModel { samples, n, d, bandwidths })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// 1 / (N * prod h_j * (2 pi)^(d/2)).
    fn scale(&self) -> f64 {
        let two_pi = 2.0 * std::f64::consts::PI;
        let hprod: f64 = self.bandwidths.iter().product();
        1.0 / (self.n as f64 * hprod * two_pi.powf(self.d as f64 / 2.0))
    }
}

/// Exact density at one point: every sample contributes, no truncation.
pub fn kde_evaluate(model: &KdeModel, x: &[f64]) -> Result<f64, DensityError> {
    if x.len() != model.d {
        return Err(DensityError::DimensionMismatch { got: x.len(), want: model.d });
    }
    let mut sum = 0.0;
    for i in 0..model.n {
        let row = &model.samples[i * model.d..(i + 1) * model.d];
        let e: f64 = row
            .iter()
            .zip(x.iter().zip(model.bandwidths.iter()))
            .map(|(&y, (&xq, &h))| {
                let t = (xq - y) / h;
                t * t
            })
            .sum();
        sum += (-0.5 * e).exp();
    }
    Ok(sum * model.scale())
}

/// Index window of nodes within `radius` bandwidths of `y` along one
/// grid dimension; None when no node is in range.
fn dim_window(
    min: f64,
    step: f64,
    count: usize,
    y: f64,
    h: f64,
    radius: f64,
) -> Option<(usize, usize)> {
    let lo = ((y - radius * h - min) / step).ceil();
    let hi = ((y + radius * h - min) / step).floor();
    let lo = lo.max(0.0) as isize;
    let hi = hi.min(count as f64 - 1.0) as isize;
    if lo > hi || hi < 0 || lo >= count as isize {
        return None;
    }
    Some((lo as usize, hi as usize))
}

/// Density on every grid node, row-major, last dimension fastest.
///
/// Parallelism slices the grid into slabs along dimension 0; each node
/// sums its sample terms in sample order, so the output is bitwise
/// identical across thread counts. With `truncate` set, samples only
/// touch nodes within [`TRUNCATION_RADIUS`] bandwidths per dimension.
pub fn kde_on_grid(
    model: &KdeModel,
    grid: &GridSpec,
    truncate: bool,
) -> Result<Vec<f64>, DensityError> {
    let d = grid.d();
    if d != model.d {
        return Err(DensityError::DimensionMismatch { got: d, want: model.d });
    }
    let counts = grid.counts();
    let strides = grid.strides();
    let block = strides[0];
    let scale = model.scale();
    let radius = if truncate { TRUNCATION_RADIUS } else { f64::INFINITY };

    let windows = |j: usize, y: f64| -> Option<(usize, usize)> {
        if radius.is_finite() {
            dim_window(
                grid.dims()[j].min,
                grid.dims()[j].step,
                counts[j],
                y,
                model.bandwidths[j],
                radius,
            )
        } else {
            Some((0, counts[j] - 1))
        }
    };

    let slabs: Vec<Vec<f64>> = (0..counts[0])
        .into_par_iter()
        .map(|i0| {
            let mut local = vec![0.0f64; block];
            let mut kernels: Vec<(usize, Vec<f64>)> = Vec::with_capacity(d - 1);
            'samples: for i in 0..model.n {
                let row = &model.samples[i * model.d..(i + 1) * model.d];
                let (lo0, hi0) = match windows(0, row[0]) {
                    Some(w) => w,
                    None => continue,
                };
                if i0 < lo0 || i0 > hi0 {
                    continue;
                }
                let t0 = (grid.dims()[0].coord(i0) - row[0]) / model.bandwidths[0];
                let k0 = (-0.5 * t0 * t0).exp();
                kernels.clear();
                for j in 1..d {
                    let (lo, hi) = match windows(j, row[j]) {
                        Some(w) => w,
                        None => continue 'samples,
                    };
                    let vals: Vec<f64> = (lo..=hi)
                        .map(|t| {
                            let z = (grid.dims()[j].coord(t) - row[j]) / model.bandwidths[j];
                            (-0.5 * z * z).exp()
                        })
                        .collect();
                    kernels.push((lo, vals));
                }
                scatter(&mut local, &strides[1..], &kernels, 0, 0, k0);
            }
            for v in &mut local {
                *v *= scale;
            }
            local
        })
        .collect();

    let mut out = Vec::with_capacity(grid.total_nodes());
    for s in slabs {
        out.extend_from_slice(&s);
    }
    Ok(out)
}

/// Accumulate the separable kernel product into the slab-local block.
fn scatter(
    local: &mut [f64],
    strides: &[usize],
    kernels: &[(usize, Vec<f64>)],
    dim: usize,
    offset: usize,
    partial: f64,
) {
    if dim == kernels.len() {
        local[offset] += partial;
        return;
    }
    let (lo, ref vals) = kernels[dim];
    if dim + 1 == kernels.len() {
        // Last dimension has unit stride; accumulate straight through.
        let base = offset + lo;
        for (t, &kv) in vals.iter().enumerate() {
            local[base + t] += partial * kv;
        }
        return;
    }
    let stride = strides[dim];
    for (t, &kv) in vals.iter().enumerate() {
        scatter(local, strides, kernels, dim + 1, offset + (lo + t) * stride, partial * kv);
    }
}

/// Fuzzy membership grid: mu = f_fwd * f_bwd / norm, clamped to [0, 1],
/// where norm is the largest density product over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    /// Peak of the raw density product, the scaling denominator.
    pub norm: f64,
}

/// Single-point membership from the two densities and the grid norm.
pub fn membership_from_densities(
    f_fwd: f64,
    f_bwd: f64,
    norm: f64,
) -> Result<f64, DensityError> {
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(DensityError::EmptyEnvelope);
    }
    Ok((f_fwd * f_bwd / norm).clamp(0.0, 1.0))
}

/// Membership over a grid with truncation chosen by grid size.
pub fn build_membership_field(
    fwd: &KdeModel,
    bwd: &KdeModel,
    grid: &GridSpec,
) -> Result<MembershipField, DensityError> {
    build_membership_field_with(fwd, bwd, grid, grid.total_nodes() > TRUNCATION_NODE_THRESHOLD)
}

/// Membership over a grid with truncation forced on or off.
///
/// The peak node scales to exactly 1; the whole field lands in [0, 1].
/// A product that vanishes everywhere (disjoint forward and backward
/// clouds) is an error, not an all-zero field.
pub fn build_membership_field_with(
    fwd: &KdeModel,
    bwd: &KdeModel,
    grid: &GridSpec,
    truncate: bool,
) -> Result<MembershipField, DensityError> {
    if bwd.d() != fwd.d() {
        return Err(DensityError::DimensionMismatch { got: bwd.d(), want: fwd.d() });
    }
    let ff = kde_on_grid(fwd, grid, truncate)?;
    let fb = kde_on_grid(bwd, grid, truncate)?;
    let mut product: Vec<f64> = ff.iter().zip(fb.iter()).map(|(&a, &b)| a * b).collect();
    let norm = product.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(DensityError::EmptyEnvelope);
    }
    for v in &mut product {
        *v = (*v / norm).clamp(0.0, 1.0);
    }
    Ok(MembershipField { grid: grid.clone(), values: product, norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::GridDim;
    use approx::assert_relative_eq;

    fn grid1(min: f64, max: f64, step: f64) -> GridSpec {
        GridSpec::new(vec![GridDim { name: "x".into(), min, max, step }]).unwrap()
    }

    #[test]
    fn silverman_factor_matches_frozen_values() {
        // d = 1, N = 100: (4 / 300)^(1/5).
        let xs: Vec<f64> = (0..100).map(|i| (i as f64) * 0.31 - 7.0).collect();
        let h = silverman_bandwidths(&xs, 1).unwrap();
        let mean = xs.iter().sum::<f64>() / 100.0;
        let sd =
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 99.0).sqrt();
        assert_relative_eq!(h[0], sd * 0.42168460634275, max_relative = 1e-12);

        // d = 7, N = 10000: (4 / 90000)^(1/11).
        let n = 10000;
        let mut s7 = Vec::with_capacity(n * 7);
        for i in 0..n {
            for j in 0..7 {
                s7.push(((i * 7 + j) as f64 * 0.618).sin());
            }
        }
        let h7 = silverman_bandwidths(&s7, 7).unwrap();
        for j in 0..7 {
            let col: Vec<f64> = (0..n).map(|i| s7[i * 7 + j]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let sd =
                (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
            assert_relative_eq!(h7[j], sd * 0.402112009359182, max_relative = 1e-12);
        }
    }

    #[test]
    fn bandwidths_scale_linearly_with_spread() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64).cos() * 2.0 + 0.3).collect();
        let doubled: Vec<f64> = xs.iter().map(|x| x * 2.0).collect();
        let h1 = silverman_bandwidths(&xs, 1).unwrap();
        let h2 = silverman_bandwidths(&doubled, 1).unwrap();
        assert_relative_eq!(h2[0], 2.0 * h1[0], max_relative = 1e-14);
    }

    #[test]
    fn degenerate_dimension_is_reported_by_index() {
        let mut s = Vec::new();
        for i in 0..10 {
            s.push(i as f64);
            s.push(5.0);
        }
        match silverman_bandwidths(&s, 2) {
            Err(DensityError::DegenerateDimension { dim }) => assert_eq!(dim, 1),
            other => panic!("expected degenerate dimension, got {other:?}"),
        }
        assert!(matches!(
            silverman_bandwidths(&[1.0, 2.0, 3.0], 2),
            Err(DensityError::BadLayout { .. })
        ));
        assert!(matches!(
            silverman_bandwidths(&[1.0], 1),
            Err(DensityError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn unit_kernel_matches_standard_normal() {
        let model = KdeModel::with_bandwidths(vec![0.0], 1, vec![1.0]).unwrap();
        assert_relative_eq!(
            kde_evaluate(&model, &[0.0]).unwrap(),
            0.398942280401433,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            kde_evaluate(&model, &[1.0]).unwrap(),
            0.241970724519143,
            max_relative = 1e-12
        );
    }

    #[test]
    fn density_is_symmetric_for_symmetric_samples() {
        let model =
            KdeModel::with_bandwidths(vec![-1.5, -0.25, 0.25, 1.5], 1, vec![0.7]).unwrap();
        for x in [0.1, 0.5, 1.0, 2.0, 3.7] {
            let fp = kde_evaluate(&model, &[x]).unwrap();
            let fm = kde_evaluate(&model, &[-x]).unwrap();
            assert_relative_eq!(fp, fm, max_relative = 1e-13);
        }
    }

    #[test]
    fn one_dimensional_density_integrates_to_one() {
        let model =
            KdeModel::with_bandwidths(vec![-0.3, 0.2, 0.45, 1.1], 1, vec![0.5]).unwrap();
        let grid = grid1(-6.0, 7.0, 0.01);
        let vals = kde_on_grid(&model, &grid, false).unwrap();
        let step = 0.01;
        let integral: f64 = vals.iter().sum::<f64>() * step
            - 0.5 * (vals[0] + vals[vals.len() - 1]) * step;
        assert_relative_eq!(integral, 1.0, epsilon = 1e-2);
    }

    #[test]
    fn two_dimensional_density_integrates_to_one() {
        let samples = vec![0.0, 0.0, 1.0, -0.5, -0.4, 0.8];
        let model = KdeModel::with_bandwidths(samples, 2, vec![0.6, 0.5]).unwrap();
        let grid = GridSpec::new(vec![
            GridDim { name: "x".into(), min: -5.0, max: 6.0, step: 0.05 },
            GridDim { name: "y".into(), min: -5.0, max: 5.0, step: 0.05 },
        ])
        .unwrap();
        let vals = kde_on_grid(&model, &grid, false).unwrap();
        let integral: f64 = vals.iter().sum::<f64>() * 0.05 * 0.05;
        assert_relative_eq!(integral, 1.0, epsilon = 1e-2);
    }

    #[test]
    fn grid_evaluation_matches_pointwise_evaluation() {
        let samples = vec![0.1, 0.3, -0.7, 0.9, 0.5, -0.2, -0.1, 0.0];
        let model = KdeModel::with_bandwidths(samples, 2, vec![0.4, 0.6]).unwrap();
        let grid = GridSpec::new(vec![
            GridDim { name: "x".into(), min: -1.0, max: 1.0, step: 0.5 },
            GridDim { name: "y".into(), min: -1.0, max: 1.0, step: 0.25 },
        ])
        .unwrap();
        let vals = kde_on_grid(&model, &grid, false).unwrap();
        for node in 0..grid.total_nodes() {
            let c = grid.node_coords(node);
            let exact = kde_evaluate(&model, &c).unwrap();
            assert_relative_eq!(vals[node], exact, max_relative = 1e-12);
        }
        // Bitwise determinism across repeated parallel runs.
        let again = kde_on_grid(&model, &grid, false).unwrap();
        assert!(vals.iter().zip(again.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncation_error_respects_the_tail_bound() {
        let samples = vec![-2.0, -0.5, 0.0, 0.3, 1.7];
        let n = samples.len() as f64;
        let h = 0.8;
        let model = KdeModel::with_bandwidths(samples, 1, vec![h]).unwrap();
        let grid = grid1(-10.0, 10.0, 0.1);
        let exact = kde_on_grid(&model, &grid, false).unwrap();
        let truncated = kde_on_grid(&model, &grid, true).unwrap();
        let bound = (-0.5 * TRUNCATION_RADIUS * TRUNCATION_RADIUS).exp()
            / (h * (2.0 * std::f64::consts::PI).sqrt());
        let mut worst = 0.0f64;
        let mut differs = false;
        for (e, t) in exact.iter().zip(truncated.iter()) {
            assert!(t <= e);
            worst = worst.max(e - t);
            differs |= e != t;
        }
        assert!(differs, "truncation should drop distant tails on this grid");
        assert!(worst <= n * bound, "worst error {worst} above bound {}", n * bound);
    }

    #[test]
    fn membership_scaling_example() {
        assert_relative_eq!(
            membership_from_densities(0.1, 0.1, 0.04).unwrap(),
            0.25,
            max_relative = 1e-12
        );
        assert_eq!(membership_from_densities(5.0, 5.0, 1.0).unwrap(), 1.0);
        assert!(matches!(
            membership_from_densities(0.1, 0.1, 0.0),
            Err(DensityError::EmptyEnvelope)
        ));
    }

    #[test]
    fn membership_peaks_at_one_between_offset_clouds() {
        let fwd = KdeModel::with_bandwidths(vec![-1.1, -0.9, -1.0], 1, vec![0.5]).unwrap();
        let bwd = KdeModel::with_bandwidths(vec![0.9, 1.1, 1.0], 1, vec![0.5]).unwrap();
        let grid = grid1(-3.0, 3.0, 0.05);
        let m = build_membership_field(&fwd, &bwd, &grid).unwrap();
        let (imax, &vmax) = m
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert_eq!(vmax, 1.0);
        assert!(m.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Equal clouds, equal bandwidths: the product peaks midway.
        let xmax = grid.node_coords(imax)[0];
        assert!(xmax.abs() <= 0.05 + 1e-12, "peak at {xmax}, expected near 0");
    }

    #[test]
    fn disjoint_clouds_yield_an_empty_envelope_error() {
        let fwd = KdeModel::with_bandwidths(vec![-1000.0, -1000.5], 1, vec![0.1]).unwrap();
        let bwd = KdeModel::with_bandwidths(vec![1000.0, 1000.5], 1, vec![0.1]).unwrap();
        let grid = grid1(-2.0, 2.0, 0.5);
        assert!(matches!(
            build_membership_field_with(&fwd, &bwd, &grid, true),
            Err(DensityError::EmptyEnvelope)
        ));
    }
}
