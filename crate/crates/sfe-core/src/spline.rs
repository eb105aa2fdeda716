//! Cubic splines on rectilinear grids.
//!
//! 1-D interpolation through knots with not-a-knot end conditions, so a
//! single cubic (or anything lower order) is reproduced exactly and the
//! boundary intervals keep full fourth-order accuracy. Two knots
//! degenerate to the straight line, three to the parabola. The 2-D
//! variant is the tensor product (spline along the second axis per row,
//! then a spline across the results), which reproduces grid nodes
//! exactly.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("need at least two knots, got {0}")]
    TooFewKnots(usize),
    #[error("knot abscissae must be strictly increasing")]
    NotIncreasing,
    #[error("knot/value length mismatch: {xs} abscissae vs {ys} values")]
    LengthMismatch { xs: usize, ys: usize },
}

/// Cubic spline through (xs, ys) with not-a-knot end conditions.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn fit(xs: &[f64], ys: &[f64]) -> Result<Self, SplineError> {
        let n = xs.len();
        if n < 2 {
            return Err(SplineError::TooFewKnots(n));
        }
        if ys.len() != n {
            return Err(SplineError::LengthMismatch { xs: n, ys: ys.len() });
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SplineError::NotIncreasing);
        }
        // Tridiagonal system for the interior second derivatives. The
        // not-a-knot conditions make the third derivative continuous at
        // the first and last interior knots; the end values m[0] and
        // m[n-1] are eliminated from the first and last rows and
        // recovered afterwards.
        let mut m = vec![0.0; n];
        if n == 3 {
            // Both conditions collapse the spline to one polynomial
            // through three points: the parabola, constant curvature.
            let h0 = xs[1] - xs[0];
            let h1 = xs[2] - xs[1];
            let dd = ((ys[2] - ys[1]) / h1 - (ys[1] - ys[0]) / h0) / (h0 + h1);
            m.fill(2.0 * dd);
        } else if n > 3 {
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            let mut sub = vec![0.0; k];
            let mut sup = vec![0.0; k];
            for i in 0..k {
                let h0 = xs[i + 1] - xs[i];
                let h1 = xs[i + 2] - xs[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                sub[i] = h0;
                sup[i] = h1;
                rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h1 - (ys[i + 1] - ys[i]) / h0);
            }
            // Eliminate m[0] = ((h0+h1) m[1] - h0 m[2]) / h1 from row 0
            // and its mirror image from the last row.
            let (h0, h1) = (xs[1] - xs[0], xs[2] - xs[1]);
            diag[0] = (h0 + h1) * (h0 + 2.0 * h1) / h1;
            sup[0] = (h1 * h1 - h0 * h0) / h1;
            let (ha, hb) = (xs[n - 2] - xs[n - 3], xs[n - 1] - xs[n - 2]);
            diag[k - 1] = (ha + hb) * (hb + 2.0 * ha) / ha;
            sub[k - 1] = (ha * ha - hb * hb) / ha;
            // Thomas algorithm.
            for i in 1..k {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sup[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - sup[i] * m[i + 2]) / diag[i];
            }
            m[0] = ((h0 + h1) * m[1] - h0 * m[2]) / h1;
            m[n - 1] = ((ha + hb) * m[n - 2] - hb * m[n - 3]) / ha;
        }
        Ok(CubicSpline { xs: xs.to_vec(), ys: ys.to_vec(), m })
    }

    /// Evaluate at `x`; clamps to the end intervals outside the knots
    /// (callers that must not extrapolate check bounds themselves).
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let i = match self.xs.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) if i >= n => n - 2,
            Err(i) => i - 1,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Tensor-product natural cubic spline over a (xs x ys) grid of values
/// `z[i][j] = f(xs[i], ys[j])`, stored row-major.
#[derive(Debug, Clone)]
pub struct BicubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    rows: Vec<CubicSpline>,
}

impl BicubicSpline {
    pub fn fit(xs: &[f64], ys: &[f64], z: &[f64]) -> Result<Self, SplineError> {
        if z.len() != xs.len() * ys.len() {
            return Err(SplineError::LengthMismatch { xs: xs.len() * ys.len(), ys: z.len() });
        }
        let rows = xs
            .iter()
            .enumerate()
            .map(|(i, _)| CubicSpline::fit(ys, &z[i * ys.len()..(i + 1) * ys.len()]))
            .collect::<Result<Vec<_>, _>>()?;
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(SplineError::NotIncreasing);
        }
        Ok(BicubicSpline { xs: xs.to_vec(), ys: ys.to_vec(), rows })
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let col: Vec<f64> = self.rows.iter().map(|r| r.eval(y)).collect();
        if self.xs.len() == 1 {
            return col[0];
        }
        CubicSpline::fit(&self.xs, &col).expect("abscissae validated at fit").eval(x)
    }

    pub fn x_knots(&self) -> &[f64] {
        &self.xs
    }

    pub fn y_knots(&self) -> &[f64] {
        &self.ys
    }
}
