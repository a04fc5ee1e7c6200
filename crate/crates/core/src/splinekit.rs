//! Univariate B-spline bases on equidistant knots and integer difference
//! matrices.
//!
//! These are the marginal building blocks of every tensor product used by the
//! smoother: `B_d` (one per grid axis) and `D_d` (one per penalty direction).

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("x = {x} lies outside the basis support [{lo}, {hi}]")]
    OutOfDomain { x: f64, lo: f64, hi: f64 },
}

/// Relative slack allowed at the ends of the support, in units of knot spacing.
const SUPPORT_SLACK: f64 = 1e-10;

/// Equally spaced knots spanning `[xmin - degree*h, xmax + degree*h]`,
/// `h = (xmax - xmin) / nseg`.
pub fn make_knots(xmin: f64, xmax: f64, nseg: usize, degree: usize) -> Result<Vec<f64>, SplineError> {
    if !xmin.is_finite() || !xmax.is_finite() {
        return Err(SplineError::InvalidArgument(format!(
            "knot bounds must be finite, got [{xmin}, {xmax}]"
        )));
    }
    if xmax <= xmin {
        return Err(SplineError::InvalidArgument(format!(
            "xmax ({xmax}) must exceed xmin ({xmin})"
        )));
    }
    if nseg < 1 {
        return Err(SplineError::InvalidArgument("nseg must be at least 1".into()));
    }
    let h = (xmax - xmin) / nseg as f64;
    let count = nseg + 2 * degree + 1;
    Ok((0..count).map(|i| xmin + (i as f64 - degree as f64) * h).collect())
}

/// A B-spline evaluation matrix for one grid axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalBasis {
    /// Grid axis this basis belongs to (1 = row, 2 = column, 3 = time), if known.
    pub axis: Option<usize>,
    pub x: Vec<f64>,
    pub knots: Vec<f64>,
    pub degree: usize,
    /// `x.len()` rows by `knots.len() - degree - 1` columns.
    pub matrix: DMatrix<f64>,
}

impl MarginalBasis {
    /// Cubic-style equidistant basis of dimension `dim` covering the range of `x`.
    ///
    /// The number of segments is `dim - degree`, so the basis dimension is a
    /// first-class input.
    pub fn equidistant(axis: usize, x: &[f64], dim: usize, degree: usize) -> Result<Self, SplineError> {
        if dim <= degree {
            return Err(SplineError::InvalidArgument(format!(
                "basis dimension {dim} must exceed the degree {degree}"
            )));
        }
        let (lo, hi) = finite_range(x)?;
        let knots = make_knots(lo, hi, dim - degree, degree)?;
        let mut basis = bspline_basis(x, &knots, degree)?;
        basis.axis = Some(axis);
        Ok(basis)
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
}

fn finite_range(x: &[f64]) -> Result<(f64, f64), SplineError> {
    if x.is_empty() {
        return Err(SplineError::InvalidArgument("empty coordinate vector".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in x {
        if !v.is_finite() {
            return Err(SplineError::InvalidArgument(format!("non-finite coordinate {v}")));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return Err(SplineError::InvalidArgument(
            "coordinates must span a non-degenerate range".into(),
        ));
    }
    Ok((lo, hi))
}

/// Evaluates the B-spline basis of the given degree at every `x`.
///
/// Points outside `[knots[degree], knots[len - degree - 1]]` are rejected.
pub fn bspline_basis(x: &[f64], knots: &[f64], degree: usize) -> Result<MarginalBasis, SplineError> {
    if knots.len() < 2 * degree + 2 {
        return Err(SplineError::InvalidArgument(format!(
            "{} knots cannot carry a degree-{degree} basis",
            knots.len()
        )));
    }
    if knots
        .windows(2)
        .any(|w| w[1].partial_cmp(&w[0]) != Some(std::cmp::Ordering::Greater))
    {
        return Err(SplineError::InvalidArgument("knots must be strictly increasing".into()));
    }
    let ncols = knots.len() - degree - 1;
    let lo = knots[degree];
    let hi = knots[knots.len() - degree - 1];
    let slack = SUPPORT_SLACK * (hi - lo);

    let mut matrix = DMatrix::zeros(x.len(), ncols);
    let mut local = vec![0.0; degree + 1];
    for (row, &xi) in x.iter().enumerate() {
        if !xi.is_finite() || xi < lo - slack || xi > hi + slack {
            return Err(SplineError::OutOfDomain { x: xi, lo, hi });
        }
        let xi = xi.clamp(lo, hi);
        let span = find_span(knots, degree, xi);
        eval_nonzero(knots, degree, span, xi, &mut local);
        for (k, &v) in local.iter().enumerate() {
            matrix[(row, span - degree + k)] = v;
        }
    }
    Ok(MarginalBasis {
        axis: None,
        x: x.to_vec(),
        knots: knots.to_vec(),
        degree,
        matrix,
    })
}

/// Index `i` with `knots[i] <= x < knots[i + 1]`, restricted to the support
/// spans; the right end of the support maps to the last span.
fn find_span(knots: &[f64], degree: usize, x: f64) -> usize {
    let last = knots.len() - degree - 2;
    if x >= knots[last + 1] {
        return last;
    }
    // knots[degree..=last+1] bracket the support
    let slice = &knots[degree..=last + 1];
    let pos = slice.partition_point(|&k| k <= x);
    degree + pos.saturating_sub(1)
}

/// The `degree + 1` non-vanishing basis functions on span `span` (triangular
/// de Boor scheme).
fn eval_nonzero(knots: &[f64], degree: usize, span: usize, x: f64, out: &mut [f64]) {
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    out[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = out[r] / (right[r + 1] + left[j - r]);
            out[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        out[j] = saved;
    }
}

/// `q`-th order difference operator on `c` coefficients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DifferenceOp {
    pub order: usize,
    pub ncoef: usize,
    /// `(c - q) x c`, integer entries.
    pub matrix: DMatrix<i64>,
}

impl DifferenceOp {
    pub fn to_f64(&self) -> DMatrix<f64> {
        self.matrix.map(|v| v as f64)
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    /// `DᵗD` in floating point.
    pub fn gram(&self) -> DMatrix<f64> {
        let d = self.to_f64();
        d.transpose() * d
    }
}

/// The `q`-fold composition of first differences on `c` coefficients.
pub fn difference_matrix(c: usize, q: usize) -> Result<DifferenceOp, SplineError> {
    if q < 1 {
        return Err(SplineError::InvalidArgument(
            "difference order must be at least 1".into(),
        ));
    }
    if c <= q {
        return Err(SplineError::InvalidArgument(format!(
            "coefficient count {c} must exceed the difference order {q}"
        )));
    }
    let mut d = DMatrix::<i64>::identity(c, c);
    for _ in 0..q {
        let rows = d.nrows() - 1;
        d = DMatrix::from_fn(rows, c, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    Ok(DifferenceOp {
        order: q,
        ncoef: c,
        matrix: d,
    })
}
