//! Anisotropic and locally adaptive difference penalties on a three-way
//! coefficient array.
//!
//! For direction `d` the differencing operator on `vec(θ)` is
//!
//! ```text
//! K_1 = I ⊗ I ⊗ D_1,   K_2 = I ⊗ D_2 ⊗ I,   K_3 = D_3 ⊗ I ⊗ I
//! ```
//!
//! The adaptive penalty gives every row of `K_d` its own weight, and the
//! weight field is a low-rank B-spline expansion `C_d φ_d` over the rows of
//! `K_d`. Each column `c_{d,s}` of `C_d` defines one block
//! `Λ_{d,s} = K_dᵗ diag(c_{d,s}) K_d`, and the precision matrix is
//! `P(φ) = Σ φ_s Λ_s`. The non-adaptive penalty is the special case with a
//! single all-ones column per direction.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::arraykit::kron3;
use crate::splinekit::{bspline_basis, make_knots, DifferenceOp, SplineError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PenaltyError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// The sparse operator `K_d` acting on `vec(θ)`.
///
/// Rows are laid out like a cube of extents `row_extents`, axis 1 fastest,
/// where the differenced axis has `c_d - q_d` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalOperator {
    pub direction: usize,
    pub coef_extents: [usize; 3],
    pub row_extents: [usize; 3],
    rows: Vec<Vec<(usize, f64)>>,
}

impl DirectionalOperator {
    /// Builds `K_d` for `direction` ∈ {1, 2, 3} from the difference operator on that axis.
    pub fn new(direction: usize, diff: &DifferenceOp, coef_extents: [usize; 3]) -> Result<Self, PenaltyError> {
        if !(1..=3).contains(&direction) {
            return Err(PenaltyError::InvalidArgument(format!(
                "direction {direction} not in 1..=3"
            )));
        }
        let axis = direction - 1;
        if diff.ncoef != coef_extents[axis] {
            return Err(PenaltyError::InvalidArgument(format!(
                "difference operator on {} coefficients does not fit axis {direction} with {}",
                diff.ncoef, coef_extents[axis]
            )));
        }
        let mut row_extents = coef_extents;
        row_extents[axis] = diff.nrows();
        let d = diff.to_f64();
        let [m1, m2, m3] = row_extents;
        let [c1, c2, _] = coef_extents;
        let mut rows = Vec::with_capacity(m1 * m2 * m3);
        for r3 in 0..m3 {
            for r2 in 0..m2 {
                for r1 in 0..m1 {
                    let pos = [r1, r2, r3];
                    let diff_row = pos[axis];
                    let mut entries = Vec::new();
                    for j in 0..diff.ncoef {
                        let v = d[(diff_row, j)];
                        if v != 0.0 {
                            let mut k = pos;
                            k[axis] = j;
                            entries.push((k[0] + c1 * (k[1] + c2 * k[2]), v));
                        }
                    }
                    rows.push(entries);
                }
            }
        }
        Ok(Self {
            direction,
            coef_extents,
            row_extents,
            rows,
        })
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.coef_extents.iter().product()
    }

    /// `K_d θ`.
    pub fn apply(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|row| row.iter().map(|&(j, v)| v * theta[j]).sum::<f64>()),
        )
    }

    /// `diag(K_d A K_dᵗ)` for a square `A`.
    pub fn sandwich_diagonal(&self, a: &DMatrix<f64>) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| {
                let mut s = 0.0;
                for &(i, vi) in row {
                    for &(j, vj) in row {
                        s += vi * a[(i, j)] * vj;
                    }
                }
                s
            })
            .collect()
    }

    /// `K_dᵗ diag(weights) K_d` as a dense matrix.
    pub fn weighted_gram(&self, weights: &[f64]) -> DMatrix<f64> {
        let p = self.ncols();
        let mut out = DMatrix::zeros(p, p);
        for (row, &w) in self.rows.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for &(i, vi) in row {
                for &(j, vj) in row {
                    out[(i, j)] += w * vi * vj;
                }
            }
        }
        out
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), self.ncols());
        for (r, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                out[(r, j)] = v;
            }
        }
        out
    }
}

/// One quadratic-form block `Λ = K_dᵗ diag(weights) K_d`, weighted by
/// `φ[weight_ref]` in the precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub direction: usize,
    pub block_index: usize,
    pub weight_ref: usize,
    /// Column `c_{d,s}` of `C_d`, one entry per row of `K_d`.
    pub weights: Vec<f64>,
}

/// Sub-basis dimensions `p[d][j]` and factor matrices for the adaptive
/// smoothing-parameter fields.
///
/// `factors[d][j]` has one row per position of `K_d`'s row cube along axis
/// `j` and `p[d][j]` columns. Column `s` of `C_d` is
/// `C_{d,3}[:, s3] ⊗ C_{d,2}[:, s2] ⊗ C_{d,1}[:, s1]` with
/// `s = s1 + p1 * (s2 + p2 * s3)`, matching `K_d`'s row layout entry by entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveBasisSpec {
    pub dims: [[usize; 3]; 3],
    pub factors: [[DMatrix<f64>; 3]; 3],
}

impl AdaptiveBasisSpec {
    /// B-spline sub-bases on the index positions of each `K_d` row axis.
    ///
    /// Degree is `min(3, p - 1)` with `p - degree` equidistant segments, so
    /// `p = 1` yields the single all-ones column.
    pub fn bspline(coef_extents: [usize; 3], orders: [usize; 3], dims: [[usize; 3]; 3]) -> Result<Self, PenaltyError> {
        let mut factors: Vec<[DMatrix<f64>; 3]> = Vec::with_capacity(3);
        for (d, dims_d) in dims.iter().enumerate() {
            let mut per_axis: Vec<DMatrix<f64>> = Vec::with_capacity(3);
            for j in 0..3 {
                let rows = if j == d {
                    coef_extents[j].checked_sub(orders[j]).ok_or_else(|| {
                        PenaltyError::InvalidArgument(format!(
                            "difference order {} exceeds coefficient count {}",
                            orders[j], coef_extents[j]
                        ))
                    })?
                } else {
                    coef_extents[j]
                };
                per_axis.push(index_bspline(rows, dims_d[j])?);
            }
            let [a, b, c]: [DMatrix<f64>; 3] = per_axis.try_into().expect("three axes");
            factors.push([a, b, c]);
        }
        let [f1, f2, f3]: [[DMatrix<f64>; 3]; 3] = factors.try_into().expect("three directions");
        let spec = Self {
            dims,
            factors: [f1, f2, f3],
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks the dimension-reduction requirement on every factor.
    pub fn validate(&self) -> Result<(), PenaltyError> {
        for d in 0..3 {
            for j in 0..3 {
                let f = &self.factors[d][j];
                if f.ncols() != self.dims[d][j] {
                    return Err(PenaltyError::InvalidArgument(format!(
                        "factor ({}, {}) has {} columns, expected {}",
                        d + 1,
                        j + 1,
                        f.ncols(),
                        self.dims[d][j]
                    )));
                }
                if f.ncols() >= f.nrows() {
                    return Err(PenaltyError::InvalidArgument(format!(
                        "factor ({}, {}) has {} columns for {} rows; the sub-basis must reduce the dimension",
                        d + 1,
                        j + 1,
                        f.ncols(),
                        f.nrows()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        self.dims.iter().map(|p| p.iter().product::<usize>()).sum()
    }
}

/// B-spline regression matrix with `p` columns evaluated at `1..=rows`.
fn index_bspline(rows: usize, p: usize) -> Result<DMatrix<f64>, PenaltyError> {
    if p < 1 {
        return Err(PenaltyError::InvalidArgument(
            "sub-basis dimension must be at least 1".into(),
        ));
    }
    if p >= rows {
        return Err(PenaltyError::InvalidArgument(format!(
            "sub-basis with {p} columns cannot reduce {rows} rows"
        )));
    }
    let degree = (p - 1).min(3);
    let x: Vec<f64> = (1..=rows).map(|i| i as f64).collect();
    let knots = make_knots(1.0, rows as f64, p - degree, degree)?;
    Ok(bspline_basis(&x, &knots, degree)?.matrix)
}

/// All penalty blocks over a shared set of directional operators.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySystem {
    pub coef_extents: [usize; 3],
    pub orders: [usize; 3],
    pub operators: [DirectionalOperator; 3],
    pub blocks: Vec<PenaltyBlock>,
}

impl PenaltySystem {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.coef_extents.iter().product()
    }

    pub fn operator(&self, block: &PenaltyBlock) -> &DirectionalOperator {
        &self.operators[block.direction - 1]
    }

    /// Dense `Λ_s`.
    pub fn block_matrix(&self, index: usize) -> DMatrix<f64> {
        let block = &self.blocks[index];
        self.operator(block).weighted_gram(&block.weights)
    }

    /// Per-direction row weights `Σ_s φ_s c_{d,s}`.
    pub fn row_weights(&self, phi: &[f64]) -> [Vec<f64>; 3] {
        let mut out = [
            vec![0.0; self.operators[0].nrows()],
            vec![0.0; self.operators[1].nrows()],
            vec![0.0; self.operators[2].nrows()],
        ];
        for block in &self.blocks {
            let w = phi[block.weight_ref];
            let acc = &mut out[block.direction - 1];
            for (a, &c) in acc.iter_mut().zip(&block.weights) {
                *a += w * c;
            }
        }
        out
    }

    /// `θᵗ Λ_s θ` for every block.
    pub fn quadratic_forms(&self, theta: &DVector<f64>) -> Vec<f64> {
        let diffs: Vec<DVector<f64>> = self.operators.iter().map(|k| k.apply(theta)).collect();
        self.blocks
            .iter()
            .map(|b| {
                let kt = &diffs[b.direction - 1];
                b.weights.iter().zip(kt.iter()).map(|(&c, &v)| c * v * v).sum()
            })
            .collect()
    }
}

fn directional_operators(
    d1: &DifferenceOp,
    d2: &DifferenceOp,
    d3: &DifferenceOp,
) -> Result<[DirectionalOperator; 3], PenaltyError> {
    let extents = [d1.ncoef, d2.ncoef, d3.ncoef];
    Ok([
        DirectionalOperator::new(1, d1, extents)?,
        DirectionalOperator::new(2, d2, extents)?,
        DirectionalOperator::new(3, d3, extents)?,
    ])
}

/// `λ1 (I⊗I⊗D1ᵗD1) + λ2 (I⊗D2ᵗD2⊗I) + λ3 (D3ᵗD3⊗I⊗I)` via dense Kronecker products.
pub fn build_nonadaptive_penalty(
    d1: &DifferenceOp,
    d2: &DifferenceOp,
    d3: &DifferenceOp,
    lambdas: [f64; 3],
) -> Result<DMatrix<f64>, PenaltyError> {
    if let Some(l) = lambdas.iter().find(|&&l| !(l.is_finite() && l > 0.0)) {
        return Err(PenaltyError::InvalidArgument(format!(
            "smoothing parameters must be positive and finite, got {l}"
        )));
    }
    let i1 = DMatrix::identity(d1.ncoef, d1.ncoef);
    let i2 = DMatrix::identity(d2.ncoef, d2.ncoef);
    let i3 = DMatrix::identity(d3.ncoef, d3.ncoef);
    Ok(kron3(&i3, &i2, &d1.gram()) * lambdas[0]
        + kron3(&i3, &d2.gram(), &i1) * lambdas[1]
        + kron3(&d3.gram(), &i2, &i1) * lambdas[2])
}

/// One all-ones block per direction; `P(φ)` then equals the anisotropic penalty with `λ = φ`.
pub fn build_nonadaptive_blocks(
    d1: &DifferenceOp,
    d2: &DifferenceOp,
    d3: &DifferenceOp,
) -> Result<PenaltySystem, PenaltyError> {
    let operators = directional_operators(d1, d2, d3)?;
    let blocks = operators
        .iter()
        .enumerate()
        .map(|(i, k)| PenaltyBlock {
            direction: k.direction,
            block_index: 0,
            weight_ref: i,
            weights: vec![1.0; k.nrows()],
        })
        .collect();
    Ok(PenaltySystem {
        coef_extents: [d1.ncoef, d2.ncoef, d3.ncoef],
        orders: [d1.order, d2.order, d3.order],
        operators,
        blocks,
    })
}

/// Blocks of the adaptive penalty, direction 1 first, then 2, then 3.
pub fn build_adaptive_blocks(
    d1: &DifferenceOp,
    d2: &DifferenceOp,
    d3: &DifferenceOp,
    spec: &AdaptiveBasisSpec,
) -> Result<PenaltySystem, PenaltyError> {
    spec.validate()?;
    let operators = directional_operators(d1, d2, d3)?;
    let mut blocks = Vec::with_capacity(spec.block_count());
    for (d, k) in operators.iter().enumerate() {
        let [f1, f2, f3] = &spec.factors[d];
        for (j, f) in [f1, f2, f3].iter().enumerate() {
            if f.nrows() != k.row_extents[j] {
                return Err(PenaltyError::InvalidArgument(format!(
                    "factor ({}, {}) has {} rows but K_{} has {} positions on that axis",
                    d + 1,
                    j + 1,
                    f.nrows(),
                    d + 1,
                    k.row_extents[j]
                )));
            }
        }
        let column = kron3(f3, f2, f1);
        for s in 0..column.ncols() {
            blocks.push(PenaltyBlock {
                direction: k.direction,
                block_index: s,
                weight_ref: blocks.len(),
                weights: column.column(s).iter().copied().collect(),
            });
        }
    }
    Ok(PenaltySystem {
        coef_extents: [d1.ncoef, d2.ncoef, d3.ncoef],
        orders: [d1.order, d2.order, d3.order],
        operators,
        blocks,
    })
}

/// `P(φ) = Σ φ_s Λ_s`.
pub fn assemble_precision(system: &PenaltySystem, phi: &[f64]) -> Result<DMatrix<f64>, PenaltyError> {
    if phi.len() != system.len() {
        return Err(PenaltyError::InvalidArgument(format!(
            "{} weights for {} blocks",
            phi.len(),
            system.len()
        )));
    }
    if let Some(v) = phi.iter().find(|&&v| !(v.is_finite() && v >= 0.0)) {
        return Err(PenaltyError::InvalidArgument(format!(
            "penalty weights must be non-negative and finite, got {v}"
        )));
    }
    let weights = system.row_weights(phi);
    let p = system.dim();
    let mut out = DMatrix::zeros(p, p);
    for (k, w) in system.operators.iter().zip(weights.iter()) {
        out += k.weighted_gram(w);
    }
    Ok(out)
}

/// Orthonormal basis of the tensor-product polynomials of per-axis degree
/// below `q_d`, which every `P(φ)` annihilates.
pub fn penalty_null_space(orders: [usize; 3], coef_extents: [usize; 3]) -> Result<DMatrix<f64>, PenaltyError> {
    let mut factors = Vec::with_capacity(3);
    for (&q, &c) in orders.iter().zip(&coef_extents) {
        if q < 1 || c <= q {
            return Err(PenaltyError::InvalidArgument(format!(
                "need c > q >= 1, got c = {c}, q = {q}"
            )));
        }
        let centre = (c as f64 + 1.0) / 2.0;
        let poly = DMatrix::from_fn(c, q, |i, p| (i as f64 + 1.0 - centre).powi(p as i32));
        factors.push(orthonormalize(poly));
    }
    Ok(kron3(&factors[2], &factors[1], &factors[0]))
}

/// Modified Gram–Schmidt on the columns, applied twice.
fn orthonormalize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for _ in 0..2 {
        for j in 0..m.ncols() {
            for k in 0..j {
                let proj = m.column(k).dot(&m.column(j));
                let ck = m.column(k).into_owned();
                m.column_mut(j).axpy(-proj, &ck, 1.0);
            }
            let norm = m.column(j).norm();
            m.column_mut(j).unscale_mut(norm);
        }
    }
    m
}
