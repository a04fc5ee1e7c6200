//! Kronecker-structured linear algebra on three-way arrays.
//!
//! A tensor-product design `B = B3 ⊗ B2 ⊗ B1` is never formed on the fast
//! path. Instead each product is computed as a sequence of rotated
//! H-transforms (multiply along the leading axis, then rotate that axis to the
//! back), which is the array form of a generalized linear array model. The
//! dense Kronecker route is kept as `kron3_apply` for verification.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArrayError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weights must be non-negative and finite (found {value} at index {index})")]
    InvalidWeight { index: usize, value: f64 },
}

/// A dense three-way array stored with axis 1 varying fastest, then axis 2,
/// then axis 3: `data[(k3 * n2 + k2) * n1 + k1]`.
///
/// With this layout `vec(cube)` is exactly the vector on which
/// `A3 ⊗ A2 ⊗ A1` acts.
#[derive(Debug, Clone, PartialEq)]
pub struct Cube {
    extents: [usize; 3],
    data: Vec<f64>,
}

impl Cube {
    pub fn zeros(extents: [usize; 3]) -> Self {
        Self {
            extents,
            data: vec![0.0; extents.iter().product()],
        }
    }

    pub fn filled(extents: [usize; 3], value: f64) -> Self {
        Self {
            extents,
            data: vec![value; extents.iter().product()],
        }
    }

    pub fn from_vec(extents: [usize; 3], data: Vec<f64>) -> Result<Self, ArrayError> {
        let n: usize = extents.iter().product();
        if data.len() != n {
            return Err(ArrayError::DimensionMismatch(format!(
                "{} values cannot fill a {:?} cube",
                data.len(),
                extents
            )));
        }
        Ok(Self { extents, data })
    }

    pub fn from_fn(extents: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(extents.iter().product());
        for k3 in 0..extents[2] {
            for k2 in 0..extents[1] {
                for k1 in 0..extents[0] {
                    data.push(f(k1, k2, k3));
                }
            }
        }
        Self { extents, data }
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, k1: usize, k2: usize, k3: usize) -> usize {
        (k3 * self.extents[1] + k2) * self.extents[0] + k1
    }

    #[inline]
    pub fn get(&self, k1: usize, k2: usize, k3: usize) -> f64 {
        self.data[self.index(k1, k2, k3)]
    }

    #[inline]
    pub fn set(&mut self, k1: usize, k2: usize, k3: usize, v: f64) {
        let i = self.index(k1, k2, k3);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Cube {
        Cube {
            extents: self.extents,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Dense `A3 ⊗ A2 ⊗ A1`.
pub fn kron3(a3: &DMatrix<f64>, a2: &DMatrix<f64>, a1: &DMatrix<f64>) -> DMatrix<f64> {
    a3.kronecker(a2).kronecker(a1)
}

/// `(A3 ⊗ A2 ⊗ A1) v` through the explicit Kronecker product.
pub fn kron3_apply(
    a3: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    a1: &DMatrix<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>, ArrayError> {
    let expected = a1.ncols() * a2.ncols() * a3.ncols();
    if v.len() != expected {
        return Err(ArrayError::DimensionMismatch(format!(
            "vector of length {} does not match Kronecker column count {expected}",
            v.len()
        )));
    }
    Ok(kron3(a3, a2, a1) * v)
}

/// Rotated H-transform: multiplies `a` along axis 1 of `cube` and moves the
/// new axis to the back, so `(n1, n2, n3)` becomes `(n2, n3, rows(a))`.
pub fn rotated_h(a: &DMatrix<f64>, cube: &Cube) -> Result<Cube, ArrayError> {
    let [n1, n2, n3] = cube.extents;
    if a.ncols() != n1 {
        return Err(ArrayError::DimensionMismatch(format!(
            "matrix with {} columns cannot act on axis of length {n1}",
            a.ncols()
        )));
    }
    let unfolded = DMatrix::from_column_slice(n1, n2 * n3, &cube.data);
    let product = a * unfolded;
    let rotated = product.transpose();
    Ok(Cube {
        extents: [n2, n3, a.nrows()],
        data: rotated.as_slice().to_vec(),
    })
}

/// `(B3 ⊗ B2 ⊗ B1) vec(theta)` as a cube of extents `(rows(B1), rows(B2), rows(B3))`.
pub fn glam_apply(b3: &DMatrix<f64>, b2: &DMatrix<f64>, b1: &DMatrix<f64>, theta: &Cube) -> Result<Cube, ArrayError> {
    check_coef_extents(b3, b2, b1, theta.extents, "coefficient")?;
    let step = rotated_h(b1, theta)?;
    let step = rotated_h(b2, &step)?;
    rotated_h(b3, &step)
}

/// `(B3 ⊗ B2 ⊗ B1)ᵗ vec(values)` as a cube of extents `(cols(B1), cols(B2), cols(B3))`.
pub fn glam_apply_transpose(
    b3: &DMatrix<f64>,
    b2: &DMatrix<f64>,
    b1: &DMatrix<f64>,
    values: &Cube,
) -> Result<Cube, ArrayError> {
    let rows = [b1.nrows(), b2.nrows(), b3.nrows()];
    if values.extents != rows {
        return Err(ArrayError::DimensionMismatch(format!(
            "data extents {:?} do not match basis rows {rows:?}",
            values.extents
        )));
    }
    let step = rotated_h(&b1.transpose(), values)?;
    let step = rotated_h(&b2.transpose(), &step)?;
    rotated_h(&b3.transpose(), &step)
}

/// Row tensor (face-splitting product) `B ⊙ B`: row `i` is `B[i,:] ⊗ B[i,:]`,
/// with column `j + c*k` holding `B[i,j] * B[i,k]`.
pub fn row_tensor(b: &DMatrix<f64>) -> DMatrix<f64> {
    let c = b.ncols();
    DMatrix::from_fn(b.nrows(), c * c, |i, col| b[(i, col % c)] * b[(i, col / c)])
}

/// `Bᵗ diag(vec(W)) B` for `B = B3 ⊗ B2 ⊗ B1` without forming `B`.
pub fn glam_weighted_inner(
    b3: &DMatrix<f64>,
    b2: &DMatrix<f64>,
    b1: &DMatrix<f64>,
    weights: &Cube,
) -> Result<DMatrix<f64>, ArrayError> {
    let rows = [b1.nrows(), b2.nrows(), b3.nrows()];
    if weights.extents != rows {
        return Err(ArrayError::DimensionMismatch(format!(
            "weight extents {:?} do not match basis rows {rows:?}",
            weights.extents
        )));
    }
    if let Some((index, &value)) = weights
        .data
        .iter()
        .enumerate()
        .find(|(_, &w)| !(w.is_finite() && w >= 0.0))
    {
        return Err(ArrayError::InvalidWeight { index, value });
    }
    let [c1, c2, c3] = [b1.ncols(), b2.ncols(), b3.ncols()];
    let step = rotated_h(&row_tensor(b1).transpose(), weights)?;
    let step = rotated_h(&row_tensor(b2).transpose(), &step)?;
    let t = rotated_h(&row_tensor(b3).transpose(), &step)?;

    let p = c1 * c2 * c3;
    let mut out = DMatrix::zeros(p, p);
    for k3 in 0..c3 {
        for j3 in 0..c3 {
            let a3 = j3 + c3 * k3;
            for k2 in 0..c2 {
                for j2 in 0..c2 {
                    let a2 = j2 + c2 * k2;
                    for k1 in 0..c1 {
                        let col = k1 + c1 * (k2 + c2 * k3);
                        for j1 in 0..c1 {
                            let row = j1 + c1 * (j2 + c2 * j3);
                            out[(row, col)] = t.get(j1 + c1 * k1, a2, a3);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_coef_extents(
    b3: &DMatrix<f64>,
    b2: &DMatrix<f64>,
    b1: &DMatrix<f64>,
    extents: [usize; 3],
    what: &str,
) -> Result<(), ArrayError> {
    let cols = [b1.ncols(), b2.ncols(), b3.ncols()];
    if extents != cols {
        return Err(ArrayError::DimensionMismatch(format!(
            "{what} extents {extents:?} do not match basis columns {cols:?}"
        )));
    }
    Ok(())
}
