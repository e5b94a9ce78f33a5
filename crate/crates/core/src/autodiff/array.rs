use std::fmt;

use crate::error::{dim_err, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Array")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(dim_err!("shape must have at least one dimension"));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(dim_err!("zero-sized dimension in shape {:?}", shape));
    }
    Ok(shape.iter().product())
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(dim_err!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Array { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Array {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Array::new(vec![n], data).expect("empty vector")
    }

    /// Builds a 2-D array from nested rows. Panics on ragged input; meant for tests and literals.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Array::new(vec![r, c], data).expect("empty rows")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element array.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on array of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let offset = index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum::<usize>();
        self.data[offset]
    }

    /// Storage is always contiguous, so reshape only swaps the shape metadata.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(dim_err!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.shape,
                self.data.len(),
                shape
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "shape mismatch {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Array) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Array) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err!(
                "invalid permutation {:?} for shape {:?}",
                axes,
                self.shape
            ));
        }
        let in_strides = self.strides();
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; nd];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            out.push(self.data[offset]);
            // odometer increment over output index
            for d in (0..nd).rev() {
                idx[d] += 1;
                offset += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                offset -= src_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        Array::new(out_shape, out)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let nd = self.shape.len();
        if nd < 2 {
            return Err(dim_err!("transpose needs at least 2 axes, got {:?}", self.shape));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(&axes)
    }

    pub fn matmul(&self, other: &Array) -> Result<Array> {
        let (m, k) = as_matrix(self)?;
        let (k2, n) = as_matrix(other)?;
        if k != k2 {
            return Err(dim_err!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape,
                other.shape
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        Array::new(vec![m, n], out)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn as_matrix(a: &Array) -> Result<(usize, usize)> {
    match a.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(dim_err!("expected a 2-D matrix, got shape {:?}", s)),
    }
}

/// `out (m×n) [+]= op(a) · op(b)`, where `op` optionally transposes a row-major operand.
/// `a` is stored as m×k (or k×m when transposed), `b` as k×n (or n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // in-bounds row-major layouts of exactly those lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
