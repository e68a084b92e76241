use crate::error::{CtpError, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
///
/// Almost everything in the crate is a batch matrix `[rows, cols]`; rank-1
/// tensors are treated as a single row where a matrix is expected.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CtpError::dim("Tensor::new", expected, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// Stacks equally sized rows into a `[rows.len(), width]` matrix.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Result<Self> {
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            let r = r.as_ref();
            if r.len() != width {
                return Err(CtpError::dim("Tensor::from_rows", width, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), width, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// The single entry of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.data.len() != 1 {
            return Err(CtpError::contract(format!(
                "expected a scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(CtpError::dim(
                "Tensor::zip_map",
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(CtpError::dim("Tensor::reshape", self.data.len(), n));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Leading `width` columns of every row.
    pub fn leading_cols(&self, width: usize) -> Self {
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&self.row(r)[..width]);
        }
        Self {
            shape: vec![rows, width],
            data,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(CtpError::NonFinite(what.to_string()))
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64_lossy()).unwrap_or_else(T::nan))
                .collect(),
        }
    }
}

/// Plain matrix product `a[m,k] · b[k,n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(CtpError::dim("matmul inner dimension", k, k2));
    }
    let mut out = Tensor::zeros(&[m, n]);
    S::gemm(
        m,
        k,
        n,
        a.data(),
        k as isize,
        1,
        b.data(),
        n as isize,
        1,
        out.data_mut(),
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn matmul_matches_nested_loops() {
        let a = Tensor::<f64>::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let c32 = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
        assert_eq!(c32.data(), &[58f32, 64., 139., 154.]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            matmul(&a, &a),
            Err(CtpError::Dimension { .. })
        ));
    }

    #[test]
    fn item_requires_scalar() {
        assert!(Tensor::<f64>::zeros(&[2, 1]).item().is_err());
        assert_eq!(Tensor::scalar(3.0f64).item().unwrap(), 3.0);
    }
}
