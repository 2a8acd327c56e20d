//! Dense row-major tensors.
//!
//! Small and purpose-built: batches here are at most a few hundred rows of a
//! few hundred columns, so everything is plain `Vec` storage with explicit
//! loops. Non-finite values are rejected at the public construction boundary;
//! internal operations assume finite inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    values: Vec<R>,
}

impl<R: Real> Tensor<R> {
    /// Validated constructor: shape product must match the value count and
    /// every value must be finite.
    pub fn new(shape: Vec<usize>, values: Vec<R>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::input(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite value in tensor"));
        }
        Ok(Self { shape, values })
    }

    /// Unvalidated constructor for internal use on already-checked data.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<R>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![R::zero(); n] }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [R] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<R> {
        self.values
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-2D tensor");
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-2D tensor");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[R] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [R] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    /// 2-D matrix from rows.
    pub fn from_rows(rows: &[Vec<R>]) -> Result<Self> {
        let n = rows.len();
        let c = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(n * c);
        for r in rows {
            if r.len() != c {
                return Err(Error::input("ragged rows"));
            }
            values.extend_from_slice(r);
        }
        Tensor::new(vec![n, c], values)
    }

    /// New 2-D tensor containing the selected rows, in the given order.
    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut values = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Self::from_parts(vec![idx.len(), c], values)
    }

    /// out = self · other, shapes [n,k]·[k,m].
    pub fn matmul(&self, other: &Self) -> Self {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![R::zero(); n * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.values[i * k + p];
                if a == R::zero() {
                    continue;
                }
                let brow = &other.values[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::from_parts(vec![n, m], out)
    }

    /// out = selfᵀ · other, shapes [n,k]ᵀ·[n,m] → [k,m].
    pub fn matmul_tn(&self, other: &Self) -> Self {
        let (n, k) = (self.rows(), self.cols());
        let (n2, m) = (other.rows(), other.cols());
        assert_eq!(n, n2, "matmul_tn outer dims");
        let mut out = vec![R::zero(); k * m];
        for i in 0..n {
            for p in 0..k {
                let a = self.values[i * k + p];
                if a == R::zero() {
                    continue;
                }
                let brow = &other.values[i * m..(i + 1) * m];
                let orow = &mut out[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Self::from_parts(vec![k, m], out)
    }

    /// out = self · otherᵀ, shapes [n,m]·[k,m]ᵀ → [n,k].
    pub fn matmul_nt(&self, other: &Self) -> Self {
        let (n, m) = (self.rows(), self.cols());
        let (k, m2) = (other.rows(), other.cols());
        assert_eq!(m, m2, "matmul_nt inner dims");
        let mut out = vec![R::zero(); n * k];
        for i in 0..n {
            let arow = &self.values[i * m..(i + 1) * m];
            for p in 0..k {
                let brow = &other.values[p * m..(p + 1) * m];
                let mut acc = R::zero();
                for (&a, &b) in arow.iter().zip(brow) {
                    acc += a * b;
                }
                out[i * k + p] = acc;
            }
        }
        Self::from_parts(vec![n, k], out)
    }

    /// self += other (elementwise, shapes must match).
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// self += scale * other.
    pub fn add_scaled(&mut self, other: &Self, scale: R) {
        assert_eq!(self.shape, other.shape, "add_scaled shape");
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, factor: R) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_shape_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![1.0f64; 4]).is_ok());
        assert!(Tensor::new(vec![2, 2], vec![1.0f64; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![f64::NAN, 0.0]).is_err());
        assert!(Tensor::new(vec![2], vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn matmul_small_known() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.values(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_products_agree_with_plain_matmul() {
        let a = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap();
        // aᵀ·b via explicit transpose
        let at = Tensor::new(vec![2, 3], vec![1.0, 3.0, 5.0, 2.0, 4.0, 6.0]).unwrap();
        assert_eq!(a.matmul_tn(&b), at.matmul(&b));

        let c = Tensor::new(vec![5, 4], (0..20).map(f64::from).collect()).unwrap();
        let ct = {
            let mut v = vec![0.0; 20];
            for i in 0..5 {
                for j in 0..4 {
                    v[j * 5 + i] = c.values()[i * 4 + j];
                }
            }
            Tensor::new(vec![4, 5], v).unwrap()
        };
        assert_eq!(b.matmul_nt(&c), b.matmul(&ct));
    }

    #[test]
    fn gather_rows_picks_in_order() {
        let a = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = a.gather_rows(&[2, 0]);
        assert_eq!(g.values(), &[5.0, 6.0, 1.0, 2.0]);
    }
}
