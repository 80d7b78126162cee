use crate::error::{Result, TensorError};
use crate::Real;

/// Dense row-major n-dimensional array.
///
/// A `Tensor` on its own is detached: it carries no gradient and can move
/// freely between threads. Recording it on a [`Tape`](crate::Tape) freezes
/// its contents for the lifetime of that tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ElementCount { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when every extent is 1.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extents of a rank-4 `[N, C, H, W]` tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::invalid(op, format!("expected rank-4 NCHW tensor, got {:?}", self.shape))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_is_checked() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(err, TensorError::ElementCount { shape: vec![2, 3], len: 5 });
    }

    #[test]
    fn reshape_keeps_data() {
        let t = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.clone().reshape(vec![4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(vec![3]).is_err());
    }
}
