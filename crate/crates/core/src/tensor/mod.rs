//! Dense rank-4 tensors in (n, c, h, w) row-major layout plus the forward
//! operators used by the network. Gradients live in [`crate::autograd`].

pub mod ops;
pub mod tally;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense rank-4 array. Data is contiguous row-major in n -> c -> h -> w
/// order. Immutable after construction in all shared-use paths.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel == 0 {
            return Err(Error::shape("tensor", format!("zero-sized dims {dims:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!("data length {} != n*c*h*w = {numel}", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn full(dims: [usize; 4], v: T) -> Self {
        Tensor {
            dims,
            data: vec![v; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    /// Channel vector (1, c, 1, 1), the layout used for biases and
    /// batchnorm parameters.
    pub fn from_channel_vec(v: Vec<T>) -> Self {
        let c = v.len();
        Tensor {
            dims: [1, c, 1, 1],
            data: v,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            dims: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    #[inline(always)]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }
    #[inline(always)]
    pub fn n(&self) -> usize {
        self.dims[0]
    }
    #[inline(always)]
    pub fn c(&self) -> usize {
        self.dims[1]
    }
    #[inline(always)]
    pub fn h(&self) -> usize {
        self.dims[2]
    }
    #[inline(always)]
    pub fn w(&self) -> usize {
        self.dims[3]
    }
    #[inline(always)]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.idx(n, c, h, w);
        self.data[i] = v;
    }

    #[inline(always)]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline(always)]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// First (and only) element of a (1,1,1,1) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|x| x.to_f64s()).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|x| x.to_f64s() as f32).collect(),
        }
    }

    pub(crate) fn same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.dims, other.dims),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_length_must_match_dims() {
        assert!(Tensor::<f32>::new([1, 2, 2, 2], vec![0.0; 8]).is_ok());
        assert!(Tensor::<f32>::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor::<f32>::new([1, 0, 2, 2], vec![]).is_err());
    }

    #[test]
    fn indexing_is_row_major_nchw() {
        let t = Tensor::<f32>::from_fn([2, 3, 4, 5], |n, c, h, w| {
            (n * 1000 + c * 100 + h * 10 + w) as f32
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.idx(0, 0, 0, 1)], 1.0);
        assert_eq!(t.data()[t.idx(0, 0, 1, 0)], 10.0);
    }
}
