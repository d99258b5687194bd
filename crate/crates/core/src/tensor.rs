//! Dense 4-D tensors in (batch, channel, height, width) layout.
//!
//! Values are immutable once built; clones share storage. All feature maps,
//! disparity maps and masks in the network are `Tensor`s. Disparity maps are
//! (N,1,H,W) with values in pixels of horizontal shift (left-image frame,
//! positive means the match lies further left in the right image).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::fmt;
use std::sync::Arc;

#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: [usize; 4],
    data: Arc<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: [usize; 4], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!(
                    "data length {} does not match shape {:?} ({} elements)",
                    data.len(),
                    shape,
                    numel
                ),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![S::zero(); numel]),
        }
    }

    pub fn full(shape: [usize; 4], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
        }
    }

    pub fn scalar_value(value: S) -> Self {
        Tensor {
            shape: [1, 1, 1, 1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for bn in 0..n {
            for bc in 0..c {
                for by in 0..h {
                    for bx in 0..w {
                        data.push(f(bn, bc, by, bx));
                    }
                }
            }
        }
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Exclusive write access; copies on write if the storage is shared.
    pub(crate) fn data_mut(&mut self) -> &mut [S] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.idx(n, c, y, x)]
    }

    /// The single element of a (1,1,1,1) tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "tensor",
                format!("item() on non-scalar shape {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: Arc::new(self.data.iter().map(|v| T::of_f64(v.as_f64())).collect()),
        }
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.data.to_vec()
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", &self.data[..])
        } else {
            write!(f, " [{} elements]", self.numel())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let r = Tensor::<f32>::new([1, 1, 2, 2], vec![0.0; 3]);
        assert!(r.is_err());
    }

    #[test]
    fn layout_is_row_major_nchw() {
        let t = Tensor::<f32>::from_fn([2, 3, 4, 5], |n, c, y, x| {
            (((n * 3 + c) * 4 + y) * 5 + x) as f32
        });
        for n in 0..2 {
            for c in 0..3 {
                for y in 0..4 {
                    for x in 0..5 {
                        assert_eq!(t.at(n, c, y, x), t.data()[t.idx(n, c, y, x)]);
                        assert_eq!(t.idx(n, c, y, x), ((n * 3 + c) * 4 + y) * 5 + x);
                    }
                }
            }
        }
    }

    #[test]
    fn non_finite_detection() {
        let mut v = vec![1.0f32; 6];
        assert!(Tensor::new([1, 1, 2, 3], v.clone())
            .unwrap()
            .first_non_finite()
            .is_none());
        v[4] = f32::NAN;
        assert_eq!(
            Tensor::new([1, 1, 2, 3], v).unwrap().first_non_finite(),
            Some(4)
        );
    }
}
