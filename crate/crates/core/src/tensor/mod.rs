//! Dense tensors with a tape-based reverse-mode differentiation engine.
//!
//! Network data uses the `N×C×D×H×W` layout with `W` (x) fastest. All
//! kernels are written so that every output element is reduced in a fixed
//! order by exactly one worker, which keeps results bit-identical across
//! thread counts.

mod kernels;
mod optim;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use optim::{Adam, Parameter};
pub use tape::{BatchStats, Gradients, RunningStats, Tape, Var};

/// Floating-point element type. `f32` for training and inference, `f64` for
/// gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("every Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Train/eval switch shared by dropout, batch norm and the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<F: Real> Tensor<F> {
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `N×C×D×H×W`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape.as_slice() {
            &[n, c, d, h, w] => Ok([n, c, d, h, w]),
            s => Err(Error::shape(format!("expected N×C×D×H×W, got {s:?}"))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Converts element type, e.g. f32 weights to f64 for a gradient check.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| G::from_f64_lossy(v.to_f64_lossy())).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor<F>) -> F {
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    /// Splits along the channel axis: the first `at` channels, then the rest.
    pub fn split_channels(&self, at: usize) -> Result<(Tensor<F>, Tensor<F>)> {
        if self.shape.len() < 2 {
            return Err(Error::shape("split_channels needs at least 2 axes"));
        }
        let c = self.shape[1];
        if at == 0 || at >= c {
            return Err(Error::shape(format!("cannot split {c} channels at {at}")));
        }
        let n = self.shape[0];
        let inner: usize = self.shape[2..].iter().product();
        let mut a = Vec::with_capacity(n * at * inner);
        let mut b = Vec::with_capacity(n * (c - at) * inner);
        for s in 0..n {
            let base = s * c * inner;
            a.extend_from_slice(&self.data[base..base + at * inner]);
            b.extend_from_slice(&self.data[base + at * inner..base + c * inner]);
        }
        let mut sa = self.shape.clone();
        sa[1] = at;
        let mut sb = self.shape.clone();
        sb[1] = c - at;
        Ok((Tensor { shape: sa, data: a }, Tensor { shape: sb, data: b }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 0], vec![]).is_err());
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn split_channels_rejects_bad_split() {
        let t = Tensor::<f64>::zeros(&[1, 3, 2, 2, 2]);
        assert!(t.split_channels(0).is_err());
        assert!(t.split_channels(3).is_err());
        let (a, b) = t.split_channels(1).unwrap();
        assert_eq!(a.shape(), &[1, 1, 2, 2, 2]);
        assert_eq!(b.shape(), &[1, 2, 2, 2, 2]);
    }
}
