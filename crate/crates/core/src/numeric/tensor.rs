use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type. `f64` is used by the gradient oracles,
/// `f32` by training and inference.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} has a zero extent"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "cannot add {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]);
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `out = W x (+ b)` for row-major `W` of shape `rows × x.len()`.
#[inline]
pub fn matvec_into<T: Scalar>(w: &[T], x: &[T], b: Option<&[T]>, out: &mut [T]) {
    let cols = x.len();
    debug_assert_eq!(w.len(), out.len() * cols);
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        *o = dot(row, x) + b.map_or(T::zero(), |b| b[i]);
    }
}

/// `out += Wᵀ u`.
#[inline]
pub fn matvec_t_acc<T: Scalar>(w: &[T], u: &[T], out: &mut [T]) {
    let cols = out.len();
    debug_assert_eq!(w.len(), u.len() * cols);
    for (i, &ui) in u.iter().enumerate() {
        if ui == T::zero() {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += wij * ui;
        }
    }
}

/// `gw += u ⊗ x`.
#[inline]
pub fn outer_acc<T: Scalar>(gw: &mut [T], u: &[T], x: &[T]) {
    let cols = x.len();
    debug_assert_eq!(gw.len(), u.len() * cols);
    for (i, &ui) in u.iter().enumerate() {
        if ui == T::zero() {
            continue;
        }
        let row = &mut gw[i * cols..(i + 1) * cols];
        for (g, &xj) in row.iter_mut().zip(x) {
            *g += ui * xj;
        }
    }
}

#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn squared_norm<T: Scalar>(x: &[T]) -> T {
    dot(x, x)
}

fn check_affine_shapes<T: Scalar>(
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    x: &Tensor<T>,
) -> Result<()> {
    if w.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "weight must be 2-d, got {:?}",
            w.shape()
        )));
    }
    if x.shape().len() != 1 || x.len() != w.cols() {
        return Err(Error::Dimension(format!(
            "input {:?} does not conform to weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if let Some(b) = b {
        if b.shape().len() != 1 || b.len() != w.rows() {
            return Err(Error::Dimension(format!(
                "bias {:?} does not conform to weight {:?}",
                b.shape(),
                w.shape()
            )));
        }
    }
    Ok(())
}

/// `y = W x + b`.
pub fn affine_forward<T: Scalar>(w: &Tensor<T>, b: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    check_affine_shapes(w, Some(b), x)?;
    let mut y = vec![T::zero(); w.rows()];
    matvec_into(w.data(), x.data(), Some(b.data()), &mut y);
    Ok(Tensor::vector(y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AffineGrads<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub x: Tensor<T>,
}

pub fn affine_backward<T: Scalar>(
    w: &Tensor<T>,
    x: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<AffineGrads<T>> {
    check_affine_shapes(w, None, x)?;
    if upstream.shape().len() != 1 || upstream.len() != w.rows() {
        return Err(Error::Dimension(format!(
            "upstream {:?} does not conform to weight {:?}",
            upstream.shape(),
            w.shape()
        )));
    }
    let mut gw = Tensor::zeros(w.shape());
    outer_acc(gw.data_mut(), upstream.data(), x.data());
    let mut gx = vec![T::zero(); w.cols()];
    matvec_t_acc(w.data(), upstream.data(), &mut gx);
    Ok(AffineGrads {
        w: gw,
        b: upstream.clone(),
        x: Tensor::vector(gx),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Softmax,
}

/// Output of an activation together with what its backward pass needs
/// (all three supported kinds differentiate in terms of their output).
#[derive(Clone, Debug, PartialEq)]
pub struct Activated<T> {
    pub kind: Activation,
    pub y: Vec<T>,
}

impl<T: Scalar> Activated<T> {
    pub fn backward(&self, upstream: &[T]) -> Vec<T> {
        let mut out = upstream.to_vec();
        activation_backward_in_place(self.kind, &self.y, &mut out);
        out
    }
}

pub fn activation<T: Scalar>(kind: Activation, x: &[T]) -> Activated<T> {
    let mut y = x.to_vec();
    activation_in_place(kind, &mut y);
    Activated { kind, y }
}

pub fn activation_in_place<T: Scalar>(kind: Activation, x: &mut [T]) {
    match kind {
        Activation::Relu => x.iter_mut().for_each(|v| {
            if *v < T::zero() {
                *v = T::zero()
            }
        }),
        Activation::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
        Activation::Softmax => {
            let max = x.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in x.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            x.iter_mut().for_each(|v| *v = *v / sum);
        }
    }
}

/// Turns `grad` (upstream, w.r.t. the output `y`) into the gradient w.r.t. the input.
pub fn activation_backward_in_place<T: Scalar>(kind: Activation, y: &[T], grad: &mut [T]) {
    match kind {
        Activation::Relu => {
            for (g, &yi) in grad.iter_mut().zip(y) {
                if yi <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        Activation::Tanh => {
            for (g, &yi) in grad.iter_mut().zip(y) {
                *g *= T::one() - yi * yi;
            }
        }
        Activation::Softmax => {
            let inner = dot(grad, y);
            for (g, &yi) in grad.iter_mut().zip(y) {
                *g = yi * (*g - inner);
            }
        }
    }
}
