//! Dense row-major tensors and the handful of array kernels the pipeline
//! is built from.

use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar type for tensor math. `f32` is the compute type everywhere;
/// `f64` is used by the gradient-check paths.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Default + Copy + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
    fn from_usizec(v: usize) -> Self {
        Self::from_usize(v).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> T {
        debug_assert_eq!(self.shape.len(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: T) {
        debug_assert_eq!(self.shape.len(), 3);
        let idx = (i * self.shape[1] + j) * self.shape[2] + k;
        self.data[idx] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    /// Converts the scalar type (used to move f32 pipeline state into the
    /// f64 gradient-check paths).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64c(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

impl Tensor<f32> {
    pub fn add(&self, other: &Tensor<f32>) -> Result<Tensor<f32>> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

/// Softmax over the last dimension. Shift-invariant; errors on NaN input.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.is_empty() || shape[shape.len() - 1] == 0 {
        return Err(Error::InvalidArgument("softmax_last needs a last dim >= 1".into()));
    }
    x.check_finite("softmax_last input")?;
    let d = shape[shape.len() - 1];
    let mut out = vec![T::zero(); x.numel()];
    for (row_in, row_out) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let max = row_in.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in row_out.iter_mut().zip(row_in) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Bilinear sample of a `[H, W, C]` map at continuous grid coordinates
/// `(x, y)` where integer coordinates land exactly on grid entries.
/// Out-of-bounds corners contribute zero; the returned weight is the
/// in-bounds fraction of the corner mass (0 = fully outside).
pub fn bilinear_sample<T: Scalar>(map: &Tensor<T>, x: T, y: T, out: &mut [T]) -> T {
    debug_assert_eq!(map.shape().len(), 3);
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    debug_assert_eq!(out.len(), c);
    for o in out.iter_mut() {
        *o = T::zero();
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0.to_f64().unwrap() as i64;
    let y0 = y0.to_f64().unwrap() as i64;
    let one = T::one();
    let corners = [
        (x0, y0, (one - fx) * (one - fy)),
        (x0 + 1, y0, fx * (one - fy)),
        (x0, y0 + 1, (one - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];
    let mut validity = T::zero();
    let data = map.data();
    for (cx, cy, wgt) in corners {
        if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
            continue;
        }
        validity += wgt;
        let base = (cy as usize * w + cx as usize) * c;
        for (o, &v) in out.iter_mut().zip(&data[base..base + c]) {
            *o += wgt * v;
        }
    }
    validity
}

/// Bilinear upsampling by an integer factor with half-pixel alignment and
/// edge clamping. Accepts `[H, W]` or `[H, W, C]`.
pub fn upsample_bilinear<T: Scalar>(src: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (h, w, c) = match src.shape() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        s => panic!("upsample_bilinear expects rank 2 or 3, got {s:?}"),
    };
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); oh * ow * c];
    let half = T::from_f64c(0.5);
    let f = T::from_usizec(factor);
    for oy in 0..oh {
        let sy = ((T::from_usizec(oy) + half) / f - half)
            .max(T::zero())
            .min(T::from_usizec(h - 1));
        let y0 = sy.floor();
        let ty = sy - y0;
        let y0 = y0.to_f64().unwrap() as usize;
        let y1 = (y0 + 1).min(h - 1);
        for ox in 0..ow {
            let sx = ((T::from_usizec(ox) + half) / f - half)
                .max(T::zero())
                .min(T::from_usizec(w - 1));
            let x0 = sx.floor();
            let tx = sx - x0;
            let x0 = x0.to_f64().unwrap() as usize;
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let g = |yy: usize, xx: usize| src.data()[(yy * w + xx) * c + ch];
                let top = g(y0, x0) * (T::one() - tx) + g(y0, x1) * tx;
                let bot = g(y1, x0) * (T::one() - tx) + g(y1, x1) * tx;
                out[(oy * ow + ox) * c + ch] = top * (T::one() - ty) + bot * ty;
            }
        }
    }
    let shape = if src.shape().len() == 2 {
        vec![oh, ow]
    } else {
        vec![oh, ow, c]
    };
    Tensor::new(shape, out).unwrap()
}
