//! Dense batch-channel-height-width tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A contiguous `[batch, channels, height, width]` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {want} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([b, ch, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, b: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[b * len..(b + 1) * len]
    }

    /// One `[1, C, H, W]` tensor holding sample `b`.
    pub fn sample_tensor(&self, b: usize) -> Self {
        Self {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.sample(b).to_vec(),
        }
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.offset(idx)]
    }

    #[inline]
    pub fn at_mut(&mut self, idx: [usize; 4]) -> &mut T {
        let o = self.offset(idx);
        &mut self.data[o]
    }

    #[inline]
    fn offset(&self, [b, c, y, x]: [usize; 4]) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.ensure_same_shape(other)?;
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Stacks equally shaped tensors along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.shape[0] != n || p.shape[2] != h || p.shape[3] != w {
                return Err(Error::Shape(format!(
                    "cannot concat {:?} with {:?} along channels",
                    first.shape, p.shape
                )));
            }
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.sample(b));
            }
        }
        Ok(Self { shape: [n, c, h, w], data })
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        if sizes.iter().sum::<usize>() != self.shape[1] {
            return Err(Error::Shape(format!(
                "channel split {sizes:?} does not cover {} channels",
                self.shape[1]
            )));
        }
        let [n, _, h, w] = self.shape;
        let plane = h * w;
        let mut out: Vec<Self> = sizes
            .iter()
            .map(|&c| Self {
                shape: [n, c, h, w],
                data: Vec::with_capacity(n * c * plane),
            })
            .collect();
        for b in 0..n {
            let src = self.sample(b);
            let mut off = 0;
            for (part, &c) in out.iter_mut().zip(sizes) {
                part.data.extend_from_slice(&src[off..off + c * plane]);
                off += c * plane;
            }
        }
        Ok(out)
    }

    /// Stacks `[1, C, H, W]` (or any equal-shaped) tensors along the batch axis.
    pub fn stack_batch(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, p.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape: [n, c, h, w], data })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Mean squared error between equally shaped tensors, with its gradient
/// with respect to `pred`.
pub fn mse_with_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    pred.ensure_same_shape(target)?;
    let n = T::from_usize(pred.len().max(1)).unwrap();
    let mut grad = Tensor::zeros(pred.shape());
    let mut acc = T::zero();
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        acc += d * d;
        *g = (d + d) / n;
    }
    Ok((acc / n, grad))
}

pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.ensure_same_shape(target)?;
    let n = T::from_usize(pred.len().max(1)).unwrap();
    let acc: T = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    Ok(acc / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor::<f32>::from_fn([2, 1, 2, 2], |[b, _, y, x]| (b * 10 + y * 2 + x) as f32);
        let b = Tensor::<f32>::from_fn([2, 3, 2, 2], |[b, c, y, x]| -((b * 100 + c * 10 + y * 2 + x) as f32));
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [2, 4, 2, 2]);
        assert_eq!(cat.at([1, 0, 1, 1]), 13.0);
        assert_eq!(cat.at([1, 2, 0, 1]), -111.0);
        let parts = cat.split_channels(&[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn mse_of_constant_offset() {
        let p = Tensor::<f64>::full([1, 3, 4, 4], 0.6);
        let t = Tensor::<f64>::full([1, 3, 4, 4], 0.5);
        assert!((mse(&p, &t).unwrap() - 0.01).abs() < 1e-12);
        let zero = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let half = Tensor::<f64>::full([1, 1, 2, 2], 0.5);
        assert!((mse(&zero, &half).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
        let a = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let b = Tensor::<f32>::zeros([1, 1, 2, 3]);
        assert!(mse(&a, &b).is_err());
    }
}
