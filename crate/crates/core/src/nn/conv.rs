use rand::Rng;

use super::{Param, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const K: usize = 3;

/// 3x3 convolution with zero padding 1 and stride 1 or 2.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    cols: Vec<Vec<T>>,
    in_shape: [usize; 4],
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, stride: usize, rng: &mut impl Rng) -> Self {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let fan_in = in_channels * K * K;
        Self {
            weight: Param::he_normal(vec![out_channels, in_channels, K, K], fan_in, rng),
            bias: Param::zeros(vec![out_channels]),
            in_channels,
            out_channels,
            stride,
            cols: Vec::new(),
            in_shape: [0; 4],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - K) / self.stride + 1, (w + 2 - K) / self.stride + 1)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.out_dims(h, w);
        let kdim = c * K * K;
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        self.cols.clear();
        for b in 0..n {
            let col = im2col(x.sample(b), c, h, w, oh, ow, self.stride);
            let o = out.sample_mut(b);
            for (co, row) in o.chunks_mut(oh * ow).enumerate() {
                row.iter_mut().for_each(|v| *v = self.bias.value[co]);
            }
            T::gemm(
                self.out_channels,
                kdim,
                oh * ow,
                T::one(),
                &self.weight.value,
                false,
                &col,
                false,
                T::one(),
                o,
            );
            self.cols.push(col);
        }
        self.in_shape = x.shape();
        out
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = self.in_shape;
        assert_eq!(self.cols.len(), n, "conv backward without matching forward");
        let (oh, ow) = self.out_dims(h, w);
        let kdim = c * K * K;
        let mut grad_in = Tensor::zeros(self.in_shape);
        let mut dcol = vec![T::zero(); kdim * oh * ow];
        for b in 0..n {
            let go = grad_out.sample(b);
            for (co, row) in go.chunks(oh * ow).enumerate() {
                self.bias.grad[co] += row.iter().copied().sum();
            }
            T::gemm(
                self.out_channels,
                oh * ow,
                kdim,
                T::one(),
                go,
                false,
                &self.cols[b],
                true,
                T::one(),
                &mut self.weight.grad,
            );
            T::gemm(
                kdim,
                self.out_channels,
                oh * ow,
                T::one(),
                &self.weight.value,
                true,
                go,
                false,
                T::zero(),
                &mut dcol,
            );
            col2im(&dcol, grad_in.sample_mut(b), c, h, w, oh, ow, self.stride);
        }
        grad_in
    }
}

impl<T: Scalar> Parameters<T> for Conv2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}weight"), &mut self.weight);
        f(&format!("{prefix}bias"), &mut self.bias);
    }
}

/// Valid output columns `[lo, hi)` for kernel column `kx`, i.e. those with
/// `0 <= ox * stride + kx - 1 < w`.
fn valid_cols(kx: usize, w: usize, ow: usize, stride: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1usize.div_ceil(stride) } else { 0 };
    // ox * stride + kx - 1 <= w - 1  <=>  ox <= (w - kx) / stride
    let hi = if w + 1 > kx { ((w - kx) / stride + 1).min(ow) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize, stride: usize) -> Vec<T> {
    let mut col = vec![T::zero(); c * K * K * oh * ow];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..K {
            for kx in 0..K {
                let row = (ci * K + ky) * K + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(kx, w, ow, stride);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize || lo == hi {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * ow + lo..oy * ow + hi];
                    let first = lo * stride + kx - 1;
                    if stride == 1 {
                        drow.copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (d, s) in drow.iter_mut().zip(src[first..].iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(col: &[T], dx: &mut [T], c: usize, h: usize, w: usize, oh: usize, ow: usize, stride: usize) {
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..K {
            for kx in 0..K {
                let row = (ci * K + ky) * K + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(kx, w, ow, stride);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize || lo == hi {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow + lo..oy * ow + hi];
                    let first = lo * stride + kx - 1;
                    if stride == 1 {
                        for (d, s) in drow[first..first + (hi - lo)].iter_mut().zip(srow) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in drow[first..].iter_mut().step_by(stride).zip(srow) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = conv.out_dims(h, w);
        Tensor::from_fn([n, conv.out_channels, oh, ow], |[b, co, oy, ox]| {
            let mut acc = conv.bias.value[co];
            for ci in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * conv.stride + ky) as isize - 1;
                        let ix = (ox * conv.stride + kx) as isize - 1;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight.value[((co * c + ci) * 3 + ky) * 3 + kx]
                                * x.at([b, ci, iy as usize, ix as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for stride in [1, 2] {
            let mut conv = Conv2d::<f64>::new(3, 4, stride, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = Tensor::from_fn([2, 3, 6, 6], |[b, c, y, x]| ((b + 2 * c + 3 * y + 5 * x) as f64 * 0.7).sin());
            let got = conv.forward(&x);
            let want = direct_conv(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_halves_even_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::<f32>::new(12, 8, 2, &mut rng);
        assert_eq!(conv.out_dims(64, 64), (32, 32));
        assert_eq!(conv.out_dims(8, 8), (4, 4));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> - <b, sum g> is linear in x, so its x-gradient equals backward(g).
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::<f64>::new(2, 3, 2, &mut rng);
        let x = Tensor::from_fn([1, 2, 6, 6], |[_, c, y, x]| ((c * 7 + y * 3 + x) as f64).cos());
        let y = conv.forward(&x);
        let g = Tensor::from_fn(y.shape(), |[_, c, y, x]| ((c + y * 2 + x) as f64 * 0.3).sin());
        let gx = conv.backward(&g);
        let e = Tensor::from_fn(x.shape(), |[_, c, y, x]| ((c * 5 + y + 2 * x) as f64 * 0.9).cos());
        let ye = conv.forward(&e);
        let bias_part: f64 = (0..3)
            .map(|co| conv.bias.value[co] * g.data()[co * 9..(co + 1) * 9].iter().sum::<f64>())
            .sum();
        let lhs: f64 = ye.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>() - bias_part;
        let rhs: f64 = e.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
