use super::{Mode, Param, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    momentum: f64,
    eps: f64,
    // backward cache
    normalized: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
    shape: [usize; 4],
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], T::one()),
            beta: Param::zeros(vec![channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            normalized: Vec::new(),
            inv_std: Vec::new(),
            mode: Mode::Eval,
            shape: [0; 4],
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.gamma.len(), "batch-norm channels");
        let plane = h * w;
        let count = n * plane;
        let eps = T::lit(self.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let cnt = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for b in 0..n {
                    let s = x.sample(b);
                    for ch in 0..c {
                        mean[ch] += s[ch * plane..(ch + 1) * plane].iter().copied().sum();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= cnt);
                for b in 0..n {
                    let s = x.sample(b);
                    for ch in 0..c {
                        let m = mean[ch];
                        var[ch] += s[ch * plane..(ch + 1) * plane]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum();
                    }
                }
                var.iter_mut().for_each(|v| *v /= cnt);
                let mom = T::lit(self.momentum);
                let unbias = if count > 1 {
                    cnt / (cnt - T::one())
                } else {
                    T::one()
                };
                for ch in 0..c {
                    self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean[ch];
                    self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        self.inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = Tensor::zeros(x.shape());
        self.normalized = vec![T::zero(); x.len()];
        for b in 0..n {
            let s = x.sample(b);
            let base = b * c * plane;
            let o = out.sample_mut(b);
            for ch in 0..c {
                let (m, is, g, be) = (mean[ch], self.inv_std[ch], self.gamma.value[ch], self.beta.value[ch]);
                for i in ch * plane..(ch + 1) * plane {
                    let xn = (s[i] - m) * is;
                    self.normalized[base + i] = xn;
                    o[i] = g * xn + be;
                }
            }
        }
        self.mode = mode;
        self.shape = x.shape();
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = self.shape;
        assert_eq!(grad_out.shape(), self.shape, "batch-norm backward shape");
        let plane = h * w;
        let cnt = T::from_usize(n * plane).unwrap();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xn = vec![T::zero(); c];
        for b in 0..n {
            let g = grad_out.sample(b);
            let base = b * c * plane;
            for ch in 0..c {
                for i in ch * plane..(ch + 1) * plane {
                    sum_dy[ch] += g[i];
                    sum_dy_xn[ch] += g[i] * self.normalized[base + i];
                }
            }
        }
        for ch in 0..c {
            self.beta.grad[ch] += sum_dy[ch];
            self.gamma.grad[ch] += sum_dy_xn[ch];
        }
        let mut grad_in = Tensor::zeros(self.shape);
        for b in 0..n {
            let g = grad_out.sample(b);
            let base = b * c * plane;
            let gi = grad_in.sample_mut(b);
            for ch in 0..c {
                let scale = self.gamma.value[ch] * self.inv_std[ch];
                match self.mode {
                    Mode::Train => {
                        let md = sum_dy[ch] / cnt;
                        let mdx = sum_dy_xn[ch] / cnt;
                        for i in ch * plane..(ch + 1) * plane {
                            gi[i] = scale * (g[i] - md - self.normalized[base + i] * mdx);
                        }
                    }
                    Mode::Eval => {
                        for i in ch * plane..(ch + 1) * plane {
                            gi[i] = scale * g[i];
                        }
                    }
                }
            }
        }
        grad_in
    }
}

impl<T: Scalar> Parameters<T> for BatchNorm2d<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&format!("{prefix}gamma"), &mut self.gamma);
        f(&format!("{prefix}beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<T>)) {
        f(&format!("{prefix}running_mean"), &mut self.running_mean);
        f(&format!("{prefix}running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Tensor::from_fn([3, 2, 2, 2], |[b, c, y, x]| (b * 4 + y * 2 + x) as f64 * (c as f64 + 1.0) + 5.0);
        let y = bn.forward(&x, Mode::Train);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.sample(b)[ch * 4..(ch + 1) * 4].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 12.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.4];
        let x = Tensor::from_fn([2, 2, 2, 3], |[b, c, y, x]| ((b * 13 + c * 7 + y * 3 + x) as f64 * 0.61).sin());
        let w = Tensor::from_fn(x.shape(), |[b, c, y, x]| ((b + c * 2 + y * 5 + x * 3) as f64 * 0.37).cos());
        let loss = |bn: &mut BatchNorm2d<f64>, x: &Tensor<f64>| -> f64 {
            let y = bn.forward(x, Mode::Train);
            y.data().iter().zip(w.data()).map(|(a, b)| a * b * a).sum()
        };
        let y = bn.forward(&x, Mode::Train);
        let g = y.zip_map(&w, |a, b| 2.0 * a * b).unwrap();
        let gx = bn.backward(&g);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / (2.0 * h);
            assert!((fd - gx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", gx.data()[i]);
        }
    }
}
