//! Dense two-frame motion estimation by polynomial expansion.
//!
//! Each neighbourhood is approximated by a quadratic `xᵀAx + bᵀx + c`
//! (Gaussian-weighted least squares). A translation `d` between frames shows
//! up as `b₂ = b₁ − 2Ad`, which is solved per pixel over a smoothing window,
//! coarse to fine over an image pyramid.
//!
//! Pixels where the window carries no structure fall back to the estimate
//! propagated from the coarser level via a small Tikhonov term.

use super::{check_pair, FlowField, FlowProvider};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FarnebackParams {
    pub levels: usize,
    /// Neighbourhood radius of the polynomial fit.
    pub poly_radius: usize,
    pub poly_sigma: f64,
    /// Standard deviation of the Gaussian window that pools the constraints.
    pub window_sigma: f64,
    pub iterations: usize,
    /// Weight pulling the solution towards the coarser-level estimate.
    pub prior_weight: f64,
}

impl Default for FarnebackParams {
    fn default() -> Self {
        Self {
            levels: 3,
            poly_radius: 3,
            poly_sigma: 1.5,
            window_sigma: 2.5,
            iterations: 4,
            prior_weight: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FarnebackFlow {
    pub params: FarnebackParams,
}

#[derive(Debug, Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    #[inline]
    fn at(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.w as isize - 1) as usize;
        let yc = y.clamp(0, self.h as isize - 1) as usize;
        self.data[yc * self.w + xc]
    }

    fn downsample(&self) -> Plane {
        let blurred = gaussian_blur(&self.data, self.w, self.h, 1.0);
        let (w, h) = (self.w / 2, self.h / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = blurred[2 * y * self.w + 2 * x]
                    + blurred[2 * y * self.w + 2 * x + 1]
                    + blurred[(2 * y + 1) * self.w + 2 * x]
                    + blurred[(2 * y + 1) * self.w + 2 * x + 1];
                data.push(s * 0.25);
            }
        }
        Plane { w, h, data }
    }
}

/// Per-pixel quadratic coefficients `(a11, a22, a12, b1, b2)`.
type Poly = [f64; 5];

fn solve(mut m: Vec<Vec<f64>>, mut rhs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    // Gauss-Jordan with partial pivoting; `rhs` has one row per unknown.
    let n = m.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&a, &b| m[a][col].abs().partial_cmp(&m[b][col].abs()).unwrap())
            .unwrap();
        m.swap(col, piv);
        rhs.swap(col, piv);
        let d = m[col][col];
        for j in 0..n {
            m[col][j] /= d;
        }
        for v in rhs[col].iter_mut() {
            *v /= d;
        }
        let pivot_row = m[col].clone();
        let pivot_rhs = rhs[col].clone();
        for r in 0..n {
            let f = m[r][col];
            if r != col && f != 0.0 {
                for j in 0..n {
                    m[r][j] -= f * pivot_row[j];
                }
                for (d, s) in rhs[r].iter_mut().zip(&pivot_rhs) {
                    *d -= f * s;
                }
            }
        }
    }
    rhs
}

/// Least-squares projection rows mapping a neighbourhood to `(x, y, x², y², xy)` coefficients.
fn poly_projection(radius: usize, sigma: f64) -> (Vec<(isize, isize)>, Vec<Vec<f64>>) {
    let r = radius as isize;
    let mut offsets = Vec::new();
    let mut basis = Vec::new();
    let mut weights = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (dx as f64, dy as f64);
            offsets.push((dx, dy));
            basis.push([1.0, x, y, x * x, y * y, x * y]);
            weights.push((-(x * x + y * y) / (2.0 * sigma * sigma)).exp());
        }
    }
    let mut gram = vec![vec![0.0; 6]; 6];
    for (b, &w) in basis.iter().zip(&weights) {
        for i in 0..6 {
            for j in 0..6 {
                gram[i][j] += w * b[i] * b[j];
            }
        }
    }
    let bw: Vec<Vec<f64>> = (0..6)
        .map(|i| basis.iter().zip(&weights).map(|(b, &w)| b[i] * w).collect())
        .collect();
    let proj = solve(gram, bw);
    (offsets, proj[1..].to_vec())
}

fn poly_expand(img: &Plane, offsets: &[(isize, isize)], proj: &[Vec<f64>]) -> Vec<Poly> {
    let mut out = Vec::with_capacity(img.w * img.h);
    for y in 0..img.h as isize {
        for x in 0..img.w as isize {
            let mut r = [0.0; 5];
            for (k, &(dx, dy)) in offsets.iter().enumerate() {
                let v = img.at(x + dx, y + dy);
                for (ri, p) in r.iter_mut().zip(proj) {
                    *ri += p[k] * v;
                }
            }
            // r = (x, y, x², y², xy)
            out.push([r[2], r[3], 0.5 * r[4], r[0], r[1]]);
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

fn gaussian_blur(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * data[y * w + xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn sample_poly(r: &[Poly], w: usize, h: usize, x: f64, y: f64) -> Poly {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let mut out = [0.0; 5];
    for i in 0..5 {
        out[i] = (1.0 - fy) * ((1.0 - fx) * r[y0 * w + x0][i] + fx * r[y0 * w + x1][i])
            + fy * ((1.0 - fx) * r[y1 * w + x0][i] + fx * r[y1 * w + x1][i]);
    }
    out
}

impl FarnebackFlow {
    pub fn new(params: FarnebackParams) -> Self {
        Self { params }
    }

    /// Flow between two grayscale planes, returned as per-pixel `(dx, dy)`.
    fn estimate(&self, a: &Plane, b: &Plane) -> Vec<[f64; 2]> {
        let p = &self.params;
        let (offsets, proj) = poly_projection(p.poly_radius, p.poly_sigma);
        let mut pyr_a = vec![a.clone()];
        let mut pyr_b = vec![b.clone()];
        while pyr_a.len() < p.levels.max(1) {
            let last = pyr_a.last().unwrap();
            if last.w < 16 || last.h < 16 {
                break;
            }
            let next_a = last.downsample();
            let next_b = pyr_b.last().unwrap().downsample();
            pyr_a.push(next_a);
            pyr_b.push(next_b);
        }
        let mut flow: Vec<[f64; 2]> = Vec::new();
        for level in (0..pyr_a.len()).rev() {
            let (la, lb) = (&pyr_a[level], &pyr_b[level]);
            let (w, h) = (la.w, la.h);
            flow = if flow.is_empty() {
                vec![[0.0, 0.0]; w * h]
            } else {
                let (pw, ph) = (pyr_a[level + 1].w, pyr_a[level + 1].h);
                let mut up = Vec::with_capacity(w * h);
                for y in 0..h {
                    for x in 0..w {
                        let (sx, sy) = ((x / 2).min(pw - 1), (y / 2).min(ph - 1));
                        let d = flow[sy * pw + sx];
                        up.push([2.0 * d[0], 2.0 * d[1]]);
                    }
                }
                up
            };
            let r1 = poly_expand(la, &offsets, &proj);
            let r2 = poly_expand(lb, &offsets, &proj);
            for _ in 0..p.iterations {
                flow = self.refine(&r1, &r2, &flow, w, h);
            }
        }
        flow
    }

    fn refine(&self, r1: &[Poly], r2: &[Poly], prior: &[[f64; 2]], w: usize, h: usize) -> Vec<[f64; 2]> {
        let n = w * h;
        let mut fields = vec![vec![0.0; n]; 5];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let d = prior[i];
                let q2 = sample_poly(r2, w, h, x as f64 + d[0], y as f64 + d[1]);
                let q1 = r1[i];
                let a11 = 0.5 * (q1[0] + q2[0]);
                let a22 = 0.5 * (q1[1] + q2[1]);
                let a12 = 0.5 * (q1[2] + q2[2]);
                let db1 = -0.5 * (q2[3] - q1[3]) + a11 * d[0] + a12 * d[1];
                let db2 = -0.5 * (q2[4] - q1[4]) + a12 * d[0] + a22 * d[1];
                fields[0][i] = a11 * a11 + a12 * a12;
                fields[1][i] = a12 * (a11 + a22);
                fields[2][i] = a12 * a12 + a22 * a22;
                fields[3][i] = a11 * db1 + a12 * db2;
                fields[4][i] = a12 * db1 + a22 * db2;
            }
        }
        let pooled: Vec<Vec<f64>> = fields
            .iter()
            .map(|f| gaussian_blur(f, w, h, self.params.window_sigma))
            .collect();
        let mu = self.params.prior_weight;
        (0..n)
            .map(|i| {
                let (g11, g12, g22) = (pooled[0][i] + mu, pooled[1][i], pooled[2][i] + mu);
                let h1 = pooled[3][i] + mu * prior[i][0];
                let h2 = pooled[4][i] + mu * prior[i][1];
                let det = g11 * g22 - g12 * g12;
                if det.abs() < 1e-300 {
                    prior[i]
                } else {
                    [(g22 * h1 - g12 * h2) / det, (g11 * h2 - g12 * h1) / det]
                }
            })
            .collect()
    }
}

fn gray_plane<T: Scalar>(t: &Tensor<T>, s: usize) -> Plane {
    let (c, h, w) = (t.channels(), t.height(), t.width());
    let plane = h * w;
    let src = t.sample(s);
    let data = (0..plane)
        .map(|p| (0..c).map(|ch| src[ch * plane + p].as_f64()).sum::<f64>() / c as f64)
        .collect();
    Plane { w, h, data }
}

impl<T: Scalar> FlowProvider<T> for FarnebackFlow {
    fn name(&self) -> &str {
        "farneback"
    }

    fn differentiable(&self) -> bool {
        false
    }

    fn pairwise_flow(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<FlowField<T>> {
        check_pair(a, b)?;
        let [n, _, h, w] = a.shape();
        let mut out = Tensor::zeros([n, 2, h, w]);
        let plane = h * w;
        for s in 0..n {
            let flow = self.estimate(&gray_plane(a, s), &gray_plane(b, s));
            let o = out.sample_mut(s);
            for (p, d) in flow.iter().enumerate() {
                o[p] = T::lit(d[0]);
                o[plane + p] = T::lit(d[1]);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured_square(cx: f64, cy: f64) -> Tensor<f64> {
        Tensor::from_fn([1, 3, 64, 64], |[_, _, y, x]| {
            let (fx, fy) = (x as f64 - cx, y as f64 - cy);
            if fx.abs() < 6.0 && fy.abs() < 6.0 {
                0.9
            } else {
                0.2
            }
        })
    }

    #[test]
    fn projection_recovers_exact_quadratics() {
        let (offsets, proj) = poly_projection(2, 1.1);
        // f = 0.3 x + 0.2 y + 0.05 x² − 0.1 y² + 0.07 xy + 1
        let f: Vec<f64> = offsets
            .iter()
            .map(|&(dx, dy)| {
                let (x, y) = (dx as f64, dy as f64);
                1.0 + 0.3 * x + 0.2 * y + 0.05 * x * x - 0.1 * y * y + 0.07 * x * y
            })
            .collect();
        let coef: Vec<f64> = proj.iter().map(|p| p.iter().zip(&f).map(|(a, b)| a * b).sum()).collect();
        for (got, want) in coef.iter().zip([0.3, 0.2, 0.05, -0.1, 0.07]) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_frames_have_no_motion() {
        let a = textured_square(30.0, 30.0);
        let f = FarnebackFlow::default().pairwise_flow(&a, &a).unwrap();
        assert!(f.max_abs() < 1e-3);
    }

    #[test]
    fn translated_square_flow_on_support() {
        let a = textured_square(28.0, 32.0);
        let b = textured_square(31.0, 32.0);
        let f = FarnebackFlow::default().pairwise_flow(&a, &b).unwrap();
        let mut sum = [0.0, 0.0];
        let mut n = 0.0;
        for y in 0..64 {
            for x in 0..64 {
                if (x as f64 - 28.0).abs() < 6.0 && (y as f64 - 32.0).abs() < 6.0 {
                    sum[0] += f.at([0, 0, y, x]);
                    sum[1] += f.at([0, 1, y, x]);
                    n += 1.0;
                }
            }
        }
        let mean = [sum[0] / n, sum[1] / n];
        assert!((mean[0] - 3.0).abs() <= 0.5, "mean flow {mean:?}");
        assert!(mean[1].abs() <= 0.5, "mean flow {mean:?}");
    }
}
