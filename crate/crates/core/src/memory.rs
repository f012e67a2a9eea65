//! Spatial and temporal memory pools.
//!
//! A pool holds `N` unit-norm prototype items of dimension `C`. Encoder
//! feature maps are flattened into `N̂ = H·W` queries. Training writes the
//! top-k most similar queries into each item; reads rebuild every query as a
//! softmax-weighted combination of items.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Vectors with norm at or below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-8;

/// `k_top` value that retains every query of a write.
pub const UNCONSTRAINED: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolRole {
    Spatial,
    Temporal,
}

/// `len` query vectors of dimension `dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch<T> {
    data: Vec<T>,
    len: usize,
    dim: usize,
}

impl<T: Scalar> QueryBatch<T> {
    pub fn new(data: Vec<T>, len: usize, dim: usize) -> Result<Self> {
        if data.len() != len * dim {
            return Err(Error::Shape(format!(
                "{len} queries of dim {dim} need {} values, got {}",
                len * dim,
                data.len()
            )));
        }
        Ok(Self { data, len, dim })
    }

    /// Flattens sample `b` of a `[B, C, H, W]` feature map into `H·W` queries.
    pub fn from_feature(feature: &Tensor<T>, b: usize) -> Self {
        let [_, c, h, w] = feature.shape();
        let plane = h * w;
        let src = feature.sample(b);
        let mut data = vec![T::zero(); plane * c];
        for ch in 0..c {
            for p in 0..plane {
                data[p * c + ch] = src[ch * plane + p];
            }
        }
        Self { data, len: plane, dim: c }
    }

    /// Writes the queries back as one `C x H x W` sample (inverse of [`QueryBatch::from_feature`]).
    pub fn write_into_sample(&self, dst: &mut [T]) {
        let plane = self.len;
        for p in 0..plane {
            for ch in 0..self.dim {
                dst[ch * plane + p] = self.data[p * self.dim + ch];
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, j: usize) -> &[T] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self {
            data: self.data.iter().map(|&v| v * alpha).collect(),
            len: self.len,
            dim: self.dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ReadOutput<T> {
    /// Reconstructed queries, `N̂ x C`.
    pub reconstructed: QueryBatch<T>,
    /// Softmax weights, `N̂ x N`; row `j` sums to one.
    pub weights: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct SeparationLoss<T> {
    pub value: T,
    pub grad_queries: Vec<T>,
    pub grad_items: Vec<T>,
    /// `(nearest, second nearest)` item index per query.
    pub neighbors: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPool<T> {
    items: Vec<T>,
    n_items: usize,
    dim: usize,
    k_top: usize,
    role: PoolRole,
}

impl<T: Scalar> MemoryPool<T> {
    /// Items drawn uniformly on the unit sphere.
    pub fn new(role: PoolRole, n_items: usize, dim: usize, k_top: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_items < 2 {
            return Err(Error::Config(format!("memory pool needs at least 2 items, got {n_items}")));
        }
        if dim == 0 || k_top == 0 {
            return Err(Error::Config("memory dim and k_top must be positive".into()));
        }
        let mut items: Vec<T> = (0..n_items * dim)
            .map(|_| T::lit(StandardNormal.sample(rng)))
            .collect();
        for row in items.chunks_mut(dim) {
            normalize_in_place(row);
        }
        Ok(Self {
            items,
            n_items,
            dim,
            k_top,
            role,
        })
    }

    /// Builds a pool from explicit items, normalizing each row.
    pub fn from_items(role: PoolRole, items: Vec<T>, dim: usize, k_top: usize) -> Result<Self> {
        if dim == 0 || items.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not form items of dim {dim}",
                items.len()
            )));
        }
        let n_items = items.len() / dim;
        if n_items < 2 {
            return Err(Error::Config(format!("memory pool needs at least 2 items, got {n_items}")));
        }
        if k_top == 0 {
            return Err(Error::Config("k_top must be positive".into()));
        }
        let mut items = items;
        for row in items.chunks_mut(dim) {
            normalize_in_place(row);
        }
        Ok(Self {
            items,
            n_items,
            dim,
            k_top,
            role,
        })
    }

    pub fn items(&self) -> &[T] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &[T] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k_top(&self) -> usize {
        self.k_top
    }

    pub fn role(&self) -> PoolRole {
        self.role
    }

    fn check(&self, q: &QueryBatch<T>) -> Result<()> {
        if q.dim != self.dim {
            return Err(Error::Shape(format!(
                "queries have dim {}, pool items have dim {}",
                q.dim, self.dim
            )));
        }
        Ok(())
    }

    /// `N x N̂` cosine similarities between items (rows) and queries (columns).
    pub fn cosine_similarity(&self, queries: &QueryBatch<T>) -> Result<Vec<T>> {
        self.check(queries)?;
        let (items_hat, _) = unit_rows(&self.items, self.dim);
        let (q_hat, _) = unit_rows(&queries.data, self.dim);
        let mut sim = vec![T::zero(); self.n_items * queries.len];
        T::gemm(
            self.n_items,
            self.dim,
            queries.len,
            T::one(),
            &items_hat,
            false,
            &q_hat,
            true,
            T::zero(),
            &mut sim,
        );
        sim.iter_mut().for_each(|v| *v = v.max(-T::one()).min(T::one()));
        Ok(sim)
    }

    /// Effective write sparsity for `n_queries` queries (k_top clamped to N̂).
    pub fn effective_k(&self, n_queries: usize) -> usize {
        self.k_top.min(n_queries)
    }

    /// `N x N̂` write weights: top-k similarities per item, weighted by
    /// `exp(s) - 1`, negatives clamped, normalized over the retained set.
    pub fn write_weights(&self, queries: &QueryBatch<T>) -> Result<Vec<T>> {
        let sim = self.cosine_similarity(queries)?;
        let nq = queries.len;
        if self.k_top > nq && self.k_top != UNCONSTRAINED {
            log::warn!(
                "k_top {} exceeds the {} available queries; clamping",
                self.k_top,
                nq
            );
        }
        let k = self.effective_k(nq);
        let mut weights = vec![T::zero(); self.n_items * nq];
        let mut order: Vec<usize> = (0..nq).collect();
        for i in 0..self.n_items {
            let row = &sim[i * nq..(i + 1) * nq];
            order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let w = &mut weights[i * nq..(i + 1) * nq];
            let mut denom = T::zero();
            for &j in &order[..k] {
                let raw = row[j].exp_m1().max(T::zero());
                w[j] = raw;
                denom += raw;
            }
            if denom > T::zero() {
                for &j in &order[..k] {
                    w[j] /= denom;
                }
            }
        }
        Ok(weights)
    }

    /// Updates every item from the pre-update pool state:
    /// `m_i <- normalize(m_i + sum_j w_ij q_j)`. Returns the weights used.
    pub fn write(&mut self, queries: &QueryBatch<T>) -> Result<Vec<T>> {
        let weights = self.write_weights(queries)?;
        let mut next = self.items.clone();
        T::gemm(
            self.n_items,
            queries.len,
            self.dim,
            T::one(),
            &weights,
            false,
            &queries.data,
            false,
            T::one(),
            &mut next,
        );
        for (new_row, old_row) in next.chunks_mut(self.dim).zip(self.items.chunks(self.dim)) {
            if !normalize_in_place(new_row) {
                new_row.copy_from_slice(old_row);
                normalize_in_place(new_row);
            }
        }
        self.items = next;
        Ok(weights)
    }

    /// Rebuilds each query as a softmax(cosine)-weighted sum of items.
    /// Never mutates the pool.
    pub fn read(&self, queries: &QueryBatch<T>) -> Result<ReadOutput<T>> {
        let sim = self.cosine_similarity(queries)?;
        let (n, nq) = (self.n_items, queries.len);
        let mut weights = vec![T::zero(); nq * n];
        for j in 0..nq {
            let row = &mut weights[j * n..(j + 1) * n];
            for i in 0..n {
                row[i] = sim[i * nq + j];
            }
            softmax_in_place(row);
        }
        let mut recon = vec![T::zero(); nq * self.dim];
        T::gemm(
            nq,
            n,
            self.dim,
            T::one(),
            &weights,
            false,
            &self.items,
            false,
            T::zero(),
            &mut recon,
        );
        Ok(ReadOutput {
            reconstructed: QueryBatch {
                data: recon,
                len: nq,
                dim: self.dim,
            },
            weights,
        })
    }

    /// Backpropagates a gradient on the read output to `(queries, items)`.
    pub fn read_backward(
        &self,
        queries: &QueryBatch<T>,
        out: &ReadOutput<T>,
        grad_recon: &[T],
    ) -> Result<(Vec<T>, Vec<T>)> {
        self.check(queries)?;
        let (n, nq, c) = (self.n_items, queries.len, self.dim);
        if grad_recon.len() != nq * c {
            return Err(Error::Shape("read gradient has wrong length".into()));
        }
        let w = &out.weights;
        // direct path: recon = W M
        let mut grad_items = vec![T::zero(); n * c];
        T::gemm(n, nq, c, T::one(), w, true, grad_recon, false, T::zero(), &mut grad_items);
        let mut dw = vec![T::zero(); nq * n];
        T::gemm(nq, c, n, T::one(), grad_recon, false, &self.items, true, T::zero(), &mut dw);
        // softmax
        let mut ds = vec![T::zero(); nq * n];
        for j in 0..nq {
            let wr = &w[j * n..(j + 1) * n];
            let dr = &dw[j * n..(j + 1) * n];
            let dot: T = wr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
            for i in 0..n {
                ds[j * n + i] = wr[i] * (dr[i] - dot);
            }
        }
        // s = q_hat m_hat^T, clamped to [-1, 1] (the clamp is inactive up to rounding)
        let (items_hat, items_norm) = unit_rows(&self.items, c);
        let (q_hat, q_norm) = unit_rows(&queries.data, c);
        let mut dq_hat = vec![T::zero(); nq * c];
        T::gemm(nq, n, c, T::one(), &ds, false, &items_hat, false, T::zero(), &mut dq_hat);
        let mut dm_hat = vec![T::zero(); n * c];
        T::gemm(n, nq, c, T::one(), &ds, true, &q_hat, false, T::zero(), &mut dm_hat);
        let grad_queries = unit_backward(&q_hat, &q_norm, &dq_hat, c);
        let dm = unit_backward(&items_hat, &items_norm, &dm_hat, c);
        grad_items.iter_mut().zip(dm).for_each(|(g, d)| *g += d);
        Ok((grad_queries, grad_items))
    }

    /// `sum_j ||q_j - m_first||² - ||q_j - m_second||²` over queries, with
    /// nearest and second-nearest items by L2 distance (ties to lower index).
    pub fn separation_loss(&self, queries: &QueryBatch<T>) -> Result<SeparationLoss<T>> {
        self.check(queries)?;
        let (n, c) = (self.n_items, self.dim);
        let mut value = T::zero();
        let mut grad_queries = vec![T::zero(); queries.len * c];
        let mut grad_items = vec![T::zero(); n * c];
        let mut neighbors = Vec::with_capacity(queries.len);
        let mut dist = vec![T::zero(); n];
        let two = T::lit(2.0);
        for j in 0..queries.len {
            let q = queries.row(j);
            for (i, d) in dist.iter_mut().enumerate() {
                *d = sq_dist(q, self.item(i));
            }
            let (first, second) = two_nearest(&dist);
            value += dist[first] - dist[second];
            let (m1, m2) = (self.item(first), self.item(second));
            let gq = &mut grad_queries[j * c..(j + 1) * c];
            for k in 0..c {
                gq[k] = two * (m2[k] - m1[k]);
                grad_items[first * c + k] -= two * (q[k] - m1[k]);
                grad_items[second * c + k] += two * (q[k] - m2[k]);
            }
            neighbors.push((first, second));
        }
        Ok(SeparationLoss {
            value,
            grad_queries,
            grad_items,
            neighbors,
        })
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn two_nearest<T: Scalar>(dist: &[T]) -> (usize, usize) {
    let mut first = 0;
    for i in 1..dist.len() {
        if dist[i] < dist[first] {
            first = i;
        }
    }
    let mut second = usize::MAX;
    for i in 0..dist.len() {
        if i != first && (second == usize::MAX || dist[i] < dist[second]) {
            second = i;
        }
    }
    (first, second)
}

/// Normalizes a row to unit length; returns false (leaving it untouched)
/// when the row is degenerate.
fn normalize_in_place<T: Scalar>(row: &mut [T]) -> bool {
    let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
    if norm <= T::lit(NORM_EPS) || !norm.is_finite() {
        return false;
    }
    row.iter_mut().for_each(|v| *v /= norm);
    true
}

/// Unit rows and their original norms; degenerate rows map to zero.
fn unit_rows<T: Scalar>(data: &[T], dim: usize) -> (Vec<T>, Vec<T>) {
    let mut hat = data.to_vec();
    let mut norms = Vec::with_capacity(data.len() / dim);
    for row in hat.chunks_mut(dim) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::lit(NORM_EPS) {
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        } else {
            row.iter_mut().for_each(|v| *v = T::zero());
            norms.push(T::zero());
        }
    }
    (hat, norms)
}

/// Gradient through `u = v / |v|`: `dv = (du - u (u·du)) / |v|`.
fn unit_backward<T: Scalar>(hat: &[T], norms: &[T], d_hat: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); hat.len()];
    for (r, &norm) in norms.iter().enumerate() {
        if norm <= T::zero() {
            continue;
        }
        let u = &hat[r * dim..(r + 1) * dim];
        let du = &d_hat[r * dim..(r + 1) * dim];
        let dot: T = u.iter().zip(du).map(|(&a, &b)| a * b).sum();
        for k in 0..dim {
            out[r * dim + k] = (du[k] - u[k] * dot) / norm;
        }
    }
    out
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pool(items: Vec<f64>, dim: usize, k: usize) -> MemoryPool<f64> {
        MemoryPool::from_items(PoolRole::Spatial, items, dim, k).unwrap()
    }

    fn queries(data: Vec<f64>, dim: usize) -> QueryBatch<f64> {
        let len = data.len() / dim;
        QueryBatch::new(data, len, dim).unwrap()
    }

    #[test]
    fn cosine_similarity_basic_cases() {
        let p = pool(vec![1.0, 0.0, 0.0, 1.0], 2, 1);
        let q = queries(vec![1.0, 0.0, -1.0, 0.0, 0.0, 3.0], 2);
        let s = p.cosine_similarity(&q).unwrap();
        // item 0 against queries
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!((s[1] + 1.0).abs() < 1e-12);
        assert!(s[2].abs() < 1e-12);
        // item 1
        assert!((s[5] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_query_has_zero_similarity() {
        let p = pool(vec![1.0, 0.0, 0.0, 1.0], 2, 1);
        let q = queries(vec![0.0, 0.0], 2);
        assert_eq!(p.cosine_similarity(&q).unwrap(), vec![0.0, 0.0]);
        let out = p.read(&q).unwrap();
        assert!((out.weights[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn write_weights_hand_example() {
        // Item (1, 0) against queries whose cosines are 0.9, 0.5, 0.1, -0.2.
        let cosines: [f64; 4] = [0.9, 0.5, 0.1, -0.2];
        let data: Vec<f64> = cosines
            .iter()
            .flat_map(|&c| [c, (1.0 - c * c).sqrt()])
            .collect();
        let p = pool(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let w = p.write_weights(&queries(data, 2)).unwrap();
        let d = 0.9f64.exp_m1() + 0.5f64.exp_m1();
        assert!((d - 2.108).abs() < 1e-3);
        assert!((w[0] - 0.9f64.exp_m1() / d).abs() < 1e-12);
        assert!((w[0] - 0.692).abs() < 1e-3);
        assert!((w[1] - 0.308).abs() < 1e-3);
        assert_eq!(&w[2..4], &[0.0, 0.0]);
    }

    #[test]
    fn equal_similarities_give_uniform_weights() {
        let p = pool(vec![1.0, 0.0, 0.0, 1.0], 2, 5);
        let q = queries(vec![0.6, 0.8].repeat(5), 2);
        let w = p.write_weights(&q).unwrap();
        for v in &w[..5] {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn writing_an_item_onto_itself_is_a_fixed_point() {
        let mut p = pool(vec![0.6, 0.8, 1.0, 0.0], 2, 1);
        let q = queries(vec![0.6, 0.8], 2);
        p.write(&q).unwrap();
        assert!((p.item(0)[0] - 0.6).abs() < 1e-12);
        assert!((p.item(0)[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn non_positive_similarities_leave_item_unchanged() {
        let mut p = pool(vec![1.0, 0.0, 0.0, 1.0], 2, 1);
        let q = queries(vec![-1.0, 0.0], 2);
        let w = p.write(&q).unwrap();
        assert_eq!(w[0], 0.0);
        assert_eq!(p.item(0), &[1.0, 0.0]);
    }

    #[test]
    fn k_top_is_clamped_to_query_count() {
        let p = pool(vec![1.0, 0.0, 0.0, 1.0], 2, 8);
        assert_eq!(p.effective_k(3), 3);
        let q = queries(vec![1.0, 0.1, 1.0, 0.2, 1.0, 0.3], 2);
        let w = p.write_weights(&q).unwrap();
        assert!(w[..3].iter().all(|&v| v > 0.0));
    }

    #[test]
    fn two_item_read_example() {
        let p = pool(vec![1.0, 0.0, 0.0, 1.0], 2, 1);
        let out = p.read(&queries(vec![1.0, 0.0], 2)).unwrap();
        let e = std::f64::consts::E;
        assert!((out.weights[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((out.weights[0] - 0.731).abs() < 1e-3);
        assert!((out.weights[1] - 0.269).abs() < 1e-3);
        let z = out.reconstructed.row(0);
        assert!((z[0] - out.weights[0]).abs() < 1e-12);
        assert!((z[1] - out.weights[1]).abs() < 1e-12);
    }

    #[test]
    fn identical_items_read_back_that_item() {
        let p = pool(vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0], 2, 1);
        let out = p.read(&queries(vec![3.0, -1.0, 0.2, 0.1], 2)).unwrap();
        for j in 0..2 {
            assert!((out.reconstructed.row(j)[1] - 1.0).abs() < 1e-12);
            assert!(out.reconstructed.row(j)[0].abs() < 1e-12);
        }
    }

    #[test]
    fn separation_loss_cases() {
        let p = pool(vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0], 2, 1);
        // Equidistant from items 0 and 1 (tie -> lower index first).
        let l = p.separation_loss(&queries(vec![0.0, -2.0], 2)).unwrap();
        assert!(l.value.abs() < 1e-12);
        assert_eq!(l.neighbors[0], (0, 1));
        // Exactly on item 2: first term vanishes.
        let l = p.separation_loss(&queries(vec![0.0, 1.0], 2)).unwrap();
        assert!((l.value + 2.0).abs() < 1e-12);
    }

    #[test]
    fn separation_loss_rejects_dim_mismatch() {
        let p = pool(vec![1.0, 0.0, 0.0, 1.0], 2, 1);
        assert!(p.separation_loss(&queries(vec![1.0, 2.0, 3.0], 3)).is_err());
    }

    #[test]
    fn pool_construction_validates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MemoryPool::<f32>::new(PoolRole::Temporal, 1, 4, 1, &mut rng).is_err());
        let p = MemoryPool::<f32>::new(PoolRole::Temporal, 4, 3, 2, &mut rng).unwrap();
        for i in 0..4 {
            let n: f32 = p.item(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_flatten_roundtrip() {
        let f = Tensor::<f32>::from_fn([2, 3, 2, 2], |[b, c, y, x]| (b * 100 + c * 10 + y * 2 + x) as f32);
        let q = QueryBatch::from_feature(&f, 1);
        assert_eq!(q.len(), 4);
        assert_eq!(q.row(3), &[103.0, 113.0, 123.0]);
        let mut back = vec![0.0; 12];
        q.write_into_sample(&mut back);
        assert_eq!(back, f.sample(1));
    }

    #[test]
    fn read_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, nq, c) = (4, 5, 3);
        let items: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qd: Vec<f64> = (0..nq * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let coef: Vec<f64> = (0..nq * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // loss = <coef, read(q)>; items stored unit-norm, so perturb queries
        // and the stored items directly
        let loss = |items: &[f64], q: &[f64]| {
            let pool = MemoryPool { items: items.to_vec(), n_items: n, dim: c, k_top: 2, role: PoolRole::Spatial };
            let out = pool.read(&QueryBatch::new(q.to_vec(), nq, c).unwrap()).unwrap();
            out.reconstructed.data().iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>()
        };
        let pool = MemoryPool::from_items(PoolRole::Spatial, items, c, 2).unwrap();
        let q = QueryBatch::new(qd.clone(), nq, c).unwrap();
        let out = pool.read(&q).unwrap();
        let (gq, gm) = pool.read_backward(&q, &out, &coef).unwrap();
        let h = 1e-6;
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        for i in 0..qd.len() {
            let (mut p, mut m) = (qd.clone(), qd.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(pool.items(), &p) - loss(pool.items(), &m)) / (2.0 * h);
            assert!(rel(fd, gq[i]) < 1e-5, "query {i}: {fd} vs {}", gq[i]);
        }
        for i in 0..n * c {
            let (mut p, mut m) = (pool.items().to_vec(), pool.items().to_vec());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p, &qd) - loss(&m, &qd)) / (2.0 * h);
            assert!(rel(fd, gm[i]) < 1e-5, "item {i}: {fd} vs {}", gm[i]);
        }
    }
}
