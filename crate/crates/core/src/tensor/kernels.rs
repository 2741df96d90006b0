//! Plain (untaped) kernels. The tape calls into these so that recorded and
//! unrecorded paths produce bitwise identical values.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Clamp applied to vector norms in cosine similarity.
pub const NORM_CLAMP: f64 = 1e-12;

/// Compressed adjacency lists used by mean-neighbourhood aggregation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbors {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl Neighbors {
    /// Build symmetric adjacency lists from undirected edges stored once.
    pub fn from_undirected(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut deg = vec![0usize; n];
        for &(u, v) in edges {
            deg[u] += 1;
            if u != v {
                deg[v] += 1;
            }
        }
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + deg[i];
        }
        let mut fill = offsets.clone();
        let mut indices = vec![0usize; offsets[n]];
        for &(u, v) in edges {
            indices[fill[u]] = v;
            fill[u] += 1;
            if u != v {
                indices[fill[v]] = u;
                fill[v] += 1;
            }
        }
        for i in 0..n {
            indices[offsets[i]..offsets[i + 1]].sort_unstable();
        }
        Self { offsets, indices }
    }

    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn of(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }
}

fn check_same<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

#[inline]
pub fn norm<S: Scalar>(a: &[S]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity with both norms clamped from below.
#[inline]
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    dot(a, b) / (norm(a).max(NORM_CLAMP) * norm(b).max(NORM_CLAMP))
}

/// `a · b` for `a: [n, k]`, `b: [k, m]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::contract(format!(
            "matmul: inner dims {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![S::zero(); n * m];
    let mut acc = vec![0.0f64; m];
    let bd = b.data();
    for i in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (p, &aip) in a.row(i).iter().enumerate() {
            let aip = aip.f64();
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in acc.iter_mut().zip(brow) {
                *o += aip * bv.f64();
            }
        }
        for (o, &v) in out[i * m..(i + 1) * m].iter_mut().zip(&acc) {
            *o = S::from_f64_lossy(v);
        }
    }
    Tensor::matrix(n, m, out)
}

/// `a · bᵀ` for `a: [n, k]`, `b: [m, k]`.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.cols() != b.cols() {
        return Err(Error::contract(format!(
            "matmul_nt: {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out.push(S::from_f64_lossy(dot(ar, b.row(j))));
        }
    }
    Tensor::matrix(n, m, out)
}

/// `aᵀ · b` for `a: [k, n]`, `b: [k, m]`.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rows() != b.rows() {
        return Err(Error::contract(format!(
            "matmul_tn: {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (k, n, m) = (a.rows(), a.cols(), b.cols());
    let mut acc = vec![0.0f64; n * m];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            let av = av.f64();
            if av == 0.0 {
                continue;
            }
            let dst = &mut acc[i * m..(i + 1) * m];
            for (o, &bv) in dst.iter_mut().zip(br) {
                *o += av * bv.f64();
            }
        }
    }
    Tensor::matrix(n, m, acc.into_iter().map(S::from_f64_lossy).collect())
}

fn zip_with<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    what: &str,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    check_same(a, b, what)?;
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn sub<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_with(a, b, "sub", |x, y| x - y)
}

pub fn hadamard<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_with(a, b, "hadamard", |x, y| x * y)
}

/// Adds the length-`cols` vector `bias` to every row of `a`.
pub fn add_row<S: Scalar>(a: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let c = a.cols();
    if bias.len() != c {
        return Err(Error::contract(format!(
            "add_row: bias of {} for {} columns",
            bias.len(),
            c
        )));
    }
    let b = bias.data();
    let data = a
        .data()
        .chunks(c.max(1))
        .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn affine<S: Scalar>(a: &Tensor<S>, scale: f64, shift: f64) -> Tensor<S> {
    let (sc, sh) = (S::from_f64_lossy(scale), S::from_f64_lossy(shift));
    a.map(|v| v * sc + sh)
}

pub fn relu<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    a.map(|v| if v > S::zero() { v } else { S::zero() })
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    a.map(|v| S::from_f64_lossy(sigmoid_scalar(v.f64())))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let c = a.cols();
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.rows() {
        let row = a.row(i);
        let mx = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = row.iter().map(|v| (v.f64() - mx).exp()).collect();
        let z: f64 = ex.iter().sum();
        out.extend(ex.iter().map(|e| S::from_f64_lossy(e / z)));
    }
    debug_assert_eq!(out.len(), a.rows() * c);
    Tensor {
        shape: a.shape().to_vec(),
        data: out,
    }
}

/// Cosine similarity of matching rows; output shape `[n]`.
pub fn row_cosine<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    check_same(a, b, "row_cosine")?;
    let data = (0..a.rows())
        .map(|i| S::from_f64_lossy(cosine(a.row(i), b.row(i))))
        .collect();
    Tensor::new(vec![a.rows()], data)
}

/// Mean of neighbour rows; isolated nodes get a zero row.
pub fn neighbor_mean<S: Scalar>(h: &Tensor<S>, nb: &Neighbors) -> Result<Tensor<S>> {
    if h.rows() != nb.node_count() {
        return Err(Error::contract(format!(
            "neighbor_mean: {} rows for {} nodes",
            h.rows(),
            nb.node_count()
        )));
    }
    let d = h.cols();
    let mut out = vec![S::zero(); h.rows() * d];
    let mut acc = vec![0.0f64; d];
    for i in 0..h.rows() {
        let ns = nb.of(i);
        if ns.is_empty() {
            continue;
        }
        acc.iter_mut().for_each(|v| *v = 0.0);
        for &j in ns {
            for (o, &v) in acc.iter_mut().zip(h.row(j)) {
                *o += v.f64();
            }
        }
        let inv = ns.len() as f64;
        for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(&acc) {
            *o = S::from_f64_lossy(v / inv);
        }
    }
    Tensor::new(h.shape().to_vec(), out)
}

pub fn gather_rows<S: Scalar>(a: &Tensor<S>, idx: &[usize]) -> Result<Tensor<S>> {
    let c = a.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        if i >= a.rows() {
            return Err(Error::contract(format!(
                "gather_rows: index {i} out of {} rows",
                a.rows()
            )));
        }
        data.extend_from_slice(a.row(i));
    }
    Tensor::matrix(idx.len(), c, data)
}

pub fn concat_cols<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let n = parts.first().map_or(0, |p| p.rows());
    if parts.iter().any(|p| p.rows() != n) {
        return Err(Error::contract("concat_cols: row counts differ"));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::matrix(n, total, data)
}

pub fn sum<S: Scalar>(a: &Tensor<S>) -> f64 {
    a.data().iter().map(|v| v.f64()).sum()
}

/// Column means over rows; output shape `[1, cols]`.
pub fn mean_rows<S: Scalar>(a: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rows() == 0 {
        return Err(Error::contract("mean_rows on an empty tensor"));
    }
    let c = a.cols();
    let mut acc = vec![0.0f64; c];
    for i in 0..a.rows() {
        for (o, &v) in acc.iter_mut().zip(a.row(i)) {
            *o += v.f64();
        }
    }
    let n = a.rows() as f64;
    Tensor::matrix(1, c, acc.into_iter().map(|v| S::from_f64_lossy(v / n)).collect())
}

/// Dot products `a_u · a_v` for each listed pair; output shape `[pairs]`.
pub fn pair_dot<S: Scalar>(a: &Tensor<S>, pairs: &[(usize, usize)]) -> Result<Tensor<S>> {
    let n = a.rows();
    let mut data = Vec::with_capacity(pairs.len());
    for &(u, v) in pairs {
        if u >= n || v >= n {
            return Err(Error::contract(format!("pair_dot: pair ({u},{v}) out of {n} rows")));
        }
        data.push(S::from_f64_lossy(dot(a.row(u), a.row(v))));
    }
    Tensor::new(vec![pairs.len()], data)
}
