//! Matrix products and affine maps.
//!
//! Kernels are plain loops arranged so the innermost axis is contiguous;
//! rayon splits work over disjoint output rows (bit-deterministic under any
//! thread count). Reductions that cross rows are summed over fixed-size row
//! chunks in chunk order, so results do not depend on scheduling either.

use rayon::prelude::*;

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rows per parallel task for reduction-style backward passes.
const ROW_CHUNK: usize = 64;

/// Work threshold below which a kernel stays sequential.
const PAR_FLOPS: usize = 1 << 15;

fn batch_count(shape: &[usize]) -> usize {
    numel(&shape[..shape.len() - 2])
}

/// Validates `[.., m, k] x [.., k, n]` and returns (batch, m, k, n, a_bcast, b_bcast).
fn matmul_dims(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    b_inner_is_rows: bool,
) -> Result<(usize, usize, usize, usize, bool, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dimension(op, format!("operands must be matrices, got {a:?} and {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if b_inner_is_rows {
        (b[b.len() - 2], b[b.len() - 1])
    } else {
        (b[b.len() - 1], b[b.len() - 2])
    };
    if k != bk {
        return Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() });
    }
    let ab = batch_count(a);
    let bb = batch_count(b);
    if ab == bb {
        Ok((ab, m, k, n, false, false))
    } else if bb == 1 {
        Ok((ab, m, k, n, false, true))
    } else if ab == 1 {
        Ok((bb, m, k, n, true, false))
    } else {
        Err(Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() })
    }
}

fn out_shape(a: &[usize], b: &[usize], m: usize, n: usize) -> Vec<usize> {
    let lead = if a.len() >= b.len() { &a[..a.len() - 2] } else { &b[..b.len() - 2] };
    let mut s = lead.to_vec();
    s.push(m);
    s.push(n);
    s
}

/// out[bi] = A[bi] @ B[bi], row-major, n-contiguous inner loop.
fn mm_kernel<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_bcast: bool,
    b_bcast: bool,
) {
    let body = |row: usize, out_row: &mut [T]| {
        let bi = row / m;
        let i = row % m;
        let abase = if a_bcast { 0 } else { bi * m * k };
        let bbase = if b_bcast { 0 } else { bi * k * n };
        for kk in 0..k {
            let aik = a[abase + i * k + kk];
            let brow = &b[bbase + kk * n..bbase + kk * n + n];
            for (o, bv) in out_row.iter_mut().zip(brow) {
                *o += aik * *bv;
            }
        }
    };
    if batch * m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(|(row, out_row)| body(row, out_row));
    } else {
        for (row, out_row) in out.chunks_mut(n).enumerate() {
            body(row, out_row);
        }
    }
}

/// out[bi] = A[bi] @ B[bi]^T; both operands read along contiguous rows.
fn mm_nt_kernel<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_bcast: bool,
    b_bcast: bool,
) {
    let body = |row: usize, out_row: &mut [T]| {
        let bi = row / m;
        let i = row % m;
        let abase = if a_bcast { 0 } else { bi * m * k };
        let bbase = if b_bcast { 0 } else { bi * n * k };
        let arow = &a[abase + i * k..abase + i * k + k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let brow = &b[bbase + j * k..bbase + j * k + k];
            let mut acc = T::ZERO;
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            *o = acc;
        }
    };
    if batch * m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(|(row, out_row)| body(row, out_row));
    } else {
        for (row, out_row) in out.chunks_mut(n).enumerate() {
            body(row, out_row);
        }
    }
}

/// Sums per-chunk partial buffers in chunk order.
fn chunked_accumulate<T: Scalar>(
    len: usize,
    chunks: usize,
    each: impl Fn(usize) -> Vec<T> + Sync + Send,
) -> Vec<T> {
    let partials: Vec<Vec<T>> = (0..chunks).into_par_iter().map(each).collect();
    let mut acc = vec![T::ZERO; len];
    for part in partials {
        for (a, p) in acc.iter_mut().zip(part) {
            *a += p;
        }
    }
    acc
}

impl<T: Scalar> Tensor<T> {
    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Leading batch extents must agree, or one operand is a plain matrix
    /// shared across the batch.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, m, k, n, a_bc, b_bc) = matmul_dims("matmul", self.shape(), other.shape(), true)?;
        let mut out = vec![T::ZERO; batch * m * n];
        mm_kernel(self.data(), other.data(), &mut out, batch, m, k, n, a_bc, b_bc);

        let a = self.data_arc();
        let b = other.data_arc();
        let (a_shape, b_shape) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(Tensor::from_op(
            out_shape(self.shape(), other.shape(), m, n),
            out,
            vec![self.clone(), other.clone()],
            move |g| {
                // dA[bi] = G[bi] @ B[bi]^T
                let mut da = vec![T::ZERO; numel(&a_shape)];
                let eff_a_batch = if a_bc { 1 } else { batch };
                for bi in 0..batch {
                    let gbase = bi * m * n;
                    let bbase = if b_bc { 0 } else { bi * k * n };
                    let dabase = (bi % eff_a_batch) * m * k;
                    for i in 0..m {
                        let grow = &g[gbase + i * n..gbase + i * n + n];
                        for kk in 0..k {
                            let brow = &b[bbase + kk * n..bbase + kk * n + n];
                            let mut acc = T::ZERO;
                            for (gv, bv) in grow.iter().zip(brow) {
                                acc += *gv * *bv;
                            }
                            da[dabase + i * k + kk] += acc;
                        }
                    }
                }
                // dB[bi] = A[bi]^T @ G[bi]
                let mut db = vec![T::ZERO; numel(&b_shape)];
                let eff_b_batch = if b_bc { 1 } else { batch };
                for bi in 0..batch {
                    let gbase = bi * m * n;
                    let abase = if a_bc { 0 } else { bi * m * k };
                    let dbbase = (bi % eff_b_batch) * k * n;
                    for i in 0..m {
                        let grow = &g[gbase + i * n..gbase + i * n + n];
                        for kk in 0..k {
                            let aik = a[abase + i * k + kk];
                            let drow = &mut db[dbbase + kk * n..dbbase + kk * n + n];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += aik * *gv;
                            }
                        }
                    }
                }
                vec![Some(da), Some(db)]
            },
        ))
    }

    /// `[.., m, k] x [.., n, k] -> [.., m, n]`, i.e. `a @ b^T`. The layout
    /// suits attention scores, where keys are stored row-major like queries.
    pub fn matmul_nt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (batch, m, k, n, a_bc, b_bc) =
            matmul_dims("matmul_nt", self.shape(), other.shape(), false)?;
        let mut out = vec![T::ZERO; batch * m * n];
        mm_nt_kernel(self.data(), other.data(), &mut out, batch, m, k, n, a_bc, b_bc);

        let a = self.data_arc();
        let b = other.data_arc();
        let (a_shape, b_shape) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(Tensor::from_op(
            out_shape(self.shape(), other.shape(), m, n),
            out,
            vec![self.clone(), other.clone()],
            move |g| {
                // dA[bi] = G[bi] @ B[bi]; dB[bi] = G[bi]^T @ A[bi]
                let mut da = vec![T::ZERO; numel(&a_shape)];
                let mut db = vec![T::ZERO; numel(&b_shape)];
                let eff_a_batch = if a_bc { 1 } else { batch };
                let eff_b_batch = if b_bc { 1 } else { batch };
                for bi in 0..batch {
                    let gbase = bi * m * n;
                    let abase = if a_bc { 0 } else { bi * m * k };
                    let bbase = if b_bc { 0 } else { bi * n * k };
                    let dabase = (bi % eff_a_batch) * m * k;
                    let dbbase = (bi % eff_b_batch) * n * k;
                    for i in 0..m {
                        let grow = &g[gbase + i * n..gbase + i * n + n];
                        let arow = &a[abase + i * k..abase + i * k + k];
                        for j in 0..n {
                            let gij = grow[j];
                            let brow = &b[bbase + j * k..bbase + j * k + k];
                            let darow = &mut da[dabase + i * k..dabase + i * k + k];
                            for (d, bv) in darow.iter_mut().zip(brow) {
                                *d += gij * *bv;
                            }
                            let dbrow = &mut db[dbbase + j * k..dbbase + j * k + k];
                            for (d, av) in dbrow.iter_mut().zip(arow) {
                                *d += gij * *av;
                            }
                        }
                    }
                }
                vec![Some(da), Some(db)]
            },
        ))
    }

    /// Affine map along the last axis: `x [.., din] -> [.., dout]`.
    pub fn linear(&self, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if w.rank() != 2 {
            return Err(Error::dimension("linear", format!("weight must be 2-d, got {:?}", w.shape())));
        }
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        if self.shape().last() != Some(&din) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if b.shape() != [dout] {
            return Err(Error::ShapeMismatch { op: "linear", lhs: w.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let rows = self.numel() / din.max(1);
        let x = self.data();
        let wd = w.data();
        let bd = b.data();

        let mut out = vec![T::ZERO; rows * dout];
        let fill = |row: usize, out_row: &mut [T]| {
            out_row.copy_from_slice(bd);
            for kk in 0..din {
                let xv = x[row * din + kk];
                let wrow = &wd[kk * dout..kk * dout + dout];
                for (o, wv) in out_row.iter_mut().zip(wrow) {
                    *o += xv * *wv;
                }
            }
        };
        if rows * din * dout >= PAR_FLOPS {
            out.par_chunks_mut(dout).enumerate().for_each(|(r, o)| fill(r, o));
        } else {
            for (r, o) in out.chunks_mut(dout).enumerate() {
                fill(r, o);
            }
        }

        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let x_rc = self.data_arc();
        let w_rc = w.data_arc();
        let in_shape = self.shape().to_vec();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), w.clone(), b.clone()],
            move |g| {
                // dx = g @ w^T, row-parallel
                let mut dx = vec![T::ZERO; numel(&in_shape)];
                let dx_fill = |row: usize, dx_row: &mut [T]| {
                    let grow = &g[row * dout..row * dout + dout];
                    for (kk, d) in dx_row.iter_mut().enumerate() {
                        let wrow = &w_rc[kk * dout..kk * dout + dout];
                        let mut acc = T::ZERO;
                        for (gv, wv) in grow.iter().zip(wrow) {
                            acc += *gv * *wv;
                        }
                        *d = acc;
                    }
                };
                if rows * din * dout >= PAR_FLOPS {
                    dx.par_chunks_mut(din).enumerate().for_each(|(r, d)| dx_fill(r, d));
                } else {
                    for (r, d) in dx.chunks_mut(din).enumerate() {
                        dx_fill(r, d);
                    }
                }

                // dw and db reduce over rows: fixed row chunks, summed in order
                let chunks = rows.div_ceil(ROW_CHUNK).max(1);
                let x2 = &x_rc;
                let dw = chunked_accumulate(din * dout, chunks, |ci| {
                    let mut part = vec![T::ZERO; din * dout];
                    for row in ci * ROW_CHUNK..((ci + 1) * ROW_CHUNK).min(rows) {
                        let grow = &g[row * dout..row * dout + dout];
                        for kk in 0..din {
                            let xv = x2[row * din + kk];
                            let prow = &mut part[kk * dout..kk * dout + dout];
                            for (p, gv) in prow.iter_mut().zip(grow) {
                                *p += xv * *gv;
                            }
                        }
                    }
                    part
                });
                let dbias = chunked_accumulate(dout, chunks, |ci| {
                    let mut part = vec![T::ZERO; dout];
                    for row in ci * ROW_CHUNK..((ci + 1) * ROW_CHUNK).min(rows) {
                        let grow = &g[row * dout..row * dout + dout];
                        for (p, gv) in part.iter_mut().zip(grow) {
                            *p += *gv;
                        }
                    }
                    part
                });
                vec![Some(dx), Some(dw), Some(dbias)]
            },
        ))
    }
}
