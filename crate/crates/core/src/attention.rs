//! Window partitioning and multi-head windowed cross-attention with
//! relative position bias.
//!
//! Feature maps are tiled into non-overlapping `W x W` windows (zero-padded
//! on the bottom/right when the extents do not divide). Attention runs per
//! window and per head; padded key positions are masked out before the
//! softmax so they carry exactly zero weight, and padded query rows are
//! dropped when the windows are placed back into image layout.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{normal_init, Parameter, Tensor};

/// Window tiling of an `(h, w)` feature map, including the padding needed
/// to reach multiples of the window size.
#[derive(Debug, Clone)]
pub struct WindowGrid {
    pub window: usize,
    pub orig_h: usize,
    pub orig_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    /// true for real pixels, false for padding; `padded_h * padded_w` long.
    pub mask: Vec<bool>,
}

impl WindowGrid {
    pub fn new(h: usize, w: usize, window: usize) -> Result<Self> {
        if window == 0 || h == 0 || w == 0 {
            return Err(Error::contract(
                "window_grid",
                format!("degenerate grid ({h}, {w}) with window {window}"),
            ));
        }
        let padded_h = h.div_ceil(window) * window;
        let padded_w = w.div_ceil(window) * window;
        let mut mask = vec![false; padded_h * padded_w];
        for y in 0..h {
            for x in 0..w {
                mask[y * padded_w + x] = true;
            }
        }
        Ok(WindowGrid {
            window,
            orig_h: h,
            orig_w: w,
            padded_h,
            padded_w,
            pad_bottom: padded_h - h,
            pad_right: padded_w - w,
            mask,
        })
    }

    pub fn windows_y(&self) -> usize {
        self.padded_h / self.window
    }

    pub fn windows_x(&self) -> usize {
        self.padded_w / self.window
    }

    pub fn n_windows(&self) -> usize {
        self.windows_y() * self.windows_x()
    }

    /// Flat padded position of slot `s` in window `wi`.
    fn padded_pos(&self, wi: usize, s: usize) -> (usize, usize) {
        let wy = wi / self.windows_x();
        let wx = wi % self.windows_x();
        (wy * self.window + s / self.window, wx * self.window + s % self.window)
    }

    pub fn is_real(&self, wi: usize, s: usize) -> bool {
        let (y, x) = self.padded_pos(wi, s);
        self.mask[y * self.padded_w + x]
    }
}

/// Head count and per-head width for one attention stage.
#[derive(Debug, Clone, Copy)]
pub struct AttentionHeads {
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionHeads {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::contract(
                "attention_heads",
                format!("dim {dim} not divisible by heads {heads}"),
            ));
        }
        Ok(AttentionHeads { heads, head_dim: dim / heads })
    }

    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Learnable relative-position bias: a `(2W-1)^2 x heads` table addressed
/// by a fixed index map over in-window (query, key) offset pairs.
#[derive(Clone)]
pub struct RelativePositionBias<T: Scalar> {
    pub table: Parameter<T>,
    pub window: usize,
    pub heads: usize,
    /// `index[i * W^2 + j]` is the table row for query slot i, key slot j;
    /// it depends only on the coordinate difference of the two slots.
    index: Rc<Vec<usize>>,
}

impl<T: Scalar> RelativePositionBias<T> {
    pub fn new<R: Rng>(name: impl Into<String>, window: usize, heads: usize, rng: &mut R) -> Self {
        let side = 2 * window - 1;
        let table = normal_init(&[side * side, heads], 0.02, rng);
        RelativePositionBias {
            table: Parameter { name: name.into(), tensor: table },
            window,
            heads,
            index: Rc::new(Self::build_index(window)),
        }
    }

    fn build_index(window: usize) -> Vec<usize> {
        let n = window * window;
        let side = 2 * window - 1;
        let mut index = Vec::with_capacity(n * n);
        for i in 0..n {
            let (yi, xi) = (i / window, i % window);
            for j in 0..n {
                let (yj, xj) = (j / window, j % window);
                let dy = yi + window - 1 - yj;
                let dx = xi + window - 1 - xj;
                index.push(dy * side + dx);
            }
        }
        index
    }

    /// Materialize the bias as `[heads, W^2, W^2]`, differentiable back
    /// into the table.
    pub fn realize(&self) -> Tensor<T> {
        let n = self.window * self.window;
        let heads = self.heads;
        let index = &self.index;
        let mut map = Vec::with_capacity(heads * n * n);
        for h in 0..heads {
            for ij in 0..n * n {
                map.push(index[ij] * heads + h);
            }
        }
        self.table.tensor.index_map(vec![heads, n, n], Rc::new(map), 1)
    }
}

/// `[H, W, C] -> [nWindows, W^2, C]`: zero-pad to the grid, then emit
/// windows in row-major order, row-major within each window.
pub fn window_partition<T: Scalar>(x: &Tensor<T>, grid: &WindowGrid) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != grid.orig_h || shape[1] != grid.orig_w {
        return Err(Error::dimension(
            "window_partition",
            format!("input {:?} does not match grid ({}, {})", shape, grid.orig_h, grid.orig_w),
        ));
    }
    let c = shape[2];
    let n = grid.window * grid.window;
    let n_windows = grid.n_windows();
    let mut map = Vec::with_capacity(n_windows * n);
    for wi in 0..n_windows {
        for s in 0..n {
            let (y, x_pos) = grid.padded_pos(wi, s);
            if y < grid.orig_h && x_pos < grid.orig_w {
                map.push(y * grid.orig_w + x_pos);
            } else {
                map.push(usize::MAX);
            }
        }
    }
    Ok(x.index_map(vec![n_windows, n, c], Rc::new(map), c))
}

/// Inverse of [`window_partition`]; padding rows/columns are dropped.
pub fn window_reverse<T: Scalar>(wins: &Tensor<T>, grid: &WindowGrid) -> Result<Tensor<T>> {
    let shape = wins.shape();
    let n = grid.window * grid.window;
    if shape.len() != 3 || shape[0] != grid.n_windows() || shape[1] != n {
        return Err(Error::dimension(
            "window_reverse",
            format!(
                "windows {:?} inconsistent with grid ({} windows of {})",
                shape,
                grid.n_windows(),
                n
            ),
        ));
    }
    let c = shape[2];
    let win = grid.window;
    let mut map = Vec::with_capacity(grid.orig_h * grid.orig_w);
    for y in 0..grid.orig_h {
        for x in 0..grid.orig_w {
            let wi = (y / win) * grid.windows_x() + x / win;
            let s = (y % win) * win + x % win;
            map.push(wi * n + s);
        }
    }
    Ok(wins.index_map(vec![grid.orig_h, grid.orig_w, c], Rc::new(map), c))
}

fn split_heads<T: Scalar>(x: &Tensor<T>, heads: AttentionHeads) -> Tensor<T> {
    // [nW, N, H*hd] -> [nW, H, N, hd]
    let (n_windows, n) = (x.shape()[0], x.shape()[1]);
    let (h_count, hd) = (heads.heads, heads.head_dim);
    let mut map = Vec::with_capacity(n_windows * h_count * n);
    for wi in 0..n_windows {
        for h in 0..h_count {
            for s in 0..n {
                map.push((wi * n + s) * h_count + h);
            }
        }
    }
    x.index_map(vec![n_windows, h_count, n, hd], Rc::new(map), hd)
}

fn merge_heads<T: Scalar>(x: &Tensor<T>, heads: AttentionHeads) -> Tensor<T> {
    // [nW, H, N, hd] -> [nW, N, H*hd]
    let (n_windows, n) = (x.shape()[0], x.shape()[2]);
    let (h_count, hd) = (heads.heads, heads.head_dim);
    let mut map = Vec::with_capacity(n_windows * n * h_count);
    for wi in 0..n_windows {
        for s in 0..n {
            for h in 0..h_count {
                map.push(((wi * h_count) + h) * n + s);
            }
        }
    }
    x.index_map(vec![n_windows, n, h_count * hd], Rc::new(map), hd)
}

/// Multi-head cross-attention within windows:
/// per window and head, `softmax(Q K^T / sqrt(head_dim) + B) V`, with
/// padded keys masked to -inf before the softmax and heads concatenated.
pub fn windowed_cross_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &RelativePositionBias<T>,
    heads: AttentionHeads,
    grid: &WindowGrid,
) -> Result<Tensor<T>> {
    for (name, t) in [("k", k), ("v", v)] {
        if t.shape() != q.shape() {
            return Err(Error::ShapeMismatch {
                op: "windowed_cross_attention",
                lhs: q.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        let _ = name;
    }
    let d = *q.shape().last().ok_or_else(|| {
        Error::dimension("windowed_cross_attention", "query must be [H, W, D]")
    })?;
    if d != heads.dim() {
        return Err(Error::contract(
            "windowed_cross_attention",
            format!("channel count {d} != heads {} x head_dim {}", heads.heads, heads.head_dim),
        ));
    }
    if bias.window != grid.window || bias.heads != heads.heads {
        return Err(Error::contract(
            "windowed_cross_attention",
            "bias table does not match window size or head count",
        ));
    }

    let n = grid.window * grid.window;
    let n_windows = grid.n_windows();

    let qh = split_heads(&window_partition(q, grid)?, heads);
    let kh = split_heads(&window_partition(k, grid)?, heads);
    let vh = split_heads(&window_partition(v, grid)?, heads);

    let scale = T::from_f64(1.0 / (heads.head_dim as f64).sqrt());
    let mut scores = qh.matmul_nt(&kh)?.scale(scale);
    scores = scores.add_bcast(&bias.realize())?;

    if grid.pad_bottom > 0 || grid.pad_right > 0 {
        // additive key mask, constant over heads and query rows
        let mut mask_data = vec![T::ZERO; n_windows * heads.heads * n * n];
        for wi in 0..n_windows {
            for j in 0..n {
                if !grid.is_real(wi, j) {
                    for h in 0..heads.heads {
                        for i in 0..n {
                            mask_data[((wi * heads.heads + h) * n + i) * n + j] = T::MASK_NEG;
                        }
                    }
                }
            }
        }
        let mask = Tensor::constant(&[n_windows, heads.heads, n, n], mask_data)?;
        scores = scores.add(&mask)?;
    }

    let attn = scores.softmax(3)?;
    let out = attn.matmul(&vh)?;
    window_reverse(&merge_heads(&out, heads), grid)
}
