//! Spatial kernels over `[H, W, C]` feature maps: convolution, pooling,
//! bilinear resampling, pixel shuffle, and index-map data movement.

use std::rc::Rc;

use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const ROW_CHUNK: usize = 16;
const PAR_FLOPS: usize = 1 << 15;

impl<T: Scalar> Tensor<T> {
    /// 3x3 cross-correlation with zero padding 1. `stride` 1 preserves the
    /// spatial extents; stride 2 halves them (rounding up).
    pub fn conv2d(&self, kernel: &Tensor<T>, bias: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
        let [h, w, cin] = spatial_dims("conv2d", self.shape())?;
        if kernel.rank() != 4 || kernel.shape()[0] != 3 || kernel.shape()[1] != 3 {
            return Err(Error::dimension(
                "conv2d",
                format!("kernel must be [3,3,cin,cout], got {:?}", kernel.shape()),
            ));
        }
        if kernel.shape()[2] != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let cout = kernel.shape()[3];
        if bias.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: kernel.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        if stride == 0 || stride > 2 {
            return Err(Error::contract("conv2d", format!("unsupported stride {stride}")));
        }
        let oh = (h - 1) / stride + 1;
        let ow = (w - 1) / stride + 1;

        let x = self.data();
        let k = kernel.data();
        let b = bias.data();
        let mut out = vec![T::ZERO; oh * ow * cout];
        let fill_row = |oy: usize, row: &mut [T]| {
            for ox in 0..ow {
                let opix = &mut row[ox * cout..(ox + 1) * cout];
                opix.copy_from_slice(b);
                for dy in 0..3 {
                    let iy = (oy * stride + dy) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let ix = (ox * stride + dx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xpix = &x[(iy as usize * w + ix as usize) * cin..][..cin];
                        let kbase = (dy * 3 + dx) * cin * cout;
                        for (ci, xv) in xpix.iter().enumerate() {
                            let krow = &k[kbase + ci * cout..][..cout];
                            for (o, kv) in opix.iter_mut().zip(krow) {
                                *o += *xv * *kv;
                            }
                        }
                    }
                }
            }
        };
        if oh * ow * cin * cout * 9 >= PAR_FLOPS {
            out.par_chunks_mut(ow * cout).enumerate().for_each(|(oy, row)| fill_row(oy, row));
        } else {
            for (oy, row) in out.chunks_mut(ow * cout).enumerate() {
                fill_row(oy, row);
            }
        }

        let x_rc = self.data_arc();
        let k_rc = kernel.data_arc();
        Ok(Tensor::from_op(
            vec![oh, ow, cout],
            out,
            vec![self.clone(), kernel.clone(), bias.clone()],
            move |g| {
                // dx by gathering from the output positions each pixel fed
                let mut dx = vec![T::ZERO; h * w * cin];
                let k2 = &k_rc;
                let dx_row = |iy: usize, row: &mut [T]| {
                    for ix in 0..w {
                        let dpix = &mut row[ix * cin..(ix + 1) * cin];
                        for dy in 0..3 {
                            let oy_num = iy as isize + 1 - dy as isize;
                            if oy_num < 0 || oy_num % stride as isize != 0 {
                                continue;
                            }
                            let oy = (oy_num / stride as isize) as usize;
                            if oy >= oh {
                                continue;
                            }
                            for dx_k in 0..3 {
                                let ox_num = ix as isize + 1 - dx_k as isize;
                                if ox_num < 0 || ox_num % stride as isize != 0 {
                                    continue;
                                }
                                let ox = (ox_num / stride as isize) as usize;
                                if ox >= ow {
                                    continue;
                                }
                                let gpix = &g[(oy * ow + ox) * cout..][..cout];
                                let kbase = (dy * 3 + dx_k) * cin * cout;
                                for (ci, d) in dpix.iter_mut().enumerate() {
                                    let krow = &k2[kbase + ci * cout..][..cout];
                                    let mut acc = T::ZERO;
                                    for (gv, kv) in gpix.iter().zip(krow) {
                                        acc += *gv * *kv;
                                    }
                                    *d += acc;
                                }
                            }
                        }
                    }
                };
                if oh * ow * cin * cout * 9 >= PAR_FLOPS {
                    dx.par_chunks_mut(w * cin).enumerate().for_each(|(iy, row)| dx_row(iy, row));
                } else {
                    for (iy, row) in dx.chunks_mut(w * cin).enumerate() {
                        dx_row(iy, row);
                    }
                }

                // dk and dbias reduce over pixels: fixed output-row chunks
                let chunks = oh.div_ceil(ROW_CHUNK).max(1);
                let x2 = &x_rc;
                let partials: Vec<(Vec<T>, Vec<T>)> = (0..chunks)
                    .into_par_iter()
                    .map(|ci_chunk| {
                        let mut dk = vec![T::ZERO; 9 * cin * cout];
                        let mut db = vec![T::ZERO; cout];
                        for oy in ci_chunk * ROW_CHUNK..((ci_chunk + 1) * ROW_CHUNK).min(oh) {
                            for ox in 0..ow {
                                let gpix = &g[(oy * ow + ox) * cout..][..cout];
                                for (d, gv) in db.iter_mut().zip(gpix) {
                                    *d += *gv;
                                }
                                for dy in 0..3 {
                                    let iy = (oy * stride + dy) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for dx_k in 0..3 {
                                        let ix = (ox * stride + dx_k) as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xpix =
                                            &x2[(iy as usize * w + ix as usize) * cin..][..cin];
                                        let kbase = (dy * 3 + dx_k) * cin * cout;
                                        for (ci, xv) in xpix.iter().enumerate() {
                                            let drow = &mut dk[kbase + ci * cout..][..cout];
                                            for (d, gv) in drow.iter_mut().zip(gpix) {
                                                *d += *xv * *gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        (dk, db)
                    })
                    .collect();
                let mut dk = vec![T::ZERO; 9 * cin * cout];
                let mut db = vec![T::ZERO; cout];
                for (pk, pb) in partials {
                    for (a, p) in dk.iter_mut().zip(pk) {
                        *a += p;
                    }
                    for (a, p) in db.iter_mut().zip(pb) {
                        *a += p;
                    }
                }
                vec![Some(dx), Some(dk), Some(db)]
            },
        ))
    }

    /// Spatial mean per channel: `[H, W, C] -> [C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let [h, w, c] = spatial_dims("global_avg_pool", self.shape())?;
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let x = self.data();
        let mut out = vec![T::ZERO; c];
        for pix in x.chunks(c) {
            for (o, v) in out.iter_mut().zip(pix) {
                *o += *v;
            }
        }
        for o in out.iter_mut() {
            *o = *o * inv;
        }
        Ok(Tensor::from_op(vec![c], out, vec![self.clone()], move |g| {
            let mut dx = Vec::with_capacity(h * w * c);
            for _ in 0..h * w {
                dx.extend(g.iter().map(|v| *v * inv));
            }
            vec![Some(dx)]
        }))
    }

    /// Mean-pool onto an `(h, w)` grid with half-open bins at
    /// `floor(i*H/h) .. floor((i+1)*H/h)`.
    pub fn adaptive_avg_pool(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let [h, w, c] = spatial_dims("adaptive_avg_pool", self.shape())?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::dimension(
                "adaptive_avg_pool",
                format!("target ({out_h}, {out_w}) invalid for input ({h}, {w})"),
            ));
        }
        let ybound = |i: usize| i * h / out_h;
        let xbound = |j: usize| j * w / out_w;
        let x = self.data();
        let mut out = vec![T::ZERO; out_h * out_w * c];
        for i in 0..out_h {
            for j in 0..out_w {
                let (y0, y1) = (ybound(i), ybound(i + 1));
                let (x0, x1) = (xbound(j), xbound(j + 1));
                let inv = T::from_f64(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
                let opix = &mut out[(i * out_w + j) * c..][..c];
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let pix = &x[(y * w + xx) * c..][..c];
                        for (o, v) in opix.iter_mut().zip(pix) {
                            *o += *v;
                        }
                    }
                }
                for o in opix.iter_mut() {
                    *o = *o * inv;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![out_h, out_w, c],
            out,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![T::ZERO; h * w * c];
                for i in 0..out_h {
                    for j in 0..out_w {
                        let (y0, y1) = (i * h / out_h, (i + 1) * h / out_h);
                        let (x0, x1) = (j * w / out_w, (j + 1) * w / out_w);
                        let inv = T::from_f64(1.0 / ((y1 - y0) * (x1 - x0)) as f64);
                        let gpix = &g[(i * out_w + j) * c..][..c];
                        for y in y0..y1 {
                            for xx in x0..x1 {
                                let dpix = &mut dx[(y * w + xx) * c..][..c];
                                for (d, gv) in dpix.iter_mut().zip(gpix) {
                                    *d += *gv * inv;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Bilinear resampling to `(out_h, out_w)`, align-corners = false
    /// (sample centers at `(i + 0.5) * in/out - 0.5`, edge-clamped).
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let [h, w, c] = spatial_dims("bilinear_resize", self.shape())?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dimension("bilinear_resize", "target extents must be positive"));
        }
        let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|i| {
                    let src = (i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
                    let i0 = src.floor();
                    let frac = src - i0;
                    let a = (i0 as isize).clamp(0, n_in as isize - 1) as usize;
                    let b = (i0 as isize + 1).clamp(0, n_in as isize - 1) as usize;
                    (a, b, frac)
                })
                .collect()
        };
        let ytaps = taps(h, out_h);
        let xtaps = taps(w, out_w);

        let x = self.data();
        let mut out = vec![T::ZERO; out_h * out_w * c];
        for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
                let w01 = T::from_f64((1.0 - fy) * fx);
                let w10 = T::from_f64(fy * (1.0 - fx));
                let w11 = T::from_f64(fy * fx);
                let opix = &mut out[(oy * out_w + ox) * c..][..c];
                let p00 = &x[(y0 * w + x0) * c..][..c];
                let p01 = &x[(y0 * w + x1) * c..][..c];
                let p10 = &x[(y1 * w + x0) * c..][..c];
                let p11 = &x[(y1 * w + x1) * c..][..c];
                for k in 0..c {
                    opix[k] = w00 * p00[k] + w01 * p01[k] + w10 * p10[k] + w11 * p11[k];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![out_h, out_w, c],
            out,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![T::ZERO; h * w * c];
                for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                        let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
                        let w01 = T::from_f64((1.0 - fy) * fx);
                        let w10 = T::from_f64(fy * (1.0 - fx));
                        let w11 = T::from_f64(fy * fx);
                        let gpix = &g[(oy * out_w + ox) * c..][..c];
                        for k in 0..c {
                            let gv = gpix[k];
                            dx[(y0 * w + x0) * c + k] += gv * w00;
                            dx[(y0 * w + x1) * c + k] += gv * w01;
                            dx[(y1 * w + x0) * c + k] += gv * w10;
                            dx[(y1 * w + x1) * c + k] += gv * w11;
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Integer-factor bilinear upsampling.
    pub fn bilinear_upsample(&self, factor: usize) -> Result<Tensor<T>> {
        if factor == 0 {
            return Err(Error::contract("bilinear_upsample", "factor must be >= 1"));
        }
        let [h, w, _] = spatial_dims("bilinear_upsample", self.shape())?;
        self.bilinear_resize(h * factor, w * factor)
    }

    /// `[H, W, C] -> [rH, rW, C/r^2]` with
    /// `out(y*r+dy, x*r+dx, k) = in(y, x, k*r^2 + dy*r + dx)`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        let [h, w, c] = spatial_dims("pixel_shuffle", self.shape())?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::dimension(
                "pixel_shuffle",
                format!("channels {c} not divisible by {r}^2"),
            ));
        }
        let co = c / (r * r);
        let (oh, ow) = (h * r, w * r);
        let x = self.data();
        let mut out = vec![T::ZERO; oh * ow * co];
        for y in 0..h {
            for xx in 0..w {
                let pix = &x[(y * w + xx) * c..][..c];
                for dy in 0..r {
                    for dx in 0..r {
                        let obase = ((y * r + dy) * ow + (xx * r + dx)) * co;
                        for k in 0..co {
                            out[obase + k] = pix[k * r * r + dy * r + dx];
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![oh, ow, co],
            out,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![T::ZERO; h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        let dpix = &mut dx[(y * w + xx) * c..][..c];
                        for dy in 0..r {
                            for dx_p in 0..r {
                                let gbase = ((y * r + dy) * ow + (xx * r + dx_p)) * co;
                                for k in 0..co {
                                    dpix[k * r * r + dy * r + dx_p] = g[gbase + k];
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Exact inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        let [h, w, c] = spatial_dims("pixel_unshuffle", self.shape())?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::dimension(
                "pixel_unshuffle",
                format!("extents ({h}, {w}) not divisible by {r}"),
            ));
        }
        let (oh, ow, co) = (h / r, w / r, c * r * r);
        let x = self.data();
        let mut out = vec![T::ZERO; oh * ow * co];
        for y in 0..oh {
            for xx in 0..ow {
                let opix = &mut out[(y * ow + xx) * co..][..co];
                for dy in 0..r {
                    for dx in 0..r {
                        let ibase = ((y * r + dy) * w + (xx * r + dx)) * c;
                        for k in 0..c {
                            opix[k * r * r + dy * r + dx] = x[ibase + k];
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![oh, ow, co],
            out,
            vec![self.clone()],
            move |g| {
                let mut dx = vec![T::ZERO; h * w * c];
                for y in 0..oh {
                    for xx in 0..ow {
                        let gpix = &g[(y * ow + xx) * co..][..co];
                        for dy in 0..r {
                            for dx_p in 0..r {
                                let ibase = ((y * r + dy) * w + (xx * r + dx_p)) * c;
                                for k in 0..c {
                                    dx[ibase + k] = gpix[k * r * r + dy * r + dx_p];
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Data movement by block index map: output block `i` copies input block
    /// `map[i]`, or zeros when `map[i] == usize::MAX`. The gradient
    /// scatter-adds back through the map, so positions dropped by the map
    /// receive no gradient and duplicated positions accumulate.
    pub(crate) fn index_map(
        &self,
        out_shape: Vec<usize>,
        map: Rc<Vec<usize>>,
        block: usize,
    ) -> Tensor<T> {
        debug_assert_eq!(super::numel(&out_shape), map.len() * block);
        debug_assert_eq!(self.numel() % block, 0);
        let x = self.data();
        let in_len = x.len();
        let mut out = vec![T::ZERO; map.len() * block];
        for (i, &src) in map.iter().enumerate() {
            if src != usize::MAX {
                out[i * block..(i + 1) * block].copy_from_slice(&x[src * block..(src + 1) * block]);
            }
        }
        let map_bw = Rc::clone(&map);
        Tensor::from_op(out_shape, out, vec![self.clone()], move |g| {
            let mut dx = vec![T::ZERO; in_len];
            for (i, &src) in map_bw.iter().enumerate() {
                if src != usize::MAX {
                    let dpix = &mut dx[src * block..(src + 1) * block];
                    let gpix = &g[i * block..(i + 1) * block];
                    for (d, gv) in dpix.iter_mut().zip(gpix) {
                        *d += *gv;
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}

fn spatial_dims(op: &'static str, shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [h, w, c] => Ok([*h, *w, *c]),
        other => Err(Error::dimension(op, format!("expected [H, W, C], got {other:?}"))),
    }
}
