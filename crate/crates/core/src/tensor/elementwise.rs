//! Element-wise kernels, reductions, normalizations and concatenation.

use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

// tanh-form gaussian error activation: one smooth closed form everywhere,
// which keeps finite-difference checks clean.
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu_val<T: Scalar>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let u = k * (x + c * x * x * x);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + u.tanh())
}

fn gelu_deriv<T: Scalar>(x: T) -> T {
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * k * (T::ONE + three * c * x * x)
}

fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a + *b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a - *b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -*v).collect())],
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        check_same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| *a * *b).collect();
        let a = self.data_arc();
        let b = other.data_arc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            move |g| {
                vec![
                    Some(g.iter().zip(b.iter()).map(|(g, b)| *g * *b).collect()),
                    Some(g.iter().zip(a.iter()).map(|(g, a)| *g * *a).collect()),
                ]
            },
        ))
    }

    /// `self + rhs` where `rhs.shape()` is a suffix of `self.shape()` and is
    /// broadcast over the leading axes (a scalar rhs broadcasts everywhere).
    pub fn add_bcast(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.bcast_binary("add_bcast", rhs, |a, b| a + b, BcastKind::Add)
    }

    /// Suffix-broadcast multiply, same shape rules as [`Tensor::add_bcast`].
    pub fn mul_bcast(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.bcast_binary("mul_bcast", rhs, |a, b| a * b, BcastKind::Mul)
    }

    fn bcast_binary(
        &self,
        op: &'static str,
        rhs: &Tensor<T>,
        f: fn(T, T) -> T,
        kind: BcastKind,
    ) -> Result<Tensor<T>> {
        let rs = rhs.shape();
        let ls = self.shape();
        if rs.len() > ls.len() || &ls[ls.len() - rs.len()..] != rs {
            return Err(Error::ShapeMismatch { op, lhs: ls.to_vec(), rhs: rs.to_vec() });
        }
        let nb = rhs.numel().max(1);
        let mut data = Vec::with_capacity(self.numel());
        for chunk in self.data().chunks(nb) {
            for (a, b) in chunk.iter().zip(rhs.data()) {
                data.push(f(*a, *b));
            }
        }
        let a = self.data_arc();
        let b = rhs.data_arc();
        Ok(Tensor::from_op(
            ls.to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            move |g| {
                let mut gb = vec![T::ZERO; nb];
                let ga: Vec<T> = match kind {
                    BcastKind::Add => {
                        for chunk in g.chunks(nb) {
                            for (acc, gv) in gb.iter_mut().zip(chunk) {
                                *acc += *gv;
                            }
                        }
                        g.to_vec()
                    }
                    BcastKind::Mul => {
                        let mut ga = Vec::with_capacity(g.len());
                        for (chunk_idx, chunk) in g.chunks(nb).enumerate() {
                            let base = chunk_idx * nb;
                            for (j, gv) in chunk.iter().enumerate() {
                                ga.push(*gv * b[j]);
                                gb[j] += *gv * a[base + j];
                            }
                        }
                        ga
                    }
                };
                vec![Some(ga), Some(gb)]
            },
        ))
    }

    pub fn neg(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| -*v).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |g| {
            vec![Some(g.iter().map(|v| -*v).collect())]
        })
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|v| *v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().map(|v| *v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let data = self.data().iter().map(|v| *v + c).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |g| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| v.max(T::ZERO)).collect();
        let x = self.data_arc();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(
                g.iter()
                    .zip(x.iter())
                    .map(|(g, x)| if *x > T::ZERO { *g } else { T::ZERO })
                    .collect(),
            )]
        })
    }

    pub fn gelu(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| gelu_val(*v)).collect();
        let x = self.data_arc();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(x.iter()).map(|(g, x)| *g * gelu_deriv(*x)).collect())]
        })
    }

    /// Natural log; caller guarantees strictly positive input.
    pub fn ln(&self) -> Tensor<T> {
        let data = self.data().iter().map(|v| v.ln()).collect();
        let x = self.data_arc();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(g.iter().zip(x.iter()).map(|(g, x)| *g / *x).collect())]
        })
    }

    pub fn recip(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|v| T::ONE / *v).collect();
        let x = self.data_arc();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(
                g.iter()
                    .zip(x.iter())
                    .map(|(g, x)| -*g / (*x * *x))
                    .collect(),
            )]
        })
    }

    /// sqrt(max(x, 0)); the gradient is defined as 0 on the clamped branch,
    /// which covers the exact-fit loss case where rounding makes the
    /// radicand slightly negative.
    pub fn sqrt_clamped(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|v| v.max(T::ZERO).sqrt()).collect();
        let x = self.data_arc();
        let half = T::from_f64(0.5);
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |g| {
            vec![Some(
                g.iter()
                    .zip(x.iter())
                    .map(|(g, x)| {
                        if *x > T::ZERO {
                            *g * half / x.sqrt()
                        } else {
                            T::ZERO
                        }
                    })
                    .collect(),
            )]
        })
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::ZERO;
        for v in self.data() {
            acc += *v;
        }
        let n = self.numel();
        let shape = self.shape().to_vec();
        Tensor::from_op(vec![], vec![acc], vec![self.clone()], move |g| {
            let _ = &shape;
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        self.sum_all().scale(T::from_f64(1.0 / n as f64))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank().max(1) {
            return Err(Error::dimension(
                "softmax",
                format!("axis {axis} out of range for shape {:?}", self.shape()),
            ));
        }
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("softmax", "input contains non-finite values"));
        }
        let shape = self.shape();
        let n = if shape.is_empty() { 1 } else { shape[axis] };
        let inner: usize = shape.get(axis + 1..).map_or(1, numel);
        let outer: usize = shape.get(..axis).map_or(1, numel);

        let x = self.data();
        let mut out = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = x[base];
                for j in 1..n {
                    m = m.max(x[base + j * inner]);
                }
                let mut sum = T::ZERO;
                for j in 0..n {
                    let e = (x[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }

        let y = std::sync::Arc::new(out.clone());
        Ok(Tensor::from_op(
            shape.to_vec(),
            out,
            vec![self.clone()],
            move |g| {
                // dx_j = y_j * (g_j - sum_k g_k y_k) per slice
                let mut dx = vec![T::ZERO; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::ZERO;
                        for j in 0..n {
                            let idx = base + j * inner;
                            dot += g[idx] * y[idx];
                        }
                        for j in 0..n {
                            let idx = base + j * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            },
        ))
    }

    /// Standardize over the last axis, then scale/shift per channel.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm", "eps must be positive"));
        }
        let c = *self.shape().last().ok_or_else(|| {
            Error::dimension("layer_norm", "input must have at least one axis")
        })?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let eps_t = T::from_f64(eps);
        let inv_c = T::from_f64(1.0 / c as f64);
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let positions = self.numel() / c;

        let mut out = vec![T::ZERO; x.len()];
        let mut xhat = vec![T::ZERO; x.len()];
        let mut inv_sigma = vec![T::ZERO; positions];
        for p in 0..positions {
            let row = &x[p * c..(p + 1) * c];
            let mut mu = T::ZERO;
            for v in row {
                mu += *v;
            }
            mu = mu * inv_c;
            let mut var = T::ZERO;
            for v in row {
                let d = *v - mu;
                var += d * d;
            }
            var = var * inv_c;
            let is = T::ONE / (var + eps_t).sqrt();
            inv_sigma[p] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[p * c + j] = h;
                out[p * c + j] = gm[j] * h + bt[j];
            }
        }

        let xhat = std::sync::Arc::new(xhat);
        let inv_sigma = std::sync::Arc::new(inv_sigma);
        let gm_rc = gamma.data_arc();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |g| {
                let mut dx = vec![T::ZERO; g.len()];
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for p in 0..positions {
                    let base = p * c;
                    let is = inv_sigma[p];
                    // dxhat = g * gamma; dx via the standard layer-norm pullback
                    let mut sum_dxhat = T::ZERO;
                    let mut sum_dxhat_h = T::ZERO;
                    for j in 0..c {
                        let dh = g[base + j] * gm_rc[j];
                        sum_dxhat += dh;
                        sum_dxhat_h += dh * xhat[base + j];
                        dgamma[j] += g[base + j] * xhat[base + j];
                        dbeta[j] += g[base + j];
                    }
                    for j in 0..c {
                        let dh = g[base + j] * gm_rc[j];
                        dx[base + j] =
                            is * (dh - inv_c * sum_dxhat - inv_c * xhat[base + j] * sum_dxhat_h);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            },
        ))
    }
}

#[derive(Clone, Copy)]
enum BcastKind {
    Add,
    Mul,
}

/// Concatenate along the last axis; all other extents must agree.
pub fn concat_last<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::dimension("concat", "no tensors to concatenate"));
    }
    let lead = &parts[0].shape()[..parts[0].rank() - 1];
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rank() == 0 || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        widths.push(*p.shape().last().unwrap());
    }
    let total: usize = widths.iter().sum();
    let positions = numel(lead);
    let mut out = Vec::with_capacity(positions * total);
    for pos in 0..positions {
        for (p, w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[pos * w..(pos + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let widths_bw = widths.clone();
    Ok(Tensor::from_op(
        shape,
        out,
        parts.to_vec(),
        move |g| {
            let mut grads: Vec<Vec<T>> = widths_bw.iter().map(|w| Vec::with_capacity(positions * w)).collect();
            for pos in 0..positions {
                let mut off = pos * total;
                for (k, w) in widths_bw.iter().enumerate() {
                    grads[k].extend_from_slice(&g[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_symmetry_and_analytic_ratio() {
        let x = Tensor::<f64>::constant(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(x.softmax(0).unwrap().data(), &[0.5, 0.5]);

        let x = Tensor::<f64>::constant(&[2], vec![0.0, 3.0f64.ln()]).unwrap();
        let y = x.softmax(0).unwrap();
        assert!(close(y.data()[0], 0.25, 1e-12));
        assert!(close(y.data()[1], 0.75, 1e-12));
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let x = Tensor::<f64>::constant(&[2], vec![1000.0, 1000.0]).unwrap();
        let y = x.softmax(0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::<f64>::constant(&[2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(x.softmax(0), Err(crate::error::Error::NumericInput { .. })));
    }

    #[test]
    fn softmax_shift_invariance_is_bitwise_tight() {
        let x = Tensor::<f64>::constant(&[4], vec![0.1, -2.0, 0.7, 3.3]).unwrap();
        let shifted = x.add_scalar(17.5);
        let a = x.softmax(0).unwrap();
        let b = shifted.softmax(0).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_edge_cases() {
        // constant channel vector -> zeros (variance 0, eps-guarded)
        let x = Tensor::<f64>::constant(&[3], vec![4.0, 4.0, 4.0]).unwrap();
        let gamma = Tensor::constant(&[3], vec![1.0; 3]).unwrap();
        let beta = Tensor::constant(&[3], vec![0.0; 3]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-9);
        }

        // already standardized input passes through as eps -> 0
        let x = Tensor::<f64>::constant(&[2], vec![-1.0, 1.0]).unwrap();
        let gamma = Tensor::constant(&[2], vec![1.0, 1.0]).unwrap();
        let beta = Tensor::constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-12).unwrap();
        assert!(close(y.data()[0], -1.0, 1e-6));
        assert!(close(y.data()[1], 1.0, 1e-6));

        // gamma 0, beta 5 -> shift only
        let gamma = Tensor::constant(&[2], vec![0.0, 0.0]).unwrap();
        let beta = Tensor::constant(&[2], vec![5.0, 5.0]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let a = Tensor::<f64>::leaf(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::leaf(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = concat_last(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let loss = y.mul(&y).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![6.0, 8.0, 10.0, 12.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient_over_leading_axes() {
        let a = Tensor::<f64>::leaf(&[2, 3], vec![1.0; 6]).unwrap();
        let b = Tensor::<f64>::leaf(&[3], vec![0.0, 1.0, 2.0]).unwrap();
        let y = a.add_bcast(&b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = y.sum_all();
        loss.backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn unary_grads_match_finite_differences() {
        for (name, f) in [
            ("gelu", (|x: &Tensor<f64>| Ok(x.gelu().sum_all())) as fn(&Tensor<f64>) -> crate::error::Result<Tensor<f64>>),
            ("ln", |x| Ok(x.add_scalar(3.0).ln().sum_all())),
            ("recip", |x| Ok(x.add_scalar(3.0).recip().sum_all())),
            ("sqrt", |x| Ok(x.add_scalar(3.0).sqrt_clamped().sum_all())),
            ("tanh-chain", |x| Ok(x.gelu().gelu().sum_all())),
        ] {
            let err =
                super::super::grad_check(f, &[0.3, -0.9, 1.7, 0.05], &[4], 1e-5).unwrap();
            assert!(err < 1e-7, "{name}: relative error {err}");
        }
    }
}
