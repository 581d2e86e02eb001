//! Adaptive depth binning: per-image bin widths predicted from pooled pixel
//! queries, bin centers over the depth range, and probability-weighted
//! depth composition.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{xavier_uniform, Parameter, Tensor};

/// Positive width applied to raw width logits so every bin stays non-empty.
pub const WIDTH_EPS: f64 = 1e-3;

/// Normalized bin widths and the derived strictly increasing centers for
/// one image. Both stay attached to the graph so the loss reaches the
/// width predictor.
pub struct BinSpec<T: Scalar> {
    pub widths: Tensor<T>,
    pub centers: Tensor<T>,
    pub d_min: f64,
    pub d_max: f64,
}

impl<T: Scalar> BinSpec<T> {
    pub fn n_bins(&self) -> usize {
        self.widths.numel()
    }
}

/// Two-layer MLP mapping pooled queries to raw bin widths.
#[derive(Clone)]
pub struct BcpParams<T: Scalar> {
    pub w1: Parameter<T>,
    pub b1: Parameter<T>,
    pub w2: Parameter<T>,
    pub b2: Parameter<T>,
}

impl<T: Scalar> BcpParams<T> {
    pub fn new<R: Rng>(name: &str, c_in: usize, hidden: usize, n_bins: usize, rng: &mut R) -> Self {
        BcpParams {
            w1: Parameter {
                name: format!("{name}.fc1.weight"),
                tensor: xavier_uniform(&[c_in, hidden], c_in, hidden, rng),
            },
            b1: Parameter {
                name: format!("{name}.fc1.bias"),
                tensor: Tensor::leaf(&[hidden], vec![T::ZERO; hidden]).unwrap(),
            },
            w2: Parameter {
                name: format!("{name}.fc2.weight"),
                tensor: xavier_uniform(&[hidden, n_bins], hidden, n_bins, rng),
            },
            b2: Parameter {
                name: format!("{name}.fc2.bias"),
                tensor: Tensor::leaf(&[n_bins], vec![T::ZERO; n_bins]).unwrap(),
            },
        }
    }

    pub fn n_bins(&self) -> usize {
        self.w2.tensor.shape()[1]
    }

    /// Raw width logits from pooled queries: `MLP(GAP(q))`.
    pub fn raw_widths(&self, q_init: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = q_init.global_avg_pool()?;
        let hidden = pooled.linear(&self.w1.tensor, &self.b1.tensor)?.gelu();
        hidden.linear(&self.w2.tensor, &self.b2.tensor)
    }

    pub fn visit(&self, f: &mut impl FnMut(&Parameter<T>)) {
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut Parameter<T>)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

/// Bin widths from pixel queries: raw logits pass through
/// `(relu(raw) + eps) / sum(relu(raw) + eps)`, then centers follow from
/// the running-prefix formula.
pub fn predict_bin_widths<T: Scalar>(
    q_init: &Tensor<T>,
    params: &BcpParams<T>,
    d_min: f64,
    d_max: f64,
) -> Result<BinSpec<T>> {
    let n_bins = params.n_bins();
    if n_bins < 2 {
        return Err(Error::contract("predict_bin_widths", "n_bins must be at least 2"));
    }
    if !(d_min < d_max) || d_min <= 0.0 {
        return Err(Error::contract(
            "predict_bin_widths",
            format!("invalid depth range [{d_min}, {d_max}]"),
        ));
    }
    let raw = params.raw_widths(q_init)?;
    let positive = raw.relu().add_scalar(T::from_f64(WIDTH_EPS));
    let widths = positive.mul_bcast(&positive.sum_all().recip())?;
    let centers = bin_centers(&widths, d_min, d_max)?;
    Ok(BinSpec { widths, centers, d_min, d_max })
}

/// Centers `c_i = d_min + (d_max - d_min) * (b_i / 2 + sum_{j<i} b_j)`,
/// computed with a running prefix sum.
pub fn bin_centers<T: Scalar>(widths: &Tensor<T>, d_min: f64, d_max: f64) -> Result<Tensor<T>> {
    if widths.rank() != 1 || widths.numel() == 0 {
        return Err(Error::dimension(
            "bin_centers",
            format!("widths must be a non-empty vector, got {:?}", widths.shape()),
        ));
    }
    let b = widths.data();
    let sum: f64 = b.iter().map(|v| v.to_f64()).sum();
    // normalization is exact only up to element-type rounding, so the
    // tolerance scales with epsilon and the bin count (floored at 1e-6)
    let tol = (8 * b.len()) as f64 * T::EPSILON.to_f64();
    if (sum - 1.0).abs() > tol.max(1e-6) || b.iter().any(|v| !(*v > T::ZERO)) {
        return Err(Error::contract(
            "bin_centers",
            format!("widths must be positive and sum to 1 (sum = {sum})"),
        ));
    }
    let n = b.len();
    let lo = T::from_f64(d_min);
    let span = T::from_f64(d_max - d_min);
    let half = T::from_f64(0.5);
    let mut out = Vec::with_capacity(n);
    let mut prefix = T::ZERO;
    for &w in b.iter() {
        out.push(lo + span * (half * w + prefix));
        prefix += w;
    }
    Ok(Tensor::from_op(
        vec![n],
        out,
        vec![widths.clone()],
        move |g| {
            // d c_i / d b_j = span * (1/2 if i == j, 1 if j < i, 0 otherwise):
            // a reverse suffix sum over the incoming gradient
            let mut db = vec![T::ZERO; n];
            let mut suffix = T::ZERO;
            for j in (0..n).rev() {
                db[j] = span * (half * g[j] + suffix);
                suffix += g[j];
            }
            vec![Some(db)]
        },
    ))
}

/// Per-pixel inner product of bin probabilities and centers:
/// `[h, w, n] x [n] -> [h, w]` meters.
pub fn compose_depth<T: Scalar>(p: &Tensor<T>, centers: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = p.shape();
    if shape.len() != 3 || centers.rank() != 1 || shape[2] != centers.numel() {
        return Err(Error::dimension(
            "compose_depth",
            format!("probabilities {:?} vs centers {:?}", shape, centers.shape()),
        ));
    }
    let (h, w, n) = (shape[0], shape[1], shape[2]);
    let flat = p.reshape(&[h * w, n])?;
    let col = centers.reshape(&[n, 1])?;
    flat.matmul(&col)?.reshape(&[h, w])
}
