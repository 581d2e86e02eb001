//! Scale-invariant log loss (training) and the standard depth metric suite
//! (evaluation).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Training-loss shape: `alpha * sqrt(mean g^2 - lambda * (mean g)^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.85, alpha: 10.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) || !(self.alpha > 0.0) {
            return Err(Error::contract(
                "loss_config",
                format!("need 0 < lambda <= 1 and alpha > 0, got {self:?}"),
            ));
        }
        Ok(())
    }
}

/// Scale-invariant log loss over masked pixels, differentiable w.r.t. the
/// prediction. The radicand is clamped at zero before the square root so
/// the exact-fit case cannot go NaN through rounding.
pub fn silog_loss<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    mask: &[bool],
    cfg: LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "silog_loss",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    if mask.len() != pred.numel() {
        return Err(Error::dimension(
            "silog_loss",
            format!("mask length {} vs {} pixels", mask.len(), pred.numel()),
        ));
    }
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::contract("silog_loss", "mask selects no pixels"));
    }
    for (i, m) in mask.iter().enumerate() {
        if *m && (!(pred.data()[i] > T::ZERO) || !(gt.data()[i] > T::ZERO)) {
            return Err(Error::numeric(
                "silog_loss",
                format!(
                    "non-positive depth under mask at pixel {i}: pred {}, gt {}",
                    pred.data()[i],
                    gt.data()[i]
                ),
            ));
        }
    }

    // unmasked pixels are replaced by 1 before the log, so they contribute
    // exactly zero to g and take no gradient
    let pred_safe = where_mask(pred, mask);
    let gt_safe = where_mask(gt, mask);
    let g = pred_safe.ln().sub(&gt_safe.ln())?;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mean_sq = g.mul(&g)?.sum_all().scale(inv_n);
    let mean = g.sum_all().scale(inv_n);
    let radicand = mean_sq.sub(&mean.mul(&mean)?.scale(T::from_f64(cfg.lambda)))?;
    Ok(radicand.sqrt_clamped().scale(T::from_f64(cfg.alpha)))
}

/// Pass-through on masked pixels, constant 1 elsewhere (gradient blocked).
fn where_mask<T: Scalar>(x: &Tensor<T>, mask: &[bool]) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(mask)
        .map(|(v, m)| if *m { *v } else { T::ONE })
        .collect();
    let mask_owned: Vec<bool> = mask.to_vec();
    Tensor::from_op(x.shape().to_vec(), data, vec![x.clone()], move |grad| {
        vec![Some(
            grad.iter()
                .zip(&mask_owned)
                .map(|(g, m)| if *m { *g } else { T::ZERO })
                .collect(),
        )]
    })
}

/// Crop rectangle in pixel coordinates, top-left inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl std::str::FromStr for CropRect {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("bad crop component {p:?}: {e}")))
            .collect::<std::result::Result<_, String>>()?;
        match parts[..] {
            [top, left, height, width] => Ok(CropRect { top, left, height, width }),
            _ => Err(format!("crop must be top,left,height,width, got {s:?}")),
        }
    }
}

/// Evaluation metric suite over one or more depth maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub log10: f64,
    pub silog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
}

impl MetricReport {
    /// Single-line key=value record.
    pub fn render_line(&self) -> String {
        format!(
            "abs_rel={:.6} sq_rel={:.6} rmse={:.6} log10={:.6} silog={:.6} delta1={:.6} delta2={:.6} delta3={:.6} n_valid={}",
            self.abs_rel, self.sq_rel, self.rmse, self.log10, self.silog,
            self.delta1, self.delta2, self.delta3, self.n_valid
        )
    }

    /// Structured multi-line document.
    pub fn render_doc(&self) -> String {
        format!(
            "abs_rel: {:.6}\nsq_rel:  {:.6}\nrmse:    {:.6}\nlog10:   {:.6}\nsilog:   {:.6}\ndelta1:  {:.6}\ndelta2:  {:.6}\ndelta3:  {:.6}\nn_valid: {}\n",
            self.abs_rel, self.sq_rel, self.rmse, self.log10, self.silog,
            self.delta1, self.delta2, self.delta3, self.n_valid
        )
    }
}

/// Running pixel-pooled sums, mergeable across images so aggregate reports
/// weight every pixel equally rather than every image.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricAccumulator {
    sum_abs_rel: f64,
    sum_sq_rel: f64,
    sum_sq_err: f64,
    sum_log10: f64,
    sum_g: f64,
    sum_g2: f64,
    n_delta1: usize,
    n_delta2: usize,
    n_delta3: usize,
    n: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, pred: f64, gt: f64) {
        let diff = pred - gt;
        self.sum_abs_rel += diff.abs() / gt;
        self.sum_sq_rel += diff * diff / gt;
        self.sum_sq_err += diff * diff;
        self.sum_log10 += (pred.log10() - gt.log10()).abs();
        let g = pred.ln() - gt.ln();
        self.sum_g += g;
        self.sum_g2 += g * g;
        let ratio = (pred / gt).max(gt / pred);
        if ratio < 1.25 {
            self.n_delta1 += 1;
        }
        if ratio < 1.25 * 1.25 {
            self.n_delta2 += 1;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            self.n_delta3 += 1;
        }
        self.n += 1;
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.sum_abs_rel += other.sum_abs_rel;
        self.sum_sq_rel += other.sum_sq_rel;
        self.sum_sq_err += other.sum_sq_err;
        self.sum_log10 += other.sum_log10;
        self.sum_g += other.sum_g;
        self.sum_g2 += other.sum_g2;
        self.n_delta1 += other.n_delta1;
        self.n_delta2 += other.n_delta2;
        self.n_delta3 += other.n_delta3;
        self.n += other.n;
    }

    pub fn n_valid(&self) -> usize {
        self.n
    }

    pub fn finalize(&self) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::contract("eval_metrics", "no valid pixels to aggregate"));
        }
        let n = self.n as f64;
        let mean_g = self.sum_g / n;
        Ok(MetricReport {
            abs_rel: self.sum_abs_rel / n,
            sq_rel: self.sum_sq_rel / n,
            rmse: (self.sum_sq_err / n).sqrt(),
            log10: self.sum_log10 / n,
            silog: 100.0 * (self.sum_g2 / n - mean_g * mean_g).max(0.0).sqrt(),
            delta1: self.n_delta1 as f64 / n,
            delta2: self.n_delta2 as f64 / n,
            delta3: self.n_delta3 as f64 / n,
            n_valid: self.n,
        })
    }
}

/// Accumulate one image into `acc`: predictions clamped to
/// `[d_min, d_max]`, pixels restricted to the mask and the optional crop.
pub fn accumulate_metrics(
    acc: &mut MetricAccumulator,
    pred: &[f64],
    gt: &[f64],
    mask: &[bool],
    dims: (usize, usize),
    d_min: f64,
    d_max: f64,
    crop: Option<CropRect>,
) -> Result<()> {
    let (h, w) = dims;
    if pred.len() != h * w || gt.len() != h * w || mask.len() != h * w {
        return Err(Error::dimension(
            "eval_metrics",
            format!("buffers do not match {h}x{w}"),
        ));
    }
    let rect = crop.unwrap_or(CropRect { top: 0, left: 0, height: h, width: w });
    if rect.top >= h || rect.left >= w || rect.height == 0 || rect.width == 0 {
        return Err(Error::contract(
            "eval_metrics",
            format!("crop {rect:?} does not intersect a {h}x{w} image"),
        ));
    }
    let y_end = (rect.top + rect.height).min(h);
    let x_end = (rect.left + rect.width).min(w);
    for y in rect.top..y_end {
        for x in rect.left..x_end {
            let i = y * w + x;
            if !mask[i] || !(gt[i] > 0.0) {
                continue;
            }
            acc.push(pred[i].clamp(d_min, d_max), gt[i]);
        }
    }
    Ok(())
}

/// Metric suite for a single image; errors if the masked crop is empty.
pub fn eval_metrics(
    pred: &[f64],
    gt: &[f64],
    mask: &[bool],
    dims: (usize, usize),
    d_min: f64,
    d_max: f64,
    crop: Option<CropRect>,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    accumulate_metrics(&mut acc, pred, gt, mask, dims, d_min, d_max, crop)?;
    acc.finalize()
}
