//! Dataset-level evaluation: per-sample metric reports plus a
//! pixel-weighted pooled aggregate.

use std::path::Path;

use crate::data::{formats, read_list_file, sample_id, DepthSample};
use crate::error::{Error, Result};
use crate::infer::infer_depth;
use crate::metrics::{accumulate_metrics, CropRect, MetricAccumulator, MetricReport};
use crate::model::DepthModel;
use crate::scalar::Scalar;

/// Per-sample outcome: a report, or the error that sample produced.
pub type SampleResult = (String, Result<MetricReport>);

#[derive(Debug)]
pub struct EvalOutcome {
    pub per_sample: Vec<SampleResult>,
    /// Pixel-pooled aggregate over all successful samples.
    pub aggregate: Result<MetricReport>,
}

impl EvalOutcome {
    pub fn all_ok(&self) -> bool {
        self.aggregate.is_ok() && self.per_sample.iter().all(|(_, r)| r.is_ok())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (id, res) in &self.per_sample {
            match res {
                Ok(r) => out.push_str(&format!("{id} {}\n", r.render_line())),
                Err(e) => out.push_str(&format!("{id} error: {e}\n")),
            }
        }
        match &self.aggregate {
            Ok(r) => {
                out.push_str(&format!("aggregate {}\n", r.render_line()));
                out.push('\n');
                out.push_str(&r.render_doc());
            }
            Err(e) => out.push_str(&format!("aggregate error: {e}\n")),
        }
        out
    }
}

/// Evaluate a model on in-memory samples (used for the training set).
/// Predictions run at the sample's padded extents and are cropped back to
/// the original ones before scoring.
pub fn evaluate_model<T: Scalar>(
    model: &DepthModel<T>,
    samples: &[DepthSample],
    crop: Option<CropRect>,
    flip_average: bool,
) -> Result<EvalOutcome> {
    let (d_min, d_max) = (model.config.d_min, model.config.d_max);
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut pooled = MetricAccumulator::default();
    for s in samples {
        let result = (|| {
            let pred = infer_depth(model, &s.image, s.height, s.width, flip_average)?;
            let report = score_cropped(&pred, s, d_min, d_max, crop)?;
            accumulate_cropped(&mut pooled, &pred, s, d_min, d_max, crop)?;
            Ok(report)
        })();
        per_sample.push((s.id.clone(), result));
    }
    Ok(EvalOutcome { aggregate: pooled.finalize(), per_sample })
}

fn crop_to_orig(s: &DepthSample, pred: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let (h, w, pw) = (s.orig_height, s.orig_width, s.width);
    let mut p = Vec::with_capacity(h * w);
    let mut g = Vec::with_capacity(h * w);
    let mut m = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            p.push(pred[y * pw + x]);
            g.push(s.depth[y * pw + x]);
            m.push(s.mask[y * pw + x]);
        }
    }
    (p, g, m)
}

fn score_cropped(
    pred: &[f64],
    s: &DepthSample,
    d_min: f64,
    d_max: f64,
    crop: Option<CropRect>,
) -> Result<MetricReport> {
    let (p, g, m) = crop_to_orig(s, pred);
    crate::metrics::eval_metrics(&p, &g, &m, (s.orig_height, s.orig_width), d_min, d_max, crop)
}

fn accumulate_cropped(
    acc: &mut MetricAccumulator,
    pred: &[f64],
    s: &DepthSample,
    d_min: f64,
    d_max: f64,
    crop: Option<CropRect>,
) -> Result<()> {
    let (p, g, m) = crop_to_orig(s, pred);
    accumulate_metrics(acc, &p, &g, &m, (s.orig_height, s.orig_width), d_min, d_max, crop)
}

/// Evaluate stored predictions against a ground-truth list. Prediction
/// files live in `pred_dir`, named `<id>.pfm` or `<id>.png` where `<id>`
/// is the stem of the image path in the list.
pub fn evaluate_files(
    pred_dir: &Path,
    gt_list: &Path,
    crop: Option<CropRect>,
    d_min: f64,
    d_max: f64,
) -> Result<EvalOutcome> {
    let pairs = read_list_file(gt_list)?;
    if pairs.is_empty() {
        return Err(Error::Config(format!("empty ground-truth list {}", gt_list.display())));
    }
    let mut unmatched = Vec::new();
    let mut work = Vec::new();
    for (img_path, depth_path) in &pairs {
        let id = sample_id(img_path);
        let candidates = [pred_dir.join(format!("{id}.pfm")), pred_dir.join(format!("{id}.png"))];
        match candidates.into_iter().find(|p| p.exists()) {
            Some(pred_path) => work.push((id, pred_path, depth_path.clone())),
            None => unmatched.push(id),
        }
    }
    if !unmatched.is_empty() {
        return Err(Error::Config(format!(
            "no prediction found for {} of {} ids: {}",
            unmatched.len(),
            pairs.len(),
            unmatched.join(", ")
        )));
    }

    let mut per_sample = Vec::with_capacity(work.len());
    let mut pooled = MetricAccumulator::default();
    for (id, pred_path, depth_path) in work {
        let result = (|| {
            let (ph, pw, pred) = formats::read_depth_auto(&pred_path)?;
            let (gh, gw, gt) = formats::read_depth_auto(&depth_path)?;
            if (ph, pw) != (gh, gw) {
                return Err(Error::Format {
                    path: pred_path.display().to_string(),
                    msg: format!("prediction {ph}x{pw} vs ground truth {gh}x{gw}"),
                });
            }
            let mask: Vec<bool> = gt.iter().map(|d| *d > 0.0 && d.is_finite()).collect();
            let report =
                crate::metrics::eval_metrics(&pred, &gt, &mask, (gh, gw), d_min, d_max, crop)?;
            accumulate_metrics(&mut pooled, &pred, &gt, &mask, (gh, gw), d_min, d_max, crop)?;
            Ok(report)
        })();
        per_sample.push((id, result));
    }
    Ok(EvalOutcome { aggregate: pooled.finalize(), per_sample })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::formats::{write_pfm, write_image_rgb};

    #[test]
    fn self_evaluation_is_perfect_and_pooling_weights_pixels() {
        let dir = std::env::temp_dir().join(format!("skipdepth-eval-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let pred_dir = dir.join("preds");
        std::fs::create_dir_all(&pred_dir).unwrap();

        // two fake samples with different sizes and errors
        let gt_a: Vec<f64> = (0..6).map(|v| 1.0 + v as f64).collect();
        let gt_b: Vec<f64> = (0..4).map(|v| 2.0 + v as f64).collect();
        let pred_a = gt_a.clone();
        let pred_b: Vec<f64> = gt_b.iter().map(|v| v * 2.0).collect();

        write_pfm(&dir.join("gt_a.pfm"), &gt_a, 2, 3).unwrap();
        write_pfm(&dir.join("gt_b.pfm"), &gt_b, 2, 2).unwrap();
        write_pfm(&pred_dir.join("img_a.pfm"), &pred_a, 2, 3).unwrap();
        write_pfm(&pred_dir.join("img_b.pfm"), &pred_b, 2, 2).unwrap();
        write_image_rgb(&dir.join("img_a.png"), &vec![0.5; 18], 2, 3).unwrap();
        write_image_rgb(&dir.join("img_b.png"), &vec![0.5; 12], 2, 2).unwrap();
        std::fs::write(dir.join("list.txt"), "img_a.png gt_a.pfm\nimg_b.png gt_b.pfm\n").unwrap();

        let out = evaluate_files(&pred_dir, &dir.join("list.txt"), None, 0.001, 100.0).unwrap();
        assert!(out.all_ok());
        let a = out.per_sample[0].1.as_ref().unwrap();
        assert_eq!(a.abs_rel, 0.0);
        assert_eq!(a.delta1, 1.0);
        let b = out.per_sample[1].1.as_ref().unwrap();
        assert!((b.abs_rel - 1.0).abs() < 1e-9);

        // pooled aggregate = pixel-weighted mean: 6 perfect + 4 at abs_rel 1
        let agg = out.aggregate.as_ref().unwrap();
        assert!((agg.abs_rel - 4.0 / 10.0).abs() < 1e-9);
        assert_eq!(agg.n_valid, 10);

        // a missing prediction id is reported by name
        std::fs::write(dir.join("list.txt"), "img_a.png gt_a.pfm\nghost.png gt_b.pfm\n").unwrap();
        let err = evaluate_files(&pred_dir, &dir.join("list.txt"), None, 0.001, 100.0).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");

        std::fs::remove_dir_all(&dir).ok();
    }
}
