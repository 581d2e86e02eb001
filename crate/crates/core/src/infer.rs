//! Inference: padding to the backbone's 32-divisible contract, 4x
//! upsampling back to input resolution, and optional mirror averaging.

use crate::error::{Error, Result};
use crate::model::DepthModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest inferable image edge: the query initialiser pools on a 6x6
/// grid at 1/32 scale.
pub const MIN_EDGE: usize = 192;

fn pad32(n: usize) -> usize {
    n.div_ceil(32) * 32
}

fn flip_rows_horizontal(data: &[f64], h: usize, w: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * channels;
            let dst = (y * w + (w - 1 - x)) * channels;
            out[dst..dst + channels].copy_from_slice(&data[src..src + channels]);
        }
    }
    out
}

/// A copy of the model with parameters detached from gradient tracking,
/// so repeated forwards build no autodiff graph.
fn frozen<T: Scalar>(model: &DepthModel<T>) -> DepthModel<T> {
    let mut m = model.clone();
    m.visit_parameters_mut(&mut |p| p.tensor = p.tensor.detach());
    m
}

fn run_once<T: Scalar>(
    model: &DepthModel<T>,
    image: &[f64],
    h: usize,
    w: usize,
) -> Result<Vec<f64>> {
    let (ph, pw) = (pad32(h), pad32(w));
    let mut padded = vec![0.0; ph * pw * 3];
    for y in 0..h {
        for c in 0..w * 3 {
            padded[(y * pw) * 3 + c] = image[(y * w) * 3 + c];
        }
    }
    let tensor = Tensor::constant(
        &[ph, pw, 3],
        padded.into_iter().map(|v| T::from_f64(v)).collect(),
    )?;
    let full = model.forward_depth_full(&tensor)?;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(full.data()[y * pw + x].to_f64());
        }
    }
    Ok(out)
}

/// Depth at input resolution from an RGB buffer in [0, 1]. With
/// `flip_average` the horizontal mirror is inferred too, mirrored back,
/// and the two predictions averaged.
pub fn infer_depth<T: Scalar>(
    model: &DepthModel<T>,
    image: &[f64],
    h: usize,
    w: usize,
    flip_average: bool,
) -> Result<Vec<f64>> {
    if image.len() != h * w * 3 {
        return Err(Error::dimension("infer", format!("buffer vs {h}x{w}x3")));
    }
    if pad32(h) < MIN_EDGE || pad32(w) < MIN_EDGE {
        return Err(Error::contract(
            "infer",
            format!("image {h}x{w} below the minimum inferable size {MIN_EDGE}x{MIN_EDGE}"),
        ));
    }
    let model = frozen(model);
    let direct = run_once(&model, image, h, w)?;
    if !flip_average {
        return Ok(direct);
    }
    let mirrored = flip_rows_horizontal(image, h, w, 3);
    let mirrored_pred = run_once(&model, &mirrored, h, w)?;
    let unmirrored = flip_rows_horizontal(&mirrored_pred, h, w, 1);
    Ok(direct
        .iter()
        .zip(&unmirrored)
        .map(|(a, b)| 0.5 * (a + b))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model() -> DepthModel<f32> {
        let cfg = ModelConfig {
            backbone_channels: vec![2, 3, 4, 5],
            decoder_channels: vec![4, 8, 8, 12],
            heads: vec![2, 2, 2, 2],
            pqi_channels: 6,
            bcp_hidden: 8,
            n_bins: 8,
            ..ModelConfig::default()
        };
        DepthModel::init(cfg, 2).unwrap()
    }

    fn gradient_image(h: usize, w: usize) -> Vec<f64> {
        let mut img = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = (y as f64 / h as f64 + x as f64 / w as f64) / 2.0;
                img.extend_from_slice(&[v, v * 0.8, 1.0 - v]);
            }
        }
        img
    }

    #[test]
    fn output_extents_match_the_input_even_unpadded() {
        let model = tiny_model();
        // 200x210 pads to 224x224 internally and crops back
        let img = gradient_image(200, 210);
        let depth = infer_depth(&model, &img, 200, 210, false).unwrap();
        assert_eq!(depth.len(), 200 * 210);
        let (lo, hi) = (model.config.d_min, model.config.d_max);
        assert!(depth.iter().all(|v| *v > lo && *v < hi));
    }

    #[test]
    fn symmetric_input_with_flip_average_is_symmetric() {
        let model = tiny_model();
        let (h, w) = (192, 192);
        let mut img = gradient_image(h, w);
        // symmetrize the image about the vertical axis
        let flipped = flip_rows_horizontal(&img, h, w, 3);
        for (a, b) in img.iter_mut().zip(&flipped) {
            *a = 0.5 * (*a + *b);
        }
        let depth = infer_depth(&model, &img, h, w, true).unwrap();
        for y in 0..h {
            for x in 0..w {
                let a = depth[y * w + x];
                let b = depth[y * w + (w - 1 - x)];
                assert!((a - b).abs() < 1e-5, "({y}, {x}): {a} vs {b}");
            }
        }
    }

    #[test]
    fn undersized_images_are_rejected() {
        let model = tiny_model();
        let img = gradient_image(96, 96);
        assert!(matches!(
            infer_depth(&model, &img, 96, 96, false),
            Err(Error::Contract { .. })
        ));
    }
}
