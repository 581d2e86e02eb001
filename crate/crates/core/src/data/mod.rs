//! Training/evaluation samples: synthetic scene generation and dataset
//! list files.

pub mod checkpoint;
pub mod formats;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One RGB image with ground-truth depth and a validity mask. Extents are
/// 32-divisible after loader padding; the pre-padding extents are kept so
/// evaluation can crop back to true size.
#[derive(Debug, Clone)]
pub struct DepthSample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub orig_height: usize,
    pub orig_width: usize,
    /// `[H * W * 3]`, values in [0, 1].
    pub image: Vec<f64>,
    /// `[H * W]` meters; positive where the mask is true.
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
}

impl DepthSample {
    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::constant(
            &[self.height, self.width, 3],
            self.image.iter().map(|v| T::from_f64(*v)).collect(),
        )
        .expect("image buffer matches extents")
    }

    pub fn depth_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::constant(
            &[self.height, self.width],
            self.depth.iter().map(|v| T::from_f64(*v)).collect(),
        )
        .expect("depth buffer matches extents")
    }
}

struct Rect {
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    depth: f64,
    albedo: [f64; 3],
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn shade(depth: f64, d_max: f64) -> f64 {
    (1.0 - 0.85 * (depth - 0.1 * d_max) / (0.9 * d_max)).clamp(0.05, 1.0)
}

/// Deterministic pseudo-random scenes: a ground plane whose depth grows
/// along rows plus 2..5 axis-aligned rectangles at constant depths drawn
/// over it. Pixel colors are a per-object albedo times a shade that falls
/// off monotonically with depth, so depth is recoverable from appearance.
/// The mask is true everywhere except a seeded 5% dropout.
pub fn synth_dataset(
    seed: u64,
    count: usize,
    size: (usize, usize),
    d_max: f64,
) -> Result<Vec<DepthSample>> {
    let (h, w) = size;
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::contract(
            "synth_dataset",
            format!("extents ({h}, {w}) must be positive multiples of 32"),
        ));
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = sample_rng(seed, i);
        let ground_albedo = [(); 3].map(|_| rng.gen_range(0.4..1.0));
        let n_rects = rng.gen_range(2..=5usize);
        let mut rects: Vec<Rect> = (0..n_rects)
            .map(|_| {
                let rh = rng.gen_range(h / 8..=h / 5);
                let rw = rng.gen_range(w / 8..=w / 5);
                Rect {
                    y0: rng.gen_range(0..h - rh),
                    x0: rng.gen_range(0..w - rw),
                    h: rh,
                    w: rw,
                    depth: rng.gen_range(0.25..0.8) * d_max,
                    albedo: [(); 3].map(|_| rng.gen_range(0.4..1.0)),
                }
            })
            .collect();
        // draw far to near so nearer rectangles occlude
        rects.sort_by(|a, b| b.depth.partial_cmp(&a.depth).unwrap());

        let mut depth = vec![0.0; h * w];
        let mut albedo = vec![[0.0; 3]; h * w];
        for y in 0..h {
            let plane = (0.15 + 0.8 * y as f64 / (h - 1).max(1) as f64) * d_max;
            for x in 0..w {
                depth[y * w + x] = plane;
                albedo[y * w + x] = ground_albedo;
            }
        }
        for r in &rects {
            for y in r.y0..r.y0 + r.h {
                for x in r.x0..r.x0 + r.w {
                    depth[y * w + x] = r.depth;
                    albedo[y * w + x] = r.albedo;
                }
            }
        }

        let mut image = Vec::with_capacity(h * w * 3);
        for p in 0..h * w {
            let s = shade(depth[p], d_max);
            for c in 0..3 {
                image.push(albedo[p][c] * s);
            }
        }
        let mask = (0..h * w).map(|_| !rng.gen_bool(0.05)).collect();
        samples.push(DepthSample {
            id: format!("synth-{seed}-{i:04}"),
            height: h,
            width: w,
            orig_height: h,
            orig_width: w,
            image,
            depth,
            mask,
        });
    }
    Ok(samples)
}

/// Parse a dataset list file: one "image_path depth_path" pair per line,
/// '#' comments and blank lines allowed. Relative paths resolve against
/// the list file's directory.
pub fn read_list_file(path: &Path) -> Result<Vec<(std::path::PathBuf, std::path::PathBuf)>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        match (fields.next(), fields.next(), fields.next()) {
            (Some(img), Some(dep), None) => {
                pairs.push((base.join(img), base.join(dep)));
            }
            _ => {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    msg: format!("line {}: expected \"image_path depth_path\"", lineno + 1),
                })
            }
        }
    }
    Ok(pairs)
}

/// Load a dataset from a list file; images and depths are zero-padded to
/// 32-divisible extents (mask false on padding).
pub fn load_list_dataset(path: &Path) -> Result<Vec<DepthSample>> {
    let pairs = read_list_file(path)?;
    let mut samples = Vec::with_capacity(pairs.len());
    for (img_path, depth_path) in pairs {
        let (ih, iw, image) = formats::read_image_rgb(&img_path)?;
        let (dh, dw, depth) = formats::read_depth_auto(&depth_path)?;
        if (ih, iw) != (dh, dw) {
            return Err(Error::Format {
                path: depth_path.display().to_string(),
                msg: format!("depth {dh}x{dw} does not match image {ih}x{iw}"),
            });
        }
        let id = sample_id(&img_path);
        samples.push(pad_sample(id, ih, iw, image, depth));
    }
    Ok(samples)
}

pub fn sample_id(path: &Path) -> String {
    path.file_stem().map_or_else(|| "sample".into(), |s| s.to_string_lossy().into_owned())
}

fn pad_sample(id: String, h: usize, w: usize, image: Vec<f64>, depth: Vec<f64>) -> DepthSample {
    let ph = h.div_ceil(32) * 32;
    let pw = w.div_ceil(32) * 32;
    let mut pimg = vec![0.0; ph * pw * 3];
    let mut pdepth = vec![0.0; ph * pw];
    let mut mask = vec![false; ph * pw];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                pimg[(y * pw + x) * 3 + c] = image[(y * w + x) * 3 + c];
            }
            let d = depth[y * w + x];
            pdepth[y * pw + x] = d;
            mask[y * pw + x] = d > 0.0 && d.is_finite();
        }
    }
    DepthSample {
        id,
        height: ph,
        width: pw,
        orig_height: h,
        orig_width: w,
        image: pimg,
        depth: pdepth,
        mask,
    }
}
