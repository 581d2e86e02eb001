//! Depth and image file formats: PFM (float32), 16-bit PNG at 256 units
//! per meter, and RGB image loading.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Fixed-point scale of the 16-bit PNG encoding: value = round(depth * 256).
pub const PNG16_SCALE: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthFormat {
    Pfm,
    Png16,
}

impl DepthFormat {
    pub fn extension(self) -> &'static str {
        match self {
            DepthFormat::Pfm => "pfm",
            DepthFormat::Png16 => "png",
        }
    }
}

impl std::str::FromStr for DepthFormat {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pfm" => Ok(DepthFormat::Pfm),
            "png16" | "png" => Ok(DepthFormat::Png16),
            other => Err(format!("unknown depth format {other:?}, expected pfm or png16")),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), msg: msg.into() }
}

/// Write a grayscale PFM: "Pf" header, width/height line, negative scale
/// token for little-endian, then float32 rows stored bottom-up.
pub fn write_pfm(path: &Path, depth: &[f64], h: usize, w: usize) -> Result<()> {
    if depth.len() != h * w {
        return Err(Error::dimension("write_pfm", format!("buffer vs {h}x{w}")));
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut bytes = Vec::with_capacity(32 + 4 * depth.len());
    bytes.extend_from_slice(format!("Pf\n{w} {h}\n-1.0\n").as_bytes());
    for row in (0..h).rev() {
        for x in 0..w {
            bytes.extend_from_slice(&(depth[row * w + x] as f32).to_le_bytes());
        }
    }
    file.write_all(&bytes).map_err(|e| io_err(path, e))
}

/// Read a grayscale PFM written by [`write_pfm`] (big-endian scales are
/// accepted too). Returns (h, w, depth).
pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;

    let mut pos = 0;
    let mut next_token = |expect: &str| -> Result<String> {
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos == start || pos >= bytes.len() {
            return Err(format_err(path, format!("missing {expect} in header")));
        }
        let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        pos += 1; // single whitespace separator
        Ok(tok)
    };

    let magic = next_token("magic")?;
    if magic != "Pf" {
        return Err(format_err(path, format!("bad magic {magic:?}, expected Pf")));
    }
    let w: usize = next_token("width")?
        .parse()
        .map_err(|e| format_err(path, format!("bad width: {e}")))?;
    let h: usize = next_token("height")?
        .parse()
        .map_err(|e| format_err(path, format!("bad height: {e}")))?;
    let scale: f64 = next_token("scale")?
        .parse()
        .map_err(|e| format_err(path, format!("bad scale: {e}")))?;

    let need = h * w * 4;
    if bytes.len() < pos + need {
        return Err(format_err(path, format!("truncated pixel data ({} of {need} bytes)", bytes.len() - pos)));
    }
    let little_endian = scale < 0.0;
    let mut depth = vec![0.0; h * w];
    for row in 0..h {
        let src_row = h - 1 - row; // stored bottom-up
        for x in 0..w {
            let off = pos + (src_row * w + x) * 4;
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            let v = if little_endian { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            depth[row * w + x] = v as f64;
        }
    }
    Ok((h, w, depth))
}

/// Write a single-channel 16-bit PNG with 256 units per meter. Depths that
/// do not fit the encoding are a range error.
pub fn write_png16(path: &Path, depth: &[f64], h: usize, w: usize) -> Result<()> {
    if depth.len() != h * w {
        return Err(Error::dimension("write_png16", format!("buffer vs {h}x{w}")));
    }
    let mut raw = Vec::with_capacity(depth.len());
    for (i, d) in depth.iter().enumerate() {
        let v = (d * PNG16_SCALE).round();
        if !(0.0..=65535.0).contains(&v) {
            return Err(Error::Range(format!(
                "depth {d} m at pixel {i} encodes to {v}, outside u16"
            )));
        }
        raw.push(v as u16);
    }
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized for extents");
    img.save(path).map_err(|e| format_err(path, format!("png encode: {e}")))
}

/// Read a 16-bit PNG depth map back into meters.
pub fn read_png16(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| format_err(path, format!("png decode: {e}")))?;
    match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let depth = buf.into_raw().into_iter().map(|v| v as f64 / PNG16_SCALE).collect();
            Ok((h, w, depth))
        }
        other => Err(format_err(
            path,
            format!("expected 16-bit grayscale, got {:?}", other.color()),
        )),
    }
}

pub fn write_depth(path: &Path, depth: &[f64], h: usize, w: usize, format: DepthFormat) -> Result<()> {
    match format {
        DepthFormat::Pfm => write_pfm(path, depth, h, w),
        DepthFormat::Png16 => write_png16(path, depth, h, w),
    }
}

/// Read a depth file, picking the format from the extension.
pub fn read_depth_auto(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm(path),
        Some("png") => read_png16(path),
        other => Err(format_err(path, format!("unknown depth extension {other:?}"))),
    }
}

/// Load an RGB image as `[H * W * 3]` reals in [0, 1].
pub fn read_image_rgb(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| format_err(path, format!("image decode: {e}")))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok((h, w, data))
}

/// Save an RGB buffer in [0, 1] as an 8-bit PNG.
pub fn write_image_rgb(path: &Path, data: &[f64], h: usize, w: usize) -> Result<()> {
    if data.len() != h * w * 3 {
        return Err(Error::dimension("write_image_rgb", format!("buffer vs {h}x{w}x3")));
    }
    let raw: Vec<u8> = data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = image::ImageBuffer::<image::Rgb<u8>, Vec<u8>>::from_raw(w as u32, h as u32, raw)
        .expect("buffer sized for extents");
    img.save(path).map_err(|e| format_err(path, format!("png encode: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("skipdepth-fmt-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn pfm_round_trip_is_float32_exact() {
        let dir = tmpdir("pfm");
        let path = dir.join("d.pfm");
        let depth: Vec<f64> = (0..12).map(|v| (v as f64 * 0.37 + 0.01) as f32 as f64).collect();
        write_pfm(&path, &depth, 3, 4).unwrap();
        let (h, w, back) = read_pfm(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(back, depth);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pfm_rejects_malformed_headers() {
        let dir = tmpdir("pfm-bad");
        let path = dir.join("bad.pfm");
        std::fs::write(&path, b"P5\n2 2\n-1.0\n").unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"Pf\n2 2\n-1.0\n\x00\x00").unwrap();
        assert!(matches!(read_pfm(&path), Err(Error::Format { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn png16_round_trip_stays_within_half_a_quantum() {
        let dir = tmpdir("png16");
        let path = dir.join("d.png");
        let depth: Vec<f64> = (0..12).map(|v| 0.05 + v as f64 * 0.61).collect();
        write_png16(&path, &depth, 4, 3).unwrap();
        let (h, w, back) = read_png16(&path).unwrap();
        assert_eq!((h, w), (4, 3));
        for (a, b) in depth.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / PNG16_SCALE, "{a} vs {b}");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn png16_overflow_is_a_range_error() {
        let dir = tmpdir("png16-range");
        let path = dir.join("d.png");
        // 300 m * 256 = 76800 > 65535
        let err = write_png16(&path, &[300.0], 1, 1).unwrap_err();
        assert!(matches!(err, Error::Range(_)), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
