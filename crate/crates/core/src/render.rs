//! Heatmap rendering and binary PNM (P5/P6) image IO.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Percentile of |score| mapped to full colour saturation.
pub const SATURATION_PERCENTILE: f64 = 0.99;

/// An 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Binary P6 encoding.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_ppm())?;
        Ok(())
    }
}

/// Symmetric colour scale: the given percentile of |score|, or 0 for an all-zero map.
pub fn saturation_scale(scores: &[f64], percentile: f64) -> f64 {
    let mut mags: Vec<f64> = scores.iter().map(|v| v.abs()).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let pos = percentile.clamp(0.0, 1.0) * (mags.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos.fract());
    let hi = (lo + 1).min(mags.len() - 1);
    let scale = mags[lo] + frac * (mags[hi] - mags[lo]);
    if scale > 0.0 {
        scale
    } else {
        mags[mags.len() - 1]
    }
}

/// Blue-white-red colour for a score: white at 0, red for positive, blue for negative.
pub fn diverging_color(score: f64, scale: f64) -> [u8; 3] {
    if scale.is_nan() || scale <= 0.0 || score == 0.0 {
        return [255, 255, 255];
    }
    let t = (score / scale).clamp(-1.0, 1.0);
    let c = (255.0 * (1.0 - t.abs())).round() as u8;
    if t > 0.0 {
        [255, c, c]
    } else {
        [c, c, 255]
    }
}

/// Renders an `H x W` score map with a symmetric diverging colormap.
pub fn render_heatmap(scores: &Tensor) -> Result<RgbImage> {
    render_heatmap_with(scores, SATURATION_PERCENTILE)
}

/// As [`render_heatmap`], saturating at the given percentile of |score|.
pub fn render_heatmap_with(scores: &Tensor, percentile: f64) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&percentile) {
        return Err(Error::invalid(format!("render percentile must lie in [0, 1], got {percentile}")));
    }
    if scores.ndim() != 2 {
        return Err(Error::shape(format!("heatmap needs an HxW map, got {:?}", scores.shape())));
    }
    if !scores.is_finite() {
        return Err(Error::invalid("heatmap scores contain non-finite values"));
    }
    let (height, width) = (scores.shape()[0], scores.shape()[1]);
    let scale = saturation_scale(scores.data(), percentile);
    let pixels = scores.data().iter().flat_map(|&s| diverging_color(s, scale)).collect();
    Ok(RgbImage { width, height, pixels })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `C x H x W` image with values in `[0, 1]` as P5 (C = 1) or P6 (C = 3).
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    let shape = image.shape();
    if shape.len() != 3 || (shape[0] != 1 && shape[0] != 3) {
        return Err(Error::shape(format!("PNM needs a 1xHxW or 3xHxW image, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..h * w {
        for ch in 0..c {
            out.push(to_byte(d[ch * h * w + p]));
        }
    }
    Ok(out)
}

pub fn save_pnm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pnm(image)?)?;
    Ok(())
}

fn header_token<R: BufRead>(reader: &mut R) -> Result<String> {
    let mut token = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        if reader.read(&mut byte)? == 0 {
            break;
        }
        match byte[0] {
            b'#' if token.is_empty() => {
                let mut skip = Vec::new();
                reader.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    break;
                }
            }
            b => token.push(b),
        }
    }
    if token.is_empty() {
        return Err(Error::format("truncated PNM header"));
    }
    String::from_utf8(token).map_err(|_| Error::format("non-ASCII PNM header"))
}

/// Reads a binary P5/P6 file as raw byte values `C x H x W` (0..=255, not rescaled).
pub fn read_pnm<R: BufRead>(mut reader: R) -> Result<Tensor> {
    let magic = header_token(&mut reader)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(format!("unsupported PNM magic {other:?}"))),
    };
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = header_token(&mut reader)?.parse().map_err(|_| Error::format("bad PNM dimension"))?;
    }
    let [w, h, maxval] = dims;
    if maxval != 255 || w == 0 || h == 0 {
        return Err(Error::format(format!("only 8-bit non-empty PNM is supported, got {w}x{h} max {maxval}")));
    }
    let mut raw = vec![0u8; w * h * channels];
    reader.read_exact(&mut raw).map_err(|_| Error::format("truncated PNM payload"))?;
    let mut data = vec![0.0; raw.len()];
    for p in 0..h * w {
        for ch in 0..channels {
            data[ch * h * w + p] = f64::from(raw[p * channels + ch]);
        }
    }
    Tensor::new(vec![channels, h, w], data)
}

pub fn load_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    read_pnm(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Writes bytes, creating parent directories.
pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
