//! Image preprocessing: square zero-padding, grayscale conversion, bilinear
//! resize to the network's 64x64 input, [0,1] scaling and per-image mean
//! subtraction.

use std::path::Path;

use crate::error::{Error, Result};
use crate::network::INPUT_SIZE;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Decoded 8-bit raster, interleaved channels, row-major.
#[derive(Debug, Clone)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::contract(format!("raster with zero dimension {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::contract(format!("raster must have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::contract(format!(
                "raster data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Raster { width, height, channels, data })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        Ok(match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                Raster::new(w, h, 1, g.into_raw())?
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                Raster::new(w, h, 3, rgb.into_raw())?
            }
        })
    }
}

/// Zero-pad to a square canvas of side max(w, h), centering the source
/// (odd leftovers go to the bottom/right edge).
pub fn pad_to_square(r: &Raster) -> Raster {
    if r.width == r.height {
        return r.clone();
    }
    let side = r.width.max(r.height);
    let off_x = (side - r.width) / 2;
    let off_y = (side - r.height) / 2;
    let mut data = vec![0u8; side * side * r.channels];
    for y in 0..r.height {
        let src = &r.data[y * r.width * r.channels..(y + 1) * r.width * r.channels];
        let dst_start = ((y + off_y) * side + off_x) * r.channels;
        data[dst_start..dst_start + src.len()].copy_from_slice(src);
    }
    Raster { width: side, height: side, channels: r.channels, data }
}

/// Rec.601 luma weights.
pub fn to_grayscale(r: &Raster) -> Vec<f64> {
    match r.channels {
        1 => r.data.iter().map(|&v| v as f64).collect(),
        _ => r
            .data
            .chunks_exact(3)
            .map(|px| 0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64)
            .collect(),
    }
}

/// Bilinear resample of a single plane with half-pixel centers; taps beyond
/// the source clamp to the edge so constant planes stay constant.
pub fn bilinear_resize(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    assert_eq!(src.len(), w * h, "bilinear_resize: plane length");
    let sample = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        src[yc * w + xc]
    };
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut out = vec![0.0; out_w * out_h];
    for oy in 0..out_h {
        let fy = (oy as f64 + 0.5) * sy - 0.5;
        let y0 = fy.floor();
        let dy = fy - y0;
        for ox in 0..out_w {
            let fx = (ox as f64 + 0.5) * sx - 0.5;
            let x0 = fx.floor();
            let dx = fx - x0;
            let (xi, yi) = (x0 as isize, y0 as isize);
            let v00 = sample(xi, yi);
            let v10 = sample(xi + 1, yi);
            let v01 = sample(xi, yi + 1);
            let v11 = sample(xi + 1, yi + 1);
            out[oy * out_w + ox] =
                v00 * (1.0 - dx) * (1.0 - dy) + v10 * dx * (1.0 - dy) + v01 * (1.0 - dx) * dy + v11 * dx * dy;
        }
    }
    out
}

/// Full preprocessing chain; `channels` selects the network input format
/// (1 = grayscale, 3 = rgb kept as-is).
pub fn preprocess<T: Scalar>(raster: &Raster, channels: usize) -> Result<Tensor<T>> {
    if channels != 1 && channels != 3 {
        return Err(Error::config(format!("preprocess channels must be 1 or 3, got {channels}")));
    }
    let padded = pad_to_square(raster);
    let planes: Vec<Vec<f64>> = if channels == 1 {
        vec![to_grayscale(&padded)]
    } else {
        let expanded: Vec<u8> = if padded.channels == 1 {
            padded.data.iter().flat_map(|&v| [v, v, v]).collect()
        } else {
            padded.data.clone()
        };
        (0..3)
            .map(|c| expanded.chunks_exact(3).map(|px| px[c] as f64).collect())
            .collect()
    };

    let side = padded.width;
    let mut values = Vec::with_capacity(channels * INPUT_SIZE * INPUT_SIZE);
    for plane in &planes {
        values.extend(bilinear_resize(plane, side, side, INPUT_SIZE, INPUT_SIZE));
    }
    for v in &mut values {
        *v /= 255.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let data: Vec<T> = values.iter().map(|&v| T::from_f64_lossy(v - mean)).collect();
    Tensor::new(vec![channels, INPUT_SIZE, INPUT_SIZE], data)
}
