//! Online augmentation: one affine warp per sample composed from a sampled
//! horizontal flip, rotation, shear and scale, resampled bilinearly with
//! zero fill. Labels pass through untouched.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    pub max_shear: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            max_rotation_deg: 10.0,
            max_shear: 0.1,
            scale_range: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    /// No-op configuration (identity transform with probability 1).
    pub fn disabled() -> Self {
        AugmentConfig { flip_prob: 0.0, max_rotation_deg: 0.0, max_shear: 0.0, scale_range: (1.0, 1.0) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config(format!("flip_prob {} not in [0,1]", self.flip_prob)));
        }
        let (lo, hi) = self.scale_range;
        if !(lo <= 1.0 && 1.0 <= hi) || !lo.is_finite() || !hi.is_finite() || lo <= 0.0 {
            return Err(Error::config(format!("scale_range ({lo}, {hi}) must straddle 1")));
        }
        if !self.max_rotation_deg.is_finite() || !self.max_shear.is_finite() {
            return Err(Error::config("rotation/shear bounds must be finite"));
        }
        Ok(())
    }
}

/// The transform actually drawn for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub rotation_deg: f64,
    pub shear: f64,
    pub scale: f64,
}

/// Draw transform parameters. All four draws happen unconditionally so the
/// rng stream shape never depends on earlier outcomes.
pub fn sample_params<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> AugmentParams {
    let flip = rng.gen::<f64>() < cfg.flip_prob;
    let rotation_deg = if cfg.max_rotation_deg > 0.0 {
        rng.gen_range(-cfg.max_rotation_deg..cfg.max_rotation_deg)
    } else {
        let _ = rng.gen::<f64>();
        0.0
    };
    let shear = if cfg.max_shear > 0.0 {
        rng.gen_range(-cfg.max_shear..cfg.max_shear)
    } else {
        let _ = rng.gen::<f64>();
        0.0
    };
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        let _ = rng.gen::<f64>();
        lo
    };
    AugmentParams { flip, rotation_deg, shear, scale }
}

fn mat2_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] + a[1] * b[2],
        a[0] * b[1] + a[1] * b[3],
        a[2] * b[0] + a[3] * b[2],
        a[2] * b[1] + a[3] * b[3],
    ]
}

// Forward transform about the image center, applied to a center-relative
// point as rotate(shear(scale(flip(p)))). Row-major 2x2; the warp inverts it.
fn forward_matrix(p: &AugmentParams) -> [f64; 4] {
    let (sin, cos) = p.rotation_deg.to_radians().sin_cos();
    let rotate = [cos, -sin, sin, cos];
    let shear = [1.0, p.shear, 0.0, 1.0]; // x-shear
    let scale = [p.scale, 0.0, 0.0, p.scale];
    let flip = [if p.flip { -1.0 } else { 1.0 }, 0.0, 0.0, 1.0];
    mat2_mul(mat2_mul(mat2_mul(rotate, shear), scale), flip)
}

/// Warp one `[C, H, W]` tensor by the sampled transform, bilinear with zero
/// fill outside the source.
pub fn warp<T: Scalar>(sample: &Tensor<T>, params: &AugmentParams) -> Result<Tensor<T>> {
    let dims = sample.dims();
    let (c, h, w) = match dims.as_slice() {
        [c, h, w] => (*c, *h, *w),
        _ => return Err(Error::shape(format!("warp expects [C,H,W], got {:?}", dims))),
    };
    let m = forward_matrix(params);
    let det = m[0] * m[3] - m[1] * m[2];
    if det.abs() < 1e-12 {
        return Err(Error::config("augmentation transform is singular"));
    }
    let inv = [m[3] / det, -m[1] / det, -m[2] / det, m[0] / det];
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    let out = sample.with_data(|data| {
        let mut out = vec![T::zero(); data.len()];
        for ch in 0..c {
            let plane = &data[ch * h * w..(ch + 1) * h * w];
            let out_plane = &mut out[ch * h * w..(ch + 1) * h * w];
            for oy in 0..h {
                let ry = oy as f64 - cy;
                for ox in 0..w {
                    let rx = ox as f64 - cx;
                    let sx = inv[0] * rx + inv[1] * ry + cx;
                    let sy = inv[2] * rx + inv[3] * ry + cy;
                    let x0 = sx.floor();
                    let y0 = sy.floor();
                    let dx = sx - x0;
                    let dy = sy - y0;
                    let gather = |x: isize, y: isize| -> f64 {
                        if x >= 0 && (x as usize) < w && y >= 0 && (y as usize) < h {
                            plane[y as usize * w + x as usize].to_f64_lossy()
                        } else {
                            0.0
                        }
                    };
                    let (xi, yi) = (x0 as isize, y0 as isize);
                    let v = gather(xi, yi) * (1.0 - dx) * (1.0 - dy)
                        + gather(xi + 1, yi) * dx * (1.0 - dy)
                        + gather(xi, yi + 1) * (1.0 - dx) * dy
                        + gather(xi + 1, yi + 1) * dx * dy;
                    out_plane[oy * w + ox] = T::from_f64_lossy(v);
                }
            }
        }
        out
    });
    Tensor::new(dims, out)
}

/// Sample a transform and apply it; labels are returned unchanged.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    sample: &Tensor<T>,
    labels: Vec<u8>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<u8>)> {
    let params = sample_params(cfg, rng);
    Ok((warp(sample, &params)?, labels))
}
