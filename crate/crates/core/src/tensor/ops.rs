//! Forward operations and their reverse-mode gradients.
//!
//! Convolution runs as im2col + gemm; the brute-force direct form lives in
//! the test suite as an independent oracle. Batch members are independent:
//! samples are processed in fixed-size groups (bigger gemm panels for the
//! small spatial layers) and every reduction runs in index order, so results
//! do not depend on thread count or scheduling.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

use super::{accumulate, any_requires_grad, Op, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Column budget when grouping samples into one gemm call.
const GROUP_COL_TARGET: usize = 4096;
/// Cap on samples per group, keeping enough groups for batch parallelism.
const GROUP_MAX: usize = 4;

/// Spatial output size of a convolution/pool along one axis.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Interpret dims as (batch, channels, height, width); rank 3 means an
/// implicit batch of one.
fn batched_dims(dims: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match dims {
        [b, c, h, w] => Ok((*b, *c, *h, *w, true)),
        [c, h, w] => Ok((1, *c, *h, *w, false)),
        _ => Err(Error::shape(format!("expected rank 3 or 4 tensor, got dims {:?}", dims))),
    }
}

fn needs_grad<T: Scalar>(t: &Tensor<T>) -> bool {
    let inner = t.inner.borrow();
    inner.requires_grad || inner.op.is_some()
}

/// Geometry of one convolution, shared by forward and backward.
#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn col_rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn sample_in(&self) -> usize {
        self.ci * self.h * self.w
    }

    fn sample_out(&self) -> usize {
        self.co * self.cols()
    }

    /// Samples fused into one gemm panel. Fixed function of the geometry, so
    /// the reduction layout never depends on the runtime.
    fn group(&self) -> usize {
        (GROUP_COL_TARGET / self.cols()).clamp(1, GROUP_MAX).min(self.batch.max(1))
    }
}

// im2col: expand one sample into rows of the patch matrix. Row `r` of the
// group panel starts at `r * row_stride + col_offset`; each row segment is
// `cols` wide. Out-of-bounds taps are zero-filled.
fn im2col<T: Scalar>(x: &[T], col: &mut [T], g: ConvGeom, row_stride: usize, col_offset: usize) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let cols = g.cols();
    for c in 0..g.ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &mut col[r * row_stride + col_offset..][..cols];
                if g.stride == 1 {
                    for oy in 0..ho {
                        let seg = &mut row[oy * wo..][..wo];
                        let iy = oy as isize + ky as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            seg.fill(T::zero());
                            continue;
                        }
                        let shift = kx as isize - g.padding as isize; // ix = ox + shift
                        let lo = ((-shift).max(0) as usize).min(wo);
                        let hi = (((w as isize - shift).min(wo as isize)).max(0) as usize).max(lo);
                        seg[..lo].fill(T::zero());
                        if hi > lo {
                            let src = iy as usize * w + (lo as isize + shift) as usize;
                            seg[lo..hi].copy_from_slice(&plane[src..src + (hi - lo)]);
                        }
                        seg[hi..].fill(T::zero());
                    }
                } else {
                    for oy in 0..ho {
                        let iy = (oy * g.stride) as isize + ky as isize - g.padding as isize;
                        for ox in 0..wo {
                            let ix = (ox * g.stride) as isize + kx as isize - g.padding as isize;
                            row[oy * wo + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add transpose of im2col, reading the same strided panel layout.
fn col2im_add<T: Scalar>(dcol: &[T], dx: &mut [T], g: ConvGeom, row_stride: usize, col_offset: usize) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    for c in 0..g.ci {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &dcol[r * row_stride + col_offset..];
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + ky as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    if g.stride == 1 {
                        let shift = kx as isize - g.padding as isize;
                        let lo = ((-shift).max(0) as usize).min(wo);
                        let hi = (((w as isize - shift).min(wo as isize)).max(0) as usize).max(lo);
                        if hi > lo {
                            let dst = iy as usize * w + (lo as isize + shift) as usize;
                            let seg = &row[oy * wo..][..wo];
                            for (d, s) in plane[dst..dst + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
                                *d += *s;
                            }
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * g.stride) as isize + kx as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Index ranges `[lo, hi)` of each sample group.
fn sample_groups(batch: usize, group: usize) -> Vec<(usize, usize)> {
    (0..batch.div_ceil(group))
        .map(|gi| (gi * group, ((gi + 1) * group).min(batch)))
        .collect()
}

impl<T: Scalar> Tensor<T> {
    /// 2D convolution; kernel size is taken from `weight`'s dims.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        let in_dims = self.dims();
        let (b, ci, h, w, batched) = batched_dims(&in_dims)?;
        let w_dims = weight.dims();
        let [co, ciw, kh, kw] = match w_dims.as_slice() {
            [a, b2, c, d] => [*a, *b2, *c, *d],
            _ => return Err(Error::shape(format!("conv2d weight must be rank 4, got {:?}", w_dims))),
        };
        if ciw != ci {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: input has {ci}, weight expects {ciw}"
            )));
        }
        if bias.len() != co {
            return Err(Error::shape(format!("conv2d bias length {} != {co}", bias.len())));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let g = ConvGeom {
            batch: b,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            padding,
            ho: conv_output_dim(h, kh, stride, padding),
            wo: conv_output_dim(w, kw, stride, padding),
        };
        let (cols, col_rows, sample_in, sample_out) = (g.cols(), g.col_rows(), g.sample_in(), g.sample_out());
        let group = g.group();
        let groups = sample_groups(b, group);

        let x = self.inner.borrow();
        let wt = weight.inner.borrow();
        let bs = bias.inner.borrow();
        let (x_data, w_data, b_data): (&[T], &[T], &[T]) = (&x.data, &wt.data, &bs.data);

        let mut out = vec![T::zero(); b * sample_out];
        out.par_chunks_mut(group * sample_out)
            .zip(groups.par_iter())
            .for_each_init(
                || (Vec::new(), Vec::new()),
                |(col, panel): &mut (Vec<T>, Vec<T>), (out_g, &(lo, hi))| {
                    let n = hi - lo;
                    let width = n * cols;
                    col.resize(col_rows * width, T::zero());
                    for (j, bi) in (lo..hi).enumerate() {
                        im2col(&x_data[bi * sample_in..(bi + 1) * sample_in], col, g, width, j * cols);
                    }
                    if n == 1 {
                        // Panel layout equals the sample layout; write in place.
                        let out_s = &mut out_g[..sample_out];
                        for (c, seg) in out_s.chunks_mut(cols).enumerate() {
                            seg.fill(b_data[c]);
                        }
                        T::gemm(co, col_rows, cols, T::one(), w_data, col, T::one(), out_s);
                    } else {
                        panel.resize(co * width, T::zero());
                        for (c, seg) in panel.chunks_mut(width).enumerate() {
                            seg.fill(b_data[c]);
                        }
                        T::gemm(co, col_rows, width, T::one(), w_data, col, T::one(), panel);
                        for j in 0..n {
                            let out_s = &mut out_g[j * sample_out..(j + 1) * sample_out];
                            for c in 0..co {
                                out_s[c * cols..(c + 1) * cols]
                                    .copy_from_slice(&panel[c * width + j * cols..][..cols]);
                            }
                        }
                    }
                },
            );
        drop(x);
        drop(wt);
        drop(bs);

        let out_dims = if batched { vec![b, co, g.ho, g.wo] } else { vec![co, g.ho, g.wo] };
        let op = any_requires_grad(&[self, weight, bias]).then(|| Op::Conv2d {
            input: self.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            stride,
            padding,
        });
        Ok(Tensor::from_parts(out_dims, out, false, op))
    }

    /// Max pooling; gradient routes to the first maximal element of each window.
    pub fn maxpool2d(&self, window: usize, stride: usize) -> Result<Tensor<T>> {
        if window == 0 || stride == 0 {
            return Err(Error::config("maxpool2d window and stride must be >= 1"));
        }
        let in_dims = self.dims();
        let (b, c, h, w, batched) = batched_dims(&in_dims)?;
        if window > h || window > w {
            return Err(Error::shape(format!(
                "maxpool2d window {window} larger than input {h}x{w}"
            )));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let planes = b * c;
        let out_plane = ho * wo;

        let x = self.inner.borrow();
        let x_data: &[T] = &x.data;
        let mut out = vec![T::zero(); planes * out_plane];
        let mut argmax = vec![0u32; planes * out_plane];
        out.par_chunks_mut(out_plane)
            .zip(argmax.par_chunks_mut(out_plane))
            .enumerate()
            .for_each(|(p, (out_p, arg_p))| {
                let plane = &x_data[p * h * w..(p + 1) * h * w];
                if window == 2 && stride == 2 {
                    for oy in 0..ho {
                        let top = 2 * oy * w;
                        let bot = top + w;
                        for ox in 0..wo {
                            let i0 = top + 2 * ox;
                            let i2 = bot + 2 * ox;
                            let (mut best, mut idx) = (plane[i0], i0);
                            if plane[i0 + 1] > best {
                                best = plane[i0 + 1];
                                idx = i0 + 1;
                            }
                            if plane[i2] > best {
                                best = plane[i2];
                                idx = i2;
                            }
                            if plane[i2 + 1] > best {
                                best = plane[i2 + 1];
                                idx = i2 + 1;
                            }
                            out_p[oy * wo + ox] = best;
                            arg_p[oy * wo + ox] = idx as u32;
                        }
                    }
                } else {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0usize;
                            for ky in 0..window {
                                let iy = oy * stride + ky;
                                for kx in 0..window {
                                    let idx = iy * w + ox * stride + kx;
                                    if plane[idx] > best {
                                        best = plane[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out_p[oy * wo + ox] = best;
                            arg_p[oy * wo + ox] = best_idx as u32;
                        }
                    }
                }
            });
        drop(x);

        let out_dims = if batched { vec![b, c, ho, wo] } else { vec![c, ho, wo] };
        let op = any_requires_grad(&[self]).then(|| Op::MaxPool2d {
            input: self.clone(),
            argmax,
        });
        Ok(Tensor::from_parts(out_dims, out, false, op))
    }

    pub fn relu(&self) -> Tensor<T> {
        let x = self.inner.borrow();
        let out: Vec<T> = x.data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let dims = x.dims.clone();
        drop(x);
        let op = any_requires_grad(&[self]).then(|| Op::Relu { input: self.clone() });
        Tensor::from_parts(dims, out, false, op)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let x = self.inner.borrow();
        let out: Vec<T> = x
            .data
            .iter()
            .map(|&v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        let dims = x.dims.clone();
        drop(x);
        let op = any_requires_grad(&[self]).then(|| Op::Sigmoid { input: self.clone() });
        Tensor::from_parts(dims, out, false, op)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors scale by 1/(1-p); in eval mode the input
    /// tensor is returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, training: bool, rng: &mut R) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability {p} not in [0,1)")));
        }
        if !training {
            return Ok(self.clone());
        }
        let keep_scale = T::from_f64_lossy(1.0 / (1.0 - p));
        let x = self.inner.borrow();
        let mask: Vec<T> = (0..x.data.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep_scale })
            .collect();
        let out: Vec<T> = x.data.iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
        let dims = x.dims.clone();
        drop(x);
        let op = any_requires_grad(&[self]).then(|| Op::Dropout { input: self.clone(), mask });
        Ok(Tensor::from_parts(dims, out, false, op))
    }

    /// Affine map `x @ W^T + b` for `x` of dims `[N_in]` or `[B, N_in]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let in_dims = self.dims();
        let (b, n_in, batched) = match in_dims.as_slice() {
            [n] => (1usize, *n, false),
            [b, n] => (*b, *n, true),
            _ => return Err(Error::shape(format!("linear input must be rank 1 or 2, got {:?}", in_dims))),
        };
        let w_dims = weight.dims();
        let (n_out, n_in_w) = match w_dims.as_slice() {
            [o, i] => (*o, *i),
            _ => return Err(Error::shape(format!("linear weight must be rank 2, got {:?}", w_dims))),
        };
        if n_in_w != n_in {
            return Err(Error::shape(format!(
                "linear shape mismatch: input width {n_in}, weight expects {n_in_w}"
            )));
        }
        if bias.len() != n_out {
            return Err(Error::shape(format!("linear bias length {} != {n_out}", bias.len())));
        }

        let x = self.inner.borrow();
        let wt = weight.inner.borrow();
        let bs = bias.inner.borrow();
        let mut out = Vec::with_capacity(b * n_out);
        for _ in 0..b {
            out.extend_from_slice(&bs.data);
        }
        T::gemm_strided(
            b, n_in, n_out,
            T::one(),
            &x.data, n_in, 1,
            &wt.data, 1, n_in, // W^T view of row-major (n_out, n_in)
            T::one(),
            &mut out, n_out, 1,
        );
        drop(x);
        drop(wt);
        drop(bs);

        let out_dims = if batched { vec![b, n_out] } else { vec![n_out] };
        let op = any_requires_grad(&[self, weight, bias]).then(|| Op::Linear {
            input: self.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
        });
        Ok(Tensor::from_parts(out_dims, out, false, op))
    }

    /// View with new dims over the same (copied) data.
    pub fn reshape(&self, new_dims: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = new_dims.iter().product();
        if new_dims.iter().any(|&d| d == 0) || numel != self.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} elements to {:?}",
                self.len(),
                new_dims
            )));
        }
        let x = self.inner.borrow();
        let data = x.data.clone();
        drop(x);
        let op = any_requires_grad(&[self]).then(|| Op::Reshape { input: self.clone() });
        Ok(Tensor::from_parts(new_dims.to_vec(), data, false, op))
    }

    /// Collapse feature dims: `[B, C, H, W] -> [B, C*H*W]` for batched input,
    /// `[C, H, W] -> [C*H*W]` otherwise. Rank 1/2 pass through.
    pub fn flatten(&self) -> Result<Tensor<T>> {
        let dims = self.dims();
        match dims.as_slice() {
            [b, c, h, w] => self.reshape(&[*b, c * h * w]),
            [c, h, w] => self.reshape(&[c * h * w]),
            [_] | [_, _] => self.reshape(&dims),
            _ => Err(Error::shape(format!("flatten on dims {:?}", dims))),
        }
    }

    /// Mean binary cross entropy over all elements, with predictions clamped
    /// to `[1e-7, 1 - 1e-7]` before the logs.
    pub fn bce_loss(&self, target: &Tensor<T>) -> Result<Tensor<T>> {
        if self.dims() != target.dims() {
            return Err(Error::shape(format!(
                "bce_loss shape mismatch: pred {:?}, target {:?}",
                self.dims(),
                target.dims()
            )));
        }
        let eps = T::from_f64_lossy(1e-7);
        let p = self.inner.borrow();
        let t = target.inner.borrow();
        let n = T::from_f64_lossy(p.data.len() as f64);
        let mut total = T::zero();
        for (&pi, &ti) in p.data.iter().zip(t.data.iter()) {
            let pc = pi.max(eps).min(T::one() - eps);
            total = total - (ti * pc.ln() + (T::one() - ti) * (T::one() - pc).ln());
        }
        let loss = total / n;
        drop(p);
        drop(t);
        let op = any_requires_grad(&[self]).then(|| Op::BceLoss {
            pred: self.clone(),
            target: target.clone(),
            clamp_eps: eps,
        });
        Ok(Tensor::from_parts(vec![1], vec![loss], false, op))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&self) -> Tensor<T> {
        let x = self.inner.borrow();
        let mut total = T::zero();
        for &v in &x.data {
            total = total + v;
        }
        drop(x);
        let op = any_requires_grad(&[self]).then(|| Op::Sum { input: self.clone() });
        Tensor::from_parts(vec![1], vec![total], false, op)
    }

    /// Dot product against a constant coefficient vector, as a scalar tensor.
    pub fn weighted_sum(&self, weights: &[T]) -> Result<Tensor<T>> {
        let x = self.inner.borrow();
        if weights.len() != x.data.len() {
            return Err(Error::shape(format!(
                "weighted_sum: {} coefficients for {} elements",
                weights.len(),
                x.data.len()
            )));
        }
        let mut total = T::zero();
        for (&v, &u) in x.data.iter().zip(weights.iter()) {
            total = total + v * u;
        }
        drop(x);
        let op = any_requires_grad(&[self]).then(|| Op::WeightedSum {
            input: self.clone(),
            weights: weights.to_vec(),
        });
        Ok(Tensor::from_parts(vec![1], vec![total], false, op))
    }
}

/// Push `node_grad` through `op` into the transient grad buffers of its parents.
pub(crate) fn backward_op<T: Scalar>(
    op: &Op<T>,
    node_data: &[T],
    node_grad: &[T],
    grads: &mut HashMap<u64, Vec<T>>,
) {
    match op {
        Op::Conv2d { input, weight, bias, stride, padding } => {
            conv2d_backward(input, weight, bias, *stride, *padding, node_grad, grads);
        }
        Op::MaxPool2d { input, argmax } => {
            let in_dims = input.dims();
            let (b, c, h, w, _) = batched_dims(&in_dims).expect("validated in forward");
            let plane_len = h * w;
            let out_plane = node_grad.len() / (b * c);
            let mut dx = vec![T::zero(); b * c * plane_len];
            for p in 0..b * c {
                let base = p * plane_len;
                for o in 0..out_plane {
                    let flat = p * out_plane + o;
                    dx[base + argmax[flat] as usize] += node_grad[flat];
                }
            }
            accumulate(grads, input, dx);
        }
        Op::Relu { input } => {
            let x = input.inner.borrow();
            let dx: Vec<T> = x
                .data
                .iter()
                .zip(node_grad.iter())
                .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                .collect();
            drop(x);
            accumulate(grads, input, dx);
        }
        Op::Sigmoid { input } => {
            // node_data holds y = sigmoid(x); dy/dx = y (1 - y).
            let dx: Vec<T> = node_data
                .iter()
                .zip(node_grad.iter())
                .map(|(&y, &g)| g * y * (T::one() - y))
                .collect();
            accumulate(grads, input, dx);
        }
        Op::Dropout { input, mask } => {
            let dx: Vec<T> = mask.iter().zip(node_grad.iter()).map(|(&m, &g)| m * g).collect();
            accumulate(grads, input, dx);
        }
        Op::Linear { input, weight, bias } => {
            linear_backward(input, weight, bias, node_grad, grads);
        }
        Op::Reshape { input } => {
            accumulate(grads, input, node_grad.to_vec());
        }
        Op::BceLoss { pred, target, clamp_eps } => {
            let g = node_grad[0];
            let p = pred.inner.borrow();
            let t = target.inner.borrow();
            let n = T::from_f64_lossy(p.data.len() as f64);
            let one = T::one();
            let dp: Vec<T> = p
                .data
                .iter()
                .zip(t.data.iter())
                .map(|(&pi, &ti)| {
                    // Clamp has zero slope outside its active range.
                    if pi < *clamp_eps || pi > one - *clamp_eps {
                        T::zero()
                    } else {
                        g * (pi - ti) / (pi * (one - pi) * n)
                    }
                })
                .collect();
            drop(p);
            drop(t);
            accumulate(grads, pred, dp);
        }
        Op::Sum { input } => {
            let g = node_grad[0];
            accumulate(grads, input, vec![g; input.len()]);
        }
        Op::WeightedSum { input, weights } => {
            let g = node_grad[0];
            accumulate(grads, input, weights.iter().map(|&u| g * u).collect());
        }
    }
}

fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    dy: &[T],
    grads: &mut HashMap<u64, Vec<T>>,
) {
    let in_dims = input.dims();
    let (b, ci, h, w, _) = batched_dims(&in_dims).expect("validated in forward");
    let w_dims = weight.dims();
    let (co, kh, kw) = (w_dims[0], w_dims[2], w_dims[3]);
    let g = ConvGeom {
        batch: b,
        ci,
        h,
        w,
        co,
        kh,
        kw,
        stride,
        padding,
        ho: conv_output_dim(h, kh, stride, padding),
        wo: conv_output_dim(w, kw, stride, padding),
    };
    let (cols, col_rows, sample_in, sample_out) = (g.cols(), g.col_rows(), g.sample_in(), g.sample_out());
    let group = g.group();
    let groups = sample_groups(b, group);

    if needs_grad(bias) {
        let mut db = vec![T::zero(); co];
        for bi in 0..b {
            for c in 0..co {
                let seg = &dy[bi * sample_out + c * cols..][..cols];
                let mut s = T::zero();
                for &v in seg {
                    s = s + v;
                }
                db[c] += s;
            }
        }
        accumulate(grads, bias, db);
    }

    if needs_grad(weight) {
        let x = input.inner.borrow();
        let x_data: &[T] = &x.data;
        // Per-group partial dW panels, reduced afterwards in group order.
        let partials: Vec<Vec<T>> = groups
            .par_iter()
            .map_init(
                || (Vec::new(), Vec::new()),
                |(col, dy_panel): &mut (Vec<T>, Vec<T>), &(lo, hi)| {
                    let n = hi - lo;
                    let width = n * cols;
                    col.resize(col_rows * width, T::zero());
                    for (j, bi) in (lo..hi).enumerate() {
                        im2col(&x_data[bi * sample_in..(bi + 1) * sample_in], col, g, width, j * cols);
                    }
                    let dy_g: &[T] = if n == 1 {
                        &dy[lo * sample_out..hi * sample_out]
                    } else {
                        dy_panel.resize(co * width, T::zero());
                        for (j, bi) in (lo..hi).enumerate() {
                            for c in 0..co {
                                dy_panel[c * width + j * cols..][..cols]
                                    .copy_from_slice(&dy[bi * sample_out + c * cols..][..cols]);
                            }
                        }
                        dy_panel
                    };
                    // dW_g = dy_g (co x width) @ col^T (width x col_rows)
                    let mut dw_local = vec![T::zero(); co * col_rows];
                    T::gemm_strided(
                        co, width, col_rows,
                        T::one(),
                        dy_g, width, 1,
                        col, 1, width,
                        T::zero(),
                        &mut dw_local, col_rows, 1,
                    );
                    dw_local
                },
            )
            .collect();
        drop(x);
        let mut dw = vec![T::zero(); co * col_rows];
        for part in &partials {
            for (d, p) in dw.iter_mut().zip(part.iter()) {
                *d += *p;
            }
        }
        accumulate(grads, weight, dw);
    }

    if needs_grad(input) {
        let wt = weight.inner.borrow();
        let w_data: &[T] = &wt.data;
        let mut dx = vec![T::zero(); b * sample_in];
        dx.par_chunks_mut(group * sample_in)
            .zip(groups.par_iter())
            .for_each_init(
                || (Vec::new(), Vec::new()),
                |(dcol, dy_panel): &mut (Vec<T>, Vec<T>), (dx_g, &(lo, hi))| {
                    let n = hi - lo;
                    let width = n * cols;
                    let dy_g: &[T] = if n == 1 {
                        &dy[lo * sample_out..hi * sample_out]
                    } else {
                        dy_panel.resize(co * width, T::zero());
                        for (j, bi) in (lo..hi).enumerate() {
                            for c in 0..co {
                                dy_panel[c * width + j * cols..][..cols]
                                    .copy_from_slice(&dy[bi * sample_out + c * cols..][..cols]);
                            }
                        }
                        dy_panel
                    };
                    // dcol = W^T (col_rows x co) @ dy_g (co x width)
                    dcol.resize(col_rows * width, T::zero());
                    T::gemm_strided(
                        col_rows, co, width,
                        T::one(),
                        w_data, 1, col_rows,
                        dy_g, width, 1,
                        T::zero(),
                        dcol, width, 1,
                    );
                    for (j, dx_s) in dx_g.chunks_mut(sample_in).enumerate().take(n) {
                        col2im_add(dcol, dx_s, g, width, j * cols);
                    }
                },
            );
        drop(wt);
        accumulate(grads, input, dx);
    }
}

fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dy: &[T],
    grads: &mut HashMap<u64, Vec<T>>,
) {
    let in_dims = input.dims();
    let (b, n_in) = match in_dims.as_slice() {
        [n] => (1usize, *n),
        [b, n] => (*b, *n),
        _ => unreachable!("validated in forward"),
    };
    let n_out = weight.dims()[0];

    if needs_grad(bias) {
        let mut db = vec![T::zero(); n_out];
        for row in dy.chunks(n_out) {
            for (d, &g) in db.iter_mut().zip(row.iter()) {
                *d += g;
            }
        }
        accumulate(grads, bias, db);
    }

    if needs_grad(weight) {
        let x = input.inner.borrow();
        let mut dw = vec![T::zero(); n_out * n_in];
        // dW = dY^T (n_out x b) @ X (b x n_in)
        T::gemm_strided(
            n_out, b, n_in,
            T::one(),
            dy, 1, n_out,
            &x.data, n_in, 1,
            T::zero(),
            &mut dw, n_in, 1,
        );
        drop(x);
        accumulate(grads, weight, dw);
    }

    if needs_grad(input) {
        let wt = weight.inner.borrow();
        let mut dx = vec![T::zero(); b * n_in];
        // dX = dY (b x n_out) @ W (n_out x n_in)
        T::gemm(b, n_out, n_in, T::one(), dy, &wt.data, T::zero(), &mut dx);
        drop(wt);
        accumulate(grads, input, dx);
    }
}
