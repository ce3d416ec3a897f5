//! Raw forward kernels shared by the differentiation graph and the tests.
//!
//! Everything here is a pure function over [`Tensor`] values. Output elements
//! are independent, so the hot loops parallelize over rows without changing
//! the bit pattern of the result.

use rayon::prelude::*;

use super::{Element, Result, Tensor, TensorError};

/// Tanh-approximation constant for GELU.
pub const GELU_CUBIC: f64 = 0.044715;
/// sqrt(2/pi), the other GELU constant.
pub const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

// ── Scalar nonlinearities ────────────────────────────────────────────

/// GELU via the tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu_scalar<T: Element>(x: T) -> T {
    let c0 = T::from_f64(GELU_SCALE);
    let c1 = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (T::ONE + u.tanh())
}

pub fn gelu_prime_scalar<T: Element>(x: T) -> T {
    let c0 = T::from_f64(GELU_SCALE);
    let c1 = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c0 * (T::ONE + three * c1 * x * x)
}

pub fn sigmoid_scalar<T: Element>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// ln(1 + eˣ), stable for large |x|.
pub fn softplus_scalar<T: Element>(x: T) -> T {
    x.maxv(T::ZERO) + (-x.abs()).exp().ln_1p()
}

pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

// ── Matrix products ──────────────────────────────────────────────────

fn check_rank2<T: Element>(t: &Tensor<T>, context: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::RankMismatch {
            context,
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// C[m,n] = A[m,k] · B[k,n].
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_rank2(a, "matmul")?;
    let (kb, n) = check_rank2(b, "matmul")?;
    if k != kb {
        return Err(TensorError::DimensionMismatch {
            context: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::ZERO; m * n];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                *r += av * brow[j];
            }
        }
    });
    Tensor::new(vec![m, n], out)
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_rank2(a, "matmul_nt")?;
    let (n, kb) = check_rank2(b, "matmul_nt")?;
    if k != kb {
        return Err(TensorError::DimensionMismatch {
            context: "matmul_nt",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::ZERO; m * n];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, r) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut s = T::ZERO;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            *r = s;
        }
    });
    Tensor::new(vec![m, n], out)
}

/// C[k,n] = A[m,k]ᵀ · B[m,n].
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = check_rank2(a, "matmul_tn")?;
    let (mb, n) = check_rank2(b, "matmul_tn")?;
    if m != mb {
        return Err(TensorError::DimensionMismatch {
            context: "matmul_tn",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![T::ZERO; k * n];
    let (ad, bd) = (a.data(), b.data());
    out.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        for i in 0..m {
            let av = ad[i * k + p];
            let brow = &bd[i * n..(i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                *r += av * brow[j];
            }
        }
    });
    Tensor::new(vec![k, n], out)
}

// ── Normalization and softmax ────────────────────────────────────────

/// Layer normalization over the last axis, returning per-row (mean, rstd)
/// alongside the output for reuse in the backward pass.
pub fn layernorm_with_stats<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let d = *x.shape().last().ok_or(TensorError::EmptyAxis {
        context: "layernorm",
    })?;
    if d == 0 {
        return Err(TensorError::EmptyAxis {
            context: "layernorm",
        });
    }
    if eps <= 0.0 {
        return Err(TensorError::InvalidArgument {
            context: "layernorm",
            message: format!("eps must be positive, got {eps}"),
        });
    }
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::DimensionMismatch {
            context: "layernorm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let rows = x.numel() / d;
    let inv_d = T::from_f64(1.0 / d as f64);
    let epsv = T::from_f64(eps);
    let mut out = vec![T::ZERO; x.numel()];
    let mut means = vec![T::ZERO; rows];
    let mut rstds = vec![T::ZERO; rows];
    let (g, b, xd) = (gamma.data(), beta.data(), x.data());
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean * inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var * inv_d;
        let rstd = T::ONE / (var + epsv).sqrt();
        means[r] = mean;
        rstds[r] = rstd;
        for j in 0..d {
            out[r * d + j] = g[j] * (row[j] - mean) * rstd + b[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, means, rstds))
}

pub fn layernorm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    layernorm_with_stats(x, gamma, beta, eps).map(|(y, _, _)| y)
}

/// Row-wise softmax over the last axis, max-shifted for stability.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or(TensorError::EmptyAxis {
        context: "softmax",
    })?;
    if d == 0 {
        return Err(TensorError::EmptyAxis { context: "softmax" });
    }
    let rows = x.numel() / d;
    let mut out = vec![T::ZERO; x.numel()];
    let xd = x.data();
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mut mx = row[0];
        for &v in row {
            mx = mx.maxv(v);
        }
        let mut sum = T::ZERO;
        for j in 0..d {
            let e = (row[j] - mx).exp();
            out[r * d + j] = e;
            sum += e;
        }
        for j in 0..d {
            out[r * d + j] = out[r * d + j] / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

// ── Trilinear sampling ───────────────────────────────────────────────

/// One sample's corner decomposition, shared between forward and backward.
/// `lo`/`hi` are the clamped lattice cells per axis, `frac` the in-cell
/// offset, and `clamped` marks axes whose coordinate fell outside the box
/// (their gradient is defined as zero).
pub(crate) struct TrilinearCell<T> {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub frac: [T; 3],
    pub clamped: [bool; 3],
}

pub(crate) fn trilinear_cell<T: Element>(extents: [usize; 3], coord: [T; 3]) -> TrilinearCell<T> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [T::ZERO; 3];
    let mut clamped = [false; 3];
    for ax in 0..3 {
        let limit = T::from_f64((extents[ax] - 1) as f64);
        let c = coord[ax];
        let cc = c.maxv(T::ZERO).minv(limit);
        clamped[ax] = cc != c;
        let f = cc.floor();
        let i0 = f.to_f64() as usize;
        let i1 = (i0 + 1).min(extents[ax] - 1);
        lo[ax] = i0;
        hi[ax] = i1;
        frac[ax] = cc - f;
    }
    TrilinearCell {
        lo,
        hi,
        frac,
        clamped,
    }
}

/// 8-corner trilinear interpolation of `vol[D,H,W]` at `coords[n,3]` rows
/// of (z, y, x). Out-of-range coordinates are clamped to the volume box.
pub fn trilinear_sample<T: Element>(vol: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    if vol.rank() != 3 {
        return Err(TensorError::RankMismatch {
            context: "trilinear_sample",
            expected: 3,
            shape: vol.shape().to_vec(),
        });
    }
    if vol.shape().iter().any(|&e| e == 0) {
        return Err(TensorError::DimensionMismatch {
            context: "trilinear_sample: empty volume",
            left: vol.shape().to_vec(),
            right: coords.shape().to_vec(),
        });
    }
    if coords.rank() != 2 || coords.shape()[1] != 3 {
        return Err(TensorError::RankMismatch {
            context: "trilinear_sample: coords must be [n,3]",
            expected: 2,
            shape: coords.shape().to_vec(),
        });
    }
    if !coords.all_finite() {
        return Err(TensorError::NonFinite {
            context: "trilinear_sample: coords",
        });
    }
    let extents = [vol.shape()[0], vol.shape()[1], vol.shape()[2]];
    let (h, w) = (extents[1], extents[2]);
    let n = coords.shape()[0];
    let vd = vol.data();
    let cd = coords.data();
    let mut out = vec![T::ZERO; n];
    out.par_iter_mut().enumerate().for_each(|(i, o)| {
        let cell = trilinear_cell(extents, [cd[3 * i], cd[3 * i + 1], cd[3 * i + 2]]);
        let [fz, fy, fx] = cell.frac;
        let wz = [T::ONE - fz, fz];
        let wy = [T::ONE - fy, fy];
        let wx = [T::ONE - fx, fx];
        let zi = [cell.lo[0], cell.hi[0]];
        let yi = [cell.lo[1], cell.hi[1]];
        let xi = [cell.lo[2], cell.hi[2]];
        let v = |z: usize, y: usize, x: usize| vd[(z * h + y) * w + x];
        // Grouping chosen so the float result is invariant under swapping
        // the y and x axes: per z level, the two mixed corners pair up and
        // every weight product multiplies as wz·(wy·wx).
        let mut total = T::ZERO;
        for b in 0..2 {
            let t00 = wz[b] * (wy[0] * wx[0]) * v(zi[b], yi[0], xi[0]);
            let t01 = wz[b] * (wy[0] * wx[1]) * v(zi[b], yi[0], xi[1]);
            let t10 = wz[b] * (wy[1] * wx[0]) * v(zi[b], yi[1], xi[0]);
            let t11 = wz[b] * (wy[1] * wx[1]) * v(zi[b], yi[1], xi[1]);
            total += (t00 + t11) + (t01 + t10);
        }
        *o = total;
    });
    Tensor::new(vec![n], out)
}

// ── Convolutions and resampling for the block/token paths ────────────

/// Patch-style valid 3D convolution: the kernel spans the full input depth
/// and strides in-plane, collapsing each patch to one output position.
/// Input `[D,H,W]`, weight `[K,D,kh,kw]`, output `[A,K]` with anchors
/// enumerated row-major over the (h, w) patch grid.
pub fn patch_conv3d<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride_h: usize,
    stride_w: usize,
) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(TensorError::RankMismatch {
            context: "patch_conv3d: input",
            expected: 3,
            shape: input.shape().to_vec(),
        });
    }
    if weight.rank() != 4 {
        return Err(TensorError::RankMismatch {
            context: "patch_conv3d: weight",
            expected: 4,
            shape: weight.shape().to_vec(),
        });
    }
    let (d, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, kd, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if kd != d || kh > h || kw > w || stride_h == 0 || stride_w == 0 {
        return Err(TensorError::DimensionMismatch {
            context: "patch_conv3d",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let oh = (h - kh) / stride_h + 1;
    let ow = (w - kw) / stride_w + 1;
    let anchors = oh * ow;
    let mut out = vec![T::ZERO; anchors * k];
    let (id, wd) = (input.data(), weight.data());
    out.par_chunks_mut(k).enumerate().for_each(|(a, row)| {
        let base_h = (a / ow) * stride_h;
        let base_w = (a % ow) * stride_w;
        for (o, r) in row.iter_mut().enumerate() {
            let mut s = T::ZERO;
            for zz in 0..kd {
                for yy in 0..kh {
                    let irow = (zz * h + base_h + yy) * w + base_w;
                    let wrow = ((o * kd + zz) * kh + yy) * kw;
                    for xx in 0..kw {
                        s += id[irow + xx] * wd[wrow + xx];
                    }
                }
            }
            *r = s;
        }
    });
    Tensor::new(vec![anchors, k], out)
}

/// Zero-padded "same" 2D convolution: input `[C,H,W]`, weight `[O,C,kh,kw]`
/// with odd kernel extents, bias `[O]`, output `[O,H,W]`.
pub fn conv2d_same<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if input.rank() != 3 || weight.rank() != 4 {
        return Err(TensorError::RankMismatch {
            context: "conv2d_same",
            expected: 3,
            shape: input.shape().to_vec(),
        });
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (o, wc, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc != c || kh % 2 == 0 || kw % 2 == 0 || bias.shape() != [o] {
        return Err(TensorError::DimensionMismatch {
            context: "conv2d_same",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![T::ZERO; o * h * w];
    let (id, wd, bd) = (input.data(), weight.data(), bias.data());
    out.par_chunks_mut(h * w).enumerate().for_each(|(oc, plane)| {
        for y in 0..h {
            for x in 0..w {
                let mut s = bd[oc];
                for ic in 0..c {
                    for ky in 0..kh {
                        let iy = y as isize + ky as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = x as isize + kx as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            s += id[(ic * h + iy as usize) * w + ix as usize]
                                * wd[((oc * c + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                plane[y * w + x] = s;
            }
        }
    });
    Tensor::new(vec![o, h, w], out)
}

/// Nearest-neighbor upsampling of `[C,H,W]` by an integer factor in-plane.
pub fn upsample_nearest2<T: Element>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(TensorError::RankMismatch {
            context: "upsample_nearest2",
            expected: 3,
            shape: input.shape().to_vec(),
        });
    }
    if factor == 0 {
        return Err(TensorError::InvalidArgument {
            context: "upsample_nearest2",
            message: "factor must be >= 1".into(),
        });
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::ZERO; c * oh * ow];
    let id = input.data();
    for ic in 0..c {
        for y in 0..oh {
            let sy = y / factor;
            for x in 0..ow {
                out[(ic * oh + y) * ow + x] = id[(ic * h + sy) * w + x / factor];
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Replication padding of `[D,H,W]` at the far (high-index) edges in-plane.
pub fn pad_replicate_hw<T: Element>(
    input: &Tensor<T>,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(TensorError::RankMismatch {
            context: "pad_replicate_hw",
            expected: 3,
            shape: input.shape().to_vec(),
        });
    }
    let (d, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if target_h < h || target_w < w {
        return Err(TensorError::InvalidArgument {
            context: "pad_replicate_hw",
            message: format!("target ({target_h},{target_w}) smaller than input ({h},{w})"),
        });
    }
    let mut out = vec![T::ZERO; d * target_h * target_w];
    let id = input.data();
    for z in 0..d {
        for y in 0..target_h {
            let sy = y.min(h - 1);
            for x in 0..target_w {
                out[(z * target_h + y) * target_w + x] = id[(z * h + sy) * w + x.min(w - 1)];
            }
        }
    }
    Tensor::new(vec![d, target_h, target_w], out)
}

/// Crops `[C,H,W]` to `[C,out_h,out_w]` keeping the low-index corner.
pub fn crop_hw<T: Element>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(TensorError::RankMismatch {
            context: "crop_hw",
            expected: 3,
            shape: input.shape().to_vec(),
        });
    }
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if out_h > h || out_w > w {
        return Err(TensorError::InvalidArgument {
            context: "crop_hw",
            message: format!("crop ({out_h},{out_w}) larger than input ({h},{w})"),
        });
    }
    let mut out = vec![T::ZERO; c * out_h * out_w];
    let id = input.data();
    for ic in 0..c {
        for y in 0..out_h {
            for x in 0..out_w {
                out[(ic * out_h + y) * out_w + x] = id[(ic * h + y) * w + x];
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
