//! Forward computations for every primitive op. Pure functions over value
//! tensors; shape validation happens here so the trace builders stay thin.

use super::{broadcast_shape, strides, Tensor};
use crate::error::{Error, Result};
use crate::math;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

fn map_checked(x: &Tensor, f: impl Fn(f64) -> Result<f64>) -> Result<Tensor> {
    let mut data = Vec::with_capacity(x.numel());
    for &v in x.data() {
        data.push(f(v)?);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "elementwise op on {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<f64> =
        a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip(a, b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.data().iter().any(|&v| v == 0.0) {
        return Err(Error::Domain("division by zero"));
    }
    zip(a, b, |x, y| x / y)
}

pub fn neg(x: &Tensor) -> Tensor {
    map(x, |v| -v)
}

pub fn exp(x: &Tensor) -> Tensor {
    map(x, math::exp)
}

pub fn log(x: &Tensor) -> Result<Tensor> {
    map_checked(x, |v| {
        if v <= 0.0 {
            Err(Error::Domain("log of non-positive value"))
        } else {
            Ok(math::ln(v))
        }
    })
}

pub fn sqrt(x: &Tensor) -> Result<Tensor> {
    map_checked(x, |v| {
        if v < 0.0 {
            Err(Error::Domain("sqrt of negative value"))
        } else {
            Ok(math::sqrt(v))
        }
    })
}

pub fn abs(x: &Tensor) -> Tensor {
    map(x, math::abs)
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| if v > 0.0 { v } else { 0.0 })
}

pub fn sign(x: &Tensor) -> Tensor {
    map(x, math::sign)
}

/// 1 where x > 0, else 0. Subgradient convention: 0 at the kink.
pub fn step_mask(x: &Tensor) -> Tensor {
    map(x, |v| if v > 0.0 { 1.0 } else { 0.0 })
}

pub fn scale(x: &Tensor, c: f64) -> Tensor {
    map(x, |v| c * v)
}

/// 2-D matrix multiply with transpose flags: `op(a) @ op(b)`.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul needs rank-2 tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = if ta { (a.shape()[1], a.shape()[0]) } else { (a.shape()[0], a.shape()[1]) };
    let (kb, n) = if tb { (b.shape()[1], b.shape()[0]) } else { (b.shape()[0], b.shape()[1]) };
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner dims: {:?}{} vs {:?}{}",
            a.shape(),
            if ta { "ᵀ" } else { "" },
            b.shape(),
            if tb { "ᵀ" } else { "" }
        )));
    }
    let k = ka;
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f64; m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (l, &av) in arow.iter().enumerate() {
                    if av != 0.0 {
                        let brow = &bd[l * n..(l + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &ad[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (&x, &y) in arow.iter().zip(brow) {
                        s += x * y;
                    }
                    out[i * n + j] = s;
                }
            }
        }
        (true, false) => {
            // a is k x m
            for l in 0..k {
                let arow = &ad[l * m..(l + 1) * m];
                let brow = &bd[l * n..(l + 1) * n];
                for (i, &av) in arow.iter().enumerate() {
                    if av != 0.0 {
                        let orow = &mut out[i * n..(i + 1) * n];
                        for (o, &bv) in orow.iter_mut().zip(brow) {
                            *o += av * bv;
                        }
                    }
                }
            }
        }
        (true, true) => {
            // a is k x m, b is n x k
            for i in 0..m {
                for j in 0..n {
                    let brow = &bd[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (l, &bv) in brow.iter().enumerate() {
                        s += ad[l * m + i] * bv;
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn conv_check(x: &Tensor, w: &Tensor) -> Result<()> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d needs rank-4 input and kernel, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if x.shape()[1] != w.shape()[1] {
        return Err(Error::shape(format!(
            "conv2d channels: input {:?} vs kernel {:?}",
            x.shape(),
            w.shape()
        )));
    }
    Ok(())
}

pub fn conv2d_out_shape(
    xshape: &[usize],
    wshape: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Vec<usize>> {
    let (h, wdt) = (xshape[2], xshape[3]);
    let (kh, kw) = (wshape[2], wshape[3]);
    if stride == 0 {
        return Err(Error::spec("conv2d stride must be >= 1"));
    }
    if h + 2 * pad < kh || wdt + 2 * pad < kw {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            wdt + 2 * pad
        )));
    }
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wdt + 2 * pad - kw) / stride + 1;
    Ok(vec![xshape[0], wshape[0], ho, wo])
}

/// 2-D convolution (cross-correlation), zero padding.
/// x: [B, Ci, H, W], w: [Co, Ci, kh, kw] -> [B, Co, Ho, Wo].
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv_check(x, w)?;
    let os = conv2d_out_shape(x.shape(), w.shape(), stride, pad)?;
    let (bs, ci_n, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co_n, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (os[2], os[3]);
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0f64; bs * co_n * ho * wo];
    let ip = pad as isize;
    for b in 0..bs {
        for co in 0..co_n {
            let obase = (b * co_n + co) * ho * wo;
            for ci in 0..ci_n {
                let xc = &xd[(b * ci_n + ci) * h * wdt..][..h * wdt];
                let wc = &wd[(co * ci_n + ci) * kh * kw..][..kh * kw];
                for i in 0..ho {
                    let orow = &mut out[obase + i * wo..][..wo];
                    for dh in 0..kh {
                        let hy = (i * stride + dh) as isize - ip;
                        if hy < 0 || hy >= h as isize {
                            continue;
                        }
                        let xrow = &xc[hy as usize * wdt..][..wdt];
                        for dw in 0..kw {
                            let wv = wc[dh * kw + dw];
                            if wv == 0.0 {
                                continue;
                            }
                            if stride == 1 {
                                // x column = j + dw - pad, contiguous in j
                                let off = dw as isize - ip;
                                let j0 = (-off).max(0) as usize;
                                let j1 = wo.min((wdt as isize - off).max(0) as usize);
                                for j in j0..j1 {
                                    orow[j] += wv * xrow[(j as isize + off) as usize];
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    let wx = (j * stride + dw) as isize - ip;
                                    if wx >= 0 && wx < wdt as isize {
                                        *o += wv * xrow[wx as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os, out)
}

/// Gradient of conv2d w.r.t. its input: scatter `g` through the kernel.
/// g: [B, Co, Ho, Wo], w: [Co, Ci, kh, kw] -> xshape.
pub fn conv2d_dx(
    g: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    xshape: &[usize],
) -> Result<Tensor> {
    let os = conv2d_out_shape(xshape, w.shape(), stride, pad)?;
    if g.shape() != os.as_slice() {
        return Err(Error::shape(format!(
            "conv2d_dx cotangent {:?} vs expected {:?}",
            g.shape(),
            os
        )));
    }
    let (bs, ci_n, h, wdt) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (co_n, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (os[2], os[3]);
    let gd = g.data();
    let wd = w.data();
    let mut out = vec![0.0f64; bs * ci_n * h * wdt];
    let ip = pad as isize;
    for b in 0..bs {
        for co in 0..co_n {
            let gc = &gd[(b * co_n + co) * ho * wo..][..ho * wo];
            for ci in 0..ci_n {
                let xc = &mut out[(b * ci_n + ci) * h * wdt..][..h * wdt];
                let wc = &wd[(co * ci_n + ci) * kh * kw..][..kh * kw];
                for i in 0..ho {
                    let grow = &gc[i * wo..][..wo];
                    for dh in 0..kh {
                        let hy = (i * stride + dh) as isize - ip;
                        if hy < 0 || hy >= h as isize {
                            continue;
                        }
                        let xrow = &mut xc[hy as usize * wdt..][..wdt];
                        for dw in 0..kw {
                            let wv = wc[dh * kw + dw];
                            if wv == 0.0 {
                                continue;
                            }
                            if stride == 1 {
                                let off = dw as isize - ip;
                                let j0 = (-off).max(0) as usize;
                                let j1 = wo.min((wdt as isize - off).max(0) as usize);
                                for j in j0..j1 {
                                    xrow[(j as isize + off) as usize] += wv * grow[j];
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let wx = (j * stride + dw) as isize - ip;
                                    if wx >= 0 && wx < wdt as isize {
                                        xrow[wx as usize] += wv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(xshape.to_vec(), out)
}

/// Gradient of conv2d w.r.t. its kernel.
/// g: [B, Co, Ho, Wo], x: [B, Ci, H, W] -> wshape.
pub fn conv2d_dw(
    g: &Tensor,
    x: &Tensor,
    stride: usize,
    pad: usize,
    wshape: &[usize],
) -> Result<Tensor> {
    let os = conv2d_out_shape(x.shape(), wshape, stride, pad)?;
    if g.shape() != os.as_slice() {
        return Err(Error::shape(format!(
            "conv2d_dw cotangent {:?} vs expected {:?}",
            g.shape(),
            os
        )));
    }
    let (bs, ci_n, h, wdt) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co_n, _, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
    let (ho, wo) = (os[2], os[3]);
    let gd = g.data();
    let xd = x.data();
    let mut out = vec![0.0f64; co_n * ci_n * kh * kw];
    let ip = pad as isize;
    for b in 0..bs {
        for co in 0..co_n {
            let gc = &gd[(b * co_n + co) * ho * wo..][..ho * wo];
            for ci in 0..ci_n {
                let xc = &xd[(b * ci_n + ci) * h * wdt..][..h * wdt];
                let wc = &mut out[(co * ci_n + ci) * kh * kw..][..kh * kw];
                for i in 0..ho {
                    let grow = &gc[i * wo..][..wo];
                    for dh in 0..kh {
                        let hy = (i * stride + dh) as isize - ip;
                        if hy < 0 || hy >= h as isize {
                            continue;
                        }
                        let xrow = &xc[hy as usize * wdt..][..wdt];
                        for dw in 0..kw {
                            let mut s = 0.0;
                            if stride == 1 {
                                let off = dw as isize - ip;
                                let j0 = (-off).max(0) as usize;
                                let j1 = wo.min((wdt as isize - off).max(0) as usize);
                                for j in j0..j1 {
                                    s += grow[j] * xrow[(j as isize + off) as usize];
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let wx = (j * stride + dw) as isize - ip;
                                    if wx >= 0 && wx < wdt as isize {
                                        s += gv * xrow[wx as usize];
                                    }
                                }
                            }
                            wc[dh * kw + dw] += s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(wshape.to_vec(), out)
}

/// Non-overlapping k x k average pooling, stride k.
pub fn avg_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape(format!("avgpool2d needs rank-4 input, got {:?}", x.shape())));
    }
    if k == 0 {
        return Err(Error::spec("avgpool2d window must be >= 1"));
    }
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if h % k != 0 || w % k != 0 {
        return Err(Error::shape(format!("avgpool2d window {k} does not divide {h}x{w}")));
    }
    let (ho, wo) = (h / k, w / k);
    let xd = x.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0f64; bs * c * ho * wo];
    for bc in 0..bs * c {
        let xc = &xd[bc * h * w..][..h * w];
        let oc = &mut out[bc * ho * wo..][..ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for di in 0..k {
                    let row = &xc[(i * k + di) * w + j * k..][..k];
                    for &v in row {
                        s += v;
                    }
                }
                oc[i * wo + j] = s * inv;
            }
        }
    }
    Tensor::new(vec![bs, c, ho, wo], out)
}

/// Adjoint of avg_pool2d: spread each cotangent cell evenly over its window.
pub fn avg_unpool2d(g: &Tensor, k: usize) -> Result<Tensor> {
    if g.rank() != 4 {
        return Err(Error::shape(format!("avg_unpool2d needs rank-4 input, got {:?}", g.shape())));
    }
    let (bs, c, ho, wo) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let (h, w) = (ho * k, wo * k);
    let gd = g.data();
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0f64; bs * c * h * w];
    for bc in 0..bs * c {
        let gc = &gd[bc * ho * wo..][..ho * wo];
        let oc = &mut out[bc * h * w..][..h * w];
        for i in 0..ho {
            for j in 0..wo {
                let v = gc[i * wo + j] * inv;
                for di in 0..k {
                    let row = &mut oc[(i * k + di) * w + j * k..][..k];
                    for o in row {
                        *o = v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![bs, c, h, w], out)
}

/// Materialize a broadcast to `shape` (right-aligned, 1-extended).
pub fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let bs = broadcast_shape(x.shape(), shape)?;
    if bs != shape {
        return Err(Error::shape(format!(
            "cannot broadcast {:?} to {:?}",
            x.shape(),
            shape
        )));
    }
    if x.shape() == shape {
        return Ok(x.clone());
    }
    let rank = shape.len();
    let pad = rank - x.rank();
    let padded: Vec<usize> = (0..rank)
        .map(|i| if i < pad { 1 } else { x.shape()[i - pad] })
        .collect();
    let in_strides = strides(&padded);
    let xd = x.data();
    let n: usize = shape.iter().product();
    let mut out = vec![0.0f64; n];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = xd[src];
        // increment the multi-index, tracking the source offset
        for d in (0..rank).rev() {
            idx[d] += 1;
            if padded[d] != 1 {
                src += in_strides[d];
            }
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            if padded[d] != 1 {
                src -= in_strides[d] * shape[d];
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Output shape of a reduction; `keep` retains reduced dims as 1.
pub fn reduce_shape(shape: &[usize], axes: Option<&[usize]>, keep: bool) -> Result<Vec<usize>> {
    match axes {
        None => Ok(if keep { vec![1; shape.len()] } else { Vec::new() }),
        Some(axes) => {
            for &a in axes {
                if a >= shape.len() {
                    return Err(Error::shape(format!("reduce axis {a} out of range for {shape:?}")));
                }
            }
            let mut out = Vec::new();
            for (d, &e) in shape.iter().enumerate() {
                if axes.contains(&d) {
                    if keep {
                        out.push(1);
                    }
                } else {
                    out.push(e);
                }
            }
            Ok(out)
        }
    }
}

/// Sum over the given axes (all axes when `None`).
pub fn sum(x: &Tensor, axes: Option<&[usize]>, keep: bool) -> Result<Tensor> {
    let oshape = reduce_shape(x.shape(), axes, keep)?;
    match axes {
        None => {
            let mut s = 0.0;
            for &v in x.data() {
                s += v;
            }
            Ok(Tensor::from_parts(oshape, vec![s]))
        }
        Some(axes) => {
            let rank = x.rank();
            let shape = x.shape();
            // output strides aligned to input dims (0 stride on reduced dims)
            let full_keep: Vec<usize> = (0..rank)
                .map(|d| if axes.contains(&d) { 1 } else { shape[d] })
                .collect();
            let keep_strides = strides(&full_keep);
            let mut ostrides = vec![0usize; rank];
            for d in 0..rank {
                if !axes.contains(&d) {
                    ostrides[d] = keep_strides[d];
                }
            }
            let n_out: usize = full_keep.iter().product();
            let mut out = vec![0.0f64; n_out];
            let xd = x.data();
            let mut idx = vec![0usize; rank];
            let mut dst = 0usize;
            for &v in xd {
                out[dst] += v;
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    dst += ostrides[d];
                    if idx[d] < shape[d] {
                        break;
                    }
                    idx[d] = 0;
                    dst -= ostrides[d] * shape[d];
                }
            }
            Ok(Tensor::from_parts(oshape, out))
        }
    }
}

pub fn reduce_count(shape: &[usize], axes: Option<&[usize]>) -> usize {
    match axes {
        None => shape.iter().product::<usize>().max(1),
        Some(axes) => axes.iter().map(|&a| shape[a]).product::<usize>().max(1),
    }
}

pub fn mean(x: &Tensor, axes: Option<&[usize]>, keep: bool) -> Result<Tensor> {
    let count = reduce_count(x.shape(), axes);
    Ok(scale(&sum(x, axes, keep)?, 1.0 / count as f64))
}

/// Zero-pad along every axis by `(before, after)`.
pub fn pad(x: &Tensor, before: &[usize], after: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    if before.len() != rank || after.len() != rank {
        return Err(Error::shape(format!(
            "pad spec length {} / {} vs rank {}",
            before.len(),
            after.len(),
            rank
        )));
    }
    let oshape: Vec<usize> =
        (0..rank).map(|d| before[d] + x.shape()[d] + after[d]).collect();
    let mut out = vec![0.0f64; oshape.iter().product()];
    copy_block(x.data(), x.shape(), &mut out, &oshape, before, true);
    Tensor::new(oshape, out)
}

/// Slice `len[d]` elements starting at `start[d]` along every axis.
pub fn slice(x: &Tensor, start: &[usize], len: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    if start.len() != rank || len.len() != rank {
        return Err(Error::shape(format!(
            "slice spec length {} / {} vs rank {}",
            start.len(),
            len.len(),
            rank
        )));
    }
    for d in 0..rank {
        if start[d] + len[d] > x.shape()[d] {
            return Err(Error::shape(format!(
                "slice [{}..{}] out of range on axis {d} of {:?}",
                start[d],
                start[d] + len[d],
                x.shape()
            )));
        }
    }
    let mut out = vec![0.0f64; len.iter().product()];
    copy_block(x.data(), x.shape(), &mut out, len, start, false);
    Tensor::new(len.to_vec(), out)
}

/// Copy a dense block between a small and a large tensor; `into_large`
/// controls the direction. `offset` locates the block inside the large one.
fn copy_block(
    src: &[f64],
    small_or_src_shape: &[usize],
    dst: &mut [f64],
    dst_shape: &[usize],
    offset: &[usize],
    into_large: bool,
) {
    let (small_shape, large_shape) =
        if into_large { (small_or_src_shape, dst_shape) } else { (dst_shape, small_or_src_shape) };
    let rank = small_shape.len();
    if rank == 0 {
        dst[0] = src[0];
        return;
    }
    let large_strides = strides(large_shape);
    let base: usize = (0..rank).map(|d| offset[d] * large_strides[d]).sum();
    let rows: usize = small_shape[..rank - 1].iter().product();
    let rowlen = small_shape[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    for r in 0..rows {
        let mut large_off = base;
        for d in 0..rank - 1 {
            large_off += idx[d] * large_strides[d];
        }
        let small_off = r * rowlen;
        if into_large {
            dst[large_off..large_off + rowlen].copy_from_slice(&src[small_off..small_off + rowlen]);
        } else {
            dst[small_off..small_off + rowlen].copy_from_slice(&src[large_off..large_off + rowlen]);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < small_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::shape("concat of empty list"));
    }
    let rank = xs[0].rank();
    if axis >= rank {
        return Err(Error::shape(format!("concat axis {axis} out of range for rank {rank}")));
    }
    let mut axis_total = 0;
    for x in xs {
        if x.rank() != rank {
            return Err(Error::shape("concat rank mismatch"));
        }
        for d in 0..rank {
            if d != axis && x.shape()[d] != xs[0].shape()[d] {
                return Err(Error::shape(format!(
                    "concat shape mismatch on axis {d}: {:?} vs {:?}",
                    x.shape(),
                    xs[0].shape()
                )));
            }
        }
        axis_total += x.shape()[axis];
    }
    let mut oshape = xs[0].shape().to_vec();
    oshape[axis] = axis_total;
    let mut out = vec![0.0f64; oshape.iter().product()];
    let mut offset = 0;
    for x in xs {
        let mut start = vec![0usize; rank];
        start[axis] = offset;
        copy_block(x.data(), x.shape(), &mut out, &oshape, &start, true);
        offset += x.shape()[axis];
    }
    Tensor::new(oshape, out)
}
