//! Differentiable tensor helpers built from candle primitives.
//!
//! All functions work for `f32` and `f64` inputs; gradient checks run in `f64`.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{shape_err, Result};

/// Gathers the zero-padded `k×k` neighborhood of every location.
///
/// `(B, C, H, W)` → `(B, C, k·k, H, W)`; neighbor index is `dy·k + dx` with the window centered
/// on the location (offsets `-k/2..=k/2`).
pub fn neighborhoods(x: &Tensor, k: usize) -> Result<Tensor> {
    if k % 2 == 0 {
        return Err(shape_err!("neighborhood size must be odd, got {k}"));
    }
    let (_, _, h, w) = x.dims4()?;
    if k == 1 {
        return Ok(x.unsqueeze(2)?);
    }
    let r = k / 2;
    let padded = x.pad_with_zeros(2, r, r)?.pad_with_zeros(3, r, r)?;
    let mut views = Vec::with_capacity(k * k);
    for dy in 0..k {
        for dx in 0..k {
            views.push(padded.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    Ok(Tensor::stack(&views, 2)?)
}

/// Interpolation matrix of shape `(dst, src)` for 1-d linear resampling with aligned corners.
pub fn linear_interp_matrix(src: usize, dst: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut m = vec![0f64; dst * src];
    for i in 0..dst {
        let pos = if dst == 1 || src == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        m[i * src + lo] += 1.0 - frac;
        if hi != lo {
            m[i * src + hi] += frac;
        } else {
            m[i * src + lo] += frac;
        }
    }
    Ok(Tensor::from_vec(m, (dst, src), dev)?.to_dtype(dtype)?)
}

/// Bilinear resize with `align_corners = true`, expressed as two matrix products.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let (dtype, dev) = (x.dtype(), x.device());
    // matmul mis-handles stride-0 operands, so every operand is materialized first
    let aw = linear_interp_matrix(w, out_w, dtype, dev)?.t()?.contiguous()?;
    let ah = linear_interp_matrix(h, out_h, dtype, dev)?.t()?.contiguous()?;
    let rows = x.contiguous()?.reshape((b * c * h, w))?.matmul(&aw)?;
    let rows = rows
        .reshape((b * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * out_w, h))?;
    let out = rows.matmul(&ah)?.reshape((b * c, out_w, out_h))?;
    Ok(out
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, out_h, out_w))?)
}

/// Normalized coordinate channels: channel 0 varies along x, channel 1 along y, both in [-1, 1].
pub fn coord_channels(b: usize, h: usize, w: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let lin = |n: usize| -> Vec<f64> {
        if n == 1 {
            vec![0.0]
        } else {
            (0..n)
                .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
                .collect()
        }
    };
    let xs = lin(w);
    let ys = lin(h);
    let mut data = Vec::with_capacity(2 * h * w);
    for _ in 0..h {
        data.extend_from_slice(&xs);
    }
    for y in ys.iter() {
        data.extend(std::iter::repeat_n(*y, w));
    }
    let t = Tensor::from_vec(data, (1, 2, h, w), dev)?.to_dtype(dtype)?;
    Ok(t.broadcast_as((b, 2, h, w))?.contiguous()?)
}

/// `(B, C·s·s, H, W)` → `(B, C, H·s, W·s)`, channel index laid out as `c·s² + i·s + j`.
pub fn pixel_shuffle(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, cs, h, w) = x.dims4()?;
    if cs % (s * s) != 0 {
        return Err(shape_err!("pixel_shuffle: {cs} channels not divisible by {}", s * s));
    }
    let c = cs / (s * s);
    let x = x.reshape((b * c, s, s, h, w))?;
    // (bc, i, j, h, w) -> (bc, h, i, w, j)
    let x = x.permute((0, 3, 1, 4, 2))?.contiguous()?;
    Ok(x.reshape((b, c, h * s, w * s))?)
}

/// Nearest-neighbor upsampling by an integer factor, differentiable through broadcast.
pub fn repeat_nearest(x: &Tensor, s: usize) -> Result<Tensor> {
    if s == 1 {
        return Ok(x.clone());
    }
    let dims = x.dims().to_vec();
    let n = dims.len();
    if n < 2 {
        return Err(shape_err!("repeat_nearest needs at least 2 dims"));
    }
    let (h, w) = (dims[n - 2], dims[n - 1]);
    let lead: Vec<usize> = dims[..n - 2].to_vec();
    let mut expanded = lead.clone();
    expanded.extend_from_slice(&[h, 1, w, 1]);
    let mut target = lead.clone();
    target.extend_from_slice(&[h, s, w, s]);
    let mut out = lead;
    out.extend_from_slice(&[h * s, w * s]);
    Ok(x
        .reshape(expanded)?
        .broadcast_as(target)?
        .contiguous()?
        .reshape(out)?)
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Mean binary cross-entropy on logits: `max(x,0) − x·y + ln(1 + e^{−|x|})`.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.dims() != target.dims() {
        return Err(shape_err!(
            "logits {:?} vs target {:?}",
            logits.dims(),
            target.dims()
        ));
    }
    let pos = logits.relu()?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let per_pixel = ((pos - logits.mul(target)?)? + soft)?;
    Ok(per_pixel.mean_all()?)
}

pub fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&sigmoid(&(x * 1.702)?)?)?)
}

/// Largest absolute element.
pub fn max_abs(x: &Tensor) -> Result<f64> {
    Ok(x
        .abs()?
        .flatten_all()?
        .max(D::Minus1)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}
