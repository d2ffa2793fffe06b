//! Forward and backward kernels on channel-major `[C, H, W]` tensors.
//!
//! The tape and the standalone inference helpers call the same forward
//! kernels, which keeps training-time and inference-time values bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = beta * c + op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `max(x, 0)`
    #[default]
    Relu,
    /// `ln(1 + e^x)`; smooth and nonnegative, used for gradient checks.
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * w..row + (oy + 1) * w];
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    for ox in lo..hi {
                        dst[ox] = src[(ox as isize + shift) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ci in 0..c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * w..row + (oy + 1) * w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    for ox in lo..hi {
                        dst[(ox as isize + shift) as usize] += src[ox];
                    }
                }
            }
        }
    }
    x
}

/// Same-padded, stride-1 convolution. `w` is `[Cout, Cin, k, k]` with odd `k`.
/// Returns the output and the unfolded input needed by [`conv2d_backward`].
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (c, h, w) = x.dims3()?;
    let (cout, cin, k) = match weight.shape()[..] {
        [co, ci, kh, kw] if kh == kw && kh % 2 == 1 => (co, ci, kh),
        _ => return Err(Error::Shape(format!("bad conv kernel {:?}", weight.shape()))),
    };
    if cin != c {
        return Err(Error::Shape(format!("conv expects {cin} input channels, got {c}")));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!("conv bias {:?} for {cout} outputs", bias.shape())));
    }
    let hw = h * w;
    let kk = cin * k * k;
    let cols = if k == 1 { x.data().to_vec() } else { im2col(x.data(), c, h, w, k) };
    let mut out = vec![0.0; cout * hw];
    for (o, chunk) in out.chunks_mut(hw).enumerate() {
        chunk.fill(bias.data()[o]);
    }
    gemm(cout, kk, hw, weight.data(), false, &cols, false, 1.0, &mut out);
    Ok((Tensor::from_vec(&[cout, h, w], out)?, cols))
}

/// Gradients `(dx, dw, db)` of [`conv2d`].
pub fn conv2d_backward(
    x_shape: &[usize],
    weight: &Tensor,
    cols: &[f64],
    dout: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (cout, k) = (weight.shape()[0], weight.shape()[2]);
    let hw = h * w;
    let kk = c * k * k;
    let mut dw = vec![0.0; cout * kk];
    gemm(cout, hw, kk, dout.data(), false, cols, true, 0.0, &mut dw);
    let db: Vec<f64> = dout.data().chunks(hw).map(|ch| ch.iter().sum()).collect();
    let mut dcols = vec![0.0; kk * hw];
    gemm(kk, cout, hw, weight.data(), true, dout.data(), false, 0.0, &mut dcols);
    let dx = if k == 1 { dcols } else { col2im(&dcols, c, h, w, k) };
    (
        Tensor::from_vec(x_shape, dx).expect("dx shape"),
        Tensor::from_vec(weight.shape(), dw).expect("dw shape"),
        Tensor::from_vec(&[cout], db).expect("db shape"),
    )
}

pub fn activate(x: &Tensor, act: Activation) -> Tensor {
    x.map(|v| act.apply(v))
}

fn check_even(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("pooling needs even spatial dims, got {h}x{w}")));
    }
    Ok((c, h, w))
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check_even(x)?;
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = ci * h * w + 2 * i * w + 2 * j;
                out[(ci * oh + i) * ow + j] =
                    0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn avg_pool2_backward(x_shape: &[usize], dout: &Tensor) -> Tensor {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let g = 0.25 * dout.data()[(ci * oh + i) * ow + j];
                let base = ci * h * w + 2 * i * w + 2 * j;
                dx[base] += g;
                dx[base + 1] += g;
                dx[base + w] += g;
                dx[base + w + 1] += g;
            }
        }
    }
    Tensor::from_vec(x_shape, dx).expect("pool grad shape")
}

/// 2×2 max pooling with stride 2; also returns the flat index of each winner.
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = check_even(x)?;
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0; c * oh * ow];
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = ci * h * w + 2 * i * w + 2 * j;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (ci * oh + i) * ow + j;
                out[o] = src[best];
                arg[o] = best;
            }
        }
    }
    Ok((Tensor::from_vec(&[c, oh, ow], out)?, arg))
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                out[(ci * oh + i) * ow + j] = x.data()[(ci * h + i / 2) * w + j / 2];
            }
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

pub fn upsample2_backward(x_shape: &[usize], dout: &Tensor) -> Tensor {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![0.0; c * h * w];
    for ci in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                dx[(ci * h + i / 2) * w + j / 2] += dout.data()[(ci * oh + i) * ow + j];
            }
        }
    }
    Tensor::from_vec(x_shape, dx).expect("upsample grad shape")
}

/// Channel concatenation of two maps with equal spatial dims.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, ha, wa) = a.dims3()?;
    let (cb, hb, wb) = b.dims3()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::Shape(format!("concat of {ha}x{wa} with {hb}x{wb}")));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, ha, wa], data)
}

/// Mean over the spatial dims of a `[C, H, W]` map, giving `[C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let n = (h * w) as f64;
    let data = x.data().chunks(h * w).map(|ch| ch.iter().sum::<f64>() / n).collect();
    Tensor::from_vec(&[c], data)
}

/// `weight · x + bias` with `weight` of shape `[O, I]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (o, i) = weight.dims2()?;
    if x.shape() != [i] || bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "linear {:?} applied to {:?} with bias {:?}",
            weight.shape(),
            x.shape(),
            bias.shape()
        )));
    }
    let data = (0..o)
        .map(|r| {
            let row = &weight.data()[r * i..(r + 1) * i];
            bias.data()[r] + row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::from_vec(&[o], data)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Elementwise product of a `[C, h, w]` map with an `[h, w]` weight broadcast over channels.
pub fn mul_spatial(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if weight.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "spatial weight {:?} does not match features {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    let hw = h * w;
    let mut data = x.data().to_vec();
    for ci in 0..c {
        for (v, m) in data[ci * hw..(ci + 1) * hw].iter_mut().zip(weight.data()) {
            *v *= m;
        }
    }
    Tensor::from_vec(&[c, h, w], data)
}
