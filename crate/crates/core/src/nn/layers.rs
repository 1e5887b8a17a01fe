//! Forward and backward passes of the individual layers.
//!
//! Spatial tensors are NCHW. Convolution weights are `[out, in, k, k]`,
//! fully connected weights `[out, in]`.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

fn dims4(t: &[usize], what: &str) -> Result<[usize; 4]> {
    match t {
        &[n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Shape(format!("{what}: expected 4-d NCHW, got {t:?}"))),
    }
}

/// Output side length of a convolution.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Shape("kernel and stride must be >= 1".into()));
    }
    if input + 2 * pad < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {}",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Output side length of a max pool. Windows are counted with ceiling
/// rounding, so a final partial window at the border is kept and clipped.
pub fn pool_out_len(input: usize, kernel: usize, stride: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Shape("kernel and stride must be >= 1".into()));
    }
    if kernel > input {
        return Err(Error::Shape(format!("pool kernel {kernel} exceeds input {input}")));
    }
    let mut out = (input - kernel).div_ceil(stride) + 1;
    // a window must start inside the input
    if (out - 1) * stride >= input {
        out -= 1;
    }
    Ok(out)
}

/// Range of output positions whose tap `k` lands inside `[0, input)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, input: usize, out: usize) -> (usize, usize) {
    // position o reads index o*stride + k - pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = dims4(input.shape(), "conv input")?;
    let [o, wc, k, k2] = dims4(weights.shape(), "conv weights")?;
    if wc != c || k != k2 || bias.shape() != [o] {
        return Err(Error::Shape(format!(
            "conv input {:?} incompatible with weights {:?} / bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    let oh = conv_out_len(h, k, stride, pad)?;
    let ow = conv_out_len(w, k, stride, pad)?;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let x = input.data();
    let wt = weights.data();
    let b = bias.data();
    let y = out.data_mut();

    for ni in 0..n {
        for oi in 0..o {
            let plane = &mut y[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = b[oi]);
            for ci in 0..c {
                let src = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for ky in 0..k {
                    let (y_lo, y_hi) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..k {
                        let wv = wt[((oi * c + ci) * k + ky) * k + kx];
                        let (x_lo, x_hi) = valid_range(kx, pad, stride, w, ow);
                        for oy in y_lo..y_hi {
                            let iy = oy * stride + ky - pad;
                            let row = &src[iy * w..(iy + 1) * w];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in x_lo..x_hi {
                                dst[ox] = dst[ox] + wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = dims4(input.shape(), "conv input")?;
    let [o, wc, k, _] = dims4(weights.shape(), "conv weights")?;
    let oh = conv_out_len(h, k, stride, pad)?;
    let ow = conv_out_len(w, k, stride, pad)?;
    if wc != c || grad_out.shape() != [n, o, oh, ow] {
        return Err(Error::Shape(format!(
            "conv grad {:?} does not match forward output [{n}, {o}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weights.shape());
    let mut gb = Tensor::zeros(&[o]);
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let gi_d = gi.data_mut();
    let gw_d = gw.data_mut();
    let gb_d = gb.data_mut();

    for ni in 0..n {
        for oi in 0..o {
            let gplane = &g[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
            gb_d[oi] = gb_d[oi] + gplane.iter().copied().sum::<T>();
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for ky in 0..k {
                    let (y_lo, y_hi) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..k {
                        let widx = ((oi * c + ci) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let (x_lo, x_hi) = valid_range(kx, pad, stride, w, ow);
                        let mut acc = T::zero();
                        for oy in y_lo..y_hi {
                            let iy = oy * stride + ky - pad;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let row_start = base + iy * w;
                            for ox in x_lo..x_hi {
                                let ix = row_start + ox * stride + kx - pad;
                                acc = acc + grow[ox] * x[ix];
                                gi_d[ix] = gi_d[ix] + wv * grow[ox];
                            }
                        }
                        gw_d[widx] = gw_d[widx] + acc;
                    }
                }
            }
        }
    }
    Ok((gi, gw, gb))
}

/// Max pool forward. Also returns, per output element, the flat input index
/// of the winning element (first occurrence on ties).
pub fn maxpool_forward<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = dims4(input.shape(), "pool input")?;
    let oh = pool_out_len(h, kernel, stride)?;
    let ow = pool_out_len(w, kernel, stride)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let x = input.data();
    let y = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let y0 = oy * stride;
            let y1 = (y0 + kernel).min(h);
            for ox in 0..ow {
                let x0 = ox * stride;
                let x1 = (x0 + kernel).min(w);
                let mut best = base + y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let idx = base + iy * w + ix;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                y[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape("pool gradient and argmax lengths differ".into()));
    }
    let mut gi = Tensor::zeros(input_shape);
    let d = gi.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] = d[idx] + g;
    }
    Ok(gi)
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(Error::Shape("relu gradient shape differs from input".into()));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

fn fc_dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, inp) = match input.shape() {
        &[n, i] => (n, i),
        s => return Err(Error::Shape(format!("fc input must be 2-d, got {s:?}"))),
    };
    match weights.shape() {
        &[o, i] if i == inp => Ok((n, inp, o)),
        s => Err(Error::Shape(format!("fc weights {s:?} incompatible with input width {inp}"))),
    }
}

/// `y = W x + b` per row of `input`.
pub fn fc_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, inp, o) = fc_dims(input, weights)?;
    if bias.shape() != [o] {
        return Err(Error::Shape(format!("fc bias {:?}, expected [{o}]", bias.shape())));
    }
    let x = input.data();
    let wt = weights.data();
    let mut out = Vec::with_capacity(n * o);
    for ni in 0..n {
        let row = &x[ni * inp..(ni + 1) * inp];
        for oi in 0..o {
            let wrow = &wt[oi * inp..(oi + 1) * inp];
            let dot = row.iter().zip(wrow).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            out.push(dot + bias.data()[oi]);
        }
    }
    Tensor::from_vec(&[n, o], out)
}

pub fn fc_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, inp, o) = fc_dims(input, weights)?;
    if grad_out.shape() != [n, o] {
        return Err(Error::Shape(format!("fc grad {:?}, expected [{n}, {o}]", grad_out.shape())));
    }
    let x = input.data();
    let wt = weights.data();
    let g = grad_out.data();
    let mut gi = Tensor::zeros(&[n, inp]);
    let mut gw = Tensor::zeros(&[o, inp]);
    let mut gb = Tensor::zeros(&[o]);
    for ni in 0..n {
        let row = &x[ni * inp..(ni + 1) * inp];
        let gi_row = &mut gi.data_mut()[ni * inp..(ni + 1) * inp];
        for oi in 0..o {
            let go = g[ni * o + oi];
            if go == T::zero() {
                continue;
            }
            let wrow = &wt[oi * inp..(oi + 1) * inp];
            for (gv, &wv) in gi_row.iter_mut().zip(wrow) {
                *gv = *gv + go * wv;
            }
        }
        for oi in 0..o {
            let go = g[ni * o + oi];
            gb.data_mut()[oi] = gb.data()[oi] + go;
            if go == T::zero() {
                continue;
            }
            let gw_row = &mut gw.data_mut()[oi * inp..(oi + 1) * inp];
            for (gv, &xv) in gw_row.iter_mut().zip(row) {
                *gv = *gv + go * xv;
            }
        }
    }
    Ok((gi, gw, gb))
}
