//! One-dimensional convolutions over the time axis of `(batch, time, channel)` tensors.
//!
//! Dense kernels are stored as `(kernel, in, out)` so the flattened kernel is
//! directly the `(kernel * in, out)` matrix multiplied against im2col rows.

use super::linalg::{gemm, MatRef};
use super::tensor::Tensor;
use crate::error::{PdsError, Result};

/// Output length of a zero-padded strided convolution.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(PdsError::config("kernel and stride must be positive"));
    }
    let padded = len + 2 * pad;
    if padded < kernel {
        return Err(PdsError::InputTooShort(format!(
            "padded length {padded} is shorter than kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeometry {
    batch: usize,
    t_in: usize,
    c_in: usize,
    kernel: usize,
    c_out: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
}

fn geometry(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<ConvGeometry> {
    let (batch, t_in, c_in) = x.btc()?;
    let &[kernel, k_in, c_out] = w.shape() else {
        return Err(PdsError::config("conv1d kernel must be (kernel, in, out)"));
    };
    if k_in != c_in {
        return Err(PdsError::config(format!(
            "conv1d kernel expects {k_in} input channels, input has {c_in}"
        )));
    }
    if b.shape() != [c_out] {
        return Err(PdsError::config(format!(
            "conv1d bias must have shape [{c_out}]"
        )));
    }
    let t_out = conv_output_len(t_in, kernel, stride, pad)?;
    Ok(ConvGeometry {
        batch,
        t_in,
        c_in,
        kernel,
        c_out,
        stride,
        pad,
        t_out,
    })
}

/// Gathers the receptive field of every output step of batch item `b` into rows.
fn im2col(x: &[f64], g: &ConvGeometry, b: usize, cols: &mut [f64]) {
    let width = g.kernel * g.c_in;
    let base = b * g.t_in * g.c_in;
    for t in 0..g.t_out {
        let row = &mut cols[t * width..(t + 1) * width];
        for k in 0..g.kernel {
            let src = (t * g.stride + k) as isize - g.pad as isize;
            let dst = &mut row[k * g.c_in..(k + 1) * g.c_in];
            if src >= 0 && (src as usize) < g.t_in {
                let start = base + src as usize * g.c_in;
                dst.copy_from_slice(&x[start..start + g.c_in]);
            } else {
                dst.fill(0.0);
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeometry, b: usize, dx: &mut [f64]) {
    let width = g.kernel * g.c_in;
    let base = b * g.t_in * g.c_in;
    for t in 0..g.t_out {
        let row = &cols[t * width..(t + 1) * width];
        for k in 0..g.kernel {
            let src = (t * g.stride + k) as isize - g.pad as isize;
            if src >= 0 && (src as usize) < g.t_in {
                let start = base + src as usize * g.c_in;
                for (d, v) in dx[start..start + g.c_in]
                    .iter_mut()
                    .zip(&row[k * g.c_in..(k + 1) * g.c_in])
                {
                    *d += v;
                }
            }
        }
    }
}

/// Strided 1-D convolution with zero padding on both ends.
pub fn conv1d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = geometry(x, w, b, stride, pad)?;
    let width = g.kernel * g.c_in;
    let mut out = vec![0.0; g.batch * g.t_out * g.c_out];
    for row in out.chunks_exact_mut(g.c_out) {
        row.copy_from_slice(b.data());
    }
    let mut cols = vec![0.0; g.t_out * width];
    for item in 0..g.batch {
        im2col(x.data(), &g, item, &mut cols);
        gemm(
            g.t_out,
            width,
            g.c_out,
            1.0,
            MatRef::dense(&cols, width),
            MatRef::dense(w.data(), g.c_out),
            1.0,
            &mut out,
            item * g.t_out * g.c_out,
            g.c_out,
        );
    }
    Tensor::new(vec![g.batch, g.t_out, g.c_out], out)
}

/// Gradients of [`conv1d_forward`] with respect to `(x, w, b)`.
pub fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = geometry(x, w, b, stride, pad)?;
    let width = g.kernel * g.c_in;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.c_out];
    let mut cols = vec![0.0; g.t_out * width];
    let mut dcols = vec![0.0; g.t_out * width];
    for item in 0..g.batch {
        let gout = &grad_out.data()[item * g.t_out * g.c_out..(item + 1) * g.t_out * g.c_out];
        for row in gout.chunks_exact(g.c_out) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        im2col(x.data(), &g, item, &mut cols);
        // dW += cols^T * gout
        gemm(
            width,
            g.t_out,
            g.c_out,
            1.0,
            MatRef::dense_t(&cols, width),
            MatRef::dense(gout, g.c_out),
            1.0,
            &mut dw,
            0,
            g.c_out,
        );
        // dcols = gout * W^T
        gemm(
            g.t_out,
            g.c_out,
            width,
            1.0,
            MatRef::dense(gout, g.c_out),
            MatRef::dense_t(w.data(), g.c_out),
            0.0,
            &mut dcols,
            0,
            width,
        );
        col2im_add(&dcols, &g, item, &mut dx);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![g.c_out], db)?,
    ))
}

fn depthwise_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (batch, t, c) = x.btc()?;
    let &[kernel, kc] = w.shape() else {
        return Err(PdsError::config(
            "depthwise kernel must be (kernel, channels)",
        ));
    };
    if kc != c || b.shape() != [c] {
        return Err(PdsError::config(format!(
            "depthwise conv over {c} channels got kernel {:?} and bias {:?}",
            w.shape(),
            b.shape()
        )));
    }
    Ok((batch, t, c, kernel))
}

/// Stride-1 depthwise convolution (one filter per channel) with zero padding `pad`.
pub fn depthwise_conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Result<Tensor> {
    let (batch, t, c, kernel) = depthwise_dims(x, w, b)?;
    let t_out = conv_output_len(t, kernel, 1, pad)?;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; batch * t_out * c];
    for item in 0..batch {
        for to in 0..t_out {
            let orow = &mut out[(item * t_out + to) * c..(item * t_out + to + 1) * c];
            orow.copy_from_slice(b.data());
            for k in 0..kernel {
                let src = (to + k) as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let xrow = &xd[(item * t + src as usize) * c..(item * t + src as usize + 1) * c];
                let wrow = &wd[k * c..(k + 1) * c];
                for ((o, xv), wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![batch, t_out, c], out)
}

pub fn depthwise_conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, t, c, kernel) = depthwise_dims(x, w, b)?;
    let t_out = conv_output_len(t, kernel, 1, pad)?;
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; c];
    for item in 0..batch {
        for to in 0..t_out {
            let grow = &gd[(item * t_out + to) * c..(item * t_out + to + 1) * c];
            for (acc, g) in db.iter_mut().zip(grow) {
                *acc += g;
            }
            for k in 0..kernel {
                let src = (to + k) as isize - pad as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let off = (item * t + src as usize) * c;
                for ch in 0..c {
                    dx[off + ch] += grow[ch] * wd[k * c + ch];
                    dw[k * c + ch] += grow[ch] * xd[off + ch];
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![c], db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sliding_sums_of_ones() {
        let x = Tensor::full(vec![1, 10, 1], 1.0);
        let w = Tensor::full(vec![5, 1, 1], 1.0);
        let b = Tensor::zeros(vec![1]);
        let y = conv1d_forward(&x, &w, &b, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 5, 1]);
        assert_eq!(y.data(), &[3.0, 5.0, 5.0, 5.0, 4.0]);
    }

    #[test]
    fn too_short_input_is_rejected() {
        let x = Tensor::zeros(vec![1, 2, 1]);
        let w = Tensor::zeros(vec![5, 1, 1]);
        let b = Tensor::zeros(vec![1]);
        assert!(matches!(
            conv1d_forward(&x, &w, &b, 1, 1),
            Err(PdsError::InputTooShort(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let x = Tensor::zeros(vec![1, 8, 3]);
        let w = Tensor::zeros(vec![5, 2, 1]);
        let b = Tensor::zeros(vec![1]);
        assert!(matches!(
            conv1d_forward(&x, &w, &b, 1, 2),
            Err(PdsError::Config(_))
        ));
    }

    #[test]
    fn depthwise_same_padding_keeps_length() {
        let x = Tensor::from_fn(vec![1, 6, 2], |i| i as f64);
        let w = Tensor::full(vec![3, 2], 1.0);
        let b = Tensor::zeros(vec![2]);
        let y = depthwise_conv1d_forward(&x, &w, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 6, 2]);
        // channel 0 values are 0,2,4,6,8,10; first output = 0 + 2.
        assert_eq!(y.data()[0], 2.0);
        assert_eq!(y.data()[2], 0.0 + 2.0 + 4.0);
    }
}
