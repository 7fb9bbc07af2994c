//! Raw forward/backward kernels for the convolutional primitives.
//!
//! Convolutions lower to im2col + GEMM. Work is split per batch sample;
//! parameter gradients are reduced over samples in index order so results do
//! not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major `c = op(a) * op(b) + beta * c`, where `op(a)` is `m x k` and
/// `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
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
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution over one `C x H x W` plane stack.
#[derive(Clone, Copy, Debug)]
struct Window {
    channels: usize,
    height: usize,
    width: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.ksize * self.ksize
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(column_index, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let p = self.positions();
        for ch in 0..self.channels {
            for ky in 0..self.ksize {
                for kx in 0..self.ksize {
                    let row = (ch * self.ksize + ky) * self.ksize + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let base = (ch * self.height + iy as usize) * self.width;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(row * p + oy * self.out_w + ox, base + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn im2col(plane: &[f64], win: &Window) -> Vec<f64> {
    let mut cols = vec![0.0; win.rows() * win.positions()];
    win.for_each_tap(|col_idx, in_idx| cols[col_idx] = plane[in_idx]);
    cols
}

fn col2im_add(cols: &[f64], win: &Window, plane: &mut [f64]) {
    win.for_each_tap(|col_idx, in_idx| plane[in_idx] += cols[col_idx]);
}

fn check_kernel(op: &'static str, weight: &Tensor) -> Result<(usize, usize, usize)> {
    let (a, b, kh, kw) = weight.dims4()?;
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::shape(
            op,
            format!("kernel must be 3x3 (or 1x1 for the head), got {kh}x{kw}"),
        ));
    }
    Ok((a, b, kh))
}

fn check_bias(op: &'static str, bias: &Tensor, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::shape(
            op,
            format!(
                "bias shape {:?} does not match {channels} output channels",
                bias.shape()
            ),
        ));
    }
    Ok(())
}

fn conv_window(
    op: &'static str,
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
) -> Result<(usize, usize, Window)> {
    let (n, c, h, w) = input.dims4()?;
    let (k, wc, ksize) = check_kernel(op, weight)?;
    if wc != c {
        return Err(Error::shape(
            op,
            format!("weight expects {wc} input channels, input has {c}"),
        ));
    }
    let pad = ksize / 2;
    if h + 2 * pad < ksize || w + 2 * pad < ksize {
        return Err(Error::shape(
            op,
            format!("input {h}x{w} is smaller than kernel"),
        ));
    }
    let win = Window {
        channels: c,
        height: h,
        width: w,
        ksize,
        stride,
        pad,
        out_h: (h + 2 * pad - ksize) / stride + 1,
        out_w: (w + 2 * pad - ksize) / stride + 1,
    };
    Ok((n, k, win))
}

/// Cross-correlation with zero padding `ksize / 2` and the given stride.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
) -> Result<Tensor> {
    let (n, k, win) = conv_window("conv2d", input, weight, stride)?;
    check_bias("conv2d", bias, k)?;
    let in_len = win.channels * win.height * win.width;
    let p = win.positions();
    let mut out = vec![0.0; n * k * p];
    out.par_chunks_mut(k * p)
        .zip(input.data().par_chunks(in_len.max(1)))
        .for_each(|(out_n, x_n)| {
            let cols = im2col(x_n, &win);
            for (ch, b) in bias.data().iter().enumerate() {
                out_n[ch * p..(ch + 1) * p].fill(*b);
            }
            gemm(
                k,
                win.rows(),
                p,
                weight.data(),
                false,
                &cols,
                false,
                1.0,
                out_n,
            );
        });
    Tensor::new(vec![n, k, win.out_h, win.out_w], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, k, win) = conv_window("conv2d", input, weight, stride)?;
    let p = win.positions();
    if grad_out.shape() != [n, k, win.out_h, win.out_w] {
        return Err(Error::shape(
            "conv2d",
            format!("upstream gradient has shape {:?}", grad_out.shape()),
        ));
    }
    let in_len = win.channels * win.height * win.width;
    let rows = win.rows();
    let mut grad_in = vec![0.0; input.numel()];
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = grad_in
        .par_chunks_mut(in_len.max(1))
        .zip(input.data().par_chunks(in_len.max(1)))
        .zip(grad_out.data().par_chunks(k * p))
        .map(|((gx_n, x_n), gy_n)| {
            let cols = im2col(x_n, &win);
            let mut gw = vec![0.0; k * rows];
            gemm(k, p, rows, gy_n, false, &cols, true, 0.0, &mut gw);
            let mut gcols = vec![0.0; rows * p];
            gemm(
                rows,
                k,
                p,
                weight.data(),
                true,
                gy_n,
                false,
                0.0,
                &mut gcols,
            );
            col2im_add(&gcols, &win, gx_n);
            let gb = gy_n.chunks(p).map(|c| c.iter().sum()).collect();
            (gw, gb)
        })
        .collect();
    let mut grad_w = vec![0.0; k * rows];
    let mut grad_b = vec![0.0; k];
    for (gw, gb) in per_sample {
        grad_w.iter_mut().zip(gw).for_each(|(a, b)| *a += b);
        grad_b.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), grad_in)?,
        Tensor::new(weight.shape().to_vec(), grad_w)?,
        Tensor::new(vec![k], grad_b)?,
    ))
}

/// Window of the stride-2 convolution whose adjoint is the transposed
/// convolution producing an `2H x 2W` output from `H x W`.
fn transposed_window(
    op: &'static str,
    input: &Tensor,
    weight: &Tensor,
) -> Result<(usize, usize, Window)> {
    let (n, c, h, w) = input.dims4()?;
    let (wc, k, ksize) = check_kernel(op, weight)?;
    if ksize != 3 {
        return Err(Error::shape(
            op,
            "transposed convolution requires a 3x3 kernel",
        ));
    }
    if wc != c {
        return Err(Error::shape(
            op,
            format!("weight expects {wc} input channels, input has {c}"),
        ));
    }
    let win = Window {
        channels: k,
        height: 2 * h,
        width: 2 * w,
        ksize: 3,
        stride: 2,
        pad: 1,
        out_h: h,
        out_w: w,
    };
    Ok((n, k, win))
}

/// 3x3 transposed convolution, stride 2, padding 1, output padding 1.
/// Weight layout is `[C_in, K_out, 3, 3]`.
pub fn conv_transpose2d_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (_, k, win) = transposed_window("transposed_conv2d", input, weight)?;
    check_bias("transposed_conv2d", bias, k)?;
    let (oh, ow) = (2 * h, 2 * w);
    let p = h * w;
    let rows = win.rows();
    let mut out = vec![0.0; n * k * oh * ow];
    out.par_chunks_mut((k * oh * ow).max(1))
        .zip(input.data().par_chunks((c * p).max(1)))
        .for_each(|(out_n, x_n)| {
            let mut cols = vec![0.0; rows * p];
            gemm(rows, c, p, weight.data(), true, x_n, false, 0.0, &mut cols);
            for (ch, b) in bias.data().iter().enumerate() {
                out_n[ch * oh * ow..(ch + 1) * oh * ow].fill(*b);
            }
            col2im_add(&cols, &win, out_n);
        });
    Tensor::new(vec![n, k, oh, ow], out)
}

/// Gradients of [`conv_transpose2d_forward`] with respect to input, weight and bias.
pub fn conv_transpose2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w) = input.dims4()?;
    let (_, k, win) = transposed_window("transposed_conv2d", input, weight)?;
    if grad_out.shape() != [n, k, 2 * h, 2 * w] {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("upstream gradient has shape {:?}", grad_out.shape()),
        ));
    }
    let p = h * w;
    let rows = win.rows();
    let out_len = k * 4 * p;
    let mut grad_in = vec![0.0; input.numel()];
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = grad_in
        .par_chunks_mut((c * p).max(1))
        .zip(input.data().par_chunks((c * p).max(1)))
        .zip(grad_out.data().par_chunks(out_len.max(1)))
        .map(|((gx_n, x_n), gy_n)| {
            let gcols = im2col(gy_n, &win);
            gemm(c, rows, p, weight.data(), false, &gcols, false, 0.0, gx_n);
            let mut gw = vec![0.0; c * rows];
            gemm(c, p, rows, x_n, false, &gcols, true, 0.0, &mut gw);
            let gb = gy_n.chunks(4 * p).map(|ch| ch.iter().sum()).collect();
            (gw, gb)
        })
        .collect();
    let mut grad_w = vec![0.0; c * rows];
    let mut grad_b = vec![0.0; k];
    for (gw, gb) in per_sample {
        grad_w.iter_mut().zip(gw).for_each(|(a, b)| *a += b);
        grad_b.iter_mut().zip(gb).for_each(|(a, b)| *a += b);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), grad_in)?,
        Tensor::new(weight.shape().to_vec(), grad_w)?,
        Tensor::new(vec![k], grad_b)?,
    ))
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for each
/// output element, the flat input index of the selected maximum. Ties go to
/// the first element in row-major window order.
pub fn maxpool2d_forward(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial dims must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut grad = Tensor::zeros(input_shape.to_vec());
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation, independent of im2col/GEMM.
    fn direct_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4().unwrap();
        let (k, _, ks, _) = w.dims4().unwrap();
        let pad = ks / 2;
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (wd + 2 * pad - ks) / stride + 1;
        let mut out = Tensor::zeros(vec![n, k, oh, ow]);
        for ni in 0..n {
            for ki in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[ki];
                        for ci in 0..c {
                            for ky in 0..ks {
                                for kx in 0..ks {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()
                                        [((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((ki * c + ci) * ks + ky) * ks + kx];
                                }
                            }
                        }
                        out.data_mut()[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn ones_kernel_on_ones_input() {
        let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let b = Tensor::zeros(vec![1]);
        let y = conv2d_forward(&x, &w, &b, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        assert_eq!(y, direct_conv(&x, &w, &b, 1));
    }

    #[test]
    fn matches_direct_convolution() {
        for stride in [1, 2] {
            let x = Tensor::from_fn(vec![2, 3, 6, 6], lcg(1));
            let w = Tensor::from_fn(vec![4, 3, 3, 3], lcg(2));
            let b = Tensor::from_fn(vec![4], lcg(3));
            let fast = conv2d_forward(&x, &w, &b, stride).unwrap();
            let slow = direct_conv(&x, &w, &b, stride);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_single_pixel() {
        let x = Tensor::full(vec![1, 1, 1, 1], 2.0);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let y = conv_transpose2d_forward(&x, &w, &Tensor::zeros(vec![1])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[2.0; 4]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::zeros(vec![1, 3, 3, 3]);
        assert!(conv2d_forward(&x, &w, &Tensor::zeros(vec![1]), 1).is_err());
        let w5 = Tensor::zeros(vec![1, 2, 5, 5]);
        assert!(conv2d_forward(&x, &w5, &Tensor::zeros(vec![1]), 1).is_err());
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let (_, idx) = maxpool2d_forward(&x).unwrap();
        assert_eq!(idx, vec![0]);
    }
}
