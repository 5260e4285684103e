//! Raw numeric kernels on flat row-major slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `c = a · b + beta · c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: bounds of all three operands were checked above for the given strides.
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

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// `[m,k] · [k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), 0.0, &mut c);
    c
}

/// `[m,k] · [n,k]ᵀ`, accumulated into `c`.
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, a, (k, 1), b, (1, k), 1.0, c);
}

/// `[k,m]ᵀ · [k,n]`, accumulated into `c`.
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    gemm(m, k, n, a, (1, m), b, (n, 1), 1.0, c);
}

/// Hyper-parameters of a (transposed) convolution. For plain convolutions
/// the weight is `[out, in, kh, kw]`; for transposed ones `[in, out, kh, kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if self.stride == 0 || ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("input {h}x{w} too small for {self:?}"),
            });
        }
        Ok(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }

    pub fn transposed_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h.max(1) - 1) * self.stride + self.kernel_h;
        let ow = (w.max(1) - 1) * self.stride + self.kernel_w;
        if self.stride == 0 || h == 0 || w == 0 || oh <= 2 * self.padding || ow <= 2 * self.padding {
            return Err(Error::InvalidShape {
                op: "deconv2d",
                detail: format!("input {h}x{w} invalid for {self:?}"),
            });
        }
        Ok((oh - 2 * self.padding, ow - 2 * self.padding))
    }
}

/// Image `[c, h, w]` to columns `[c·kh·kw, gh·gw]` for a `gh × gw` output grid.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: &ConvGeometry, gh: usize, gw: usize, cols: &mut [f64]) {
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding as isize);
    let grid = gh * gw;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * grid..(row + 1) * grid];
                for oy in 0..gh {
                    let iy = (oy * s + ki) as isize - p;
                    let line = &mut dst[oy * gw..(oy + 1) * gw];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, g: &ConvGeometry, gh: usize, gw: usize, x: &mut [f64]) {
    let (kh, kw, s, p) = (g.kernel_h, g.kernel_w, g.stride, g.padding as isize);
    let grid = gh * gw;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * grid..(row + 1) * grid];
                for oy in 0..gh {
                    let iy = (oy * s + ki) as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..gw {
                        let ix = (ox * s + kj) as isize - p;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * gw + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution of `x: [n, in, h, w]` with `weight: [out, in, kh, kw]`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Result<(Vec<f64>, usize, usize)> {
    let (oh, ow) = g.conv_output(h, w)?;
    let ckk = g.in_channels * g.kernel_area();
    let grid = oh * ow;
    let mut cols = vec![0.0; ckk * grid];
    let mut out = vec![0.0; n * g.out_channels * grid];
    let in_sz = g.in_channels * h * w;
    let out_sz = g.out_channels * grid;
    for s in 0..n {
        im2col(&x[s * in_sz..(s + 1) * in_sz], g.in_channels, h, w, g, oh, ow, &mut cols);
        let dst = &mut out[s * out_sz..(s + 1) * out_sz];
        gemm(g.out_channels, ckk, grid, weight, (ckk, 1), &cols, (grid, 1), 0.0, dst);
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(grid).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    Ok((out, oh, ow))
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> Result<ConvGrads> {
    let (oh, ow) = g.conv_output(h, w)?;
    let ckk = g.in_channels * g.kernel_area();
    let grid = oh * ow;
    let in_sz = g.in_channels * h * w;
    let out_sz = g.out_channels * grid;
    let mut cols = vec![0.0; ckk * grid];
    let mut gcols = vec![0.0; ckk * grid];
    let mut gw = vec![0.0; g.out_channels * ckk];
    let mut gb = vec![0.0; g.out_channels];
    let mut gx = need_input.then(|| vec![0.0; n * in_sz]);
    for s in 0..n {
        let go = &grad_out[s * out_sz..(s + 1) * out_sz];
        im2col(&x[s * in_sz..(s + 1) * in_sz], g.in_channels, h, w, g, oh, ow, &mut cols);
        matmul_nt_acc(go, &cols, g.out_channels, grid, ckk, &mut gw);
        for (o, chunk) in go.chunks(grid).enumerate() {
            gb[o] += chunk.iter().sum::<f64>();
        }
        if let Some(gx) = gx.as_mut() {
            gcols.iter_mut().for_each(|v| *v = 0.0);
            matmul_tn_acc(weight, go, ckk, g.out_channels, grid, &mut gcols);
            col2im(&gcols, g.in_channels, h, w, g, oh, ow, &mut gx[s * in_sz..(s + 1) * in_sz]);
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Gradient of a convolution with respect to its input only.
pub(crate) fn conv2d_input_grad(
    n: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    weight: &[f64],
    grad_out: &[f64],
) -> Result<Vec<f64>> {
    let (oh, ow) = g.conv_output(h, w)?;
    let ckk = g.in_channels * g.kernel_area();
    let grid = oh * ow;
    let in_sz = g.in_channels * h * w;
    let out_sz = g.out_channels * grid;
    let mut gcols = vec![0.0; ckk * grid];
    let mut gx = vec![0.0; n * in_sz];
    for s in 0..n {
        gcols.iter_mut().for_each(|v| *v = 0.0);
        matmul_tn_acc(weight, &grad_out[s * out_sz..(s + 1) * out_sz], ckk, g.out_channels, grid, &mut gcols);
        col2im(&gcols, g.in_channels, h, w, g, oh, ow, &mut gx[s * in_sz..(s + 1) * in_sz]);
    }
    Ok(gx)
}

/// Transposed convolution of `x: [n, in, h, w]` with `weight: [in, out, kh, kw]`.
pub(crate) fn deconv2d_forward(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Result<(Vec<f64>, usize, usize)> {
    let (oh, ow) = g.transposed_output(h, w)?;
    let okk = g.out_channels * g.kernel_area();
    let grid = h * w;
    let in_sz = g.in_channels * grid;
    let out_sz = g.out_channels * oh * ow;
    let mut cols = vec![0.0; okk * grid];
    let mut out = vec![0.0; n * out_sz];
    for s in 0..n {
        cols.iter_mut().for_each(|v| *v = 0.0);
        matmul_tn_acc(weight, &x[s * in_sz..(s + 1) * in_sz], okk, g.in_channels, grid, &mut cols);
        let dst = &mut out[s * out_sz..(s + 1) * out_sz];
        col2im(&cols, g.out_channels, oh, ow, g, h, w, dst);
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(oh * ow).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    Ok((out, oh, ow))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv2d_backward(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
) -> Result<ConvGrads> {
    let (oh, ow) = g.transposed_output(h, w)?;
    let okk = g.out_channels * g.kernel_area();
    let grid = h * w;
    let in_sz = g.in_channels * grid;
    let out_sz = g.out_channels * oh * ow;
    let mut gcols = vec![0.0; okk * grid];
    let mut gw = vec![0.0; g.in_channels * okk];
    let mut gb = vec![0.0; g.out_channels];
    let mut gx = need_input.then(|| vec![0.0; n * in_sz]);
    for s in 0..n {
        let go = &grad_out[s * out_sz..(s + 1) * out_sz];
        im2col(go, g.out_channels, oh, ow, g, h, w, &mut gcols);
        matmul_nt_acc(&x[s * in_sz..(s + 1) * in_sz], &gcols, g.in_channels, grid, okk, &mut gw);
        for (o, chunk) in go.chunks(oh * ow).enumerate() {
            gb[o] += chunk.iter().sum::<f64>();
        }
        if let Some(gx) = gx.as_mut() {
            gemm(
                g.in_channels,
                okk,
                grid,
                weight,
                (okk, 1),
                &gcols,
                (grid, 1),
                0.0,
                &mut gx[s * in_sz..(s + 1) * in_sz],
            );
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

/// Max pooling over `[n·c, h, w]` planes. Returns outputs and the flat input
/// index of every selected element (first maximum wins on ties).
pub(crate) fn maxpool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
) -> Result<(Vec<f64>, Vec<usize>, usize, usize)> {
    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
        return Err(Error::InvalidShape {
            op: "maxpool2d",
            detail: format!("input {h}x{w} with kernel {kernel} stride {stride}"),
        });
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((out, arg, oh, ow))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle for the im2col path.
    fn conv_naive(x: &[f64], h: usize, w: usize, g: &ConvGeometry, wt: &[f64]) -> Vec<f64> {
        let (oh, ow) = g.conv_output(h, w).unwrap();
        let mut out = vec![0.0; g.out_channels * oh * ow];
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for ki in 0..g.kernel_h {
                            for kj in 0..g.kernel_w {
                                let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(c * h + iy as usize) * w + ix as usize]
                                        * wt[((o * g.in_channels + c) * g.kernel_h + ki) * g.kernel_w + kj];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 23) as f64 * scale - 0.5).collect()
    }

    #[test]
    fn conv_matches_naive() {
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0)] {
            let g = ConvGeometry::new(2, 3, 3, stride, pad);
            let x = ramp(2 * 6 * 5, 0.05);
            let wt = ramp(3 * 2 * 9, 0.03);
            let (out, _, _) = conv2d_forward(&x, 1, 6, 5, &g, &wt, None).unwrap();
            let naive = conv_naive(&x, 6, 5, &g, &wt);
            for (a, b) in out.iter().zip(naive.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> when deconv uses the same weights.
        let g = ConvGeometry::new(2, 3, 2, 2, 0);
        let (h, w) = (6, 4);
        let x = ramp(2 * h * w, 0.04);
        let wt = ramp(3 * 2 * 4, 0.02);
        let (cx, oh, ow) = conv2d_forward(&x, 1, h, w, &g, &wt, None).unwrap();
        let y = ramp(3 * oh * ow, 0.07);
        let lhs: f64 = cx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let dg = ConvGeometry::new(3, 2, 2, 2, 0);
        let (dy, dh, dw) = deconv2d_forward(&y, 1, oh, ow, &dg, &wt, None).unwrap();
        assert_eq!((dh, dw), (h, w));
        let rhs: f64 = x.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_picks_first_max() {
        let x = vec![1.0, 3.0, 3.0, 0.0];
        let (out, arg, oh, ow) = maxpool_forward(&x, 1, 2, 2, 2, 2).unwrap();
        assert_eq!((oh, ow), (1, 1));
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![1]);
    }
}
