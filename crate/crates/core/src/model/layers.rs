//! Per-image layer kernels with explicit backward passes.
//!
//! Feature maps are `(channels, height, width)` tensors. Convolutions lower to
//! GEMM through an im2col buffer.

use matrixmultiply::dgemm;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, SeededRng, Tensor};

/// Kernel `(out, in, kh, kw)` and bias `(out)` of a conv or deconv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub kernels: Tensor,
    pub biases: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Same-padded 3x3 convolution.
    Conv,
    /// 2x2 stride-2 transposed convolution.
    Deconv,
}

impl LayerKind {
    pub fn kernel_size(self) -> usize {
        match self {
            LayerKind::Conv => 3,
            LayerKind::Deconv => 2,
        }
    }
}

impl LayerParams {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        Self {
            kernels: Tensor::zeros([out_ch, in_ch, k, k]),
            biases: Tensor::zeros([out_ch]),
        }
    }

    /// He-normal kernels with `fan_in = in * kh * kw`, zero biases.
    pub fn he(out_ch: usize, in_ch: usize, k: usize, rng: &mut SeededRng) -> Self {
        let std = (2.0 / (in_ch * k * k) as f64).sqrt();
        Self {
            kernels: rng.normal_tensor([out_ch, in_ch, k, k], 0.0, std),
            biases: Tensor::zeros([out_ch]),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.shape()[2]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            kernels: Tensor::zeros(self.kernels.shape().to_vec()),
            biases: Tensor::zeros(self.biases.shape().to_vec()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }

    pub fn add_assign(&mut self, other: &LayerParams) -> Result<()> {
        self.kernels.axpy(1.0, &other.kernels)?;
        self.biases.axpy(1.0, &other.biases)
    }
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidTensor(format!(
            "expected a (C, H, W) feature map, got shape {:?}",
            t.shape()
        ))),
    }
}

fn check_in_channels(params: &LayerParams, c: usize) -> Result<()> {
    if params.in_channels() != c {
        return Err(Error::ShapeMismatch {
            left: params.kernels.shape().to_vec(),
            right: vec![c],
        });
    }
    Ok(())
}

/// `c[m x n] = a * b + beta * c` on row-major buffers with explicit strides;
/// `rsc` is the row stride of `c`.
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
    rsc: usize,
) {
    debug_assert!(m == 0 || c.len() >= (m - 1) * rsc + n);
    // SAFETY: callers pass buffers sized for the given dimensions and strides.
    unsafe {
        dgemm(
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
            rsc as isize,
            1,
        );
    }
}

/// Output rows per im2col band, keeping the column buffer around 256 KiB.
fn band_rows(kk: usize, w: usize, h: usize) -> usize {
    (32_768 / (kk * w).max(1)).clamp(1, h)
}

/// Valid `x` range of a row shifted by `shift`.
fn shifted_span(w: usize, shift: isize) -> (usize, usize) {
    (
        (-shift).max(0) as usize,
        (w as isize - shift).min(w as isize) as usize,
    )
}

/// Columns for output rows `y0..y1`, laid out `(c*k*k, (y1-y0)*w)`.
fn im2col(input: &[f64], (c, h, w): (usize, usize, usize), k: usize, (y0, y1): (usize, usize), col: &mut [f64]) {
    let pad = k as isize / 2;
    let (hw, bl) = (h * w, (y1 - y0) * w);
    col[..c * k * k * bl].fill(0.0);
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * bl..][..bl];
                let shift = kx as isize - pad;
                let (x0, x1) = shifted_span(w, shift);
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[(y - y0) * w..][..w];
                    let src = &src[(x0 as isize + shift) as usize..(x1 as isize + shift) as usize];
                    dst[x0..x1].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a band of columns into `out`.
fn col2im(col: &[f64], (c, h, w): (usize, usize, usize), k: usize, (y0, y1): (usize, usize), out: &mut [f64]) {
    let pad = k as isize / 2;
    let (hw, bl) = (h * w, (y1 - y0) * w);
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * bl..][..bl];
                let shift = kx as isize - pad;
                let (x0, x1) = shifted_span(w, shift);
                for y in y0..y1 {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let dst = &mut dst[(x0 as isize + shift) as usize..(x1 as isize + shift) as usize];
                    for (d, s) in dst.iter_mut().zip(&row[(y - y0) * w..][x0..x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Row bands `(y0, y1)` covering `0..h`.
fn bands(h: usize, rows: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..h).step_by(rows).map(move |y0| (y0, (y0 + rows).min(h)))
}

/// Zero-padded "same" cross-correlation with an odd square kernel.
pub fn conv2d_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (c, h, w) = chw(input)?;
    check_in_channels(params, c)?;
    let (co, k) = (params.out_channels(), params.kernel_size());
    let hw = h * w;
    let kk = c * k * k;
    let mut out = vec![0.0; co * hw];
    for (o, &b) in params.biases.data().iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(b);
    }
    let rows = band_rows(kk, w, h);
    let mut col = vec![0.0; kk * rows * w];
    for (y0, y1) in bands(h, rows) {
        let bl = (y1 - y0) * w;
        im2col(input.data(), (c, h, w), k, (y0, y1), &mut col);
        gemm(co, kk, bl, params.kernels.data(), (kk, 1), &col, (bl, 1), 1.0, &mut out[y0 * w..], hw);
    }
    Ok(Tensor::from_parts(vec![co, h, w], out))
}

/// Gradients of [`conv2d_forward`] with respect to its input and parameters.
pub fn conv2d_backward(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
) -> Result<(Tensor, LayerParams)> {
    let (c, h, w) = chw(input)?;
    check_in_channels(params, c)?;
    let (co, k) = (params.out_channels(), params.kernel_size());
    if grad_out.shape() != [co, h, w] {
        return Err(Error::ShapeMismatch {
            left: grad_out.shape().to_vec(),
            right: vec![co, h, w],
        });
    }
    let hw = h * w;
    let kk = c * k * k;
    let g = grad_out.data();
    let gb: Vec<f64> = (0..co)
        .map(|o| g[o * hw..(o + 1) * hw].iter().fold(0.0, |a, &v| a + v))
        .collect();

    let rows = band_rows(kk, w, h);
    let mut col = vec![0.0; kk * rows * w];
    let mut gcol = vec![0.0; kk * rows * w];
    let mut gk = vec![0.0; co * kk];
    let mut gin = vec![0.0; c * hw];
    for (y0, y1) in bands(h, rows) {
        let bl = (y1 - y0) * w;
        let gband = &g[y0 * w..];
        im2col(input.data(), (c, h, w), k, (y0, y1), &mut col);
        gemm(co, bl, kk, gband, (hw, 1), &col, (1, bl), 1.0, &mut gk, kk);
        gemm(kk, co, bl, params.kernels.data(), (1, kk), gband, (hw, 1), 0.0, &mut gcol, bl);
        col2im(&gcol, (c, h, w), k, (y0, y1), &mut gin);
    }

    Ok((
        Tensor::from_parts(vec![c, h, w], gin),
        LayerParams {
            kernels: Tensor::from_parts(params.kernels.shape().to_vec(), gk),
            biases: Tensor::from_parts(vec![co], gb),
        },
    ))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes gradient where the forward output was positive.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.zip_with(grad_out, |o, g| if o > 0.0 { g } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPoolOutput {
    pub output: Tensor,
    /// Flat input index of the winner of each output cell.
    pub argmax: Vec<usize>,
}

/// 2x2 stride-2 max pooling; ties go to the first element in row-major order.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<MaxPoolOutput> {
    let (c, h, w) = chw(input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidTensor(format!(
            "max pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for y in 0..oh {
            for xo in 0..ow {
                let base = ci * h * w + 2 * y * w + 2 * xo;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok(MaxPoolOutput {
        output: Tensor::from_parts(vec![c, oh, ow], out),
        argmax,
    })
}

pub fn maxpool2x2_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if argmax.len() != grad_out.len() {
        return Err(Error::ShapeMismatch {
            left: vec![argmax.len()],
            right: grad_out.shape().to_vec(),
        });
    }
    let mut gin = Tensor::zeros(input_shape.to_vec());
    let g = gin.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    Ok(gin)
}

/// 2x2 stride-2 transposed convolution, doubling height and width.
///
/// `out[o, 2i+dy, 2j+dx] = b[o] + sum_c in[c, i, j] * W[o, c, dy, dx]`.
pub fn deconv2x2s2_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let (c, h, w) = chw(input)?;
    check_in_channels(params, c)?;
    if params.kernel_size() != 2 {
        return Err(Error::InvalidTensor("deconvolution needs a 2x2 kernel".into()));
    }
    let co = params.out_channels();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; co * oh * ow];
    let mut tap = vec![0.0; co * hw];
    for d in 0..4 {
        let (dy, dx) = (d / 2, d % 2);
        gemm(co, c, hw, &params.kernels.data()[d..], (4 * c, 4), input.data(), (hw, 1), 0.0, &mut tap, hw);
        for o in 0..co {
            let b = params.biases.data()[o];
            for i in 0..h {
                let dst = &mut out[o * oh * ow + (2 * i + dy) * ow..][..ow];
                let src = &tap[o * hw + i * w..][..w];
                for j in 0..w {
                    dst[2 * j + dx] = src[j] + b;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![co, oh, ow], out))
}

pub fn deconv2x2s2_backward(
    input: &Tensor,
    params: &LayerParams,
    grad_out: &Tensor,
) -> Result<(Tensor, LayerParams)> {
    let (c, h, w) = chw(input)?;
    check_in_channels(params, c)?;
    let co = params.out_channels();
    let (oh, ow) = (2 * h, 2 * w);
    if grad_out.shape() != [co, oh, ow] {
        return Err(Error::ShapeMismatch {
            left: grad_out.shape().to_vec(),
            right: vec![co, oh, ow],
        });
    }
    let hw = h * w;
    let g = grad_out.data();
    let mut gin = vec![0.0; c * hw];
    let mut gk = vec![0.0; co * c * 4];
    let mut gb = vec![0.0; co];
    let mut tap = vec![0.0; co * hw];
    let mut gk_tap = vec![0.0; co * c];
    for d in 0..4 {
        let (dy, dx) = (d / 2, d % 2);
        for o in 0..co {
            for i in 0..h {
                let src = &g[o * oh * ow + (2 * i + dy) * ow..][..ow];
                let dst = &mut tap[o * hw + i * w..][..w];
                for j in 0..w {
                    dst[j] = src[2 * j + dx];
                }
            }
        }
        for (o, b) in gb.iter_mut().enumerate() {
            *b += tap[o * hw..(o + 1) * hw].iter().fold(0.0, |a, &v| a + v);
        }
        // d in / tap: W_d^T (c x co) * tap (co x hw)
        gemm(c, co, hw, &params.kernels.data()[d..], (4, 4 * c), &tap, (hw, 1), 1.0, &mut gin, hw);
        // d W_d: tap (co x hw) * in^T (hw x c)
        gemm(co, hw, c, &tap, (hw, 1), input.data(), (1, hw), 0.0, &mut gk_tap, c);
        for o in 0..co {
            for ci in 0..c {
                gk[(o * c + ci) * 4 + d] = gk_tap[o * c + ci];
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![c, h, w], gin),
        LayerParams {
            kernels: Tensor::from_parts(params.kernels.shape().to_vec(), gk),
            biases: Tensor::from_parts(vec![co], gb),
        },
    ))
}

/// Channel-wise concatenation of two maps with equal spatial size.
pub fn concat_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ca, h, w) = chw(a)?;
    let (cb, hb, wb) = chw(b)?;
    if (h, w) != (hb, wb) {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Ok(Tensor::from_parts(vec![ca + cb, h, w], data))
}

/// Splits a concatenated gradient back into its first `ca` channels and the rest.
pub fn concat_backward(grad_out: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = chw(grad_out)?;
    if ca == 0 || ca >= c {
        return Err(Error::InvalidTensor(format!(
            "cannot split {c} channels at {ca}"
        )));
    }
    let (ga, gb) = grad_out.data().split_at(ca * h * w);
    Ok((
        Tensor::from_parts(vec![ca, h, w], ga.to_vec()),
        Tensor::from_parts(vec![c - ca, h, w], gb.to_vec()),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an independent reference.
    fn naive_conv(input: &Tensor, p: &LayerParams) -> Tensor {
        let (c, h, w) = chw(input).unwrap();
        let (co, k) = (p.out_channels(), p.kernel_size());
        let pad = (k / 2) as isize;
        let x = input.data();
        let kd = p.kernels.data();
        let mut out = vec![0.0; co * h * w];
        for o in 0..co {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = p.biases.data()[o];
                    for ci in 0..c {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += x[ci * h * w + sy as usize * w + sx as usize]
                                        * kd[((o * c + ci) * k + ky as usize) * k + kx as usize];
                                }
                            }
                        }
                    }
                    out[o * h * w + y as usize * w + xx as usize] = acc;
                }
            }
        }
        Tensor::new([co, h, w], out).unwrap()
    }

    fn naive_deconv(input: &Tensor, p: &LayerParams) -> Tensor {
        let (c, h, w) = chw(input).unwrap();
        let co = p.out_channels();
        let mut out = vec![0.0; co * 4 * h * w];
        for o in 0..co {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let (i, j, dy, dx) = (y / 2, x / 2, y % 2, x % 2);
                    let mut acc = p.biases.data()[o];
                    for ci in 0..c {
                        acc += input.data()[ci * h * w + i * w + j]
                            * p.kernels.data()[((o * c + ci) * 2 + dy) * 2 + dx];
                    }
                    out[o * 4 * h * w + y * 2 * w + x] = acc;
                }
            }
        }
        Tensor::new([co, 2 * h, 2 * w], out).unwrap()
    }

    fn close(a: &Tensor, b: &Tensor, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_zero_input_zero_bias() {
        let mut rng = SeededRng::new(1);
        let p = LayerParams::he(2, 1, 3, &mut rng);
        let out = conv2d_forward(&Tensor::zeros([1, 3, 3]), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = SeededRng::new(2);
        let x = rng.normal_tensor([1, 5, 4], 0.0, 1.0);
        let mut p = LayerParams::zeros(1, 1, 3);
        p.kernels.data_mut()[4] = 1.0;
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = SeededRng::new(3);
        let x = rng.normal_tensor([3, 6, 5], 0.0, 1.0);
        let mut p = LayerParams::he(4, 3, 3, &mut rng);
        p.biases = rng.normal_tensor([4], 0.0, 1.0);
        close(&conv2d_forward(&x, &p).unwrap(), &naive_conv(&x, &p), 1e-12);
        let p1 = LayerParams::he(2, 3, 1, &mut rng);
        close(&conv2d_forward(&x, &p1).unwrap(), &naive_conv(&x, &p1), 1e-12);
    }

    #[test]
    fn deconv_matches_naive_loops() {
        let mut rng = SeededRng::new(4);
        let x = rng.normal_tensor([3, 3, 4], 0.0, 1.0);
        let mut p = LayerParams::he(2, 3, 2, &mut rng);
        p.biases = rng.normal_tensor([2], 0.0, 1.0);
        let out = deconv2x2s2_forward(&x, &p).unwrap();
        assert_eq!(out.shape(), &[2, 6, 8]);
        close(&out, &naive_deconv(&x, &p), 1e-12);
    }

    #[test]
    fn relu_kills_negatives() {
        let x = Tensor::from_vec(vec![-2.0, -0.5, 0.0, 3.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let x = Tensor::full([1, 2, 4], 1.0);
        let mp = maxpool2x2_forward(&x).unwrap();
        assert_eq!(mp.argmax, vec![0, 2]);
        let g = maxpool2x2_backward(x.shape(), &mp.argmax, &Tensor::full([1, 1, 2], 1.0)).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(maxpool2x2_forward(&Tensor::zeros([1, 3, 4])).is_err());
    }

    #[test]
    fn concat_round_trip() {
        let mut rng = SeededRng::new(5);
        let a = rng.normal_tensor([2, 3, 3], 0.0, 1.0);
        let b = rng.normal_tensor([1, 3, 3], 0.0, 1.0);
        let c = concat_forward(&a, &b).unwrap();
        assert_eq!(c.shape(), &[3, 3, 3]);
        let (ga, gb) = concat_backward(&c, 2).unwrap();
        assert_eq!((ga, gb), (a, b));
        assert!(concat_forward(&Tensor::zeros([1, 2, 2]), &Tensor::zeros([1, 4, 4])).is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let p = LayerParams::zeros(2, 3, 3);
        assert!(conv2d_forward(&Tensor::zeros([2, 4, 4]), &p).is_err());
        let d = LayerParams::zeros(2, 3, 2);
        assert!(deconv2x2s2_forward(&Tensor::zeros([2, 4, 4]), &d).is_err());
    }
}
