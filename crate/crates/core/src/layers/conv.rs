//! 2-D convolution and transpose convolution via im2col + GEMM.
//!
//! Conv weights are `[out, in, k, k]`; transpose-conv weights are
//! `[in, out, k, k]`, so one array is the adjoint of the other.

use super::{ForwardCtx, ParamDecl, ParamRole};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Backward, Float, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { in_channels, out_channels, kernel, stride, padding }
    }

    pub(crate) fn check_in_channels(&self, channels: usize) -> Result<()> {
        if channels != self.in_channels {
            return Err(Error::shape(format!("layer expects {} input channels, got {channels}", self.in_channels)));
        }
        Ok(())
    }

    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((conv_dim(h, self.kernel, self.stride, self.padding)?, conv_dim(w, self.kernel, self.stride, self.padding)?))
    }

    pub fn transpose_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            transpose_dim(h, self.kernel, self.stride, self.padding)?,
            transpose_dim(w, self.kernel, self.stride, self.padding)?,
        ))
    }

    pub(crate) fn params(&self, prefix: &str, transpose: bool) -> Vec<ParamDecl> {
        let k = self.kernel;
        let (shape, fan_in) = if transpose {
            (vec![self.in_channels, self.out_channels, k, k], self.in_channels * k * k)
        } else {
            (vec![self.out_channels, self.in_channels, k, k], self.in_channels * k * k)
        };
        vec![
            ParamDecl::new(format!("{prefix}.weight"), shape, ParamRole::Weight { fan_in }),
            ParamDecl::new(format!("{prefix}.bias"), vec![self.out_channels], ParamRole::Bias),
        ]
    }

    pub fn forward<'t, T: Float>(
        &self,
        ctx: &ForwardCtx<'t, '_, T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = ctx.param(&format!("{prefix}.weight"))?;
        let b = ctx.param(&format!("{prefix}.bias"))?;
        conv2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn forward_transpose<'t, T: Float>(
        &self,
        ctx: &ForwardCtx<'t, '_, T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let w = ctx.param(&format!("{prefix}.weight"))?;
        let b = ctx.param(&format!("{prefix}.bias"))?;
        conv2d_transpose(x, w, Some(b), self.stride, self.padding)
    }
}

/// floor((in + 2·pad − kernel) / stride) + 1
pub fn conv_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::invalid("kernel and stride must be positive"));
    }
    let padded = input + 2 * pad;
    if kernel > padded {
        return Err(Error::shape(format!("kernel {kernel} larger than padded input {padded}")));
    }
    Ok((padded - kernel) / stride + 1)
}

/// (in − 1)·stride − 2·pad + kernel
pub fn transpose_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::invalid("kernel and stride must be positive"));
    }
    let out = (input as isize - 1) * stride as isize - 2 * pad as isize + kernel as isize;
    if out <= 0 {
        return Err(Error::shape(format!(
            "transpose conv output dimension {out} (in {input}, kernel {kernel}, stride {stride}, pad {pad})"
        )));
    }
    Ok(out as usize)
}

/// Geometry of one image-to-column unfolding.
#[derive(Clone, Copy, Debug)]
struct Unfold {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Unfold {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// `image` is `[channels, height, width]`; `cols` is `[rows, out_h·out_w]`.
    fn im2col<T: Float>(&self, image: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.pad as isize);
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oh in 0..self.out_h {
                        let ih = oh as isize * s - p + ki as isize;
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        if ih < 0 || ih >= self.height as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.width..(ih as usize + 1) * self.width];
                        for (ow, v) in line.iter_mut().enumerate() {
                            let iw = ow as isize * s - p + kj as isize;
                            *v = if iw < 0 || iw >= self.width as isize { T::zero() } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Unfold::im2col`]: accumulates columns back into `image`.
    fn col2im<T: Float>(&self, cols: &[T], image: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride as isize, self.pad as isize);
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oh in 0..self.out_h {
                        let ih = oh as isize * s - p + ki as isize;
                        if ih < 0 || ih >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.width..(ih as usize + 1) * self.width];
                        for ow in 0..self.out_w {
                            let iw = ow as isize * s - p + kj as isize;
                            if iw >= 0 && iw < self.width as isize {
                                dst[iw as usize] += src[oh * self.out_w + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_4d(op: &'static str, x: &Tensor<impl Float>) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::shape(format!("{op} expects [n, c, h, w], got {:?}", x.shape())));
    }
    Ok(())
}

fn check_bias<T: Float>(bias: Option<&Var<'_, T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::ShapeMismatch { op: "conv bias", left: vec![channels], right: b.shape() });
        }
    }
    Ok(())
}

fn add_channel_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<T: Float>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in g.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().copied().sum();
    }
    db
}

/// `[n, c, h, w]` ⊛ `[o, c, k, k]` → `[n, o, oh, ow]`.
pub fn conv2d<'t, T: Float>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), weight.value());
    check_4d("conv2d", &xv)?;
    check_4d("conv2d weight", &wv)?;
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (o, wc, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    if wc != c || k != k2 {
        return Err(Error::ShapeMismatch { op: "conv2d", left: xv.shape().to_vec(), right: wv.shape().to_vec() });
    }
    check_bias(bias.as_ref(), o)?;
    let out_h = conv_dim(h, k, stride, padding)?;
    let out_w = conv_dim(w, k, stride, padding)?;
    let geom = Unfold { channels: c, height: h, width: w, kernel: k, stride, pad: padding, out_h, out_w };

    let (rows, ncols) = (geom.rows(), geom.cols());
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); n * o * ncols];
    let in_sz = c * h * w;
    for i in 0..n {
        geom.im2col(&xv.data()[i * in_sz..(i + 1) * in_sz], &mut cols);
        gemm(o, rows, ncols, wv.data(), false, &cols, false, &mut out[i * o * ncols..(i + 1) * o * ncols], false);
    }
    if let Some(b) = &bias {
        add_channel_bias(&mut out, b.value().data(), ncols);
    }
    let out = Tensor::from_parts(vec![n, o, out_h, out_w], out);
    let rule = ConvRule { geom, batch: n, out_channels: o };
    let tape = x.tape();
    Ok(match bias {
        Some(b) => tape.record(&[x, weight, b], out, rule),
        None => tape.record(&[x, weight], out, rule),
    })
}

struct ConvRule {
    geom: Unfold,
    batch: usize,
    out_channels: usize,
}

impl<T: Float> Backward<T> for ConvRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let geom = &self.geom;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (rows, ncols, o) = (geom.rows(), geom.cols(), self.out_channels);
        let in_sz = geom.channels * geom.height * geom.width;
        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = needs[1].then(|| vec![T::zero(); w.len()]);
        let mut cols = vec![T::zero(); rows * ncols];
        for i in 0..self.batch {
            let gi = &g[i * o * ncols..(i + 1) * o * ncols];
            if let Some(dw) = dw.as_mut() {
                geom.im2col(&x[i * in_sz..(i + 1) * in_sz], &mut cols);
                gemm(o, ncols, rows, gi, false, &cols, true, dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(rows, o, ncols, w, true, gi, false, &mut cols, false);
                geom.col2im(&cols, &mut dx[i * in_sz..(i + 1) * in_sz]);
            }
        }
        let mut grads = vec![dx, dw];
        if inputs.len() == 3 {
            grads.push(needs[2].then(|| channel_sums(g, o, ncols)));
        }
        grads
    }
}

/// `[n, c, h, w]` with weights `[c, o, k, k]` → `[n, o, (h−1)s−2p+k, …]`.
pub fn conv2d_transpose<'t, T: Float>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, T>> {
    let (xv, wv) = (x.value(), weight.value());
    check_4d("conv2d_transpose", &xv)?;
    check_4d("conv2d_transpose weight", &wv)?;
    let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (wc, o, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    if wc != c || k != k2 {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transpose",
            left: xv.shape().to_vec(),
            right: wv.shape().to_vec(),
        });
    }
    check_bias(bias.as_ref(), o)?;
    let out_h = transpose_dim(h, k, stride, padding)?;
    let out_w = transpose_dim(w, k, stride, padding)?;
    // Unfolding of the *output* image whose columns line up with input pixels.
    let geom = Unfold { channels: o, height: out_h, width: out_w, kernel: k, stride, pad: padding, out_h: h, out_w: w };

    let (rows, ncols) = (geom.rows(), geom.cols());
    let out_sz = o * out_h * out_w;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); n * out_sz];
    for i in 0..n {
        gemm(rows, c, ncols, wv.data(), true, &xv.data()[i * c * ncols..(i + 1) * c * ncols], false, &mut cols, false);
        geom.col2im(&cols, &mut out[i * out_sz..(i + 1) * out_sz]);
    }
    if let Some(b) = &bias {
        add_channel_bias(&mut out, b.value().data(), out_h * out_w);
    }
    let out = Tensor::from_parts(vec![n, o, out_h, out_w], out);
    let rule = ConvTransposeRule { geom, batch: n, in_channels: c };
    let tape = x.tape();
    Ok(match bias {
        Some(b) => tape.record(&[x, weight, b], out, rule),
        None => tape.record(&[x, weight], out, rule),
    })
}

struct ConvTransposeRule {
    geom: Unfold,
    batch: usize,
    in_channels: usize,
}

impl<T: Float> Backward<T> for ConvTransposeRule {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let geom = &self.geom;
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let (rows, ncols, c) = (geom.rows(), geom.cols(), self.in_channels);
        let out_sz = geom.channels * geom.height * geom.width;
        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = needs[1].then(|| vec![T::zero(); w.len()]);
        let mut cols = vec![T::zero(); rows * ncols];
        for i in 0..self.batch {
            geom.im2col(&g[i * out_sz..(i + 1) * out_sz], &mut cols);
            if let Some(dx) = dx.as_mut() {
                gemm(c, rows, ncols, w, false, &cols, false, &mut dx[i * c * ncols..(i + 1) * c * ncols], false);
            }
            if let Some(dw) = dw.as_mut() {
                gemm(c, ncols, rows, &x[i * c * ncols..(i + 1) * c * ncols], false, &cols, true, dw, true);
            }
        }
        let mut grads = vec![dx, dw];
        if inputs.len() == 3 {
            grads.push(needs[2].then(|| channel_sums(g, geom.channels, geom.height * geom.width)));
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, weighted_sum};
    use crate::tensor::{RngStream, Tape};

    fn random(shape: &[usize], rng: &mut RngStream) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.uniform(-1.0, 1.0))
    }

    /// Direct nested-loop convolution, used as an independent reference.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for f in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let r = (i * stride + ki) as isize - pad as isize;
                                    let q = (j * stride + kj) as isize - pad as isize;
                                    if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data()[((b * c + ch) * h + r as usize) * wd + q as usize]
                                        * w.data()[((f * c + ch) * k + ki) * k + kj];
                                }
                            }
                        }
                        out[((b * o + f) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn stem_shape() {
        assert_eq!(conv_dim(224, 7, 2, 3).unwrap(), 112);
        assert!(conv_dim(3, 7, 1, 1).is_err());
    }

    #[test]
    fn transpose_shape() {
        assert_eq!(transpose_dim(8, 4, 2, 1).unwrap(), 16);
        assert!(transpose_dim(1, 1, 1, 1).is_err());
    }

    #[test]
    fn ones_sum_to_nine() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = conv2d(x, w, None, 1, 0).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn kernel_larger_than_input_is_an_error() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones([1, 1, 5, 5]));
        assert!(conv2d(x, w, None, 1, 0).is_err());
        assert!(conv2d(x, w, None, 1, 1).is_ok());
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = RngStream::new(31, 0);
        for (stride, pad, k) in [(1, 0, 3), (2, 1, 3), (2, 3, 7), (1, 1, 1), (3, 2, 4)] {
            let x = random(&[2, 3, 9, 8], &mut rng);
            let w = random(&[4, 3, k, k], &mut rng);
            let tape = Tape::<f64>::new();
            let y = conv2d(tape.constant(x.clone()), tape.constant(w.clone()), None, stride, pad).unwrap();
            let want = naive_conv(&x, &w, stride, pad);
            assert_eq!(y.shape(), want.shape());
            assert!(y.value().max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn transpose_identity_kernel_is_identity() {
        let mut rng = RngStream::new(32, 0);
        let x = random(&[2, 3, 4, 5], &mut rng);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let tape = Tape::<f64>::new();
        let w = tape.constant(Tensor::new([3, 3, 1, 1], eye).unwrap());
        let y = conv2d_transpose(tape.constant(x.clone()), w, None, 1, 0).unwrap();
        assert_eq!(y.value(), x);
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        let mut rng = RngStream::new(33, 0);
        for (h, k, s, p) in [(8, 4, 2, 1), (7, 3, 2, 1), (5, 3, 1, 1), (9, 5, 2, 2), (6, 2, 2, 0)] {
            let (c, o) = (2, 3);
            let x = random(&[2, c, h, h], &mut rng);
            let w = random(&[o, c, k, k], &mut rng);
            let tape = Tape::<f64>::new();
            let cx = conv2d(tape.constant(x.clone()), tape.constant(w.clone()), None, s, p).unwrap().value();
            let y = random(cx.shape(), &mut rng);
            let ty = conv2d_transpose(tape.constant(y.clone()), tape.constant(w.clone()), None, s, p);
            let ty = ty.unwrap().value();
            assert_eq!(ty.shape(), x.shape(), "h={h} k={k} s={s} p={p}");
            let lhs = cx.dot(&y).unwrap();
            let rhs = x.dot(&ty).unwrap();
            assert!((lhs - rhs).abs() < 1e-5, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = RngStream::new(34, 0);
        for trial in 0..10 {
            let (s, p, k) = [(1, 1, 3), (2, 1, 3), (2, 0, 2)][trial % 3];
            let x = random(&[2, 2, 6, 5], &mut rng);
            let w = random(&[3, 2, k, k], &mut rng);
            let b = random(&[3], &mut rng);
            let oshape = [2, 3, (6 + 2 * p - k) / s + 1, (5 + 2 * p - k) / s + 1];
            let proj = random(&oshape, &mut rng);
            let rw = grad_check(
                |wv| {
                    let t = wv.tape();
                    weighted_sum(conv2d(t.constant(x.clone()), wv, Some(t.constant(b.clone())), s, p)?, &proj)
                },
                &w,
                1e-5,
            )
            .unwrap();
            let rx = grad_check(
                |xv| {
                    let t = xv.tape();
                    weighted_sum(conv2d(xv, t.constant(w.clone()), Some(t.constant(b.clone())), s, p)?, &proj)
                },
                &x,
                1e-5,
            )
            .unwrap();
            let rb = grad_check(
                |bv| {
                    let t = bv.tape();
                    weighted_sum(conv2d(t.constant(x.clone()), t.constant(w.clone()), Some(bv), s, p)?, &proj)
                },
                &b,
                1e-5,
            )
            .unwrap();
            for r in [rw, rx, rb] {
                assert!(r.max_rel_error < 1e-4, "{r:?}");
            }
        }
    }

    #[test]
    fn transpose_gradients_match_finite_differences() {
        let mut rng = RngStream::new(35, 0);
        for _ in 0..10 {
            let x = random(&[2, 3, 3, 4], &mut rng);
            let w = random(&[3, 2, 4, 4], &mut rng);
            let b = random(&[2], &mut rng);
            let proj = random(&[2, 2, 6, 8], &mut rng);
            let rw = grad_check(
                |wv| {
                    let t = wv.tape();
                    weighted_sum(conv2d_transpose(t.constant(x.clone()), wv, Some(t.constant(b.clone())), 2, 1)?, &proj)
                },
                &w,
                1e-5,
            )
            .unwrap();
            let rx = grad_check(
                |xv| {
                    let t = xv.tape();
                    weighted_sum(conv2d_transpose(xv, t.constant(w.clone()), Some(t.constant(b.clone())), 2, 1)?, &proj)
                },
                &x,
                1e-5,
            )
            .unwrap();
            let rb = grad_check(
                |bv| {
                    let t = bv.tape();
                    weighted_sum(conv2d_transpose(t.constant(x.clone()), t.constant(w.clone()), Some(bv), 2, 1)?, &proj)
                },
                &b,
                1e-5,
            )
            .unwrap();
            for r in [rw, rx, rb] {
                assert!(r.max_rel_error < 1e-4, "{r:?}");
            }
        }
    }
}
