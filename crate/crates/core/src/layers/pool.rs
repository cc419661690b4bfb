use crate::error::{Error, Result};
use crate::tensor::{Backward, Float, Tensor, Var};

pub fn pool_output(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pool window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(format!("pool window {window} exceeds input {h}x{w}")));
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

fn dims4(op: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match shape {
        &[n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(format!("{op} expects [n, c, h, w], got {shape:?}"))),
    }
}

/// Max over each window; ties go to the first element in row-major order.
pub fn max_pool2d<'t, T: Float>(x: Var<'t, T>, window: usize, stride: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = dims4("max_pool2d", xv.shape())?;
    let (oh, ow) = pool_output(h, w, window, stride)?;
    let data = xv.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let tape = x.tape();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * stride * w + j * stride;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = base + (i * stride + di) * w + j * stride + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                tape.note_branch(best as u64);
                argmax.push(best);
                out.push(data[best]);
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, oh, ow], out);
    Ok(tape.record(&[x], out, MaxPoolRule { argmax, input_len: data.len() }))
}

struct MaxPoolRule {
    argmax: Vec<usize>,
    input_len: usize,
}

impl<T: Float> Backward<T> for MaxPoolRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); self.input_len];
        for (&idx, &gv) in self.argmax.iter().zip(g) {
            dx[idx] += gv;
        }
        vec![Some(dx)]
    }
}

/// Pads both spatial axes with `pad` zeros on each side.
pub fn zero_pad2d<'t, T: Float>(x: Var<'t, T>, pad: usize) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = dims4("zero_pad2d", xv.shape())?;
    if pad == 0 {
        return Ok(x);
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); n * c * ph * pw];
    for plane in 0..n * c {
        for r in 0..h {
            let src = &xv.data()[(plane * h + r) * w..(plane * h + r + 1) * w];
            let start = (plane * ph + r + pad) * pw + pad;
            out[start..start + w].copy_from_slice(src);
        }
    }
    let out = Tensor::from_parts(vec![n, c, ph, pw], out);
    Ok(x.tape().record(&[x], out, PadRule { planes: n * c, h, w, pad }))
}

struct PadRule {
    planes: usize,
    h: usize,
    w: usize,
    pad: usize,
}

impl<T: Float> Backward<T> for PadRule {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (h, w, pad) = (self.h, self.w, self.pad);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut dx = Vec::with_capacity(self.planes * h * w);
        for plane in 0..self.planes {
            for r in 0..h {
                let start = (plane * ph + r + pad) * pw + pad;
                dx.extend_from_slice(&g[start..start + w]);
            }
        }
        vec![Some(dx)]
    }
}

/// `[n, c, h, w]` → `[n, c]` spatial mean.
pub fn global_avg_pool<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let xv = x.value();
    let (n, c, h, w) = dims4("global_avg_pool", xv.shape())?;
    let spatial = h * w;
    let scale = T::one() / T::of(spatial as f64);
    let out: Vec<T> = xv.data().chunks(spatial).map(|p| p.iter().copied().sum::<T>() * scale).collect();
    let out = Tensor::from_parts(vec![n, c], out);
    Ok(x.tape().record(&[x], out, AvgRule { spatial, scale }))
}

struct AvgRule<T> {
    spatial: usize,
    scale: T,
}

impl<T: Float> Backward<T> for AvgRule<T> {
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v * self.scale, self.spatial)).collect();
        vec![Some(dx)]
    }
}
