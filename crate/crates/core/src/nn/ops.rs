//! Parameter-free operations and their gradients.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of [`relu`] given its output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(dy, |out, g| if out > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        // Split on sign so large magnitudes never overflow exp.
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(dy, |p, g| g * p * (T::one() - p))
}

/// Softmax across the channel axis at every pixel.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut y = Tensor::zeros(x.shape());
    let mut exps = vec![T::zero(); c];
    for b in 0..n {
        let xb = x.item(b);
        let yb = y.item_mut(b);
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for ch in 0..c {
                max = max.max(xb[ch * plane + p]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (xb[ch * plane + p] - max).exp();
                exps[ch] = e;
                total += e;
            }
            for ch in 0..c {
                yb[ch * plane + p] = exps[ch] / total;
            }
        }
    }
    y
}

pub fn softmax_channels_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_shape(y.shape(), "softmax output gradient")?;
    let [n, c, h, w] = y.shape();
    let plane = h * w;
    let mut dx = Tensor::zeros(y.shape());
    for b in 0..n {
        let yb = y.item(b);
        let gb = dy.item(b);
        let db = dx.item_mut(b);
        for p in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                dot += yb[ch * plane + p] * gb[ch * plane + p];
            }
            for ch in 0..c {
                let i = ch * plane + p;
                db[i] = yb[i] * (gb[i] - dot);
            }
        }
    }
    Ok(dx)
}

/// Nearest-neighbour up-sampling by a factor of two.
pub fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let (ho, wo) = (2 * h, 2 * w);
    let src = x.data();
    let dst = y.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * ho * wo..(plane + 1) * ho * wo];
        for yy in 0..h {
            let row = &s[yy * w..(yy + 1) * w];
            let (r0, r1) = d[2 * yy * wo..(2 * yy + 2) * wo].split_at_mut(wo);
            for (xx, &v) in row.iter().enumerate() {
                r0[2 * xx] = v;
                r0[2 * xx + 1] = v;
            }
            r1.copy_from_slice(r0);
        }
    }
    y
}

pub fn upsample_nearest2x_backward<T: Scalar>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, ho, wo] = dy.shape();
    if ho % 2 != 0 || wo % 2 != 0 {
        return Err(shape_err!("up-sampling gradient has odd size {ho}x{wo}"));
    }
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * ho * wo..(plane + 1) * ho * wo];
        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
        for yy in 0..h {
            let r0 = &s[2 * yy * wo..(2 * yy + 1) * wo];
            let r1 = &s[(2 * yy + 1) * wo..(2 * yy + 2) * wo];
            for xx in 0..w {
                d[yy * w + xx] = r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1];
            }
        }
    }
    Ok(dx)
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat of zero tensors"))?;
    let [n, _, h, w] = first.shape();
    for p in parts {
        if p.batch() != n || p.height() != h || p.width() != w {
            return Err(shape_err!(
                "concat: {:?} incompatible with {:?}",
                p.shape(),
                first.shape()
            ));
        }
    }
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(b));
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

/// Inverse of [`concat_channels`] for gradients.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [n, c, h, w] = x.shape();
    if sizes.iter().sum::<usize>() != c {
        return Err(shape_err!("split sizes {sizes:?} do not sum to {c}"));
    }
    let plane = h * w;
    let mut out: Vec<Vec<T>> = sizes.iter().map(|s| Vec::with_capacity(n * s * plane)).collect();
    for b in 0..n {
        let item = x.item(b);
        let mut offset = 0;
        for (i, &s) in sizes.iter().enumerate() {
            out[i].extend_from_slice(&item[offset * plane..(offset + s) * plane]);
            offset += s;
        }
    }
    out.into_iter()
        .zip(sizes)
        .map(|(data, &s)| Tensor::from_vec([n, s, h, w], data))
        .collect()
}

/// 3x3 max pooling with stride 2 and padding 1.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2d {
    cache: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool2d {
    const K: usize = 3;
    const S: usize = 2;
    const P: usize = 1;

    fn output_size(h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * Self::P - Self::K) / Self::S + 1,
            (w + 2 * Self::P - Self::K) / Self::S + 1,
        )
    }

    fn run<T: Scalar>(x: &Tensor<T>, mut record: Option<&mut Vec<u32>>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if h < 2 || w < 2 {
            return Err(shape_err!("max pool input {h}x{w} too small"));
        }
        let (ho, wo) = Self::output_size(h, w);
        let mut y = Tensor::zeros([n, c, ho, wo]);
        let src = x.data();
        let dst = y.data_mut();
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut arg = 0usize;
                    let y0 = (oy * Self::S).saturating_sub(Self::P);
                    let y1 = (oy * Self::S + Self::K - Self::P).min(h);
                    let x0 = (ox * Self::S).saturating_sub(Self::P);
                    let x1 = (ox * Self::S + Self::K - Self::P).min(w);
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let v = s[iy * w + ix];
                            if v > best {
                                best = v;
                                arg = iy * w + ix;
                            }
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    dst[o] = best;
                    if let Some(rec) = record.as_deref_mut() {
                        rec[o] = arg as u32;
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Self::run(x, None)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        let (ho, wo) = Self::output_size(h, w);
        let mut arg = vec![0u32; n * c * ho * wo];
        let y = Self::run(x, Some(&mut arg))?;
        self.cache = Some((arg, x.shape()));
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (arg, shape) = self
            .cache
            .take()
            .ok_or_else(|| shape_err!("max pool backward called without a cached forward"))?;
        let [_, _, h, w] = shape;
        let (ho, wo) = Self::output_size(h, w);
        let mut dx = Tensor::zeros(shape);
        let d = dx.data_mut();
        for (o, (&a, &g)) in arg.iter().zip(dy.data()).enumerate() {
            let plane = o / (ho * wo);
            d[plane * h * w + a as usize] += g;
        }
        Ok(dx)
    }
}

/// Source taps of one output coordinate for half-pixel-centred bilinear
/// resampling.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_lo: f64,
    w_hi: f64,
}

fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = src - lo as f64;
            Tap {
                lo,
                hi,
                w_lo: 1.0 - frac,
                w_hi: frac,
            }
        })
        .collect()
}

/// Bilinear resampling of every channel plane to `out_h x out_w`, with
/// half-pixel centres and edge clamping.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::Argument(format!(
            "target size must be positive, got {out_h}x{out_w}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(shape_err!("cannot resample an empty plane"));
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut y = Tensor::zeros([n, c, out_h, out_w]);
    let src = x.data();
    let dst = y.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, a) in ty.iter().enumerate() {
            let (ya, yb) = (T::lit(a.w_lo), T::lit(a.w_hi));
            for (ox, b) in tx.iter().enumerate() {
                let (xa, xb) = (T::lit(b.w_lo), T::lit(b.w_hi));
                let top = s[a.lo * w + b.lo] * xa + s[a.lo * w + b.hi] * xb;
                let bottom = s[a.hi * w + b.lo] * xa + s[a.hi * w + b.hi] * xb;
                d[oy * out_w + ox] = top * ya + bottom * yb;
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`resize_bilinear`]: scatters output gradients back onto the
/// `in_h x in_w` source grid.
pub fn resize_bilinear_backward<T: Scalar>(
    dy: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let [n, c, out_h, out_w] = dy.shape();
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut dx = Tensor::zeros([n, c, in_h, in_w]);
    let src = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        let g = &src[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        let d = &mut dst[plane * in_h * in_w..(plane + 1) * in_h * in_w];
        for (oy, a) in ty.iter().enumerate() {
            let (ya, yb) = (T::lit(a.w_lo), T::lit(a.w_hi));
            for (ox, b) in tx.iter().enumerate() {
                let (xa, xb) = (T::lit(b.w_lo), T::lit(b.w_hi));
                let v = g[oy * out_w + ox];
                d[a.lo * in_w + b.lo] += v * ya * xa;
                d[a.lo * in_w + b.hi] += v * ya * xb;
                d[a.hi * in_w + b.lo] += v * yb * xa;
                d[a.hi * in_w + b.hi] += v * yb * xb;
            }
        }
    }
    Ok(dx)
}
