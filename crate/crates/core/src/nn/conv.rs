//! 2-D convolution lowered to GEMM through row-chunked im2col.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{join, Entry, EntryMut, Module, Param};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Upper bound on the number of output positions lowered at once.
const CHUNK_POSITIONS: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal with fan-out scaling, used ahead of rectifiers.
    KaimingFanOut,
    /// Uniform in `±1/sqrt(fan_in)` for weights and bias.
    UniformFanIn,
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = match init {
            Init::KaimingFanOut => {
                let std = (2.0 / (out_channels * kernel * kernel) as f64).sqrt();
                Tensor::from_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::lit(z * std)
                })
            }
            Init::UniformFanIn => {
                let bound = 1.0 / fan_in.sqrt();
                Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
            }
        };
        let bias = bias.then(|| {
            let bound = 1.0 / fan_in.sqrt();
            let values = match init {
                Init::KaimingFanOut => Tensor::zeros([1, out_channels, 1, 1]),
                Init::UniformFanIn => Tensor::from_fn([1, out_channels, 1, 1], |_| {
                    T::lit(rng.gen_range(-bound..bound))
                }),
            };
            Param::new(values)
        });
        Conv2d {
            weight: Param::new(weight),
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    /// Builds a layer from explicit weights, `[out, in, k, k]`.
    pub fn from_weights(
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [out_channels, in_channels, kh, kw] = weight.shape();
        if kh != kw {
            return Err(shape_err!("only square kernels are supported, got {kh}x{kw}"));
        }
        if let Some(b) = &bias {
            b.expect_shape([1, out_channels, 1, 1], "conv bias")?;
        }
        Ok(Conv2d {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
            in_channels,
            out_channels,
            kernel: kh,
            stride,
            padding,
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(shape_err!("input {h}x{w} smaller than kernel {k}"));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(shape_err!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            ));
        }
        let (ho, wo) = self.output_size(h, w)?;
        let positions = ho * wo;
        let mut y = Tensor::zeros([n, self.out_channels, ho, wo]);
        let k = self.patch_len();
        let wt = self.weight.value.data();
        let mut buf = Vec::new();
        for b in 0..n {
            let xb = x.item(b);
            let yb = y.item_mut(b);
            if self.is_pointwise() {
                unsafe {
                    T::gemm(
                        self.out_channels,
                        k,
                        positions,
                        T::one(),
                        wt.as_ptr(),
                        k as isize,
                        1,
                        xb.as_ptr(),
                        positions as isize,
                        1,
                        T::zero(),
                        yb.as_mut_ptr(),
                        positions as isize,
                        1,
                    );
                }
            } else {
                for (oy0, oy1) in self.row_chunks(ho, wo) {
                    let cols = (oy1 - oy0) * wo;
                    buf.resize(k * cols, T::zero());
                    self.im2col(xb, h, w, oy0, oy1, wo, &mut buf);
                    unsafe {
                        T::gemm(
                            self.out_channels,
                            k,
                            cols,
                            T::one(),
                            wt.as_ptr(),
                            k as isize,
                            1,
                            buf.as_ptr(),
                            cols as isize,
                            1,
                            T::zero(),
                            yb.as_mut_ptr().add(oy0 * wo),
                            positions as isize,
                            1,
                        );
                    }
                }
            }
            if let Some(bias) = &self.bias {
                for (o, plane) in yb.chunks_exact_mut(positions).enumerate() {
                    let bv = bias.value.data()[o];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.backward_impl(dy, true)
            .map(|dx| dx.expect("input gradient requested"))
    }

    /// Accumulates parameter gradients only; for layers fed by the image.
    pub fn backward_params(&mut self, dy: &Tensor<T>) -> Result<()> {
        self.backward_impl(dy, false).map(|_| ())
    }

    fn backward_impl(&mut self, dy: &Tensor<T>, input_grad: bool) -> Result<Option<Tensor<T>>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| shape_err!("conv backward called without a cached forward"))?;
        let [n, _, h, w] = x.shape();
        let (ho, wo) = self.output_size(h, w)?;
        dy.expect_shape([n, self.out_channels, ho, wo], "conv output gradient")?;
        let positions = ho * wo;
        let k = self.patch_len();
        let cout = self.out_channels;
        let mut dx = input_grad.then(|| Tensor::zeros(x.shape()));
        let mut buf = Vec::new();
        let mut dbuf = Vec::new();
        for b in 0..n {
            let xb = x.item(b);
            let dyb = dy.item(b);
            if let Some(bias) = &mut self.bias {
                for (o, plane) in dyb.chunks_exact(positions).enumerate() {
                    let s: T = plane.iter().copied().sum();
                    bias.grad.data_mut()[o] += s;
                }
            }
            let wt = self.weight.value.data();
            let dw = self.weight.grad.data_mut();
            if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
                unsafe {
                    T::gemm(
                        cout,
                        positions,
                        k,
                        T::one(),
                        dyb.as_ptr(),
                        positions as isize,
                        1,
                        xb.as_ptr(),
                        1,
                        positions as isize,
                        T::one(),
                        dw.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = dx.item_mut(b);
                    unsafe {
                        T::gemm(
                            k,
                            cout,
                            positions,
                            T::one(),
                            wt.as_ptr(),
                            1,
                            k as isize,
                            dyb.as_ptr(),
                            positions as isize,
                            1,
                            T::zero(),
                            dxb.as_mut_ptr(),
                            positions as isize,
                            1,
                        );
                    }
                }
                continue;
            }
            for (oy0, oy1) in self.row_chunks(ho, wo) {
                let cols = (oy1 - oy0) * wo;
                buf.resize(k * cols, T::zero());
                self.im2col(xb, h, w, oy0, oy1, wo, &mut buf);
                let dy_chunk = unsafe { dyb.as_ptr().add(oy0 * wo) };
                let dw = self.weight.grad.data_mut();
                unsafe {
                    T::gemm(
                        cout,
                        cols,
                        k,
                        T::one(),
                        dy_chunk,
                        positions as isize,
                        1,
                        buf.as_ptr(),
                        1,
                        cols as isize,
                        T::one(),
                        dw.as_mut_ptr(),
                        k as isize,
                        1,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    dbuf.resize(k * cols, T::zero());
                    let wt = self.weight.value.data();
                    unsafe {
                        T::gemm(
                            k,
                            cout,
                            cols,
                            T::one(),
                            wt.as_ptr(),
                            1,
                            k as isize,
                            dy_chunk,
                            positions as isize,
                            1,
                            T::zero(),
                            dbuf.as_mut_ptr(),
                            cols as isize,
                            1,
                        );
                    }
                    self.col2im(&dbuf, dx.item_mut(b), h, w, oy0, oy1, wo);
                }
            }
        }
        Ok(dx)
    }

    fn row_chunks(&self, ho: usize, wo: usize) -> impl Iterator<Item = (usize, usize)> {
        let rows = (CHUNK_POSITIONS / wo.max(1)).max(1);
        (0..ho).step_by(rows).map(move |r| (r, (r + rows).min(ho)))
    }

    /// Range of output columns whose receptive field tap `kx` lands inside
    /// `[0, w)`.
    fn valid_cols(&self, kx: usize, w: usize, wo: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let kx = kx as isize;
        // ox * s + kx - p >= 0  and  <= w - 1
        let lo = (p - kx).max(0);
        let lo = (lo + s - 1) / s;
        let hi_num = w as isize - 1 + p - kx;
        let hi = if hi_num < 0 { 0 } else { hi_num / s + 1 };
        let lo = (lo as usize).min(wo);
        let hi = (hi as usize).min(wo).max(lo);
        (lo, hi)
    }

    #[allow(clippy::too_many_arguments)]
    fn im2col(
        &self,
        xb: &[T],
        h: usize,
        w: usize,
        oy0: usize,
        oy1: usize,
        wo: usize,
        buf: &mut [T],
    ) {
        let (kk, s, p) = (self.kernel, self.stride, self.padding);
        let cols = (oy1 - oy0) * wo;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &xb[c * h * w..(c + 1) * h * w];
            for ky in 0..kk {
                for kx in 0..kk {
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    let dst_row = &mut buf[row * cols..(row + 1) * cols];
                    for oy in oy0..oy1 {
                        let dst = &mut dst_row[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        dst[..lo].fill(T::zero());
                        dst[hi..].fill(T::zero());
                        if s == 1 {
                            let start = lo + kx - p;
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (ox, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[(ox + lo) * s + kx - p];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn col2im(
        &self,
        buf: &[T],
        dxb: &mut [T],
        h: usize,
        w: usize,
        oy0: usize,
        oy1: usize,
        wo: usize,
    ) {
        let (kk, s, p) = (self.kernel, self.stride, self.padding);
        let cols = (oy1 - oy0) * wo;
        let mut row = 0;
        for c in 0..self.in_channels {
            let plane = &mut dxb[c * h * w..(c + 1) * h * w];
            for ky in 0..kk {
                for kx in 0..kk {
                    let (lo, hi) = self.valid_cols(kx, w, wo);
                    let src_row = &buf[row * cols..(row + 1) * cols];
                    for oy in oy0..oy1 {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &src_row[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in lo..hi {
                            dst[ox * s + kx - p] += src[ox];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "weight"), Entry::Param(&self.weight));
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), Entry::Param(b));
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(&join(prefix, "weight"), EntryMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), EntryMut::Param(b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct six-loop convolution.
    fn naive_conv(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let [n, cin, h, w] = x.shape();
        let (ho, wo) = conv.output_size(h, w).unwrap();
        let (k, s, p) = (conv.kernel, conv.stride, conv.padding as isize);
        Tensor::from_fn([n, conv.out_channels, ho, wo], |[b, o, oy, ox]| {
            let mut acc = conv
                .bias
                .as_ref()
                .map(|bias| bias.value.data()[o])
                .unwrap_or(0.0);
            for c in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * s + ky) as isize - p;
                        let ix = (ox * s + kx) as isize - p;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += conv.weight.value.at(o, c, ky, kx)
                                * x.at(b, c, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matches_direct_convolution_across_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p, h, w) in &[
            (3, 1, 1, 5, 7),
            (3, 2, 1, 9, 6),
            (7, 2, 3, 11, 10),
            (1, 1, 0, 4, 4),
            (1, 2, 0, 6, 5),
            (3, 1, 0, 3, 3),
        ] {
            let conv = Conv2d::<f64>::new(3, 4, k, s, p, true, Init::UniformFanIn, &mut rng);
            let x = random_tensor([2, 3, h, w], &mut rng);
            let fast = conv.infer(&x).unwrap();
            let slow = naive_conv(&x, &conv);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, s, p, true, Init::UniformFanIn, &mut rng);
            let x = random_tensor([2, 2, 5, 6], &mut rng);
            let y = conv.forward(&x).unwrap();
            let r = random_tensor(y.shape(), &mut rng);
            let dx = conv.backward(&r).unwrap();
            let objective = |conv: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
                let y = conv.infer(x).unwrap();
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let eps = 1e-6;
            for i in [0, 7, 19, x.len() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[i] += eps;
                let mut xm = x.clone();
                xm.data_mut()[i] -= eps;
                let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * eps);
                assert!((fd - dx.data()[i]).abs() < 1e-7, "dx[{i}] {fd} vs {}", dx.data()[i]);
            }
            for i in 0..conv.weight.value.len() {
                let mut c2 = conv.clone();
                c2.weight.value.data_mut()[i] += eps;
                let up = objective(&c2, &x);
                c2.weight.value.data_mut()[i] -= 2.0 * eps;
                let down = objective(&c2, &x);
                let fd = (up - down) / (2.0 * eps);
                let g = conv.weight.grad.data()[i];
                assert!((fd - g).abs() < 1e-7, "dw[{i}] {fd} vs {g}");
            }
            let db = conv.bias.as_ref().unwrap().grad.data();
            for o in 0..3 {
                let expected: f64 = r.data()
                    .chunks_exact(r.plane())
                    .enumerate()
                    .filter(|(i, _)| i % 3 == o)
                    .map(|(_, c)| c.iter().sum::<f64>())
                    .sum();
                assert!((db[o] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::new(2, 3, 1, 1, 0, true, Init::UniformFanIn, &mut rng);
        assert_eq!(conv.num_parameters(), 9);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::<f32>::new(2, 3, 3, 1, 1, false, Init::KaimingFanOut, &mut rng);
        assert!(conv.infer(&Tensor::zeros([1, 4, 5, 5])).is_err());
    }
}
