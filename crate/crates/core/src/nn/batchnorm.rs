use super::{join, Entry, EntryMut, Mode, Module, Param};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

struct Cache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

/// Per-channel batch normalization with running statistics.
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    channels: usize,
    cache: Option<Cache<T>>,
}

impl<T: Clone> Clone for BatchNorm2d<T> {
    fn clone(&self) -> Self {
        BatchNorm2d {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            channels: self.channels,
            cache: None,
        }
    }
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        BatchNorm2d {
            gamma: Param::new(Tensor::full(shape, T::one())),
            beta: Param::new(Tensor::zeros(shape)),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::full(shape, T::one()),
            channels,
            cache: None,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.channels {
            return Err(shape_err!(
                "batch norm expects {} channels, got {}",
                self.channels,
                x.channels()
            ));
        }
        Ok(())
    }

    /// Normalizes with running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let eps = T::lit(EPS);
        let scale: Vec<T> = (0..self.channels)
            .map(|c| self.gamma.value.data()[c] / (self.running_var.data()[c] + eps).sqrt())
            .collect();
        let shift: Vec<T> = (0..self.channels)
            .map(|c| self.beta.value.data()[c] - self.running_mean.data()[c] * scale[c])
            .collect();
        let mut y = x.clone();
        let plane = x.plane();
        for (i, chunk) in y.data_mut().chunks_exact_mut(plane).enumerate() {
            let c = i % self.channels;
            chunk.iter_mut().for_each(|v| *v = *v * scale[c] + shift[c]);
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check(x)?;
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let count = n * plane;
        let eps = T::lit(EPS);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv_count = T::one() / T::from_usize(count).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += x.channel_plane(b, ch).iter().copied().sum();
                    }
                    let m = s * inv_count;
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &v in x.channel_plane(b, ch) {
                            let d = v - m;
                            sq += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq * inv_count;
                }
                let momentum = T::lit(MOMENTUM);
                let unbias = if count > 1 {
                    T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                for ch in 0..c {
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (T::one() - momentum) * *rm + momentum * mean[ch];
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (T::one() - momentum) * *rv + momentum * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut normalized = x.clone();
        for (i, chunk) in normalized.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            chunk
                .iter_mut()
                .for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
        }
        let mut y = normalized.clone();
        for (i, chunk) in y.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % c;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            chunk.iter_mut().for_each(|v| *v = *v * g + b);
        }
        self.cache = Some(Cache {
            normalized,
            inv_std,
            mode,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| shape_err!("batch norm backward called without a cached forward"))?;
        let xhat = &cache.normalized;
        dy.expect_shape(xhat.shape(), "batch norm output gradient")?;
        let [n, c, h, w] = dy.shape();
        let plane = h * w;
        let count = T::from_usize(n * plane).unwrap();
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                for (&g, &xh) in dy.channel_plane(b, ch).iter().zip(xhat.channel_plane(b, ch)) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            self.beta.grad.data_mut()[ch] += sum_dy;
            self.gamma.grad.data_mut()[ch] += sum_dy_xhat;
            let gamma = self.gamma.value.data()[ch];
            let k = gamma * cache.inv_std[ch];
            for b in 0..n {
                let start = dx.index(b, ch, 0, 0);
                let dst = &mut dx.data_mut()[start..start + plane];
                let src = dy.channel_plane(b, ch);
                let xh = xhat.channel_plane(b, ch);
                match cache.mode {
                    Mode::Train => {
                        let inv = T::one() / count;
                        for i in 0..plane {
                            dst[i] = k * (src[i] - sum_dy * inv - xh[i] * sum_dy_xhat * inv);
                        }
                    }
                    Mode::Eval => {
                        for i in 0..plane {
                            dst[i] = k * src[i];
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        f(&join(prefix, "weight"), Entry::Param(&self.gamma));
        f(&join(prefix, "bias"), Entry::Param(&self.beta));
        f(&join(prefix, "running_mean"), Entry::Buffer(&self.running_mean));
        f(&join(prefix, "running_var"), Entry::Buffer(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        f(&join(prefix, "weight"), EntryMut::Param(&mut self.gamma));
        f(&join(prefix, "bias"), EntryMut::Param(&mut self.beta));
        f(
            &join(prefix, "running_mean"),
            EntryMut::Buffer(&mut self.running_mean),
        );
        f(
            &join(prefix, "running_var"),
            EntryMut::Buffer(&mut self.running_var),
        );
    }
}
