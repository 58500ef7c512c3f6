//! Mask-weighted feature separation and fusion.
//!
//! Two learned 1x1 filter banks project the affordance features `phi_a`
//! into arm-specific and object-specific features. Each projection is
//! weighted pixel-wise by the matching down-sampled probability mask
//! (broadcast across channels) and the results are added back:
//!
//! ```text
//! phi'_a = phi_a + (phi_h * m_h) + (phi_o * m_o)
//! ```

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::nn::conv::Init;
use crate::nn::{join, Conv2d, Entry, EntryMut, Module};
use crate::tensor::{Scalar, Tensor};

fn check_inputs<T: Scalar>(
    phi_a: &Tensor<T>,
    arm_mask: &Tensor<T>,
    object_mask: &Tensor<T>,
    filters_h: &Conv2d<T>,
    filters_o: &Conv2d<T>,
) -> Result<()> {
    let [n, c, h, w] = phi_a.shape();
    for (name, m) in [("arm", arm_mask), ("object", object_mask)] {
        if m.shape() != [n, 1, h, w] {
            return Err(shape_err!(
                "{name} mask {:?} does not match features {:?}",
                m.shape(),
                phi_a.shape()
            ));
        }
    }
    for (name, f) in [("arm", filters_h), ("object", filters_o)] {
        if f.in_channels() != c || f.out_channels() != c {
            return Err(shape_err!(
                "{name} filters map {} -> {} channels, features have {c}",
                f.in_channels(),
                f.out_channels()
            ));
        }
    }
    Ok(())
}

/// Combines already-projected features with their masks.
fn combine<T: Scalar>(
    phi_a: &Tensor<T>,
    phi_h: &Tensor<T>,
    phi_o: &Tensor<T>,
    arm_mask: &Tensor<T>,
    object_mask: &Tensor<T>,
) -> Tensor<T> {
    let [n, c, h, w] = phi_a.shape();
    let plane = h * w;
    let mut out = phi_a.clone();
    for b in 0..n {
        let mh = arm_mask.channel_plane(b, 0);
        let mo = object_mask.channel_plane(b, 0);
        for ch in 0..c {
            let start = out.index(b, ch, 0, 0);
            let fh = phi_h.channel_plane(b, ch);
            let fo = phi_o.channel_plane(b, ch);
            let dst = &mut out.data_mut()[start..start + plane];
            for i in 0..plane {
                dst[i] = dst[i] + fh[i] * mh[i] + fo[i] * mo[i];
            }
        }
    }
    out
}

/// Fuses `phi_a` (`[B, C', H', W']`) with arm and object masks
/// (`[B, 1, H', W']`) using the given 1x1 filter banks.
pub fn fuse_features<T: Scalar>(
    phi_a: &Tensor<T>,
    arm_mask: &Tensor<T>,
    object_mask: &Tensor<T>,
    filters_h: &Conv2d<T>,
    filters_o: &Conv2d<T>,
) -> Result<Tensor<T>> {
    check_inputs(phi_a, arm_mask, object_mask, filters_h, filters_o)?;
    let phi_h = filters_h.infer(phi_a)?;
    let phi_o = filters_o.infer(phi_a)?;
    Ok(combine(phi_a, &phi_h, &phi_o, arm_mask, object_mask))
}

struct Cache<T> {
    phi_h: Tensor<T>,
    phi_o: Tensor<T>,
    arm_mask: Tensor<T>,
    object_mask: Tensor<T>,
}

pub(crate) struct FusionGrads<T> {
    pub features: Tensor<T>,
    pub arm_mask: Tensor<T>,
    pub object_mask: Tensor<T>,
}

/// Trainable fusion block holding the arm (`filters_h`) and object
/// (`filters_o`) filter banks.
pub struct FusionBlock<T> {
    pub filters_h: Conv2d<T>,
    pub filters_o: Conv2d<T>,
    cache: Option<Cache<T>>,
    /// Swaps the masks in the backward pass; only used to show that the
    /// gradient checker detects a broken derivative.
    pub(crate) corrupt_backward: bool,
}

impl<T: Clone> Clone for FusionBlock<T> {
    fn clone(&self) -> Self {
        FusionBlock {
            filters_h: self.filters_h.clone(),
            filters_o: self.filters_o.clone(),
            cache: None,
            corrupt_backward: self.corrupt_backward,
        }
    }
}

impl<T: Scalar> FusionBlock<T> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        FusionBlock {
            filters_h: Conv2d::new(channels, channels, 1, 1, 0, true, Init::UniformFanIn, rng),
            filters_o: Conv2d::new(channels, channels, 1, 1, 0, true, Init::UniformFanIn, rng),
            cache: None,
            corrupt_backward: false,
        }
    }

    pub fn infer(&self, phi_a: &Tensor<T>, arm_mask: &Tensor<T>, object_mask: &Tensor<T>) -> Result<Tensor<T>> {
        fuse_features(phi_a, arm_mask, object_mask, &self.filters_h, &self.filters_o)
    }

    pub(crate) fn forward(
        &mut self,
        phi_a: &Tensor<T>,
        arm_mask: &Tensor<T>,
        object_mask: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        check_inputs(phi_a, arm_mask, object_mask, &self.filters_h, &self.filters_o)?;
        let phi_h = self.filters_h.forward(phi_a)?;
        let phi_o = self.filters_o.forward(phi_a)?;
        let out = combine(phi_a, &phi_h, &phi_o, arm_mask, object_mask);
        self.cache = Some(Cache {
            phi_h,
            phi_o,
            arm_mask: arm_mask.clone(),
            object_mask: object_mask.clone(),
        });
        Ok(out)
    }

    pub(crate) fn backward(&mut self, dout: &Tensor<T>) -> Result<FusionGrads<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| shape_err!("fusion backward called without a cached forward"))?;
        let [n, c, h, w] = dout.shape();
        let plane = h * w;
        let (mh, mo) = if self.corrupt_backward {
            (&cache.object_mask, &cache.arm_mask)
        } else {
            (&cache.arm_mask, &cache.object_mask)
        };
        let mut d_phi_h = Tensor::zeros(dout.shape());
        let mut d_phi_o = Tensor::zeros(dout.shape());
        let mut d_mh = Tensor::zeros([n, 1, h, w]);
        let mut d_mo = Tensor::zeros([n, 1, h, w]);
        for b in 0..n {
            let mh_b = mh.channel_plane(b, 0);
            let mo_b = mo.channel_plane(b, 0);
            for ch in 0..c {
                let g = dout.channel_plane(b, ch);
                let fh = cache.phi_h.channel_plane(b, ch);
                let fo = cache.phi_o.channel_plane(b, ch);
                let start = d_phi_h.index(b, ch, 0, 0);
                for i in 0..plane {
                    d_phi_h.data_mut()[start + i] = g[i] * mh_b[i];
                    d_phi_o.data_mut()[start + i] = g[i] * mo_b[i];
                }
                let ms = d_mh.index(b, 0, 0, 0);
                for i in 0..plane {
                    d_mh.data_mut()[ms + i] += g[i] * fh[i];
                    d_mo.data_mut()[ms + i] += g[i] * fo[i];
                }
            }
        }
        let mut features = dout.clone();
        features.add_assign(&self.filters_h.backward(&d_phi_h)?)?;
        features.add_assign(&self.filters_o.backward(&d_phi_o)?)?;
        Ok(FusionGrads {
            features,
            arm_mask: d_mh,
            object_mask: d_mo,
        })
    }
}

impl<T: Scalar> Module<T> for FusionBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.filters_h.visit(&join(prefix, "filters_h"), f);
        self.filters_o.visit(&join(prefix, "filters_o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.filters_h.visit_mut(&join(prefix, "filters_h"), f);
        self.filters_o.visit_mut(&join(prefix, "filters_o"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    #[test]
    fn zero_masks_return_features_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = FusionBlock::<f32>::new(5, &mut rng);
        let phi = Tensor::from_fn([2, 5, 3, 4], |_| rng.gen_range(-3.0f32..3.0));
        let zeros = Tensor::zeros([2, 1, 3, 4]);
        let out = block.infer(&phi, &zeros, &zeros).unwrap();
        assert_eq!(out.data(), phi.data());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = FusionBlock::<f64>::new(3, &mut rng);
        let phi = random([2, 3, 3, 3], &mut rng, -1.0, 1.0);
        let mh = random([2, 1, 3, 3], &mut rng, 0.0, 1.0);
        let mo = random([2, 1, 3, 3], &mut rng, 0.0, 1.0);
        let r = random([2, 3, 3, 3], &mut rng, -1.0, 1.0);
        block.forward(&phi, &mh, &mo).unwrap();
        let g = block.backward(&r).unwrap();
        let f = |b: &FusionBlock<f64>, p: &Tensor<f64>, a: &Tensor<f64>, o: &Tensor<f64>| {
            let y = b.infer(p, a, o).unwrap();
            y.data().iter().zip(r.data()).map(|(x, w)| x * w).sum::<f64>()
        };
        let eps = 1e-6;
        for i in 0..phi.len() {
            let (mut p, mut m) = (phi.clone(), phi.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (f(&block, &p, &mh, &mo) - f(&block, &m, &mh, &mo)) / (2.0 * eps);
            assert!((fd - g.features.data()[i]).abs() < 1e-8);
        }
        for i in 0..mh.len() {
            let (mut p, mut m) = (mh.clone(), mh.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (f(&block, &phi, &p, &mo) - f(&block, &phi, &m, &mo)) / (2.0 * eps);
            assert!((fd - g.arm_mask.data()[i]).abs() < 1e-8);
            let (mut p, mut m) = (mo.clone(), mo.clone());
            p.data_mut()[i] += eps;
            m.data_mut()[i] -= eps;
            let fd = (f(&block, &phi, &mh, &p) - f(&block, &phi, &mh, &m)) / (2.0 * eps);
            assert!((fd - g.object_mask.data()[i]).abs() < 1e-8);
        }
        for i in 0..block.filters_h.weight.value.len() {
            let mut bp = block.clone();
            bp.filters_h.weight.value.data_mut()[i] += eps;
            let mut bm = block.clone();
            bm.filters_h.weight.value.data_mut()[i] -= eps;
            let fd = (f(&bp, &phi, &mh, &mo) - f(&bm, &phi, &mh, &mo)) / (2.0 * eps);
            assert!((fd - block.filters_h.weight.grad.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_mask_size_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = FusionBlock::<f32>::new(2, &mut rng);
        let phi = Tensor::zeros([1, 2, 4, 4]);
        let good = Tensor::zeros([1, 1, 4, 4]);
        let bad = Tensor::zeros([1, 1, 2, 2]);
        assert!(block.infer(&phi, &bad, &good).is_err());
        assert!(block.infer(&phi, &good, &bad).is_err());
    }
}
