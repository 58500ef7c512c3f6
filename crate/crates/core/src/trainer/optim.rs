use crate::nn::{EntryMut, Module};
use crate::tensor::{Scalar, Tensor};

/// Gradient descent with momentum and L2 weight decay:
/// `v <- mu * v + (g + wd * w)`, `w <- w - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step<M: Module<T> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        let first = self.velocity.is_empty();
        let mut i = 0;
        let velocity = &mut self.velocity;
        model.visit_mut("", &mut |_, e| {
            let EntryMut::Param(p) = e else { return };
            if first {
                velocity.push(Tensor::zeros(p.value.shape()));
            }
            let v = velocity[i].data_mut();
            for ((w, &g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.iter_mut()) {
                *vel = mu * *vel + g + wd * *w;
                *w -= lr * *vel;
            }
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Entry, Param};

    struct One(Param<f64>);

    impl Module<f64> for One {
        fn visit(&self, _: &str, f: &mut dyn FnMut(&str, Entry<'_, f64>)) {
            f("w", Entry::Param(&self.0));
        }
        fn visit_mut(&mut self, _: &str, f: &mut dyn FnMut(&str, EntryMut<'_, f64>)) {
            f("w", EntryMut::Param(&mut self.0));
        }
    }

    #[test]
    fn matches_hand_iteration() {
        let mut m = One(Param::new(Tensor::full([1, 1, 1, 1], 1.0)));
        let mut opt = Sgd::new(0.9, 0.1);
        let (mut w, mut v) = (1.0f64, 0.0f64);
        for step in 0..4 {
            let g = 0.5 + step as f64;
            m.0.grad.fill(g);
            opt.step(&mut m, 0.01);
            v = 0.9 * v + g + 0.1 * w;
            w -= 0.01 * v;
            assert!((m.0.value.data()[0] - w).abs() < 1e-15);
        }
    }
}
