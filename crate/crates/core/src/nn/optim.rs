use std::collections::BTreeMap;

use super::params::{ParamKind, ParamStore};
use super::tensor::{Scalar, Tensor};

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let bc1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for (name, g) in grads {
            if store.kind(name) != Some(ParamKind::Trainable) {
                continue;
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.get_mut(name).expect("parameter present");
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new("p");
        s.insert("x", Tensor::full([1, 1, 1, 1], 1.0), ParamKind::Trainable);
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::full([1, 1, 1, 1], 0.5));
        let mut adam = Adam::new(0.1, 0.9, 0.99);
        adam.step(&mut s, &g);
        // bias-corrected first step is lr * sign(g)
        assert!((s.get("x").unwrap().data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut s = ParamStore::<f32>::new("p");
        s.insert("x", Tensor::full([1, 1, 2, 2], 0.25), ParamKind::Trainable);
        let before = s.checksum();
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::full([1, 1, 2, 2], 3.0));
        let mut adam = Adam::new(0.0, 0.9, 0.99);
        for _ in 0..5 {
            adam.step(&mut s, &g);
        }
        assert_eq!(before, s.checksum());
    }
}
