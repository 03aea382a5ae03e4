//! Adam over the parameters tracked on a tape.

use crate::autodiff::{Grads, Tape};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction. State buffers are allocated lazily per
/// parameter, indexed by the parameter's store key.
pub struct Adam<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every parameter tracked on `tape`, reading
    /// gradients from `grads`. Parameters that received no gradient this step
    /// are treated as having a zero gradient (their momentum still decays).
    pub fn step(&mut self, store: &mut ParamStore<S>, tape: &Tape<S>, grads: &Grads<S>) {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2) = (S::cast(self.beta1), S::cast(self.beta2));
        let (c1, c2) = (S::cast(1.0 - self.beta1), S::cast(1.0 - self.beta2));
        let lr1 = S::cast(self.lr / bc1);
        let ibc2 = S::cast(1.0 / bc2);
        let eps = S::cast(self.eps);

        for &(key, var) in tape.tracked() {
            let id = ParamId(key);
            debug_assert!(store.entry(id).trainable, "tracked a frozen parameter");
            let shape = store.get(id).shape().to_vec();
            let zero;
            let grad = match grads.get(var) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(shape.clone());
                    &zero
                }
            };
            if self.m.len() <= key {
                self.m.resize(key + 1, None);
                self.v.resize(key + 1, None);
            }
            let m = self.m[key].get_or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v[key].get_or_insert_with(|| Tensor::zeros(shape.clone()));

            let mut value = store.get(id).clone();
            let out = value.make_mut();
            let ms = m.make_mut();
            let vs = v.make_mut();
            let gs = grad.as_slice();
            for i in 0..out.len() {
                ms[i] = b1 * ms[i] + c1 * gs[i];
                vs[i] = b2 * vs[i] + c2 * gs[i] * gs[i];
                let denom = (vs[i] * ibc2).sqrt() + eps;
                out[i] = out[i] - lr1 * ms[i] / denom;
            }
            store.set(id, value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_setup() -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![3.0, -2.0]), true);
        (store, id)
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let (mut store, id) = quadratic_setup();
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let x = store.leaf(&mut tape, id);
            let sq = tape.mul(x, x);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            adam.step(&mut store, &tape, &grads);
        }
        for &v in store.get(id).as_slice() {
            assert!(v.abs() < 1e-3, "not converged: {v}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let (mut store, id) = quadratic_setup();
        let before = store.get(id).clone();
        let mut adam = Adam::new(0.0);
        for _ in 0..3 {
            let mut tape = Tape::new();
            let x = store.leaf(&mut tape, id);
            let sq = tape.mul(x, x);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            adam.step(&mut store, &tape, &grads);
        }
        assert!(store.get(id).bit_eq(&before));
    }

    #[test]
    fn missing_gradients_are_treated_as_zero() {
        let (mut store, x_id) = quadratic_setup();
        let y_id = store.add("y", Tensor::new(vec![1], vec![4.0]), true);
        let before = store.get(x_id).clone();
        let mut adam = Adam::new(0.1);
        let mut tape = Tape::new();
        let x = store.leaf(&mut tape, x_id);
        let y = store.leaf(&mut tape, y_id);
        // Loss depends only on y; x is tracked but receives no gradient.
        let sq = tape.mul(y, y);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        assert!(grads.get(x).is_none());
        adam.step(&mut store, &tape, &grads);
        // Zero gradient with zero momentum: x must not move, y must.
        assert!(store.get(x_id).bit_eq(&before));
        assert!(store.get(y_id).as_slice()[0] < 4.0);
    }
}
