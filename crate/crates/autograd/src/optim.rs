use crate::{ParamStore, Scalar, Tensor};

/// AdamW: Adam moments with weight decay applied directly to the weights.
/// Decay only touches parameters of rank ≥ 2 (kernels and matrices, not
/// biases or norm affines).
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, beta1: T, beta2: T, weight_decay: T) -> Self {
        let zeros = || store.values().iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        Self {
            beta1,
            beta2,
            eps: T::lit(1e-8),
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: T) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter");
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (((p, g), m), v) in store.values_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.shape().len() >= 2 { T::one() - lr * self.weight_decay } else { T::one() };
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    /// `(step count, first moments, second moments)` for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor<T>], &[Tensor<T>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) {
        assert_eq!(m.len(), self.m.len(), "moment count");
        assert_eq!(v.len(), self.v.len(), "moment count");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        store.add("b", Tensor::new(&[2], vec![1.0f64, -1.0]));
        let mut opt = AdamW::new(&store, 0.9, 0.95, 0.0);
        opt.step(&mut store, &[Tensor::new(&[2], vec![3.0, -0.5])], 0.1);
        let p = store.values()[0].data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_applies_to_matrices_only() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(&[1, 1], vec![2.0f64]));
        store.add("b", Tensor::new(&[1], vec![2.0f64]));
        let mut opt = AdamW::new(&store, 0.9, 0.95, 0.5);
        let zero = vec![Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])];
        opt.step(&mut store, &zero, 0.1);
        assert!((store.values()[0].item() - 1.9).abs() < 1e-12);
        assert_eq!(store.values()[1].item(), 2.0);
    }
}
