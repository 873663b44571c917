use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// RMSprop: `v = alpha v + (1 - alpha) g^2`, `p -= lr g / (sqrt(v) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    /// Running mean of squared gradients, one per parameter tensor.
    pub square_avg: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(store: &ParamStore, lr: f64, alpha: f64, eps: f64) -> Self {
        RmsProp {
            lr,
            alpha,
            eps,
            square_avg: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        for (id, g) in grads {
            let v = &mut self.square_avg[id.index()];
            let p = store.get_mut(*id);
            for ((p, v), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = self.alpha * *v + (1.0 - self.alpha) * g * g;
                *p -= self.lr * g / (v.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_over_sqrt_one_minus_alpha() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = RmsProp::new(&store, 0.1, 0.99, 0.0);
        let g = Tensor::new(&[2], vec![4.0, -0.5]).unwrap();
        opt.step(&mut store, &[(id, g)]);
        let d = 0.1 / 0.01f64.sqrt();
        let p = store.get(id).data();
        assert!((p[0] - (1.0 - d)).abs() < 1e-12);
        assert!((p[1] - (-1.0 + d)).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::ones(&[3]));
        let before = store.clone();
        let mut opt = RmsProp::new(&store, 0.0, 0.99, 1e-8);
        opt.step(&mut store, &[(id, Tensor::full(&[3], 2.0))]);
        assert_eq!(store, before);
    }
}
