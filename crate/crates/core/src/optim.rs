use crate::autograd::Gradients;
use crate::nn::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam with bias correction. Moments are kept per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Collect per-parameter gradients from a backward pass.
    pub fn gather(bound: &Bound<T>, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        bound.vars().iter().map(|v| grads.take(v)).collect()
    }

    /// Global L2 norm of a gradient list.
    pub fn grad_norm(grads: &[Option<Tensor<T>>]) -> f64 {
        grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&v| {
                let f = v.as_f64();
                f * f
            })
            .sum::<f64>()
            .sqrt()
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64, clip_norm: Option<f64>) {
        assert_eq!(grads.len(), store.len(), "gradient list length");
        self.step += 1;
        let scale = match clip_norm {
            Some(c) => {
                let n = Self::grad_norm(grads);
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::lit(lr * bc2.sqrt() / bc1);
        let eps = T::lit(self.eps * bc2.sqrt());
        let scale = T::lit(scale);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads[i].as_ref() else { continue };
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                let gv = gv * scale;
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let g = Graph::new();
            let b = store.bind(&g, true);
            let x = b.var(id);
            let sq = g.mul(x, x);
            let loss = g.sum(&sq);
            let mut grads = g.backward(&loss);
            let list = Adam::gather(&b, &mut grads);
            drop(b);
            opt.update(&mut store, &list, 0.01, None);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn clipping_bounds_first_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let mut opt = Adam::new(&store);
        let grads = vec![Some(Tensor::from_vec(&[1], vec![100.0]).unwrap())];
        opt.update(&mut store, &grads, 0.1, Some(1.0));
        // Adam's first step has magnitude lr regardless of gradient scale.
        assert!((store.get(id).data()[0] + 0.1).abs() < 1e-6);
    }
}
