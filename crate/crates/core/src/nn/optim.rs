//! Adam with bias correction, the update rule the Noam schedule assumes.

use super::params::{Arr, Gradients, ParamSet};

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Option<Arr>>,
    v: Vec<Option<Arr>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n_slots: usize) -> Self {
        Adam {
            m: vec![None; n_slots],
            v: vec![None; n_slots],
            t: 0,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for slot in 0..params.len() {
            let Some(g) = grads.get(slot) else { continue };
            let m = self.m[slot].get_or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self.v[slot].get_or_insert_with(|| Arr::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let p = params.by_slot_mut(slot);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use ndarray::Array2;

    #[test]
    fn adam_descends_a_quadratic() {
        let mut ps = ParamSet::new();
        ps.insert("x", Array2::from_elem((1, 3), 2.0).into_dyn());
        let mut adam = Adam::new(1);
        let loss_and_grad = |ps: &ParamSet| {
            let mut g = Graph::new();
            let x = g.param(ps, "x");
            let sq = g.mul(x, x);
            let l = g.sum_all(sq);
            let grads = g.backward(l, 1);
            (g.scalar(l), grads)
        };
        let (l0, _) = loss_and_grad(&ps);
        for _ in 0..200 {
            let (_, grads) = loss_and_grad(&ps);
            adam.step(&mut ps, &grads, 0.05);
        }
        let (l1, _) = loss_and_grad(&ps);
        assert!(l1 < l0 * 1e-2, "loss {l0} -> {l1}");
    }
}
