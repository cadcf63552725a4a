use ndarray::{NdFloat, Zip};

use super::params::{Grads, ParamStore};

/// First-order adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Grads<F>,
    v: Grads<F>,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(store: &ParamStore<F>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.zero_grads(),
            v: store.zero_grads(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>) {
        self.step += 1;
        let c = |v: f64| F::from(v).unwrap();
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let corr1 = c(1.0 - self.beta1.powi(self.step));
        let corr2 = c(1.0 - self.beta2.powi(self.step));
        let lr = c(self.lr);
        let eps = c(self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            Zip::from(store.get_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let m_hat = *m / corr1;
                    let v_hat = *v / corr2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}
