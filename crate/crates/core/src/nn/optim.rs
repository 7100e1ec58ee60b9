use super::array::{Array4, Real};
use super::graph::ParamStore;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array4<T>>,
    v: Vec<Array4<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update with gradients indexed like `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Array4<T>], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let step = T::from_f64(lr / c1);
        let (sc2, eps) = (T::from_f64(1.0 / c2), T::from_f64(self.eps));
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, p) in params.data_mut(id).iter_mut().enumerate() {
                m[i] = b1 * m[i] + ob1 * g[i];
                v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                *p = *p - step * m[i] / ((v[i] * sc2).sqrt() + eps);
            }
        }
    }
}
