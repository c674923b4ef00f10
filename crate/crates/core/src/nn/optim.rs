//! AdamW with decoupled weight decay and optional global-norm clipping.

use ndarray::ArrayD;

use crate::scalar::Scalar;

use super::params::{ParamGrads, ParamStore};

pub struct AdamW<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: usize,
    m: Vec<Option<ArrayD<T>>>,
    v: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: T, weight_decay: T, n_params: usize) -> Self {
        AdamW {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay,
            step: 0,
            m: (0..n_params).map(|_| None).collect(),
            v: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update. Frozen parameters never receive gradients upstream,
    /// and are skipped here regardless. Returns the pre-clip gradient norm.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &mut ParamGrads<T>,
        clip_norm: Option<f64>,
    ) -> f64 {
        let norm = grads.global_norm();
        if let Some(c) = clip_norm {
            if norm > c {
                grads.scale(T::from_f64(c / norm));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = T::from_f64(1.0 - self.beta1.to_f64().powf(t));
        let bc2 = T::from_f64(1.0 - self.beta2.to_f64().powf(t));
        let one = T::one();
        for (i, g) in grads.by_param.iter().enumerate() {
            let Some(g) = g else { continue };
            if store.get(super::params::ParamId(i)).frozen {
                continue;
            }
            let m = self.m[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (one - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
            });
            let p = store.value_mut(super::params::ParamId(i));
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p = *p - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            });
        }
        norm
    }
}
