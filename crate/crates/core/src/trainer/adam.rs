use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moments for every tensor of a store, indexed like the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates the listed parameters in place. `t` is the 1-based step
    /// count of this parameter group.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        ids: &[ParamId],
        grads: &[Tensor],
        t: u64,
        h: AdamHyper,
    ) -> Result<()> {
        if grads.len() != ids.len() {
            return Err(Error::dim("adam", format!("{} gradients for {} parameters", grads.len(), ids.len())));
        }
        if t == 0 {
            return Err(Error::Argument("adam step count starts at 1".into()));
        }
        let (b1, b2) = h.betas;
        let c1 = 1.0 - b1.powi(t as i32);
        let c2 = 1.0 - b2.powi(t as i32);
        for (&id, g) in ids.iter().zip(grads) {
            let p = store.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            adam_update(
                p.data_mut(),
                g.data(),
                self.m[id.index()].data_mut(),
                self.v[id.index()].data_mut(),
                c1,
                c2,
                h,
            );
        }
        Ok(())
    }
}

/// Decoupled weight decay followed by the bias-corrected Adam update.
pub fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], c1: f64, c2: f64, h: AdamHyper) {
    let (b1, b2) = h.betas;
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        p[i] -= h.lr * h.weight_decay * p[i];
        p[i] -= h.lr * mh / (vh.sqrt() + h.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(wd: f64) -> AdamHyper {
        AdamHyper {
            lr: 1e-3,
            betas: (0.9, 0.98),
            eps: 1e-6,
            weight_decay: wd,
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut adam = Adam::new(&store);
        let g = Tensor::vector(vec![3.0, -0.4, 250.0]);
        adam.step(&mut store, &[id], &[g], 1, hyper(0.0)).unwrap();
        let expect = [1.0 - 1e-3, -2.0 + 1e-3, 0.5 - 1e-3];
        for (a, b) in store.get(id).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0]));
        let mut adam = Adam::new(&store);
        for t in 1..10 {
            adam.step(&mut store, &[id], &[Tensor::zeros(&[2])], t, hyper(0.0)).unwrap();
        }
        assert_eq!(store.get(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn decay_shrinks_and_shapes_are_checked() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0]));
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[id], &[Tensor::zeros(&[1])], 1, hyper(0.01)).unwrap();
        assert_eq!(store.get(id).data(), &[1.0 - 1e-5]);
        assert!(adam.step(&mut store, &[id], &[Tensor::zeros(&[2])], 2, hyper(0.01)).is_err());
        assert!(adam.step(&mut store, &[id], &[], 2, hyper(0.01)).is_err());
    }
}
