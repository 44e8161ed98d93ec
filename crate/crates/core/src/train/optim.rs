use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore};

/// Linear warm-up to `peak`, then inverse-square-root decay. `step` is 1-based.
pub fn learning_rate(peak: f64, step: u64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let n = store.num_scalars();
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Global L2 norm of the gradient over every parameter.
    pub fn grad_norm(store: &ParamStore, grads: &Gradients) -> f64 {
        store
            .ids()
            .filter_map(|id| grads.param(id))
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// One update with learning rate `lr`; gradients are scaled by `scale`
    /// (used for clipping). Parameters without a gradient see zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, scale: f64) -> Result<()> {
        if self.m.len() != store.num_scalars() {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} entries for {} parameters",
                self.m.len(),
                store.num_scalars()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        let mut off = 0;
        for id in ids {
            let g = grads.param(id);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i] * scale);
                let k = off + i;
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gi;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gi * gi;
                let mh = self.m[k] / bc1;
                let vh = self.v[k] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            off += p.len();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GroupKey, Graph, ParamStoreBuilder, Partition, Tensor};

    #[test]
    fn schedule_peaks_at_warmup() {
        assert!((learning_rate(1e-3, 100, 400) - 2.5e-4).abs() < 1e-15);
        assert!((learning_rate(1e-3, 400, 400) - 1e-3).abs() < 1e-15);
        assert!((learning_rate(1e-3, 1600, 400) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut b = ParamStoreBuilder::new();
        b.open_group(GroupKey::global(Partition::AEnc));
        let id = b.add("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut store = b.build().unwrap();
        let mut opt = Adam::new(&store, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.param(id);
                let sq = g.mul(x, x).unwrap();
                let l = g.sum(sq);
                g.backward(l).unwrap()
            };
            opt.step(&mut store, &grads, 0.01, 1.0).unwrap();
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
