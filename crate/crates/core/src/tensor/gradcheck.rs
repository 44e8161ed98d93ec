//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamStore, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckConfig {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Check at most this many coordinates per tensor (sampled); `None` checks all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-8,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub target: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub checked: usize,
    pub failures: Vec<Mismatch>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn close(a: f64, b: f64, cfg: &GradcheckConfig) -> bool {
    (a - b).abs() <= cfg.atol + cfg.rtol * a.abs().max(b.abs())
}

fn coords(n: usize, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match cfg.max_coords {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences, over every parameter of `store` and every tensor in `inputs`.
/// `f` receives the input nodes in order.
pub fn check<F>(store: &mut ParamStore, inputs: &[Tensor], cfg: &GradcheckConfig, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |store: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(store);
        let nodes: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &nodes)?;
        Ok(g.scalar(out))
    };

    let (param_grads, input_grads) = {
        let mut g = Graph::new(store);
        let nodes: Vec<NodeId> = inputs
            .iter()
            .map(|t| g.input(t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut g, &nodes)?;
        let grads = g.backward(out)?;
        let pg: Vec<Vec<f64>> = store
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .map_or_else(|| vec![0.0; store.get(id).numel()], <[f64]>::to_vec)
            })
            .collect();
        let ig: Vec<Vec<f64>> = nodes
            .iter()
            .zip(inputs)
            .map(|(&n, t)| grads.node(n).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        (pg, ig)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradcheckReport::default();
    let h = cfg.step;

    let ids: Vec<_> = store.ids().collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for i in coords(store.get(id).numel(), cfg, &mut rng) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(store, inputs)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(store, inputs)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = param_grads[pi][i];
            report.checked += 1;
            if !close(analytic, numeric, cfg) {
                report.failures.push(Mismatch {
                    target: store.name(id).to_string(),
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }

    let mut work: Vec<Tensor> = inputs.to_vec();
    for ti in 0..work.len() {
        for i in coords(work[ti].numel(), cfg, &mut rng) {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + h;
            let plus = eval(store, &work)?;
            work[ti].data_mut()[i] = orig - h;
            let minus = eval(store, &work)?;
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = input_grads[ti][i];
            report.checked += 1;
            if !close(analytic, numeric, cfg) {
                report.failures.push(Mismatch {
                    target: format!("input{ti}"),
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
