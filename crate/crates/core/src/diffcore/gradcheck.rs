//! Central-difference verification of analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::{Gradients, ParamId, ParamStore};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Parameters to perturb; all trainable parameters when `None`.
    pub params: Option<Vec<ParamId>>,
    /// Cap on coordinates per parameter (sampled deterministically); all when `None`.
    pub max_coords: Option<usize>,
    /// Multiplier applied to the numeric derivative before comparison. Use
    /// `-lambda` to check a path that runs through a gradient reversal.
    pub numeric_scale: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            eps: 1e-5,
            params: None,
            max_coords: None,
            numeric_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: usize,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.coords += other.coords;
        self.per_param.extend(other.per_param);
        self
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (1e-8f64).max(analytic.abs() + numeric.abs())
}

/// Compare the analytic gradient of `loss` against central differences
/// `(f(x+ε) − f(x−ε)) / 2ε` for each selected parameter coordinate.
/// `loss` must be deterministic (build graphs with [`Graph::new`]).
pub fn finite_difference_check<L>(
    store: &mut ParamStore<f64>,
    mut loss: L,
    opts: &CheckOptions,
) -> Result<GradCheckReport>
where
    L: FnMut(&mut Graph<'_, f64>) -> Result<NodeId>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let root = loss(&mut g)?;
        g.backward(root)?;
        let mut grads = Gradients::empty(store);
        g.param_grads_into(&mut grads);
        grads
    };
    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store);
        let root = loss(&mut g)?;
        Ok(g.scalar(root))
    };

    let ids: Vec<ParamId> = match &opts.params {
        Some(p) => p.clone(),
        None => store.ids().filter(|&id| store.is_trainable(id)).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords: 0,
        per_param: Vec::new(),
    };
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = store.value(id).data()[c];
            store.value_mut(id).data_mut()[c] = orig + opts.eps;
            let fp = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig - opts.eps;
            let fm = eval(store)?;
            store.value_mut(id).data_mut()[c] = orig;
            let numeric = opts.numeric_scale * (fp - fm) / (2.0 * opts.eps);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[c]);
            worst = worst.max(relative_error(a, numeric));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.coords += coords.len();
        report.per_param.push(ParamCheck {
            name: store.name(id).to_string(),
            coords: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}
