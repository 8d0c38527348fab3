//! Central finite-difference gradient checking.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;

/// Gradients smaller than this in magnitude on both sides are compared
/// absolutely. Central differences at eps=1e-5 carry roughly 1e-11 of
/// rounding noise, so exactly-zero gradients (a key bias under softmax, say)
/// need a floor well above that.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// `(f(θ + ε) − f(θ − ε)) / 2ε` for one scalar entry of one parameter.
pub fn central_difference(
    store: &mut ParamStore,
    id: ParamId,
    index: usize,
    eps: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.value(id).data()[index];
    store.value_mut(id).data_mut()[index] = orig + eps;
    let plus = loss(store);
    store.value_mut(id).data_mut()[index] = orig - eps;
    let minus = loss(store);
    store.value_mut(id).data_mut()[index] = orig;
    (plus - minus) / (2.0 * eps)
}

#[derive(Debug, Clone)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.samples.iter().all(|s| s.rel_error <= tol)
    }

    /// Runs the check: analytic gradients from one backward pass of
    /// `build`, then central differences for `num_samples` scalar entries
    /// drawn uniformly over all trainable parameter entries.
    pub fn run<R: Rng + ?Sized>(
        store: &mut ParamStore,
        num_samples: usize,
        eps: f64,
        rng: &mut R,
        mut build: impl FnMut(&ParamStore, &mut Graph) -> Result<Var>,
    ) -> Result<Self> {
        store.zero_grad();
        let mut g = Graph::new();
        let loss = build(store, &mut g)?;
        g.backward(loss, store)?;
        drop(g);

        let entries: Vec<(ParamId, usize)> = store
            .iter()
            .filter(|(_, p)| p.requires_grad)
            .flat_map(|(id, p)| (0..p.value.len()).map(move |i| (id, i)))
            .collect();
        let mut samples = Vec::with_capacity(num_samples);
        for _ in 0..num_samples {
            let (id, index) = entries[rng.random_range(0..entries.len())];
            let analytic = store.grad(id).data()[index];
            let numeric = central_difference(store, id, index, eps, |s| {
                let mut g = Graph::new();
                let loss = build(s, &mut g).expect("loss rebuild");
                g.value(loss).item()
            });
            samples.push(GradSample {
                param: store.get(id).name.clone(),
                index,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
        Ok(Self { samples })
    }
}
