//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: Vec<Probe>,
}

/// Relative error with the denominator floored at 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients with central differences on `probes`
/// seeded random entries of trainable parameters.
///
/// `loss(store, true)` must return the loss and its gradients;
/// `loss(store, false)` only the loss. The loss must be a deterministic
/// function of the store (freeze any running statistics).
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    probes: usize,
    h: f64,
    seed: u64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Option<Gradients>)>,
{
    let (_, grads) = loss(store, true)?;
    let grads = grads.ok_or_else(|| Error::InvalidArgument("loss returned no gradients".into()))?;

    let entries: Vec<(String, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n.to_string(), p.value.len()))
        .collect();
    let total: usize = entries.iter().map(|e| e.1).sum();
    if total == 0 {
        return Err(Error::Empty("no trainable parameters to probe".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: Vec::with_capacity(probes),
    };
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let (name, index) = entries
            .iter()
            .find_map(|(n, len)| {
                if flat < *len {
                    Some((n.clone(), flat))
                } else {
                    flat -= len;
                    None
                }
            })
            .expect("flat index within total");
        let analytic = grads.get(&name).map_or(0.0, |g| g.data()[index]);
        let orig = store.value(&name)?.data()[index];

        store.get_mut(&name).expect("probed param").value.data_mut()[index] = orig + h;
        let (plus, _) = loss(store, false)?;
        store.get_mut(&name).expect("probed param").value.data_mut()[index] = orig - h;
        let (minus, _) = loss(store, false)?;
        store.get_mut(&name).expect("probed param").value.data_mut()[index] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let rel_error = relative_error(analytic, numeric);
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.probes.push(Probe {
            param: name,
            index,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(report)
}
