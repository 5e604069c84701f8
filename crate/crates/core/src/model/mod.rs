//! Probabilistic-ensemble dynamics model and its certain set.

mod ensemble;
mod entropy;

pub use ensemble::{
    gaussian_nll, train_ensemble, EnsembleConfig, EnsembleModel, EnsemblePrediction, ModelStepResult,
    TrainReport,
};
pub use entropy::{
    calibrate_from_entropies, entropy_from_means, nearest_rank_quantile, CertainSetThresholds, VAR_FLOOR,
};

use ndarray::Array2;

use crate::env::Transition;
use crate::error::{Error, Result};

/// Calibrate `(λ1, λ0, λ2)` on the epistemic entropies of `data` and store
/// them in the model.
pub fn calibrate_thresholds(
    model: &mut EnsembleModel,
    data: &[Transition],
    zeta1: f64,
    zeta2: f64,
    horizon: usize,
) -> Result<CertainSetThresholds> {
    if data.is_empty() {
        return Err(Error::Training("cannot calibrate thresholds on an empty buffer".into()));
    }
    let ent = entropies_of(model, data)?;
    let t = calibrate_from_entropies(&ent, zeta1, zeta2, horizon)?;
    model.thresholds = Some(t);
    Ok(t)
}

/// Epistemic entropy of each transition's `(s, a)`, in chunks.
pub fn entropies_of(model: &EnsembleModel, data: &[Transition]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(4096) {
        let s = Array2::from_shape_fn((chunk.len(), model.state_dim), |(i, j)| chunk[i].s[j]);
        let a = Array2::from_shape_fn((chunk.len(), model.action_dim), |(i, j)| chunk[i].a[j]);
        out.extend(model.entropy_batch(s.view(), a.view())?);
    }
    Ok(out)
}
