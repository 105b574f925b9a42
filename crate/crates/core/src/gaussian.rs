//! Prediction under the Gaussian likelihood.
//!
//! The negative log-likelihood and its gradient live on [`VifModel`]; this
//! module produces the posterior predictive distribution for new inputs, on
//! the response scale or for the latent process (response variance minus the
//! error variance).

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::kernels::Inputs;
use crate::model::VifModel;
use crate::predict::{
    build_prediction_structure, clamp_variances, predict_mean, predict_var_diag_deterministic,
    PredictionOutput, PredictionScope,
};

/// Predictive means and variances at `pred` given observations `y`.
///
/// The model must have been built with the nugget included (the response
/// construction). `neighbor_sets` follow the conventions of
/// [`build_prediction_structure`].
pub fn predict_gaussian(
    model: &VifModel,
    y: &DVector<f64>,
    pred: &Inputs,
    neighbor_sets: &[Vec<usize>],
    scope: PredictionScope,
) -> Result<PredictionOutput> {
    if !model.include_nugget {
        return Err(Error::InvalidParameter(
            "Gaussian prediction requires a response-scale model (nugget included)".into(),
        ));
    }
    if y.len() != model.len() {
        return Err(Error::DimensionMismatch {
            context: "response",
            expected: model.len(),
            got: y.len(),
        });
    }
    let structure = build_prediction_structure(model, pred, neighbor_sets)?;
    let means = predict_mean(model, &structure, y);
    let mut variances = predict_var_diag_deterministic(model, &structure);
    if scope == PredictionScope::Latent {
        variances.add_scalar_mut(-model.kernel.nugget);
    }
    let clamped = clamp_variances(&mut variances);
    Ok(PredictionOutput { means, variances, scope, clamped })
}
