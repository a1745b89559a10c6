use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::networks::{phi_from_parts, ModelBundle};
use crate::schedule::q_sample_items;
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub theta: f64,
    pub at: f64,
    pub phi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { theta: 1.0, at: 1.0, phi: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.theta, self.at, self.phi].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// One training batch: degraded `x0`, clean `y0`, shared noise `z` and per-item steps.
#[derive(Clone, Debug)]
pub struct LossInputs<'a, T> {
    pub x0: &'a Tensor<T>,
    pub y0: &'a Tensor<T>,
    pub z: &'a Tensor<T>,
    pub ts: &'a [usize],
}

impl<T: Float> LossInputs<'_, T> {
    fn check(&self) -> Result<()> {
        if self.x0.shape() != self.y0.shape() || self.x0.shape() != self.z.shape() {
            return Err(Error::ShapeMismatch(format!(
                "x0 {:?}, y0 {:?}, z {:?}",
                self.x0.shape(),
                self.y0.shape(),
                self.z.shape()
            )));
        }
        Ok(())
    }
}

/// The three objectives and their weighted sum, all recorded on one graph.
#[derive(Clone, Debug)]
pub struct LossTerms<T> {
    pub theta: Var<T>,
    pub at: Var<T>,
    pub phi: Var<T>,
    pub total: Var<T>,
}

/// Builds all three losses with a single noise-predictor pass shared by the denoising
/// and distribution-transformation objectives.
pub fn compute_losses<T: Float>(
    g: &mut Graph<T>,
    bundle: &ModelBundle<T>,
    params: &ParamSet<T>,
    input: &LossInputs<'_, T>,
    weights: &LossWeights,
) -> Result<LossTerms<T>> {
    input.check()?;
    let s = bundle.schedule();
    let xt = q_sample_items(input.x0, input.ts, input.z, s)?;
    let yt = q_sample_items(input.y0, input.ts, input.z, s)?;
    let x0 = Var::constant(input.x0.clone());
    let net_in = g.concat_channels(&Var::constant(xt), &x0);
    let z_pred = bundle.unet().forward(g, params, &net_in, input.ts)?;
    let theta = g.mse(&z_pred, &Var::constant(input.z.clone()));

    let restored = bundle.physnet().restore(g, params, &x0)?.restored;
    let at = g.mse(&restored, &Var::constant(input.y0.clone()));

    let phi_out = phi_from_parts(g, &restored, &z_pred, input.ts, s);
    let phi = g.mse(&phi_out, &Var::constant(yt));

    let wt = g.scale(&theta, T::lit(weights.theta));
    let wa = g.scale(&at, T::lit(weights.at));
    let wp = g.scale(&phi, T::lit(weights.phi));
    let sum = g.add(&wt, &wa);
    let total = g.add(&sum, &wp);
    Ok(LossTerms { theta, at, phi, total })
}

fn scalar<T: Float>(v: &Var<T>) -> f64 {
    v.value().data()[0].as_f64()
}

/// Denoising objective `‖z − z′‖²` (mean over elements).
pub fn loss_theta<T: Float>(bundle: &ModelBundle<T>, params: &ParamSet<T>, input: &LossInputs<'_, T>) -> Result<f64> {
    input.check()?;
    let xt = q_sample_items(input.x0, input.ts, input.z, bundle.schedule())?;
    let mut g = Graph::inference();
    let net_in = g.concat_channels(&Var::constant(xt), &Var::constant(input.x0.clone()));
    let z_pred = bundle.unet().forward(&mut g, params, &net_in, input.ts)?;
    Ok(scalar(&g.mse(&z_pred, &Var::constant(input.z.clone()))))
}

/// Physical reconstruction objective `‖y0 − ((x0 − A)·T + A)‖²`.
pub fn loss_at<T: Float>(bundle: &ModelBundle<T>, params: &ParamSet<T>, x0: &Tensor<T>, y0: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::inference();
    let restored = bundle.physnet().restore(&mut g, params, &Var::constant(x0.clone()))?.restored;
    if restored.shape() != y0.shape() {
        return Err(Error::ShapeMismatch(format!("y0 {:?} vs x0 {:?}", y0.shape(), x0.shape())));
    }
    Ok(scalar(&g.mse(&restored, &Var::constant(y0.clone()))))
}

/// Distribution-transformation objective `‖y_t − y′_t‖²`.
pub fn loss_phi<T: Float>(bundle: &ModelBundle<T>, params: &ParamSet<T>, input: &LossInputs<'_, T>) -> Result<f64> {
    let mut g = Graph::inference();
    let terms = compute_losses(&mut g, bundle, params, input, &LossWeights::default())?;
    Ok(scalar(&terms.phi))
}
