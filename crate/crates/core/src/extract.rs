//! Extract phase: the additive contribution of every spatial location to the
//! weight gradient of a real layer or of a virtual identity layer.
//!
//! A virtual identity is never inserted into the model. Attaching one after a
//! layer means reading that layer's output activation and output gradient;
//! attaching one before a layer means reading its input activation and the
//! gradient flowing into it.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{LayerKind, ModelGraph, Tape};
use crate::tensor::{unfold_patches, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Input,
    Output,
}

/// Where in the chain contributions are read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttachPoint {
    pub layer: String,
    pub side: Side,
}

impl AttachPoint {
    pub fn output(layer: impl Into<String>) -> Self {
        Self { layer: layer.into(), side: Side::Output }
    }

    pub fn input(layer: impl Into<String>) -> Self {
        Self { layer: layer.into(), side: Side::Input }
    }
}

/// The layer whose weight gradient is decomposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityKind {
    /// Virtual bias (`b = 0`): contribution `g_u`.
    Bias,
    /// Virtual scaling (`alpha = 1`): contribution `g_u * x_u`.
    Scaling,
    /// Virtual `N x N` Kronecker-delta convolution: contribution `g_u unfold_N(x)_u^T`.
    ConvIdentity { kernel: usize },
    /// The attached real conv layer: `g_out_u unfold_N(x_in)_u^T`.
    RealConv,
    /// The attached real bias layer: `g_out_u`.
    RealBias,
    /// The attached real scaling layer: `g_out_u * x_in_u`.
    RealScaling,
}

impl IdentityKind {
    pub fn is_real(&self) -> bool {
        matches!(self, IdentityKind::RealConv | IdentityKind::RealBias | IdentityKind::RealScaling)
    }
}

/// Per-location contributions.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldData {
    /// One `K`-vector per location, stored as `K x H x W`.
    Vector(Tensor),
    /// Outer product `g_u x_u^T` per location, kept factored:
    /// `grad` is `K' x H x W`, `patches` is `(N*N*K) x (H*W)`.
    Factored { grad: Tensor, patches: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContribField {
    pub height: usize,
    pub width: usize,
    pub data: FieldData,
    pub layer: String,
    pub kind: IdentityKind,
}

impl ContribField {
    pub fn num_locations(&self) -> usize {
        self.height * self.width
    }

    pub fn is_factored(&self) -> bool {
        matches!(self.data, FieldData::Factored { .. })
    }

    /// Contribution vector at location `u` (vector fields only).
    pub fn vector_at(&self, u: usize) -> Option<Vec<f64>> {
        match &self.data {
            FieldData::Vector(t) => Some(t.column(u)),
            FieldData::Factored { .. } => None,
        }
    }

    /// `(g_u, x_u)` at location `u` (factored fields only).
    pub fn factors_at(&self, u: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.data {
            FieldData::Factored { grad, patches } => {
                let hw = self.num_locations();
                let rows = patches.shape()[0];
                let x = (0..rows).map(|r| patches.data()[r * hw + u]).collect();
                Some((grad.column(u), x))
            }
            FieldData::Vector(_) => None,
        }
    }

    /// `sum_u contribution_u`, shaped like the corresponding parameter.
    pub fn spatial_sum(&self) -> Tensor {
        match &self.data {
            FieldData::Vector(t) => {
                let k = t.shape()[0];
                let hw = self.num_locations();
                let sums = (0..k).map(|c| t.data()[c * hw..(c + 1) * hw].iter().sum()).collect();
                Tensor::from_parts(vec![k], sums)
            }
            FieldData::Factored { grad, patches } => {
                let kout = grad.shape()[0];
                let rows = patches.shape()[0];
                let hw = self.num_locations();
                let mut out = vec![0.0; kout * rows];
                for o in 0..kout {
                    let g = &grad.data()[o * hw..(o + 1) * hw];
                    for r in 0..rows {
                        let p = &patches.data()[r * hw..(r + 1) * hw];
                        out[o * rows + r] = g.iter().zip(p).map(|(a, b)| a * b).sum();
                    }
                }
                Tensor::from_parts(vec![kout, rows], out)
            }
        }
    }
}

/// Activation and gradient read by `kind` at `attach`.
pub fn attach_tensors<'t>(
    tape: &'t Tape,
    model: &ModelGraph,
    attach: &AttachPoint,
    kind: IdentityKind,
) -> Result<(&'t Tensor, &'t Tensor)> {
    let j = model.layer_index(&attach.layer)?;
    if !tape.has_gradients() {
        return Err(Error::State("tape has no gradients; run backward first".into()));
    }
    let layer_kind = model.layers()[j].kind;
    let required = match kind {
        IdentityKind::RealConv => Some("conv"),
        IdentityKind::RealBias => Some("bias"),
        IdentityKind::RealScaling => Some("scaling"),
        _ => None,
    };
    if let Some(req) = required {
        let ok = matches!(
            (kind, layer_kind),
            (IdentityKind::RealConv, LayerKind::Conv { .. })
                | (IdentityKind::RealBias, LayerKind::Bias { .. })
                | (IdentityKind::RealScaling, LayerKind::Scaling { .. })
        );
        if !ok {
            return Err(invalid(format!("layer '{}' is not a {req} layer", attach.layer)));
        }
        return Ok((tape.x_in(j), tape.g_out(j)?));
    }
    Ok(match attach.side {
        Side::Output => (tape.x_out(j), tape.g_out(j)?),
        Side::Input => (tape.x_in(j), tape.g_in(j)?),
    })
}

pub fn spatial_contributions(
    tape: &Tape,
    model: &ModelGraph,
    attach: &AttachPoint,
    kind: IdentityKind,
) -> Result<ContribField> {
    let (x, g) = attach_tensors(tape, model, attach, kind)?;
    if x.rank() != 3 {
        return Err(invalid(format!("attach point '{}' is not spatial (shape {:?})", attach.layer, x.shape())));
    }
    let (_, height, width) = x.dims3()?;
    let data = match kind {
        IdentityKind::Bias | IdentityKind::RealBias => FieldData::Vector(g.clone()),
        IdentityKind::Scaling | IdentityKind::RealScaling => FieldData::Vector(g.mul(x)?),
        IdentityKind::ConvIdentity { kernel } => {
            FieldData::Factored { grad: g.clone(), patches: unfold_patches(x, kernel)? }
        }
        IdentityKind::RealConv => {
            let j = model.layer_index(&attach.layer)?;
            let kernel = match model.layers()[j].kind {
                LayerKind::Conv { kernel, .. } => kernel,
                _ => unreachable!("checked in attach_tensors"),
            };
            FieldData::Factored { grad: g.clone(), patches: unfold_patches(x, kernel)? }
        }
    };
    Ok(ContribField { height, width, data, layer: attach.layer.clone(), kind })
}

/// Largest deviation between `sum_u contribution_u` and the recorded parameter
/// gradient, relative to the largest gradient entry. Zero when both vanish.
pub fn contribution_sum_check(field: &ContribField, tape: &Tape, layer: &str) -> Result<f64> {
    if !field.kind.is_real() {
        return Err(invalid("sum check needs a field extracted from a real layer"));
    }
    if field.layer != layer {
        return Err(invalid(format!("field was extracted at '{}', not '{layer}'", field.layer)));
    }
    let grad = tape
        .param_grads()
        .get(layer)
        .ok_or_else(|| Error::State(format!("no parameter gradient recorded for '{layer}'")))?;
    let sum = field.spatial_sum();
    let target = &grad[0];
    if sum.numel() != target.numel() {
        return Err(invalid("field does not match the layer's parameter shape"));
    }
    let scale = target.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = sum.data().iter().zip(target.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if diff == 0.0 {
        return Ok(0.0);
    }
    Ok(diff / scale.max(f64::MIN_POSITIVE))
}
