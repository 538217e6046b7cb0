//! Aggregate phase: collapse each location's contribution to a scalar, plus
//! the named saliency methods built from (identity kind, aggregator) pairs.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Result};
use crate::extract::{attach_tensors, spatial_contributions, AttachPoint, ContribField, FieldData, IdentityKind};
use crate::nn::{forward_backward, ModelGraph, Objective, Tape};
use crate::tensor::{l2, norms, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregator {
    Sum,
    MaxAbs,
    Norm,
    /// L2 norm of the positive part.
    PosFilterNorm,
    /// Sum of the positive part.
    PosFilterSum,
}

/// A 2-D grid of per-location scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Layer the map was computed at, if any.
    pub layer: Option<String>,
    pub input_id: Option<String>,
    pub signed: bool,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(invalid(format!(
                "map of {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("saliency values must be finite"));
        }
        let signed = values.iter().any(|&v| v < 0.0);
        Ok(Self { height, width, values, layer: None, input_id: None, signed })
    }

    pub fn with_layer(mut self, layer: impl Into<String>) -> Self {
        self.layer = Some(layer.into());
        self
    }

    pub fn with_input_id(mut self, id: impl Into<String>) -> Self {
        self.input_id = Some(id.into());
        self
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn has_negative(&self) -> bool {
        self.values.iter().any(|&v| v < 0.0)
    }

    /// `(row, col)` of the maximum; the first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        let signed = values.iter().any(|&v| v < 0.0);
        Self { values, signed, ..self.clone() }
    }

    pub fn positive_part(&self) -> Self {
        self.map_values(|v| v.max(0.0))
    }

    /// Rescales to `[0, 1]`; a constant map becomes all zeros.
    pub fn min_max_normalized(&self) -> Self {
        let (lo, hi) = (self.min(), self.max());
        let range = hi - lo;
        if range <= 0.0 {
            return self.map_values(|_| 0.0);
        }
        self.map_values(|v| ((v - lo) / range).clamp(0.0, 1.0))
    }
}

fn field_kind_name(f: &ContribField) -> &'static str {
    if f.is_factored() {
        "factored"
    } else {
        "vector"
    }
}

// ||(g x^T)_+||_F without materialising the outer product: positive entries
// come from same-sign pairs.
fn factored_pos_norm(g: &[f64], x: &[f64]) -> f64 {
    let split =
        |v: &[f64]| v.iter().fold((0.0, 0.0), |(p, n), &a| if a > 0.0 { (p + a * a, n) } else { (p, n + a * a) });
    let (gp, gn) = split(g);
    let (xp, xn) = split(x);
    (gp * xp + gn * xn).sqrt()
}

/// Reduces every location of `field` to a scalar.
///
/// Norm on a factored field is `||g_u|| * ||x_u||`, the Frobenius norm of the
/// outer product.
pub fn aggregate(field: &ContribField, agg: Aggregator) -> Result<SaliencyMap> {
    let hw = field.num_locations();
    let values: Vec<f64> = match (&field.data, agg) {
        (FieldData::Vector(t), _) => {
            let k = t.shape()[0];
            let d = t.data();
            let mut col = vec![0.0; k];
            (0..hw)
                .map(|u| {
                    for (c, slot) in col.iter_mut().enumerate() {
                        *slot = d[c * hw + u];
                    }
                    let n = norms(&col);
                    match agg {
                        Aggregator::Sum => n.sum,
                        Aggregator::MaxAbs => n.maxabs,
                        Aggregator::Norm => n.l2,
                        Aggregator::PosFilterNorm => l2(&col.iter().map(|v| v.max(0.0)).collect::<Vec<_>>()),
                        Aggregator::PosFilterSum => n.possum,
                    }
                })
                .collect()
        }
        (FieldData::Factored { grad, patches }, Aggregator::Norm | Aggregator::PosFilterNorm) => {
            let kout = grad.shape()[0];
            let rows = patches.shape()[0];
            let mut g = vec![0.0; kout];
            let mut x = vec![0.0; rows];
            (0..hw)
                .map(|u| {
                    for (c, slot) in g.iter_mut().enumerate() {
                        *slot = grad.data()[c * hw + u];
                    }
                    for (r, slot) in x.iter_mut().enumerate() {
                        *slot = patches.data()[r * hw + u];
                    }
                    if agg == Aggregator::Norm {
                        l2(&g) * l2(&x)
                    } else {
                        factored_pos_norm(&g, &x)
                    }
                })
                .collect()
        }
        (_, agg) => {
            return Err(invalid(format!("aggregator {agg:?} is not defined for {} fields", field_kind_name(field))))
        }
    };
    let mut map = SaliencyMap::new(field.height, field.width, values)?.with_layer(field.layer.clone());
    map.signed = matches!(agg, Aggregator::Sum);
    Ok(map)
}

/// Named saliency methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodPreset {
    /// Virtual bias + max-abs: `max_k |g_k|`.
    Gradient,
    /// Virtual bias + sum: `sum_k g_k`.
    GradientSum,
    /// Virtual scaling + sum: `sum_k g_k x_k`.
    LinearApprox,
    /// Virtual scaling + positive filter + norm: `||(g * x)_+||`.
    SelectiveNormGrad,
    /// Virtual 1x1 conv + norm: `||g|| ||x||`.
    NormGrad,
    /// Real conv + norm: `||g_out|| ||unfold_N(x_in)||`.
    NormGradReal,
    GradCam,
}

impl MethodPreset {
    pub const ALL: [MethodPreset; 7] = [
        MethodPreset::Gradient,
        MethodPreset::GradientSum,
        MethodPreset::LinearApprox,
        MethodPreset::SelectiveNormGrad,
        MethodPreset::NormGrad,
        MethodPreset::NormGradReal,
        MethodPreset::GradCam,
    ];

    /// Extract/aggregate pair; `None` for Grad-CAM, which averages gradients first.
    pub fn pipeline(&self) -> Option<(IdentityKind, Aggregator)> {
        Some(match self {
            MethodPreset::Gradient => (IdentityKind::Bias, Aggregator::MaxAbs),
            MethodPreset::GradientSum => (IdentityKind::Bias, Aggregator::Sum),
            MethodPreset::LinearApprox => (IdentityKind::Scaling, Aggregator::Sum),
            MethodPreset::SelectiveNormGrad => (IdentityKind::Scaling, Aggregator::PosFilterNorm),
            MethodPreset::NormGrad => (IdentityKind::ConvIdentity { kernel: 1 }, Aggregator::Norm),
            MethodPreset::NormGradReal => (IdentityKind::RealConv, Aggregator::Norm),
            MethodPreset::GradCam => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            MethodPreset::Gradient => "gradient",
            MethodPreset::GradientSum => "gradient-sum",
            MethodPreset::LinearApprox => "linear-approx",
            MethodPreset::SelectiveNormGrad => "selective-normgrad",
            MethodPreset::NormGrad => "normgrad",
            MethodPreset::NormGradReal => "normgrad-real",
            MethodPreset::GradCam => "gradcam",
        }
    }
}

impl fmt::Display for MethodPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodPreset {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodPreset::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| invalid(format!("unknown method '{s}'")))
    }
}

/// Applies `preset` to a tape that already holds gradients.
pub fn saliency_from_tape(
    tape: &Tape,
    model: &ModelGraph,
    preset: MethodPreset,
    attach: &AttachPoint,
) -> Result<SaliencyMap> {
    match preset.pipeline() {
        Some((kind, agg)) => aggregate(&spatial_contributions(tape, model, attach, kind)?, agg),
        None => gradcam_from_tape(tape, model, attach),
    }
}

/// Forward, backward on the raw class logit, extract, aggregate.
pub fn method_saliency(
    model: &ModelGraph,
    input: &Tensor,
    class: usize,
    preset: MethodPreset,
    attach: &AttachPoint,
) -> Result<SaliencyMap> {
    let tape = forward_backward(model, input, Objective::ClassLogit(class))?;
    saliency_from_tape(&tape, model, preset, attach)
}

/// Grad-CAM from a tape: `(sum_k mean_u(g_k) x_{u,k})_+`.
pub fn gradcam_from_tape(tape: &Tape, model: &ModelGraph, attach: &AttachPoint) -> Result<SaliencyMap> {
    let (x, g) = attach_tensors(tape, model, attach, IdentityKind::Scaling)?;
    if x.rank() != 3 {
        return Err(invalid(format!("Grad-CAM needs a spatial layer, '{}' is not", attach.layer)));
    }
    let gbar = spatial_mean(g)?;
    let (k, h, w) = x.dims3()?;
    let hw = h * w;
    let values = (0..hw).map(|u| (0..k).map(|c| gbar[c] * x.data()[c * hw + u]).sum::<f64>().max(0.0)).collect();
    Ok(SaliencyMap::new(h, w, values)?.with_layer(attach.layer.clone()))
}

pub fn gradcam(model: &ModelGraph, input: &Tensor, class: usize, attach: &AttachPoint) -> Result<SaliencyMap> {
    let tape = forward_backward(model, input, Objective::ClassLogit(class))?;
    gradcam_from_tape(&tape, model, attach)
}

/// Per-channel spatial mean of a `K x H x W` tensor.
pub fn spatial_mean(t: &Tensor) -> Result<Vec<f64>> {
    let (k, h, w) = t.dims3()?;
    let hw = h * w;
    Ok((0..k).map(|c| t.data()[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64).collect())
}
