use rayon::prelude::*;

use crate::aggregate::{method_saliency, MethodPreset, SaliencyMap};
use crate::error::{invalid, Result};
use crate::extract::AttachPoint;
use crate::metasal::{meta_saliency, MetaConfig};
use crate::nn::{forward, ModelGraph};
use crate::tensor::Tensor;

use super::report::{EvalRecord, EvalReport, Metric};
use super::spearman;

/// `(argmax, argmin)` of the logits, first index on ties.
pub fn extreme_classes(logits: &[f64]) -> Result<(usize, usize)> {
    if logits.len() < 2 {
        return Err(invalid("class sensitivity needs at least two classes"));
    }
    let (mut hi, mut lo) = (0, 0);
    for (c, &v) in logits.iter().enumerate() {
        if v > logits[hi] {
            hi = c;
        }
        if v < logits[lo] {
            lo = c;
        }
    }
    Ok((hi, lo))
}

/// Spearman correlation between maps for the most and least confident classes,
/// one record per image (`image_id` is the position in `images`, `class` the max class).
pub fn class_sensitivity_with<F>(model: &ModelGraph, images: &[Tensor], group: &str, saliency: F) -> Result<EvalReport>
where
    F: Fn(&ModelGraph, &Tensor, usize) -> Result<SaliencyMap> + Sync,
{
    if model.num_classes() < 2 {
        return Err(invalid("class sensitivity needs at least two classes"));
    }
    let records = images
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let (hi, lo) = extreme_classes(forward(model, x)?.logits())?;
            let rho = spearman(&saliency(model, x, hi)?, &saliency(model, x, lo)?)?;
            Ok(EvalRecord { group: group.to_string(), metric: Metric::Spearman, image_id: i, class: hi, value: rho })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(records))
}

pub fn class_sensitivity(
    model: &ModelGraph,
    images: &[Tensor],
    preset: MethodPreset,
    attach: &AttachPoint,
    meta: Option<&MetaConfig>,
) -> Result<EvalReport> {
    let group = match meta {
        Some(m) => format!("{preset}@{}+meta{}", attach.layer, m.epsilon),
        None => format!("{preset}@{}", attach.layer),
    };
    class_sensitivity_with(model, images, &group, |m, x, c| match meta {
        Some(cfg) => meta_saliency(m, x, c, preset, attach, cfg),
        None => method_saliency(m, x, c, preset, attach),
    })
}
