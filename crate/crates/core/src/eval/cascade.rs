use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::aggregate::{method_saliency, MethodPreset};
use crate::error::{invalid, Result};
use crate::extract::AttachPoint;
use crate::nn::{forward, ModelGraph};
use crate::tensor::Tensor;

use super::report::{EvalRecord, EvalReport, Metric};
use super::{extreme_classes, spearman};

/// Re-draws every parameter of `from` and all later layers from `N(0, 1/fan_in)`.
///
/// Each layer has its own random stream derived from `seed` and its position,
/// so a deeper randomisation reproduces the shallower one on the layers they share.
/// `None` randomises nothing.
pub fn cascading_randomize(model: &ModelGraph, from: Option<&str>, seed: u64) -> Result<ModelGraph> {
    let mut out = model.clone();
    let Some(name) = from else {
        return Ok(out);
    };
    let start = model.layer_index(name)?;
    for (j, layer) in out.layers_mut().iter_mut().enumerate().skip(start) {
        if !layer.kind.has_params() {
            continue;
        }
        let std = 1.0 / (layer.kind.fan_in() as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        for p in layer.params.iter_mut() {
            for v in p.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

/// Parameterised layers from the output back to the input: the order in which
/// a cascading sweep extends randomisation.
pub fn sweep_layers(model: &ModelGraph) -> Vec<String> {
    model.layers().iter().rev().filter(|l| l.kind.has_params()).map(|l| l.name.clone()).collect()
}

/// A single stage of the sweep: randomisation reaching down to `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepStage {
    pub layer: String,
    pub group: String,
}

/// Spearman between the trained model's map and the map after each cascading
/// stage, for the trained model's predicted class. Groups are `from:<layer>`.
///
/// Each stage is repeated for `draws` independent randomisations (seeds
/// `seed, seed + 1, ...`), giving one record per draw and image, so stage means
/// estimate the expected correlation rather than that of a single draw.
pub fn cascading_sweep(
    model: &ModelGraph,
    images: &[Tensor],
    preset: MethodPreset,
    attach: &AttachPoint,
    seed: u64,
    draws: usize,
) -> Result<(Vec<SweepStage>, EvalReport)> {
    if draws == 0 {
        return Err(invalid("cascading sweep needs at least one draw"));
    }
    let base = images
        .par_iter()
        .map(|x| {
            let (c, _) = extreme_classes(forward(model, x)?.logits())?;
            Ok((c, method_saliency(model, x, c, preset, attach)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stages = Vec::new();
    let mut report = EvalReport::default();
    for layer in sweep_layers(model) {
        let group = format!("from:{layer}");
        for d in 0..draws as u64 {
            let randomized = cascading_randomize(model, Some(&layer), seed.wrapping_add(d))?;
            let records = images
                .par_iter()
                .zip(&base)
                .enumerate()
                .map(|(i, (x, (c, m)))| {
                    let r = method_saliency(&randomized, x, *c, preset, attach)?;
                    Ok(EvalRecord {
                        group: group.clone(),
                        metric: Metric::Spearman,
                        image_id: i,
                        class: *c,
                        value: spearman(m, &r)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            report.extend(EvalReport::new(records));
        }
        stages.push(SweepStage { layer, group });
    }
    Ok((stages, report))
}
