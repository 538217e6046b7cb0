use rayon::prelude::*;

use crate::aggregate::{method_saliency, MethodPreset, SaliencyMap};
use crate::error::{invalid, Result};
use crate::extract::AttachPoint;
use crate::io::{Annotation, ShapesDataset};
use crate::multilayer::{combine, upsample, CombineMode, LayerWeights};
use crate::nn::ModelGraph;

use super::report::{EvalRecord, EvalReport, Metric};

/// Default hit tolerance in pixels.
pub const DEFAULT_TOLERANCE: usize = 15;

/// A map at input resolution together with the ground truth of its target class.
#[derive(Debug, Clone, PartialEq)]
pub struct PointingItem {
    pub map: SaliencyMap,
    pub annotation: Annotation,
}

/// Whether the map's maximum (first in row-major order on ties) lies within
/// `tolerance` pixels, in Chebyshev distance, of any ground-truth box.
pub fn pointing_hit(map: &SaliencyMap, annotation: &Annotation, tolerance: usize) -> Result<bool> {
    for b in &annotation.boxes {
        if b.x0 > b.x1 || b.y0 > b.y1 || b.x1 >= map.width || b.y1 >= map.height {
            return Err(invalid(format!(
                "box {b:?} of image {} lies outside the {}x{} map",
                annotation.image_id, map.height, map.width
            )));
        }
    }
    let (y, x) = map.argmax();
    Ok(annotation.boxes.iter().any(|b| b.chebyshev_distance(y, x) <= tolerance))
}

/// Hit/miss records under `group`; accuracy is the mean of per-class hit rates.
pub fn pointing_game(items: &[PointingItem], tolerance: usize, group: &str) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(invalid("pointing game needs at least one map"));
    }
    let records = items
        .iter()
        .map(|it| {
            Ok(EvalRecord {
                group: group.to_string(),
                metric: Metric::Hit,
                image_id: it.annotation.image_id,
                class: it.annotation.class,
                value: if pointing_hit(&it.map, &it.annotation, tolerance)? { 1.0 } else { 0.0 },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(records))
}

/// Maps of `preset` at each attach point for every image, at layer resolution,
/// computed for the annotated class.
pub fn layer_maps(
    model: &ModelGraph,
    data: &ShapesDataset,
    preset: MethodPreset,
    layers: &[AttachPoint],
) -> Result<Vec<Vec<SaliencyMap>>> {
    data.images
        .par_iter()
        .zip(&data.annotations)
        .map(|(x, a)| {
            layers
                .iter()
                .map(|at| Ok(method_saliency(model, x, a.class, preset, at)?.with_input_id(a.image_id.to_string())))
                .collect()
        })
        .collect()
}

/// Pointing game of layer `j` of `maps`, upsampled to the input size.
pub fn single_layer_pointing(
    maps: &[Vec<SaliencyMap>],
    data: &ShapesDataset,
    j: usize,
    size: (usize, usize),
    tolerance: usize,
    group: &str,
) -> Result<EvalReport> {
    let items = maps
        .iter()
        .zip(&data.annotations)
        .map(|(m, a)| Ok(PointingItem { map: upsample(&m[j], size.0, size.1)?, annotation: a.clone() }))
        .collect::<Result<Vec<_>>>()?;
    pointing_game(&items, tolerance, group)
}

/// Pointing game of the weighted combination of every image's maps. Product
/// mode uses the positive part of each map, since it needs nonnegative inputs.
pub fn combined_pointing(
    maps: &[Vec<SaliencyMap>],
    data: &ShapesDataset,
    weights: &LayerWeights,
    mode: CombineMode,
    size: (usize, usize),
    tolerance: usize,
    group: &str,
) -> Result<EvalReport> {
    let items = maps
        .par_iter()
        .zip(&data.annotations)
        .map(|(m, a)| {
            let ms: Vec<SaliencyMap> = match mode {
                CombineMode::Product => m.iter().map(SaliencyMap::positive_part).collect(),
                CombineMode::Additive => m.clone(),
            };
            Ok(PointingItem { map: combine(&ms, weights, mode, size.0, size.1)?.map, annotation: a.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    pointing_game(&items, tolerance, group)
}
