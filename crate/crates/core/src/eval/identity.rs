use rayon::prelude::*;

use crate::aggregate::{aggregate, Aggregator, SaliencyMap};
use crate::error::{invalid, Result};
use crate::extract::{spatial_contributions, AttachPoint, IdentityKind};
use crate::io::ShapesDataset;
use crate::multilayer::upsample;
use crate::nn::{forward_backward, LayerKind, ModelGraph, Objective};

use super::pointing::pointing_hit;
use super::report::{EvalRecord, EvalReport, Metric};
use super::spearman;

/// Group suffix for pointing records of the identity-trick maps.
pub const IDENTITY_GROUP_SUFFIX: &str = "/identity";
/// Group suffix for pointing records of the real-layer maps.
pub const REAL_GROUP_SUFFIX: &str = "/real";

/// NormGrad maps of an `N x N` conv with and without the identity trick, for the labelled class.
///
/// With the trick the contribution is `g_out unfold_N(x_out)^T` (a virtual `N x N`
/// identity conv on the layer output); without it, the real layer's `g_out unfold_N(x_in)^T`.
pub fn identity_pair(
    model: &ModelGraph,
    input: &crate::tensor::Tensor,
    class: usize,
    layer: &str,
) -> Result<(SaliencyMap, SaliencyMap)> {
    let kernel = match model.layers()[model.layer_index(layer)?].kind {
        LayerKind::Conv { kernel, .. } => kernel,
        _ => return Err(invalid(format!("layer '{layer}' is not a convolution"))),
    };
    let tape = forward_backward(model, input, Objective::ClassLogit(class))?;
    let attach = AttachPoint::output(layer);
    let with = aggregate(
        &spatial_contributions(&tape, model, &attach, IdentityKind::ConvIdentity { kernel })?,
        Aggregator::Norm,
    )?;
    let without = aggregate(&spatial_contributions(&tape, model, &attach, IdentityKind::RealConv)?, Aggregator::Norm)?;
    Ok((with, without))
}

/// Per conv layer: Spearman between the two NormGrad variants (group `<layer>`),
/// and pointing hits of each at input resolution (groups `<layer>/identity`, `<layer>/real`).
pub fn identity_trick_study(
    model: &ModelGraph,
    data: &ShapesDataset,
    conv_layers: &[String],
    tolerance: usize,
) -> Result<EvalReport> {
    for l in conv_layers {
        if !matches!(model.layers()[model.layer_index(l)?].kind, LayerKind::Conv { .. }) {
            return Err(invalid(format!("layer '{l}' is not a convolution")));
        }
    }
    if data.is_empty() {
        return Err(invalid("identity study needs at least one image"));
    }
    let [_, h, w] = model.input_shape();
    let mut report = EvalReport::default();
    for layer in conv_layers {
        let rows = data
            .images
            .par_iter()
            .zip(&data.annotations)
            .map(|(x, ann)| {
                let (with, without) = identity_pair(model, x, ann.class, layer)?;
                let rho = spearman(&with, &without)?;
                let hit_with = pointing_hit(&upsample(&with, h, w)?, ann, tolerance)?;
                let hit_without = pointing_hit(&upsample(&without, h, w)?, ann, tolerance)?;
                let rec = |group: String, metric, value| EvalRecord {
                    group,
                    metric,
                    image_id: ann.image_id,
                    class: ann.class,
                    value,
                };
                Ok([
                    rec(layer.clone(), Metric::Spearman, rho),
                    rec(format!("{layer}{IDENTITY_GROUP_SUFFIX}"), Metric::Hit, f64::from(u8::from(hit_with))),
                    rec(format!("{layer}{REAL_GROUP_SUFFIX}"), Metric::Hit, f64::from(u8::from(hit_without))),
                ])
            })
            .collect::<Result<Vec<_>>>()?;
        for k in 0..3 {
            for r in &rows {
                report.push(r[k].clone());
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelBuilder;
    use crate::tensor::Tensor;

    #[test]
    fn kronecker_one_by_one_conv_is_identical() {
        let model = ModelBuilder::new([3, 8, 8], 0)
            .conv("c1", 3, 4)
            .and_then(|b| b.relu("r1"))
            .and_then(|b| b.conv("id", 1, 4))
            .and_then(|b| b.relu("r2"))
            .and_then(|b| b.global_avg_pool("gap"))
            .and_then(|b| b.fully_connected("fc", 2))
            .and_then(|b| b.build())
            .unwrap();
        let mut eye = vec![0.0; 16];
        for k in 0..4 {
            eye[k * 4 + k] = 1.0;
        }
        let model = model.with_params("id", vec![Tensor::new(vec![4, 4], eye).unwrap()]).unwrap();
        let x = Tensor::new(vec![3, 8, 8], (0..192).map(|i| ((i * 29) % 17) as f64 / 17.0 - 0.4).collect()).unwrap();
        let (a, b) = identity_pair(&model, &x, 1, "id").unwrap();
        for (p, q) in a.values.iter().zip(&b.values) {
            assert!((p - q).abs() <= 1e-12);
        }
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_conv_layers_rejected() {
        let model = crate::nn::toy_architecture([3, 32, 32], 2, 0).unwrap();
        let data = crate::io::generate_shapes(2, 2, 0).unwrap();
        assert!(identity_trick_study(&model, &data, &["relu1".to_string()], 2).is_err());
        assert!(identity_trick_study(&model, &data, &["missing".to_string()], 2).is_err());
        let r = identity_trick_study(&model, &data, &["conv2".to_string()], 2).unwrap();
        assert_eq!(r.records.len(), 6);
        assert_eq!(r.groups().len(), 3);
    }
}
