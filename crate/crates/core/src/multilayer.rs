//! Combining saliency maps from several layers into one input-resolution map.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::aggregate::{spatial_mean, SaliencyMap};
use crate::error::{invalid, Result};
use crate::extract::{AttachPoint, Side};
use crate::nn::{forward, ModelGraph, Tape};
use crate::tensor::Tensor;

/// Floor added before raising a map to a fractional power, so `0^gamma` is defined.
pub const PRODUCT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightScheme {
    FeatureSpread,
    ProbeAccuracy,
    LinearInterp,
    Uniform,
}

impl WeightScheme {
    pub const ALL: [WeightScheme; 4] =
        [WeightScheme::FeatureSpread, WeightScheme::ProbeAccuracy, WeightScheme::LinearInterp, WeightScheme::Uniform];

    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::FeatureSpread => "spread",
            WeightScheme::ProbeAccuracy => "accuracy",
            WeightScheme::LinearInterp => "linear",
            WeightScheme::Uniform => "uniform",
        }
    }
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightScheme {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        WeightScheme::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| invalid(format!("unknown weighting scheme '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombineMode {
    Additive,
    Product,
}

impl FromStr for CombineMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" | "additive" => Ok(CombineMode::Additive),
            "prod" | "product" => Ok(CombineMode::Product),
            _ => Err(invalid(format!("unknown combine mode '{s}'"))),
        }
    }
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineMode::Additive => "add",
            CombineMode::Product => "prod",
        })
    }
}

/// Normalised per-layer weights, in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub scheme: WeightScheme,
    pub gamma: Vec<(String, f64)>,
}

impl LayerWeights {
    /// Normalises raw nonnegative scores to sum to one. All-zero scores fall back to uniform.
    pub fn from_scores(scheme: WeightScheme, layers: &[String], scores: &[f64]) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("layer list is empty"));
        }
        if scores.iter().any(|&s| s < 0.0 || !s.is_finite()) {
            return Err(invalid("layer scores must be finite and nonnegative"));
        }
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return uniform_weights(layers);
        }
        Ok(Self { scheme, gamma: layers.iter().cloned().zip(scores.iter().map(|s| s / total)).collect() })
    }

    pub fn get(&self, layer: &str) -> Option<f64> {
        self.gamma.iter().find(|(n, _)| n == layer).map(|(_, g)| *g)
    }

    pub fn layers(&self) -> Vec<String> {
        self.gamma.iter().map(|(n, _)| n.clone()).collect()
    }
}

/// `gamma_j = j / J`, normalised.
pub fn linear_interp_weights(layers: &[String]) -> Result<LayerWeights> {
    let scores: Vec<f64> = (1..=layers.len()).map(|j| j as f64 / layers.len() as f64).collect();
    LayerWeights::from_scores(WeightScheme::LinearInterp, layers, &scores)
}

/// `gamma_j = 1 / J`.
pub fn uniform_weights(layers: &[String]) -> Result<LayerWeights> {
    if layers.is_empty() {
        return Err(invalid("layer list is empty"));
    }
    let g = 1.0 / layers.len() as f64;
    Ok(LayerWeights { scheme: WeightScheme::Uniform, gamma: layers.iter().map(|l| (l.clone(), g)).collect() })
}

fn attach_activation<'t>(tape: &'t Tape, model: &ModelGraph, attach: &AttachPoint) -> Result<&'t Tensor> {
    let j = model.layer_index(&attach.layer)?;
    Ok(match attach.side {
        Side::Output => tape.x_out(j),
        Side::Input => tape.x_in(j),
    })
}

/// Spatially pooled activations: `[image][layer] -> K-vector`.
pub fn pooled_features(model: &ModelGraph, images: &[Tensor], layers: &[AttachPoint]) -> Result<Vec<Vec<Vec<f64>>>> {
    images
        .par_iter()
        .map(|img| {
            let tape = forward(model, img)?;
            layers.iter().map(|a| spatial_mean(attach_activation(&tape, model, a)?)).collect()
        })
        .collect()
}

/// Raw spread of one layer: mean over images of the channel-averaged absolute
/// deviation of each image's pooled activation from the mean pooled activation.
pub fn feature_spread(pooled: &[Vec<f64>]) -> f64 {
    let m = pooled.len();
    if m == 0 {
        return 0.0;
    }
    let k = pooled[0].len();
    let mut mu = vec![0.0; k];
    for v in pooled {
        for (a, b) in mu.iter_mut().zip(v) {
            *a += b / m as f64;
        }
    }
    pooled.iter().map(|v| v.iter().zip(&mu).map(|(a, b)| (a - b).abs()).sum::<f64>() / k as f64).sum::<f64>() / m as f64
}

pub fn feature_spread_weights(model: &ModelGraph, images: &[Tensor], layers: &[AttachPoint]) -> Result<LayerWeights> {
    if layers.is_empty() {
        return Err(invalid("layer list is empty"));
    }
    if images.len() < 2 {
        return Err(invalid("feature spread needs at least two images"));
    }
    let feats = pooled_features(model, images, layers)?;
    let scores: Vec<f64> =
        (0..layers.len()).map(|j| feature_spread(&feats.iter().map(|f| f[j].clone()).collect::<Vec<_>>())).collect();
    let names: Vec<String> = layers.iter().map(|a| a.layer.clone()).collect();
    LayerWeights::from_scores(WeightScheme::FeatureSpread, &names, &scores)
}

/// Linear probe: multinomial logistic regression trained by full-batch
/// gradient descent on standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iterations: 200, lr: 0.1 }
    }
}

/// Top-1 accuracy of a linear probe trained and evaluated on the same sample.
pub fn probe_accuracy(features: &[Vec<f64>], labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<f64> {
    let m = features.len();
    if m == 0 || m != labels.len() {
        return Err(invalid("probe needs one label per feature vector"));
    }
    let mut present = vec![false; num_classes];
    for &y in labels {
        if y >= num_classes {
            return Err(invalid(format!("label {y} out of range")));
        }
        present[y] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(invalid("probe needs at least two classes in the sample"));
    }
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for f in features {
        for (a, b) in mean.iter_mut().zip(f) {
            *a += b / m as f64;
        }
    }
    let mut std = vec![0.0; d];
    for f in features {
        for i in 0..d {
            std[i] += (f[i] - mean[i]).powi(2) / m as f64;
        }
    }
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| (0..d).map(|i| if std[i] > 0.0 { (f[i] - mean[i]) / std[i].sqrt() } else { 0.0 }).collect())
        .collect();

    let mut w = vec![vec![0.0; d]; num_classes];
    let mut b = vec![0.0; num_classes];
    let logits = |w: &[Vec<f64>], b: &[f64], xi: &[f64]| -> Vec<f64> {
        (0..num_classes).map(|c| b[c] + w[c].iter().zip(xi).map(|(p, q)| p * q).sum::<f64>()).collect()
    };
    for _ in 0..cfg.iterations {
        let mut gw = vec![vec![0.0; d]; num_classes];
        let mut gb = vec![0.0; num_classes];
        for (xi, &y) in x.iter().zip(labels) {
            let mut p = crate::nn::softmax(&logits(&w, &b, xi));
            p[y] -= 1.0;
            for c in 0..num_classes {
                gb[c] += p[c] / m as f64;
                for i in 0..d {
                    gw[c][i] += p[c] * xi[i] / m as f64;
                }
            }
        }
        for c in 0..num_classes {
            b[c] -= cfg.lr * gb[c];
            for i in 0..d {
                w[c][i] -= cfg.lr * gw[c][i];
            }
        }
    }
    let hits = x
        .iter()
        .zip(labels)
        .filter(|(xi, &y)| {
            let l = logits(&w, &b, xi);
            let mut best = 0;
            for (c, &v) in l.iter().enumerate() {
                if v > l[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    Ok(hits as f64 / m as f64)
}

pub fn probe_accuracy_weights(
    model: &ModelGraph,
    images: &[Tensor],
    labels: &[usize],
    layers: &[AttachPoint],
    cfg: &ProbeConfig,
) -> Result<LayerWeights> {
    if layers.is_empty() {
        return Err(invalid("layer list is empty"));
    }
    let feats = pooled_features(model, images, layers)?;
    let scores = (0..layers.len())
        .map(|j| {
            let fj: Vec<Vec<f64>> = feats.iter().map(|f| f[j].clone()).collect();
            probe_accuracy(&fj, labels, model.num_classes(), cfg)
        })
        .collect::<Result<Vec<f64>>>()?;
    let names: Vec<String> = layers.iter().map(|a| a.layer.clone()).collect();
    LayerWeights::from_scores(WeightScheme::ProbeAccuracy, &names, &scores)
}

/// Weights for `layers` under `scheme`. Data-driven schemes use `images`
/// (and `labels` for the probe); the others ignore them.
pub fn compute_weights(
    scheme: WeightScheme,
    model: &ModelGraph,
    images: &[Tensor],
    labels: &[usize],
    layers: &[AttachPoint],
) -> Result<LayerWeights> {
    let names: Vec<String> = layers.iter().map(|a| a.layer.clone()).collect();
    match scheme {
        WeightScheme::FeatureSpread => feature_spread_weights(model, images, layers),
        WeightScheme::ProbeAccuracy => probe_accuracy_weights(model, images, labels, layers, &ProbeConfig::default()),
        WeightScheme::LinearInterp => linear_interp_weights(&names),
        WeightScheme::Uniform => uniform_weights(&names),
    }
}

/// Bilinear upsampling with corner pixel centres aligned.
pub fn upsample(map: &SaliencyMap, height: usize, width: usize) -> Result<SaliencyMap> {
    if height < map.height || width < map.width {
        return Err(invalid(format!("cannot downsample {}x{} to {height}x{width}", map.height, map.width)));
    }
    if height == map.height && width == map.width {
        return Ok(map.clone());
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, map.height, height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, map.width, width);
            let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
            let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    let mut out = SaliencyMap::new(height, width, values)?;
    out.layer = map.layer.clone();
    out.input_id = map.input_id.clone();
    out.signed = map.signed;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedMap {
    pub map: SaliencyMap,
    pub mode: CombineMode,
    pub provenance: Vec<(String, f64)>,
}

/// Upsamples each map to `height x width`, min-max normalises it to `[0, 1]`,
/// then forms `sum_j gamma_j m_j` or `prod_j (m_j + floor)^gamma_j`.
pub fn combine(
    maps: &[SaliencyMap],
    weights: &LayerWeights,
    mode: CombineMode,
    height: usize,
    width: usize,
) -> Result<CombinedMap> {
    if maps.len() != weights.gamma.len() {
        return Err(invalid(format!("{} maps for {} weighted layers", maps.len(), weights.gamma.len())));
    }
    let mut acc = vec![if mode == CombineMode::Product { 1.0 } else { 0.0 }; height * width];
    for (layer, gamma) in &weights.gamma {
        let map = maps
            .iter()
            .find(|m| m.layer.as_deref() == Some(layer.as_str()))
            .ok_or_else(|| invalid(format!("no map for weighted layer '{layer}'")))?;
        if mode == CombineMode::Product && map.has_negative() {
            return Err(invalid(format!("map for '{layer}' is signed; product mode needs nonnegative maps")));
        }
        let m = upsample(map, height, width)?.min_max_normalized();
        for (a, v) in acc.iter_mut().zip(&m.values) {
            match mode {
                CombineMode::Additive => *a += gamma * v,
                CombineMode::Product => *a *= (v + PRODUCT_FLOOR).powf(*gamma),
            }
        }
    }
    for a in acc.iter_mut() {
        *a = a.clamp(0.0, 1.0);
    }
    let mut map = SaliencyMap::new(height, width, acc)?;
    map.input_id = maps.first().and_then(|m| m.input_id.clone());
    Ok(CombinedMap { map, mode, provenance: weights.gamma.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("l{i}")).collect()
    }

    fn map(h: usize, w: usize, v: Vec<f64>, layer: &str) -> SaliencyMap {
        SaliencyMap::new(h, w, v).unwrap().with_layer(layer)
    }

    #[test]
    fn upsample_examples() {
        let m = map(2, 2, vec![0.0, 1.0, 1.0, 0.0], "a");
        assert_eq!(upsample(&m, 2, 2).unwrap(), m);
        let up = upsample(&m, 3, 3).unwrap();
        assert!((up.get(1, 1) - 0.5).abs() < 1e-15);
        assert_eq!(up.get(0, 0), 0.0);
        assert_eq!(up.get(0, 2), 1.0);
        let c = upsample(&map(3, 2, vec![0.7; 6], "a"), 11, 9).unwrap();
        assert!(c.values.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(upsample(&m, 1, 4).is_err());
    }

    #[test]
    fn interp_and_uniform_weights() {
        let one = names(1);
        assert_eq!(linear_interp_weights(&one).unwrap().gamma[0].1, 1.0);
        assert_eq!(uniform_weights(&one).unwrap().gamma[0].1, 1.0);
        let lin = linear_interp_weights(&names(4)).unwrap();
        for (g, e) in lin.gamma.iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((g.1 - e).abs() < 1e-15);
        }
        let uni = uniform_weights(&names(4)).unwrap();
        assert!(uni.gamma.iter().all(|g| g.1 == 0.25));
        assert!(uniform_weights(&[]).is_err());
    }

    #[test]
    fn spread_hand_example() {
        assert_eq!(feature_spread(&[vec![1.0], vec![3.0]]), 1.0);
        assert_eq!(feature_spread(&[vec![2.0, 5.0], vec![2.0, 5.0]]), 0.0);
    }

    #[test]
    fn zero_spread_falls_back_to_uniform() {
        let w = LayerWeights::from_scores(WeightScheme::FeatureSpread, &names(3), &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(w.scheme, WeightScheme::Uniform);
        assert!(w.gamma.iter().all(|g| (g.1 - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn separable_probe_is_perfect() {
        let feats: Vec<Vec<f64>> =
            (0..40).map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 } + 0.01 * i as f64, 0.3]).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        assert_eq!(probe_accuracy(&feats, &labels, 2, &ProbeConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn random_features_probe_near_chance() {
        use rand::{Rng, SeedableRng};
        use rand_distr::StandardNormal;
        for seed in 0..20 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let feats: Vec<Vec<f64>> =
                (0..100).map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
            let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
            let acc = probe_accuracy(&feats, &labels, 2, &ProbeConfig::default()).unwrap();
            assert!((0.3..=0.7).contains(&acc), "seed {seed}: {acc}");
        }
    }

    #[test]
    fn single_class_probe_rejected() {
        let feats = vec![vec![1.0]; 4];
        assert!(probe_accuracy(&feats, &[1, 1, 1, 1], 2, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn single_layer_combination_is_normalized_map() {
        let m = map(2, 2, vec![1.0, 3.0, 2.0, 5.0], "l1");
        let w = uniform_weights(&names(1)).unwrap();
        for mode in [CombineMode::Additive, CombineMode::Product] {
            let c = combine(std::slice::from_ref(&m), &w, mode, 2, 2).unwrap();
            for (a, b) in c.map.values.iter().zip(&m.min_max_normalized().values) {
                assert!((a - b).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn identical_maps_additive_fixed_point() {
        let a = map(2, 2, vec![0.0, 0.25, 1.0, 0.5], "l1");
        let b = SaliencyMap { layer: Some("l2".into()), ..a.clone() };
        let c = combine(&[a.clone(), b], &uniform_weights(&names(2)).unwrap(), CombineMode::Additive, 2, 2).unwrap();
        assert_eq!(c.map.values, a.values);
    }

    #[test]
    fn product_suppresses_disjoint_hotspots() {
        let mut va = vec![0.0; 64];
        let mut vb = vec![0.0; 64];
        for y in 0..3 {
            for x in 0..3 {
                va[y * 8 + x] = 1.0;
                vb[(y + 5) * 8 + x + 5] = 1.0;
            }
        }
        let a = map(8, 8, va, "l1");
        let b = map(8, 8, vb, "l2");
        let c =
            combine(&[a.clone(), b.clone()], &uniform_weights(&names(2)).unwrap(), CombineMode::Product, 8, 8).unwrap();
        let cmax = c.map.max();
        assert!(cmax < a.min_max_normalized().max() && cmax < b.min_max_normalized().max(), "{cmax}");
    }

    #[test]
    fn product_rejects_signed_maps() {
        let a = map(1, 2, vec![-1.0, 1.0], "l1");
        assert!(combine(&[a], &uniform_weights(&names(1)).unwrap(), CombineMode::Product, 1, 2).is_err());
    }

    #[test]
    fn missing_map_rejected() {
        let a = map(1, 2, vec![0.0, 1.0], "zzz");
        assert!(combine(&[a], &uniform_weights(&names(1)).unwrap(), CombineMode::Additive, 1, 2).is_err());
    }

    proptest! {
        #[test]
        fn combination_is_scale_invariant_and_bounded(
            va in proptest::collection::vec(0.0f64..10.0, 16),
            vb in proptest::collection::vec(0.0f64..10.0, 4),
            c in 0.01f64..100.0,
            gamma in 0.0f64..1.0,
            additive in any::<bool>(),
        ) {
            let mode = if additive { CombineMode::Additive } else { CombineMode::Product };
            let w = LayerWeights::from_scores(WeightScheme::Uniform, &names(2), &[gamma, 1.0 - gamma]).unwrap();
            prop_assert!((w.gamma.iter().map(|g| g.1).sum::<f64>() - 1.0).abs() < 1e-12);
            let a = map(4, 4, va.clone(), "l1");
            let b = map(2, 2, vb, "l2");
            let base = combine(&[a.clone(), b.clone()], &w, mode, 8, 8).unwrap();
            let a2 = a.map_values(|v| v * c);
            let scaled = combine(&[a2, b], &w, mode, 8, 8).unwrap();
            for (x, y) in base.map.values.iter().zip(&scaled.map.values) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(x));
            }
        }
    }
}
