//! Quantitative evaluation of saliency maps.

mod cascade;
mod identity;
mod pointing;
mod report;
mod sensitivity;

pub use cascade::{cascading_randomize, cascading_sweep, sweep_layers, SweepStage};
pub use identity::{identity_trick_study, IDENTITY_GROUP_SUFFIX, REAL_GROUP_SUFFIX};
pub use pointing::{
    combined_pointing, layer_maps, pointing_game, pointing_hit, single_layer_pointing, PointingItem, DEFAULT_TOLERANCE,
};
pub use report::{Aggregate, EvalRecord, EvalReport, Metric, REPORT_SCHEMA_VERSION};
pub use sensitivity::{class_sensitivity, class_sensitivity_with, extreme_classes};

use crate::aggregate::SaliencyMap;
use crate::error::{invalid, Result};

/// Ranks starting at 1, tied values sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; zero when either side has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

pub fn spearman_values(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!("cannot correlate {} values with {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(invalid("cannot correlate empty maps"));
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// Spearman rank correlation of two equally sized maps. Constant maps give 0.
pub fn spearman(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(invalid(format!("map sizes differ: {}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    spearman_values(&a.values, &b.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> SaliencyMap {
        SaliencyMap::new(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_examples() {
        assert!((spearman(&col(&[1.0, 2.0, 3.0]), &col(&[3.0, 5.0, 4.0])).unwrap() - 0.5).abs() < 1e-15);
        let m = col(&[0.3, -1.0, 2.0, 7.5]);
        assert!((spearman(&m, &m).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&m, &m.map_values(|v| -v)).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(spearman(&m, &col(&[2.0; 4])).unwrap(), 0.0);
        assert!(spearman(&m, &col(&[1.0, 2.0, 3.0])).is_err());
        assert!(spearman(&m, &SaliencyMap::new(2, 2, vec![0.0; 4]).unwrap()).is_err());
    }

    #[test]
    fn ties_share_average_rank() {
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 3.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn symmetric_bounded_rank_invariant(
            a in proptest::collection::vec(-100.0f64..100.0, 2..40),
            seed in proptest::collection::vec(-100.0f64..100.0, 40),
            shift in -5.0f64..5.0,
        ) {
            let b = &seed[..a.len()];
            let r = spearman_values(&a, b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert_eq!(r, spearman_values(b, &a).unwrap());
            let ta: Vec<f64> = a.iter().map(|v| (v / 50.0).exp() * 3.0 + shift).collect();
            let tb: Vec<f64> = b.iter().map(|v| v.powi(3)).collect();
            prop_assert!((spearman_values(&ta, &tb).unwrap() - r).abs() < 1e-12);
        }
    }
}
