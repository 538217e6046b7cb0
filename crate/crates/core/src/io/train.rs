//! Mini-batch SGD on softmax cross-entropy, for producing desk-scale models.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::io::shapes::ShapesDataset;
use crate::nn::{forward, forward_backward, ModelGraph, Objective, ParamGrads};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 0.05, batch_size: 16, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelGraph,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
}

fn accumulate(acc: &mut ParamGrads, grads: ParamGrads) -> Result<()> {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(cur) => {
                for (c, gi) in cur.iter_mut().zip(&g) {
                    *c = c.add(gi)?;
                }
            }
            None => {
                acc.insert(name, g);
            }
        }
    }
    Ok(())
}

/// Trains with a fixed per-seed shuffle. Per-sample gradients in a batch are
/// computed in parallel and summed in index order, so results are reproducible.
pub fn train_toy(model: &ModelGraph, dataset: &ShapesDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if model.num_classes() != dataset.num_classes {
        return Err(invalid(format!(
            "model predicts {} classes but the dataset has {}",
            model.num_classes(),
            dataset.num_classes
        )));
    }
    if dataset.is_empty() || cfg.batch_size == 0 {
        return Err(invalid("training needs a non-empty dataset and batch size"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, ParamGrads)>> = batch
                .par_iter()
                .map(|&i| {
                    let tape =
                        forward_backward(&model, &dataset.images[i], Objective::CrossEntropy(dataset.labels[i]))?;
                    let loss = tape.loss().unwrap_or(f64::NAN);
                    Ok((loss, tape.into_param_grads()))
                })
                .collect();
            let mut acc = ParamGrads::new();
            for r in results {
                let (loss, g) = r?;
                total += loss;
                accumulate(&mut acc, g)?;
            }
            if !total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            model = model.sgd_step(&acc, cfg.lr / batch.len() as f64)?;
            if model.layers().iter().flat_map(|l| &l.params).any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
        }
        curve.push(total / dataset.len() as f64);
    }
    Ok(TrainOutcome { model, loss_curve: curve })
}

pub fn predict(model: &ModelGraph, input: &Tensor) -> Result<usize> {
    let tape = forward(model, input)?;
    let logits = tape.logits();
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

pub fn accuracy(model: &ModelGraph, dataset: &ShapesDataset) -> Result<f64> {
    let hits: Vec<Result<bool>> =
        dataset.images.par_iter().zip(&dataset.labels).map(|(x, &y)| Ok(predict(model, x)? == y)).collect();
    let mut n = 0usize;
    for h in hits {
        n += usize::from(h?);
    }
    Ok(n as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::shapes::generate_shapes;
    use crate::nn::toy_architecture;

    #[test]
    fn zero_lr_leaves_model_unchanged() {
        let ds = generate_shapes(8, 2, 0).unwrap();
        let m = toy_architecture([3, 32, 32], 2, 0).unwrap();
        let out = train_toy(&m, &ds, &TrainConfig { epochs: 2, lr: 0.0, batch_size: 4, seed: 1 }).unwrap();
        assert_eq!(out.model, m);
        assert!((out.loss_curve[0] - out.loss_curve[1]).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = generate_shapes(16, 2, 3).unwrap();
        let m = toy_architecture([3, 32, 32], 2, 0).unwrap();
        let cfg = TrainConfig { epochs: 2, lr: 0.05, batch_size: 4, seed: 5 };
        let a = train_toy(&m, &ds, &cfg).unwrap();
        let b = train_toy(&m, &ds, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_curve, b.loss_curve);
    }

    #[test]
    fn class_mismatch_rejected() {
        let ds = generate_shapes(4, 3, 0).unwrap();
        let m = toy_architecture([3, 32, 32], 2, 0).unwrap();
        assert!(train_toy(&m, &ds, &TrainConfig::default()).is_err());
    }

    #[test]
    fn huge_lr_reports_divergence() {
        let ds = generate_shapes(8, 2, 0).unwrap();
        let m = toy_architecture([3, 32, 32], 2, 0).unwrap();
        let r = train_toy(&m, &ds, &TrainConfig { epochs: 5, lr: 1e200, batch_size: 4, seed: 0 });
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }
}
