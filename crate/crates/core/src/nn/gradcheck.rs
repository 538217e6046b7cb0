//! Central finite-difference verification of the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::layer::{pool_argmax, LayerKind};
use crate::nn::model::{ModelBuilder, ModelGraph};
use crate::nn::tape::{forward, forward_backward, Objective, Tape};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so near-zero gradients are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst relative error per layer name, plus `"input"`.
    pub per_target: Vec<(String, f64)>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU or max-pool switch.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.checked += other.checked;
        self.skipped += other.skipped;
        for (name, e) in other.per_target {
            match self.per_target.iter_mut().find(|(n, _)| *n == name) {
                Some((_, cur)) => *cur = cur.max(e),
                None => self.per_target.push((name, e)),
            }
        }
    }
}

// ReLU masks and max-pool argmaxes; equal patterns mean the loss is smooth between the two points.
fn activation_pattern(model: &ModelGraph, tape: &Tape) -> Vec<usize> {
    let mut out = Vec::new();
    for (j, layer) in model.layers().iter().enumerate() {
        let x = tape.x_in(j);
        match layer.kind {
            LayerKind::Relu => out.extend(x.data().iter().map(|&v| usize::from(v > 0.0))),
            LayerKind::MaxPool2 => {
                let (k, h, w) = x.dims3().expect("spatial");
                for c in 0..k {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            out.push(pool_argmax(x.data(), c, h, w, oy, ox));
                        }
                    }
                }
            }
            _ => {}
        }
    }
    out
}

fn eval(model: &ModelGraph, input: &Tensor, objective: Objective) -> Result<(f64, Vec<usize>)> {
    let tape = forward(model, input)?;
    let value = objective.evaluate(tape.logits())?.0;
    Ok((value, activation_pattern(model, &tape)))
}

/// Compares every parameter and input gradient against central differences with step `h`.
pub fn check_model(model: &ModelGraph, input: &Tensor, objective: Objective, h: f64) -> Result<GradCheckReport> {
    let tape = forward_backward(model, input, objective)?;
    let base_pattern = activation_pattern(model, &tape);
    let mut report = GradCheckReport { max_rel_err: 0.0, per_target: vec![], checked: 0, skipped: 0 };

    for (li, layer) in model.layers().iter().enumerate() {
        if layer.params.is_empty() {
            continue;
        }
        let grads = &tape.param_grads()[&layer.name];
        let mut worst = 0.0f64;
        for (pi, param) in layer.params.iter().enumerate() {
            for i in 0..param.numel() {
                let perturbed = |delta: f64| -> Result<(f64, Vec<usize>)> {
                    let mut m = model.clone();
                    m.layers_mut()[li].params[pi].data_mut()[i] += delta;
                    eval(&m, input, objective)
                };
                let (fp, pp) = perturbed(h)?;
                let (fm, pm) = perturbed(-h)?;
                if pp != base_pattern || pm != base_pattern {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * h);
                worst = worst.max(relative_error(grads[pi].data()[i], numeric));
                report.checked += 1;
            }
        }
        report.per_target.push((layer.name.clone(), worst));
        report.max_rel_err = report.max_rel_err.max(worst);
    }

    let g_input = tape.g_in(0)?;
    let mut worst = 0.0f64;
    for i in 0..input.numel() {
        let perturbed = |delta: f64| -> Result<(f64, Vec<usize>)> {
            let mut x = input.clone();
            x.data_mut()[i] += delta;
            eval(model, &x, objective)
        };
        let (fp, pp) = perturbed(h)?;
        let (fm, pm) = perturbed(-h)?;
        if pp != base_pattern || pm != base_pattern {
            report.skipped += 1;
            continue;
        }
        worst = worst.max(relative_error(g_input.data()[i], (fp - fm) / (2.0 * h)));
        report.checked += 1;
    }
    report.per_target.push(("input".into(), worst));
    report.max_rel_err = report.max_rel_err.max(worst);
    Ok(report)
}

/// A small random chain covering every layer kind across even/odd seeds,
/// with a random input and objective.
pub fn random_net(seed: u64) -> Result<(ModelGraph, Tensor, Objective)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c_in = rng.random_range(1..=3);
    let hw = rng.random_range(4..=6);
    let classes = rng.random_range(2..=4);
    let b = ModelBuilder::new([c_in, hw, hw], seed ^ 0x5eed);
    let model = if seed.is_multiple_of(2) {
        b.conv("conv_a", 3, 3)?
            .scaling("scale_a")?
            .bias("bias_a")?
            .relu("relu_a")?
            .maxpool("pool_a")?
            .conv("conv_b", 1, 4)?
            .global_avg_pool("gap")?
            .fully_connected("fc", classes)?
            .build()?
    } else {
        b.conv("conv_a", 5, 2)?
            .bias("bias_a")?
            .relu("relu_a")?
            .conv("conv_b", 3, 3)?
            .scaling("scale_b")?
            .maxpool("pool_b")?
            .flatten("flat")?
            .fully_connected("fc", classes)?
            .build()?
    };
    let mut model = model;
    for layer in model.layers_mut() {
        match layer.kind {
            LayerKind::Bias { .. } => {
                for v in layer.params[0].data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
            LayerKind::Scaling { .. } => {
                for v in layer.params[0].data_mut() {
                    *v = rng.random_range(0.5..1.5) * if rng.random_bool(0.3) { -1.0 } else { 1.0 };
                }
            }
            LayerKind::FullyConnected { .. } => {
                for v in layer.params[1].data_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
            }
            _ => {}
        }
    }
    let shape = model.input_shape();
    let n = shape.iter().product();
    let input = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let class = rng.random_range(0..classes);
    let objective = if rng.random_bool(0.5) { Objective::CrossEntropy(class) } else { Objective::ClassLogit(class) };
    Ok((model, input, objective))
}

/// Runs [`check_model`] on `count` random nets starting at `seed`.
pub fn check_random_nets(seed: u64, count: u64, h: f64) -> Result<GradCheckReport> {
    let mut total = GradCheckReport { max_rel_err: 0.0, per_target: vec![], checked: 0, skipped: 0 };
    for s in seed..seed + count {
        let (model, input, objective) = random_net(s)?;
        total.merge(check_model(&model, &input, objective, h)?);
    }
    Ok(total)
}
