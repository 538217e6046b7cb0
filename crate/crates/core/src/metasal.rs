//! Meta-saliency: one inner SGD step on the cross-entropy before running a base method.

use std::fmt;
use std::str::FromStr;

use crate::aggregate::{method_saliency, MethodPreset, SaliencyMap};
use crate::error::{invalid, Result};
use crate::extract::AttachPoint;
use crate::nn::{forward_backward, objective_value, ModelGraph, Objective, ParamGrads};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Direction {
    /// `theta' = theta - 2 eps grad`.
    #[default]
    Descent,
    /// `theta' = theta + 2 eps grad`.
    Ascent,
}

impl FromStr for Direction {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d" | "descent" => Ok(Direction::Descent),
            "a" | "ascent" => Ok(Direction::Ascent),
            _ => Err(invalid(format!("unknown meta direction '{s}'"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Descent => "descent",
            Direction::Ascent => "ascent",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaConfig {
    pub epsilon: f64,
    pub direction: Direction,
}

impl MetaConfig {
    pub fn new(epsilon: f64, direction: Direction) -> Result<Self> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(invalid(format!("meta epsilon must be finite and nonnegative, got {epsilon}")));
        }
        Ok(Self { epsilon, direction })
    }

    pub fn descent(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, Direction::Descent)
    }

    /// Signed SGD learning rate of the inner step.
    fn step_lr(&self) -> f64 {
        match self.direction {
            Direction::Descent => 2.0 * self.epsilon,
            Direction::Ascent => -2.0 * self.epsilon,
        }
    }
}

/// The model after the inner step on `CrossEntropy(class)`. The input model is untouched.
pub fn meta_model(model: &ModelGraph, input: &Tensor, class: usize, cfg: &MetaConfig) -> Result<ModelGraph> {
    MetaConfig::new(cfg.epsilon, cfg.direction)?;
    if cfg.epsilon == 0.0 {
        // Still validates the class.
        Objective::CrossEntropy(class).evaluate(&vec![0.0; model.num_classes()])?;
        return Ok(model.clone());
    }
    let tape = forward_backward(model, input, Objective::CrossEntropy(class))?;
    model.sgd_step(tape.param_grads(), cfg.step_lr())
}

pub fn meta_saliency(
    model: &ModelGraph,
    input: &Tensor,
    class: usize,
    preset: MethodPreset,
    attach: &AttachPoint,
    cfg: &MetaConfig,
) -> Result<SaliencyMap> {
    let stepped = meta_model(model, input, class, cfg)?;
    method_saliency(&stepped, input, class, preset, attach)
}

fn squared_norm(grads: &ParamGrads) -> f64 {
    grads.values().flatten().map(|t| t.data().iter().map(|v| v * v).sum::<f64>()).sum()
}

/// `|phi(eps) - (phi(0) - eps * grad_sq)|` for a loss along the descent ray.
pub fn taylor_residual_along(phi: impl Fn(f64) -> Result<f64>, grad_sq: f64, epsilons: &[f64]) -> Result<Vec<f64>> {
    if epsilons.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(invalid("epsilons must be finite and nonnegative"));
    }
    let base = phi(0.0)?;
    epsilons.iter().map(|&e| Ok((phi(e)? - (base - e * grad_sq)).abs())).collect()
}

/// First-order Taylor residual of `l(theta - eps grad l)` for the cross-entropy at `class`.
pub fn taylor_residual(model: &ModelGraph, input: &Tensor, class: usize, epsilons: &[f64]) -> Result<Vec<f64>> {
    let objective = Objective::CrossEntropy(class);
    let tape = forward_backward(model, input, objective)?;
    let grads = tape.param_grads();
    let phi = |e: f64| {
        if e == 0.0 {
            return tape.loss().ok_or_else(|| invalid("tape holds no loss"));
        }
        objective_value(&model.sgd_step(grads, e)?, input, objective)
    };
    taylor_residual_along(phi, squared_norm(grads), epsilons)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract::AttachPoint;
    use crate::nn::{ModelBuilder, ParamGrads};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// A smooth (ReLU-free) net so finite differences never cross a kink.
    fn smooth_net(seed: u64) -> (ModelGraph, Tensor) {
        let model = ModelBuilder::new([2, 6, 6], seed)
            .conv("c1", 3, 4)
            .and_then(|b| b.scaling("s1"))
            .and_then(|b| b.bias("b1"))
            .and_then(|b| b.conv("c2", 3, 4))
            .and_then(|b| b.global_avg_pool("gap"))
            .and_then(|b| b.fully_connected("fc", 3))
            .and_then(|b| b.build())
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut model = model;
        for layer in model.layers_mut() {
            for p in layer.params.iter_mut() {
                for v in p.data_mut() {
                    *v += rng.random_range(-0.3..0.3);
                }
            }
        }
        let x = Tensor::new(vec![2, 6, 6], (0..72).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        (model, x)
    }

    #[test]
    fn zero_epsilon_is_bit_identical() {
        let (model, x) = smooth_net(1);
        let attach = AttachPoint::output("c1");
        for preset in MethodPreset::ALL {
            if preset == MethodPreset::NormGradReal {
                continue;
            }
            let base = method_saliency(&model, &x, 2, preset, &attach).unwrap();
            for dir in [Direction::Descent, Direction::Ascent] {
                let meta = meta_saliency(&model, &x, 2, preset, &attach, &MetaConfig::new(0.0, dir).unwrap()).unwrap();
                assert_eq!(base, meta);
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let (model, x) = smooth_net(2);
        assert!(MetaConfig::new(-1.0, Direction::Descent).is_err());
        assert!(MetaConfig::new(f64::NAN, Direction::Descent).is_err());
        assert!(meta_model(&model, &x, 9, &MetaConfig::descent(0.0).unwrap()).is_err());
        assert!(meta_model(&model, &x, 9, &MetaConfig::descent(0.1).unwrap()).is_err());
    }

    #[test]
    fn original_model_untouched() {
        let (model, x) = smooth_net(3);
        let before = model.clone();
        let stepped = meta_model(&model, &x, 0, &MetaConfig::descent(0.01).unwrap()).unwrap();
        assert_eq!(model, before);
        assert_ne!(stepped, before);
    }

    #[test]
    fn quadratic_residual_closed_form() {
        let theta = 1.7_f64;
        // l(t) = t^2 / 2, grad = t, so phi(e) = (t - e t)^2 / 2.
        let phi = |e: f64| Ok((theta - e * theta).powi(2) / 2.0);
        let eps = [0.0, 0.1, 0.05, 0.025];
        let r = taylor_residual_along(phi, theta * theta, &eps).unwrap();
        for (e, r) in eps.iter().zip(r) {
            let expect = e * e * theta * theta / 2.0;
            assert!((r - expect).abs() < 1e-15, "{r} vs {expect}");
        }
    }

    #[test]
    fn residual_is_second_order() {
        let (model, x) = smooth_net(4);
        let eps = [4e-3, 2e-3, 1e-3, 5e-4];
        let r = taylor_residual(&model, &x, 1, &eps).unwrap();
        for w in r.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.4..=4.6).contains(&ratio), "ratio {ratio} from {r:?}");
        }
        assert_eq!(taylor_residual(&model, &x, 1, &[0.0]).unwrap(), vec![0.0]);
    }

    fn flat(grads: &ParamGrads) -> Vec<f64> {
        grads.values().flatten().flat_map(|t| t.data().to_vec()).collect()
    }

    #[test]
    fn stepped_gradient_matches_meta_loss_gradient() {
        let (model, x) = smooth_net(5);
        let eps = 1e-3;
        let obj = Objective::CrossEntropy(0);
        let meta_loss = |m: &ModelGraph| {
            let g = forward_backward(m, &x, obj).unwrap().into_param_grads();
            objective_value(&m.sgd_step(&g, eps).unwrap(), &x, obj).unwrap()
        };
        let stepped = meta_model(&model, &x, 0, &MetaConfig::descent(eps).unwrap()).unwrap();
        let analytic = flat(forward_backward(&stepped, &x, obj).unwrap().param_grads());

        let h = 1e-5;
        let mut numeric = Vec::new();
        for (li, layer) in model.layers().iter().enumerate() {
            for (pi, p) in layer.params.iter().enumerate() {
                for i in 0..p.numel() {
                    let shifted = |d: f64| {
                        let mut m = model.clone();
                        m.layers_mut()[li].params[pi].data_mut()[i] += d;
                        meta_loss(&m)
                    };
                    numeric.push((shifted(h) - shifted(-h)) / (2.0 * h));
                }
            }
        }
        // ParamGrads iterate layers by name; reorder the numeric vector to match.
        let mut by_name: Vec<(String, Vec<f64>)> = Vec::new();
        let mut off = 0;
        for layer in model.layers() {
            let n: usize = layer.params.iter().map(Tensor::numel).sum();
            if n > 0 {
                by_name.push((layer.name.clone(), numeric[off..off + n].to_vec()));
            }
            off += n;
        }
        by_name.sort_by(|a, b| a.0.cmp(&b.0));
        let numeric: Vec<f64> = by_name.into_iter().flat_map(|(_, v)| v).collect();

        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm <= 10.0 * eps, "relative error {}", diff / norm);
    }

    #[test]
    fn ascent_and_descent_are_symmetric() {
        let (model, x) = smooth_net(6);
        let d = meta_model(&model, &x, 1, &MetaConfig::new(0.01, Direction::Descent).unwrap()).unwrap();
        let a = meta_model(&model, &x, 1, &MetaConfig::new(0.01, Direction::Ascent).unwrap()).unwrap();
        for ((lm, ld), la) in model.layers().iter().zip(d.layers()).zip(a.layers()) {
            for ((p, pd), pa) in lm.params.iter().zip(&ld.params).zip(&la.params) {
                for ((t, td), ta) in p.data().iter().zip(pd.data()).zip(pa.data()) {
                    // Each of the two steps rounds once, so allow two half-ulps of the operands.
                    let ulp = f64::EPSILON * td.abs().max(ta.abs()).max(t.abs());
                    assert!((td + ta - 2.0 * t).abs() <= 2.0 * ulp, "{td} + {ta} vs 2 * {t}");
                }
            }
        }
    }
}
